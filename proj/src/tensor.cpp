#include "rflow/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace rflow {

size_t shape_numel(const Shape& shape) {
    size_t n = 1;
    for (size_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace {

thread_local int g_no_grad_depth = 0;

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<double> value,
                                        bool requires_grad) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->leaf = true;
    return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    check(a.shape() == b.shape(), Err::ShapeMismatch,
          std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// Builds an op node; records the tape entry only when grad mode is on and
// some input needs gradients.
Tensor make_op_node(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                    std::function<void(detail::Node&)> backprop) {
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool track = false;
    if (grad_enabled()) {
        for (const auto& in : inputs)
            if (in.requires_grad()) track = true;
    }
    if (track) {
        n->requires_grad = true;
        n->leaf = false;
        n->inputs.reserve(inputs.size());
        for (auto& in : inputs) n->inputs.push_back(in.node());
        n->backprop = std::move(backprop);
    }
    return Tensor(n);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    size_t n = shape_numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check(shape_numel(shape) == data.size(), Err::ShapeMismatch,
          "from_data: " + shape_str(shape) + " cannot hold " + std::to_string(data.size()) +
              " values");
    return Tensor(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double v) { return from_data({1}, {v}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev, bool requires_grad) {
    std::vector<double> d(shape_numel(shape));
    for (auto& x : d) x = rng.normal() * stddev;
    return Tensor(make_leaf(shape, std::move(d), requires_grad));
}

double Tensor::item() const {
    check(numel() == 1, Err::NotScalar, "item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
}

Tensor& Tensor::set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
}

const std::vector<double>& Tensor::grad() const {
    static const std::vector<double> empty;
    return node_->grad.empty() ? empty : node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() const {
    check(numel() == 1, Err::NotScalar,
          "backward() from tensor of shape " + shape_str(shape()));
    check(static_cast<bool>(node_->backprop), Err::NoTape,
          "backward() requires a live tape; re-run the forward pass");

    // Topological order over the recorded subgraph. Shared ownership keeps
    // interior nodes alive while the sweep below releases tape edges.
    std::vector<std::shared_ptr<detail::Node>> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<std::shared_ptr<detail::Node>, size_t>> stack;
    stack.emplace_back(node_, 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->inputs.size()) {
            const auto& child = n->inputs[idx++];
            if (child->backprop && seen.insert(child.get()).second)
                stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node& n = **it;
        n.ensure_grad();
        n.backprop(n);
        // Consume the tape entry and free intermediate state.
        n.backprop = nullptr;
        n.inputs.clear();
        n.grad.clear();
        n.grad.shrink_to_fit();
    }
}

// ---- elementwise --------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op_node(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op_node(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] -= n.grad[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    const auto& bv = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    auto an = a.node();
    auto bn = b.node();
    return make_op_node(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node& n) {
        if (an->requires_grad) {
            an->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) bn->grad[i] += n.grad[i] * an->value[i];
        }
    });
}

Tensor add_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + s;
    auto an = a.node();
    return make_op_node(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i];
    });
}

Tensor mul_scalar(const Tensor& a, double s) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
    auto an = a.node();
    return make_op_node(a.shape(), std::move(out), {a}, [an, s](detail::Node& n) {
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) an->grad[i] += n.grad[i] * s;
    });
}

Tensor exp(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = std::exp(av[i]);
    auto an = a.node();
    std::vector<double> cached = out;
    return make_op_node(a.shape(), std::move(out), {a},
                        [an, cached = std::move(cached)](detail::Node& n) {
                            an->ensure_grad();
                            for (size_t i = 0; i < n.grad.size(); ++i)
                                an->grad[i] += n.grad[i] * cached[i];
                        });
}

Tensor silu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const auto& av = a.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * sigmoid(av[i]);
    auto an = a.node();
    return make_op_node(a.shape(), std::move(out), {a}, [an](detail::Node& n) {
        an->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) {
            double x = an->value[i];
            double s = sigmoid(x);
            an->grad[i] += n.grad[i] * s * (1.0 + x * (1.0 - s));
        }
    });
}

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return make_op_node({1}, {acc}, {a}, [an](detail::Node& n) {
        an->ensure_grad();
        double g = n.grad[0];
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
}

Tensor mean(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    double inv_n = 1.0 / static_cast<double>(a.numel());
    auto an = a.node();
    return make_op_node({1}, {acc * inv_n}, {a}, [an, inv_n](detail::Node& n) {
        an->ensure_grad();
        double g = n.grad[0] * inv_n;
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += g;
    });
}

// ---- linear --------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
    check(x.rank() == 2 && w.rank() == 2 && bias.rank() == 1, Err::ShapeMismatch,
          "linear: expected x[B,I], w[I,O], bias[O]");
    size_t B = x.shape()[0], I = x.shape()[1];
    check(w.shape()[0] == I, Err::ShapeMismatch,
          "linear: inner extents " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
    size_t O = w.shape()[1];
    check(bias.shape()[0] == O, Err::ShapeMismatch, "linear: bias extent != output extent");

    std::vector<double> out(B * O);
    const auto& xv = x.data();
    const auto& wv = w.data();
    const auto& bv = bias.data();
    for (size_t b = 0; b < B; ++b) {
        for (size_t o = 0; o < O; ++o) out[b * O + o] = bv[o];
        for (size_t i = 0; i < I; ++i) {
            double xi = xv[b * I + i];
            const double* wrow = &wv[i * O];
            double* orow = &out[b * O];
            for (size_t o = 0; o < O; ++o) orow[o] += xi * wrow[o];
        }
    }
    auto xn = x.node();
    auto wn = w.node();
    auto bn = bias.node();
    return make_op_node({B, O}, std::move(out), {x, w, bias},
                        [xn, wn, bn, B, I, O](detail::Node& n) {
                            const auto& g = n.grad;
                            if (xn->requires_grad) {
                                xn->ensure_grad();
                                for (size_t b = 0; b < B; ++b)
                                    for (size_t i = 0; i < I; ++i) {
                                        double acc = 0.0;
                                        const double* wrow = &wn->value[i * O];
                                        const double* grow = &g[b * O];
                                        for (size_t o = 0; o < O; ++o) acc += grow[o] * wrow[o];
                                        xn->grad[b * I + i] += acc;
                                    }
                            }
                            if (wn->requires_grad) {
                                wn->ensure_grad();
                                for (size_t b = 0; b < B; ++b)
                                    for (size_t i = 0; i < I; ++i) {
                                        double xi = xn->value[b * I + i];
                                        const double* grow = &g[b * O];
                                        double* wg = &wn->grad[i * O];
                                        for (size_t o = 0; o < O; ++o) wg[o] += xi * grow[o];
                                    }
                            }
                            if (bn->requires_grad) {
                                bn->ensure_grad();
                                for (size_t b = 0; b < B; ++b)
                                    for (size_t o = 0; o < O; ++o) bn->grad[o] += g[b * O + o];
                            }
                        });
}

// ---- conv3d ----------------------------------------------------------------

namespace {

struct ConvDims {
    size_t B, Cin, D, H, W;
    size_t Cout, kd, kh, kw;
    size_t Do, Ho, Wo;
    int stride, pad;
};

ConvDims conv_dims(const Tensor& x, const Tensor& k, int stride, int pad) {
    check(stride >= 1, Err::InvalidStride, "conv3d: stride " + std::to_string(stride));
    check(x.rank() == 5 && k.rank() == 5, Err::ShapeMismatch,
          "conv3d: expected x[B,Cin,D,H,W], k[Cout,Cin,kd,kh,kw]");
    ConvDims d;
    d.B = x.shape()[0];
    d.Cin = x.shape()[1];
    d.D = x.shape()[2];
    d.H = x.shape()[3];
    d.W = x.shape()[4];
    d.Cout = k.shape()[0];
    d.kd = k.shape()[2];
    d.kh = k.shape()[3];
    d.kw = k.shape()[4];
    d.stride = stride;
    d.pad = pad;
    check(k.shape()[1] == d.Cin, Err::ShapeMismatch, "conv3d: kernel Cin mismatch");
    check(d.kd % 2 == 1 && d.kh % 2 == 1 && d.kw % 2 == 1, Err::ShapeMismatch,
          "conv3d: kernel extents must be odd");
    auto out_extent = [&](size_t in, size_t kk) -> size_t {
        long span = static_cast<long>(in) + 2L * pad - static_cast<long>(kk);
        check(span >= 0, Err::ShapeMismatch,
              "conv3d: extent " + std::to_string(in) + " smaller than kernel");
        return static_cast<size_t>(span / stride) + 1;
    };
    d.Do = out_extent(d.D, d.kd);
    d.Ho = out_extent(d.H, d.kh);
    d.Wo = out_extent(d.W, d.kw);
    return d;
}

// Shared tap-walk for the forward pass and both gradient scatters.
template <typename Body>
inline void conv_positions(const ConvDims& c, Body&& body) {
    for (size_t od = 0; od < c.Do; ++od) {
        long id0 = static_cast<long>(od) * c.stride - c.pad;
        size_t zlo = static_cast<size_t>(std::max(0L, -id0));
        size_t zhi = std::min(c.kd, static_cast<size_t>(std::max(0L, static_cast<long>(c.D) - id0)));
        for (size_t oh = 0; oh < c.Ho; ++oh) {
            long ih0 = static_cast<long>(oh) * c.stride - c.pad;
            size_t ylo = static_cast<size_t>(std::max(0L, -ih0));
            size_t yhi =
                std::min(c.kh, static_cast<size_t>(std::max(0L, static_cast<long>(c.H) - ih0)));
            for (size_t ow = 0; ow < c.Wo; ++ow) {
                long iw0 = static_cast<long>(ow) * c.stride - c.pad;
                size_t xlo = static_cast<size_t>(std::max(0L, -iw0));
                size_t xhi = std::min(
                    c.kw, static_cast<size_t>(std::max(0L, static_cast<long>(c.W) - iw0)));
                body(od, oh, ow, id0, ih0, iw0, zlo, zhi, ylo, yhi, xlo, xhi);
            }
        }
    }
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& k, int stride, int pad) {
    ConvDims c = conv_dims(x, k, stride, pad);
    std::vector<double> out(c.B * c.Cout * c.Do * c.Ho * c.Wo, 0.0);
    const auto& xv = x.data();
    const auto& kv = k.data();

    const size_t xs_c = c.D * c.H * c.W;
    const size_t ks_c = c.kd * c.kh * c.kw;
    for (size_t b = 0; b < c.B; ++b) {
        const double* xb = &xv[b * c.Cin * xs_c];
        for (size_t co = 0; co < c.Cout; ++co) {
            const double* kc = &kv[co * c.Cin * ks_c];
            double* ob = &out[(b * c.Cout + co) * c.Do * c.Ho * c.Wo];
            conv_positions(c, [&](size_t od, size_t oh, size_t ow, long id0, long ih0, long iw0,
                                  size_t zlo, size_t zhi, size_t ylo, size_t yhi, size_t xlo,
                                  size_t xhi) {
                double acc = 0.0;
                for (size_t ci = 0; ci < c.Cin; ++ci) {
                    const double* xc = &xb[ci * xs_c];
                    const double* kk = &kc[ci * ks_c];
                    for (size_t kz = zlo; kz < zhi; ++kz) {
                        size_t id = static_cast<size_t>(id0 + static_cast<long>(kz));
                        for (size_t ky = ylo; ky < yhi; ++ky) {
                            size_t ih = static_cast<size_t>(ih0 + static_cast<long>(ky));
                            const double* xrow = &xc[(id * c.H + ih) * c.W];
                            const double* krow = &kk[(kz * c.kh + ky) * c.kw];
                            for (size_t kx = xlo; kx < xhi; ++kx)
                                acc += xrow[static_cast<size_t>(iw0 + static_cast<long>(kx))] *
                                       krow[kx];
                        }
                    }
                }
                ob[(od * c.Ho + oh) * c.Wo + ow] = acc;
            });
        }
    }

    auto xn = x.node();
    auto kn = k.node();
    return make_op_node({c.B, c.Cout, c.Do, c.Ho, c.Wo}, std::move(out), {x, k},
                        [xn, kn, c, xs_c, ks_c](detail::Node& n) {
                            const auto& g = n.grad;
                            const size_t os_c = c.Do * c.Ho * c.Wo;
                            bool gx = xn->requires_grad, gk = kn->requires_grad;
                            if (gx) xn->ensure_grad();
                            if (gk) kn->ensure_grad();
                            for (size_t b = 0; b < c.B; ++b) {
                                for (size_t co = 0; co < c.Cout; ++co) {
                                    const double* gb = &g[(b * c.Cout + co) * os_c];
                                    conv_positions(c, [&](size_t od, size_t oh, size_t ow,
                                                          long id0, long ih0, long iw0,
                                                          size_t zlo, size_t zhi, size_t ylo,
                                                          size_t yhi, size_t xlo, size_t xhi) {
                                        double go = gb[(od * c.Ho + oh) * c.Wo + ow];
                                        if (go == 0.0) return;
                                        for (size_t ci = 0; ci < c.Cin; ++ci) {
                                            const double* xc =
                                                &xn->value[(b * c.Cin + ci) * xs_c];
                                            const double* kk =
                                                &kn->value[(co * c.Cin + ci) * ks_c];
                                            double* xg = gx ? &xn->grad[(b * c.Cin + ci) * xs_c]
                                                            : nullptr;
                                            double* kg = gk ? &kn->grad[(co * c.Cin + ci) * ks_c]
                                                            : nullptr;
                                            for (size_t kz = zlo; kz < zhi; ++kz) {
                                                size_t id = static_cast<size_t>(
                                                    id0 + static_cast<long>(kz));
                                                for (size_t ky = ylo; ky < yhi; ++ky) {
                                                    size_t ih = static_cast<size_t>(
                                                        ih0 + static_cast<long>(ky));
                                                    size_t xbase = (id * c.H + ih) * c.W;
                                                    size_t kbase = (kz * c.kh + ky) * c.kw;
                                                    for (size_t kx = xlo; kx < xhi; ++kx) {
                                                        size_t iw = static_cast<size_t>(
                                                            iw0 + static_cast<long>(kx));
                                                        if (gx)
                                                            xg[xbase + iw] +=
                                                                go * kk[kbase + kx];
                                                        if (gk)
                                                            kg[kbase + kx] +=
                                                                go * xc[xbase + iw];
                                                    }
                                                }
                                            }
                                        }
                                    });
                                }
                            }
                        });
}

// ---- group_norm ------------------------------------------------------------

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
    check(x.rank() >= 2, Err::ShapeMismatch, "group_norm: expected [B,C,...]");
    size_t B = x.shape()[0], C = x.shape()[1];
    check(groups >= 1 && C % static_cast<size_t>(groups) == 0, Err::ShapeMismatch,
          "group_norm: C=" + std::to_string(C) + " not divisible by groups=" +
              std::to_string(groups));
    check(gamma.rank() == 1 && gamma.shape()[0] == C, Err::ShapeMismatch,
          "group_norm: gamma extent != C");
    check(beta.rank() == 1 && beta.shape()[0] == C, Err::ShapeMismatch,
          "group_norm: beta extent != C");

    size_t S = x.numel() / (B * C);          // spatial extent
    size_t G = static_cast<size_t>(groups);
    size_t Cg = C / G;
    size_t group_n = Cg * S;

    const auto& xv = x.data();
    const auto& gv = gamma.data();
    const auto& bv = beta.data();
    std::vector<double> xhat(x.numel());
    std::vector<double> inv_std(B * G);
    std::vector<double> out(x.numel());

    for (size_t b = 0; b < B; ++b) {
        for (size_t g = 0; g < G; ++g) {
            size_t base = (b * C + g * Cg) * S;
            double m = 0.0;
            for (size_t i = 0; i < group_n; ++i) m += xv[base + i];
            m /= static_cast<double>(group_n);
            double var = 0.0;
            for (size_t i = 0; i < group_n; ++i) {
                double d = xv[base + i] - m;
                var += d * d;
            }
            var /= static_cast<double>(group_n);
            double is = 1.0 / std::sqrt(var + eps);
            inv_std[b * G + g] = is;
            for (size_t c = 0; c < Cg; ++c) {
                size_t ch = g * Cg + c;
                double ga = gv[ch], be = bv[ch];
                size_t off = (b * C + ch) * S;
                for (size_t s = 0; s < S; ++s) {
                    double xh = (xv[off + s] - m) * is;
                    xhat[off + s] = xh;
                    out[off + s] = ga * xh + be;
                }
            }
        }
    }

    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    return make_op_node(
        x.shape(), std::move(out), {x, gamma, beta},
        [xn, gn, bn, B, C, S, G, Cg, group_n, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](detail::Node& n) {
            const auto& g = n.grad;
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (size_t b = 0; b < B; ++b)
                    for (size_t ch = 0; ch < C; ++ch) {
                        size_t off = (b * C + ch) * S;
                        double acc = 0.0;
                        for (size_t s = 0; s < S; ++s) acc += g[off + s] * xhat[off + s];
                        gn->grad[ch] += acc;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (size_t b = 0; b < B; ++b)
                    for (size_t ch = 0; ch < C; ++ch) {
                        size_t off = (b * C + ch) * S;
                        double acc = 0.0;
                        for (size_t s = 0; s < S; ++s) acc += g[off + s];
                        bn->grad[ch] += acc;
                    }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                // dx = inv_std * (dxh - mean(dxh) - xhat * mean(dxh*xhat))
                for (size_t b = 0; b < B; ++b) {
                    for (size_t gr = 0; gr < G; ++gr) {
                        size_t base = (b * C + gr * Cg) * S;
                        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                        for (size_t c = 0; c < Cg; ++c) {
                            double ga = gn->value[gr * Cg + c];
                            size_t off = base + c * S;
                            for (size_t s = 0; s < S; ++s) {
                                double dxh = g[off + s] * ga;
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xhat[off + s];
                            }
                        }
                        double m1 = sum_dxh / static_cast<double>(group_n);
                        double m2 = sum_dxh_xh / static_cast<double>(group_n);
                        double is = inv_std[b * G + gr];
                        for (size_t c = 0; c < Cg; ++c) {
                            double ga = gn->value[gr * Cg + c];
                            size_t off = base + c * S;
                            for (size_t s = 0; s < S; ++s) {
                                double dxh = g[off + s] * ga;
                                xn->grad[off + s] += is * (dxh - m1 - xhat[off + s] * m2);
                            }
                        }
                    }
                }
            }
        });
}

// ---- losses ----------------------------------------------------------------

Tensor l1_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "l1_loss");
    const auto& pv = pred.data();
    const auto& tv = target.data();
    double acc = 0.0;
    for (size_t i = 0; i < pv.size(); ++i) acc += std::abs(pv[i] - tv[i]);
    double inv_n = 1.0 / static_cast<double>(pv.size());
    auto pn = pred.node();
    auto tn = target.node();
    return make_op_node({1}, {acc * inv_n}, {pred, target}, [pn, tn, inv_n](detail::Node& n) {
        double g = n.grad[0] * inv_n;
        // subgradient at 0 is 0
        auto sign = [](double d) { return d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0); };
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (size_t i = 0; i < pn->grad.size(); ++i)
                pn->grad[i] += g * sign(pn->value[i] - tn->value[i]);
        }
        if (tn->requires_grad) {
            tn->ensure_grad();
            for (size_t i = 0; i < tn->grad.size(); ++i)
                tn->grad[i] -= g * sign(pn->value[i] - tn->value[i]);
        }
    });
}

Tensor mse_loss(const Tensor& pred, const Tensor& target) {
    check_same_shape(pred, target, "mse_loss");
    const auto& pv = pred.data();
    const auto& tv = target.data();
    double acc = 0.0;
    for (size_t i = 0; i < pv.size(); ++i) {
        double d = pv[i] - tv[i];
        acc += d * d;
    }
    double inv_n = 1.0 / static_cast<double>(pv.size());
    auto pn = pred.node();
    auto tn = target.node();
    return make_op_node({1}, {acc * inv_n}, {pred, target}, [pn, tn, inv_n](detail::Node& n) {
        double g = 2.0 * n.grad[0] * inv_n;
        if (pn->requires_grad) {
            pn->ensure_grad();
            for (size_t i = 0; i < pn->grad.size(); ++i)
                pn->grad[i] += g * (pn->value[i] - tn->value[i]);
        }
        if (tn->requires_grad) {
            tn->ensure_grad();
            for (size_t i = 0; i < tn->grad.size(); ++i)
                tn->grad[i] -= g * (pn->value[i] - tn->value[i]);
        }
    });
}

// ---- structural ops ----------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& xs) {
    check(!xs.empty(), Err::ShapeMismatch, "concat_channels: no inputs");
    const Shape& s0 = xs[0].shape();
    check(s0.size() >= 2, Err::ShapeMismatch, "concat_channels: rank must be >= 2");
    size_t B = s0[0];
    size_t rest = 1;
    for (size_t i = 2; i < s0.size(); ++i) rest *= s0[i];
    size_t total_c = 0;
    for (const auto& x : xs) {
        check(x.rank() == s0.size() && x.shape()[0] == B, Err::ShapeMismatch,
              "concat_channels: batch/rank mismatch");
        for (size_t i = 2; i < s0.size(); ++i)
            check(x.shape()[i] == s0[i], Err::ShapeMismatch,
                  "concat_channels: trailing extent mismatch");
        total_c += x.shape()[1];
    }

    Shape out_shape = s0;
    out_shape[1] = total_c;
    std::vector<double> out(B * total_c * rest);
    size_t coff = 0;
    for (const auto& x : xs) {
        size_t ci = x.shape()[1];
        const auto& xv = x.data();
        for (size_t b = 0; b < B; ++b)
            std::copy(xv.begin() + b * ci * rest, xv.begin() + (b + 1) * ci * rest,
                      out.begin() + (b * total_c + coff) * rest);
        coff += ci;
    }

    std::vector<std::shared_ptr<detail::Node>> nodes;
    std::vector<size_t> channels;
    for (const auto& x : xs) {
        nodes.push_back(x.node());
        channels.push_back(x.shape()[1]);
    }
    return make_op_node(std::move(out_shape), std::move(out), xs,
                        [nodes, channels, B, total_c, rest](detail::Node& n) {
                            size_t coff = 0;
                            for (size_t k = 0; k < nodes.size(); ++k) {
                                auto& in = nodes[k];
                                size_t ci = channels[k];
                                if (in->requires_grad) {
                                    in->ensure_grad();
                                    for (size_t b = 0; b < B; ++b) {
                                        const double* src = &n.grad[(b * total_c + coff) * rest];
                                        double* dst = &in->grad[b * ci * rest];
                                        for (size_t i = 0; i < ci * rest; ++i) dst[i] += src[i];
                                    }
                                }
                                coff += ci;
                            }
                        });
}

Tensor upsample_nearest2(const Tensor& x) {
    check(x.rank() == 5, Err::ShapeMismatch, "upsample_nearest2: expected [B,C,D,H,W]");
    size_t B = x.shape()[0], C = x.shape()[1], D = x.shape()[2], H = x.shape()[3],
           W = x.shape()[4];
    size_t D2 = D * 2, H2 = H * 2, W2 = W * 2;
    std::vector<double> out(B * C * D2 * H2 * W2);
    const auto& xv = x.data();
    for (size_t bc = 0; bc < B * C; ++bc) {
        const double* src = &xv[bc * D * H * W];
        double* dst = &out[bc * D2 * H2 * W2];
        for (size_t d = 0; d < D2; ++d)
            for (size_t h = 0; h < H2; ++h) {
                const double* srow = &src[((d / 2) * H + h / 2) * W];
                double* drow = &dst[(d * H2 + h) * W2];
                for (size_t w = 0; w < W2; ++w) drow[w] = srow[w / 2];
            }
    }
    auto xn = x.node();
    return make_op_node({B, C, D2, H2, W2}, std::move(out), {x},
                        [xn, B, C, D, H, W, D2, H2, W2](detail::Node& n) {
                            xn->ensure_grad();
                            for (size_t bc = 0; bc < B * C; ++bc) {
                                const double* g = &n.grad[bc * D2 * H2 * W2];
                                double* xg = &xn->grad[bc * D * H * W];
                                for (size_t d = 0; d < D2; ++d)
                                    for (size_t h = 0; h < H2; ++h) {
                                        double* xrow = &xg[((d / 2) * H + h / 2) * W];
                                        const double* grow = &g[(d * H2 + h) * W2];
                                        for (size_t w = 0; w < W2; ++w) xrow[w / 2] += grow[w];
                                    }
                            }
                        });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    check(x.rank() >= 2, Err::ShapeMismatch, "add_channel_bias: expected [B,C,...]");
    size_t B = x.shape()[0], C = x.shape()[1];
    check(bias.rank() == 1 && bias.shape()[0] == C, Err::ShapeMismatch,
          "add_channel_bias: bias extent != C");
    size_t S = x.numel() / (B * C);
    std::vector<double> out(x.numel());
    const auto& xv = x.data();
    const auto& bv = bias.data();
    for (size_t b = 0; b < B; ++b)
        for (size_t c = 0; c < C; ++c) {
            double off = bv[c];
            size_t base = (b * C + c) * S;
            for (size_t s = 0; s < S; ++s) out[base + s] = xv[base + s] + off;
        }
    auto xn = x.node();
    auto bn = bias.node();
    return make_op_node(x.shape(), std::move(out), {x, bias}, [xn, bn, B, C, S](detail::Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        }
        if (bn->requires_grad) {
            bn->ensure_grad();
            for (size_t b = 0; b < B; ++b)
                for (size_t c = 0; c < C; ++c) {
                    size_t base = (b * C + c) * S;
                    double acc = 0.0;
                    for (size_t s = 0; s < S; ++s) acc += n.grad[base + s];
                    bn->grad[c] += acc;
                }
        }
    });
}

Tensor add_sample_channel_bias(const Tensor& x, const Tensor& e) {
    check(x.rank() >= 2, Err::ShapeMismatch, "add_sample_channel_bias: expected [B,C,...]");
    size_t B = x.shape()[0], C = x.shape()[1];
    check(e.rank() == 2 && e.shape()[0] == B && e.shape()[1] == C, Err::ShapeMismatch,
          "add_sample_channel_bias: e must be [B,C]");
    size_t S = x.numel() / (B * C);
    std::vector<double> out(x.numel());
    const auto& xv = x.data();
    const auto& ev = e.data();
    for (size_t bc = 0; bc < B * C; ++bc) {
        double off = ev[bc];
        size_t base = bc * S;
        for (size_t s = 0; s < S; ++s) out[base + s] = xv[base + s] + off;
    }
    auto xn = x.node();
    auto en = e.node();
    return make_op_node(x.shape(), std::move(out), {x, e}, [xn, en, B, C, S](detail::Node& n) {
        if (xn->requires_grad) {
            xn->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i];
        }
        if (en->requires_grad) {
            en->ensure_grad();
            for (size_t bc = 0; bc < B * C; ++bc) {
                size_t base = bc * S;
                double acc = 0.0;
                for (size_t s = 0; s < S; ++s) acc += n.grad[base + s];
                en->grad[bc] += acc;
            }
        }
    });
}

// ---- parameters ---------------------------------------------------------------

Tensor& Parameters::add(const std::string& name, Tensor t) {
    check(items_.count(name) == 0, Err::Internal, "Parameters: duplicate name " + name);
    t.set_requires_grad(true);
    auto [it, ok] = items_.emplace(name, std::move(t));
    (void)ok;
    return it->second;
}

Tensor& Parameters::at(const std::string& name) {
    auto it = items_.find(name);
    check(it != items_.end(), Err::Internal, "Parameters: missing " + name);
    return it->second;
}

const Tensor& Parameters::at(const std::string& name) const {
    auto it = items_.find(name);
    check(it != items_.end(), Err::Internal, "Parameters: missing " + name);
    return it->second;
}

size_t Parameters::count_elements() const {
    size_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
}

void Parameters::zero_grad() {
    for (auto& [name, t] : items_) t.zero_grad();
}

// ---- grad_check ------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(Parameters&)>& f, Parameters& params,
                           double h, double tol, size_t max_checks_per_param) {
    GradCheckReport report;
    report.tol = tol;

    params.zero_grad();
    Tensor loss = f(params);
    if (loss.requires_grad()) loss.backward();

    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, t] : params) {
        analytic[name] =
            t.has_grad() ? t.grad() : std::vector<double>(t.numel(), 0.0);
    }

    NoGradGuard ng;
    for (auto& [name, t] : params) {
        size_t n = std::min(t.numel(), max_checks_per_param);
        auto& vals = t.raw_data();
        for (size_t i = 0; i < n; ++i) {
            double orig = vals[i];
            vals[i] = orig + h;
            double fp = f(params).item();
            vals[i] = orig - h;
            double fm = f(params).item();
            vals[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double an = analytic[name][i];
            double rel = std::abs(an - fd) / std::max(1.0, std::abs(an) + std::abs(fd));
            ++report.checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = {name, i, an, fd, rel};
            }
            if (rel > tol) ++report.failures;
        }
    }
    return report;
}

}  // namespace rflow
