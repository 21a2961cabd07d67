#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "rflow/error.hpp"
#include "rflow/rng.hpp"

namespace rflow {

using Shape = std::vector<size_t>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool leaf = true;

    // Tape record: inputs and the closure that routes this node's grad
    // into them. Both are released once backward() consumes the tape.
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backprop;

    size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

}  // namespace detail

// Dense row-major f64 tensor participating in a define-by-run gradient tape.
// Copies are shallow (shared node); ops produce fresh nodes.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double v);
    static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0,
                        bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    size_t numel() const { return node_->numel(); }
    size_t rank() const { return node_->shape.size(); }

    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& raw_data() { return node_->value; }  // in-place edits (optimizer)
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool v);

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<double>& grad() const;
    void zero_grad();

    // Reverse-mode sweep from this scalar. Consumes the tape: a second call
    // without re-running the forward pass raises NoTape.
    void backward() const;

    std::shared_ptr<detail::Node> node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
    std::shared_ptr<detail::Node> node_;

    friend Tensor make_op_node(Shape shape, std::vector<double> value,
                               std::vector<Tensor> inputs,
                               std::function<void(detail::Node&)> backprop);
};

// Disables tape recording for the current thread while alive (inference,
// finite-difference probes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// ---- primitive ops ----------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// out[b,o] = sum_i x[b,i] * w[i,o] + bias[o]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// Cross-correlation of x[B,Cin,D,H,W] with k[Cout,Cin,kd,kh,kw].
Tensor conv3d(const Tensor& x, const Tensor& k, int stride, int pad);

// Per-(sample, group) standardization over grouped channels followed by a
// per-channel affine map. x is [B,C,spatial...].
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor l1_loss(const Tensor& pred, const Tensor& target);
Tensor mse_loss(const Tensor& pred, const Tensor& target);

// Concatenation along axis 1 of rank>=2 tensors with equal other extents.
Tensor concat_channels(const std::vector<Tensor>& xs);

// [B,C,D,H,W] -> [B,C,2D,2H,2W], nearest neighbor.
Tensor upsample_nearest2(const Tensor& x);

// bias[C] broadcast over x[B,C,spatial...].
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// e[B,C] broadcast over x[B,C,spatial...]; used for timestep conditioning.
Tensor add_sample_channel_bias(const Tensor& x, const Tensor& e);

// ---- parameters --------------------------------------------------------

// Named trainable tensors with deterministic (sorted) iteration order.
class Parameters {
public:
    Tensor& add(const std::string& name, Tensor t);
    Tensor& at(const std::string& name);
    const Tensor& at(const std::string& name) const;
    bool contains(const std::string& name) const { return items_.count(name) != 0; }

    size_t size() const { return items_.size(); }
    size_t count_elements() const;
    void zero_grad();

    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

private:
    std::map<std::string, Tensor> items_;
};

// ---- gradient verification ----------------------------------------------

struct GradCheckEntry {
    std::string param;
    size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckReport {
    double max_rel_err = 0.0;
    size_t checked = 0;
    size_t failures = 0;
    double tol = 0.0;
    GradCheckEntry worst;
    bool pass() const { return failures == 0; }
};

// Compares tape gradients of f against central differences for every
// element of every parameter (optionally capped per parameter). f must be
// deterministic across calls. Relative error uses max(1, |a|+|b|) in the
// denominator so near-zero gradients are judged on absolute error.
GradCheckReport grad_check(const std::function<Tensor(Parameters&)>& f, Parameters& params,
                           double h, double tol,
                           size_t max_checks_per_param = static_cast<size_t>(-1));

}  // namespace rflow
