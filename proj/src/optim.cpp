#include "rflow/optim.hpp"

#include <cmath>

namespace rflow {

void AdamWConfig::validate() const {
    check(lr > 0.0, Err::ConfigInvalid, "adamw: lr must be positive");
    check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, Err::ConfigInvalid,
          "adamw: betas must lie in [0, 1)");
    check(eps > 0.0, Err::ConfigInvalid, "adamw: eps must be positive");
    check(weight_decay >= 0.0, Err::ConfigInvalid, "adamw: weight_decay must be >= 0");
}

AdamW::AdamW(Parameters& params, AdamWConfig cfg) : params_(params), cfg_(cfg) {
    cfg_.validate();
    for (const auto& [name, t] : params_) {
        m_[name].assign(t.numel(), 0.0);
        v_[name].assign(t.numel(), 0.0);
    }
}

void AdamW::step() {
    ++step_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (auto& [name, t] : params_) {
        auto& m = m_.at(name);
        auto& v = v_.at(name);
        auto& p = t.raw_data();
        const std::vector<double>* g = t.has_grad() ? &t.grad() : nullptr;
        for (size_t i = 0; i < p.size(); ++i) {
            double gi = g != nullptr ? (*g)[i] : 0.0;
            m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
            v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
            double m_hat = m[i] / bc1;
            double v_hat = v[i] / bc2;
            p[i] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) +
                               cfg_.weight_decay * p[i]);
        }
    }
}

void AdamW::export_state(std::map<std::string, Tensor>& out) const {
    for (const auto& [name, t] : params_) {
        out.emplace("opt.m." + name, Tensor::from_data(t.shape(), m_.at(name)));
        out.emplace("opt.v." + name, Tensor::from_data(t.shape(), v_.at(name)));
    }
    out.emplace("opt.step", Tensor::scalar(static_cast<double>(step_)));
}

void AdamW::import_state(const std::map<std::string, Tensor>& in) {
    auto fetch = [&](const std::string& key, size_t expected) -> const Tensor& {
        auto it = in.find(key);
        check(it != in.end(), Err::CheckpointMismatch, "optimizer state missing " + key);
        check(it->second.numel() == expected, Err::CheckpointMismatch,
              "optimizer state " + key + " has wrong size");
        return it->second;
    };
    for (auto& [name, t] : params_) {
        m_[name] = fetch("opt.m." + name, t.numel()).data();
        v_[name] = fetch("opt.v." + name, t.numel()).data();
    }
    step_ = static_cast<int64_t>(fetch("opt.step", 1).item());
}

}  // namespace rflow
