#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "ean/errors.hpp"
#include "ean/tensor.hpp"

namespace ean {

// Named learnable tensors. std::map keeps iteration order deterministic,
// which the optimizer and checkpoint writer rely on.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t) {
    t.set_requires_grad(true);
    auto [it, fresh] = params_.emplace(name, std::move(t));
    if (!fresh) throw ConfigError("duplicate parameter name: " + name);
    return it->second;
  }

  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second;
  }

  const std::map<std::string, Tensor>& all() const { return params_; }

  void zero_grad_all() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  int64_t total_scalars() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

 private:
  std::map<std::string, Tensor> params_;
};

struct AdamWConfig {
  double lr = 2.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1.25e-3;
};

struct AdamState {
  std::vector<double> m, v;
};

// One decoupled-weight-decay update on a single flat buffer. `t` is the
// 1-based step count used for bias correction.
inline void adamw_step(std::vector<double>& param, const std::vector<double>& grad,
                       AdamState& state, const AdamWConfig& cfg, int64_t t) {
  if (param.size() != grad.size()) {
    throw DimError("adamw_step: param has " + std::to_string(param.size()) +
                   " scalars, grad has " + std::to_string(grad.size()));
  }
  if (state.m.empty()) {
    state.m.assign(param.size(), 0.0);
    state.v.assign(param.size(), 0.0);
  }
  if (state.m.size() != param.size()) {
    throw DimError("adamw_step: state shaped for " + std::to_string(state.m.size()) +
                   " scalars, param has " + std::to_string(param.size()));
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (size_t i = 0; i < param.size(); ++i) {
    param[i] -= cfg.lr * cfg.weight_decay * param[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = state.m[i] / bc1;
    const double vhat = state.v[i] / bc2;
    param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
  }
}

class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg) : cfg_(cfg) {}

  // Applies one step to every parameter that has an accumulated gradient.
  void step(ParamStore& params) {
    ++t_;
    for (const auto& [name, tensor] : params.all()) {
      if (!tensor.has_grad()) continue;
      Tensor handle = tensor;  // shares the underlying buffer
      adamw_step(handle.mutable_values(), handle.grad(), state_[name], cfg_, t_);
    }
  }

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  int64_t step_count() const { return t_; }
  void set_step_count(int64_t t) { t_ = t; }
  std::map<std::string, AdamState>& state() { return state_; }

 private:
  AdamWConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, AdamState> state_;
};

}  // namespace ean
