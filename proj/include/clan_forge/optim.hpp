#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "clan_forge/tensor.hpp"

namespace clan_forge {

/// SGD with momentum and a polynomial ("poly") learning-rate decay.
struct SgdConfig {
  double lr0 = 2.5e-4;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double power = 0.9;
  std::size_t max_iter = 100000;

  void validate() const {
    if (!(lr0 >= 0.0)) throw std::invalid_argument("sgd.lr0 must be non-negative");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw std::invalid_argument("sgd.momentum must lie in [0,1)");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("sgd.weight_decay must be non-negative");
    if (!(power > 0.0)) throw std::invalid_argument("sgd.power must be positive");
    if (max_iter == 0) throw std::invalid_argument("sgd.max_iter must be positive");
  }
};

/// Adam with a constant learning rate.
struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  double weight_decay = 5e-4;

  void validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("adam.lr must be non-negative");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam.beta1 must lie in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam.beta2 must lie in (0,1)");
    if (!(eps >= 0.0)) throw std::invalid_argument("adam.eps must be non-negative");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("adam.weight_decay must be non-negative");
  }
};

/// lr0 · (1 − iter/max_iter)^power.
inline double poly_lr(const SgdConfig& config, std::size_t iter) {
  if (iter > config.max_iter) {
    throw std::out_of_range("poly_lr: iter " + std::to_string(iter) + " exceeds max_iter " +
                            std::to_string(config.max_iter));
  }
  const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(config.max_iter);
  return config.lr0 * std::pow(frac, config.power);
}

struct SgdState {
  std::vector<Tensor> velocity;
};

namespace detail {

inline void check_param_grads(const char* op, const std::vector<Tensor*>& params,
                              const std::vector<Tensor>& grads) {
  if (params.size() != grads.size()) {
    throw ShapeError(op, std::to_string(params.size()) + " params but " + std::to_string(grads.size()) + " grads");
  }
  for (std::size_t i = 0; i < params.size(); ++i) require_same_shape(op, *params[i], grads[i]);
}

inline void check_buffers(const char* op, const std::vector<Tensor*>& params, const std::vector<Tensor>& buf) {
  if (buf.size() != params.size()) {
    throw ShapeError(op, "state holds " + std::to_string(buf.size()) + " buffers for " +
                             std::to_string(params.size()) + " params");
  }
  for (std::size_t i = 0; i < params.size(); ++i) require_same_shape(op, *params[i], buf[i]);
}

}  // namespace detail

/// One momentum-SGD step at the poly-decayed rate for `iter`. Weight decay
/// enters as an additive gradient term; the velocity is updated before the
/// parameters move. Returns the learning rate used.
inline double sgd_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, SgdState& state,
                       const SgdConfig& config, std::size_t iter) {
  detail::check_param_grads("sgd_step", params, grads);
  if (state.velocity.empty()) {
    for (const Tensor* p : params) state.velocity.emplace_back(p->shape(), 0.0);
  }
  detail::check_buffers("sgd_step", params, state.velocity);
  const double lr = poly_lr(config, iter);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k]->data();
    auto v = state.velocity[k].data();
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      v[i] = config.momentum * v[i] + (g[i] + config.weight_decay * theta[i]);
      theta[i] -= lr * v[i];
    }
  }
  return lr;
}

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t t = 0;
};

/// One bias-corrected Adam step with weight decay as an additive gradient term.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads, AdamState& state,
                      const AdamConfig& config) {
  detail::check_param_grads("adam_step", params, grads);
  if (state.m.empty() && state.v.empty() && state.t == 0) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape(), 0.0);
      state.v.emplace_back(p->shape(), 0.0);
    }
  }
  detail::check_buffers("adam_step", params, state.m);
  detail::check_buffers("adam_step", params, state.v);
  state.t += 1;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto theta = params[k]->data();
    auto m = state.m[k].data();
    auto v = state.v[k].data();
    const auto g = grads[k].data();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i] + config.weight_decay * theta[i];
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * gi;
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * gi * gi;
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      const double denom = std::sqrt(vhat) + config.eps;
      if (denom > 0.0) theta[i] -= config.lr * mhat / denom;
    }
  }
}

}  // namespace clan_forge
