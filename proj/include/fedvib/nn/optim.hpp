#pragma once

#include <cmath>
#include <cstdint>

#include "fedvib/errors.hpp"
#include "fedvib/nn/autoencoder.hpp"

namespace fedvib::nn {

struct TrainConfig {
  double learning_rate = 0.001;
  double lr_decay_per_epoch = 0.01;
  double l2_lambda = 1e-7;
  double clip_max_norm = 1.0;
  std::size_t batch_size = 64;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(lr_decay_per_epoch >= 0.0 && lr_decay_per_epoch < 1.0)) {
      throw ConfigError("lr_decay_per_epoch must be in [0, 1)");
    }
    if (!(l2_lambda >= 0.0)) throw ConfigError("l2_lambda must be non-negative");
    if (!(clip_max_norm > 0.0)) throw ConfigError("clip_max_norm must be positive");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// Global L2 norm over every gradient entry.
template <typename S>
double global_norm(const AutoencoderParams<S>& grads) {
  double sum = 0.0;
  for (const auto& v : grads.views()) {
    for (std::size_t i = 0; i < v.size(); ++i) sum += double(v.data[i]) * double(v.data[i]);
  }
  return std::sqrt(sum);
}

/// Scales all gradients by max_norm / norm when the global norm exceeds
/// max_norm. Returns the norm before clipping.
template <typename S>
double clip_gradients(AutoencoderParams<S>& grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const S scale = S(max_norm / norm);
    for (auto& v : grads.views()) {
      for (std::size_t i = 0; i < v.size(); ++i) v.data[i] *= scale;
    }
  }
  return norm;
}

template <typename S>
struct AdamState {
  AutoencoderParams<S> m;
  AutoencoderParams<S> v;
  std::uint64_t step_count = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState fresh(const AutoencoderConfig& config) {
    return {AutoencoderParams<S>::zeros(config), AutoencoderParams<S>::zeros(config)};
  }
};

/// One bias-corrected Adam update of `weights` in place.
template <typename S>
void adam_step(AdamState<S>& state, AutoencoderParams<S>& weights, AutoencoderParams<S>& grads,
               double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  auto w = weights.views();
  auto g = grads.views();
  auto m = state.m.views();
  auto v = state.v.views();
  if (g.size() != w.size() || m.size() != w.size() || v.size() != w.size()) {
    throw DimensionError("Adam parameter sets do not align");
  }
  for (std::size_t k = 0; k < w.size(); ++k) {
    if (g[k].size() != w[k].size() || m[k].size() != w[k].size() || v[k].size() != w[k].size()) {
      throw DimensionError("Adam shape mismatch at " + w[k].name);
    }
  }
  ++state.step_count;
  const auto t = double(state.step_count);
  const S b1 = S(state.beta1);
  const S b2 = S(state.beta2);
  const S c1 = S(1.0 - std::pow(state.beta1, t));
  const S c2 = S(1.0 - std::pow(state.beta2, t));
  const S rate = S(lr);
  const S eps = S(state.eps);
  for (std::size_t k = 0; k < w.size(); ++k) {
    S* wd = w[k].data;
    const S* gd = g[k].data;
    S* md = m[k].data;
    S* vd = v[k].data;
    for (std::size_t i = 0; i < w[k].size(); ++i) {
      md[i] = b1 * md[i] + (S(1) - b1) * gd[i];
      vd[i] = b2 * vd[i] + (S(1) - b2) * gd[i] * gd[i];
      const S m_hat = md[i] / c1;
      const S v_hat = vd[i] / c2;
      wd[i] -= rate * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

}  // namespace fedvib::nn
