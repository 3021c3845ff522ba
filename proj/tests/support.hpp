#pragma once

// Shared generators for the property tests. Every generator is driven by an
// explicit Rng so failures reproduce from the printed case seed.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "fedvib/nn/tensor.hpp"
#include "fedvib/rng.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::testing {

inline std::vector<float> random_floats(Rng& rng, std::size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.uniform(lo, hi));
  return v;
}

inline Tensor random_tensor(Rng& rng, Tensor::Shape shape, double lo = -1.0, double hi = 1.0) {
  const auto n = element_count(shape);
  return Tensor(std::move(shape), random_floats(rng, n, lo, hi));
}

/// Random shape of rank 1..3 with dims in [1, max_dim].
inline Tensor::Shape random_shape(Rng& rng, std::size_t max_dim = 6) {
  Tensor::Shape s(1 + rng.below(3));
  for (auto& d : s) d = 1 + rng.below(max_dim);
  return s;
}

/// `count` windows of a sine wave with random phase and small noise.
inline std::vector<signal::Window> sine_windows(std::size_t count, std::size_t window_size, std::uint64_t seed,
                                                std::size_t features = 1) {
  Rng rng(seed);
  std::vector<signal::Window> out;
  for (std::size_t k = 0; k < count; ++k) {
    Tensor t({window_size, features});
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    for (std::size_t i = 0; i < window_size; ++i)
      for (std::size_t f = 0; f < features; ++f)
        t.at(i, f) = float(0.5 * std::sin(2.0 * std::numbers::pi * double(i) / 25.0 + phase + double(f)) +
                           0.01 * rng.normal());
    out.push_back({std::move(t), k, 0});
  }
  return out;
}

/// Dataset of `n` batches with `len` random samples and `features` columns.
inline signal::Dataset random_dataset(Rng& rng, std::size_t n, std::size_t len, std::size_t features) {
  signal::Dataset ds;
  ds.source_id = "random";
  ds.feature_count = features;
  for (std::size_t i = 0; i < n; ++i) {
    signal::VibrationBatch b;
    b.timestamp = 1000.0 + 60.0 * double(i);
    b.sampling_rate_hz = 1000.0;
    b.samples = random_tensor(rng, {len, features});
    if (rng.below(3) == 0) b.label = rng.below(2) ? signal::Label::anomalous : signal::Label::normal;
    ds.batches.push_back(std::move(b));
  }
  return ds;
}

}  // namespace fedvib::testing
