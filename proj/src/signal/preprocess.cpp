#include <cmath>
#include <numbers>

#include "fedvib/errors.hpp"
#include "fedvib/rng.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::signal {

void SplitSpec::validate() const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0) ||
      !(val_fraction_of_train > 0.0 && val_fraction_of_train < 1.0)) {
    throw ConfigError("split fractions must lie in (0, 1)");
  }
}

VibrationBatch downsample(const VibrationBatch& batch, std::size_t factor, DownsampleMode mode) {
  if (factor < 1) throw ConfigError("downsampling factor must be at least 1");
  const std::size_t features = batch.feature_count();
  const std::size_t groups = batch.sample_count() / factor;
  VibrationBatch out{batch.timestamp, Tensor({groups, features}), batch.sampling_rate_hz / double(factor),
                     batch.label};
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t f = 0; f < features; ++f) {
      if (mode == DownsampleMode::decimate) {
        out.samples.at(g, f) = batch.samples.at(g * factor, f);
        continue;
      }
      double sum = 0.0;
      for (std::size_t k = 0; k < factor; ++k) sum += batch.samples.at(g * factor + k, f);
      out.samples.at(g, f) = float(sum / double(factor));
    }
  }
  return out;
}

std::vector<Window> make_windows(const VibrationBatch& batch, std::size_t window_size,
                                 std::size_t batch_index) {
  if (window_size < 1) throw ConfigError("window_size must be at least 1");
  const std::size_t features = batch.feature_count();
  const std::size_t count = batch.sample_count() / window_size;
  std::vector<Window> out;
  out.reserve(count);
  const auto values = batch.samples.values();
  for (std::size_t w = 0; w < count; ++w) {
    const std::size_t offset = w * window_size;
    const auto first = values.begin() + std::ptrdiff_t(offset * features);
    out.push_back({Tensor({window_size, features},
                          std::vector<float>(first, first + std::ptrdiff_t(window_size * features))),
                   batch_index, offset});
  }
  return out;
}

std::vector<Window> windows_of(const Dataset& dataset, const std::vector<std::size_t>& batch_indices,
                               std::size_t window_size) {
  std::vector<Window> out;
  for (std::size_t i : batch_indices) {
    auto w = make_windows(dataset.batches.at(i), window_size, i);
    out.insert(out.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  return out;
}

DatasetSplit chronological_split(std::size_t n, const SplitSpec& spec) {
  spec.validate();
  if (n < 3) throw ConfigError("chronological split needs at least 3 batches, got " + std::to_string(n));
  // The epsilon keeps exact products such as 0.7 * 10 from rounding down.
  auto segment = std::size_t(std::floor(spec.train_fraction * double(n) + 1e-9));
  segment = std::max<std::size_t>(segment, 2);
  auto val = std::size_t(std::ceil(spec.val_fraction_of_train * double(segment) - 1e-9));
  val = std::clamp<std::size_t>(val, 1, segment - 1);

  DatasetSplit split;
  for (std::size_t i = 0; i < n; ++i) {
    if (i < segment - val) {
      split.train.push_back(i);
    } else if (i < segment) {
      split.validation.push_back(i);
    } else {
      split.test.push_back(i);
    }
  }
  return split;
}

DatasetSplit chronological_split(const Dataset& dataset, const SplitSpec& spec) {
  return chronological_split(dataset.size(), spec);
}

Standardizer Standardizer::fit(const Dataset& dataset, const std::vector<std::size_t>& batch_indices) {
  const std::size_t F = dataset.feature_count;
  std::vector<double> sum(F, 0.0), sq(F, 0.0);
  std::size_t n = 0;
  for (std::size_t i : batch_indices) {
    const auto& b = dataset.batches.at(i);
    for (std::size_t r = 0; r < b.sample_count(); ++r) {
      for (std::size_t f = 0; f < F; ++f) {
        const double v = b.samples.at(r, f);
        sum[f] += v;
        sq[f] += v * v;
      }
    }
    n += b.sample_count();
  }
  if (n == 0) throw ConfigError("cannot fit a standardizer on zero samples");
  Standardizer s;
  for (std::size_t f = 0; f < F; ++f) {
    const double m = sum[f] / double(n);
    s.mean.push_back(m);
    s.stddev.push_back(std::max(std::sqrt(std::max(sq[f] / double(n) - m * m, 0.0)), 1e-12));
  }
  return s;
}

void Standardizer::apply(Dataset& dataset) const {
  for (auto& b : dataset.batches) {
    for (std::size_t r = 0; r < b.sample_count(); ++r) {
      for (std::size_t f = 0; f < mean.size(); ++f) {
        b.samples.at(r, f) = float((b.samples.at(r, f) - mean[f]) / stddev[f]);
      }
    }
  }
}

Dataset synth_generate(const SynthConfig& config) {
  if (config.frequencies_hz.size() != config.amplitudes.size()) {
    throw ConfigError("synthetic frequencies and amplitudes differ in length");
  }
  if (config.batch_len < 1 || config.feature_count < 1 || !(config.sampling_rate > 0)) {
    throw ConfigError("synthetic batch_len, feature_count and sampling_rate must be positive");
  }
  std::vector<bool> anomalous(config.n_batches, false);
  for (std::size_t i : config.anomaly_indices) {
    if (i >= config.n_batches) {
      throw ConfigError("anomaly index " + std::to_string(i) + " outside " +
                        std::to_string(config.n_batches) + " batches");
    }
    anomalous[i] = true;
  }

  Rng rng(config.seed);
  Dataset ds;
  ds.source_id = config.source_id;
  ds.feature_count = config.feature_count;
  ds.batches.reserve(config.n_batches);
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t b = 0; b < config.n_batches; ++b) {
    const double scale = anomalous[b] ? config.anomaly_amplitude_factor : 1.0;
    Tensor samples({config.batch_len, config.feature_count});
    for (std::size_t f = 0; f < config.feature_count; ++f) {
      std::vector<double> phase(config.frequencies_hz.size());
      for (double& p : phase) p = rng.uniform(0.0, two_pi);
      for (std::size_t i = 0; i < config.batch_len; ++i) {
        const double t = double(i) / config.sampling_rate;
        double v = 0.0;
        for (std::size_t k = 0; k < phase.size(); ++k) {
          v += config.amplitudes[k] * std::sin(two_pi * config.frequencies_hz[k] * t + phase[k]);
        }
        v += config.noise_std * rng.normal();
        samples.at(i, f) = float(scale * v);
      }
    }
    ds.batches.push_back({config.start_timestamp + double(b) * config.batch_interval_s, std::move(samples),
                          config.sampling_rate, anomalous[b] ? Label::anomalous : Label::normal});
  }
  return ds;
}

double rms(const VibrationBatch& batch) {
  double sq = 0.0;
  for (float v : batch.samples.values()) sq += double(v) * double(v);
  return batch.samples.size() ? std::sqrt(sq / double(batch.samples.size())) : 0.0;
}

}  // namespace fedvib::signal
