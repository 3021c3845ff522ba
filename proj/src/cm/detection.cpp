#include "fedvib/cm/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedvib/errors.hpp"

namespace fedvib::cm {

double reconstruction_error(const Tensor& input, const Tensor& prediction) {
  if (input.shape() != prediction.shape()) {
    throw DimensionError("reconstruction_error shapes differ: " + shape_string(input.shape()) + " vs " +
                         shape_string(prediction.shape()));
  }
  if (input.size() == 0) throw DimensionError("reconstruction_error of an empty window");
  double sum = 0.0;
  for (std::size_t k = 0; k < input.size(); ++k) {
    const double d = double(input[k]) - double(prediction[k]);
    sum += d * d;
  }
  return sum / double(input.size());
}

nn::Mat<float> pack_windows(std::span<const signal::Window* const> windows) {
  if (windows.empty()) throw DimensionError("no windows to pack");
  const auto T = windows.front()->values.dim(0);
  const auto F = windows.front()->values.dim(1);
  const auto B = windows.size();
  nn::Mat<float> out(Eigen::Index(F), Eigen::Index(T * B));
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor& v = windows[b]->values;
    if (v.rank() != 2 || v.dim(0) != T || v.dim(1) != F) {
      throw DimensionError("windows of differing shapes in one minibatch");
    }
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t f = 0; f < F; ++f) out(Eigen::Index(f), Eigen::Index(t * B + b)) = v[t * F + f];
    }
  }
  return out;
}

nn::Mat<float> pack_windows(std::span<const signal::Window> windows) {
  std::vector<const signal::Window*> ptrs;
  ptrs.reserve(windows.size());
  for (const auto& w : windows) ptrs.push_back(&w);
  return pack_windows(std::span<const signal::Window* const>(ptrs));
}

std::vector<double> window_errors(const nn::Autoencoder& model, std::span<const signal::Window> windows) {
  if (windows.empty()) return {};
  const auto B = Eigen::Index(windows.size());
  const nn::Mat<float> x = pack_windows(windows);
  const nn::Mat<float> y = model.reconstruct(x, B);
  const Eigen::Index T = x.cols() / B;
  std::vector<double> errors(windows.size(), 0.0);
  for (Eigen::Index t = 0; t < T; ++t) {
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto col = t * B + b;
      for (Eigen::Index f = 0; f < x.rows(); ++f) {
        const double d = double(x(f, col)) - double(y(f, col));
        errors[std::size_t(b)] += d * d;
      }
    }
  }
  for (double& e : errors) e /= double(x.rows() * T);
  return errors;
}

Tensor reconstruct_window(const nn::Autoencoder& model, const Tensor& window) {
  const signal::Window w{window, 0, 0};
  const nn::Mat<float> y = model.reconstruct(pack_windows(std::span<const signal::Window>(&w, 1)), 1);
  Tensor out(window.shape());
  // batch == 1: column t holds timestep t, which is the row-major [T, F] layout.
  std::copy(y.data(), y.data() + y.size(), out.data());
  return out;
}

double aggregate_errors(std::span<const double> errors, ScoreAggregate aggregate) {
  if (errors.empty()) throw StateError("anomaly score undefined: batch yields no windows");
  if (aggregate == ScoreAggregate::max) return *std::max_element(errors.begin(), errors.end());
  return std::accumulate(errors.begin(), errors.end(), 0.0) / double(errors.size());
}

double batch_anomaly_score(const nn::Autoencoder& model, const signal::VibrationBatch& batch,
                           std::size_t window_size, ScoreAggregate aggregate) {
  const auto windows = signal::make_windows(batch, window_size);
  if (windows.empty()) throw StateError("anomaly score undefined: batch yields no windows");
  const auto errors = window_errors(model, windows);
  return aggregate_errors(errors, aggregate);
}

std::vector<double> score_batches(const nn::Autoencoder& model, const signal::Dataset& dataset,
                                  std::span<const std::size_t> batch_indices, ScoreAggregate aggregate) {
  std::vector<double> out;
  out.reserve(batch_indices.size());
  for (std::size_t i : batch_indices) {
    out.push_back(batch_anomaly_score(model, dataset.batches.at(i), model.config().window_size, aggregate));
  }
  return out;
}

std::string to_string(ReferenceUnit unit) { return unit == ReferenceUnit::window ? "window" : "batch"; }

ReferenceUnit parse_reference_unit(const std::string& text) {
  if (text == "window") return ReferenceUnit::window;
  if (text == "batch") return ReferenceUnit::batch;
  throw ConfigError("unknown reference unit '" + text + "'");
}

std::vector<double> reference_errors(const nn::Autoencoder& model, const signal::Dataset& dataset,
                                     std::span<const std::size_t> batch_indices, ReferenceUnit unit) {
  if (unit == ReferenceUnit::batch) return score_batches(model, dataset, batch_indices);
  std::vector<double> out;
  for (std::size_t i : batch_indices) {
    // One batch at a time keeps the reconstruction minibatch small.
    const auto windows = signal::windows_of(dataset, {i}, model.config().window_size);
    const auto errors = window_errors(model, windows);
    out.insert(out.end(), errors.begin(), errors.end());
  }
  return out;
}

std::string to_string(ThresholdMode mode) {
  return mode == ThresholdMode::delta_sigma ? "delta_sigma" : "mean_plus_sigma";
}

ThresholdMode parse_threshold_mode(const std::string& text) {
  if (text == "delta_sigma") return ThresholdMode::delta_sigma;
  if (text == "mean_plus_sigma") return ThresholdMode::mean_plus_sigma;
  throw ConfigError("unknown threshold mode '" + text + "'");
}

ThresholdModel calibrate_threshold(std::vector<double> reference_res, double delta, ThresholdMode mode) {
  if (reference_res.size() < 2) throw StateError("threshold calibration needs at least 2 reference errors");
  if (!(delta >= 0.0)) throw ConfigError("sensitivity delta must be non-negative");
  const double n = double(reference_res.size());
  const double mean = std::accumulate(reference_res.begin(), reference_res.end(), 0.0) / n;
  double ss = 0.0;
  for (double r : reference_res) ss += (r - mean) * (r - mean);
  const double sigma = std::sqrt(ss / (n - 1.0));

  ThresholdModel t{std::move(reference_res), delta, mode, 0.0, mean, sigma};
  t.threshold = mode == ThresholdMode::delta_sigma ? delta * sigma : mean + delta * sigma;
  if (sigma < 1e-12) t.threshold = std::max(t.threshold, mean + 1e-9);
  return t;
}

Label classify(double score, const ThresholdModel& threshold) {
  return score <= threshold.threshold ? Label::normal : Label::anomalous;
}

DetectionMetrics evaluate_detection(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.size() != truth.size()) {
    throw DimensionError("verdict count " + std::to_string(predicted.size()) + " != label count " +
                         std::to_string(truth.size()));
  }
  DetectionMetrics m;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const bool p = predicted[i] == Label::anomalous;
    const bool t = truth[i] == Label::anomalous;
    if (p && t) ++m.true_positives;
    if (p && !t) ++m.false_positives;
    if (!p && t) ++m.false_negatives;
    if (!p && !t) ++m.true_negatives;
  }
  const auto ratio = [&m](std::size_t num, std::size_t den) {
    if (den == 0) {
      m.degenerate = true;
      return 0.0;
    }
    return double(num) / double(den);
  };
  m.precision = ratio(m.true_positives, m.true_positives + m.false_positives);
  m.recall = ratio(m.true_positives, m.true_positives + m.false_negatives);
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  } else {
    m.degenerate = true;
  }
  return m;
}

}  // namespace fedvib::cm
