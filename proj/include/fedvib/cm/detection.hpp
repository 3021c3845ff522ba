#pragma once

#include <span>
#include <string>
#include <vector>

#include "fedvib/nn/autoencoder.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::cm {

using signal::Label;

/// Mean squared difference over the window's window_size * features values.
double reconstruction_error(const Tensor& input, const Tensor& prediction);

/// Packs windows into the autoencoder's [features, window * batch] layout.
nn::Mat<float> pack_windows(std::span<const signal::Window> windows);
nn::Mat<float> pack_windows(std::span<const signal::Window* const> windows);

/// Reconstruction error of every window, evaluated as one minibatch.
std::vector<double> window_errors(const nn::Autoencoder& model, std::span<const signal::Window> windows);

/// Reconstruction of one window, same shape as the window.
Tensor reconstruct_window(const nn::Autoencoder& model, const Tensor& window);

enum class ScoreAggregate { mean, max };

/// Per-batch anomaly score: the mean (or max) window reconstruction error.
double batch_anomaly_score(const nn::Autoencoder& model, const signal::VibrationBatch& batch,
                           std::size_t window_size, ScoreAggregate aggregate = ScoreAggregate::mean);

/// Aggregates precomputed window errors into a batch score.
double aggregate_errors(std::span<const double> errors, ScoreAggregate aggregate = ScoreAggregate::mean);

std::vector<double> score_batches(const nn::Autoencoder& model, const signal::Dataset& dataset,
                                  std::span<const std::size_t> batch_indices,
                                  ScoreAggregate aggregate = ScoreAggregate::mean);

/// Granularity of the reference errors a threshold is calibrated on.
enum class ReferenceUnit { window, batch };

std::string to_string(ReferenceUnit unit);
ReferenceUnit parse_reference_unit(const std::string& text);

/// Reference errors of the listed batches: every window's RE (window) or one
/// mean score per batch (batch).
std::vector<double> reference_errors(const nn::Autoencoder& model, const signal::Dataset& dataset,
                                     std::span<const std::size_t> batch_indices, ReferenceUnit unit);

enum class ThresholdMode { delta_sigma, mean_plus_sigma };

std::string to_string(ThresholdMode mode);
ThresholdMode parse_threshold_mode(const std::string& text);

struct ThresholdModel {
  std::vector<double> reference_res;
  double delta = 3.0;
  ThresholdMode mode = ThresholdMode::mean_plus_sigma;
  double threshold = 0.0;
  double mean = 0.0;
  double sigma = 0.0;
};

/// sigma is the sample standard deviation (divisor n - 1) of the reference
/// errors. delta_sigma: delta * sigma; mean_plus_sigma: mean + delta * sigma.
/// When sigma < 1e-12 the threshold is at least mean + 1e-9.
ThresholdModel calibrate_threshold(std::vector<double> reference_res, double delta,
                                   ThresholdMode mode = ThresholdMode::mean_plus_sigma);

/// Scores equal to the threshold count as normal.
Label classify(double score, const ThresholdModel& threshold);

struct AnomalyVerdict {
  std::size_t batch_index = 0;
  double score = 0.0;
  double threshold = 0.0;
  Label label = Label::normal;
};

struct DetectionMetrics {
  std::size_t true_positives = 0;
  std::size_t false_positives = 0;
  std::size_t false_negatives = 0;
  std::size_t true_negatives = 0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  /// Set when any of the three ratios had a zero denominator (reported as 0).
  bool degenerate = false;
};

/// Anomalous is the positive class.
DetectionMetrics evaluate_detection(std::span<const Label> predicted, std::span<const Label> truth);

}  // namespace fedvib::cm
