#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedvib/cm/detection.hpp"
#include "fedvib/fed/federation.hpp"
#include "fedvib/fed/weights.hpp"
#include "fedvib/harness/config.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::harness {

struct NodeRoundStats {
  std::string node;
  double train_loss = 0.0;
  double val_loss = 0.0;
  std::size_t windows_trained = 0;
  /// Threshold recalibrated on the model this round produced.
  std::optional<double> threshold;
};

struct RoundReport {
  std::uint64_t round = 0;  // 1-based
  std::vector<NodeRoundStats> nodes;
  std::uint64_t bytes_sent = 0;      // aggregator to nodes
  std::uint64_t bytes_received = 0;  // nodes to aggregator
  double duration_s = 0.0;
};

struct BatchVerdict {
  std::size_t batch_index = 0;
  double timestamp = 0.0;
  double score = 0.0;
  double threshold = 0.0;
  std::optional<signal::Label> label;
  signal::Label verdict = signal::Label::normal;
};

struct NodeDetection {
  std::string node;
  std::vector<BatchVerdict> batches;
  cm::ThresholdModel threshold;
  /// Threshold after each received global model, in round order.
  std::vector<double> threshold_trace;
  cm::DetectionMetrics metrics;
};

struct DetectionReport {
  std::vector<NodeDetection> nodes;
  /// Set when no training happened (rounds = 0).
  bool untrained = false;

  const NodeDetection& node(const std::string& id) const;
};

struct NetworkReport {
  std::uint64_t setup_bytes = 0;
  std::uint64_t round_bytes = 0;
  std::uint64_t final_bytes = 0;
  std::uint64_t aborted_bytes = 0;
  /// Everything the protocol accounted, from encoded frame sizes.
  std::uint64_t federated_bytes = 0;
  /// Bytes counted by the transport layer itself.
  std::uint64_t transport_bytes = 0;
  /// Counterfactual: every sample as a 4-byte float after resampling.
  std::uint64_t raw_bytes = 0;
  /// The same before resampling.
  std::uint64_t raw_bytes_original = 0;
  /// Reduction of the federated weight traffic (rounds + final model) against raw_bytes.
  double reduction_percent = 0.0;
};

struct ExperimentResult {
  Scenario scenario = Scenario::historical;
  DetectionReport detection;
  std::vector<RoundReport> rounds;
  NetworkReport network;
  fed::ModelWeights global;
  bool aborted = false;
  std::string diagnostic;
  /// Centralized runs: loss per epoch.
  std::vector<cm::EpochStats> epochs;
};

/// Loads, resamples and optionally standardizes one node's data.
/// Missing IMS data raises IngestError with download instructions.
signal::Dataset load_node_dataset(const NodeSpec& spec);

/// Datasets for every node of `config`, prepared for training.
std::vector<fed::LocalData> prepare_nodes(const ExperimentConfig& config);

/// Global model every federation starts from.
fed::ModelWeights initial_global(const ExperimentConfig& config);

/// Node settings shared by all scenarios; the trainer seed differs per node.
fed::NodeConfig node_config(const ExperimentConfig& config, std::size_t node_index);

/// 64 * round capped at `available` (the step is configurable).
std::size_t cold_start_windows(std::size_t round_index, std::size_t available, std::size_t step = 64);

ExperimentResult run_historical(const ExperimentConfig& config);
ExperimentResult run_cold_start(const ExperimentConfig& config);

/// Applies `weights` to `target` without training: threshold from the
/// calibration batches, verdicts for the scored batches.
NodeDetection transfer_detection(const fed::ModelWeights& weights, const nn::AutoencoderConfig& model,
                                 const signal::Dataset& target, const std::vector<std::size_t>& calibration_batches,
                                 const std::vector<std::size_t>& scored_batches, double delta,
                                 cm::ThresholdMode mode, const std::string& node_id,
                                 cm::ReferenceUnit unit = cm::ReferenceUnit::window);

/// Federates the source nodes, then scores every target batch with the final
/// global model, calibrated on the target's leading batches.
ExperimentResult run_knowledge_transfer(const ExperimentConfig& config);

/// One model trained on the pooled windows of all nodes, evaluated per node.
ExperimentResult run_centralized(const ExperimentConfig& config);

/// Dispatches on config.scenario.
ExperimentResult run_experiment(const ExperimentConfig& config);

/// 100 * (1 - fed / centralized); throws ConfigError when centralized is 0.
double network_reduction(std::uint64_t fed_bytes, std::uint64_t centralized_bytes);

/// Verdicts and metrics for `batches` of `dataset` under `threshold`.
NodeDetection detect(const std::string& node_id, const signal::Dataset& dataset,
                     const std::vector<std::size_t>& batches, std::span<const double> scores,
                     const cm::ThresholdModel& threshold);

// --- export -------------------------------------------------------------------

/// Writes scores.csv, rounds.csv, metrics.csv and network.csv into `out_dir`.
void export_results(const ExperimentResult& result, const std::filesystem::path& out_dir);

struct ScoreRow {
  std::string node;
  std::size_t batch_index = 0;
  double timestamp = 0.0;
  double score = 0.0;
  double threshold = 0.0;
  std::optional<signal::Label> label;
  signal::Label verdict = signal::Label::normal;
};

std::vector<ScoreRow> load_scores_csv(const std::filesystem::path& path);

}  // namespace fedvib::harness
