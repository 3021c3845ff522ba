#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fedvib/cm/detection.hpp"
#include "fedvib/nn/autoencoder.hpp"
#include "fedvib/nn/optim.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::harness {

enum class Scenario { historical, cold_start, knowledge_transfer, centralized };

std::string to_string(Scenario scenario);
Scenario parse_scenario(const std::string& text);

enum class DataSource { synthetic, csv, ims };

std::string to_string(DataSource source);

/// Where one node's batches come from and how they are resampled.
struct NodeSpec {
  std::string id;
  DataSource source = DataSource::synthetic;
  signal::SynthConfig synth;              // synthetic
  std::filesystem::path path;             // csv manifest or IMS test-set directory
  std::vector<std::size_t> channels{0};   // IMS columns kept as features
  std::size_t expected_rows = 20480;      // IMS rows per file
  std::size_t downsample_factor = 1;
};

struct ExperimentConfig {
  Scenario scenario = Scenario::historical;
  std::vector<NodeSpec> nodes;
  /// Knowledge transfer: the site the source federation's model is applied to.
  std::optional<NodeSpec> target;
  /// Leading share of target batches used to recalibrate the threshold.
  double target_calibration_fraction = 0.10;
  nn::AutoencoderConfig model;
  nn::TrainConfig train;
  signal::SplitSpec split;
  std::size_t rounds = 25;
  std::size_t epochs_per_round = 1;
  std::size_t centralized_epochs = 100;
  std::size_t cold_start_step = 64;
  double delta = 3.0;
  cm::ThresholdMode threshold_mode = cm::ThresholdMode::mean_plus_sigma;
  cm::ReferenceUnit reference_unit = cm::ReferenceUnit::window;
  bool standardize = false;
  bool persist_optimizer = false;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

/// Parses the JSON config format; unknown keys are errors.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string config_to_json(const ExperimentConfig& config);

/// The synthetic five-node setup: 200 batches of 800 samples at 4 kHz with
/// three axes per node, and `anomalies_per_node` batches at twice the
/// amplitude placed in each node's test segment.
ExperimentConfig synthetic_experiment(std::size_t node_count = 5, std::uint64_t seed = 1,
                                      std::size_t anomalies_per_node = 4);

}  // namespace fedvib::harness
