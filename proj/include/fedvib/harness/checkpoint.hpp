#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "fedvib/cm/detection.hpp"
#include "fedvib/fed/weights.hpp"
#include "fedvib/nn/autoencoder.hpp"

namespace fedvib::harness {

struct CheckpointMeta {
  nn::AutoencoderConfig model;
  std::uint64_t round = 0;
  double delta = 3.0;
  cm::ThresholdMode mode = cm::ThresholdMode::mean_plus_sigma;
  std::optional<double> threshold;

  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  fed::ModelWeights weights;
  CheckpointMeta meta;
};

/// Writes `model.fvw` (the weights blob) and `model.meta` (key = value text).
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& checkpoint);

/// Throws IngestError for missing files or malformed metadata, ParseError for
/// a corrupt weights blob, DimensionError when the weights do not fit the
/// recorded architecture.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace fedvib::harness
