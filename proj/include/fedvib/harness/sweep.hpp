#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedvib/nn/autoencoder.hpp"
#include "fedvib/nn/optim.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::harness {

struct SearchSpace {
  std::vector<std::size_t> batch_sizes;
  std::vector<std::size_t> window_sizes;
  std::vector<std::size_t> outer_layer_sizes;
  std::vector<std::size_t> layer_counts;
  std::vector<std::size_t> encoding_sizes;
  std::vector<double> learning_rates;

  /// The hyperparameter grid searched for the default model.
  static SearchSpace table_one();
  std::size_t cardinality() const;
};

struct Candidate {
  std::size_t batch_size = 64;
  std::size_t window_size = 100;
  std::size_t outer_layer_size = 128;
  std::size_t layer_count = 1;
  std::size_t encoding_size = 16;
  double learning_rate = 1e-3;

  /// `layer_count` outer layers of `outer_layer_size` units each.
  nn::AutoencoderConfig model(std::size_t feature_count) const;
  nn::TrainConfig train() const;
  std::string describe() const;

  friend bool operator==(const Candidate&, const Candidate&) = default;
};

/// Every combination, batch size varying slowest and learning rate fastest.
std::vector<Candidate> enumerate(const SearchSpace& space);

struct SweepOptions {
  std::size_t epochs = 2;
  std::uint64_t seed = 1;
  signal::SplitSpec split;
};

struct SweepEntry {
  Candidate candidate;
  std::size_t parameter_count = 0;
  double val_loss = 0.0;
};

/// Trains `budget` configurations drawn by a seeded shuffle of the grid on
/// `data` at reduced scale and ranks them by final validation loss, smaller
/// models first on ties. Throws ConfigError for an empty space or budget.
std::vector<SweepEntry> sweep_hyperparameters(const SearchSpace& space, std::size_t budget,
                                              const signal::Dataset& data, const SweepOptions& options = {});

}  // namespace fedvib::harness
