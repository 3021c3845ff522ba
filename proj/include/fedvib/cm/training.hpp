#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "fedvib/nn/autoencoder.hpp"
#include "fedvib/nn/optim.hpp"
#include "fedvib/signal/signal.hpp"

namespace fedvib::cm {

/// Seeded autoencoder with the parameter layout of `config`.
nn::Autoencoder build_autoencoder(const nn::AutoencoderConfig& config, std::uint64_t seed);

struct EpochStats {
  std::size_t epoch_index = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;  // mean minibatch loss during the epoch
  double val_loss = 0.0;    // NaN without validation windows
  std::size_t windows = 0;
};

/// Mean reconstruction loss over `windows` without updating weights.
double evaluate_loss(const nn::Autoencoder& model, std::span<const signal::Window> windows,
                     std::size_t batch_size);

/// Minibatch Adam training with global-norm clipping, L2 and per-epoch
/// learning-rate decay. Window order within an epoch is a seeded shuffle that
/// depends only on (seed, epoch_index), so training is reproducible and can be
/// resumed at any epoch index.
class Trainer {
 public:
  Trainer(nn::TrainConfig config, std::uint64_t seed);

  EpochStats run_epoch(nn::Autoencoder& model, std::span<const signal::Window> train,
                       std::span<const signal::Window> validation, std::size_t epoch_index);

  /// Drops the Adam moments; the next step starts from a fresh state.
  void reset_optimizer() { adam_.reset(); }
  const std::optional<nn::AdamState<float>>& optimizer() const { return adam_; }
  const nn::TrainConfig& config() const { return config_; }

 private:
  nn::TrainConfig config_;
  std::uint64_t seed_;
  std::optional<nn::AdamState<float>> adam_;
};

/// Trains for `n_epochs` epochs starting at `first_epoch` with one optimizer
/// state carried across the epochs.
std::vector<EpochStats> train_epochs(nn::Autoencoder& model, std::span<const signal::Window> train,
                                     std::span<const signal::Window> validation,
                                     const nn::TrainConfig& config, std::size_t n_epochs,
                                     std::uint64_t seed, std::size_t first_epoch = 0);

}  // namespace fedvib::cm
