#include "fedvib/cm/training.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "fedvib/cm/detection.hpp"
#include "fedvib/errors.hpp"
#include "fedvib/nn/layers.hpp"
#include "fedvib/rng.hpp"

namespace fedvib::cm {

nn::Autoencoder build_autoencoder(const nn::AutoencoderConfig& config, std::uint64_t seed) {
  nn::Autoencoder model(config);
  model.initialize(seed);
  return model;
}

double evaluate_loss(const nn::Autoencoder& model, std::span<const signal::Window> windows,
                     std::size_t batch_size) {
  if (windows.empty()) return std::numeric_limits<double>::quiet_NaN();
  double sum = 0.0;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    const auto chunk = windows.subspan(start, std::min(batch_size, windows.size() - start));
    for (double e : window_errors(model, chunk)) sum += e;
  }
  return sum / double(windows.size());
}

Trainer::Trainer(nn::TrainConfig config, std::uint64_t seed) : config_(config), seed_(seed) {
  config_.validate();
}

EpochStats Trainer::run_epoch(nn::Autoencoder& model, std::span<const signal::Window> train,
                              std::span<const signal::Window> validation, std::size_t epoch_index) {
  if (train.empty()) throw StateError("training set is empty");
  if (!adam_) adam_ = nn::AdamState<float>::fresh(model.config());

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed_, epoch_index));
  rng.shuffle(order);

  EpochStats stats;
  stats.epoch_index = epoch_index;
  stats.learning_rate = nn::decayed_lr(config_.learning_rate, epoch_index, config_.lr_decay_per_epoch);
  stats.windows = train.size();

  std::vector<const signal::Window*> batch;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch_size) {
    const std::size_t end = std::min(order.size(), start + config_.batch_size);
    batch.clear();
    for (std::size_t k = start; k < end; ++k) batch.push_back(&train[order[k]]);
    const auto x = pack_windows(std::span<const signal::Window* const>(batch));
    model.forward(x, Eigen::Index(batch.size()));
    loss_sum += model.last_loss() * double(batch.size());
    auto grads = model.backward(float(config_.l2_lambda));
    nn::clip_gradients(grads, config_.clip_max_norm);
    nn::adam_step(*adam_, model.params(), grads, stats.learning_rate);
  }
  model.clear_cache();
  stats.train_loss = loss_sum / double(train.size());
  stats.val_loss = evaluate_loss(model, validation, config_.batch_size);
  return stats;
}

std::vector<EpochStats> train_epochs(nn::Autoencoder& model, std::span<const signal::Window> train,
                                     std::span<const signal::Window> validation,
                                     const nn::TrainConfig& config, std::size_t n_epochs,
                                     std::uint64_t seed, std::size_t first_epoch) {
  if (train.empty()) throw StateError("training set is empty");
  Trainer trainer(config, seed);
  std::vector<EpochStats> history;
  for (std::size_t e = 0; e < n_epochs; ++e) {
    history.push_back(trainer.run_epoch(model, train, validation, first_epoch + e));
  }
  return history;
}

}  // namespace fedvib::cm
