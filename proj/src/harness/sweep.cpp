#include "fedvib/harness/sweep.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "fedvib/cm/training.hpp"
#include "fedvib/errors.hpp"
#include "fedvib/rng.hpp"

namespace fedvib::harness {

SearchSpace SearchSpace::table_one() {
  return {{32, 64, 128}, {50, 100, 200}, {32, 64, 128, 256, 512}, {1, 2, 3, 4}, {8, 16, 32}, {3e-2, 3e-4, 1e-2, 1e-3}};
}

std::size_t SearchSpace::cardinality() const {
  return batch_sizes.size() * window_sizes.size() * outer_layer_sizes.size() * layer_counts.size() *
         encoding_sizes.size() * learning_rates.size();
}

nn::AutoencoderConfig Candidate::model(std::size_t feature_count) const {
  nn::AutoencoderConfig c;
  c.window_size = window_size;
  c.feature_count = feature_count;
  c.outer_layer_sizes.assign(layer_count, outer_layer_size);
  c.encoding_size = encoding_size;
  return c;
}

nn::TrainConfig Candidate::train() const {
  nn::TrainConfig t;
  t.batch_size = batch_size;
  t.learning_rate = learning_rate;
  return t;
}

std::string Candidate::describe() const {
  std::ostringstream s;
  s << "batch=" << batch_size << " window=" << window_size << " outer=" << outer_layer_size
    << " layers=" << layer_count << " hidden=" << encoding_size << " lr=" << learning_rate;
  return s.str();
}

std::vector<Candidate> enumerate(const SearchSpace& space) {
  std::vector<Candidate> out;
  out.reserve(space.cardinality());
  for (auto b : space.batch_sizes)
    for (auto w : space.window_sizes)
      for (auto o : space.outer_layer_sizes)
        for (auto l : space.layer_counts)
          for (auto h : space.encoding_sizes)
            for (auto lr : space.learning_rates) out.push_back({b, w, o, l, h, lr});
  return out;
}

std::vector<SweepEntry> sweep_hyperparameters(const SearchSpace& space, std::size_t budget,
                                              const signal::Dataset& data, const SweepOptions& options) {
  if (space.cardinality() == 0) throw ConfigError("search space is empty");
  if (budget == 0) throw ConfigError("sweep budget must be positive");
  auto grid = enumerate(space);
  Rng rng(options.seed);
  rng.shuffle(grid);
  grid.resize(std::min(budget, grid.size()));

  const auto split = signal::chronological_split(data, options.split);
  std::vector<SweepEntry> out;
  for (std::size_t k = 0; k < grid.size(); ++k) {
    const auto& c = grid[k];
    SweepEntry e;
    e.candidate = c;
    const auto config = c.model(data.feature_count);
    e.parameter_count = nn::parameter_count(config);
    const auto train = signal::windows_of(data, split.train, c.window_size);
    const auto val = signal::windows_of(data, split.validation, c.window_size);
    if (train.empty() || val.empty()) {
      e.val_loss = std::numeric_limits<double>::infinity();
    } else {
      auto model = cm::build_autoencoder(config, mix_seed(options.seed, k));
      const auto history = cm::train_epochs(model, train, val, c.train(), options.epochs, mix_seed(options.seed, k));
      e.val_loss = history.back().val_loss;
      if (!std::isfinite(e.val_loss)) e.val_loss = std::numeric_limits<double>::infinity();
    }
    out.push_back(e);
  }
  std::stable_sort(out.begin(), out.end(), [](const SweepEntry& a, const SweepEntry& b) {
    if (a.val_loss != b.val_loss) return a.val_loss < b.val_loss;
    return a.parameter_count < b.parameter_count;
  });
  return out;
}

}  // namespace fedvib::harness
