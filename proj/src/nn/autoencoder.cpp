#include "fedvib/nn/autoencoder.hpp"

namespace fedvib::nn {

void AutoencoderConfig::validate() const {
  if (window_size < 2) throw ConfigError("window_size must be at least 2");
  if (feature_count < 1) throw ConfigError("feature_count must be at least 1");
  if (encoding_size < 1) throw ConfigError("encoding_size must be at least 1");
  for (std::size_t s : outer_layer_sizes) {
    if (s < 1) throw ConfigError("outer layer sizes must be positive");
  }
  if (encoding_size >= window_size * feature_count) {
    throw ConfigError("encoding_size " + std::to_string(encoding_size) +
                      " does not compress a window of " +
                      std::to_string(window_size * feature_count) + " values");
  }
}

std::size_t parameter_count(const AutoencoderConfig& config) {
  config.validate();
  auto lstm = [](std::size_t in, std::size_t h) { return 4 * h * (in + h + 1); };
  std::size_t n = 0;
  std::size_t in = config.feature_count;
  for (std::size_t h : config.outer_layer_sizes) {
    n += lstm(in, h);
    in = h;
  }
  n += lstm(in, config.encoding_size);
  in = config.encoding_size;
  for (auto it = config.outer_layer_sizes.rbegin(); it != config.outer_layer_sizes.rend(); ++it) {
    n += lstm(in, *it);
    in = *it;
  }
  return n + config.feature_count * (in + 1);
}

template class BasicAutoencoder<float>;
template class BasicAutoencoder<double>;

}  // namespace fedvib::nn
