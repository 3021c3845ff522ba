#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedvib/errors.hpp"
#include "fedvib/nn/kernels.hpp"
#include "fedvib/rng.hpp"

namespace fedvib::nn {

struct AutoencoderConfig {
  std::size_t window_size = 100;
  std::size_t feature_count = 1;
  std::vector<std::size_t> outer_layer_sizes{128};
  std::size_t encoding_size = 16;

  /// Throws ConfigError when the architecture is unusable.
  void validate() const;

  friend bool operator==(const AutoencoderConfig&, const AutoencoderConfig&) = default;
};

/// Flat view of one named parameter tensor. Matrices are stored column-major
/// with `rows` x `cols`; vectors have cols == 1 and `matrix == false`.
template <typename S>
struct ParamView {
  std::string name;
  S* data;
  std::size_t rows;
  std::size_t cols;
  bool matrix;

  std::size_t size() const { return rows * cols; }
};

/// All weights of the autoencoder, in a fixed order:
/// encoder.{0..n-1} outer LSTM layers, encoder.n the encoding layer,
/// decoder.{0..n-1} mirrored outer layers, then the per-timestep output layer.
template <typename S>
struct AutoencoderParams {
  std::vector<LstmWeights<S>> encoder;
  std::vector<LstmWeights<S>> decoder;
  DenseWeights<S> output;

  std::vector<ParamView<S>> views() {
    std::vector<ParamView<S>> out;
    auto add_lstm = [&out](const std::string& prefix, LstmWeights<S>& l) {
      out.push_back({prefix + ".W", l.W.data(), std::size_t(l.W.rows()), std::size_t(l.W.cols()), true});
      out.push_back({prefix + ".U", l.U.data(), std::size_t(l.U.rows()), std::size_t(l.U.cols()), true});
      out.push_back({prefix + ".b", l.b.data(), std::size_t(l.b.size()), 1, false});
    };
    for (std::size_t i = 0; i < encoder.size(); ++i) add_lstm("encoder." + std::to_string(i), encoder[i]);
    for (std::size_t i = 0; i < decoder.size(); ++i) add_lstm("decoder." + std::to_string(i), decoder[i]);
    out.push_back({"output.W", output.W.data(), std::size_t(output.W.rows()), std::size_t(output.W.cols()), true});
    out.push_back({"output.b", output.b.data(), std::size_t(output.b.size()), 1, false});
    return out;
  }

  std::vector<ParamView<const S>> views() const {
    std::vector<ParamView<const S>> out;
    for (auto& v : const_cast<AutoencoderParams*>(this)->views()) {
      out.push_back({std::move(v.name), v.data, v.rows, v.cols, v.matrix});
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = output.W.size() + output.b.size();
    for (const auto& l : encoder) n += l.W.size() + l.U.size() + l.b.size();
    for (const auto& l : decoder) n += l.W.size() + l.U.size() + l.b.size();
    return n;
  }

  /// Zero-valued parameters with the layout of `config`.
  static AutoencoderParams zeros(const AutoencoderConfig& config) {
    AutoencoderParams p;
    auto lstm = [](std::size_t in, std::size_t h) {
      const auto H = Eigen::Index(h);
      return LstmWeights<S>{Mat<S>::Zero(4 * H, Eigen::Index(in)), Mat<S>::Zero(4 * H, H),
                            Vec<S>::Zero(4 * H)};
    };
    std::size_t in = config.feature_count;
    for (std::size_t h : config.outer_layer_sizes) {
      p.encoder.push_back(lstm(in, h));
      in = h;
    }
    p.encoder.push_back(lstm(in, config.encoding_size));
    in = config.encoding_size;
    for (auto it = config.outer_layer_sizes.rbegin(); it != config.outer_layer_sizes.rend(); ++it) {
      p.decoder.push_back(lstm(in, *it));
      in = *it;
    }
    p.output.W = Mat<S>::Zero(Eigen::Index(config.feature_count), Eigen::Index(in));
    p.output.b = Vec<S>::Zero(Eigen::Index(config.feature_count));
    return p;
  }

  template <typename T>
  AutoencoderParams<T> cast() const {
    AutoencoderParams<T> p;
    auto conv = [](const LstmWeights<S>& l) {
      return LstmWeights<T>{l.W.template cast<T>(), l.U.template cast<T>(), l.b.template cast<T>()};
    };
    for (const auto& l : encoder) p.encoder.push_back(conv(l));
    for (const auto& l : decoder) p.decoder.push_back(conv(l));
    p.output = {output.W.template cast<T>(), output.b.template cast<T>()};
    return p;
  }
};

/// Number of trainable parameters of the architecture described by `config`.
std::size_t parameter_count(const AutoencoderConfig& config);

/// LSTM autoencoder: outer LSTM layers (full sequences) feed an encoding LSTM
/// whose final state is repeated over the window and decoded by the mirrored
/// LSTM stack and a linear per-timestep output layer. ReLU sits between
/// consecutive outer layers only.
template <typename S>
class BasicAutoencoder {
 public:
  struct Cache {
    Mat<S> input;
    Eigen::Index batch = 0;
    std::vector<LstmTrace<S>> encoder;
    std::vector<LstmTrace<S>> decoder;
    Mat<S> decoder_out;
    Mat<S> reconstruction;
  };

  explicit BasicAutoencoder(AutoencoderConfig config)
      : config_((config.validate(), std::move(config))),
        params_(AutoencoderParams<S>::zeros(config_)) {}

  const AutoencoderConfig& config() const { return config_; }
  AutoencoderParams<S>& params() { return params_; }
  const AutoencoderParams<S>& params() const { return params_; }

  /// Glorot-uniform weights, zero biases, forget-gate biases 1.
  void initialize(std::uint64_t seed) {
    Rng rng(seed);
    auto glorot = [&rng](Mat<S>& m, double fan_in, double fan_out) {
      const double limit = std::sqrt(6.0 / (fan_in + fan_out));
      for (Eigen::Index c = 0; c < m.cols(); ++c)
        for (Eigen::Index r = 0; r < m.rows(); ++r) m(r, c) = S(rng.uniform(-limit, limit));
    };
    auto init_lstm = [&](LstmWeights<S>& l) {
      const auto H = l.hidden();
      glorot(l.W, double(l.W.cols()), double(l.W.rows()));
      glorot(l.U, double(H), double(4 * H));
      l.b.setZero();
      l.b.segment(H, H).setConstant(S(1));
    };
    for (auto& l : params_.encoder) init_lstm(l);
    for (auto& l : params_.decoder) init_lstm(l);
    glorot(params_.output.W, double(params_.output.W.cols()), double(params_.output.W.rows()));
    params_.output.b.setZero();
    cache_valid_ = false;
  }

  /// Forward pass over a minibatch laid out as [features, window * batch];
  /// keeps the intermediates for backward(). Returns the reconstruction.
  const Mat<S>& forward(const Mat<S>& input, Eigen::Index batch) {
    run(input, batch, cache_);
    cache_valid_ = true;
    return cache_.reconstruction;
  }

  /// Forward pass without touching the backward cache.
  Mat<S> reconstruct(const Mat<S>& input, Eigen::Index batch) const {
    Cache local;
    run(input, batch, local);
    return std::move(local.reconstruction);
  }

  /// Mean squared reconstruction error of the last forward pass.
  double last_loss() const {
    require_cache();
    return (cache_.reconstruction - cache_.input).template cast<double>().squaredNorm() /
           double(cache_.input.size());
  }

  /// l2_lambda * sum of squared weight-matrix entries (biases excluded).
  double l2_penalty(double l2_lambda) const {
    double sum = 0.0;
    auto add = [&sum](const Mat<S>& m) { sum += m.template cast<double>().squaredNorm(); };
    for (const auto& l : params_.encoder) { add(l.W); add(l.U); }
    for (const auto& l : params_.decoder) { add(l.W); add(l.U); }
    add(params_.output.W);
    return l2_lambda * sum;
  }

  /// Gradients of mse(reconstruction, input) + l2_lambda * sum(w^2) with
  /// respect to every parameter, for the last forward pass.
  AutoencoderParams<S> backward(S l2_lambda) const {
    require_cache();
    AutoencoderParams<S> grads = AutoencoderParams<S>::zeros(config_);
    const auto B = cache_.batch;
    const auto T = Eigen::Index(config_.window_size);
    const std::size_t n_outer = config_.outer_layer_sizes.size();

    Mat<S> d_out = (cache_.reconstruction - cache_.input) * (S(2) / S(cache_.input.size()));
    Mat<S> d = dense_backward(params_.output, cache_.decoder_out, d_out, grads.output);

    for (std::size_t k = params_.decoder.size(); k-- > 0;) {
      if (k + 1 < params_.decoder.size()) relu_backward(d, cache_.decoder[k].hidden);
      d = lstm_backward(params_.decoder[k], cache_.decoder[k], d, grads.decoder[k]);
    }
    // Decoder input is the encoding repeated per timestep.
    const auto E = Eigen::Index(config_.encoding_size);
    Mat<S> d_code = Mat<S>::Zero(E, B);
    for (Eigen::Index t = 0; t < T; ++t) d_code += d.middleCols(t * B, B);

    const auto& code_trace = cache_.encoder[n_outer];
    d = Mat<S>::Zero(E, T * B);
    d.rightCols(B) = d_code;
    d = lstm_backward(params_.encoder[n_outer], code_trace, d, grads.encoder[n_outer]);
    for (std::size_t k = n_outer; k-- > 0;) {
      if (k + 1 < n_outer) relu_backward(d, cache_.encoder[k].hidden);
      d = lstm_backward(params_.encoder[k], cache_.encoder[k], d, grads.encoder[k]);
    }

    if (l2_lambda != S(0)) {
      const S two_l = S(2) * l2_lambda;
      for (std::size_t i = 0; i < params_.encoder.size(); ++i) {
        grads.encoder[i].W += two_l * params_.encoder[i].W;
        grads.encoder[i].U += two_l * params_.encoder[i].U;
      }
      for (std::size_t i = 0; i < params_.decoder.size(); ++i) {
        grads.decoder[i].W += two_l * params_.decoder[i].W;
        grads.decoder[i].U += two_l * params_.decoder[i].U;
      }
      grads.output.W += two_l * params_.output.W;
    }
    return grads;
  }

  bool has_cache() const { return cache_valid_; }
  void clear_cache() { cache_valid_ = false; cache_ = Cache{}; }

 private:
  void require_cache() const {
    if (!cache_valid_) throw StateError("backward requested without a completed forward pass");
  }

  static void relu_inplace(Mat<S>& m) { m = m.cwiseMax(S(0)); }

  // Zeroes gradient entries where the ReLU input was non-positive.
  static void relu_backward(Mat<S>& grad, const Mat<S>& pre_activation) {
    grad = (pre_activation.array() > S(0)).select(grad, S(0));
  }

  void run(const Mat<S>& input, Eigen::Index batch, Cache& c) const {
    const auto T = Eigen::Index(config_.window_size);
    if (input.rows() != Eigen::Index(config_.feature_count) || batch < 1 ||
        input.cols() != T * batch) {
      throw DimensionError("autoencoder input must be [" + std::to_string(config_.feature_count) +
                           ", " + std::to_string(config_.window_size) + " * batch]");
    }
    const std::size_t n_outer = config_.outer_layer_sizes.size();
    c.input = input;
    c.batch = batch;
    c.encoder.resize(params_.encoder.size());
    c.decoder.resize(params_.decoder.size());

    Mat<S> h = input;
    for (std::size_t k = 0; k < n_outer; ++k) {
      lstm_forward(params_.encoder[k], h, batch, c.encoder[k]);
      h = c.encoder[k].hidden;
      if (k + 1 < n_outer) relu_inplace(h);
    }
    lstm_forward(params_.encoder[n_outer], h, batch, c.encoder[n_outer]);
    const Mat<S> code = c.encoder[n_outer].final_hidden();

    h.resize(code.rows(), T * batch);
    for (Eigen::Index t = 0; t < T; ++t) h.middleCols(t * batch, batch) = code;
    for (std::size_t k = 0; k < params_.decoder.size(); ++k) {
      lstm_forward(params_.decoder[k], h, batch, c.decoder[k]);
      h = c.decoder[k].hidden;
      if (k + 1 < params_.decoder.size()) relu_inplace(h);
    }
    c.decoder_out = std::move(h);
    c.reconstruction = dense_forward(params_.output, c.decoder_out);
  }

  AutoencoderConfig config_;
  AutoencoderParams<S> params_;
  Cache cache_;
  bool cache_valid_ = false;
};

using Autoencoder = BasicAutoencoder<float>;

}  // namespace fedvib::nn
