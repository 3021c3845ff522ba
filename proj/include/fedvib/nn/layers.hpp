#pragma once

// Tensor-level entry points for single sequences. The autoencoder uses the
// batched kernels directly; these wrap the same kernels with batch == 1.

#include <cstdint>

#include "fedvib/nn/kernels.hpp"
#include "fedvib/nn/tensor.hpp"

namespace fedvib::nn {

struct LstmLayerParams {
  std::size_t input_size = 0;
  std::size_t hidden_size = 0;
  Tensor W;  // [4*hidden, input], gate rows (input, forget, cell, output)
  Tensor U;  // [4*hidden, hidden]
  Tensor b;  // [4*hidden]

  /// Zero weights and biases except the forget-gate bias, which is 1.
  static LstmLayerParams zeros(std::size_t input_size, std::size_t hidden_size);
  /// Glorot-uniform weights, forget-gate bias 1.
  static LstmLayerParams glorot(std::size_t input_size, std::size_t hidden_size,
                                std::uint64_t seed);
  void validate() const;
};

struct DenseLayerParams {
  Tensor W;  // [out, in]
  Tensor b;  // [out]
  void validate() const;
};

struct LstmForwardResult {
  Tensor output;  // [T, hidden] or [hidden]
  LstmTrace<float> cache;
};

LstmForwardResult lstm_forward(const LstmLayerParams& params, const Tensor& input,
                               bool return_sequences);

/// W x + b for an [in] vector, or per timestep for a [T, in] sequence.
Tensor dense_forward(const DenseLayerParams& params, const Tensor& input);

Tensor relu(const Tensor& x);

/// Mean over all elements of the squared difference.
double mse_loss(const Tensor& input, const Tensor& prediction);

/// lr0 * (1 - decay)^epoch_index.
double decayed_lr(double lr0, std::size_t epoch_index, double decay_per_epoch = 0.01);

LstmWeights<float> to_weights(const LstmLayerParams& params);
DenseWeights<float> to_weights(const DenseLayerParams& params);

/// Row-major [rows, cols] tensor from a column-major Eigen matrix, and back.
Tensor matrix_to_tensor(const Mat<float>& m);
Mat<float> tensor_to_matrix(const Tensor& t);

}  // namespace fedvib::nn
