#include "fedvib/nn/layers.hpp"

#include <algorithm>
#include <cmath>

#include "fedvib/errors.hpp"
#include "fedvib/rng.hpp"

namespace fedvib::nn {

namespace {

using RowMajor = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

void require_shape(const Tensor& t, const Tensor::Shape& shape, const char* what) {
  if (t.shape() != shape) {
    throw DimensionError(std::string(what) + " has shape " + shape_string(t.shape()) +
                         ", expected " + shape_string(shape));
  }
}

}  // namespace

Tensor matrix_to_tensor(const Mat<float>& m) {
  Tensor t({std::size_t(m.rows()), std::size_t(m.cols())});
  Eigen::Map<RowMajor>(t.data(), m.rows(), m.cols()) = m;
  return t;
}

Mat<float> tensor_to_matrix(const Tensor& t) {
  if (t.rank() != 2) throw DimensionError("expected a rank-2 tensor, got " + shape_string(t.shape()));
  return Eigen::Map<const RowMajor>(t.data(), Eigen::Index(t.dim(0)), Eigen::Index(t.dim(1)));
}

LstmLayerParams LstmLayerParams::zeros(std::size_t input_size, std::size_t hidden_size) {
  LstmLayerParams p{input_size, hidden_size, Tensor({4 * hidden_size, input_size}),
                    Tensor({4 * hidden_size, hidden_size}), Tensor({4 * hidden_size})};
  for (std::size_t i = hidden_size; i < 2 * hidden_size; ++i) p.b[i] = 1.0f;
  return p;
}

LstmLayerParams LstmLayerParams::glorot(std::size_t input_size, std::size_t hidden_size,
                                        std::uint64_t seed) {
  auto p = zeros(input_size, hidden_size);
  Rng rng(seed);
  const double lw = std::sqrt(6.0 / double(input_size + 4 * hidden_size));
  const double lu = std::sqrt(6.0 / double(hidden_size + 4 * hidden_size));
  for (float& v : p.W.values()) v = float(rng.uniform(-lw, lw));
  for (float& v : p.U.values()) v = float(rng.uniform(-lu, lu));
  return p;
}

void LstmLayerParams::validate() const {
  if (input_size == 0 || hidden_size == 0) throw DimensionError("LSTM sizes must be positive");
  require_shape(W, {4 * hidden_size, input_size}, "LSTM W");
  require_shape(U, {4 * hidden_size, hidden_size}, "LSTM U");
  require_shape(b, {4 * hidden_size}, "LSTM b");
}

void DenseLayerParams::validate() const {
  if (W.rank() != 2) throw DimensionError("dense W must be rank 2");
  require_shape(b, {W.dim(0)}, "dense b");
}

LstmWeights<float> to_weights(const LstmLayerParams& p) {
  p.validate();
  return {tensor_to_matrix(p.W), tensor_to_matrix(p.U),
          Eigen::Map<const Vec<float>>(p.b.data(), Eigen::Index(p.b.size()))};
}

DenseWeights<float> to_weights(const DenseLayerParams& p) {
  p.validate();
  return {tensor_to_matrix(p.W), Eigen::Map<const Vec<float>>(p.b.data(), Eigen::Index(p.b.size()))};
}

LstmForwardResult lstm_forward(const LstmLayerParams& params, const Tensor& input,
                               bool return_sequences) {
  if (input.rank() != 2 || input.dim(0) < 1 || input.dim(1) != params.input_size) {
    throw DimensionError("LSTM input " + shape_string(input.shape()) + " does not match input size " +
                         std::to_string(params.input_size));
  }
  const auto w = to_weights(params);
  // A row-major [T, in] sequence is the column-major [in, T] layout the kernel expects.
  const Mat<float> x = Eigen::Map<const Mat<float>>(input.data(), Eigen::Index(input.dim(1)),
                                                    Eigen::Index(input.dim(0)));
  LstmForwardResult result;
  lstm_forward(w, x, 1, result.cache);
  const auto H = params.hidden_size;
  if (return_sequences) {
    const auto T = input.dim(0);
    result.output = Tensor({T, H});
    Eigen::Map<Mat<float>>(result.output.data(), Eigen::Index(H), Eigen::Index(T)) =
        result.cache.hidden;
  } else {
    result.output = Tensor({H});
    Eigen::Map<Vec<float>>(result.output.data(), Eigen::Index(H)) = result.cache.final_hidden();
  }
  return result;
}

Tensor dense_forward(const DenseLayerParams& params, const Tensor& input) {
  const auto w = to_weights(params);
  const auto in = std::size_t(w.W.cols());
  const auto out = std::size_t(w.W.rows());
  if (input.rank() == 1 && input.dim(0) == in) {
    const Mat<float> x = Eigen::Map<const Mat<float>>(input.data(), Eigen::Index(in), 1);
    const Mat<float> y = dense_forward(w, x);
    Tensor result({out});
    std::copy(y.data(), y.data() + y.size(), result.data());
    return result;
  }
  if (input.rank() == 2 && input.dim(1) == in) {
    const auto T = input.dim(0);
    const Mat<float> x =
        Eigen::Map<const Mat<float>>(input.data(), Eigen::Index(in), Eigen::Index(T));
    const Mat<float> y = dense_forward(w, x);
    Tensor result({T, out});
    std::copy(y.data(), y.data() + y.size(), result.data());
    return result;
  }
  throw DimensionError("dense input " + shape_string(input.shape()) + " does not match width " +
                       std::to_string(in));
}

Tensor relu(const Tensor& x) {
  Tensor y = x;
  for (float& v : y.values()) v = std::max(v, 0.0f);
  return y;
}

double mse_loss(const Tensor& input, const Tensor& prediction) {
  if (input.shape() != prediction.shape()) {
    throw DimensionError("mse_loss shapes differ: " + shape_string(input.shape()) + " vs " +
                         shape_string(prediction.shape()));
  }
  if (input.size() == 0) throw DimensionError("mse_loss of empty tensors");
  double sum = 0.0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double d = double(input[i]) - double(prediction[i]);
    sum += d * d;
  }
  return sum / double(input.size());
}

double decayed_lr(double lr0, std::size_t epoch_index, double decay_per_epoch) {
  return lr0 * std::pow(1.0 - decay_per_epoch, double(epoch_index));
}

}  // namespace fedvib::nn
