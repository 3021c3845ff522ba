#pragma once

// Batched LSTM / dense kernels shared by the Tensor-level operations and the
// autoencoder. Sequences of a minibatch are laid out as a column-major
// [features x (steps * batch)] matrix where column t * batch + b holds
// timestep t of sequence b.
//
// LSTM gate rows are ordered (input, forget, cell, output).

#include <Eigen/Core>
#include <cmath>

#include "fedvib/errors.hpp"

namespace fedvib::nn {

template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <typename S>
struct LstmWeights {
  Mat<S> W;  // [4H, in]
  Mat<S> U;  // [4H, H]
  Vec<S> b;  // [4H]

  Eigen::Index hidden() const { return U.cols(); }
  Eigen::Index input() const { return W.cols(); }
};

template <typename S>
struct DenseWeights {
  Mat<S> W;  // [out, in]
  Vec<S> b;  // [out]
};

/// Intermediates of one LSTM forward pass, needed for backprop.
template <typename S>
struct LstmTrace {
  Mat<S> input;   // [in, T*B]
  Mat<S> gates;   // activated gates [4H, T*B]
  Mat<S> cells;   // [H, T*B]
  Mat<S> hidden;  // [H, T*B]
  Eigen::Index steps = 0;
  Eigen::Index batch = 0;

  auto final_hidden() const { return hidden.middleCols((steps - 1) * batch, batch); }
};

template <typename Derived>
auto sigmoid_array(const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return ((-x.array()).exp() + S(1)).inverse().matrix();
}

template <typename S>
void check_lstm_shapes(const LstmWeights<S>& w) {
  const auto h = w.U.cols();
  if (h < 1 || w.U.rows() != 4 * h || w.W.rows() != 4 * h || w.b.size() != 4 * h) {
    throw DimensionError("inconsistent LSTM parameter shapes");
  }
}

/// Runs the recurrence from zero initial state over `steps` timesteps.
template <typename S>
void lstm_forward(const LstmWeights<S>& w, const Mat<S>& x, Eigen::Index batch,
                  LstmTrace<S>& trace) {
  check_lstm_shapes(w);
  if (batch < 1 || x.cols() % batch != 0 || x.cols() == 0) {
    throw DimensionError("LSTM input columns not a multiple of the batch size");
  }
  if (x.rows() != w.input()) {
    throw DimensionError("LSTM input width " + std::to_string(x.rows()) + " != " +
                         std::to_string(w.input()));
  }
  const Eigen::Index H = w.hidden();
  const Eigen::Index B = batch;
  const Eigen::Index T = x.cols() / B;
  trace.steps = T;
  trace.batch = B;
  trace.input = x;
  trace.gates.noalias() = w.W * x;
  trace.gates.colwise() += w.b;
  trace.cells.resize(H, T * B);
  trace.hidden.resize(H, T * B);

  for (Eigen::Index t = 0; t < T; ++t) {
    auto a = trace.gates.middleCols(t * B, B);
    if (t > 0) a.noalias() += w.U * trace.hidden.middleCols((t - 1) * B, B);
    a.topRows(2 * H) = sigmoid_array(a.topRows(2 * H));
    a.middleRows(2 * H, H) = a.middleRows(2 * H, H).array().tanh();
    a.bottomRows(H) = sigmoid_array(a.bottomRows(H));

    auto c = trace.cells.middleCols(t * B, B);
    c = a.topRows(H).cwiseProduct(a.middleRows(2 * H, H));
    if (t > 0) c += a.middleRows(H, H).cwiseProduct(trace.cells.middleCols((t - 1) * B, B));
    trace.hidden.middleCols(t * B, B) = a.bottomRows(H).cwiseProduct(c.array().tanh().matrix());
  }
}

/// Backpropagates `d_hidden` ([H, T*B], gradient w.r.t. every hidden output)
/// through the recurrence. Parameter gradients are accumulated into `grads`;
/// the gradient w.r.t. the layer input is returned.
template <typename S>
Mat<S> lstm_backward(const LstmWeights<S>& w, const LstmTrace<S>& trace, const Mat<S>& d_hidden,
                     LstmWeights<S>& grads) {
  const Eigen::Index H = w.hidden();
  const Eigen::Index B = trace.batch;
  const Eigen::Index T = trace.steps;
  if (d_hidden.rows() != H || d_hidden.cols() != T * B) {
    throw DimensionError("LSTM output gradient has the wrong shape");
  }
  Mat<S> d_pre(4 * H, T * B);
  Mat<S> dh_next = Mat<S>::Zero(H, B);
  Mat<S> dc_next = Mat<S>::Zero(H, B);
  Mat<S> dh(H, B), dc(H, B), tc(H, B);

  for (Eigen::Index t = T - 1; t >= 0; --t) {
    const auto g = trace.gates.middleCols(t * B, B);
    const auto i_g = g.topRows(H).array();
    const auto f_g = g.middleRows(H, H).array();
    const auto c_g = g.middleRows(2 * H, H).array();
    const auto o_g = g.bottomRows(H).array();

    dh = d_hidden.middleCols(t * B, B) + dh_next;
    tc = trace.cells.middleCols(t * B, B).array().tanh();
    dc.array() = dh.array() * o_g * (S(1) - tc.array().square()) + dc_next.array();

    auto dp = d_pre.middleCols(t * B, B);
    dp.topRows(H).array() = dc.array() * c_g * i_g * (S(1) - i_g);
    if (t > 0) {
      const auto c_prev = trace.cells.middleCols((t - 1) * B, B).array();
      dp.middleRows(H, H).array() = dc.array() * c_prev * f_g * (S(1) - f_g);
    } else {
      dp.middleRows(H, H).setZero();
    }
    dp.middleRows(2 * H, H).array() = dc.array() * i_g * (S(1) - c_g.square());
    dp.bottomRows(H).array() = dh.array() * tc.array() * o_g * (S(1) - o_g);

    dc_next.array() = dc.array() * f_g;
    dh_next.noalias() = w.U.transpose() * dp;
  }

  grads.W.noalias() += d_pre * trace.input.transpose();
  if (T > 1) {
    grads.U.noalias() +=
        d_pre.rightCols((T - 1) * B) * trace.hidden.leftCols((T - 1) * B).transpose();
  }
  grads.b += d_pre.rowwise().sum();
  return w.W.transpose() * d_pre;
}

template <typename S>
Mat<S> dense_forward(const DenseWeights<S>& w, const Mat<S>& x) {
  if (x.rows() != w.W.cols() || w.b.size() != w.W.rows()) {
    throw DimensionError("dense input width " + std::to_string(x.rows()) + " != " +
                         std::to_string(w.W.cols()));
  }
  Mat<S> y = w.W * x;
  y.colwise() += w.b;
  return y;
}

template <typename S>
Mat<S> dense_backward(const DenseWeights<S>& w, const Mat<S>& x, const Mat<S>& d_out,
                      DenseWeights<S>& grads) {
  grads.W.noalias() += d_out * x.transpose();
  grads.b += d_out.rowwise().sum();
  return w.W.transpose() * d_out;
}

}  // namespace fedvib::nn
