#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedvib/nn/autoencoder.hpp"
#include "fedvib/nn/tensor.hpp"

namespace fedvib::fed {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Ordered, named float32 tensors; the unit of federated exchange.
struct ModelWeights {
  std::vector<NamedTensor> tensors;

  std::size_t parameter_count() const;
  /// FNV-1a over names, shapes and value bytes.
  std::uint64_t fingerprint() const;
  /// Same names and shapes in the same order.
  bool same_layout(const ModelWeights& other) const;
  /// Bitwise equality of names, shapes and values.
  bool identical(const ModelWeights& other) const;
  /// Throws DimensionError on duplicate names.
  void validate() const;
};

struct DeltaTensor {
  std::string name;
  Tensor::Shape shape;
  std::vector<double> values;
};

/// Elementwise difference of local weights to the global model distributed
/// in `base_round`. Values are float64: the difference of two float32 values
/// is exact in double, which keeps apply_delta(g, compute_delta(l, g)) == l.
struct WeightDelta {
  std::vector<DeltaTensor> tensors;
  std::uint64_t base_round = 0;

  bool same_layout(const ModelWeights& weights) const;
  bool same_layout(const WeightDelta& other) const;
};

/// Weights of `model` named and ordered by the autoencoder layout.
ModelWeights weights_of(const nn::Autoencoder& model);

/// Overwrites the parameters of `model`; throws DimensionError when the
/// layout differs.
void load_weights(nn::Autoencoder& model, const ModelWeights& weights);

WeightDelta compute_delta(const ModelWeights& local, const ModelWeights& base_global,
                          std::uint64_t base_round = 0);

/// base + delta, computed in double and rounded once to float32.
ModelWeights apply_delta(const ModelWeights& base, const WeightDelta& delta);

/// Unweighted elementwise mean. Each element is averaged over the deltas in
/// sorted order as min + mean(value - min), which makes the result
/// independent of argument order and exact for identical deltas.
WeightDelta fedavg(std::span<const WeightDelta> deltas);

}  // namespace fedvib::fed
