#include "fedvib/fed/weights.hpp"

#include <algorithm>
#include <cstring>
#include <set>

#include "fedvib/errors.hpp"

namespace fedvib::fed {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv(std::uint64_t& h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}

template <typename A, typename B>
bool layouts_match(const std::vector<A>& a, const std::vector<B>& b, auto shape_a, auto shape_b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || shape_a(a[i]) != shape_b(b[i])) return false;
  }
  return true;
}

const Tensor::Shape& shape_of(const NamedTensor& t) { return t.tensor.shape(); }
const Tensor::Shape& shape_of(const DeltaTensor& t) { return t.shape; }

auto shape_fn = [](const auto& t) -> const Tensor::Shape& { return shape_of(t); };

}  // namespace

std::size_t ModelWeights::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.tensor.size();
  return n;
}

std::uint64_t ModelWeights::fingerprint() const {
  std::uint64_t h = kFnvOffset;
  for (const auto& t : tensors) {
    fnv(h, t.name.data(), t.name.size());
    for (std::size_t d : t.tensor.shape()) {
      const std::uint64_t d64 = d;
      fnv(h, &d64, sizeof d64);
    }
    fnv(h, t.tensor.data(), t.tensor.size() * sizeof(float));
  }
  return h;
}

bool ModelWeights::same_layout(const ModelWeights& other) const {
  return layouts_match(tensors, other.tensors, shape_fn, shape_fn);
}

bool ModelWeights::identical(const ModelWeights& other) const {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != other.tensors[i].name || !tensors[i].tensor.identical(other.tensors[i].tensor)) {
      return false;
    }
  }
  return true;
}

void ModelWeights::validate() const {
  std::set<std::string> names;
  for (const auto& t : tensors) {
    if (!names.insert(t.name).second) throw DimensionError("duplicate tensor name '" + t.name + "'");
  }
}

bool WeightDelta::same_layout(const ModelWeights& weights) const {
  return layouts_match(tensors, weights.tensors, shape_fn, shape_fn);
}

bool WeightDelta::same_layout(const WeightDelta& other) const {
  return layouts_match(tensors, other.tensors, shape_fn, shape_fn);
}

ModelWeights weights_of(const nn::Autoencoder& model) {
  ModelWeights w;
  for (const auto& v : model.params().views()) {
    Tensor t = v.matrix ? Tensor({v.rows, v.cols}) : Tensor({v.rows});
    // Column-major storage to row-major tensor.
    for (std::size_t c = 0; c < v.cols; ++c)
      for (std::size_t r = 0; r < v.rows; ++r) t[r * v.cols + c] = v.data[c * v.rows + r];
    w.tensors.push_back({v.name, std::move(t)});
  }
  return w;
}

void load_weights(nn::Autoencoder& model, const ModelWeights& weights) {
  auto views = model.params().views();
  if (views.size() != weights.tensors.size()) {
    throw DimensionError("weight layout has " + std::to_string(weights.tensors.size()) +
                         " tensors, model expects " + std::to_string(views.size()));
  }
  for (std::size_t k = 0; k < views.size(); ++k) {
    const auto& v = views[k];
    const auto& t = weights.tensors[k];
    const Tensor::Shape expected = v.matrix ? Tensor::Shape{v.rows, v.cols} : Tensor::Shape{v.rows};
    if (t.name != v.name || t.tensor.shape() != expected) {
      throw DimensionError("weight tensor '" + t.name + "' " + shape_string(t.tensor.shape()) +
                           " does not match model tensor '" + v.name + "' " + shape_string(expected));
    }
  }
  for (std::size_t k = 0; k < views.size(); ++k) {
    const auto& v = views[k];
    const auto& t = weights.tensors[k].tensor;
    for (std::size_t c = 0; c < v.cols; ++c)
      for (std::size_t r = 0; r < v.rows; ++r) v.data[c * v.rows + r] = t[r * v.cols + c];
  }
  model.clear_cache();
}

WeightDelta compute_delta(const ModelWeights& local, const ModelWeights& base_global,
                          std::uint64_t base_round) {
  if (!local.same_layout(base_global)) throw DimensionError("delta between differing weight layouts");
  WeightDelta d;
  d.base_round = base_round;
  d.tensors.reserve(local.tensors.size());
  for (std::size_t k = 0; k < local.tensors.size(); ++k) {
    const auto& l = local.tensors[k].tensor;
    const auto& g = base_global.tensors[k].tensor;
    DeltaTensor dt{local.tensors[k].name, l.shape(), std::vector<double>(l.size())};
    for (std::size_t i = 0; i < l.size(); ++i) dt.values[i] = double(l[i]) - double(g[i]);
    d.tensors.push_back(std::move(dt));
  }
  return d;
}

ModelWeights apply_delta(const ModelWeights& base, const WeightDelta& delta) {
  if (!delta.same_layout(base)) throw DimensionError("delta layout does not match the base weights");
  ModelWeights out = base;
  for (std::size_t k = 0; k < out.tensors.size(); ++k) {
    auto& t = out.tensors[k].tensor;
    const auto& dv = delta.tensors[k].values;
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = float(double(t[i]) + dv[i]);
  }
  return out;
}

WeightDelta fedavg(std::span<const WeightDelta> deltas) {
  if (deltas.empty()) throw StateError("fedavg of an empty delta list");
  const auto& first = deltas.front();
  for (const auto& d : deltas) {
    if (!d.same_layout(first)) throw DimensionError("fedavg over differing delta layouts");
    if (d.base_round != first.base_round) {
      throw StateError("fedavg over deltas from different base rounds (" + std::to_string(first.base_round) +
                       " vs " + std::to_string(d.base_round) + ")");
    }
  }
  WeightDelta out = first;
  const std::size_t n = deltas.size();
  if (n == 1) return out;
  std::vector<double> column(n);
  for (std::size_t k = 0; k < out.tensors.size(); ++k) {
    auto& values = out.tensors[k].values;
    for (std::size_t i = 0; i < values.size(); ++i) {
      for (std::size_t j = 0; j < n; ++j) column[j] = deltas[j].tensors[k].values[i];
      std::sort(column.begin(), column.end());
      const double lo = column.front();
      double offset = 0.0;
      for (std::size_t j = 1; j < n; ++j) offset += column[j] - lo;
      values[i] = lo + offset / double(n);
    }
  }
  return out;
}

}  // namespace fedvib::fed
