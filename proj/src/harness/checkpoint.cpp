#include "fedvib/harness/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <map>

#include "fedvib/errors.hpp"
#include "fedvib/fed/wire.hpp"
#include "fedvib/text.hpp"

namespace fedvib::harness {

namespace fs = std::filesystem;

void save_checkpoint(const fs::path& dir, const Checkpoint& checkpoint) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto blob = fed::serialize_weights(checkpoint.weights);
  {
    std::ofstream out(dir / "model.fvw", std::ios::binary);
    if (!out) throw IngestError("cannot write " + (dir / "model.fvw").string());
    out.write(reinterpret_cast<const char*>(blob.data()), std::streamsize(blob.size()));
  }
  const auto& m = checkpoint.meta;
  std::ofstream out(dir / "model.meta");
  if (!out) throw IngestError("cannot write " + (dir / "model.meta").string());
  out << "format = fedvib-checkpoint 1\n";
  out << "window_size = " << m.model.window_size << '\n';
  out << "feature_count = " << m.model.feature_count << '\n';
  out << "outer_layer_sizes =";
  for (auto s : m.model.outer_layer_sizes) out << ' ' << s;
  out << '\n';
  out << "encoding_size = " << m.model.encoding_size << '\n';
  out << "round = " << m.round << '\n';
  out << "delta = " << text::format_number(m.delta) << '\n';
  out << "threshold_mode = " << cm::to_string(m.mode) << '\n';
  if (m.threshold) out << "threshold = " << text::format_number(*m.threshold) << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const auto meta_path = dir / "model.meta";
  std::ifstream in(meta_path);
  if (!in) throw IngestError("checkpoint metadata " + meta_path.string() + " not found");
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IngestError(meta_path.string() + ":" + std::to_string(lineno) + ": missing '='");
    auto trim = [](std::string s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.pop_back();
      return s;
    };
    kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end()) throw IngestError(meta_path.string() + ": missing key '" + key + "'");
    return it->second;
  };
  auto number = [&](const std::string& key, auto& out) {
    if (!text::parse_number(need(key), out)) throw IngestError(meta_path.string() + ": bad value for '" + key + "'");
  };
  if (need("format") != "fedvib-checkpoint 1") throw IngestError(meta_path.string() + ": unknown checkpoint format");

  Checkpoint cp;
  auto& m = cp.meta;
  number("window_size", m.model.window_size);
  number("feature_count", m.model.feature_count);
  number("encoding_size", m.model.encoding_size);
  m.model.outer_layer_sizes.clear();
  for (auto field : text::split_fields(need("outer_layer_sizes"), ' ')) {
    std::size_t v = 0;
    if (!text::parse_number(field, v)) throw IngestError(meta_path.string() + ": bad outer_layer_sizes");
    m.model.outer_layer_sizes.push_back(v);
  }
  number("round", m.round);
  number("delta", m.delta);
  m.mode = cm::parse_threshold_mode(need("threshold_mode"));
  if (kv.contains("threshold")) {
    double t = 0.0;
    number("threshold", t);
    m.threshold = t;
  }
  m.model.validate();

  const auto blob_path = dir / "model.fvw";
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw IngestError("checkpoint weights " + blob_path.string() + " not found");
  const fed::Bytes blob{std::istreambuf_iterator<char>(bin), std::istreambuf_iterator<char>()};
  cp.weights = fed::deserialize_weights(blob);
  nn::Autoencoder probe(m.model);
  fed::load_weights(probe, cp.weights);
  return cp;
}

}  // namespace fedvib::harness
