#include "fedvib/harness/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "fedvib/errors.hpp"
#include "fedvib/rng.hpp"
#include "json.hpp"

namespace fedvib::harness {

using nlohmann::json;

std::string to_string(Scenario scenario) {
  switch (scenario) {
    case Scenario::historical: return "historical";
    case Scenario::cold_start: return "cold_start";
    case Scenario::knowledge_transfer: return "knowledge_transfer";
    case Scenario::centralized: return "centralized";
  }
  return "unknown";
}

Scenario parse_scenario(const std::string& text) {
  for (auto s : {Scenario::historical, Scenario::cold_start, Scenario::knowledge_transfer, Scenario::centralized}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown scenario '" + text + "'");
}

std::string to_string(DataSource source) {
  switch (source) {
    case DataSource::synthetic: return "synthetic";
    case DataSource::csv: return "csv";
    case DataSource::ims: return "ims";
  }
  return "unknown";
}

namespace {

DataSource parse_source(const std::string& text) {
  for (auto s : {DataSource::synthetic, DataSource::csv, DataSource::ims}) {
    if (to_string(s) == text) return s;
  }
  throw ConfigError("unknown data source '" + text + "'");
}

/// Reads known keys from a JSON object and rejects anything else.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw ConfigError("unknown key '" + where_ + "." + key + "'");
    }
  }

  std::string path(const char* key) const { return where_ + "." + key; }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> seen_;
};

signal::SynthConfig read_synth(const json& j, const std::string& where) {
  signal::SynthConfig s;
  Reader r(j, where);
  r.get("n_batches", s.n_batches);
  r.get("batch_len", s.batch_len);
  r.get("sampling_rate", s.sampling_rate);
  r.get("feature_count", s.feature_count);
  r.get("anomaly_indices", s.anomaly_indices);
  r.get("anomaly_amplitude_factor", s.anomaly_amplitude_factor);
  r.get("frequencies_hz", s.frequencies_hz);
  r.get("amplitudes", s.amplitudes);
  r.get("noise_std", s.noise_std);
  r.get("start_timestamp", s.start_timestamp);
  r.get("batch_interval_s", s.batch_interval_s);
  r.get("seed", s.seed);
  r.get("source_id", s.source_id);
  r.finish();
  return s;
}

json write_synth(const signal::SynthConfig& s) {
  return {{"n_batches", s.n_batches},
          {"batch_len", s.batch_len},
          {"sampling_rate", s.sampling_rate},
          {"feature_count", s.feature_count},
          {"anomaly_indices", s.anomaly_indices},
          {"anomaly_amplitude_factor", s.anomaly_amplitude_factor},
          {"frequencies_hz", s.frequencies_hz},
          {"amplitudes", s.amplitudes},
          {"noise_std", s.noise_std},
          {"start_timestamp", s.start_timestamp},
          {"batch_interval_s", s.batch_interval_s},
          {"seed", s.seed},
          {"source_id", s.source_id}};
}

NodeSpec read_node(const json& j, const std::string& where) {
  NodeSpec n;
  Reader r(j, where);
  r.get("id", n.id);
  std::string source = to_string(n.source);
  r.get("source", source);
  n.source = parse_source(source);
  if (const json* s = r.child("synth")) n.synth = read_synth(*s, r.path("synth"));
  std::string path;
  r.get("path", path);
  n.path = path;
  r.get("channels", n.channels);
  r.get("expected_rows", n.expected_rows);
  r.get("downsample_factor", n.downsample_factor);
  r.finish();
  if (n.source == DataSource::synthetic && n.synth.source_id == "synthetic") n.synth.source_id = n.id;
  return n;
}

json write_node(const NodeSpec& n) {
  json j = {{"id", n.id}, {"source", to_string(n.source)}, {"downsample_factor", n.downsample_factor}};
  if (n.source == DataSource::synthetic) j["synth"] = write_synth(n.synth);
  if (n.source != DataSource::synthetic) j["path"] = n.path.string();
  if (n.source == DataSource::ims) {
    j["channels"] = n.channels;
    j["expected_rows"] = n.expected_rows;
  }
  return j;
}

}  // namespace

void ExperimentConfig::validate() const {
  model.validate();
  train.validate();
  split.validate();
  if (nodes.empty()) throw ConfigError("nodes: at least one node is required");
  std::set<std::string> ids;
  for (const auto& n : nodes) {
    if (n.id.empty()) throw ConfigError("nodes: every node needs an id");
    if (!ids.insert(n.id).second) throw ConfigError("nodes: duplicate id '" + n.id + "'");
    if (n.downsample_factor == 0) throw ConfigError("nodes." + n.id + ".downsample_factor must be positive");
    if (n.source != DataSource::synthetic && n.path.empty()) throw ConfigError("nodes." + n.id + ".path is required");
    if (n.source == DataSource::synthetic && n.synth.feature_count != model.feature_count) {
      throw ConfigError("nodes." + n.id + ".synth.feature_count differs from model.feature_count");
    }
    if (n.source == DataSource::ims && n.channels.size() != model.feature_count) {
      throw ConfigError("nodes." + n.id + ".channels must list model.feature_count columns");
    }
  }
  if (epochs_per_round == 0) throw ConfigError("epochs_per_round must be positive");
  if (scenario == Scenario::centralized && centralized_epochs == 0) {
    throw ConfigError("centralized_epochs must be positive");
  }
  if (scenario == Scenario::cold_start && cold_start_step == 0) throw ConfigError("cold_start_step must be positive");
  if (scenario == Scenario::knowledge_transfer) {
    if (!target) throw ConfigError("knowledge_transfer needs a target node");
    if (!(target_calibration_fraction > 0.0 && target_calibration_fraction < 1.0)) {
      throw ConfigError("target_calibration_fraction must be in (0, 1)");
    }
  }
  if (!(delta >= 0.0)) throw ConfigError("delta must be non-negative");
}

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  Reader r(j, "config");
  std::string scenario = to_string(c.scenario);
  r.get("scenario", scenario);
  c.scenario = parse_scenario(scenario);
  if (const json* nodes = r.child("nodes")) {
    if (!nodes->is_array()) throw ConfigError("config.nodes must be an array");
    for (std::size_t i = 0; i < nodes->size(); ++i) {
      c.nodes.push_back(read_node((*nodes)[i], "config.nodes[" + std::to_string(i) + "]"));
    }
  }
  if (const json* t = r.child("target")) c.target = read_node(*t, "config.target");
  r.get("target_calibration_fraction", c.target_calibration_fraction);
  if (const json* m = r.child("model")) {
    Reader mr(*m, "config.model");
    mr.get("window_size", c.model.window_size);
    mr.get("feature_count", c.model.feature_count);
    mr.get("outer_layer_sizes", c.model.outer_layer_sizes);
    mr.get("encoding_size", c.model.encoding_size);
    mr.finish();
  }
  if (const json* t = r.child("train")) {
    Reader tr(*t, "config.train");
    tr.get("learning_rate", c.train.learning_rate);
    tr.get("lr_decay_per_epoch", c.train.lr_decay_per_epoch);
    tr.get("l2_lambda", c.train.l2_lambda);
    tr.get("clip_max_norm", c.train.clip_max_norm);
    tr.get("batch_size", c.train.batch_size);
    tr.finish();
  }
  if (const json* s = r.child("split")) {
    Reader sr(*s, "config.split");
    sr.get("train_fraction", c.split.train_fraction);
    sr.get("val_fraction_of_train", c.split.val_fraction_of_train);
    sr.finish();
  }
  r.get("rounds", c.rounds);
  r.get("epochs_per_round", c.epochs_per_round);
  r.get("centralized_epochs", c.centralized_epochs);
  r.get("cold_start_step", c.cold_start_step);
  r.get("delta", c.delta);
  std::string mode = cm::to_string(c.threshold_mode);
  r.get("threshold_mode", mode);
  c.threshold_mode = cm::parse_threshold_mode(mode);
  std::string unit = cm::to_string(c.reference_unit);
  r.get("reference_unit", unit);
  c.reference_unit = cm::parse_reference_unit(unit);
  r.get("standardize", c.standardize);
  r.get("persist_optimizer", c.persist_optimizer);
  r.get("seed", c.seed);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_json(const ExperimentConfig& c) {
  json nodes = json::array();
  for (const auto& n : c.nodes) nodes.push_back(write_node(n));
  json j = {
      {"scenario", to_string(c.scenario)},
      {"nodes", nodes},
      {"target_calibration_fraction", c.target_calibration_fraction},
      {"model",
       {{"window_size", c.model.window_size},
        {"feature_count", c.model.feature_count},
        {"outer_layer_sizes", c.model.outer_layer_sizes},
        {"encoding_size", c.model.encoding_size}}},
      {"train",
       {{"learning_rate", c.train.learning_rate},
        {"lr_decay_per_epoch", c.train.lr_decay_per_epoch},
        {"l2_lambda", c.train.l2_lambda},
        {"clip_max_norm", c.train.clip_max_norm},
        {"batch_size", c.train.batch_size}}},
      {"split", {{"train_fraction", c.split.train_fraction}, {"val_fraction_of_train", c.split.val_fraction_of_train}}},
      {"rounds", c.rounds},
      {"epochs_per_round", c.epochs_per_round},
      {"centralized_epochs", c.centralized_epochs},
      {"cold_start_step", c.cold_start_step},
      {"delta", c.delta},
      {"threshold_mode", cm::to_string(c.threshold_mode)},
      {"reference_unit", cm::to_string(c.reference_unit)},
      {"standardize", c.standardize},
      {"persist_optimizer", c.persist_optimizer},
      {"seed", c.seed},
  };
  if (c.target) j["target"] = write_node(*c.target);
  return j.dump(2);
}

ExperimentConfig synthetic_experiment(std::size_t node_count, std::uint64_t seed, std::size_t anomalies_per_node) {
  ExperimentConfig c;
  c.seed = seed;
  c.model.feature_count = 3;
  const auto split = signal::chronological_split(signal::SynthConfig{}.n_batches, c.split);
  const std::size_t first_test = split.train_segment_size();
  const std::size_t n_test = signal::SynthConfig{}.n_batches - first_test;
  if (anomalies_per_node > n_test) throw ConfigError("more anomalies than test batches");
  for (std::size_t k = 0; k < node_count; ++k) {
    NodeSpec n;
    n.id = "node" + std::to_string(k + 1);
    n.source = DataSource::synthetic;
    n.synth.seed = mix_seed(seed, 1000 + k);
    n.synth.source_id = n.id;
    Rng rng(mix_seed(seed, 2000 + k));
    std::vector<std::size_t> test(n_test);
    for (std::size_t i = 0; i < n_test; ++i) test[i] = first_test + i;
    rng.shuffle(test);
    n.synth.anomaly_indices.assign(test.begin(), test.begin() + std::ptrdiff_t(anomalies_per_node));
    std::sort(n.synth.anomaly_indices.begin(), n.synth.anomaly_indices.end());
    c.nodes.push_back(std::move(n));
  }
  return c;
}

}  // namespace fedvib::harness
