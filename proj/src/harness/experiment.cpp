#include "fedvib/harness/experiment.hpp"

#include <cmath>
#include <fstream>
#include <map>

#include "fedvib/cm/training.hpp"
#include "fedvib/errors.hpp"
#include "fedvib/rng.hpp"
#include "fedvib/text.hpp"

namespace fedvib::harness {

namespace fs = std::filesystem;

const NodeDetection& DetectionReport::node(const std::string& id) const {
  for (const auto& n : nodes)
    if (n.node == id) return n;
  throw StateError("no detection report for node '" + id + "'");
}

namespace {

struct LoadedNode {
  signal::Dataset dataset;
  std::uint64_t original_values = 0;
};

LoadedNode load_node(const NodeSpec& spec) {
  signal::Dataset ds;
  switch (spec.source) {
    case DataSource::synthetic: {
      auto synth = spec.synth;
      if (synth.source_id == "synthetic") synth.source_id = spec.id;
      ds = signal::synth_generate(synth);
      break;
    }
    case DataSource::csv:
      if (!fs::exists(spec.path)) throw IngestError("dataset manifest " + spec.path.string() + " not found");
      ds = signal::load_csv_dataset(spec.path);
      break;
    case DataSource::ims:
      if (!fs::is_directory(spec.path)) {
        throw IngestError("IMS data not found at " + spec.path.string() +
                          ". Download it with `fedvib fetch-ims --set <1|2|3> --out <dir>` and point the "
                          "node's path at the extracted test-set directory.");
      }
      ds = signal::load_ims_directory(spec.path, spec.channels, spec.expected_rows);
      break;
  }
  ds.source_id = spec.id;
  LoadedNode out;
  out.original_values = ds.value_count();
  if (spec.downsample_factor > 1) {
    for (auto& b : ds.batches) b = signal::downsample(b, spec.downsample_factor);
  }
  out.dataset = std::move(ds);
  return out;
}

std::vector<std::size_t> iota(std::size_t from, std::size_t to) {
  std::vector<std::size_t> v;
  for (std::size_t i = from; i < to; ++i) v.push_back(i);
  return v;
}

std::uint64_t raw_bytes(const std::vector<fed::LocalData>& nodes) {
  std::uint64_t n = 0;
  for (const auto& d : nodes) n += 4 * std::uint64_t(d.dataset.value_count());
  return n;
}

std::vector<fed::LocalData> prepare_counted(const ExperimentConfig& config, std::uint64_t& original_values);

ExperimentResult run_federation(const ExperimentConfig& config, bool cold_start) {
  std::uint64_t original_values = 0;
  const auto data = prepare_counted(config, original_values);
  fed::TrafficMeter meter;
  fed::AggregatorConfig ac;
  ac.expected_clients = data.size();
  ac.rounds = config.rounds;
  fed::Simulation sim(ac, initial_global(config), &meter);
  for (std::size_t i = 0; i < data.size(); ++i) {
    auto nc = node_config(config, i);
    if (cold_start) nc.cold_start_step = config.cold_start_step;
    sim.add_node(std::move(nc), data[i]);
  }
  sim.run();

  const auto& coord = sim.coordinator();
  ExperimentResult result;
  result.scenario = cold_start ? Scenario::cold_start : Scenario::historical;
  result.aborted = coord.aborted();
  result.diagnostic = coord.diagnostic();
  result.global = coord.global();
  result.detection.untrained = config.rounds == 0;

  const auto nodes = sim.nodes();
  auto record_for = [](const fed::TrainingNode& node, std::uint64_t model_round) -> const fed::NodeRoundRecord* {
    for (const auto& r : node.records())
      if (r.model_round == model_round) return &r;
    return nullptr;
  };

  for (const auto& rec : coord.records()) {
    RoundReport rr;
    rr.round = rec.round;
    rr.bytes_sent = rec.bytes_sent;
    rr.bytes_received = rec.bytes_received;
    rr.duration_s = rec.duration_s;
    for (const auto* node : nodes) {
      NodeRoundStats s;
      s.node = node->config().client_id;
      if (const auto* trained = record_for(*node, rec.round - 1); trained && !trained->epochs.empty()) {
        s.train_loss = trained->epochs.back().train_loss;
        s.val_loss = trained->epochs.back().val_loss;
        s.windows_trained = trained->windows_trained;
      }
      if (const auto* after = record_for(*node, rec.round); after && after->threshold) {
        s.threshold = after->threshold->threshold;
      }
      rr.nodes.push_back(std::move(s));
    }
    result.rounds.push_back(std::move(rr));
  }

  for (std::size_t i = 0; i < nodes.size(); ++i) {
    const auto* node = nodes[i];
    const auto* last = record_for(*node, config.rounds);
    if (!last || !last->threshold) continue;
    NodeDetection d = detect(node->config().client_id, data[i].dataset, data[i].split.test, last->test_scores,
                             *last->threshold);
    for (const auto& r : node->records())
      if (r.threshold) d.threshold_trace.push_back(r.threshold->threshold);
    result.detection.nodes.push_back(std::move(d));
  }

  const auto& t = coord.traffic();
  auto& net = result.network;
  net.setup_bytes = t.setup_bytes;
  net.round_bytes = t.round_bytes;
  net.final_bytes = t.final_bytes;
  net.aborted_bytes = t.aborted_bytes;
  net.federated_bytes = t.total();
  net.transport_bytes = meter.total_bytes();
  net.raw_bytes = raw_bytes(data);
  net.raw_bytes_original = 4 * original_values;
  net.reduction_percent = network_reduction(net.round_bytes + net.final_bytes, net.raw_bytes);
  return result;
}

}  // namespace

signal::Dataset load_node_dataset(const NodeSpec& spec) { return load_node(spec).dataset; }

namespace {

std::vector<fed::LocalData> prepare_counted(const ExperimentConfig& config, std::uint64_t& original_values) {
  std::vector<fed::LocalData> out;
  original_values = 0;
  for (const auto& spec : config.nodes) {
    auto loaded = load_node(spec);
    original_values += loaded.original_values;
    auto& ds = loaded.dataset;
    if (ds.feature_count != config.model.feature_count) {
      throw ConfigError("node '" + spec.id + "' has " + std::to_string(ds.feature_count) +
                        " features, model expects " + std::to_string(config.model.feature_count));
    }
    if (config.standardize) {
      const auto split = signal::chronological_split(ds, config.split);
      auto fit = split.train;
      fit.insert(fit.end(), split.validation.begin(), split.validation.end());
      signal::Standardizer::fit(ds, fit).apply(ds);
    }
    out.push_back(fed::LocalData::prepare(std::move(ds), config.split, config.model.window_size));
  }
  return out;
}

}  // namespace

std::vector<fed::LocalData> prepare_nodes(const ExperimentConfig& config) {
  std::uint64_t ignored = 0;
  return prepare_counted(config, ignored);
}

fed::ModelWeights initial_global(const ExperimentConfig& config) {
  return fed::weights_of(cm::build_autoencoder(config.model, config.seed));
}

fed::NodeConfig node_config(const ExperimentConfig& config, std::size_t node_index) {
  fed::NodeConfig nc;
  nc.client_id = config.nodes.at(node_index).id;
  nc.model = config.model;
  nc.train = config.train;
  nc.rounds = config.rounds;
  nc.epochs_per_round = config.epochs_per_round;
  nc.seed = mix_seed(config.seed, 100 + node_index);
  nc.persist_optimizer = config.persist_optimizer;
  nc.delta = config.delta;
  nc.threshold_mode = config.threshold_mode;
  nc.reference_unit = config.reference_unit;
  return nc;
}

std::size_t cold_start_windows(std::size_t round_index, std::size_t available, std::size_t step) {
  if (round_index < 1) throw ConfigError("cold-start rounds are numbered from 1");
  if (step == 0) throw ConfigError("cold-start step must be positive");
  if (round_index > available / step) return available;
  return std::min(available, step * round_index);
}

NodeDetection detect(const std::string& node_id, const signal::Dataset& dataset,
                     const std::vector<std::size_t>& batches, std::span<const double> scores,
                     const cm::ThresholdModel& threshold) {
  if (scores.size() != batches.size()) throw DimensionError("one score per batch is required");
  NodeDetection d;
  d.node = node_id;
  d.threshold = threshold;
  std::vector<signal::Label> predicted;
  std::vector<signal::Label> truth;
  for (std::size_t k = 0; k < batches.size(); ++k) {
    const auto& b = dataset.batches.at(batches[k]);
    BatchVerdict v;
    v.batch_index = batches[k];
    v.timestamp = b.timestamp;
    v.score = scores[k];
    v.threshold = threshold.threshold;
    v.label = b.label;
    v.verdict = cm::classify(scores[k], threshold);
    if (b.label) {
      predicted.push_back(v.verdict);
      truth.push_back(*b.label);
    }
    d.batches.push_back(v);
  }
  d.metrics = cm::evaluate_detection(predicted, truth);
  return d;
}

ExperimentResult run_historical(const ExperimentConfig& config) {
  config.validate();
  return run_federation(config, false);
}

ExperimentResult run_cold_start(const ExperimentConfig& config) {
  config.validate();
  return run_federation(config, true);
}

NodeDetection transfer_detection(const fed::ModelWeights& weights, const nn::AutoencoderConfig& model,
                                 const signal::Dataset& target, const std::vector<std::size_t>& calibration_batches,
                                 const std::vector<std::size_t>& scored_batches, double delta,
                                 cm::ThresholdMode mode, const std::string& node_id,
                                 cm::ReferenceUnit unit) {
  if (target.feature_count != model.feature_count) {
    throw DimensionError("target '" + target.source_id + "' has " + std::to_string(target.feature_count) +
                         " features, the source model expects " + std::to_string(model.feature_count));
  }
  nn::Autoencoder ae(model);
  fed::load_weights(ae, weights);
  const auto threshold = cm::calibrate_threshold(cm::reference_errors(ae, target, calibration_batches, unit), delta, mode);
  const auto scores = cm::score_batches(ae, target, scored_batches);
  return detect(node_id, target, scored_batches, scores, threshold);
}

ExperimentResult run_knowledge_transfer(const ExperimentConfig& config) {
  config.validate();
  if (!config.target) throw ConfigError("knowledge_transfer needs a target node");
  ExperimentResult result = run_federation(config, false);
  result.scenario = Scenario::knowledge_transfer;
  if (result.aborted) return result;

  auto target = load_node(*config.target).dataset;
  const std::size_t n = target.size();
  const std::size_t n_cal = std::max<std::size_t>(
      2, std::size_t(std::ceil(config.target_calibration_fraction * double(n) - 1e-9)));
  if (n_cal >= n) throw ConfigError("target has too few batches for calibration");
  const auto calibration = iota(0, n_cal);
  if (config.standardize) signal::Standardizer::fit(target, calibration).apply(target);
  result.detection.nodes = {transfer_detection(result.global, config.model, target, calibration, iota(0, n),
                                               config.delta, config.threshold_mode, config.target->id,
                                               config.reference_unit)};
  return result;
}

ExperimentResult run_centralized(const ExperimentConfig& config) {
  config.validate();
  std::uint64_t original_values = 0;
  const auto data = prepare_counted(config, original_values);
  std::vector<signal::Window> train;
  std::vector<signal::Window> validation;
  for (const auto& d : data) {
    train.insert(train.end(), d.train_windows.begin(), d.train_windows.end());
    validation.insert(validation.end(), d.validation_windows.begin(), d.validation_windows.end());
  }
  auto model = cm::build_autoencoder(config.model, config.seed);
  ExperimentResult result;
  result.scenario = Scenario::centralized;
  result.epochs = cm::train_epochs(model, train, validation, config.train, config.centralized_epochs,
                                   mix_seed(config.seed, 99));
  result.global = fed::weights_of(model);
  for (const auto& d : data) {
    const auto threshold = cm::calibrate_threshold(cm::reference_errors(model, d.dataset, d.calibration_batches, config.reference_unit),
                                                   config.delta, config.threshold_mode);
    const auto scores = cm::score_batches(model, d.dataset, d.split.test);
    auto det = detect(d.dataset.source_id, d.dataset, d.split.test, scores, threshold);
    det.threshold_trace = {threshold.threshold};
    result.detection.nodes.push_back(std::move(det));
  }
  result.network.raw_bytes = raw_bytes(data);
  result.network.raw_bytes_original = 4 * original_values;
  return result;
}

ExperimentResult run_experiment(const ExperimentConfig& config) {
  switch (config.scenario) {
    case Scenario::historical: return run_historical(config);
    case Scenario::cold_start: return run_cold_start(config);
    case Scenario::knowledge_transfer: return run_knowledge_transfer(config);
    case Scenario::centralized: return run_centralized(config);
  }
  throw ConfigError("unknown scenario");
}

double network_reduction(std::uint64_t fed_bytes, std::uint64_t centralized_bytes) {
  if (centralized_bytes == 0) throw ConfigError("centralized byte count must be positive");
  return 100.0 * (1.0 - double(fed_bytes) / double(centralized_bytes));
}

// --- export -------------------------------------------------------------------

namespace {

using text::format_number;

std::ofstream open_csv(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IngestError("cannot write " + path.string());
  return out;
}

std::string opt(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

}  // namespace

void export_results(const ExperimentResult& result, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir)) throw IngestError("cannot create output directory " + out_dir.string());

  {
    auto out = open_csv(out_dir / "scores.csv");
    out << "node,batch_index,timestamp,score,threshold,label,verdict\n";
    for (const auto& n : result.detection.nodes) {
      for (const auto& b : n.batches) {
        out << n.node << ',' << b.batch_index << ',' << format_number(b.timestamp) << ',' << format_number(b.score)
            << ',' << format_number(b.threshold) << ',' << (b.label ? signal::to_string(*b.label) : "") << ','
            << signal::to_string(b.verdict) << '\n';
      }
    }
  }
  {
    auto out = open_csv(out_dir / "rounds.csv");
    std::vector<std::string> ids;
    if (!result.rounds.empty())
      for (const auto& s : result.rounds.front().nodes) ids.push_back(s.node);
    // Setup traffic is carried on the first row, final-model and aborted
    // traffic on the last, so the byte columns add up to the whole session.
    out << "round,bytes_sent,bytes_received,setup_bytes,final_bytes,aborted_bytes,duration_s";
    for (const auto& id : ids) {
      out << ',' << id << "_train_loss," << id << "_val_loss," << id << "_windows_trained," << id << "_threshold";
    }
    out << '\n';
    for (std::size_t i = 0; i < result.rounds.size(); ++i) {
      const auto& r = result.rounds[i];
      const bool first = i == 0;
      const bool last = i + 1 == result.rounds.size();
      out << r.round << ',' << r.bytes_sent << ',' << r.bytes_received << ','
          << (first ? result.network.setup_bytes : 0) << ',' << (last ? result.network.final_bytes : 0) << ','
          << (last ? result.network.aborted_bytes : 0) << ',' << format_number(r.duration_s);
      for (const auto& s : r.nodes) {
        out << ',' << format_number(s.train_loss) << ',' << format_number(s.val_loss) << ',' << s.windows_trained
            << ',' << opt(s.threshold);
      }
      out << '\n';
    }
  }
  {
    auto out = open_csv(out_dir / "metrics.csv");
    out << "node,precision,recall,f1,true_positives,false_positives,false_negatives,true_negatives,degenerate,"
           "threshold,untrained\n";
    for (const auto& n : result.detection.nodes) {
      const auto& m = n.metrics;
      out << n.node << ',' << format_number(m.precision) << ',' << format_number(m.recall) << ','
          << format_number(m.f1) << ',' << m.true_positives << ',' << m.false_positives << ',' << m.false_negatives
          << ',' << m.true_negatives << ',' << (m.degenerate ? 1 : 0) << ',' << format_number(n.threshold.threshold)
          << ',' << (result.detection.untrained ? 1 : 0) << '\n';
    }
  }
  {
    auto out = open_csv(out_dir / "network.csv");
    const auto& n = result.network;
    out << "metric,value\n"
        << "setup_bytes," << n.setup_bytes << '\n'
        << "round_bytes," << n.round_bytes << '\n'
        << "final_bytes," << n.final_bytes << '\n'
        << "aborted_bytes," << n.aborted_bytes << '\n'
        << "federated_bytes," << n.federated_bytes << '\n'
        << "transport_bytes," << n.transport_bytes << '\n'
        << "raw_bytes," << n.raw_bytes << '\n'
        << "raw_bytes_original," << n.raw_bytes_original << '\n'
        << "reduction_percent," << format_number(n.reduction_percent) << '\n';
  }
}

std::vector<ScoreRow> load_scores_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IngestError("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  if (line.rfind("node,batch_index,timestamp,score,threshold,label,verdict", 0) != 0) {
    throw IngestError(path.string() + ":1: unexpected header");
  }
  std::vector<ScoreRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = text::split_fields(line, ',');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (f.size() != 7) throw IngestError(where + ": expected 7 fields");
    ScoreRow r;
    r.node = std::string(f[0]);
    if (!text::parse_number(f[1], r.batch_index) || !text::parse_number(f[2], r.timestamp) ||
        !text::parse_number(f[3], r.score) || !text::parse_number(f[4], r.threshold)) {
      throw IngestError(where + ": malformed number");
    }
    if (!f[5].empty()) {
      r.label = signal::parse_label(std::string(f[5]));
      if (!r.label) throw IngestError(where + ": unknown label");
    }
    const auto verdict = signal::parse_label(std::string(f[6]));
    if (!verdict) throw IngestError(where + ": unknown verdict");
    r.verdict = *verdict;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace fedvib::harness
