#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>

#include "fedvib/errors.hpp"
#include "fedvib/fed/federation.hpp"
#include "fedvib/fed/transport.hpp"
#include "fedvib/harness/checkpoint.hpp"
#include "fedvib/harness/config.hpp"
#include "fedvib/harness/experiment.hpp"
#include "fedvib/harness/sweep.hpp"

namespace fs = std::filesystem;
using namespace fedvib;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr int kExitAborted = 3;

harness::ExperimentConfig base_config(const std::string& path) {
  if (path.empty()) return harness::ExperimentConfig{};
  return harness::load_config(path);
}

void print_metrics(const harness::DetectionReport& report) {
  for (const auto& n : report.nodes) {
    const auto& m = n.metrics;
    std::cout << std::left << std::setw(12) << n.node << std::right << " precision " << std::fixed
              << std::setprecision(3) << m.precision << "  recall " << m.recall << "  f1 " << m.f1
              << "  threshold " << std::setprecision(6) << n.threshold.threshold;
    if (m.degenerate) std::cout << "  (no anomalous batches labelled)";
    std::cout << '\n';
  }
  if (report.untrained) std::cout << "note: no training rounds were run; the model is untrained\n";
}

// --- aggregate ---------------------------------------------------------------

struct AggregateArgs {
  std::string listen = "0.0.0.0:7070";
  std::size_t clients = 1;
  std::optional<std::size_t> rounds;
  std::string config;
  std::optional<std::size_t> features;
  std::optional<std::uint64_t> seed;
  double round_timeout_s = 600.0;
  std::string checkpoint_out;
};

int run_aggregate(const AggregateArgs& a) {
  auto cfg = base_config(a.config);
  if (a.rounds) cfg.rounds = *a.rounds;
  if (a.seed) cfg.seed = *a.seed;
  if (a.features) cfg.model.feature_count = *a.features;
  else if (a.config.empty()) cfg.model.feature_count = 3;
  cfg.model.validate();

  fed::AggregatorConfig ac;
  ac.expected_clients = a.clients;
  ac.rounds = cfg.rounds;
  ac.round_timeout = fed::Millis(static_cast<long long>(a.round_timeout_s * 1000.0));
  ac.registration_timeout = ac.round_timeout;

  fed::TrafficMeter meter;
  fed::TcpServer server(fed::parse_endpoint(a.listen), &meter);
  std::cerr << "listening on port " << server.port() << ", waiting for " << a.clients << " client(s)\n";
  const auto result = fed::aggregation_node_run(server, ac, harness::initial_global(cfg));

  for (const auto& r : result.records) {
    std::cout << "round " << r.round << ": sent " << r.bytes_sent << " B, received " << r.bytes_received
              << " B, " << std::fixed << std::setprecision(2) << r.duration_s << " s\n";
  }
  std::cout << "traffic: setup " << result.traffic.setup_bytes << " B, rounds " << result.traffic.round_bytes
            << " B, final " << result.traffic.final_bytes << " B, aborted " << result.traffic.aborted_bytes
            << " B (transport counted " << meter.total_bytes() << " B)\n";
  if (!a.checkpoint_out.empty()) {
    harness::Checkpoint cp;
    cp.weights = result.final_global;
    cp.meta.model = cfg.model;
    cp.meta.round = result.records.size();
    cp.meta.delta = cfg.delta;
    cp.meta.mode = cfg.threshold_mode;
    harness::save_checkpoint(a.checkpoint_out, cp);
  }
  if (result.aborted) {
    std::cerr << "aborted: " << result.diagnostic << '\n';
    return kExitAborted;
  }
  return kExitOk;
}

// --- train -------------------------------------------------------------------

struct TrainArgs {
  std::string aggregator;
  std::string data;
  std::string id;
  std::optional<std::size_t> rounds;
  std::optional<std::size_t> epochs;
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> features;
  bool cold_start = false;
  std::string scores_out;
};

int run_train(const TrainArgs& a) {
  auto cfg = base_config(a.config);
  if (a.rounds) cfg.rounds = *a.rounds;
  if (a.epochs) cfg.epochs_per_round = *a.epochs;
  if (a.seed) cfg.seed = *a.seed;

  // Reuse the node's entry from the config (and with it its seed) when present.
  std::size_t index = cfg.nodes.size();
  for (std::size_t i = 0; i < cfg.nodes.size(); ++i)
    if (cfg.nodes[i].id == a.id) index = i;
  if (index == cfg.nodes.size()) {
    cfg.nodes.push_back({});
    cfg.nodes.back().id = a.id;
  }
  auto& spec = cfg.nodes[index];
  spec.source = harness::DataSource::csv;
  spec.path = a.data;
  if (a.features) {
    cfg.model.feature_count = *a.features;
  } else {
    cfg.model.feature_count = harness::load_node_dataset(spec).feature_count;
  }
  auto only = cfg;
  only.nodes = {spec};
  const auto data = std::move(harness::prepare_nodes(only).front());

  auto nc = harness::node_config(cfg, index);
  if (a.cold_start || cfg.scenario == harness::Scenario::cold_start) nc.cold_start_step = cfg.cold_start_step;
  fed::TrainingNode node(nc, data);
  fed::TcpClient client(fed::parse_endpoint(a.aggregator));
  const auto result = fed::training_node_run(client, node);
  if (!result.completed) {
    std::cerr << "node " << a.id << " stopped: " << result.diagnostic << '\n';
    return kExitAborted;
  }

  for (const auto& r : node.records()) {
    if (r.epochs.empty()) continue;
    std::cout << "round " << (r.model_round + 1) << ": windows " << r.windows_trained << "  train loss "
              << std::scientific << std::setprecision(4) << r.epochs.back().train_loss << "  val loss "
              << r.epochs.back().val_loss << std::defaultfloat << '\n';
  }
  const auto threshold = node.calibrate();
  const auto scores = node.score_test();
  const auto detection = harness::detect(a.id, data.dataset, data.split.test, scores, threshold);
  harness::DetectionReport report;
  report.nodes.push_back(detection);
  report.untrained = cfg.rounds == 0;
  print_metrics(report);

  if (!a.scores_out.empty()) {
    std::ofstream out(a.scores_out);
    if (!out) throw IngestError("cannot write " + a.scores_out);
    out << "batch_index,timestamp,score,threshold,verdict\n";
    for (const auto& b : detection.batches) {
      out << b.batch_index << ',' << std::setprecision(17) << b.timestamp << ',' << b.score << ',' << b.threshold
          << ',' << signal::to_string(b.verdict) << '\n';
    }
  }
  return kExitOk;
}

// --- experiment --------------------------------------------------------------

int run_experiment_cmd(const std::string& config_path, const std::string& out_dir) {
  const auto cfg = harness::load_config(config_path);
  const auto t0 = std::chrono::steady_clock::now();
  const auto result = harness::run_experiment(cfg);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  harness::export_results(result, out_dir);
  harness::Checkpoint cp;
  cp.weights = result.global;
  cp.meta.model = cfg.model;
  cp.meta.round = result.rounds.size();
  cp.meta.delta = cfg.delta;
  cp.meta.mode = cfg.threshold_mode;
  if (result.detection.nodes.size() == 1) cp.meta.threshold = result.detection.nodes.front().threshold.threshold;
  harness::save_checkpoint(fs::path(out_dir) / "checkpoint", cp);

  std::cout << "scenario " << harness::to_string(result.scenario) << ", " << result.rounds.size() << " round(s), "
            << std::fixed << std::setprecision(1) << secs << " s\n";
  print_metrics(result.detection);
  const auto& n = result.network;
  if (n.federated_bytes > 0) {
    std::cout << "federated " << n.federated_bytes << " B vs raw " << n.raw_bytes << " B (original "
              << n.raw_bytes_original << " B): reduction " << std::setprecision(2) << n.reduction_percent << "%\n";
  }
  std::cout << "results written to " << out_dir << '\n';
  if (result.aborted) {
    std::cerr << "aborted: " << result.diagnostic << '\n';
    return kExitAborted;
  }
  return kExitOk;
}

// --- sweep -------------------------------------------------------------------

int run_sweep(std::size_t budget, std::size_t epochs, std::uint64_t seed, const std::string& data) {
  signal::Dataset ds;
  if (data.empty()) {
    ds = signal::synth_generate(harness::synthetic_experiment(1, seed).nodes.front().synth);
  } else {
    ds = signal::load_csv_dataset(data);
  }
  harness::SweepOptions opt;
  opt.epochs = epochs;
  opt.seed = seed;
  const auto space = harness::SearchSpace::table_one();
  std::cerr << "evaluating " << std::min(budget, space.cardinality()) << " of " << space.cardinality()
            << " configurations\n";
  const auto ranked = harness::sweep_hyperparameters(space, budget, ds, opt);
  std::cout << "rank,val_loss,parameters,config\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& e = ranked[i];
    std::cout << (i + 1) << ',' << std::setprecision(6) << e.val_loss << ',' << e.parameter_count << ','
              << e.candidate.describe() << '\n';
  }
  return kExitOk;
}

// --- synth -------------------------------------------------------------------

int run_synth(const std::string& out, std::uint64_t seed, std::size_t nodes) {
  auto cfg = harness::synthetic_experiment(nodes, seed);
  const fs::path root = fs::absolute(out);
  for (auto& spec : cfg.nodes) {
    const auto ds = signal::synth_generate(spec.synth);
    spec.path = signal::write_csv_dataset(ds, root / spec.id);
    spec.source = harness::DataSource::csv;
    std::cout << spec.id << ": " << ds.batches.size() << " batches -> " << spec.path.string() << '\n';
  }
  std::ofstream json(root / "experiment.json");
  if (!json) throw IngestError("cannot write " + (root / "experiment.json").string());
  json << harness::config_to_json(cfg) << '\n';
  std::cout << "config: " << (root / "experiment.json").string() << '\n';
  return kExitOk;
}

// --- fetch-ims ---------------------------------------------------------------

std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) {
    if (c == '\'') q += "'\\''";
    else q += c;
  }
  return q + "'";
}

int run_fetch(int set, const std::string& out) {
  std::string script = FEDVIB_FETCH_SCRIPT;
  if (const char* env = std::getenv("FEDVIB_FETCH_SCRIPT")) script = env;
  if (!fs::exists(script)) {
    std::cerr << "download script not found: " << script << '\n';
    return kExitRuntime;
  }
  const std::string cmd = "bash " + shell_quote(script) + ' ' + std::to_string(set) + ' ' + shell_quote(out);
  const int rc = std::system(cmd.c_str());
  return rc == 0 ? kExitOk : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated vibration condition monitoring"};
  app.require_subcommand(1);

  AggregateArgs agg;
  auto* aggregate = app.add_subcommand("aggregate", "run the aggregation node over TCP");
  aggregate->add_option("--listen", agg.listen, "host:port to listen on")->capture_default_str();
  aggregate->add_option("--clients", agg.clients, "training nodes to wait for")->required()->check(CLI::PositiveNumber);
  aggregate->add_option("--rounds", agg.rounds, "federated rounds");
  aggregate->add_option("--config", agg.config, "experiment config (model and training settings)")
      ->check(CLI::ExistingFile);
  aggregate->add_option("--features", agg.features, "input features per sample")->check(CLI::PositiveNumber);
  aggregate->add_option("--seed", agg.seed, "seed of the initial global model");
  aggregate->add_option("--round-timeout", agg.round_timeout_s, "seconds before a round is aborted")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  aggregate->add_option("--checkpoint-out", agg.checkpoint_out, "directory for the final global model");

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "run one training node against an aggregator");
  train->add_option("--aggregator", tr.aggregator, "aggregator host:port")->required();
  train->add_option("--data", tr.data, "dataset manifest.csv")->required()->check(CLI::ExistingFile);
  train->add_option("--id", tr.id, "client id")->required();
  train->add_option("--rounds", tr.rounds, "federated rounds");
  train->add_option("--epochs", tr.epochs, "local epochs per round");
  train->add_option("--config", tr.config, "experiment config")->check(CLI::ExistingFile);
  train->add_option("--seed", tr.seed, "experiment seed");
  train->add_option("--features", tr.features, "input features per sample")->check(CLI::PositiveNumber);
  train->add_flag("--cold-start", tr.cold_start, "grow the training set by the cold-start step each round");
  train->add_option("--scores-out", tr.scores_out, "write per-batch test scores to this CSV");

  std::string exp_config;
  std::string exp_out = "results";
  auto* experiment = app.add_subcommand("experiment", "run a full experiment in one process");
  experiment->add_option("--config", exp_config, "experiment config")->required()->check(CLI::ExistingFile);
  experiment->add_option("--out", exp_out, "output directory")->capture_default_str();

  std::size_t budget = 0;
  std::size_t sweep_epochs = 2;
  std::uint64_t sweep_seed = 1;
  std::string sweep_data;
  auto* sweep = app.add_subcommand("sweep", "rank hyperparameter configurations by validation loss");
  sweep->add_option("--budget", budget, "configurations to train")->required()->check(CLI::PositiveNumber);
  sweep->add_option("--epochs", sweep_epochs, "epochs per configuration")->capture_default_str();
  sweep->add_option("--seed", sweep_seed, "sampling and training seed")->capture_default_str();
  sweep->add_option("--data", sweep_data, "dataset manifest.csv (synthetic data when omitted)")
      ->check(CLI::ExistingFile);

  std::string synth_out;
  std::uint64_t synth_seed = 1;
  std::size_t synth_nodes = 5;
  auto* synth = app.add_subcommand("synth", "write synthetic node datasets and an experiment config");
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--seed", synth_seed, "generator seed")->capture_default_str();
  synth->add_option("--nodes", synth_nodes, "number of nodes")->capture_default_str()->check(CLI::PositiveNumber);

  int ims_set = 2;
  std::string ims_out;
  auto* fetch = app.add_subcommand("fetch-ims", "download and verify an IMS bearing test set");
  fetch->add_option("--set", ims_set, "test set")->required()->check(CLI::IsMember({1, 2, 3}));
  fetch->add_option("--out", ims_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*aggregate) return run_aggregate(agg);
    if (*train) return run_train(tr);
    if (*experiment) return run_experiment_cmd(exp_config, exp_out);
    if (*sweep) return run_sweep(budget, sweep_epochs, sweep_seed, sweep_data);
    if (*synth) return run_synth(synth_out, synth_seed, synth_nodes);
    if (*fetch) return run_fetch(ims_set, ims_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
