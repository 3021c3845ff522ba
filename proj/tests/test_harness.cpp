#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedvib/errors.hpp"
#include "fedvib/harness/checkpoint.hpp"
#include "fedvib/harness/config.hpp"
#include "fedvib/harness/experiment.hpp"
#include "fedvib/harness/sweep.hpp"
#include "support.hpp"

using namespace fedvib;
using namespace fedvib::harness;
namespace fs = std::filesystem;

namespace {

/// Two or more synthetic nodes at a scale that trains in about a second.
ExperimentConfig small_experiment(std::size_t nodes = 2, std::size_t rounds = 3, std::uint64_t seed = 1) {
  ExperimentConfig c = synthetic_experiment(nodes, seed, 0);
  for (auto& n : c.nodes) {
    n.synth.n_batches = 60;
    n.synth.batch_len = 200;
    n.synth.anomaly_indices = {45, 52, 58};
  }
  c.model.window_size = 20;
  c.model.outer_layer_sizes = {16};
  c.model.encoding_size = 4;
  c.train.batch_size = 16;
  c.train.learning_rate = 1e-2;
  c.rounds = rounds;
  c.centralized_epochs = rounds;
  c.cold_start_step = 16;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fedvib_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::ifstream in(p);
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::size_t count_verdicts(const NodeDetection& d, signal::Label v) {
  return std::size_t(std::count_if(d.batches.begin(), d.batches.end(), [v](const auto& b) { return b.verdict == v; }));
}

}  // namespace

TEST_SUITE("schedule and reduction") {
  TEST_CASE("cold-start schedule") {
    CHECK(cold_start_windows(1, 100000) == 64);
    CHECK(cold_start_windows(10, 100000) == 640);
    CHECK(cold_start_windows(100, 100000) == 6400);
    CHECK(cold_start_windows(10, 500) == 500);
    CHECK(cold_start_windows(3, 10, 4) == 10);
    CHECK_THROWS_AS(cold_start_windows(0, 100), ConfigError);
    CHECK_THROWS_AS(cold_start_windows(1, 100, 0), ConfigError);
    Rng rng(1);
    for (int i = 0; i < 500; ++i) {
      const std::size_t r = 1 + rng.below(1000), avail = rng.below(100000), step = 1 + rng.below(128);
      CHECK(cold_start_windows(r, avail, step) == std::min(avail, r * step));
    }
    // Huge round indices must not overflow past the cap.
    CHECK(cold_start_windows(std::numeric_limits<std::size_t>::max(), 77) == 77);
  }

  TEST_CASE("network reduction") {
    CHECK(network_reduction(500, 500) == 0.0);
    CHECK(std::abs(network_reduction(6'300'000, 806'000'000) - 99.2) < 0.05);
    CHECK(network_reduction(300, 100) == doctest::Approx(-200.0));
    CHECK(network_reduction(0, 100) == 100.0);
    CHECK_THROWS_AS(network_reduction(10, 0), ConfigError);
  }
}

TEST_SUITE("sweep") {
  SearchSpace tiny() { return {{16}, {10, 20}, {4, 8}, {1, 2}, {2}, {1e-2, 1e-3}}; }

  signal::Dataset sweep_data(std::uint64_t seed) {
    signal::SynthConfig sc;
    sc.n_batches = 20;
    sc.batch_len = 100;
    sc.feature_count = 1;
    sc.seed = seed;
    return signal::synth_generate(sc);
  }

  SweepOptions sweep_options(std::size_t epochs, std::uint64_t seed) {
    SweepOptions o;
    o.epochs = epochs;
    o.seed = seed;
    return o;
  }

  TEST_CASE("grid cardinality") {
    const auto space = SearchSpace::table_one();
    CHECK(space.cardinality() == 3 * 3 * 5 * 4 * 3 * 4);
    CHECK(space.cardinality() == 2160);
    const auto all = enumerate(space);
    CHECK(all.size() == 2160);
    CHECK(all.front() == Candidate{32, 50, 32, 1, 8, 3e-2});
    CHECK(all.back() == Candidate{128, 200, 512, 4, 32, 1e-3});
    CHECK(all[1].learning_rate == 3e-4);
    for (std::size_t i = 0; i < all.size(); ++i)
      for (std::size_t j = i + 1; j < std::min(all.size(), i + 5); ++j) CHECK_FALSE(all[i] == all[j]);
  }

  TEST_CASE("candidates map onto the model") {
    const Candidate c{64, 100, 128, 3, 16, 1e-3};
    const auto m = c.model(3);
    CHECK(m.outer_layer_sizes == std::vector<std::size_t>{128, 128, 128});
    CHECK(m.window_size == 100);
    CHECK(m.feature_count == 3);
    CHECK(c.train().batch_size == 64);
    CHECK(c.train().learning_rate == 1e-3);
  }

  TEST_CASE("budget one returns one ranked entry and the ranking is deterministic") {
    const auto data = sweep_data(9);
    const auto one = sweep_hyperparameters(tiny(), 1, data);
    REQUIRE(one.size() == 1);
    CHECK(std::isfinite(one[0].val_loss));
    CHECK(one[0].parameter_count == nn::parameter_count(one[0].candidate.model(1)));

    const auto a = sweep_hyperparameters(tiny(), 5, data, sweep_options(1, 4));
    const auto b = sweep_hyperparameters(tiny(), 5, data, sweep_options(1, 4));
    REQUIRE(a.size() == 5);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].candidate == b[i].candidate);
      CHECK(a[i].val_loss == b[i].val_loss);
      if (i > 0) {
        CHECK(a[i - 1].val_loss <= a[i].val_loss);
        if (a[i - 1].val_loss == a[i].val_loss) CHECK(a[i - 1].parameter_count <= a[i].parameter_count);
      }
    }
    // A budget beyond the grid evaluates every candidate once.
    CHECK(sweep_hyperparameters(tiny(), 100, data, sweep_options(1, 1)).size() == tiny().cardinality());
  }

  TEST_CASE("empty space or budget") {
    const auto data = sweep_data(42);
    auto empty = tiny();
    empty.encoding_sizes.clear();
    CHECK_THROWS_AS(sweep_hyperparameters(empty, 1, data), ConfigError);
    CHECK_THROWS_AS(sweep_hyperparameters(tiny(), 0, data), ConfigError);
  }
}

TEST_SUITE("config") {
  TEST_CASE("json round trip") {
    auto c = small_experiment(3, 4, 7);
    c.scenario = Scenario::cold_start;
    c.threshold_mode = cm::ThresholdMode::delta_sigma;
    c.reference_unit = cm::ReferenceUnit::batch;
    c.delta = 2.5;
    c.target = c.nodes.back();
    const auto text = config_to_json(c);
    const auto back = parse_config(text);
    CHECK(config_to_json(back) == text);
    CHECK(back.scenario == Scenario::cold_start);
    CHECK(back.nodes.size() == 3);
    CHECK(back.nodes[1].synth.anomaly_indices == c.nodes[1].synth.anomaly_indices);
    CHECK(back.model == c.model);
    CHECK(back.delta == 2.5);
    CHECK(back.seed == 7);
  }

  TEST_CASE("hand-written config with defaults") {
    const auto c = parse_config(R"({
      "scenario": "historical",
      "nodes": [{"id": "a", "source": "csv", "path": "/data/a/manifest.csv"}],
      "model": {"feature_count": 3},
      "rounds": 2
    })");
    CHECK(c.rounds == 2);
    CHECK(c.epochs_per_round == 1);
    CHECK(c.delta == 3.0);
    CHECK(c.model.window_size == 100);
    CHECK(c.model.encoding_size == 16);
    CHECK(c.nodes[0].source == DataSource::csv);
    CHECK(c.nodes[0].path == fs::path("/data/a/manifest.csv"));
  }

  TEST_CASE("unknown keys and bad values are rejected") {
    CHECK_THROWS_AS(parse_config(R"({"rounds": 2, "roundz": 3})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"model": {"window": 3}})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"scenario": "sideways"})"), ConfigError);
    CHECK_THROWS_AS(parse_config(R"({"rounds": "many"})"), ConfigError);
    CHECK_THROWS_AS(parse_config("{not json"), ConfigError);
    CHECK_THROWS_AS(parse_scenario("x"), ConfigError);
    CHECK(parse_scenario("knowledge_transfer") == Scenario::knowledge_transfer);
  }

  TEST_CASE("validation names the field") {
    auto c = small_experiment();
    c.nodes.clear();
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_experiment();
    c.nodes[1].id = c.nodes[0].id;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = small_experiment();
    c.scenario = Scenario::knowledge_transfer;
    CHECK_THROWS_AS(run_experiment(c), ConfigError);
    c = small_experiment();
    c.model.feature_count = 2;
    CHECK_THROWS_AS(run_historical(c), ConfigError);
  }

  TEST_CASE("missing IMS data points at the download command") {
    NodeSpec n;
    n.id = "b1";
    n.source = DataSource::ims;
    n.path = "/nonexistent/ims/2nd_test";
    try {
      load_node_dataset(n);
      FAIL("expected an IngestError");
    } catch (const IngestError& e) {
      CHECK(std::string(e.what()).find("fetch-ims") != std::string::npos);
    }
  }
}

TEST_SUITE("experiments") {
  TEST_CASE("historical run: reports, export and accounting") {
    const auto c = small_experiment(2, 3);
    const auto r = run_historical(c);
    REQUIRE_FALSE(r.aborted);
    REQUIRE(r.rounds.size() == 3);
    REQUIRE(r.detection.nodes.size() == 2);
    const auto data = prepare_nodes(c);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& d = r.detection.nodes[i];
      CHECK(d.batches.size() == data[i].split.test.size());
      CHECK(d.threshold_trace.size() == c.rounds + 1);
      for (const auto& b : d.batches) {
        CHECK(std::isfinite(b.score));
        CHECK(b.verdict == cm::classify(b.score, d.threshold));
      }
    }
    for (const auto& rr : r.rounds) {
      for (const auto& s : rr.nodes) {
        CHECK(std::isfinite(s.train_loss));
        CHECK(s.threshold);
      }
      CHECK(rr.bytes_sent == r.rounds[0].bytes_sent);
      CHECK(rr.bytes_received == r.rounds[0].bytes_received);
    }
    CHECK(r.network.federated_bytes == r.network.transport_bytes);
    CHECK(r.network.raw_bytes == 2ull * 60 * 200 * 3 * 4);

    const auto dir = scratch_dir("export");
    export_results(r, dir);
    for (const char* f : {"scores.csv", "rounds.csv", "metrics.csv", "network.csv"}) CHECK(fs::exists(dir / f));

    const auto rows = load_scores_csv(dir / "scores.csv");
    CHECK(rows.size() == r.detection.nodes[0].batches.size() + r.detection.nodes[1].batches.size());
    for (const auto& d : r.detection.nodes) {
      std::size_t anomalous = 0, normal = 0;
      for (const auto& row : rows) {
        if (row.node != d.node) continue;
        (row.verdict == signal::Label::anomalous ? anomalous : normal)++;
      }
      CHECK(anomalous == count_verdicts(d, signal::Label::anomalous));
      CHECK(normal == count_verdicts(d, signal::Label::normal));
    }

    const auto rounds = read_csv(dir / "rounds.csv");
    REQUIRE(rounds.size() == 1 + c.rounds);
    CHECK(rounds[0][0] == "round");
    CHECK(rounds[0].size() == 7 + 4 * 2);
    std::uint64_t sum = 0;
    for (std::size_t i = 1; i < rounds.size(); ++i) {
      CHECK(rounds[i].size() == rounds[0].size());
      for (std::size_t col = 1; col <= 5; ++col) sum += std::stoull(rounds[i][col]);
      CHECK(std::stoull(rounds[i][rounds[0].size() - 2]) == data[1].train_windows.size());
    }
    CHECK(sum == r.network.transport_bytes);

    const auto metrics = read_csv(dir / "metrics.csv");
    CHECK(metrics.size() == 3);
    CHECK(metrics[0][0] == "node");
    const auto network = read_csv(dir / "network.csv");
    CHECK(network[6][0] == "transport_bytes");
    CHECK(std::stoull(network[6][1]) == r.network.transport_bytes);
  }

  TEST_CASE("identical configs give identical metrics.csv") {
    const auto c = small_experiment(2, 2, 5);
    const auto a = scratch_dir("repro_a"), b = scratch_dir("repro_b");
    export_results(run_historical(c), a);
    export_results(run_historical(c), b);
    CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
    CHECK(slurp(a / "scores.csv") == slurp(b / "scores.csv"));
    auto other = c;
    other.seed = 6;
    const auto o = scratch_dir("repro_other");
    export_results(run_historical(other), o);
    CHECK(slurp(a / "scores.csv") != slurp(o / "scores.csv"));
  }

  TEST_CASE("zero rounds scores the untrained model and says so") {
    const auto c = small_experiment(2, 0);
    const auto r = run_historical(c);
    CHECK_FALSE(r.aborted);
    CHECK(r.detection.untrained);
    CHECK(r.rounds.empty());
    REQUIRE(r.detection.nodes.size() == 2);
    CHECK(r.global.identical(initial_global(c)));
    const auto dir = scratch_dir("untrained");
    export_results(r, dir);
    const auto metrics = read_csv(dir / "metrics.csv");
    CHECK(metrics[0].back() == "untrained");
    CHECK(metrics[1].back() == "1");
    CHECK(read_csv(dir / "rounds.csv").size() == 1);
  }

  TEST_CASE("cold start follows the window schedule for 1, 2 and 4 epochs per round") {
    for (std::size_t epochs : {1u, 2u, 4u}) {
      CAPTURE(epochs);
      auto c = small_experiment(2, 4);
      c.scenario = Scenario::cold_start;
      c.epochs_per_round = epochs;
      const auto r = run_experiment(c);
      REQUIRE_FALSE(r.aborted);
      REQUIRE(r.rounds.size() == 4);
      const auto data = prepare_nodes(c);
      for (std::size_t k = 0; k < r.rounds.size(); ++k) {
        CHECK(r.rounds[k].duration_s >= 0.0);
        for (std::size_t i = 0; i < 2; ++i)
          CHECK(r.rounds[k].nodes[i].windows_trained ==
                cold_start_windows(k + 1, data[i].train_windows.size(), c.cold_start_step));
      }
    }
  }

  TEST_CASE("per-round traffic does not depend on how much data a node holds") {
    auto small = small_experiment(2, 2);
    auto large = small;
    for (auto& n : large.nodes) n.synth.n_batches = 120;
    const auto a = run_historical(small), b = run_historical(large);
    REQUIRE(a.rounds.size() == 2);
    REQUIRE(b.rounds.size() == 2);
    for (std::size_t k = 0; k < 2; ++k) {
      CHECK(a.rounds[k].bytes_sent == b.rounds[k].bytes_sent);
      CHECK(a.rounds[k].bytes_received == b.rounds[k].bytes_received);
    }
    CHECK(b.network.raw_bytes == 2 * a.network.raw_bytes);
  }

  TEST_CASE("self-transfer reproduces the node's own evaluation") {
    const auto c = small_experiment(2, 2);
    const auto r = run_historical(c);
    const auto data = prepare_nodes(c);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto t = transfer_detection(r.global, c.model, data[i].dataset, data[i].split.validation,
                                        data[i].split.test, c.delta, c.threshold_mode, c.nodes[i].id);
      const auto& own = r.detection.nodes[i];
      CHECK(t.threshold.threshold == own.threshold.threshold);
      REQUIRE(t.batches.size() == own.batches.size());
      for (std::size_t k = 0; k < t.batches.size(); ++k) {
        CHECK(t.batches[k].score == own.batches[k].score);
        CHECK(t.batches[k].verdict == own.batches[k].verdict);
      }
      CHECK(t.metrics.f1 == own.metrics.f1);
    }
    auto wrong = c.model;
    wrong.feature_count = 1;
    CHECK_THROWS_AS(transfer_detection(r.global, wrong, data[0].dataset, data[0].split.validation,
                                       data[0].split.test, 3.0, c.threshold_mode, "x"),
                    DimensionError);
  }

  TEST_CASE("knowledge transfer scores every target batch without training it") {
    auto c = small_experiment(2, 2);
    c.scenario = Scenario::knowledge_transfer;
    NodeSpec target = c.nodes[0];
    target.id = "target";
    target.synth.seed = 4242;
    target.synth.anomaly_indices = {55, 57, 59};
    c.target = target;
    const auto r = run_experiment(c);
    REQUIRE(r.detection.nodes.size() == 1);
    const auto& d = r.detection.nodes[0];
    CHECK(d.node == "target");
    CHECK(d.batches.size() == 60);
    // Windows of the first 10% of 60 batches calibrate the threshold.
    CHECK(d.threshold.reference_res.size() == 6 * (200 / 20));
    const auto fed_only = run_historical(small_experiment(2, 2));
    CHECK(r.global.identical(fed_only.global));
  }

  TEST_CASE("centralized training evaluates every node and reports the raw counterfactual") {
    auto c = small_experiment(2, 3);
    c.scenario = Scenario::centralized;
    const auto r = run_experiment(c);
    CHECK(r.epochs.size() == 3);
    CHECK(r.detection.nodes.size() == 2);
    CHECK(r.network.raw_bytes == 2ull * 60 * 200 * 3 * 4);
    CHECK(r.network.raw_bytes_original == r.network.raw_bytes);
    auto defaults = ExperimentConfig{};
    CHECK(defaults.centralized_epochs == 100);
    CHECK(defaults.rounds == 25);
  }
}

TEST_SUITE("checkpoint") {
  TEST_CASE("round trip") {
    const auto c = small_experiment();
    Checkpoint cp;
    cp.weights = initial_global(c);
    cp.meta.model = c.model;
    cp.meta.round = 7;
    cp.meta.delta = 2.0;
    cp.meta.mode = cm::ThresholdMode::delta_sigma;
    cp.meta.threshold = 0.125;
    const auto dir = scratch_dir("checkpoint");
    save_checkpoint(dir, cp);
    const auto back = load_checkpoint(dir);
    CHECK(back.weights.identical(cp.weights));
    CHECK(back.meta == cp.meta);
  }

  TEST_CASE("damaged checkpoints") {
    const auto c = small_experiment();
    Checkpoint cp;
    cp.weights = initial_global(c);
    cp.meta.model = c.model;
    const auto dir = scratch_dir("checkpoint_bad");
    CHECK_THROWS_AS(load_checkpoint(dir), IngestError);
    save_checkpoint(dir, cp);
    {
      std::ofstream(dir / "model.meta", std::ios::app) << "nonsense line\n";
    }
    CHECK_THROWS_AS(load_checkpoint(dir), IngestError);
    save_checkpoint(dir, cp);
    fs::resize_file(dir / "model.fvw", fs::file_size(dir / "model.fvw") - 3);
    CHECK_THROWS_AS(load_checkpoint(dir), ParseError);
    auto mismatched = cp;
    mismatched.meta.model.encoding_size = 3;
    save_checkpoint(dir, mismatched);
    CHECK_THROWS_AS(load_checkpoint(dir), DimensionError);
  }
}
