#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedvib/cm/detection.hpp"
#include "fedvib/cm/training.hpp"
#include "fedvib/errors.hpp"
#include "fedvib/nn/layers.hpp"
#include "support.hpp"

using namespace fedvib;
using namespace fedvib::cm;
using namespace fedvib::testing;
using signal::Label;

namespace {

double sample_std(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / double(v.size() - 1));
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("reconstruction keeps the window shape") {
    nn::AutoencoderConfig cfg;
    const auto model = build_autoencoder(cfg, 1);
    Rng rng(2);
    const auto w = random_tensor(rng, {100, 1});
    CHECK(reconstruct_window(model, w).shape() == w.shape());
    cfg.encoding_size = 100;
    CHECK_THROWS_AS(build_autoencoder(cfg, 1), ConfigError);
  }

  TEST_CASE("same seed, same initial weights") {
    nn::AutoencoderConfig cfg{20, 2, {16, 8}, 4};
    const auto a = build_autoencoder(cfg, 9);
    const auto b = build_autoencoder(cfg, 9);
    const auto c = build_autoencoder(cfg, 10);
    const auto va = a.params().views();
    const auto vb = b.params().views();
    const auto vc = c.params().views();
    bool differs = false;
    for (std::size_t k = 0; k < va.size(); ++k) {
      CHECK(std::equal(va[k].data, va[k].data + va[k].size(), vb[k].data));
      differs |= !std::equal(va[k].data, va[k].data + va[k].size(), vc[k].data);
    }
    CHECK(differs);
    CHECK(a.params().parameter_count() == nn::parameter_count(cfg));
  }
}

TEST_SUITE("scoring") {
  TEST_CASE("reconstruction error") {
    const Tensor i({3}, {1, 2, 3});
    CHECK(reconstruction_error(i, i) == 0.0);
    CHECK(reconstruction_error(i, Tensor({3}, {1, 1, 1})) == doctest::Approx(5.0 / 3.0));
    Rng rng(3);
    for (int c = 0; c < 20; ++c) {
      const auto s = Tensor::Shape{1 + rng.below(20), 1 + rng.below(3)};
      const auto a = random_tensor(rng, s);
      const auto b = random_tensor(rng, s);
      CHECK(reconstruction_error(a, b) == nn::mse_loss(a, b));
    }
    CHECK_THROWS_AS(reconstruction_error(i, Tensor({2})), DimensionError);
  }

  TEST_CASE("batch score aggregates window errors") {
    const std::vector<double> e{0.2, 0.4};
    CHECK(aggregate_errors(e) == doctest::Approx(0.3));
    CHECK(aggregate_errors(e, ScoreAggregate::max) == 0.4);
    Rng rng(4);
    for (int c = 0; c < 50; ++c) {
      std::vector<double> v(1 + rng.below(30));
      for (auto& x : v) x = rng.uniform();
      auto shuffled = v;
      rng.shuffle(shuffled);
      CHECK(aggregate_errors(shuffled) == doctest::Approx(aggregate_errors(v)).epsilon(1e-14));
    }
    CHECK_THROWS_AS(aggregate_errors({}), StateError);
  }

  TEST_CASE("a model that reproduces its input scores zero") {
    nn::AutoencoderConfig cfg{10, 2, {8}, 4};
    auto model = build_autoencoder(cfg, 5);
    model.params().output.W.setZero();
    model.params().output.b.setConstant(0.75f);
    signal::VibrationBatch b;
    b.sampling_rate_hz = 100.0;
    b.samples = Tensor({35, 2}, std::vector<float>(70, 0.75f));
    CHECK(batch_anomaly_score(model, b, 10) == 0.0);
    b.samples = Tensor({5, 2}, std::vector<float>(10, 0.75f));
    CHECK_THROWS_AS(batch_anomaly_score(model, b, 10), StateError);
  }

  TEST_CASE("mean window error equals the loss over the set") {
    nn::AutoencoderConfig cfg{16, 2, {8}, 4};
    const auto model = build_autoencoder(cfg, 6);
    const auto windows = sine_windows(20, 16, 7, 2);
    const auto errors = window_errors(model, windows);
    REQUIRE(errors.size() == 20);
    const double mean = std::accumulate(errors.begin(), errors.end(), 0.0) / 20.0;
    CHECK(std::abs(mean - evaluate_loss(model, windows, 7)) < 1e-6);
    // And each error equals the single-window reconstruction error.
    for (std::size_t i = 0; i < windows.size(); ++i) {
      const auto p = reconstruct_window(model, windows[i].values);
      CHECK(errors[i] == doctest::Approx(reconstruction_error(windows[i].values, p)).epsilon(1e-5));
    }
  }
}

TEST_SUITE("threshold") {
  TEST_CASE("calibration examples") {
    const auto lit = calibrate_threshold({1, 2, 3}, 1.0, ThresholdMode::delta_sigma);
    CHECK(lit.threshold == doctest::Approx(1.0));
    CHECK(lit.sigma == doctest::Approx(1.0));
    CHECK(calibrate_threshold({1, 2, 3}, 1.0).threshold == doctest::Approx(3.0));
    CHECK(calibrate_threshold({1, 2, 3}, 0.0).threshold == doctest::Approx(2.0));
    CHECK(calibrate_threshold({0.5, 0.5, 0.5}, 3.0).threshold == doctest::Approx(0.5 + 1e-9).epsilon(1e-15));
    CHECK_THROWS_AS(calibrate_threshold({1.0}, 3.0), StateError);
    CHECK_THROWS_AS(calibrate_threshold({1.0, 2.0}, -1.0), ConfigError);
  }

  TEST_CASE("threshold is recomputable and monotone in delta") {
    Rng rng(8);
    for (int c = 0; c < 200; ++c) {
      std::vector<double> re(2 + rng.below(50));
      for (auto& x : re) x = rng.uniform(0.0, 2.0);
      const double s = sample_std(re);
      const double m = std::accumulate(re.begin(), re.end(), 0.0) / double(re.size());
      const double d1 = rng.uniform(0.0, 5.0);
      const double d2 = d1 + rng.uniform(0.001, 2.0);
      for (auto mode : {ThresholdMode::delta_sigma, ThresholdMode::mean_plus_sigma}) {
        const auto a = calibrate_threshold(re, d1, mode);
        const auto b = calibrate_threshold(re, d2, mode);
        CHECK(a.threshold >= 0.0);
        CHECK(a.threshold <= b.threshold);
        if (s > 1e-12 && mode == ThresholdMode::mean_plus_sigma) CHECK(a.threshold < b.threshold);
        const double expect = mode == ThresholdMode::delta_sigma ? d1 * s : m + d1 * s;
        CHECK(a.threshold == doctest::Approx(expect).epsilon(1e-12));
      }
    }
  }

  TEST_CASE("classification boundary is inclusive-normal") {
    const auto t = calibrate_threshold({1, 2, 3}, 1.0, ThresholdMode::delta_sigma);
    CHECK(classify(0.5, t) == Label::normal);
    CHECK(classify(t.threshold, t) == Label::normal);
    CHECK(classify(2.0, t) == Label::anomalous);
    CHECK(to_string(ThresholdMode::mean_plus_sigma) == "mean_plus_sigma");
    CHECK(parse_threshold_mode("delta_sigma") == ThresholdMode::delta_sigma);
    CHECK_THROWS_AS(parse_threshold_mode("other"), ConfigError);
  }

  TEST_CASE("reference errors per window and per batch") {
    signal::SynthConfig sc;
    sc.n_batches = 5;
    sc.batch_len = 120;
    const auto ds = signal::synth_generate(sc);
    const nn::AutoencoderConfig cfg{20, 3, {8}, 4};
    const auto model = build_autoencoder(cfg, 12);
    const std::vector<std::size_t> idx{4, 1, 2};
    const auto per_window = reference_errors(model, ds, idx, ReferenceUnit::window);
    const auto per_batch = reference_errors(model, ds, idx, ReferenceUnit::batch);
    REQUIRE(per_window.size() == 3 * 6);
    CHECK(per_batch == score_batches(model, ds, idx));
    // Each batch score is the mean of that batch's six window errors, in order.
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const std::span<const double> chunk(per_window.data() + 6 * b, 6);
      CHECK(aggregate_errors(chunk) == doctest::Approx(per_batch[b]).epsilon(1e-9));
    }
    CHECK(reference_errors(model, ds, std::vector<std::size_t>{}, ReferenceUnit::window).empty());
    CHECK(to_string(ReferenceUnit::batch) == "batch");
    CHECK(parse_reference_unit("window") == ReferenceUnit::window);
    CHECK_THROWS_AS(parse_reference_unit("batches"), ConfigError);
  }
}

TEST_SUITE("metrics") {
  TEST_CASE("examples") {
    const std::vector<Label> truth{Label::normal, Label::anomalous, Label::anomalous, Label::normal};
    const auto perfect = evaluate_detection(truth, truth);
    CHECK(perfect.precision == 1.0);
    CHECK(perfect.recall == 1.0);
    CHECK(perfect.f1 == 1.0);

    const std::vector<Label> none(4, Label::normal);
    const auto quiet = evaluate_detection(none, truth);
    CHECK(quiet.recall == 0.0);
    CHECK(quiet.degenerate);

    std::vector<Label> pred, gt;
    for (int i = 0; i < 33; ++i) { pred.push_back(Label::anomalous); gt.push_back(Label::anomalous); }
    for (int i = 0; i < 2; ++i) { pred.push_back(Label::anomalous); gt.push_back(Label::normal); }
    for (int i = 0; i < 100; ++i) { pred.push_back(Label::normal); gt.push_back(Label::normal); }
    const auto rm1 = evaluate_detection(pred, gt);
    CHECK(rm1.precision == doctest::Approx(0.943).epsilon(5e-4));
    CHECK(rm1.recall == 1.0);
    CHECK(rm1.f1 == doctest::Approx(0.971).epsilon(5e-4));
    // Reported federated RM-1 row: F1 0.970, precision 0.942, recall 1.000.
    CHECK(std::abs(rm1.f1 - 0.970) < 0.0015);
    CHECK(std::abs(rm1.precision - 0.942) < 0.0015);

    CHECK_THROWS_AS(evaluate_detection(none, std::vector<Label>(3)), DimensionError);
  }

  TEST_CASE("metrics agree with confusion counts") {
    Rng rng(9);
    for (int c = 0; c < 200; ++c) {
      std::vector<Label> p(1 + rng.below(40)), t(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = rng.below(2) ? Label::anomalous : Label::normal;
        t[i] = rng.below(2) ? Label::anomalous : Label::normal;
      }
      const auto m = evaluate_detection(p, t);
      CHECK(m.true_positives + m.false_positives + m.false_negatives + m.true_negatives == p.size());
      const double tp = double(m.true_positives);
      if (m.true_positives + m.false_positives > 0)
        CHECK(m.precision == doctest::Approx(tp / double(m.true_positives + m.false_positives)));
      if (m.true_positives + m.false_negatives > 0)
        CHECK(m.recall == doctest::Approx(tp / double(m.true_positives + m.false_negatives)));
      if (m.precision + m.recall > 0)
        CHECK(m.f1 == doctest::Approx(2 * m.precision * m.recall / (m.precision + m.recall)));
    }
  }
}

TEST_SUITE("training") {
  TEST_CASE("zero epochs change nothing") {
    nn::AutoencoderConfig cfg{20, 1, {8}, 4};
    auto model = build_autoencoder(cfg, 1);
    const auto before = model.params().output.W;
    const auto hist = train_epochs(model, sine_windows(4, 20, 2), {}, nn::TrainConfig{}, 0, 3);
    CHECK(hist.empty());
    CHECK(model.params().output.W == before);
    CHECK_THROWS_AS(train_epochs(model, {}, {}, nn::TrainConfig{}, 1, 3), StateError);
  }

  TEST_CASE("100 epochs on 64 sine windows") {
    nn::AutoencoderConfig cfg{50, 1, {32}, 8};
    const auto train = sine_windows(64, 50, 11);
    const auto val = sine_windows(32, 50, 12);
    auto model = build_autoencoder(cfg, 13);
    nn::TrainConfig tc;
    tc.learning_rate = 1e-2;
    tc.batch_size = 16;
    const auto hist = train_epochs(model, train, val, tc, 100, 14);
    REQUIRE(hist.size() == 100);
    CHECK(hist.back().train_loss < 0.5 * hist.front().train_loss);
    const double train_loss = evaluate_loss(model, train, 64);
    CHECK(hist.back().val_loss < 2.0 * train_loss);
    for (std::size_t e = 0; e < hist.size(); ++e) CHECK(hist[e].epoch_index == e);
  }

  TEST_CASE("resuming at an epoch index equals training straight through") {
    nn::AutoencoderConfig cfg{20, 1, {8}, 4};
    const auto windows = sine_windows(24, 20, 21);
    nn::TrainConfig tc;
    tc.batch_size = 8;
    auto a = build_autoencoder(cfg, 22);
    auto b = build_autoencoder(cfg, 22);
    train_epochs(a, windows, {}, tc, 3, 23);
    Trainer t(tc, 23);
    for (std::size_t e = 0; e < 3; ++e) t.run_epoch(b, windows, {}, e);
    const auto va = a.params().views();
    const auto vb = b.params().views();
    for (std::size_t k = 0; k < va.size(); ++k) CHECK(std::equal(va[k].data, va[k].data + va[k].size(), vb[k].data));
  }
}

TEST_SUITE("detection on synthetic data") {
  TEST_CASE("anomalous batches score at least twice the held-out normal ones, deterministically") {
    signal::SynthConfig sc;
    sc.n_batches = 60;
    sc.anomaly_indices = {50, 53, 56, 59};
    const auto ds = signal::synth_generate(sc);
    const nn::AutoencoderConfig cfg{100, 3, {32}, 8};
    std::vector<std::size_t> train_idx(40), held_out, anomalous;
    std::iota(train_idx.begin(), train_idx.end(), 0);
    for (std::size_t i = 40; i < 60; ++i) (ds.batches[i].is_anomalous() ? anomalous : held_out).push_back(i);

    auto run = [&] {
      auto model = build_autoencoder(cfg, 31);
      nn::TrainConfig tc;
      tc.learning_rate = 3e-3;
      train_epochs(model, signal::windows_of(ds, train_idx, 100), {}, tc, 15, 32);
      std::vector<std::size_t> all = held_out;
      all.insert(all.end(), anomalous.begin(), anomalous.end());
      return score_batches(model, ds, all);
    };
    const auto scores = run();
    double normal = 0.0, anom = 0.0;
    for (std::size_t i = 0; i < held_out.size(); ++i) normal += scores[i];
    for (std::size_t i = held_out.size(); i < scores.size(); ++i) anom += scores[i];
    normal /= double(held_out.size());
    anom /= double(anomalous.size());
    MESSAGE("mean normal " << normal << ", mean anomalous " << anom);
    CHECK(anom >= 2.0 * normal);
    CHECK(run() == scores);
  }
}
