#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "sdg/suite.hpp"
#include "sdg/training.hpp"

using sdg::Tensor;

namespace {

// Dataset whose class is carried entirely by a constant per-image color; the
// label is also recoverable from pixel 0 of channel 0, which lets evaluation
// mocks decode it from images alone.
sdg::ColorizedDataset tiny_color_ds(int count, std::uint64_t seed) {
  const auto palette = sdg::build_palette();
  sdg::Rng rng(seed);
  sdg::ColorizedDataset ds;
  ds.count = count;
  ds.rule = sdg::color_rule_name(sdg::ColorRule::kByClass);
  ds.palette_fingerprint = palette.fingerprint();
  ds.images.resize(static_cast<std::size_t>(count) * 3 * 28 * 28);
  ds.labels.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int label = static_cast<int>(rng.uniform() * 10) % 10;
    ds.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(label);
    for (int c = 0; c < 3; ++c) {
      float* plane = ds.images.data() + (static_cast<std::size_t>(i) * 3 + c) * 28 * 28;
      std::fill(plane, plane + 28 * 28, static_cast<float>(palette.colors[label][c]));
    }
    ds.images[static_cast<std::size_t>(i) * 3 * 28 * 28] = static_cast<float>(label) / 10.0f;
  }
  return ds;
}

int label_from_image(const float* image) { return static_cast<int>(std::lround(image[0] * 10.0f)); }

}  // namespace

TEST_CASE("sgd nesterov follows the update rule") {
  SECTION("reduces to plain sgd without momentum or decay") {
    auto theta = Tensor<double>::from({1}, {1.0});
    theta.grad()[0] = 0.5;
    sdg::SgdNesterov<double> opt({&theta}, 0.1, 0.0, 0.0);
    opt.step();
    CHECK(theta.values()[0] == Catch::Approx(0.95).margin(1e-15));
  }

  SECTION("weight decay alone shrinks the parameter") {
    // g = wd*theta, v = g, step = lr*(1+mu)*g: theta*(1 - lr*wd - lr*mu*wd).
    auto theta = Tensor<double>::from({1}, {2.0});
    theta.grad()[0] = 0.0;
    sdg::SgdNesterov<double> opt({&theta}, 0.01, 0.9, 0.1);
    opt.step();
    CHECK(theta.values()[0] == Catch::Approx(1.9962).margin(1e-12));
  }

  SECTION("momentum accumulates across steps") {
    auto theta = Tensor<double>::from({1}, {0.0});
    sdg::SgdNesterov<double> opt({&theta}, 0.1, 0.9, 0.0);
    theta.grad()[0] = 1.0;
    opt.step();
    CHECK(theta.values()[0] == Catch::Approx(-0.19).margin(1e-15));
    theta.grad()[0] = 1.0;
    opt.step();
    // v = 0.9*1 + 1 = 1.9; step = 0.1*(1 + 0.9*1.9) = 0.271.
    CHECK(theta.values()[0] == Catch::Approx(-0.461).margin(1e-15));
  }

  SECTION("zero_grad clears every parameter gradient") {
    auto a = Tensor<double>::from({2}, {1.0, 2.0});
    auto b = Tensor<double>::from({1}, {3.0});
    a.grad()[0] = 5.0;
    a.grad()[1] = 6.0;
    b.grad()[0] = 7.0;
    sdg::SgdNesterov<double> opt({&a, &b}, 0.1, 0.9, 0.0);
    opt.zero_grad();
    CHECK(a.grad_values() == std::vector<double>{0.0, 0.0});
    CHECK(b.grad_values() == std::vector<double>{0.0});
  }

  SECTION("updates several parameters independently") {
    auto a = Tensor<double>::from({2}, {1.0, -1.0});
    auto b = Tensor<double>::from({1}, {0.5});
    a.grad()[0] = 1.0;
    a.grad()[1] = -2.0;
    b.grad()[0] = 0.0;
    sdg::SgdNesterov<double> opt({&a, &b}, 0.5, 0.0, 0.0);
    opt.step();
    CHECK(a.values()[0] == Catch::Approx(0.5));
    CHECK(a.values()[1] == Catch::Approx(0.0));
    CHECK(b.values()[0] == Catch::Approx(0.5));
  }
}

TEST_CASE("evaluate_accuracy scores argmax predictions") {
  auto ds = tiny_color_ds(10, 3);

  SECTION("an oracle that decodes the label is perfect") {
    const double acc = sdg::evaluate_accuracy(ds, 4, [](const Tensor<float>& im) {
      const int B = im.dim(0);
      Tensor<float> logits({B, 10});
      for (int n = 0; n < B; ++n) {
        const int y = label_from_image(im.data() + static_cast<std::int64_t>(n) * 3 * 28 * 28);
        logits.data()[n * 10 + y] = 1.0f;
      }
      return logits;
    });
    CHECK(acc == 1.0);
  }

  SECTION("ties resolve to the lowest class index") {
    const double acc =
        sdg::evaluate_accuracy(ds, 4, [](const Tensor<float>& im) { return Tensor<float>({im.dim(0), 10}); });
    int zeros = 0;
    for (auto y : ds.labels) zeros += y == 0;
    CHECK(acc == Catch::Approx(static_cast<double>(zeros) / ds.count));
  }

  SECTION("a constant prediction scores that class's frequency") {
    const double acc = sdg::evaluate_accuracy(ds, 3, [](const Tensor<float>& im) {
      Tensor<float> logits({im.dim(0), 10});
      for (int n = 0; n < im.dim(0); ++n) logits.data()[n * 10 + 9] = 2.0f;
      return logits;
    });
    int nines = 0;
    for (auto y : ds.labels) nines += y == 9;
    CHECK(acc == Catch::Approx(static_cast<double>(nines) / ds.count));
  }
}

TEST_CASE("train validates its inputs") {
  auto train_ds = tiny_color_ds(8, 1);
  auto val_ds = tiny_color_ds(4, 2);
  sdg::DataBundle data{&train_ds, &val_ds, nullptr, nullptr};

  sdg::TrainConfig cfg;
  cfg.epochs = 1;

  SECTION("unknown method") {
    cfg.method = "mystery";
    CHECK_THROWS_MATCHES(sdg::train(cfg, data), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("unknown method")));
  }
  SECTION("unknown selection rule") {
    cfg.selection = "best-test";
    CHECK_THROWS_MATCHES(sdg::train(cfg, data), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("selection")));
  }
  SECTION("non-positive margin") {
    cfg.margin = 0.0;
    CHECK_THROWS_MATCHES(sdg::train(cfg, data), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("margin")));
  }
  SECTION("missing splits") {
    sdg::DataBundle no_train{nullptr, &val_ds, nullptr, nullptr};
    CHECK_THROWS_MATCHES(sdg::train(cfg, no_train), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("training split")));
    sdg::DataBundle no_val{&train_ds, nullptr, nullptr, nullptr};
    CHECK_THROWS_MATCHES(sdg::train(cfg, no_val), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("validation split")));
  }
  SECTION("dropout rate and rsc fraction caps") {
    cfg.dropout_rate = 1.5;
    CHECK_THROWS_AS(sdg::train(cfg, data), sdg::Error);
    cfg.dropout_rate = -1.0;
    cfg.rsc_fraction = 2.0;
    CHECK_THROWS_AS(sdg::train(cfg, data), sdg::Error);
  }
}

TEST_CASE("train fits a color-separable toy set") {
  auto train_ds = tiny_color_ds(128, 11);
  auto val_ds = tiny_color_ds(48, 12);
  auto mp_ds = tiny_color_ds(32, 13);
  sdg::DataBundle data{&train_ds, &val_ds, &mp_ds, nullptr};

  sdg::TrainConfig cfg;
  cfg.epochs = 4;
  cfg.batch_size = 32;
  cfg.seed = 5;

  std::vector<sdg::EpochMetrics> seen;
  sdg::TrainCallbacks cb;
  cb.on_epoch = [&](const sdg::EpochMetrics& em) { seen.push_back(em); };

  sdg::Model<float> model;
  const auto rr = sdg::train(cfg, data, &model, cb);

  REQUIRE(rr.epochs.size() == 4);
  REQUIRE(seen.size() == 4);
  CHECK_FALSE(rr.failed);
  CHECK(rr.epochs.back().train_loss < rr.epochs.front().train_loss);
  CHECK(rr.selected_epoch >= 1);
  CHECK(rr.selected_val >= 0.0);
  CHECK(rr.selected_test_mp >= 0.0);
  CHECK(rr.selected_test_up == -1.0);  // split absent
  CHECK(rr.best_test_epoch >= 1);
  for (const auto& em : rr.epochs) {
    CHECK(em.val_acc >= 0.0);
    CHECK(em.val_acc <= 1.0);
    CHECK(std::isfinite(em.train_loss));
    CHECK(em.test_up_acc == -1.0);
  }
  // The returned model carries the selected snapshot.
  const double acc = sdg::evaluate(model, val_ds, cfg.eval_batch_size);
  CHECK(acc == Catch::Approx(rr.selected_val));
  // Selection tracks the running best validation accuracy.
  double best = -1.0;
  int best_epoch = 0;
  for (const auto& em : rr.epochs) {
    if (em.val_acc > best) {
      best = em.val_acc;
      best_epoch = em.epoch;
    }
  }
  CHECK(rr.selected_epoch == best_epoch);
  CHECK(rr.selected_val == best);
}

TEST_CASE("selection rules") {
  auto train_ds = tiny_color_ds(64, 21);
  auto val_ds = tiny_color_ds(32, 22);
  sdg::DataBundle data{&train_ds, &val_ds, nullptr, nullptr};

  SECTION("best-val keeps the earliest epoch on ties") {
    // lr zero freezes the model, so every epoch scores identically.
    sdg::TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 32;
    cfg.lr = 0.0;
    const auto rr = sdg::train(cfg, data);
    REQUIRE(rr.epochs.size() == 3);
    CHECK(rr.epochs[0].val_acc == rr.epochs[1].val_acc);
    CHECK(rr.epochs[1].val_acc == rr.epochs[2].val_acc);
    CHECK(rr.selected_epoch == 1);
    CHECK_FALSE(rr.early_stopped);
  }

  SECTION("early-stop halts once the threshold is met") {
    sdg::TrainConfig cfg;
    cfg.epochs = 5;
    cfg.batch_size = 32;
    cfg.selection = "early-stop";
    cfg.early_stop_threshold = 0.0;  // met immediately
    const auto rr = sdg::train(cfg, data);
    CHECK(rr.early_stopped);
    CHECK(rr.epochs.size() == 1);
    CHECK(rr.selected_epoch == 1);
    CHECK(rr.selected_val == rr.epochs[0].val_acc);
  }

  SECTION("early-stop falls back to best-val when never met") {
    sdg::TrainConfig cfg;
    cfg.epochs = 2;
    cfg.batch_size = 32;
    cfg.selection = "early-stop";
    cfg.early_stop_threshold = 1.1;  // unreachable
    const auto rr = sdg::train(cfg, data);
    CHECK_FALSE(rr.early_stopped);
    CHECK(rr.epochs.size() == 2);
    CHECK(rr.selected_epoch >= 1);
    double best = -1.0;
    for (const auto& em : rr.epochs) best = std::max(best, em.val_acc);
    CHECK(rr.selected_val == best);
  }
}

TEST_CASE("train reports divergence instead of crashing") {
  auto train_ds = tiny_color_ds(64, 31);
  auto val_ds = tiny_color_ds(16, 32);
  sdg::DataBundle data{&train_ds, &val_ds, nullptr, nullptr};

  sdg::TrainConfig cfg;
  cfg.epochs = 3;
  cfg.batch_size = 32;
  cfg.lr = 1e12;  // guarantees overflow after the first update
  const auto rr = sdg::train(cfg, data);
  CHECK(rr.failed);
  CHECK(rr.failed_epoch == 1);
  CHECK(rr.epochs.empty());
  CHECK(rr.selected_epoch == 0);
}

TEST_CASE("identical configuration and seed reproduce the run") {
  auto train_ds = tiny_color_ds(64, 41);
  auto val_ds = tiny_color_ds(32, 42);
  auto mp_ds = tiny_color_ds(16, 43);
  sdg::DataBundle data{&train_ds, &val_ds, &mp_ds, nullptr};

  sdg::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 32;
  cfg.seed = 77;

  const auto a = sdg::train(cfg, data);
  const auto b = sdg::train(cfg, data);
  CHECK(a == b);

  cfg.seed = 78;
  const auto c = sdg::train(cfg, data);
  CHECK_FALSE(a == c);
}

TEST_CASE("zero auxiliary weight reduces every method to standard training") {
  auto train_ds = tiny_color_ds(64, 51);
  auto val_ds = tiny_color_ds(16, 52);
  sdg::DataBundle data{&train_ds, &val_ds, nullptr, nullptr};

  sdg::TrainConfig base;
  base.epochs = 1;
  base.batch_size = 32;
  base.seed = 9;
  const auto standard = sdg::train(base, data);

  for (const std::string method : {"dropout", "dropout-ortho", "dropout-cov", "jigsaw", "reconstruction",
                                   "spectral-decoupling", "rsc", "rcl"}) {
    sdg::TrainConfig cfg = base;
    cfg.method = method;
    cfg.aux_weight = 0.0;
    const auto rr = sdg::train(cfg, data);
    INFO("method " << method);
    CHECK(rr == standard);
  }
}

TEST_CASE("metrics csv round-trips") {
  const auto dir = sdgtest::scratch_dir("metrics");
  sdg::RunResult rr;
  sdg::EpochMetrics e1;
  e1.epoch = 1;
  e1.val_acc = 0.125;
  e1.test_mp_acc = -1.0;
  e1.test_up_acc = 0.0625;
  e1.train_loss = 2.302585;
  e1.ce_loss = 2.25;
  e1.aux_loss = 0.052585;
  e1.skipped_anchors = 3;
  e1.seconds = 1.5;
  sdg::EpochMetrics e2;
  e2.epoch = 2;
  e2.val_acc = 1.0 / 3.0;  // needs full precision to round-trip
  e2.test_mp_acc = 0.5;
  e2.test_up_acc = -1.0;
  e2.train_loss = 1.0;
  rr.epochs = {e1, e2};

  const auto path = (dir / "metrics.csv").string();
  sdg::write_metrics_csv(rr, path);
  const auto back = sdg::read_metrics_csv(path);
  REQUIRE(back.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    CHECK(back[i].epoch == rr.epochs[i].epoch);
    CHECK(back[i].val_acc == rr.epochs[i].val_acc);
    CHECK(back[i].test_mp_acc == rr.epochs[i].test_mp_acc);
    CHECK(back[i].test_up_acc == rr.epochs[i].test_up_acc);
    CHECK(back[i].train_loss == rr.epochs[i].train_loss);
    CHECK(back[i].ce_loss == rr.epochs[i].ce_loss);
    CHECK(back[i].aux_loss == rr.epochs[i].aux_loss);
    CHECK(back[i].skipped_anchors == rr.epochs[i].skipped_anchors);
  }

  SECTION("malformed rows are rejected") {
    sdgtest::write_bytes(dir / "bad.csv", std::string("epoch,val_acc\n1,not-a-number\n"));
    CHECK_THROWS_MATCHES(sdg::read_metrics_csv((dir / "bad.csv").string()), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("malformed")));
  }
}

TEST_CASE("config echo resolves defaults") {
  sdg::TrainConfig cfg;
  cfg.method = "rcl";
  cfg.margin = 0.4;
  cfg.seed = 123;
  const auto kv = sdg::config_echo(cfg);
  CHECK(kv.get("method") == "rcl");
  CHECK(kv.get_double("margin") == 0.4);
  CHECK(kv.get_double("aux_weight") == 1.0);  // per-method default
  CHECK(kv.get_int("seed") == 123);
  CHECK(kv.get("selection") == "best-val");
  CHECK(kv.get_int("epochs") == 10);
  CHECK(kv.get_int("rcl_per_dim_rescale") == 0);

  cfg.aux_weight = 2.5;
  CHECK(sdg::config_echo(cfg).get_double("aux_weight") == 2.5);

  // The unconditional margin echoes as a parseable token.
  cfg.margin = sdg::kUnconditionalMargin;
  const auto unconditional = sdg::config_echo(cfg);
  CHECK(unconditional.get("margin") == "inf");
  CHECK(std::isinf(unconditional.get_double("margin")));
}

TEST_CASE("run results persist and reload") {
  const auto dir = sdgtest::scratch_dir("runio");
  sdg::TrainConfig cfg;
  cfg.method = "spectral-decoupling";
  cfg.epochs = 2;
  cfg.seed = 3;

  sdg::RunResult rr;
  sdg::EpochMetrics em;
  em.epoch = 1;
  em.val_acc = 0.75;
  em.test_mp_acc = 0.25;
  em.test_up_acc = -1.0;
  em.train_loss = 1.25;
  rr.epochs = {em};
  rr.selected_epoch = 1;
  rr.selected_val = 0.75;
  rr.selected_test_mp = 0.25;
  rr.selected_test_up = -1.0;
  rr.best_test_epoch = 1;
  rr.best_test_val = 0.75;
  rr.best_test_acc = 0.25;
  rr.wall_seconds = 9.0;

  const auto run_dir = (dir / "run0").string();
  sdg::write_run_result(cfg, rr, run_dir);
  const auto sr = sdg::read_run_result(run_dir);
  CHECK(sr.result == rr);
  CHECK(sr.keys.get("format") == "sdg-run-v1");
  CHECK(sr.keys.get("config.method") == "spectral-decoupling");
  CHECK(sr.keys.get("status") == "ok");

  SECTION("failed runs round-trip") {
    sdg::RunResult bad;
    bad.failed = true;
    bad.failed_epoch = 2;
    const auto bad_dir = (dir / "run1").string();
    sdg::write_run_result(cfg, bad, bad_dir);
    const auto back = sdg::read_run_result(bad_dir);
    CHECK(back.result.failed);
    CHECK(back.result.failed_epoch == 2);
    CHECK(back.result == bad);
  }

  SECTION("row count disagreement is rejected") {
    auto kv = sdg::KvFile::load(run_dir + "/result.txt");
    kv.set("epochs_recorded", "5");
    kv.save(run_dir + "/result.txt");
    CHECK_THROWS_MATCHES(sdg::read_run_result(run_dir), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("disagrees")));
  }

  SECTION("foreign formats are rejected") {
    auto kv = sdg::KvFile::load(run_dir + "/result.txt");
    kv.set("format", "sdg-run-v999");
    kv.save(run_dir + "/result.txt");
    CHECK_THROWS_MATCHES(sdg::read_run_result(run_dir), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("format")));
  }
}

TEST_CASE("run_suite executes, caches, and invalidates") {
  const auto dir = sdgtest::scratch_dir("suite");
  auto train_ds = tiny_color_ds(64, 61);
  auto val_ds = tiny_color_ds(16, 62);

  sdg::SuiteOptions opt;
  opt.runs_dir = (dir / "runs").string();
  opt.data_for = [&](const std::string& key) {
    REQUIRE(key == "color");
    return sdg::DataBundle{&train_ds, &val_ds, nullptr, nullptr};
  };
  std::vector<std::string> log;
  opt.log = [&](const std::string& line) { log.push_back(line); };

  sdg::RunSpec spec;
  spec.label = "standard-s1";
  spec.group = "standard";
  spec.dataset = "color";
  spec.config.epochs = 1;
  spec.config.batch_size = 32;

  SECTION("duplicate labels are rejected") {
    CHECK_THROWS_MATCHES(sdg::run_suite({spec, spec}, opt), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("duplicate")));
  }

  SECTION("missing provider is rejected") {
    sdg::SuiteOptions bare;
    CHECK_THROWS_MATCHES(sdg::run_suite({spec}, bare), sdg::Error,
                         Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("provider")));
  }

  SECTION("cache hit, then invalidation on config change") {
    const auto first = sdg::run_suite({spec}, opt);
    REQUIRE(first.size() == 1);
    CHECK_FALSE(first[0].from_cache);
    REQUIRE_FALSE(log.empty());
    CHECK(log.front().find("[run]") == 0);

    log.clear();
    const auto second = sdg::run_suite({spec}, opt);
    CHECK(second[0].from_cache);
    CHECK(second[0].result == first[0].result);
    REQUIRE_FALSE(log.empty());
    CHECK(log.front().find("[cached]") == 0);

    log.clear();
    sdg::RunSpec changed = spec;
    changed.config.lr = 5e-4;
    const auto third = sdg::run_suite({changed}, opt);
    CHECK_FALSE(third[0].from_cache);
    bool saw_stale = false;
    for (const auto& line : log) saw_stale = saw_stale || line.find("[stale]") == 0;
    CHECK(saw_stale);
  }
}

TEST_CASE("stat_of computes sample statistics") {
  const auto empty = sdg::stat_of({});
  CHECK(empty.n == 0);
  CHECK(empty.mean == 0.0);
  CHECK(empty.stddev == 0.0);

  const auto one = sdg::stat_of({0.7});
  CHECK(one.n == 1);
  CHECK(one.mean == 0.7);
  CHECK(one.stddev == 0.0);

  const auto three = sdg::stat_of({1.0, 2.0, 3.0});
  CHECK(three.n == 3);
  CHECK(three.mean == Catch::Approx(2.0));
  CHECK(three.stddev == Catch::Approx(1.0));

  // Identical samples (e.g. two runs of the same seed) have zero spread.
  const auto twin = sdg::stat_of({0.842, 0.842});
  CHECK(twin.mean == Catch::Approx(0.842));
  CHECK(twin.stddev == 0.0);
}

namespace {

sdg::CompletedRun fake_run(const std::string& group, double val, double test, double up = -1.0,
                           bool failed = false) {
  sdg::CompletedRun run;
  run.spec.group = group;
  run.result.failed = failed;
  if (!failed) {
    run.result.selected_val = val;
    run.result.selected_test_mp = test;
    run.result.selected_test_up = up;
    run.result.best_test_val = val;
    run.result.best_test_acc = test;
  }
  return run;
}

}  // namespace

TEST_CASE("aggregate groups runs and tolerates failures") {
  std::vector<sdg::CompletedRun> runs;
  runs.push_back(fake_run("standard", 0.99, 0.40));
  runs.push_back(fake_run("standard", 0.97, 0.44));
  runs.push_back(fake_run("rcl", 0.95, 0.86, 0.91));
  runs.push_back(fake_run("rcl", 0.0, 0.0, 0.0, /*failed=*/true));

  const auto rows = sdg::aggregate(runs);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].group == "standard");  // first-appearance order
  CHECK(rows[0].runs == 2);
  CHECK(rows[0].failed == 0);
  CHECK(rows[0].val.mean == Catch::Approx(0.98));
  CHECK(rows[0].test.mean == Catch::Approx(0.42));
  CHECK(rows[0].test_up.n == 0);  // -1 sentinel means the split was absent

  CHECK(rows[1].group == "rcl");
  CHECK(rows[1].runs == 2);
  CHECK(rows[1].failed == 1);
  CHECK(rows[1].val.n == 1);  // the failed run is excluded from stats
  CHECK(rows[1].val.mean == Catch::Approx(0.95));
  CHECK(rows[1].test_up.mean == Catch::Approx(0.91));
}

TEST_CASE("report rendering") {
  std::vector<sdg::CompletedRun> runs;
  runs.push_back(fake_run("standard", 0.995, 0.412));
  runs.push_back(fake_run("standard", 0.991, 0.448));
  runs.push_back(fake_run("rcl", 0.948, 0.861, 0.92));
  runs.push_back(fake_run("rcl", 0.0, 0.0, 0.0, /*failed=*/true));
  const auto rows = sdg::aggregate(runs);

  SECTION("text table") {
    const auto text = sdg::render_report_text(rows);
    CHECK(text.find("Method") != std::string::npos);
    CHECK(text.find("Validation Accuracy") != std::string::npos);
    CHECK(text.find("Best Test - Test Acc") != std::string::npos);
    CHECK(text.find("standard") != std::string::npos);
    CHECK(text.find("rcl [1 failed]") != std::string::npos);
    CHECK(text.find("99.3") != std::string::npos);  // mean of .995/.991 in percent
    // Single-sample stats carry no deviation parenthesis.
    CHECK(text.find("94.8 (") == std::string::npos);
    CHECK(text.find("94.8") != std::string::npos);
  }

  SECTION("csv") {
    const auto csv = sdg::render_report_csv(rows);
    std::istringstream is(csv);
    std::string header, row1, row2;
    std::getline(is, header);
    std::getline(is, row1);
    std::getline(is, row2);
    CHECK(header ==
          "method,runs,failed,val_mean,val_std,test_mean,test_std,best_test_val_mean,best_test_val_std,"
          "best_test_acc_mean,best_test_acc_std,test_up_mean,test_up_std");
    CHECK(row1.find("standard,2,0,") == 0);
    CHECK(row2.find("rcl,2,1,") == 0);
    CHECK(row1.substr(row1.size() - 2) == ",,");  // no test-up stats -> empty cells
  }
}

TEST_CASE("dump_features emits one row per example") {
  auto model = sdg::Model<float>::init(2);
  auto ds = tiny_color_ds(5, 71);

  std::ostringstream out;
  sdg::dump_features(model, ds, out, /*batch_size=*/2, /*limit=*/0);
  std::istringstream is(out.str());
  std::string header;
  REQUIRE(std::getline(is, header));
  CHECK(header.rfind("id,label,pred,f0,f1,", 0) == 0);
  CHECK(header.substr(header.size() - 6) == ",f6271");

  int rows = 0;
  std::string line;
  std::vector<std::string> first_fields;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::size_t commas = 0;
    for (char c : line) commas += c == ',';
    CHECK(commas == 2 + 6272);
    if (rows == 0) {
      std::istringstream fs(line);
      std::string f;
      while (std::getline(fs, f, ',')) first_fields.push_back(f);
    }
    ++rows;
  }
  CHECK(rows == 5);

  // Spot-check the first row against a direct forward pass.
  REQUIRE(first_fields.size() == 3 + 6272);
  CHECK(first_fields[0] == "0");
  CHECK(first_fields[1] == std::to_string(static_cast<int>(ds.labels[0])));
  sdg::NoTapeScope<float> guard;
  auto tr = model.forward(sdg::gather(ds, {0}).images);
  const double f0 = std::stod(first_fields[3]);
  CHECK(f0 == Catch::Approx(static_cast<double>(tr.features.data()[0])).margin(1e-4).epsilon(1e-5));

  SECTION("limit truncates the dump") {
    std::ostringstream small;
    sdg::dump_features(model, ds, small, 2, /*limit=*/3);
    int n = -1;  // discount the header
    std::istringstream ss(small.str());
    while (std::getline(ss, line)) n += !line.empty();
    CHECK(n == 3);
  }
}
