#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "sdg/model.hpp"
#include "sdg/pipeline.hpp"
#include "sdg/suite.hpp"
#include "sdg/training.hpp"

namespace fs = std::filesystem;

namespace {

// Digests of the canonical idx files; a mismatch is reported but not fatal.
const std::map<std::string, std::string> kKnownMnist = {
    {"train-images", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"},
    {"train-labels", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"},
    {"t10k-images", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"},
    {"t10k-labels", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"},
};

struct PaletteFlags {
  double radius = 0.45;
  double cube_half = 0.35;
  std::vector<double> center = {0.5, 0.5, 0.5};
  std::vector<int> derangement = {1, 2, 3, 4, 5, 6, 7, 8, 9, 0};

  void attach(CLI::App* cmd) {
    cmd->add_option("--sphere-radius", radius, "Sphere radius for classes 0-5")->capture_default_str();
    cmd->add_option("--cube-half-side", cube_half, "Cube half-side for classes 6-9")->capture_default_str();
    cmd->add_option("--center", center, "Palette center (three values in [0,1])")->expected(3)->capture_default_str();
    cmd->add_option("--derangement", derangement, "Unseen-palette class permutation (10 entries, no fixed points)")
        ->expected(10)
        ->capture_default_str();
  }

  sdg::Palette build() const { return sdg::build_palette(radius, cube_half, {center[0], center[1], center[2]}); }
};

void add_config_option(CLI::App* cmd) {
  cmd->set_config("--config", "", "Read options from a key=value file (command line overrides)");
}

void write_runspec(const CLI::App* cmd, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  sdg::require(out.good(), sdg::cat("cannot write ", path));
  out << cmd->config_to_str(true, false);
}

void report_mnist_digests(const sdg::MnistPair& mnist) {
  const std::vector<std::pair<std::string, std::string>> actual = {
      {"train-images", mnist.train_images_sha256},
      {"train-labels", mnist.train_labels_sha256},
      {"t10k-images", mnist.test_images_sha256},
      {"t10k-labels", mnist.test_labels_sha256},
  };
  for (const auto& [name, sha] : actual) {
    const auto it = kKnownMnist.find(name);
    if (it != kKnownMnist.end() && it->second != sha) {
      std::cout << "note: " << name << " sha256 " << sha << " differs from the canonical release\n";
    }
  }
}

struct TrainFlags {
  sdg::TrainConfig cfg;
  std::string margin_text = "inf";

  void attach(CLI::App* cmd) {
    cmd->add_option("--method", cfg.method,
                    "standard|dropout|dropout-ortho|dropout-cov|jigsaw|reconstruction|"
                    "spectral-decoupling|rsc|rcl")
        ->capture_default_str();
    cmd->add_option("--margin", margin_text, "rcl gate margin (number or 'inf')")->capture_default_str();
    cmd->add_option("--aux-weight", cfg.aux_weight, "Auxiliary loss weight (negative = per-method default)")
        ->capture_default_str();
    cmd->add_option("--epochs", cfg.epochs)->capture_default_str();
    cmd->add_option("--batch-size", cfg.batch_size)->capture_default_str();
    cmd->add_option("--lr", cfg.lr)->capture_default_str();
    cmd->add_option("--momentum", cfg.momentum)->capture_default_str();
    cmd->add_option("--weight-decay", cfg.weight_decay)->capture_default_str();
    cmd->add_option("--seed", cfg.seed)->capture_default_str();
    cmd->add_option("--selection", cfg.selection, "best-val|early-stop")->capture_default_str();
    cmd->add_option("--early-stop-threshold", cfg.early_stop_threshold)->capture_default_str();
    cmd->add_option("--eval-batch-size", cfg.eval_batch_size)->capture_default_str();
    cmd->add_flag("--rcl-per-dim", cfg.rcl_per_dim_rescale, "Rescale features per dimension instead of globally");
    cmd->add_option("--dropout-rate", cfg.dropout_rate, "Fixed channel dropout rate (negative = random per step)")
        ->capture_default_str();
    cmd->add_option("--rsc-fraction", cfg.rsc_fraction, "Fixed rsc drop fraction (negative = random per step)")
        ->capture_default_str();
  }

  sdg::TrainConfig resolve() const {
    sdg::TrainConfig out = cfg;
    if (margin_text == "inf" || margin_text == "INF" || margin_text == "unconditional") {
      out.margin = sdg::kUnconditionalMargin;
    } else {
      out.margin = std::stod(margin_text);
    }
    out.validate();
    return out;
  }
};

// Loads an exported dataset directory produced by build-dataset.
struct LoadedData {
  sdg::ColorizedDataset train, val, test_mp, test_up;
  bool has_tests = false;
};

LoadedData load_exported(const std::string& dir) {
  LoadedData d;
  auto tr = sdg::import_dataset(dir + "/train");
  auto va = sdg::import_dataset(dir + "/val", tr.data.palette_fingerprint);
  for (const auto& w : va.warnings) sdg::fail(w);
  d.train = std::move(tr.data);
  d.val = std::move(va.data);
  if (fs::exists(dir + "/test-mp")) {
    auto mp = sdg::import_dataset(dir + "/test-mp", d.train.palette_fingerprint);
    auto up = sdg::import_dataset(dir + "/test-up", d.train.palette_fingerprint);
    for (const auto& w : mp.warnings) sdg::fail(w);
    for (const auto& w : up.warnings) sdg::fail(w);
    d.test_mp = std::move(mp.data);
    d.test_up = std::move(up.data);
    d.has_tests = true;
  }
  return d;
}

int cmd_build_dataset(const std::string& mnist_dir, const std::string& out_dir, const PaletteFlags& pf,
                      std::uint64_t seed, bool gray) {
  const sdg::Palette palette = pf.build();
  sdg::validate_derangement(pf.derangement);
  const sdg::MnistPair mnist = sdg::load_mnist_dir(mnist_dir);
  report_mnist_digests(mnist);

  const auto save = [&](const sdg::ColorizedDataset& ds, const std::string& split, bool from_train_split) {
    sdg::DatasetExportInfo info;
    info.split = split;
    info.seed = seed;
    info.source_images_sha256 = from_train_split ? mnist.train_images_sha256 : mnist.test_images_sha256;
    info.source_labels_sha256 = from_train_split ? mnist.train_labels_sha256 : mnist.test_labels_sha256;
    sdg::export_dataset(ds, palette, pf.derangement, info, out_dir + "/" + split);
    std::cout << "wrote " << out_dir << "/" << split << " (" << ds.count << " samples, " << ds.rule << ")\n";
  };

  if (gray) {
    const sdg::GrayFamily fam = sdg::build_gray_family(mnist, palette);
    save(fam.train, "train", true);
    save(fam.val, "val", false);
  } else {
    const sdg::ColorFamily fam = sdg::build_color_family(mnist, palette, pf.derangement);
    save(fam.train, "train", true);
    save(fam.val, "val", false);
    save(fam.test_mp, "test-mp", false);
    save(fam.test_up, "test-up", false);
  }
  std::cout << "palette fingerprint " << palette.fingerprint() << "\n";
  return 0;
}

int cmd_train(const CLI::App* cmd, const std::string& data_dir, const TrainFlags& tf, const std::string& out_dir) {
  const sdg::TrainConfig cfg = tf.resolve();
  const LoadedData data = load_exported(data_dir);
  sdg::DataBundle bundle;
  bundle.train = &data.train;
  bundle.val = &data.val;
  if (data.has_tests) {
    bundle.test_mp = &data.test_mp;
    bundle.test_up = &data.test_up;
  }
  fs::create_directories(out_dir);
  write_runspec(cmd, out_dir + "/runspec.txt");

  sdg::TrainCallbacks cb;
  cb.on_epoch = [](const sdg::EpochMetrics& em) {
    std::printf("epoch %2d  val %.4f  test-mp %.4f  test-up %.4f  loss %.4f  (%.0fs)\n", em.epoch, em.val_acc,
                em.test_mp_acc, em.test_up_acc, em.train_loss, em.seconds);
    std::fflush(stdout);
  };
  sdg::Model<float> model;
  const sdg::RunResult rr = sdg::train(cfg, bundle, &model, cb);
  sdg::write_run_result(cfg, rr, out_dir);
  sdg::save_checkpoint(model, out_dir + "/checkpoint.bin");
  if (rr.failed) {
    std::printf("run failed at epoch %d (non-finite loss)\n", rr.failed_epoch);
    return 1;
  }
  std::printf("selected epoch %d: val %.4f test-mp %.4f test-up %.4f%s\n", rr.selected_epoch, rr.selected_val,
              rr.selected_test_mp, rr.selected_test_up, rr.early_stopped ? " (early stop)" : "");
  return 0;
}

std::vector<sdg::RunSpec> bench_specs(const std::vector<std::string>& methods, const std::vector<std::uint64_t>& seeds,
                                      const sdg::TrainConfig& base, bool gray_control) {
  std::vector<sdg::RunSpec> specs;
  const auto add = [&](const std::string& token) {
    sdg::TrainConfig cfg = base;
    std::string group = token;
    if (token == "rcl-inf") {
      cfg.method = "rcl";
      cfg.margin = sdg::kUnconditionalMargin;
      group = "rcl m=inf";
    } else if (token.rfind("rcl:", 0) == 0) {
      cfg.method = "rcl";
      cfg.margin = std::stod(token.substr(4));
      group = "rcl m=" + token.substr(4);
    } else {
      cfg.method = token;
    }
    cfg.validate();
    for (const auto seed : seeds) {
      sdg::RunSpec spec;
      spec.group = group;
      spec.dataset = "color";
      spec.config = cfg;
      spec.config.seed = seed;
      std::string slug = group;
      for (auto& c : slug) {
        if (c == ' ' || c == '=' || c == ':') c = '-';
      }
      spec.label = slug + "-s" + std::to_string(seed);
      specs.push_back(std::move(spec));
    }
  };
  for (const auto& m : methods) add(m);
  if (gray_control) {
    for (const auto seed : seeds) {
      sdg::RunSpec spec;
      spec.group = "standard (uncolored)";
      spec.dataset = "gray";
      spec.config = base;
      spec.config.method = "standard";
      spec.config.seed = seed;
      spec.label = "gray-standard-s" + std::to_string(seed);
      specs.push_back(std::move(spec));
    }
  }
  return specs;
}

int cmd_bench(const std::string& mnist_dir, const PaletteFlags& pf, const sdg::TrainConfig& base,
              const std::vector<std::string>& methods, const std::vector<std::uint64_t>& seeds, bool gray_control,
              const std::string& runs_dir, const std::string& out_dir, int jobs) {
  const sdg::Palette palette = pf.build();
  sdg::validate_derangement(pf.derangement);
  const sdg::MnistPair mnist = sdg::load_mnist_dir(mnist_dir);
  report_mnist_digests(mnist);

  const sdg::ColorFamily color = sdg::build_color_family(mnist, palette, pf.derangement);
  std::optional<sdg::GrayFamily> gray;
  if (gray_control) gray.emplace(sdg::build_gray_family(mnist, palette));

  sdg::SuiteOptions opt;
  opt.runs_dir = runs_dir;
  opt.jobs = jobs;
  opt.log = [](const std::string& line) {
    std::cout << line << "\n";
    std::cout.flush();
  };
  opt.data_for = [&](const std::string& key) {
    sdg::DataBundle b;
    if (key == "gray") {
      sdg::require(gray.has_value(), "bench: gray dataset requested but not built");
      b.train = &gray->train;
      b.val = &gray->val;
    } else {
      b.train = &color.train;
      b.val = &color.val;
      b.test_mp = &color.test_mp;
      b.test_up = &color.test_up;
    }
    return b;
  };

  const auto specs = bench_specs(methods, seeds, base, gray_control);
  const auto runs = sdg::run_suite(specs, opt);
  for (const auto& run : runs) {
    if (!opt.runs_dir.empty()) {
      // annotate for later `report` invocations
      sdg::KvFile kv = sdg::KvFile::load(opt.runs_dir + "/" + run.spec.label + "/result.txt");
      kv.set("group", run.spec.group);
      kv.set("dataset", run.spec.dataset);
      kv.save(opt.runs_dir + "/" + run.spec.label + "/result.txt");
    }
  }
  const auto rows = sdg::aggregate(runs);
  const std::string text = sdg::render_report_text(rows);
  fs::create_directories(out_dir);
  std::ofstream(out_dir + "/report.txt", std::ios::binary) << text;
  std::ofstream(out_dir + "/report.csv", std::ios::binary) << sdg::render_report_csv(rows);
  std::cout << "\n" << text;
  std::cout << "report written to " << out_dir << "\n";
  return 0;
}

int cmd_report(const std::string& runs_dir, const std::string& out_dir) {
  std::vector<std::string> dirs;
  sdg::require(fs::is_directory(runs_dir), sdg::cat("report: runs dir ", runs_dir, " does not exist"));
  for (const auto& entry : fs::directory_iterator(runs_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / "result.txt")) dirs.push_back(entry.path().string());
  }
  sdg::require(!dirs.empty(), sdg::cat("report: no completed runs under ", runs_dir));
  std::sort(dirs.begin(), dirs.end());
  std::vector<sdg::CompletedRun> runs;
  for (const auto& dir : dirs) {
    sdg::StoredRun sr = sdg::read_run_result(dir);
    sdg::CompletedRun run;
    run.spec.label = fs::path(dir).filename().string();
    run.spec.group = sr.keys.get_or("group", sr.keys.get("config.method"));
    run.spec.dataset = sr.keys.get_or("dataset", "color");
    run.result = sr.result;
    run.from_cache = true;
    runs.push_back(std::move(run));
  }
  const auto rows = sdg::aggregate(runs);
  const std::string text = sdg::render_report_text(rows);
  if (out_dir.empty()) {
    std::cout << text;
  } else {
    fs::create_directories(out_dir);
    std::ofstream(out_dir + "/report.txt", std::ios::binary) << text;
    std::ofstream(out_dir + "/report.csv", std::ios::binary) << sdg::render_report_csv(rows);
    std::cout << text << "report written to " << out_dir << "\n";
  }
  return 0;
}

int cmd_dump_features(const std::string& split_dir, const std::string& checkpoint, const std::string& out_path,
                      int limit, int batch_size) {
  auto imported = sdg::import_dataset(split_dir);
  sdg::Model<float> model = sdg::Model<float>::init(0);
  sdg::load_checkpoint(model, checkpoint);
  if (out_path.empty() || out_path == "-") {
    sdg::dump_features(model, imported.data, std::cout, batch_size, limit);
  } else {
    std::ofstream out(out_path, std::ios::binary);
    sdg::require(out.good(), sdg::cat("cannot write ", out_path));
    sdg::dump_features(model, imported.data, out, batch_size, limit);
    std::cout << "wrote " << out_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"MNIST Color single-source domain generalization benchmark"};
  app.require_subcommand(1);

  // build-dataset
  auto* cb = app.add_subcommand("build-dataset", "Colorize MNIST into train/val/test-mp/test-up splits");
  std::string mnist_dir, out_dir;
  std::uint64_t build_seed = 0;
  bool build_gray = false;
  PaletteFlags build_palette_flags;
  cb->add_option("--mnist-dir", mnist_dir, "Directory with the four canonical idx files")
      ->envname("SDG_MNIST_DIR")
      ->required();
  cb->add_option("--out", out_dir, "Output dataset directory")->required();
  cb->add_option("--seed", build_seed, "Recorded in manifests (construction is deterministic)")
      ->capture_default_str();
  cb->add_flag("--gray", build_gray, "Build the uncolored control (train/val only)");
  build_palette_flags.attach(cb);
  add_config_option(cb);

  // train
  auto* ct = app.add_subcommand("train", "Train one configuration on an exported dataset");
  std::string train_data, train_out;
  TrainFlags train_flags;
  ct->add_option("--data", train_data, "Dataset directory produced by build-dataset")->required();
  ct->add_option("--out", train_out, "Run output directory")->required();
  train_flags.attach(ct);
  add_config_option(ct);

  // bench
  auto* cbe = app.add_subcommand("bench", "Run a method suite and aggregate a report");
  std::string bench_mnist, bench_runs = "runs", bench_out = "report";
  std::vector<std::string> bench_methods = {"standard", "rcl-inf"};
  std::vector<std::uint64_t> bench_seeds = {1, 2, 3};
  bool bench_gray = false;
  int bench_jobs = 1;
  TrainFlags bench_base;
  PaletteFlags bench_palette;
  cbe->add_option("--mnist-dir", bench_mnist, "Directory with the four canonical idx files")
      ->envname("SDG_MNIST_DIR")
      ->required();
  cbe->add_option("--methods", bench_methods,
                  "Method tokens: standard, dropout, dropout-ortho, dropout-cov, jigsaw, reconstruction, "
                  "spectral-decoupling, rsc, rcl:<margin>, rcl-inf")
      ->delimiter(',')
      ->capture_default_str();
  cbe->add_option("--seeds", bench_seeds, "Seeds (each method runs once per seed)")
      ->delimiter(',')
      ->capture_default_str();
  cbe->add_flag("--gray-control", bench_gray, "Also run standard training on the uncolored control");
  cbe->add_option("--runs-dir", bench_runs, "Per-run outputs; completed runs here are reused")
      ->capture_default_str();
  cbe->add_option("--out", bench_out, "Report output directory")->capture_default_str();
  cbe->add_option("--jobs", bench_jobs, "Concurrent runs (each run stays single-threaded)")->capture_default_str();
  bench_base.attach(cbe);
  bench_palette.attach(cbe);
  add_config_option(cbe);

  // report
  auto* cr = app.add_subcommand("report", "Aggregate previously stored runs");
  std::string report_runs, report_out;
  cr->add_option("--runs-dir", report_runs, "Directory holding per-run outputs")->required();
  cr->add_option("--out", report_out, "Report output directory (default: print only)");
  add_config_option(cr);

  // dump-features
  auto* cd = app.add_subcommand("dump-features", "Write per-sample extractor features as csv");
  std::string dump_data, dump_ckpt, dump_out = "-";
  int dump_limit = 0, dump_batch = 512;
  cd->add_option("--data", dump_data, "Exported split directory (e.g. <dataset>/val)")->required();
  cd->add_option("--checkpoint", dump_ckpt, "Checkpoint written by train")->required();
  cd->add_option("--out", dump_out, "Output file ('-' = stdout)")->capture_default_str();
  cd->add_option("--limit", dump_limit, "Stop after this many samples (0 = all)")->capture_default_str();
  cd->add_option("--batch-size", dump_batch)->capture_default_str();
  add_config_option(cd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (cb->parsed()) return cmd_build_dataset(mnist_dir, out_dir, build_palette_flags, build_seed, build_gray);
    if (ct->parsed()) return cmd_train(ct, train_data, train_flags, train_out);
    if (cbe->parsed()) {
      return cmd_bench(bench_mnist, bench_palette, bench_base.resolve(), bench_methods, bench_seeds, bench_gray,
                       bench_runs, bench_out, bench_jobs);
    }
    if (cr->parsed()) return cmd_report(report_runs, report_out);
    if (cd->parsed()) return cmd_dump_features(dump_data, dump_ckpt, dump_out, dump_limit, dump_batch);
  } catch (const sdg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
