#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "sdg/training.hpp"

namespace sdg {

struct RunSpec {
  std::string label;    // unique run id, used as the cache directory name
  std::string group;    // aggregation key (one table row per group)
  std::string dataset;  // provider key, e.g. "color" or "gray"
  TrainConfig config;
};

struct CompletedRun {
  RunSpec spec;
  RunResult result;
  bool from_cache = false;
};

struct SuiteOptions {
  std::string runs_dir;  // empty disables persistence/resume
  int jobs = 1;
  std::function<DataBundle(const std::string&)> data_for;  // dataset key -> bundle
  std::function<void(const std::string&)> log;             // optional progress sink
};

namespace detail {

inline bool cached_run_matches(const KvFile& stored, const TrainConfig& cfg) {
  const KvFile echo = config_echo(cfg);
  for (const auto& [k, v] : echo.entries()) {
    if (stored.get_or("config." + k, "<missing>") != v) return false;
  }
  return true;
}

}  // namespace detail

// Executes every spec, reusing a stored result when the runs dir already holds
// one whose config echo matches exactly; fresh results are persisted back.
// Individual runs are single-threaded and seed-deterministic, so the jobs
// count changes wall time only.
inline std::vector<CompletedRun> run_suite(const std::vector<RunSpec>& specs, const SuiteOptions& opt) {
  require(static_cast<bool>(opt.data_for), "run_suite: no dataset provider");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    for (std::size_t j = i + 1; j < specs.size(); ++j) {
      require(specs[i].label != specs[j].label, cat("run_suite: duplicate run label '", specs[i].label, "'"));
    }
  }
  std::vector<CompletedRun> out(specs.size());
  std::mutex log_mutex;
  const auto say = [&](const std::string& msg) {
    if (!opt.log) return;
    std::lock_guard<std::mutex> lock(log_mutex);
    opt.log(msg);
  };

  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= specs.size()) return;
      const RunSpec& spec = specs[i];
      CompletedRun done;
      done.spec = spec;
      const std::string dir = opt.runs_dir.empty() ? "" : opt.runs_dir + "/" + spec.label;
      bool loaded = false;
      if (!dir.empty() && std::filesystem::exists(dir + "/result.txt")) {
        try {
          StoredRun sr = read_run_result(dir);
          if (detail::cached_run_matches(sr.keys, spec.config)) {
            done.result = sr.result;
            done.from_cache = true;
            loaded = true;
            say(cat("[cached] ", spec.label));
          } else {
            say(cat("[stale]  ", spec.label, " (config changed, re-running)"));
          }
        } catch (const Error& e) {
          say(cat("[stale]  ", spec.label, " (", e.what(), ")"));
        }
      }
      if (!loaded) {
        say(cat("[run]    ", spec.label));
        TrainCallbacks cb;
        cb.on_epoch = [&](const EpochMetrics& em) {
          char buf[160];
          std::snprintf(buf, sizeof(buf), "  %s epoch %d: val %.4f mp %.4f up %.4f loss %.4f (%.0fs)",
                        spec.label.c_str(), em.epoch, em.val_acc, em.test_mp_acc, em.test_up_acc, em.train_loss,
                        em.seconds);
          say(buf);
        };
        DataBundle bundle = opt.data_for(spec.dataset);
        done.result = train(spec.config, bundle, nullptr, cb);
        if (!dir.empty()) write_run_result(spec.config, done.result, dir);
        say(cat(done.result.failed ? "[failed] " : "[done]   ", spec.label));
      }
      out[i] = std::move(done);
    }
  };

  const int jobs = std::max(1, opt.jobs);
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  return out;
}

// ---- aggregation ---------------------------------------------------------------

struct Stat {
  int n = 0;
  double mean = 0.0;
  double stddev = 0.0;  // sample std (n-1); 0 when n < 2
};

inline Stat stat_of(const std::vector<double>& xs) {
  Stat s;
  s.n = static_cast<int>(xs.size());
  if (s.n == 0) return s;
  double acc = 0;
  for (double x : xs) acc += x;
  s.mean = acc / s.n;
  if (s.n > 1) {
    double ss = 0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(ss / (s.n - 1));
  }
  return s;
}

struct AggregateRow {
  std::string group;
  int runs = 0;
  int failed = 0;
  Stat val, test, best_test_val, best_test_acc, test_up;
};

// One row per group, in first-appearance order; failed runs are counted but
// excluded from every statistic.
inline std::vector<AggregateRow> aggregate(const std::vector<CompletedRun>& runs) {
  std::vector<AggregateRow> rows;
  const auto row_for = [&](const std::string& group) -> std::size_t {
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i].group == group) return i;
    }
    rows.push_back(AggregateRow{group});
    return rows.size() - 1;
  };
  struct Acc {
    std::vector<double> val, test, bval, btest, up;
  };
  std::vector<Acc> accs;
  for (const auto& run : runs) {
    const std::size_t ri = row_for(run.spec.group);
    if (accs.size() <= ri) accs.resize(rows.size());
    ++rows[ri].runs;
    if (run.result.failed) {
      ++rows[ri].failed;
      continue;
    }
    Acc& a = accs[ri];
    if (run.result.selected_val >= 0) a.val.push_back(run.result.selected_val);
    if (run.result.selected_test_mp >= 0) a.test.push_back(run.result.selected_test_mp);
    if (run.result.best_test_val >= 0) a.bval.push_back(run.result.best_test_val);
    if (run.result.best_test_acc >= 0) a.btest.push_back(run.result.best_test_acc);
    if (run.result.selected_test_up >= 0) a.up.push_back(run.result.selected_test_up);
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].val = stat_of(accs[i].val);
    rows[i].test = stat_of(accs[i].test);
    rows[i].best_test_val = stat_of(accs[i].bval);
    rows[i].best_test_acc = stat_of(accs[i].btest);
    rows[i].test_up = stat_of(accs[i].up);
  }
  return rows;
}

// ---- report rendering ------------------------------------------------------------

namespace detail {

inline std::string pct(const Stat& s) {
  if (s.n == 0) return "-";
  char buf[64];
  if (s.n > 1) std::snprintf(buf, sizeof(buf), "%.1f (%.1f)", 100.0 * s.mean, 100.0 * s.stddev);
  else std::snprintf(buf, sizeof(buf), "%.1f", 100.0 * s.mean);
  return buf;
}

}  // namespace detail

inline std::string render_report_text(const std::vector<AggregateRow>& rows) {
  const std::vector<std::string> headers = {"Method", "Validation Accuracy", "Test Accuracy", "Best Test - Val Acc",
                                            "Best Test - Test Acc"};
  std::vector<std::vector<std::string>> cells;
  for (const auto& r : rows) {
    std::string name = r.group;
    if (r.failed > 0) name += cat(" [", r.failed, " failed]");
    cells.push_back({name, detail::pct(r.val), detail::pct(r.test), detail::pct(r.best_test_val),
                     detail::pct(r.best_test_acc)});
  }
  std::vector<std::size_t> width(headers.size());
  for (std::size_t c = 0; c < headers.size(); ++c) {
    width[c] = headers[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  std::string out;
  const auto emit_row = [&](const std::vector<std::string>& row) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      out += row[c];
      if (c + 1 < row.size()) out += std::string(width[c] - row[c].size() + 2, ' ');
    }
    out += "\n";
  };
  emit_row(headers);
  std::size_t total = 0;
  for (std::size_t c = 0; c < width.size(); ++c) total += width[c] + (c + 1 < width.size() ? 2 : 0);
  out += std::string(total, '-') + "\n";
  for (const auto& row : cells) emit_row(row);
  return out;
}

inline std::string render_report_csv(const std::vector<AggregateRow>& rows) {
  std::string out =
      "method,runs,failed,val_mean,val_std,test_mean,test_std,best_test_val_mean,best_test_val_std,"
      "best_test_acc_mean,best_test_acc_std,test_up_mean,test_up_std\n";
  const auto num = [](const Stat& s, bool sd) -> std::string {
    if (s.n == 0 || (sd && s.n < 2)) return "";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", sd ? s.stddev : s.mean);
    return buf;
  };
  for (const auto& r : rows) {
    out += r.group + "," + std::to_string(r.runs) + "," + std::to_string(r.failed);
    for (const Stat* s : {&r.val, &r.test, &r.best_test_val, &r.best_test_acc, &r.test_up}) {
      out += "," + num(*s, false) + "," + num(*s, true);
    }
    out += "\n";
  }
  return out;
}

}  // namespace sdg
