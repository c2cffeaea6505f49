#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "sdg/dataset.hpp"
#include "sdg/kv.hpp"
#include "sdg/methods.hpp"
#include "sdg/model.hpp"
#include "sdg/optimizer.hpp"

namespace sdg {

namespace rng_tag {
constexpr std::uint64_t kShuffle = 0x73687566ULL;  // 'shuf'
constexpr std::uint64_t kMethod = 0x6d746864ULL;   // 'mthd'
}  // namespace rng_tag

enum class Method {
  kStandard,
  kDropout,
  kDropoutOrtho,
  kDropoutCov,
  kJigsaw,
  kReconstruction,
  kSpectralDecoupling,
  kRsc,
  kRcl,
};

inline Method method_from_name(const std::string& s) {
  if (s == "standard") return Method::kStandard;
  if (s == "dropout") return Method::kDropout;
  if (s == "dropout-ortho") return Method::kDropoutOrtho;
  if (s == "dropout-cov") return Method::kDropoutCov;
  if (s == "jigsaw") return Method::kJigsaw;
  if (s == "reconstruction") return Method::kReconstruction;
  if (s == "spectral-decoupling") return Method::kSpectralDecoupling;
  if (s == "rsc") return Method::kRsc;
  if (s == "rcl") return Method::kRcl;
  fail(cat("unknown method '", s,
           "' (expected standard|dropout|dropout-ortho|dropout-cov|jigsaw|reconstruction|"
           "spectral-decoupling|rsc|rcl)"));
}

// Weight of the method term in the total loss. For the transform-only
// methods (dropout, rsc) the weight acts as an on/off gate: any nonzero
// value enables the transform, zero reduces the run to standard training.
inline double default_aux_weight(Method m) {
  switch (m) {
    case Method::kStandard: return 0.0;
    case Method::kDropout: return 1.0;
    case Method::kDropoutOrtho: return 1.0;
    case Method::kDropoutCov: return 0.01;
    case Method::kJigsaw: return 10.0;
    case Method::kReconstruction: return 1.0;
    case Method::kSpectralDecoupling: return 5.0;
    case Method::kRsc: return 1.0;
    case Method::kRcl: return 1.0;
  }
  return 0.0;
}

struct TrainConfig {
  std::string method = "standard";
  double margin = kUnconditionalMargin;  // rcl gate; infinity keeps every triplet active
  double aux_weight = -1.0;              // negative -> per-method default
  int epochs = 10;
  int batch_size = 128;
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  std::uint64_t seed = 1;
  std::string selection = "best-val";  // best-val | early-stop
  double early_stop_threshold = 0.95;
  int eval_batch_size = 512;
  bool rcl_per_dim_rescale = false;
  double dropout_rate = -1.0;  // negative -> drawn uniformly per iteration
  double rsc_fraction = -1.0;  // negative -> drawn uniformly per iteration

  double resolved_aux_weight() const {
    return aux_weight < 0 ? default_aux_weight(method_from_name(method)) : aux_weight;
  }

  void validate() const {
    method_from_name(method);
    require(selection == "best-val" || selection == "early-stop",
            cat("unknown selection rule '", selection, "' (expected best-val|early-stop)"));
    require(epochs >= 1, cat("epochs must be >= 1, got ", epochs));
    require(batch_size >= 1, cat("batch size must be >= 1, got ", batch_size));
    require(eval_batch_size >= 1, cat("eval batch size must be >= 1, got ", eval_batch_size));
    require(margin > 0, cat("margin must be positive, got ", margin));
    require(dropout_rate <= 1.0, cat("dropout rate must be <= 1, got ", dropout_rate));
    require(rsc_fraction <= 1.0, cat("rsc fraction must be <= 1, got ", rsc_fraction));
  }
};

struct DataBundle {
  const ColorizedDataset* train = nullptr;
  const ColorizedDataset* val = nullptr;
  const ColorizedDataset* test_mp = nullptr;  // optional
  const ColorizedDataset* test_up = nullptr;  // optional
};

struct EpochMetrics {
  int epoch = 0;  // 1-based
  double val_acc = -1.0;
  double test_mp_acc = -1.0;  // -1 when the split is absent
  double test_up_acc = -1.0;
  double train_loss = 0.0;
  double ce_loss = 0.0;
  double aux_loss = 0.0;
  long skipped_anchors = 0;
  double seconds = 0.0;
};

struct RunResult {
  std::vector<EpochMetrics> epochs;
  int selected_epoch = 0;  // 1-based; 0 when no epoch completed
  double selected_val = -1.0, selected_test_mp = -1.0, selected_test_up = -1.0;
  int best_test_epoch = 0;
  double best_test_val = -1.0, best_test_acc = -1.0;
  bool failed = false;
  int failed_epoch = 0;
  bool early_stopped = false;
  double wall_seconds = 0.0;

  bool operator==(const RunResult& o) const {
    if (epochs.size() != o.epochs.size()) return false;
    for (std::size_t i = 0; i < epochs.size(); ++i) {
      const auto& a = epochs[i];
      const auto& b = o.epochs[i];
      if (a.epoch != b.epoch || a.val_acc != b.val_acc || a.test_mp_acc != b.test_mp_acc ||
          a.test_up_acc != b.test_up_acc || a.train_loss != b.train_loss || a.ce_loss != b.ce_loss ||
          a.aux_loss != b.aux_loss || a.skipped_anchors != b.skipped_anchors) {
        return false;
      }
    }
    return selected_epoch == o.selected_epoch && selected_val == o.selected_val &&
           selected_test_mp == o.selected_test_mp && selected_test_up == o.selected_test_up &&
           best_test_epoch == o.best_test_epoch && best_test_val == o.best_test_val &&
           best_test_acc == o.best_test_acc && failed == o.failed && failed_epoch == o.failed_epoch &&
           early_stopped == o.early_stopped;
  }
};

// Accuracy of argmax predictions over a dataset; `forward_logits` maps an
// image batch to logits. Ties resolve to the lowest class index.
template <class Fwd>
double evaluate_accuracy(const ColorizedDataset& ds, int batch_size, Fwd&& forward_logits) {
  NoTapeScope<float> guard;
  std::int64_t correct = 0;
  for (const auto& idx : batch_indices(ds.count, batch_size, false, nullptr)) {
    Batch b = gather(ds, idx);
    Tensor<float> logits = forward_logits(b.images);
    const int B = logits.dim(0), K = logits.dim(1);
    for (int n = 0; n < B; ++n) {
      const float* row = logits.data() + static_cast<std::int64_t>(n) * K;
      int arg = 0;
      for (int j = 1; j < K; ++j) {
        if (row[j] > row[arg]) arg = j;
      }
      if (arg == b.labels[static_cast<std::size_t>(n)]) ++correct;
    }
  }
  return static_cast<double>(correct) / ds.count;
}

inline double evaluate(const Model<float>& model, const ColorizedDataset& ds, int batch_size = 512) {
  return evaluate_accuracy(ds, batch_size, [&](const Tensor<float>& im) { return model.forward(im).logits; });
}

struct TrainCallbacks {
  std::function<void(const EpochMetrics&)> on_epoch;
};

inline RunResult train(const TrainConfig& cfg, const DataBundle& data, Model<float>* out_model = nullptr,
                       const TrainCallbacks& cb = {}) {
  cfg.validate();
  require(data.train && data.train->count > 0, "train: missing training split");
  require(data.val && data.val->count > 0, "train: missing validation split");
  const Method method = method_from_name(cfg.method);
  const double aux_w = cfg.resolved_aux_weight();
  const bool early_stop_mode = cfg.selection == "early-stop";

  Model<float> model = Model<float>::init(cfg.seed, method == Method::kJigsaw && aux_w != 0.0,
                                          method == Method::kReconstruction && aux_w != 0.0);
  auto named_params = model.parameters();
  std::vector<Tensor<float>*> params;
  for (auto& [name, t] : named_params) params.push_back(t);
  SgdNesterov<float> opt(params, cfg.lr, cfg.momentum, cfg.weight_decay);

  Rng shuffle_rng = Rng::stream(cfg.seed, rng_tag::kShuffle);
  Rng method_rng = Rng::stream(cfg.seed, rng_tag::kMethod);

  const auto wall_start = std::chrono::steady_clock::now();
  RunResult rr;
  std::vector<std::vector<float>> snapshot;
  const auto take_snapshot = [&] {
    snapshot.clear();
    for (auto* p : params) snapshot.push_back(p->values());
  };
  const auto restore_snapshot = [&] {
    if (snapshot.empty()) return;
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->values() = snapshot[i];
  };

  double best_val = -1.0;
  double best_mp = -1.0;

  for (int epoch = 1; epoch <= cfg.epochs && !rr.failed; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    double loss_sum = 0, ce_sum = 0, aux_sum = 0;
    long skipped = 0;
    long steps = 0;

    for (const auto& idx : batch_indices(data.train->count, cfg.batch_size, true, &shuffle_rng)) {
      Batch batch = gather(*data.train, idx);
      Tape<float> tape;
      TapeScope<float> scope(tape);

      // Weight zero disables every method-specific branch (transforms, rng
      // draws, penalties) so the run degenerates to standard training.
      Model<float>::Trace tr;
      Tensor<float> clean_fmap;
      const bool wants_dropout = method == Method::kDropout || method == Method::kDropoutOrtho ||
                                 method == Method::kDropoutCov;
      if (aux_w != 0.0 && wants_dropout) {
        clean_fmap = model.extract_map(batch.images);
        const double rate = cfg.dropout_rate >= 0 ? cfg.dropout_rate : method_rng.uniform();
        tr = model.classify_from_map(channel_dropout(clean_fmap, rate, method_rng));
      } else if (aux_w != 0.0 && method == Method::kRsc) {
        clean_fmap = model.extract_map(batch.images);
        const double f = cfg.rsc_fraction >= 0 ? cfg.rsc_fraction : method_rng.uniform();
        tr = model.classify_from_map(rsc_transform(clean_fmap, batch.labels, model, f));
      } else {
        tr = model.forward(batch.images);
      }

      Tensor<float> ce = softmax_cross_entropy(tr.logits, batch.labels);
      Tensor<float> loss = ce;
      double aux_val = 0;
      if (aux_w != 0.0) {
        Tensor<float> aux;
        bool have_aux = true;
        switch (method) {
          case Method::kDropoutOrtho:
            aux = orthogonality_penalty(model.c2w);
            break;
          case Method::kDropoutCov:
            aux = covariance_penalty(clean_fmap);
            break;
          case Method::kJigsaw: {
            JigsawBatch<float> jig = jigsaw_shuffle(batch.images, method_rng);
            auto trj = model.forward(jig.images);
            aux = softmax_cross_entropy(model.jigsaw_logits(trj.h2), jig.perm_labels);
            break;
          }
          case Method::kReconstruction:
            aux = reconstruction_loss(model.decode(tr.fmap), batch.images);
            break;
          case Method::kSpectralDecoupling:
            aux = spectral_decoupling_penalty(tr.logits);
            break;
          case Method::kRcl: {
            Tensor<float> rescaled = minmax_rescale(tr.features, cfg.rcl_per_dim_rescale);
            MiningResult<float> mined = mine_triplets(rescaled, batch.labels);
            skipped += mined.skipped;
            aux = rcl_loss(rescaled, mined, cfg.margin);
            break;
          }
          default:
            have_aux = false;
            break;
        }
        if (have_aux) {
          aux_val = aux.item();
          loss = add(ce, scale(aux, static_cast<float>(aux_w)));
        }
      }

      const double loss_val = loss.item();
      if (!std::isfinite(loss_val)) {
        rr.failed = true;
        rr.failed_epoch = epoch;
        break;
      }
      loss_sum += loss_val;
      ce_sum += ce.item();
      aux_sum += aux_val;
      ++steps;

      tape.backward(loss);
      opt.step();
      opt.zero_grad();
    }
    if (rr.failed) break;

    EpochMetrics em;
    em.epoch = epoch;
    em.train_loss = loss_sum / steps;
    em.ce_loss = ce_sum / steps;
    em.aux_loss = aux_sum / steps;
    em.skipped_anchors = skipped;
    em.val_acc = evaluate(model, *data.val, cfg.eval_batch_size);
    if (data.test_mp) em.test_mp_acc = evaluate(model, *data.test_mp, cfg.eval_batch_size);
    if (data.test_up) em.test_up_acc = evaluate(model, *data.test_up, cfg.eval_batch_size);
    em.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count();
    rr.epochs.push_back(em);
    if (cb.on_epoch) cb.on_epoch(em);

    if (em.val_acc > best_val) {
      best_val = em.val_acc;
      rr.selected_epoch = epoch;
      rr.selected_val = em.val_acc;
      rr.selected_test_mp = em.test_mp_acc;
      rr.selected_test_up = em.test_up_acc;
      take_snapshot();
    }
    if (data.test_mp && em.test_mp_acc > best_mp) {
      best_mp = em.test_mp_acc;
      rr.best_test_epoch = epoch;
      rr.best_test_val = em.val_acc;
      rr.best_test_acc = em.test_mp_acc;
    }
    if (early_stop_mode && em.val_acc >= cfg.early_stop_threshold) {
      rr.early_stopped = true;
      rr.selected_epoch = epoch;
      rr.selected_val = em.val_acc;
      rr.selected_test_mp = em.test_mp_acc;
      rr.selected_test_up = em.test_up_acc;
      take_snapshot();
      break;
    }
  }

  rr.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  if (out_model) {
    restore_snapshot();
    *out_model = std::move(model);
  }
  return rr;
}

// ---- run persistence -----------------------------------------------------------

inline void write_metrics_csv(const RunResult& rr, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), cat("cannot write ", path));
  out << "epoch,val_acc,test_mp_acc,test_up_acc,train_loss,ce_loss,aux_loss,skipped_anchors,seconds\n";
  out.precision(17);
  for (const auto& e : rr.epochs) {
    out << e.epoch << "," << e.val_acc << "," << e.test_mp_acc << "," << e.test_up_acc << "," << e.train_loss << ","
        << e.ce_loss << "," << e.aux_loss << "," << e.skipped_anchors << "," << e.seconds << "\n";
  }
  require(out.good(), cat("write failed for ", path));
}

inline std::vector<EpochMetrics> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), cat("cannot open ", path));
  std::string line;
  std::getline(in, line);  // header
  std::vector<EpochMetrics> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochMetrics e;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream is(line);
    is >> e.epoch >> e.val_acc >> e.test_mp_acc >> e.test_up_acc >> e.train_loss >> e.ce_loss >> e.aux_loss >>
        e.skipped_anchors >> e.seconds;
    require(!is.fail(), cat(path, ": malformed metrics row '", line, "'"));
    out.push_back(e);
  }
  return out;
}

inline KvFile config_echo(const TrainConfig& cfg) {
  KvFile kv;
  kv.set("method", cfg.method);
  kv.set_num("margin", cfg.margin);
  kv.set_num("aux_weight", cfg.resolved_aux_weight());
  kv.set_num("epochs", cfg.epochs);
  kv.set_num("batch_size", cfg.batch_size);
  kv.set_num("lr", cfg.lr);
  kv.set_num("momentum", cfg.momentum);
  kv.set_num("weight_decay", cfg.weight_decay);
  kv.set_num("seed", cfg.seed);
  kv.set("selection", cfg.selection);
  kv.set_num("early_stop_threshold", cfg.early_stop_threshold);
  kv.set_num("eval_batch_size", cfg.eval_batch_size);
  kv.set_num("rcl_per_dim_rescale", cfg.rcl_per_dim_rescale ? 1 : 0);
  kv.set_num("dropout_rate", cfg.dropout_rate);
  kv.set_num("rsc_fraction", cfg.rsc_fraction);
  return kv;
}

inline void write_run_result(const TrainConfig& cfg, const RunResult& rr, const std::string& dir) {
  std::filesystem::create_directories(dir);
  KvFile kv;
  kv.set("format", "sdg-run-v1");
  const KvFile echo = config_echo(cfg);
  for (const auto& [k, v] : echo.entries()) kv.set("config." + k, v);
  kv.set("status", rr.failed ? "failed" : "ok");
  kv.set_num("failed_epoch", rr.failed_epoch);
  kv.set_num("early_stopped", rr.early_stopped ? 1 : 0);
  kv.set_num("selected_epoch", rr.selected_epoch);
  kv.set_num("selected_val", rr.selected_val);
  kv.set_num("selected_test_mp", rr.selected_test_mp);
  kv.set_num("selected_test_up", rr.selected_test_up);
  kv.set_num("best_test_epoch", rr.best_test_epoch);
  kv.set_num("best_test_val", rr.best_test_val);
  kv.set_num("best_test_acc", rr.best_test_acc);
  kv.set_num("wall_seconds", rr.wall_seconds);
  kv.set_num("epochs_recorded", rr.epochs.size());
  kv.save(dir + "/result.txt");
  write_metrics_csv(rr, dir + "/metrics.csv");
}

struct StoredRun {
  KvFile keys;
  RunResult result;
};

inline StoredRun read_run_result(const std::string& dir) {
  StoredRun sr;
  sr.keys = KvFile::load(dir + "/result.txt");
  require(sr.keys.get("format") == "sdg-run-v1", cat(dir, ": unsupported run format"));
  RunResult& rr = sr.result;
  rr.failed = sr.keys.get("status") == "failed";
  rr.failed_epoch = static_cast<int>(sr.keys.get_int("failed_epoch"));
  rr.early_stopped = sr.keys.get_int("early_stopped") != 0;
  rr.selected_epoch = static_cast<int>(sr.keys.get_int("selected_epoch"));
  rr.selected_val = sr.keys.get_double("selected_val");
  rr.selected_test_mp = sr.keys.get_double("selected_test_mp");
  rr.selected_test_up = sr.keys.get_double("selected_test_up");
  rr.best_test_epoch = static_cast<int>(sr.keys.get_int("best_test_epoch"));
  rr.best_test_val = sr.keys.get_double("best_test_val");
  rr.best_test_acc = sr.keys.get_double("best_test_acc");
  rr.wall_seconds = sr.keys.get_double("wall_seconds");
  rr.epochs = read_metrics_csv(dir + "/metrics.csv");
  require(rr.epochs.size() == static_cast<std::size_t>(sr.keys.get_int("epochs_recorded")),
          cat(dir, ": metrics.csv row count disagrees with result.txt"));
  return sr;
}

// ---- feature dumps --------------------------------------------------------------

// CSV rows: id,label,pred,f0..f6271 (flattened extractor output, eval mode).
inline void dump_features(const Model<float>& model, const ColorizedDataset& ds, std::ostream& out,
                          int batch_size = 512, int limit = 0) {
  NoTapeScope<float> guard;
  out << "id,label,pred";
  for (int j = 0; j < kFeatureDim; ++j) out << ",f" << j;
  out << "\n";
  out.precision(6);
  const int total = limit > 0 ? std::min(limit, ds.count) : ds.count;
  int written = 0;
  for (const auto& idx : batch_indices(total, batch_size, false, nullptr)) {
    Batch b = gather(ds, idx);
    auto tr = model.forward(b.images);
    const int B = tr.logits.dim(0);
    for (int n = 0; n < B && written < total; ++n, ++written) {
      const float* row = tr.logits.data() + static_cast<std::int64_t>(n) * kNumClasses;
      int arg = 0;
      for (int j = 1; j < kNumClasses; ++j) {
        if (row[j] > row[arg]) arg = j;
      }
      out << b.indices[static_cast<std::size_t>(n)] << "," << b.labels[static_cast<std::size_t>(n)] << "," << arg;
      const float* f = tr.features.data() + static_cast<std::int64_t>(n) * kFeatureDim;
      for (int j = 0; j < kFeatureDim; ++j) out << "," << f[j];
      out << "\n";
    }
  }
}

}  // namespace sdg
