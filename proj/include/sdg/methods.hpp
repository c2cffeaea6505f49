#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "sdg/model.hpp"
#include "sdg/ops.hpp"
#include "sdg/rng.hpp"
#include "sdg/tape.hpp"
#include "sdg/tensor.hpp"

namespace sdg {

// ---- triplet mining ----------------------------------------------------------

template <class T>
struct Triplet {
  int anchor, pos, neg;
  T d_ap, d_an;
};

template <class T>
struct MiningResult {
  std::vector<Triplet<T>> triplets;
  int skipped = 0;  // batch elements lacking a same-class or different-class peer
};

// Easy positive, hard negative: for every anchor the nearest same-class and
// nearest different-class rows by L1 distance; ties go to the lowest index.
template <class T>
MiningResult<T> mine_triplets(const Tensor<T>& features, const std::vector<int>& labels) {
  require(features.ndim() == 2, cat("mine_triplets: features must be 2-d, got ", shape_str(features.shape())));
  const int B = features.dim(0);
  require(static_cast<int>(labels.size()) == B, cat("mine_triplets: ", labels.size(), " labels for batch of ", B));
  const Tensor<T> dist = pairwise_l1(features);
  MiningResult<T> out;
  out.triplets.reserve(static_cast<std::size_t>(B));
  for (int a = 0; a < B; ++a) {
    int pos = -1, neg = -1;
    T best_p = std::numeric_limits<T>::max(), best_n = std::numeric_limits<T>::max();
    const T* row = dist.data() + static_cast<std::int64_t>(a) * B;
    for (int j = 0; j < B; ++j) {
      if (j == a) continue;
      if (labels[static_cast<std::size_t>(j)] == labels[static_cast<std::size_t>(a)]) {
        if (row[j] < best_p) { best_p = row[j]; pos = j; }
      } else {
        if (row[j] < best_n) { best_n = row[j]; neg = j; }
      }
    }
    if (pos < 0 || neg < 0) {
      ++out.skipped;
      continue;
    }
    out.triplets.push_back({a, pos, neg, best_p, best_n});
  }
  return out;
}

// ---- reverse contrastive loss --------------------------------------------------

constexpr double kUnconditionalMargin = std::numeric_limits<double>::infinity();

// A triplet contributes -d(anchor, positive) while d_ap < margin * d_an and 0
// once the gate closes; an infinite margin keeps every triplet active.
template <class T>
bool rcl_gate_open(T d_ap, T d_an, double margin) {
  if (std::isinf(margin)) return true;
  return static_cast<double>(d_ap) < margin * static_cast<double>(d_an);
}

template <class T>
std::vector<T> rcl_contributions(const MiningResult<T>& mined, double margin) {
  std::vector<T> out(mined.triplets.size(), T(0));
  for (std::size_t i = 0; i < mined.triplets.size(); ++i) {
    const auto& t = mined.triplets[i];
    if (rcl_gate_open(t.d_ap, t.d_an, margin)) out[i] = -t.d_ap;
  }
  return out;
}

// Mean gated contribution over the mined triplets. Positives and negatives are
// treated as constants: gradient reaches the anchor rows only.
template <class T>
Tensor<T> rcl_loss(const Tensor<T>& features, const MiningResult<T>& mined, double margin) {
  require(features.ndim() == 2, cat("rcl_loss: features must be 2-d, got ", shape_str(features.shape())));
  if (mined.triplets.empty()) return Tensor<T>::from({1}, {T(0)});
  const auto contrib = rcl_contributions(mined, margin);
  const T value = std::accumulate(contrib.begin(), contrib.end(), T(0)) / static_cast<T>(contrib.size());
  Tensor<T> out = Tensor<T>::from({1}, {value});
  if (Tape<T>::active() && features.requires_grad()) {
    features.storage()->ensure_grad();
    out.set_requires_grad(true);
    std::vector<std::pair<int, int>> active;  // (anchor, positive) of open gates
    for (const auto& t : mined.triplets) {
      if (rcl_gate_open(t.d_ap, t.d_an, margin)) active.emplace_back(t.anchor, t.pos);
    }
    const std::int64_t N = features.dim(1);
    const T inv = T(1) / static_cast<T>(mined.triplets.size());
    Tape<T>::active()->record([fs = features.storage(), os = out.storage(), active, N, inv] {
      const T g = os->grad[0] * inv;
      for (const auto& [a, p] : active) {
        const T* xa = fs->data.data() + static_cast<std::int64_t>(a) * N;
        const T* xp = fs->data.data() + static_cast<std::int64_t>(p) * N;
        T* da = fs->grad.data() + static_cast<std::int64_t>(a) * N;
        for (std::int64_t j = 0; j < N; ++j) {
          if (xa[j] > xp[j]) da[j] -= g;
          else if (xa[j] < xp[j]) da[j] += g;
        }
      }
    });
  }
  return out;
}

// ---- logit and weight regularizers ---------------------------------------------

// Mean squared logit norm over the batch.
template <class T>
Tensor<T> spectral_decoupling_penalty(const Tensor<T>& logits) {
  require(logits.ndim() == 2, cat("spectral_decoupling: logits must be 2-d, got ", shape_str(logits.shape())));
  const int B = logits.dim(0);
  T acc = 0;
  for (std::int64_t i = 0; i < logits.numel(); ++i) acc += logits.data()[i] * logits.data()[i];
  Tensor<T> out = Tensor<T>::from({1}, {acc / static_cast<T>(B)});
  if (Tape<T>::active() && logits.requires_grad()) {
    logits.storage()->ensure_grad();
    out.set_requires_grad(true);
    Tape<T>::active()->record([ls = logits.storage(), os = out.storage(), B] {
      const T g = os->grad[0] * T(2) / static_cast<T>(B);
      for (std::size_t i = 0; i < ls->grad.size(); ++i) ls->grad[i] += g * ls->data[i];
    });
  }
  return out;
}

// ||W W^T - I||_F^2 + ||W^T W - I||_F^2 for W reshaped to (rows, numel/rows).
// Both Gram residuals share the spectrum up to |rows - cols| unit eigenvalues,
// so the value reduces to 2*||G - I||^2 + |rows - cols| with G the smaller
// Gram matrix, and the gradient of both terms coincides at 4*(W W^T - I)*W.
template <class T>
Tensor<T> orthogonality_penalty(const Tensor<T>& w) {
  require(w.ndim() >= 2, cat("orthogonality_penalty: weight must have >= 2 dims, got ", shape_str(w.shape())));
  const int M = w.dim(0);
  const std::int64_t K = w.numel() / M;
  const bool rows_small = M <= K;
  const std::int64_t S = rows_small ? M : K;  // Gram side
  MapCM<T> W(w.data(), M, K);
  MatRM<T> A(S, S);
  if (rows_small) A.noalias() = W * W.transpose();
  else A.noalias() = W.transpose() * W;
  for (std::int64_t i = 0; i < S; ++i) A(i, i) -= T(1);
  const T value = T(2) * A.squaredNorm() + static_cast<T>(std::llabs(K - M));
  Tensor<T> out = Tensor<T>::from({1}, {value});
  if (Tape<T>::active() && w.requires_grad()) {
    w.storage()->ensure_grad();
    out.set_requires_grad(true);
    auto residual = std::make_shared<MatRM<T>>(std::move(A));
    Tape<T>::active()->record([ws = w.storage(), os = out.storage(), residual, M, K, rows_small] {
      const T g = os->grad[0] * T(8);
      MapCM<T> W(ws->data.data(), M, K);
      MapM<T> dW(ws->grad.data(), M, K);
      if (rows_small) dW.noalias() += g * (*residual) * W;
      else dW.noalias() += g * W * (*residual);
    });
  }
  return out;
}

// Sum of squared off-diagonal entries of the sample covariance of spatially
// averaged channel activations.
template <class T>
Tensor<T> covariance_penalty(const Tensor<T>& fmap) {
  require(fmap.ndim() == 4, cat("covariance_penalty: feature map must be 4-d, got ", shape_str(fmap.shape())));
  const int B = fmap.dim(0), C = fmap.dim(1);
  const std::int64_t S = static_cast<std::int64_t>(fmap.dim(2)) * fmap.dim(3);
  require(B >= 2, cat("covariance_penalty: needs at least 2 samples, got ", B));

  MatRM<T> A(B, C);
  for (int b = 0; b < B; ++b) {
    for (int c = 0; c < C; ++c) {
      const T* plane = fmap.data() + (static_cast<std::int64_t>(b) * C + c) * S;
      T acc = 0;
      for (std::int64_t i = 0; i < S; ++i) acc += plane[i];
      A(b, c) = acc / static_cast<T>(S);
    }
  }
  Eigen::Matrix<T, 1, Eigen::Dynamic> mu = A.colwise().mean();
  MatRM<T> centered = A.rowwise() - mu;
  MatRM<T> cov = (centered.transpose() * centered) / static_cast<T>(B - 1);
  MatRM<T> off = cov;
  off.diagonal().setZero();
  const T value = off.squaredNorm();
  Tensor<T> out = Tensor<T>::from({1}, {value});
  if (Tape<T>::active() && fmap.requires_grad()) {
    fmap.storage()->ensure_grad();
    out.set_requires_grad(true);
    auto cent = std::make_shared<MatRM<T>>(std::move(centered));
    auto offd = std::make_shared<MatRM<T>>(std::move(off));
    Tape<T>::active()->record([fs = fmap.storage(), os = out.storage(), cent, offd, B, C, S] {
      const T g = os->grad[0];
      // dP/dA = 4/(B-1) * centered * offdiag(cov), then re-center.
      MatRM<T> dA = (T(4) / static_cast<T>(B - 1)) * (*cent) * (*offd);
      Eigen::Matrix<T, 1, Eigen::Dynamic> colmean = dA.colwise().mean();
      dA.rowwise() -= colmean;
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const T d = g * dA(b, c) / static_cast<T>(S);
          T* plane = fs->grad.data() + (static_cast<std::int64_t>(b) * C + c) * S;
          for (std::int64_t i = 0; i < S; ++i) plane[i] += d;
        }
      }
    });
  }
  return out;
}

// ---- representation self-challenging -------------------------------------------

// Scores each (sample, channel) by the spatial mean of d(true-class logit)/
// d(feature map), computed in a side pass that leaves the classifier weights'
// gradients untouched, then zeroes the top ceil(drop_fraction*C) channels per
// sample and rescales survivors by 1/(1-drop_fraction).
template <class T>
Tensor<T> rsc_transform(const Tensor<T>& fmap, const std::vector<int>& labels, const Model<T>& model,
                        double drop_fraction) {
  require(drop_fraction >= 0.0 && drop_fraction <= 1.0,
          cat("rsc_transform: drop fraction ", drop_fraction, " outside [0,1]"));
  const int B = fmap.dim(0), C = fmap.dim(1);
  const int k = static_cast<int>(std::ceil(drop_fraction * C));
  if (k == 0) return fmap;

  std::vector<T> scores(static_cast<std::size_t>(B) * C);
  {
    // Probe pass on a private tape; classifier weights are temporarily
    // untracked so the probe deposits gradient only on the leaf copy.
    std::array<std::shared_ptr<Storage<T>>, 6> frozen = {model.f1w.storage(), model.f1b.storage(),
                                                         model.f2w.storage(), model.f2b.storage(),
                                                         model.f3w.storage(), model.f3b.storage()};
    std::array<bool, 6> saved{};
    for (std::size_t i = 0; i < frozen.size(); ++i) {
      saved[i] = frozen[i]->requires_grad;
      frozen[i]->requires_grad = false;
    }
    Tape<T> probe;
    {
      TapeScope<T> scope(probe);
      Tensor<T> leaf = fmap.detach();
      leaf.set_requires_grad(true);
      auto trace = model.classify_from_map(leaf);
      auto target = pick_sum(trace.logits, labels);
      probe.backward(target);
      const std::int64_t S = static_cast<std::int64_t>(fmap.dim(2)) * fmap.dim(3);
      for (int b = 0; b < B; ++b) {
        for (int c = 0; c < C; ++c) {
          const T* plane = leaf.grad() + (static_cast<std::int64_t>(b) * C + c) * S;
          T acc = 0;
          for (std::int64_t i = 0; i < S; ++i) acc += plane[i];
          scores[static_cast<std::size_t>(b) * C + c] = acc / static_cast<T>(S);
        }
      }
    }
    for (std::size_t i = 0; i < frozen.size(); ++i) frozen[i]->requires_grad = saved[i];
  }

  const T keep_scale = drop_fraction < 1.0 ? static_cast<T>(1.0 / (1.0 - drop_fraction)) : T(0);
  std::vector<T> coeff(static_cast<std::size_t>(B) * C, keep_scale);
  std::vector<int> order(static_cast<std::size_t>(C));
  for (int b = 0; b < B; ++b) {
    const T* s = scores.data() + static_cast<std::size_t>(b) * C;
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) { return s[i] > s[j]; });
    for (int i = 0; i < k; ++i) coeff[static_cast<std::size_t>(b) * C + static_cast<std::size_t>(order[i])] = T(0);
  }
  return scale_channels(fmap, coeff);
}

// ---- jigsaw --------------------------------------------------------------------

// The 24 permutations of the four 14x14 quadrants, lexicographic; index 0 is
// the identity.
inline const std::array<std::array<int, 4>, 24>& jigsaw_permutations() {
  static const auto table = [] {
    std::array<std::array<int, 4>, 24> t{};
    std::array<int, 4> p{0, 1, 2, 3};
    for (auto& row : t) {
      row = p;
      std::next_permutation(p.begin(), p.end());
    }
    return t;
  }();
  return table;
}

template <class T>
struct JigsawBatch {
  Tensor<T> images;  // tiles rearranged; values only, not tracked
  std::vector<int> perm_labels;
};

// Output quadrant i receives input quadrant perm[i].
template <class T>
Tensor<T> apply_jigsaw(const Tensor<T>& image_batch, const std::vector<int>& perm_ids) {
  require(image_batch.ndim() == 4, cat("apply_jigsaw: input must be 4-d, got ", shape_str(image_batch.shape())));
  const int B = image_batch.dim(0), C = image_batch.dim(1), H = image_batch.dim(2), W = image_batch.dim(3);
  require(H % 2 == 0 && W % 2 == 0, cat("apply_jigsaw: input ", shape_str(image_batch.shape()), " not splittable"));
  require(static_cast<int>(perm_ids.size()) == B, "apply_jigsaw: one permutation id per sample required");
  const int th = H / 2, tw = W / 2;
  const auto& perms = jigsaw_permutations();
  Tensor<T> out(image_batch.shape());
  for (int b = 0; b < B; ++b) {
    const int pid = perm_ids[static_cast<std::size_t>(b)];
    require(pid >= 0 && pid < kNumPermutations, cat("apply_jigsaw: permutation id ", pid, " out of range"));
    const auto& perm = perms[static_cast<std::size_t>(pid)];
    for (int c = 0; c < C; ++c) {
      const T* src = image_batch.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
      T* dst = out.data() + (static_cast<std::int64_t>(b) * C + c) * H * W;
      for (int t = 0; t < 4; ++t) {
        const int sr = (perm[static_cast<std::size_t>(t)] / 2) * th, sc = (perm[static_cast<std::size_t>(t)] % 2) * tw;
        const int dr = (t / 2) * th, dc = (t % 2) * tw;
        for (int r = 0; r < th; ++r) {
          std::copy(src + (sr + r) * W + sc, src + (sr + r) * W + sc + tw, dst + (dr + r) * W + dc);
        }
      }
    }
  }
  return out;
}

template <class T>
JigsawBatch<T> jigsaw_shuffle(const Tensor<T>& image_batch, Rng& rng) {
  const int B = image_batch.dim(0);
  JigsawBatch<T> out;
  out.perm_labels.resize(static_cast<std::size_t>(B));
  for (auto& p : out.perm_labels) p = static_cast<int>(rng.below(kNumPermutations));
  out.images = apply_jigsaw(image_batch, out.perm_labels);
  return out;
}

// ---- reconstruction -------------------------------------------------------------

// MSE between the decoder output and the input rescaled onto [-1,1].
template <class T>
Tensor<T> reconstruction_loss(const Tensor<T>& decoded, const Tensor<T>& images) {
  require(decoded.shape() == images.shape(), cat("reconstruction_loss: decoded ", shape_str(decoded.shape()),
                                                 " vs images ", shape_str(images.shape())));
  std::vector<T> target(static_cast<std::size_t>(images.numel()));
  for (std::int64_t i = 0; i < images.numel(); ++i) target[static_cast<std::size_t>(i)] = T(2) * images.data()[i] - T(1);
  return mse_to(decoded, target);
}

}  // namespace sdg
