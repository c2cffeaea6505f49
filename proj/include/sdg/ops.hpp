#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "sdg/rng.hpp"
#include "sdg/tape.hpp"
#include "sdg/tensor.hpp"

namespace sdg {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using MapCM = Eigen::Map<const MatRM<T>>;

namespace detail {

// Lowers (C,H,W) patches to a (C*k*k, Ho*Wo) matrix; (Ho,Wo) is the position
// grid of the corresponding stride-`stride` convolution.
template <class T>
void im2col(const T* x, int C, int H, int W, int k, int pad, int stride, int Ho, int Wo, T* col) {
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        T* row = col + ((static_cast<std::int64_t>(c) * k + kh) * k + kw) * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride + kh - pad;
          T* dst = row + static_cast<std::int64_t>(oh) * Wo;
          if (ih < 0 || ih >= H) {
            std::fill(dst, dst + Wo, T(0));
            continue;
          }
          const T* src = x + (static_cast<std::int64_t>(c) * H + ih) * W;
          if (stride == 1) {
            const int lo = std::min(Wo, std::max(0, pad - kw));
            const int hi = std::max(lo, std::min(Wo, W + pad - kw));
            std::fill(dst, dst + lo, T(0));
            std::copy(src + lo + kw - pad, src + hi + kw - pad, dst + lo);
            std::fill(dst + hi, dst + Wo, T(0));
          } else {
            for (int ow = 0; ow < Wo; ++ow) {
              const int iw = ow * stride + kw - pad;
              dst[ow] = (iw >= 0 && iw < W) ? src[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds the column matrix back onto the image.
template <class T>
void col2im_add(const T* col, int C, int H, int W, int k, int pad, int stride, int Ho, int Wo, T* x) {
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  for (int c = 0; c < C; ++c) {
    for (int kh = 0; kh < k; ++kh) {
      for (int kw = 0; kw < k; ++kw) {
        const T* row = col + ((static_cast<std::int64_t>(c) * k + kh) * k + kw) * P;
        for (int oh = 0; oh < Ho; ++oh) {
          const int ih = oh * stride + kh - pad;
          if (ih < 0 || ih >= H) continue;
          T* dst = x + (static_cast<std::int64_t>(c) * H + ih) * W;
          const T* src = row + static_cast<std::int64_t>(oh) * Wo;
          for (int ow = 0; ow < Wo; ++ow) {
            const int iw = ow * stride + kw - pad;
            if (iw >= 0 && iw < W) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

template <class T>
bool taping() {
  return Tape<T>::active() != nullptr;
}

template <class T>
void ensure_input_grad(const Tensor<T>& t) {
  if (t.requires_grad()) t.storage()->ensure_grad();
}

}  // namespace detail

// ---- elementwise and reduction glue ----------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), cat("add: shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (detail::taping<T>() && (a.requires_grad() || b.requires_grad())) {
    detail::ensure_input_grad(a);
    detail::ensure_input_grad(b);
    out.set_requires_grad(true);
    const bool ga = a.requires_grad(), gb = b.requires_grad();
    Tape<T>::active()->record([as = a.storage(), bs = b.storage(), os = out.storage(), ga, gb] {
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        if (ga) as->grad[i] += os->grad[i];
        if (gb) bs->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::int64_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
  if (detail::taping<T>() && a.requires_grad()) {
    detail::ensure_input_grad(a);
    out.set_requires_grad(true);
    Tape<T>::active()->record([as = a.storage(), os = out.storage(), s] {
      for (std::size_t i = 0; i < os->grad.size(); ++i) as->grad[i] += s * os->grad[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  Tensor<T> out = Tensor<T>::from({1}, {acc});
  if (detail::taping<T>() && a.requires_grad()) {
    detail::ensure_input_grad(a);
    out.set_requires_grad(true);
    Tape<T>::active()->record([as = a.storage(), os = out.storage()] {
      const T g = os->grad[0];
      for (auto& v : as->grad) v += g;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

// Dot product against fixed coefficients; handy for injecting cotangents.
template <class T>
Tensor<T> weighted_sum(const Tensor<T>& a, const std::vector<T>& coeff) {
  require(static_cast<std::size_t>(a.numel()) == coeff.size(),
          cat("weighted_sum: tensor ", shape_str(a.shape()), " vs ", coeff.size(), " coefficients"));
  T acc = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * coeff[static_cast<std::size_t>(i)];
  Tensor<T> out = Tensor<T>::from({1}, {acc});
  if (detail::taping<T>() && a.requires_grad()) {
    detail::ensure_input_grad(a);
    out.set_requires_grad(true);
    auto co = std::make_shared<std::vector<T>>(coeff);
    Tape<T>::active()->record([as = a.storage(), os = out.storage(), co] {
      const T g = os->grad[0];
      for (std::size_t i = 0; i < as->grad.size(); ++i) as->grad[i] += g * (*co)[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = x.data()[i] > T(0) ? x.data()[i] : T(0);
  if (detail::taping<T>() && x.requires_grad()) {
    detail::ensure_input_grad(x);
    out.set_requires_grad(true);
    Tape<T>::active()->record([xs = x.storage(), os = out.storage()] {
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        if (xs->data[i] > T(0)) xs->grad[i] += os->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) out.data()[i] = std::tanh(x.data()[i]);
  if (detail::taping<T>() && x.requires_grad()) {
    detail::ensure_input_grad(x);
    out.set_requires_grad(true);
    Tape<T>::active()->record([xs = x.storage(), os = out.storage()] {
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        const T y = os->data[i];
        xs->grad[i] += (T(1) - y * y) * os->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> detach(const Tensor<T>& x) {
  return x.detach();
}

// ---- dense layers -----------------------------------------------------------

// x: (B,N), weight: (M,N), bias: (M) -> (B,M)
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.ndim() == 2, cat("linear: input must be 2-d, got ", shape_str(x.shape())));
  require(w.ndim() == 2, cat("linear: weight must be 2-d, got ", shape_str(w.shape())));
  const int B = x.dim(0), N = x.dim(1), M = w.dim(0);
  require(w.dim(1) == N,
          cat("linear: input features ", shape_str(x.shape()), " incompatible with weight ", shape_str(w.shape())));
  require(b.numel() == M, cat("linear: bias ", shape_str(b.shape()), " must have ", M, " entries"));

  Tensor<T> out({B, M});
  {
    MapCM<T> X(x.data(), B, N), W(w.data(), M, N);
    MapM<T> Y(out.data(), B, M);
    Y.noalias() = X * W.transpose();
    Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bias(b.data(), M);
    Y.rowwise() += bias;
  }
  const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b.requires_grad();
  if (detail::taping<T>() && (gx || gw || gb)) {
    detail::ensure_input_grad(x);
    detail::ensure_input_grad(w);
    detail::ensure_input_grad(b);
    out.set_requires_grad(true);
    Tape<T>::active()->record(
        [xs = x.storage(), ws = w.storage(), bs = b.storage(), os = out.storage(), B, N, M, gx, gw, gb] {
          MapCM<T> dY(os->grad.data(), B, M);
          if (gx) {
            MapCM<T> W(ws->data.data(), M, N);
            MapM<T> dX(xs->grad.data(), B, N);
            dX.noalias() += dY * W;
          }
          if (gw) {
            MapCM<T> X(xs->data.data(), B, N);
            MapM<T> dW(ws->grad.data(), M, N);
            dW.noalias() += dY.transpose() * X;
          }
          if (gb) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db(bs->grad.data(), M);
            db += dY.colwise().sum();
          }
        });
  }
  return out;
}

// x: (B,Cin,H,W), weight: (Cout,Cin,k,k), bias: (Cout); stride 1.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int pad) {
  require(x.ndim() == 4, cat("conv2d: input must be 4-d, got ", shape_str(x.shape())));
  require(w.ndim() == 4, cat("conv2d: weight must be 4-d, got ", shape_str(w.shape())));
  require(pad >= 0, "conv2d: negative padding");
  const int B = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), k = w.dim(2);
  require(w.dim(1) == Cin,
          cat("conv2d: input channels ", shape_str(x.shape()), " incompatible with weight ", shape_str(w.shape())));
  require(w.dim(3) == k, cat("conv2d: kernel must be square, got ", shape_str(w.shape())));
  require(b.numel() == Cout, cat("conv2d: bias ", shape_str(b.shape()), " must have ", Cout, " entries"));
  const int Ho = H + 2 * pad - k + 1, Wo = W + 2 * pad - k + 1;
  require(Ho > 0 && Wo > 0, cat("conv2d: kernel ", k, " exceeds padded input ", shape_str(x.shape())));

  const std::int64_t K = static_cast<std::int64_t>(Cin) * k * k;
  const std::int64_t P = static_cast<std::int64_t>(Ho) * Wo;
  Tensor<T> out({B, Cout, Ho, Wo});
  {
    std::vector<T> col(static_cast<std::size_t>(K * P));
    MapCM<T> Wm(w.data(), Cout, K);
    for (int n = 0; n < B; ++n) {
      detail::im2col(x.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, k, pad, 1, Ho, Wo, col.data());
      MapCM<T> C(col.data(), K, P);
      MapM<T> Y(out.data() + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
      Y.noalias() = Wm * C;
      for (int co = 0; co < Cout; ++co) Y.row(co).array() += b.data()[co];
    }
  }
  const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b.requires_grad();
  if (detail::taping<T>() && (gx || gw || gb)) {
    detail::ensure_input_grad(x);
    detail::ensure_input_grad(w);
    detail::ensure_input_grad(b);
    out.set_requires_grad(true);
    Tape<T>::active()->record([xs = x.storage(), ws = w.storage(), bs = b.storage(), os = out.storage(), B, Cin, H, W,
                               Cout, k, pad, Ho, Wo, K, P, gx, gw, gb] {
      std::vector<T> col(static_cast<std::size_t>(K * P));
      for (int n = 0; n < B; ++n) {
        MapCM<T> dY(os->grad.data() + static_cast<std::int64_t>(n) * Cout * P, Cout, P);
        if (gw) {
          detail::im2col(xs->data.data() + static_cast<std::int64_t>(n) * Cin * H * W, Cin, H, W, k, pad, 1, Ho, Wo,
                         col.data());
          MapCM<T> C(col.data(), K, P);
          MapM<T> dW(ws->grad.data(), Cout, K);
          dW.noalias() += dY * C.transpose();
        }
        if (gb) {
          for (int co = 0; co < Cout; ++co) bs->grad[static_cast<std::size_t>(co)] += dY.row(co).sum();
        }
        if (gx) {
          MapCM<T> Wm(ws->data.data(), Cout, K);
          MapM<T> dC(col.data(), K, P);
          dC.noalias() = Wm.transpose() * dY;
          detail::col2im_add(col.data(), Cin, H, W, k, pad, 1, Ho, Wo,
                             xs->grad.data() + static_cast<std::int64_t>(n) * Cin * H * W);
        }
      }
    });
  }
  return out;
}

// Non-overlapping k x k max pooling; ties resolve to the first (row-major) element.
template <class T>
Tensor<T> maxpool2d(const Tensor<T>& x, int k = 2) {
  require(x.ndim() == 4, cat("maxpool2d: input must be 4-d, got ", shape_str(x.shape())));
  require(k >= 1, "maxpool2d: window must be positive");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % k == 0 && W % k == 0,
          cat("maxpool2d: input ", shape_str(x.shape()), " not divisible by window ", k));
  const int Ho = H / k, Wo = W / k;
  Tensor<T> out({B, C, Ho, Wo});
  auto arg = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(out.numel()));
  std::int64_t o = 0;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* plane = x.data() + (static_cast<std::int64_t>(n) * C + c) * H * W;
      const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * H * W;
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow, ++o) {
          T best = plane[(oh * k) * W + ow * k];
          std::int64_t best_i = (oh * k) * W + ow * k;
          for (int dh = 0; dh < k; ++dh) {
            for (int dw = 0; dw < k; ++dw) {
              const std::int64_t i = (oh * k + dh) * W + (ow * k + dw);
              if (plane[i] > best) {
                best = plane[i];
                best_i = i;
              }
            }
          }
          out.data()[o] = best;
          (*arg)[static_cast<std::size_t>(o)] = base + best_i;
        }
      }
    }
  }
  if (detail::taping<T>() && x.requires_grad()) {
    detail::ensure_input_grad(x);
    out.set_requires_grad(true);
    Tape<T>::active()->record([xs = x.storage(), os = out.storage(), arg] {
      for (std::size_t i = 0; i < os->grad.size(); ++i) xs->grad[static_cast<std::size_t>((*arg)[i])] += os->grad[i];
    });
  }
  return out;
}

// x: (B,Cin,h,w), weight: (Cin,Cout,k,k), bias: (Cout).
// Output spatial size: (h-1)*stride + k - 2*pad. Adjoint of conv2d: a
// transposed convolution with the same weight inverts conv2d's input gradient.
template <class T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
  require(x.ndim() == 4, cat("transposed_conv2d: input must be 4-d, got ", shape_str(x.shape())));
  require(w.ndim() == 4, cat("transposed_conv2d: weight must be 4-d, got ", shape_str(w.shape())));
  require(stride >= 1 && pad >= 0, "transposed_conv2d: bad stride/pad");
  const int B = x.dim(0), Cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int Cout = w.dim(1), k = w.dim(2);
  require(w.dim(0) == Cin, cat("transposed_conv2d: input channels ", shape_str(x.shape()),
                               " incompatible with weight ", shape_str(w.shape())));
  require(w.dim(3) == k, cat("transposed_conv2d: kernel must be square, got ", shape_str(w.shape())));
  require(b.numel() == Cout, cat("transposed_conv2d: bias ", shape_str(b.shape()), " must have ", Cout, " entries"));
  const int Ho = (h - 1) * stride + k - 2 * pad;
  const int Wo = (wd - 1) * stride + k - 2 * pad;
  require(Ho > 0 && Wo > 0, cat("transposed_conv2d: empty output for input ", shape_str(x.shape())));

  const std::int64_t K2 = static_cast<std::int64_t>(Cout) * k * k;
  const std::int64_t Pin = static_cast<std::int64_t>(h) * wd;
  Tensor<T> out({B, Cout, Ho, Wo});
  {
    std::vector<T> col(static_cast<std::size_t>(K2 * Pin));
    MapCM<T> Wm(w.data(), Cin, K2);
    for (int n = 0; n < B; ++n) {
      MapCM<T> X(x.data() + static_cast<std::int64_t>(n) * Cin * Pin, Cin, Pin);
      MapM<T> C(col.data(), K2, Pin);
      C.noalias() = Wm.transpose() * X;
      T* y = out.data() + static_cast<std::int64_t>(n) * Cout * Ho * Wo;
      detail::col2im_add(col.data(), Cout, Ho, Wo, k, pad, stride, h, wd, y);
      for (int co = 0; co < Cout; ++co) {
        T* plane = y + static_cast<std::int64_t>(co) * Ho * Wo;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) plane[i] += b.data()[co];
      }
    }
  }
  const bool gx = x.requires_grad(), gw = w.requires_grad(), gb = b.requires_grad();
  if (detail::taping<T>() && (gx || gw || gb)) {
    detail::ensure_input_grad(x);
    detail::ensure_input_grad(w);
    detail::ensure_input_grad(b);
    out.set_requires_grad(true);
    Tape<T>::active()->record([xs = x.storage(), ws = w.storage(), bs = b.storage(), os = out.storage(), B, Cin, h, wd,
                               Cout, k, stride, pad, Ho, Wo, K2, Pin, gx, gw, gb] {
      std::vector<T> dcol(static_cast<std::size_t>(K2 * Pin));
      for (int n = 0; n < B; ++n) {
        const T* dy = os->grad.data() + static_cast<std::int64_t>(n) * Cout * Ho * Wo;
        detail::im2col(dy, Cout, Ho, Wo, k, pad, stride, h, wd, dcol.data());
        MapCM<T> dC(dcol.data(), K2, Pin);
        if (gx) {
          MapCM<T> Wm(ws->data.data(), Cin, K2);
          MapM<T> dX(xs->grad.data() + static_cast<std::int64_t>(n) * Cin * Pin, Cin, Pin);
          dX.noalias() += Wm * dC;
        }
        if (gw) {
          MapCM<T> X(xs->data.data() + static_cast<std::int64_t>(n) * Cin * Pin, Cin, Pin);
          MapM<T> dW(ws->grad.data(), Cin, K2);
          dW.noalias() += X * dC.transpose();
        }
        if (gb) {
          for (int co = 0; co < Cout; ++co) {
            const T* plane = dy + static_cast<std::int64_t>(co) * Ho * Wo;
            T acc = 0;
            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i) acc += plane[i];
            bs->grad[static_cast<std::size_t>(co)] += acc;
          }
        }
      }
    });
  }
  return out;
}

// ---- losses and feature transforms ------------------------------------------

// logits: (B,K); returns the mean cross-entropy over the batch as a scalar.
template <class T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, cat("softmax_cross_entropy: logits must be 2-d, got ", shape_str(logits.shape())));
  const int B = logits.dim(0), K = logits.dim(1);
  require(static_cast<int>(labels.size()) == B,
          cat("softmax_cross_entropy: ", labels.size(), " labels for batch of ", B));
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(logits.numel()));
  T loss = 0;
  for (int n = 0; n < B; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    require(y >= 0 && y < K, cat("softmax_cross_entropy: label ", y, " out of range [0,", K, ")"));
    const T* row = logits.data() + static_cast<std::int64_t>(n) * K;
    T m = row[0];
    for (int j = 1; j < K; ++j) m = std::max(m, row[j]);
    T z = 0;
    for (int j = 0; j < K; ++j) z += std::exp(row[j] - m);
    const T lse = m + std::log(z);
    loss += lse - row[y];
    T* p = probs->data() + static_cast<std::int64_t>(n) * K;
    for (int j = 0; j < K; ++j) p[j] = std::exp(row[j] - lse);
  }
  Tensor<T> out = Tensor<T>::from({1}, {loss / static_cast<T>(B)});
  if (detail::taping<T>() && logits.requires_grad()) {
    detail::ensure_input_grad(logits);
    out.set_requires_grad(true);
    Tape<T>::active()->record([ls = logits.storage(), os = out.storage(), probs, labels, B, K] {
      const T g = os->grad[0] / static_cast<T>(B);
      for (int n = 0; n < B; ++n) {
        T* dl = ls->grad.data() + static_cast<std::int64_t>(n) * K;
        const T* p = probs->data() + static_cast<std::int64_t>(n) * K;
        for (int j = 0; j < K; ++j) dl[j] += g * p[j];
        dl[labels[static_cast<std::size_t>(n)]] -= g;
      }
    });
  }
  return out;
}

// Sum of logits[n, labels[n]]; used to probe class-evidence gradients.
template <class T>
Tensor<T> pick_sum(const Tensor<T>& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2, cat("pick_sum: logits must be 2-d, got ", shape_str(logits.shape())));
  const int B = logits.dim(0), K = logits.dim(1);
  require(static_cast<int>(labels.size()) == B, cat("pick_sum: ", labels.size(), " labels for batch of ", B));
  T acc = 0;
  for (int n = 0; n < B; ++n) {
    const int y = labels[static_cast<std::size_t>(n)];
    require(y >= 0 && y < K, cat("pick_sum: label ", y, " out of range [0,", K, ")"));
    acc += logits.data()[static_cast<std::int64_t>(n) * K + y];
  }
  Tensor<T> out = Tensor<T>::from({1}, {acc});
  if (detail::taping<T>() && logits.requires_grad()) {
    detail::ensure_input_grad(logits);
    out.set_requires_grad(true);
    Tape<T>::active()->record([ls = logits.storage(), os = out.storage(), labels, K] {
      const T g = os->grad[0];
      for (std::size_t n = 0; n < labels.size(); ++n) {
        ls->grad[n * static_cast<std::size_t>(K) + static_cast<std::size_t>(labels[n])] += g;
      }
    });
  }
  return out;
}

// Mean squared error against fixed target values (no gradient into the target).
template <class T>
Tensor<T> mse_to(const Tensor<T>& pred, const std::vector<T>& target) {
  require(static_cast<std::size_t>(pred.numel()) == target.size(),
          cat("mse_to: prediction ", shape_str(pred.shape()), " vs ", target.size(), " target values"));
  require(pred.numel() > 0, "mse_to: empty prediction");
  T acc = 0;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const T d = pred.data()[i] - target[static_cast<std::size_t>(i)];
    acc += d * d;
  }
  const T n = static_cast<T>(pred.numel());
  Tensor<T> out = Tensor<T>::from({1}, {acc / n});
  if (detail::taping<T>() && pred.requires_grad()) {
    detail::ensure_input_grad(pred);
    out.set_requires_grad(true);
    auto tgt = std::make_shared<std::vector<T>>(target);
    Tape<T>::active()->record([ps = pred.storage(), os = out.storage(), tgt, n] {
      const T g = os->grad[0] * T(2) / n;
      for (std::size_t i = 0; i < ps->grad.size(); ++i) ps->grad[i] += g * (ps->data[i] - (*tgt)[i]);
    });
  }
  return out;
}

// Multiplies each (sample, channel) plane by a fixed coefficient.
template <class T>
Tensor<T> scale_channels(const Tensor<T>& x, const std::vector<T>& coeff) {
  require(x.ndim() >= 2, cat("scale_channels: input must have batch and channel dims, got ", shape_str(x.shape())));
  const std::int64_t BC = static_cast<std::int64_t>(x.dim(0)) * x.dim(1);
  require(static_cast<std::int64_t>(coeff.size()) == BC, "scale_channels: coefficient count mismatch");
  const std::int64_t S = x.numel() / BC;
  Tensor<T> out(x.shape());
  for (std::int64_t bc = 0; bc < BC; ++bc) {
    const T m = coeff[static_cast<std::size_t>(bc)];
    const T* src = x.data() + bc * S;
    T* dst = out.data() + bc * S;
    for (std::int64_t i = 0; i < S; ++i) dst[i] = src[i] * m;
  }
  if (detail::taping<T>() && x.requires_grad()) {
    detail::ensure_input_grad(x);
    out.set_requires_grad(true);
    auto co = std::make_shared<std::vector<T>>(coeff);
    Tape<T>::active()->record([xs = x.storage(), os = out.storage(), co, S] {
      for (std::size_t bc = 0; bc < co->size(); ++bc) {
        const T m = (*co)[bc];
        const std::size_t off = bc * static_cast<std::size_t>(S);
        for (std::size_t i = 0; i < static_cast<std::size_t>(S); ++i) xs->grad[off + i] += m * os->grad[off + i];
      }
    });
  }
  return out;
}

// Zeroes each (sample, channel) plane independently with probability `rate`,
// rescaling survivors by 1/(1-rate). rate 1 zeroes everything (no rescale).
// Consumes exactly B*C draws from rng.
template <class T>
Tensor<T> channel_dropout(const Tensor<T>& x, double rate, Rng& rng) {
  require(rate >= 0.0 && rate <= 1.0, cat("channel_dropout: rate ", rate, " outside [0,1]"));
  require(x.ndim() >= 2, cat("channel_dropout: input must have batch and channel dims, got ", shape_str(x.shape())));
  if (rate == 0.0) return x;
  const std::int64_t BC = static_cast<std::int64_t>(x.dim(0)) * x.dim(1);
  const T keep_scale = rate < 1.0 ? static_cast<T>(1.0 / (1.0 - rate)) : T(0);
  std::vector<T> coeff(static_cast<std::size_t>(BC));
  for (auto& m : coeff) m = rng.uniform() < rate ? T(0) : keep_scale;
  return scale_channels(x, coeff);
}

// Affine rescale onto [0,1] using extremes of the whole tensor (or of each
// column when per_dim). Degenerate ranges map to zeros and pass no gradient.
template <class T>
Tensor<T> minmax_rescale(const Tensor<T>& x, bool per_dim = false) {
  require(x.numel() > 0, "minmax_rescale: empty input");
  Tensor<T> out(x.shape());
  std::vector<T> mn, inv;
  std::int64_t N = 1;
  if (per_dim) {
    require(x.ndim() == 2, cat("minmax_rescale: per-dim mode needs 2-d input, got ", shape_str(x.shape())));
    const int B = x.dim(0);
    N = x.dim(1);
    mn.assign(static_cast<std::size_t>(N), std::numeric_limits<T>::max());
    std::vector<T> mx(static_cast<std::size_t>(N), std::numeric_limits<T>::lowest());
    for (int n = 0; n < B; ++n) {
      const T* row = x.data() + static_cast<std::int64_t>(n) * N;
      for (std::int64_t j = 0; j < N; ++j) {
        mn[static_cast<std::size_t>(j)] = std::min(mn[static_cast<std::size_t>(j)], row[j]);
        mx[static_cast<std::size_t>(j)] = std::max(mx[static_cast<std::size_t>(j)], row[j]);
      }
    }
    inv.resize(static_cast<std::size_t>(N));
    for (std::int64_t j = 0; j < N; ++j) {
      const T range = mx[static_cast<std::size_t>(j)] - mn[static_cast<std::size_t>(j)];
      inv[static_cast<std::size_t>(j)] = range > T(0) ? T(1) / range : T(0);
    }
  } else {
    T lo = x.data()[0], hi = x.data()[0];
    for (std::int64_t i = 1; i < x.numel(); ++i) {
      lo = std::min(lo, x.data()[i]);
      hi = std::max(hi, x.data()[i]);
    }
    mn.assign(1, lo);
    inv.assign(1, hi > lo ? T(1) / (hi - lo) : T(0));
  }
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const std::size_t j = per_dim ? static_cast<std::size_t>(i % N) : 0;
    out.data()[i] = (x.data()[i] - mn[j]) * inv[j];
  }
  if (detail::taping<T>() && x.requires_grad()) {
    detail::ensure_input_grad(x);
    out.set_requires_grad(true);
    auto iv = std::make_shared<std::vector<T>>(std::move(inv));
    Tape<T>::active()->record([xs = x.storage(), os = out.storage(), iv, per_dim, N] {
      for (std::size_t i = 0; i < os->grad.size(); ++i) {
        const std::size_t j = per_dim ? i % static_cast<std::size_t>(N) : 0;
        xs->grad[i] += (*iv)[j] * os->grad[i];
      }
    });
  }
  return out;
}

// All pairwise L1 distances between rows of (B,N); value-only (not tracked).
template <class T>
Tensor<T> pairwise_l1(const Tensor<T>& x) {
  require(x.ndim() == 2, cat("pairwise_l1: input must be 2-d, got ", shape_str(x.shape())));
  const int B = x.dim(0);
  const std::int64_t N = x.dim(1);
  Tensor<T> d({B, B});
  for (int i = 0; i < B; ++i) {
    d.data()[static_cast<std::int64_t>(i) * B + i] = T(0);
    for (int j = i + 1; j < B; ++j) {
      const T* a = x.data() + static_cast<std::int64_t>(i) * N;
      const T* b = x.data() + static_cast<std::int64_t>(j) * N;
      T acc = 0;
      for (std::int64_t t = 0; t < N; ++t) acc += std::abs(a[t] - b[t]);
      d.data()[static_cast<std::int64_t>(i) * B + j] = acc;
      d.data()[static_cast<std::int64_t>(j) * B + i] = acc;
    }
  }
  return d;
}

}  // namespace sdg
