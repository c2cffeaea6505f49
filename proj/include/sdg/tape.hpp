#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "sdg/tensor.hpp"

namespace sdg {

// Gradient tape. Operations executed while a tape is active append a reverse
// step; backward() seeds the scalar root with 1 and replays the recorded
// steps in exact reverse execution order, accumulating into .grad buffers.
template <class T>
class Tape {
 public:
  void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

  std::size_t size() const { return steps_.size(); }

  void backward(Tensor<T>& root) {
    require(root.numel() == 1, cat("backward() requires a scalar root, got shape ", shape_str(root.shape())));
    require(root.requires_grad(), "backward() root is not tracked by the tape");
    root.grad()[0] += T(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
  }

  void clear() { steps_.clear(); }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<std::function<void()>> steps_;
};

template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

// Suspends recording (evaluation-mode forward passes).
template <class T>
class NoTapeScope {
 public:
  NoTapeScope() : prev_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoTapeScope() { Tape<T>::active() = prev_; }
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

}  // namespace sdg
