#pragma once

#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "sdg/error.hpp"

namespace sdg {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    require(d >= 0, "negative dimension in shape");
    n *= d;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

template <class T>
struct Storage {
  std::vector<T> data;
  std::vector<T> grad;  // allocated lazily; when present, same length as data
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

// Dense row-major tensor. Copies are shallow (shared storage); reshape
// produces a view sharing both values and gradient.
template <class T>
class Tensor {
 public:
  Tensor() : st_(std::make_shared<Storage<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0)) : st_(std::make_shared<Storage<T>>()), shape_(std::move(shape)) {
    st_->data.assign(static_cast<std::size_t>(shape_numel(shape_)), fill);
  }

  static Tensor from(Shape shape, std::vector<T> values) {
    require(shape_numel(shape) == static_cast<std::int64_t>(values.size()),
            cat("value count ", values.size(), " does not match shape ", shape_str(shape)));
    Tensor t;
    t.shape_ = std::move(shape);
    t.st_->data = std::move(values);
    return t;
  }

  const Shape& shape() const { return shape_; }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(st_->data.size()); }

  T* data() { return st_->data.data(); }
  const T* data() const { return st_->data.data(); }
  std::vector<T>& values() { return st_->data; }
  const std::vector<T>& values() const { return st_->data; }

  bool requires_grad() const { return st_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    st_->requires_grad = on;
    if (on) st_->ensure_grad();
    return *this;
  }

  bool has_grad() const { return !st_->grad.empty(); }
  T* grad() { st_->ensure_grad(); return st_->grad.data(); }
  const T* grad() const {
    require(has_grad(), "gradient not allocated");
    return st_->grad.data();
  }
  std::vector<T>& grad_values() { st_->ensure_grad(); return st_->grad; }

  void zero_grad() {
    if (has_grad()) std::fill(st_->grad.begin(), st_->grad.end(), T(0));
  }

  // Shares storage; values and gradients alias the original.
  Tensor reshape(Shape new_shape) const {
    require(shape_numel(new_shape) == numel(),
            cat("cannot reshape ", shape_str(shape_), " to ", shape_str(new_shape)));
    Tensor t;
    t.st_ = st_;
    t.shape_ = std::move(new_shape);
    return t;
  }

  // Value copy with no gradient tracking: a hard barrier in the graph.
  Tensor detach() const {
    Tensor t;
    t.shape_ = shape_;
    t.st_->data = st_->data;
    return t;
  }

  T item() const {
    require(numel() == 1, cat("item() requires a scalar, got shape ", shape_str(shape_)));
    return st_->data[0];
  }

  std::shared_ptr<Storage<T>> storage() const { return st_; }

 private:
  std::shared_ptr<Storage<T>> st_;
  Shape shape_;
};

}  // namespace sdg
