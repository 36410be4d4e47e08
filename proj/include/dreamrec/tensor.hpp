#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dreamrec/errors.hpp"

namespace dreamrec::num {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(shape[i]);
  }
  return out + "]";
}

/// Dense row-major tensor. Shape {} is a scalar holding one value.
template <typename Real>
class Tensor {
 public:
  using value_type = Real;

  Tensor() : shape_{0} {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_size(shape_), Real{0}) {}

  Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw ContractError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor scalar(Real value) { return Tensor(Shape{}, std::vector<Real>{value}); }

  static Tensor filled(Shape shape, Real value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  /// Rows/cols view of a rank-2 tensor.
  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  Real* data() noexcept { return data_.data(); }
  const Real* data() const noexcept { return data_.data(); }
  std::span<Real> values() noexcept { return data_; }
  std::span<const Real> values() const noexcept { return data_; }
  std::span<Real> row(std::size_t r) { return std::span<Real>(data_).subspan(r * cols(), cols()); }
  std::span<const Real> row(std::size_t r) const {
    return std::span<const Real>(data_).subspan(r * cols(), cols());
  }

  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  Real item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size()) {
      throw ContractError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <typename To>
  Tensor<To> cast() const {
    std::vector<To> out(data_.begin(), data_.end());
    return Tensor<To>(shape_, std::move(out));
  }

  void fill(Real value) { std::fill(data_.begin(), data_.end(), value); }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<Real> data_;
};

/// A named trainable tensor with its gradient buffer.
template <typename Real>
struct Parameter {
  std::string name;
  Tensor<Real> value;
  Tensor<Real> grad;

  Parameter(std::string n, Tensor<Real> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(Real{0}); }
};

/// Owns the parameters of one model. Insertion order is the canonical order
/// used by checkpoints and optimizers; element addresses are stable.
template <typename Real>
class ParameterSet {
 public:
  ParameterSet() = default;
  ParameterSet(const ParameterSet&) = delete;
  ParameterSet& operator=(const ParameterSet&) = delete;
  ParameterSet(ParameterSet&&) noexcept = default;
  ParameterSet& operator=(ParameterSet&&) noexcept = default;

  Parameter<Real>& add(std::string name, Tensor<Real> value) {
    if (find(name) != nullptr) throw ContractError("duplicate parameter name '" + name + "'");
    owned_.push_back(std::make_unique<Parameter<Real>>(std::move(name), std::move(value)));
    pointers_.push_back(owned_.back().get());
    return *owned_.back();
  }

  Parameter<Real>* find(std::string_view name) const {
    for (const auto& p : owned_) {
      if (p->name == name) return p.get();
    }
    return nullptr;
  }

  Parameter<Real>& at(std::string_view name) const {
    if (auto* p = find(name)) return *p;
    throw ContractError("no parameter named '" + std::string(name) + "'");
  }

  std::span<Parameter<Real>* const> all() const noexcept { return pointers_; }
  std::size_t size() const noexcept { return owned_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : owned_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : owned_) p->zero_grad();
  }

  std::vector<Tensor<Real>> snapshot() const {
    std::vector<Tensor<Real>> out;
    out.reserve(owned_.size());
    for (const auto& p : owned_) out.push_back(p->value);
    return out;
  }

  void restore(const std::vector<Tensor<Real>>& values) {
    if (values.size() != owned_.size()) throw ContractError("snapshot size mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (values[i].shape() != owned_[i]->value.shape()) {
        throw ContractError("snapshot shape mismatch for '" + owned_[i]->name + "'");
      }
      owned_[i]->value = values[i];
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<Real>>> owned_;
  std::vector<Parameter<Real>*> pointers_;
};

/// Copies values by name between parameter sets of possibly different precision.
template <typename To, typename From>
void copy_parameter_values(const ParameterSet<To>& dst, const ParameterSet<From>& src) {
  if (dst.size() != src.size()) throw ContractError("parameter sets differ in size");
  for (Parameter<From>* s : src.all()) {
    Parameter<To>& d = dst.at(s->name);
    if (d.value.shape() != s->value.shape()) {
      throw ContractError("shape mismatch copying '" + s->name + "'");
    }
    d.value = s->value.template cast<To>();
  }
}

}  // namespace dreamrec::num
