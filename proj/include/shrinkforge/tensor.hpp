#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "shrinkforge/error.hpp"

namespace shrinkforge {

namespace detail {

// std::allocator that leaves default-constructed doubles uninitialized, so
// vector::resize does not memset buffers that are about to be overwritten.
template <class T>
struct NoInitAlloc : std::allocator<T> {
  template <class U>
  struct rebind {
    using other = NoInitAlloc<U>;
  };
  template <class U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
  template <class U, class... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

}  // namespace detail

// Dense row-major array of 64-bit floats. product(shape) == data.size() is
// maintained by every constructor and reshape.
struct Tensor {
  using Data = std::vector<double, detail::NoInitAlloc<double>>;

  std::vector<std::size_t> shape;
  Data data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> s, double fill = 0.0)
      : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<std::size_t> s, std::initializer_list<double> values)
      : shape(std::move(s)), data(values.begin(), values.end()) {
    require(count(shape) == data.size(), ErrorKind::Shape,
            "tensor data length does not match shape");
  }
  Tensor(std::vector<std::size_t> s, const std::vector<double>& values)
      : shape(std::move(s)), data(values.begin(), values.end()) {
    require(count(shape) == data.size(), ErrorKind::Shape,
            "tensor data length does not match shape");
  }

  // Allocation without the zero fill; every element must be written.
  static Tensor uninit(std::vector<std::size_t> s) {
    Tensor t;
    t.shape = std::move(s);
    t.data.resize(count(t.shape));
    return t;
  }

  static std::size_t count(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
  }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& at2(std::size_t i, std::size_t j) { return data[i * shape[1] + j]; }
  double at2(std::size_t i, std::size_t j) const { return data[i * shape[1] + j]; }

  double& at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }
  double at4(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data[((n * shape[1] + c) * shape[2] + y) * shape[3] + x];
  }

  Tensor reshaped(std::vector<std::size_t> s) const {
    require(count(s) == numel(), ErrorKind::Shape, "reshape changes element count");
    Tensor out;
    out.shape = std::move(s);
    out.data = data;
    return out;
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

}  // namespace shrinkforge
