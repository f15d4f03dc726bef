#pragma once

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "rvos/errors.hpp"

namespace rvos {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense row-major array; the last dimension is contiguous.
template <typename S>
struct Tensor {
  Shape shape;
  std::vector<S> data;

  Tensor() = default;
  explicit Tensor(Shape s, S fill = S(0)) : shape(std::move(s)), data(numel(shape), fill) {}
  Tensor(Shape s, std::vector<S> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != numel(shape)) throw ShapeError("tensor data does not match shape " + shape_str(shape));
  }

  bool operator==(const Tensor&) const = default;

  std::size_t size() const { return data.size(); }
  int dim(std::size_t i) const { return shape.at(i); }
  S* ptr() { return data.data(); }
  const S* ptr() const { return data.data(); }
  S& operator[](std::size_t i) { return data[i]; }
  const S& operator[](std::size_t i) const { return data[i]; }

  S& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  const S& at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
  S& at(int c, int i, int j) { return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j]; }
  const S& at(int c, int i, int j) const {
    return data[(static_cast<std::size_t>(c) * shape[1] + i) * shape[2] + j];
  }

  template <typename T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out.shape = shape;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

template <typename S>
void expect_shape(const Tensor<S>& t, const Shape& s, const char* what) {
  if (t.shape != s) throw ShapeError(std::string(what) + ": expected " + shape_str(s) + ", got " + shape_str(t.shape));
}

}  // namespace rvos
