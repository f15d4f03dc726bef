#pragma once

#include <cmath>

namespace rvos {

template <typename S>
inline S sigmoid(S z) {
  if (z >= S(0)) return S(1) / (S(1) + std::exp(-z));
  const S e = std::exp(z);
  return e / (S(1) + e);
}

/// log(sigmoid(z)) without overflow.
template <typename S>
inline S log_sigmoid(S z) {
  return z >= S(0) ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z));
}

template <typename S>
inline S silu(S z) {
  return z * sigmoid(z);
}

template <typename S>
inline S silu_grad(S z) {
  const S s = sigmoid(z);
  return s * (S(1) + z * (S(1) - s));
}

}  // namespace rvos
