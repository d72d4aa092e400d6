#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "microvla/rng.hpp"

namespace microvla {

// Dense row-major tensor. Training instantiates T = float; gradient-check
// tests instantiate T = double on the same op implementations.
template <typename T>
struct TensorT {
  std::vector<std::int64_t> shape;
  std::vector<T> data;
  bool requires_grad = false;

  TensorT() = default;
  explicit TensorT(std::vector<std::int64_t> s);
  TensorT(std::vector<std::int64_t> s, std::vector<T> d);

  static TensorT zeros(std::vector<std::int64_t> s);
  static TensorT full(std::vector<std::int64_t> s, T v);
  static TensorT randn(std::vector<std::int64_t> s, Rng& rng, double stddev);

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
  std::int64_t ndim() const { return static_cast<std::int64_t>(shape.size()); }
  std::int64_t rows() const { return shape.at(0); }
  std::int64_t cols() const { return shape.at(1); }

  T& at(std::int64_t r, std::int64_t c) { return data[static_cast<std::size_t>(r * cols() + c)]; }
  const T& at(std::int64_t r, std::int64_t c) const {
    return data[static_cast<std::size_t>(r * cols() + c)];
  }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  bool all_finite() const;
  std::uint64_t byte_hash() const { return fnv1a(data.data(), data.size() * sizeof(T)); }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

std::string shape_str(const std::vector<std::int64_t>& s);

// Trainable weight with a persistent gradient accumulator. A frozen parameter
// never receives gradient and is skipped by optimizers; its bytes must stay
// identical across any training schedule.
template <typename T>
struct ParameterT {
  TensorT<T> value;
  TensorT<T> grad;
  bool frozen = false;
  std::string name;

  ParameterT() = default;
  ParameterT(std::string n, TensorT<T> v)
      : value(std::move(v)), grad(TensorT<T>::zeros(value.shape)), name(std::move(n)) {}

  void zero_grad() { grad.fill(T(0)); }
};

using Tensor = TensorT<float>;
using Parameter = ParameterT<float>;

extern template struct TensorT<float>;
extern template struct TensorT<double>;
extern template struct ParameterT<float>;
extern template struct ParameterT<double>;

}  // namespace microvla
