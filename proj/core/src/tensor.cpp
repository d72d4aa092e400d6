#include "microvla/tensor.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace microvla {

template <typename T>
TensorT<T>::TensorT(std::vector<std::int64_t> s) : shape(std::move(s)) {
  data.assign(static_cast<std::size_t>(numel()), T(0));
}

template <typename T>
TensorT<T>::TensorT(std::vector<std::int64_t> s, std::vector<T> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (static_cast<std::int64_t>(data.size()) != numel()) {
    throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape));
  }
}

template <typename T>
TensorT<T> TensorT<T>::zeros(std::vector<std::int64_t> s) {
  return TensorT(std::move(s));
}

template <typename T>
TensorT<T> TensorT<T>::full(std::vector<std::int64_t> s, T v) {
  TensorT t(std::move(s));
  t.fill(v);
  return t;
}

template <typename T>
TensorT<T> TensorT<T>::randn(std::vector<std::int64_t> s, Rng& rng, double stddev) {
  TensorT t(std::move(s));
  for (auto& x : t.data) x = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

template <typename T>
bool TensorT<T>::all_finite() const {
  for (const T& x : data) {
    if (!std::isfinite(static_cast<double>(x))) return false;
  }
  return true;
}

std::string shape_str(const std::vector<std::int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  os << "]";
  return os.str();
}

template struct TensorT<float>;
template struct TensorT<double>;
template struct ParameterT<float>;
template struct ParameterT<double>;

}  // namespace microvla
