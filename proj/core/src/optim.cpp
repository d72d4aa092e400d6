#include "microvla/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace microvla {

template <typename T>
void AdamWT<T>::step(const std::vector<ParameterT<T>*>& params) {
  for (const auto* p : params) {
    if (p->frozen) continue;
    for (const T g : p->grad.data) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("non-finite gradient in parameter '" + p->name + "'");
      }
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (auto* p : params) {
    if (p->frozen) continue;
    auto it = slots_.find(p->name);
    if (it == slots_.end()) {
      it = slots_.emplace(p->name, Slot{TensorT<T>::zeros(p->value.shape),
                                        TensorT<T>::zeros(p->value.shape)}).first;
    }
    Slot& s = it->second;
    const T b1 = static_cast<T>(opts_.beta1);
    const T b2 = static_cast<T>(opts_.beta2);
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      const T g = p->grad.data[i];
      s.m.data[i] = b1 * s.m.data[i] + (T(1) - b1) * g;
      s.v.data[i] = b2 * s.v.data[i] + (T(1) - b2) * g * g;
      const double mhat = static_cast<double>(s.m.data[i]) / bc1;
      const double vhat = static_cast<double>(s.v.data[i]) / bc2;
      const double upd = mhat / (std::sqrt(vhat) + opts_.eps) +
                         opts_.weight_decay * static_cast<double>(p->value.data[i]);
      p->value.data[i] -= static_cast<T>(opts_.lr * upd);
    }
  }
}

template <typename T>
void sgd_step(const std::vector<ParameterT<T>*>& params, double lr) {
  for (auto* p : params) {
    if (p->frozen) continue;
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      const T g = p->grad.data[i];
      if (!std::isfinite(static_cast<double>(g))) {
        throw std::runtime_error("non-finite gradient in parameter '" + p->name + "'");
      }
      p->value.data[i] -= static_cast<T>(lr) * g;
    }
  }
}

template <typename T>
std::vector<TensorT<T>> finite_diff_grad(const std::function<double()>& f,
                                         const std::vector<ParameterT<T>*>& params,
                                         double eps) {
  std::vector<TensorT<T>> grads;
  grads.reserve(params.size());
  for (auto* p : params) {
    TensorT<T> g(p->value.shape);
    for (std::size_t i = 0; i < p->value.data.size(); ++i) {
      const T saved = p->value.data[i];
      p->value.data[i] = saved + static_cast<T>(eps);
      const double fp = f();
      p->value.data[i] = saved - static_cast<T>(eps);
      const double fm = f();
      p->value.data[i] = saved;
      g.data[i] = static_cast<T>((fp - fm) / (2.0 * eps));
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

template <typename T>
double gradcheck_rel_error(const TensorT<T>& a, const TensorT<T>& b, double floor) {
  if (a.shape != b.shape) {
    throw std::invalid_argument("gradcheck_rel_error: shape mismatch " + shape_str(a.shape) +
                                " vs " + shape_str(b.shape));
  }
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    diff += d * d;
    na += static_cast<double>(a.data[i]) * static_cast<double>(a.data[i]);
    nb += static_cast<double>(b.data[i]) * static_cast<double>(b.data[i]);
  }
  const double denom = std::max(std::sqrt(na) + std::sqrt(nb), floor);
  return std::sqrt(diff) / denom;
}

template class AdamWT<float>;
template class AdamWT<double>;
template void sgd_step(const std::vector<ParameterT<float>*>&, double);
template void sgd_step(const std::vector<ParameterT<double>*>&, double);
template std::vector<TensorT<float>> finite_diff_grad(const std::function<double()>&,
                                                      const std::vector<ParameterT<float>*>&,
                                                      double);
template std::vector<TensorT<double>> finite_diff_grad(const std::function<double()>&,
                                                       const std::vector<ParameterT<double>*>&,
                                                       double);
template double gradcheck_rel_error(const TensorT<float>&, const TensorT<float>&, double);
template double gradcheck_rel_error(const TensorT<double>&, const TensorT<double>&, double);

}  // namespace microvla
