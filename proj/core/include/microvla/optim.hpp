#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "microvla/tensor.hpp"

namespace microvla {

struct AdamWOptions {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// AdamW with decoupled weight decay. Moment state is keyed by parameter name
// so it survives checkpoint round trips. Frozen parameters are skipped.
template <typename T>
class AdamWT {
 public:
  struct Slot {
    TensorT<T> m;
    TensorT<T> v;
  };

  AdamWT() = default;
  explicit AdamWT(AdamWOptions opts) : opts_(opts) {}

  void step(const std::vector<ParameterT<T>*>& params);

  const AdamWOptions& options() const { return opts_; }
  std::int64_t step_count() const { return t_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

  // Checkpoint restore.
  void restore(std::int64_t t, std::map<std::string, Slot> slots) {
    t_ = t;
    slots_ = std::move(slots);
  }

 private:
  AdamWOptions opts_;
  std::int64_t t_ = 0;
  std::map<std::string, Slot> slots_;
};

// Plain SGD, used by tests and the linear probe.
template <typename T>
void sgd_step(const std::vector<ParameterT<T>*>& params, double lr);

// Central finite differences of a scalar-valued function w.r.t. each
// parameter coordinate. The test oracle for every analytic gradient; keep it
// independent of the tape (it only re-runs the supplied closure).
template <typename T>
std::vector<TensorT<T>> finite_diff_grad(const std::function<double()>& f,
                                         const std::vector<ParameterT<T>*>& params,
                                         double eps = 1e-4);

// ||a - b||_2 / max(||a||_2 + ||b||_2, floor). The floor turns the ratio into
// an absolute tolerance when both gradients are essentially zero.
template <typename T>
double gradcheck_rel_error(const TensorT<T>& a, const TensorT<T>& b, double floor = 1e-6);

extern template class AdamWT<float>;
extern template class AdamWT<double>;
extern template void sgd_step(const std::vector<ParameterT<float>*>&, double);
extern template void sgd_step(const std::vector<ParameterT<double>*>&, double);
extern template std::vector<TensorT<float>> finite_diff_grad(
    const std::function<double()>&, const std::vector<ParameterT<float>*>&, double);
extern template std::vector<TensorT<double>> finite_diff_grad(
    const std::function<double()>&, const std::vector<ParameterT<double>*>&, double);
extern template double gradcheck_rel_error(const TensorT<float>&, const TensorT<float>&, double);
extern template double gradcheck_rel_error(const TensorT<double>&, const TensorT<double>&, double);

using AdamW = AdamWT<float>;

}  // namespace microvla
