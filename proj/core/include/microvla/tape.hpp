#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "microvla/tensor.hpp"

namespace microvla {

template <typename T>
class TapeT;

// Handle to a node on a tape. Ops are free functions over handles.
template <typename T>
struct VarT {
  TapeT<T>* tape = nullptr;
  std::int32_t id = -1;
};

// Reverse-mode tape. Ops append nodes in execution order, which is a valid
// topological order, so backward() is a single reverse sweep that visits each
// node at most once. A tape records one forward pass; backward() may run once.
template <typename T>
class TapeT {
 public:
  using Var = VarT<T>;

  TapeT() = default;
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Input that never receives gradient (images, masks, frozen weights).
  Var constant(TensorT<T> v);
  // Input that accumulates gradient (bound trainable parameters).
  Var leaf(TensorT<T> v);

  const TensorT<T>& value(Var v) const { return nodes_[check(v)].value; }
  bool needs_grad(Var v) const { return nodes_[check(v)].needs_grad; }

  // Gradient of the last backward() w.r.t. v; zeros if nothing flowed.
  TensorT<T> grad(Var v) const;

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse order.
  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

  // Internal node construction, used by the op implementations. The backprop
  // closure receives the tape and its own node id.
  Var emit(TensorT<T> value, bool needs_grad, std::function<void(TapeT&, std::int32_t)> backprop);
  TensorT<T>& grad_buf(std::int32_t id);
  bool grad_live(std::int32_t id) const { return nodes_[static_cast<std::size_t>(id)].grad_live; }
  const TensorT<T>& node_value(std::int32_t id) const {
    return nodes_[static_cast<std::size_t>(id)].value;
  }

 private:
  struct Node {
    TensorT<T> value;
    TensorT<T> grad;
    bool needs_grad = false;
    bool grad_live = false;
    std::function<void(TapeT&, std::int32_t)> backprop;
  };

  std::size_t check(Var v) const;

  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// ---- forward ops (each records its own backward rule) ----

// [m x k] * [k x n]; throws on inner-dimension mismatch naming both shapes.
template <typename T>
VarT<T> matmul(VarT<T> a, VarT<T> b);

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b);

// x: [R x C], bias: [C]; the only broadcast in the op set.
template <typename T>
VarT<T> add_bias(VarT<T> x, VarT<T> bias);

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b);

template <typename T>
VarT<T> scale(VarT<T> a, double c);

template <typename T>
VarT<T> gelu(VarT<T> x);

// Max-subtracted softmax along `axis` (negative axis counts from the back).
template <typename T>
VarT<T> softmax(VarT<T> x, int axis = -1);

// Row-wise softmax over positions where allowed[r*C+c] != 0; disallowed
// entries are exactly zero in the output. `allowed` must have no empty row.
template <typename T>
VarT<T> masked_softmax(VarT<T> x, std::vector<std::uint8_t> allowed);

template <typename T>
VarT<T> layer_norm(VarT<T> x, VarT<T> gain, VarT<T> bias, double eps = 1e-5);

// Mean negative log-likelihood over rows with mask != 0. Targets are class
// ids per row. Throws "no supervised positions" when the mask is empty.
template <typename T>
VarT<T> cross_entropy(VarT<T> logits, std::vector<std::int32_t> targets,
                      std::vector<std::uint8_t> mask);

template <typename T>
VarT<T> transpose2d(VarT<T> x);

template <typename T>
VarT<T> slice_rows(VarT<T> x, std::int64_t r0, std::int64_t r1);

template <typename T>
VarT<T> slice_cols(VarT<T> x, std::int64_t c0, std::int64_t c1);

template <typename T>
VarT<T> concat_cols(const std::vector<VarT<T>>& xs);

template <typename T>
VarT<T> concat_rows(const std::vector<VarT<T>>& xs);

// out[t, :] = table[ids[t], :]
template <typename T>
VarT<T> embed_rows(VarT<T> table, std::vector<std::int32_t> ids);

// Fused multi-head attention over projected q/k/v, all [S x D] with D split
// into `heads` equal slices. `allowed` is the shared row-major [S x S]
// attention mask (empty = full attention). Scores scale by 1/sqrt(D/heads).
template <typename T>
VarT<T> multi_head_attention(VarT<T> q, VarT<T> k, VarT<T> v, int heads,
                             std::vector<std::uint8_t> allowed);

// [R x C] -> [1 x C]
template <typename T>
VarT<T> mean_rows(VarT<T> x);

// [R x C] -> [1 x C], per-column max; gradient routes to the first maximum.
template <typename T>
VarT<T> max_rows(VarT<T> x);

// Binds parameters to tape leaves for one forward pass. Frozen parameters
// enter as constants, so no backward work is ever recorded for them. Each
// parameter binds once per tape (cached by pointer).
template <typename T>
class ParamBinderT {
 public:
  explicit ParamBinderT(TapeT<T>& tape) : tape_(&tape) {}

  VarT<T> operator()(ParameterT<T>& p) {
    for (const auto& [ptr, var] : bound_) {
      if (ptr == &p) return var;
    }
    const VarT<T> var = p.frozen ? tape_->constant(p.value) : tape_->leaf(p.value);
    bound_.emplace_back(&p, var);
    return var;
  }

  // After backward: p.grad += s * d(loss)/dp for every bound trainable param.
  void accumulate_grads(double s = 1.0) {
    for (const auto& [ptr, var] : bound_) {
      if (ptr->frozen) continue;
      const TensorT<T> g = tape_->grad(var);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        ptr->grad.data[i] += static_cast<T>(s) * g.data[i];
      }
    }
  }

  const std::vector<std::pair<ParameterT<T>*, VarT<T>>>& bound() const { return bound_; }

 private:
  TapeT<T>* tape_;
  std::vector<std::pair<ParameterT<T>*, VarT<T>>> bound_;
};

// ---- raw kernels shared by forward and backward ----
// Accumulating: c += op(a, b). (m, k, n) = (out rows, contracted dim, out cols).
// nn: a[m x k] * b[k x n]; nt: a[m x k] * b[n x k]^T; tn: a[k x m]^T * b[k x n].
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n);
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n);
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n);

extern template class TapeT<float>;
extern template class TapeT<double>;

using Tape = TapeT<float>;
using Var = VarT<float>;

}  // namespace microvla
