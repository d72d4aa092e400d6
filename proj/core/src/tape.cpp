#include "microvla/tape.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace microvla {

namespace {

template <typename T>
void check_finite_debug(const TensorT<T>& v, const char* op) {
#ifndef NDEBUG
  if (!v.all_finite()) {
    throw std::logic_error(std::string("non-finite output from op '") + op + "'");
  }
#else
  (void)v;
  (void)op;
#endif
}

}  // namespace

// ---- gemm kernels: (m, k, n) = (out rows, contracted dim, out cols) ----

template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    const T* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const T s = ai[p];
      const T* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  // a: [m x k], b: [n x k], c: [m x n] += a * b^T. The dot products accumulate
  // into fixed lanes so the loop vectorizes without float reassociation.
  constexpr std::int64_t kLanes = 16;
  T acc[kLanes];
  for (std::int64_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      for (std::int64_t u = 0; u < kLanes; ++u) acc[u] = T(0);
      std::int64_t p = 0;
      for (; p + kLanes <= k; p += kLanes) {
        for (std::int64_t u = 0; u < kLanes; ++u) acc[u] += ai[p + u] * bj[p + u];
      }
      T tail = 0;
      for (; p < k; ++p) tail += ai[p] * bj[p];
      T s = tail;
      for (std::int64_t u = 0; u < kLanes; ++u) s += acc[u];
      ci[j] += s;
    }
  }
}

template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n) {
  // a: [k x m], b: [k x n], c: [m x n] += a^T * b
  for (std::int64_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const T s = ap[i];
      T* ci = c + i * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += s * bp[j];
    }
  }
}

// ---- tape ----

template <typename T>
std::size_t TapeT<T>::check(Var v) const {
  if (v.tape != this || v.id < 0 || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw std::logic_error("variable does not belong to this tape");
  }
  return static_cast<std::size_t>(v.id);
}

template <typename T>
VarT<T> TapeT<T>::constant(TensorT<T> v) {
  nodes_.push_back(Node{std::move(v), {}, false, false, nullptr});
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
VarT<T> TapeT<T>::leaf(TensorT<T> v) {
  nodes_.push_back(Node{std::move(v), {}, true, false, nullptr});
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
VarT<T> TapeT<T>::emit(TensorT<T> value, bool needs_grad,
                       std::function<void(TapeT&, std::int32_t)> backprop) {
  nodes_.push_back(Node{std::move(value), {}, needs_grad, false,
                        needs_grad ? std::move(backprop) : nullptr});
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

template <typename T>
TensorT<T>& TapeT<T>::grad_buf(std::int32_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.grad_live) {
    n.grad = TensorT<T>::zeros(n.value.shape);
    n.grad_live = true;
  }
  return n.grad;
}

template <typename T>
TensorT<T> TapeT<T>::grad(Var v) const {
  const Node& n = nodes_[check(v)];
  return n.grad_live ? n.grad : TensorT<T>::zeros(n.value.shape);
}

template <typename T>
void TapeT<T>::backward(Var loss) {
  const std::size_t lid = check(loss);
  if (backward_done_) {
    throw std::runtime_error("stale tape: backward() already ran; record a new forward pass");
  }
  if (nodes_[lid].value.numel() != 1) {
    throw std::invalid_argument("backward() requires a scalar loss, got shape " +
                                shape_str(nodes_[lid].value.shape));
  }
  backward_done_ = true;
  grad_buf(static_cast<std::int32_t>(lid)).fill(T(1));
  for (std::int64_t i = static_cast<std::int64_t>(lid); i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad_live && n.backprop) {
      n.backprop(*this, static_cast<std::int32_t>(i));
    }
  }
}

// ---- ops ----

namespace {

template <typename T>
TapeT<T>& tape_of(VarT<T> v) {
  if (v.tape == nullptr) throw std::logic_error("unbound variable");
  return *v.tape;
}

}  // namespace

template <typename T>
VarT<T> matmul(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = tape_of(a);
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  if (av.ndim() != 2 || bv.ndim() != 2 || av.cols() != bv.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape) + " and " +
                                shape_str(bv.shape));
  }
  const std::int64_t m = av.rows(), k = av.cols(), n = bv.cols();
  TensorT<T> out({m, n});
  gemm_nn(av.data.data(), bv.data.data(), out.data.data(), m, k, n);
  check_finite_debug(out, "matmul");
  const bool ng = tp.needs_grad(a) || tp.needs_grad(b);
  const std::int32_t aid = a.id, bid = b.id;
  const bool ga = tp.needs_grad(a), gb = tp.needs_grad(b);
  return tp.emit(std::move(out), ng, [=](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    if (ga) {
      gemm_nt(dc.data.data(), t.node_value(bid).data.data(), t.grad_buf(aid).data.data(), m, n, k);
    }
    if (gb) {
      gemm_tn(t.node_value(aid).data.data(), dc.data.data(), t.grad_buf(bid).data.data(), k, m, n);
    }
  });
}

template <typename T>
VarT<T> add(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = tape_of(a);
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  if (av.shape != bv.shape) {
    throw std::invalid_argument("add: shape mismatch " + shape_str(av.shape) + " vs " +
                                shape_str(bv.shape));
  }
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv.data[i];
  check_finite_debug(out, "add");
  const bool ga = tp.needs_grad(a), gb = tp.needs_grad(b);
  const std::int32_t aid = a.id, bid = b.id;
  return tp.emit(std::move(out), ga || gb, [=](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    if (ga) {
      auto& da = t.grad_buf(aid);
      for (std::size_t i = 0; i < dc.data.size(); ++i) da.data[i] += dc.data[i];
    }
    if (gb) {
      auto& db = t.grad_buf(bid);
      for (std::size_t i = 0; i < dc.data.size(); ++i) db.data[i] += dc.data[i];
    }
  });
}

template <typename T>
VarT<T> add_bias(VarT<T> x, VarT<T> bias) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const auto& bv = tp.value(bias);
  if (xv.ndim() != 2 || bv.numel() != xv.cols()) {
    throw std::invalid_argument("add_bias: bias " + shape_str(bv.shape) +
                                " does not match last axis of " + shape_str(xv.shape));
  }
  const std::int64_t r = xv.rows(), c = xv.cols();
  TensorT<T> out = xv;
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) out.data[static_cast<std::size_t>(i * c + j)] += bv.data[static_cast<std::size_t>(j)];
  }
  check_finite_debug(out, "add_bias");
  const bool gx = tp.needs_grad(x), gb = tp.needs_grad(bias);
  const std::int32_t xid = x.id, bid = bias.id;
  return tp.emit(std::move(out), gx || gb, [=](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    if (gx) {
      auto& dx = t.grad_buf(xid);
      for (std::size_t i = 0; i < dc.data.size(); ++i) dx.data[i] += dc.data[i];
    }
    if (gb) {
      auto& db = t.grad_buf(bid);
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) db.data[static_cast<std::size_t>(j)] += dc.data[static_cast<std::size_t>(i * c + j)];
      }
    }
  });
}

template <typename T>
VarT<T> mul(VarT<T> a, VarT<T> b) {
  TapeT<T>& tp = tape_of(a);
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  if (av.shape != bv.shape) {
    throw std::invalid_argument("mul: shape mismatch " + shape_str(av.shape) + " vs " +
                                shape_str(bv.shape));
  }
  TensorT<T> out = av;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv.data[i];
  check_finite_debug(out, "mul");
  const bool ga = tp.needs_grad(a), gb = tp.needs_grad(b);
  const std::int32_t aid = a.id, bid = b.id;
  return tp.emit(std::move(out), ga || gb, [=](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    if (ga) {
      auto& da = t.grad_buf(aid);
      const auto& bb = t.node_value(bid);
      for (std::size_t i = 0; i < dc.data.size(); ++i) da.data[i] += dc.data[i] * bb.data[i];
    }
    if (gb) {
      auto& db = t.grad_buf(bid);
      const auto& aa = t.node_value(aid);
      for (std::size_t i = 0; i < dc.data.size(); ++i) db.data[i] += dc.data[i] * aa.data[i];
    }
  });
}

template <typename T>
VarT<T> scale(VarT<T> a, double c) {
  TapeT<T>& tp = tape_of(a);
  TensorT<T> out = tp.value(a);
  const T s = static_cast<T>(c);
  for (auto& v : out.data) v *= s;
  check_finite_debug(out, "scale");
  const std::int32_t aid = a.id;
  return tp.emit(std::move(out), tp.needs_grad(a), [=](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    auto& da = t.grad_buf(aid);
    for (std::size_t i = 0; i < dc.data.size(); ++i) da.data[i] += s * dc.data[i];
  });
}

template <typename T>
VarT<T> gelu(VarT<T> x) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  TensorT<T> out(xv.shape);
  const T c0 = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  const T c1 = static_cast<T>(0.044715);
  for (std::size_t i = 0; i < xv.data.size(); ++i) {
    const T v = xv.data[i];
    const T u = c0 * (v + c1 * v * v * v);
    out.data[i] = T(0.5) * v * (T(1) + std::tanh(u));
  }
  check_finite_debug(out, "gelu");
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x), [=](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    const auto& xx = t.node_value(xid);
    auto& dx = t.grad_buf(xid);
    for (std::size_t i = 0; i < dc.data.size(); ++i) {
      const T v = xx.data[i];
      const T u = c0 * (v + c1 * v * v * v);
      const T th = std::tanh(u);
      const T du = c0 * (T(1) + T(3) * c1 * v * v);
      const T d = T(0.5) * (T(1) + th) + T(0.5) * v * (T(1) - th * th) * du;
      dx.data[i] += dc.data[i] * d;
    }
  });
}

template <typename T>
VarT<T> softmax(VarT<T> x, int axis) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const int nd = static_cast<int>(xv.ndim());
  int ax = axis < 0 ? axis + nd : axis;
  if (ax < 0 || ax >= nd) {
    throw std::invalid_argument("softmax: invalid axis " + std::to_string(axis) + " for shape " +
                                shape_str(xv.shape));
  }
  const std::int64_t len = xv.shape[static_cast<std::size_t>(ax)];
  std::int64_t inner = 1, outer = 1;
  for (int i = ax + 1; i < nd; ++i) inner *= xv.shape[static_cast<std::size_t>(i)];
  for (int i = 0; i < ax; ++i) outer *= xv.shape[static_cast<std::size_t>(i)];

  TensorT<T> out(xv.shape);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      T mx = xv.data[static_cast<std::size_t>(base)];
      for (std::int64_t a = 1; a < len; ++a) mx = std::max(mx, xv.data[static_cast<std::size_t>(base + a * inner)]);
      T sum = 0;
      for (std::int64_t a = 0; a < len; ++a) {
        const T e = std::exp(xv.data[static_cast<std::size_t>(base + a * inner)] - mx);
        out.data[static_cast<std::size_t>(base + a * inner)] = e;
        sum += e;
      }
      const T invsum = T(1) / sum;
      for (std::int64_t a = 0; a < len; ++a) out.data[static_cast<std::size_t>(base + a * inner)] *= invsum;
    }
  }
  check_finite_debug(out, "softmax");
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x), [=](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    const TensorT<T>& p = t.node_value(self);
    auto& dx = t.grad_buf(xid);
    for (std::int64_t o = 0; o < outer; ++o) {
      for (std::int64_t in = 0; in < inner; ++in) {
        const std::int64_t base = o * len * inner + in;
        T dot = 0;
        for (std::int64_t a = 0; a < len; ++a) {
          const auto idx = static_cast<std::size_t>(base + a * inner);
          dot += dc.data[idx] * p.data[idx];
        }
        for (std::int64_t a = 0; a < len; ++a) {
          const auto idx = static_cast<std::size_t>(base + a * inner);
          dx.data[idx] += p.data[idx] * (dc.data[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
VarT<T> masked_softmax(VarT<T> x, std::vector<std::uint8_t> allowed) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  if (xv.ndim() != 2 || static_cast<std::int64_t>(allowed.size()) != xv.numel()) {
    throw std::invalid_argument("masked_softmax: mask size does not match " + shape_str(xv.shape));
  }
  const std::int64_t r = xv.rows(), c = xv.cols();
  TensorT<T> out(xv.shape);
  for (std::int64_t i = 0; i < r; ++i) {
    const std::size_t row = static_cast<std::size_t>(i * c);
    T mx = -std::numeric_limits<T>::infinity();
    for (std::int64_t j = 0; j < c; ++j) {
      if (allowed[row + static_cast<std::size_t>(j)]) mx = std::max(mx, xv.data[row + static_cast<std::size_t>(j)]);
    }
    if (!(mx > -std::numeric_limits<T>::infinity())) {
      throw std::invalid_argument("masked_softmax: row " + std::to_string(i) + " has no allowed entries");
    }
    T sum = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      const std::size_t idx = row + static_cast<std::size_t>(j);
      if (allowed[idx]) {
        const T e = std::exp(xv.data[idx] - mx);
        out.data[idx] = e;
        sum += e;
      } else {
        out.data[idx] = T(0);
      }
    }
    const T invsum = T(1) / sum;
    for (std::int64_t j = 0; j < c; ++j) out.data[row + static_cast<std::size_t>(j)] *= invsum;
  }
  check_finite_debug(out, "masked_softmax");
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x),
                 [xid, r, c](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    const TensorT<T>& p = t.node_value(self);
    auto& dx = t.grad_buf(xid);
    for (std::int64_t i = 0; i < r; ++i) {
      const std::size_t row = static_cast<std::size_t>(i * c);
      T dot = 0;
      for (std::int64_t j = 0; j < c; ++j) dot += dc.data[row + static_cast<std::size_t>(j)] * p.data[row + static_cast<std::size_t>(j)];
      for (std::int64_t j = 0; j < c; ++j) {
        const std::size_t idx = row + static_cast<std::size_t>(j);
        dx.data[idx] += p.data[idx] * (dc.data[idx] - dot);
      }
    }
  });
}

template <typename T>
VarT<T> layer_norm(VarT<T> x, VarT<T> gain, VarT<T> bias, double eps) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  const auto& gv = tp.value(gain);
  const auto& bv = tp.value(bias);
  if (xv.ndim() != 2 || gv.numel() != xv.cols() || bv.numel() != xv.cols()) {
    throw std::invalid_argument("layer_norm: gain/bias must match last axis of " +
                                shape_str(xv.shape));
  }
  const std::int64_t r = xv.rows(), c = xv.cols();
  TensorT<T> out(xv.shape);
  TensorT<T> xhat(xv.shape);
  std::vector<T> inv_std(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) {
    const std::size_t row = static_cast<std::size_t>(i * c);
    T mean = 0;
    for (std::int64_t j = 0; j < c; ++j) mean += xv.data[row + static_cast<std::size_t>(j)];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) {
      const T d = xv.data[row + static_cast<std::size_t>(j)] - mean;
      var += d * d;
    }
    var /= static_cast<T>(c);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[static_cast<std::size_t>(i)] = inv;
    for (std::int64_t j = 0; j < c; ++j) {
      const std::size_t idx = row + static_cast<std::size_t>(j);
      const T xh = (xv.data[idx] - mean) * inv;
      xhat.data[idx] = xh;
      out.data[idx] = gv.data[static_cast<std::size_t>(j)] * xh + bv.data[static_cast<std::size_t>(j)];
    }
  }
  check_finite_debug(out, "layer_norm");
  const bool gx = tp.needs_grad(x), gg = tp.needs_grad(gain), gb = tp.needs_grad(bias);
  const std::int32_t xid = x.id, gid = gain.id, bid = bias.id;
  return tp.emit(std::move(out), gx || gg || gb,
                 [=, xh = std::move(xhat), inv = std::move(inv_std)](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    const auto& gval = t.node_value(gid);
    if (gg) {
      auto& dg = t.grad_buf(gid);
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i * c + j);
          dg.data[static_cast<std::size_t>(j)] += dc.data[idx] * xh.data[idx];
        }
      }
    }
    if (gb) {
      auto& db = t.grad_buf(bid);
      for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) db.data[static_cast<std::size_t>(j)] += dc.data[static_cast<std::size_t>(i * c + j)];
      }
    }
    if (gx) {
      auto& dx = t.grad_buf(xid);
      for (std::int64_t i = 0; i < r; ++i) {
        const std::size_t row = static_cast<std::size_t>(i * c);
        T m1 = 0, m2 = 0;
        for (std::int64_t j = 0; j < c; ++j) {
          const std::size_t idx = row + static_cast<std::size_t>(j);
          const T dxh = dc.data[idx] * gval.data[static_cast<std::size_t>(j)];
          m1 += dxh;
          m2 += dxh * xh.data[idx];
        }
        m1 /= static_cast<T>(c);
        m2 /= static_cast<T>(c);
        const T is = inv[static_cast<std::size_t>(i)];
        for (std::int64_t j = 0; j < c; ++j) {
          const std::size_t idx = row + static_cast<std::size_t>(j);
          const T dxh = dc.data[idx] * gval.data[static_cast<std::size_t>(j)];
          dx.data[idx] += is * (dxh - m1 - xh.data[idx] * m2);
        }
      }
    }
  });
}

template <typename T>
VarT<T> cross_entropy(VarT<T> logits, std::vector<std::int32_t> targets,
                      std::vector<std::uint8_t> mask) {
  TapeT<T>& tp = tape_of(logits);
  const auto& lv = tp.value(logits);
  if (lv.ndim() != 2) {
    throw std::invalid_argument("cross_entropy: logits must be 2-D, got " + shape_str(lv.shape));
  }
  const std::int64_t r = lv.rows(), v = lv.cols();
  if (static_cast<std::int64_t>(targets.size()) != r || static_cast<std::int64_t>(mask.size()) != r) {
    throw std::invalid_argument("cross_entropy: targets/mask length must equal row count");
  }
  std::int64_t n = 0;
  for (auto m : mask) n += m ? 1 : 0;
  if (n == 0) {
    throw std::runtime_error("cross_entropy: no supervised positions");
  }
  T loss = 0;
  for (std::int64_t i = 0; i < r; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const std::int32_t tgt = targets[static_cast<std::size_t>(i)];
    if (tgt < 0 || tgt >= v) {
      throw std::invalid_argument("cross_entropy: target id " + std::to_string(tgt) +
                                  " out of range for vocab " + std::to_string(v));
    }
    const std::size_t row = static_cast<std::size_t>(i * v);
    T mx = lv.data[row];
    for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, lv.data[row + static_cast<std::size_t>(j)]);
    T sum = 0;
    for (std::int64_t j = 0; j < v; ++j) sum += std::exp(lv.data[row + static_cast<std::size_t>(j)] - mx);
    loss += mx + std::log(sum) - lv.data[row + static_cast<std::size_t>(tgt)];
  }
  loss /= static_cast<T>(n);
  TensorT<T> out({1}, {loss});
  check_finite_debug(out, "cross_entropy");
  const std::int32_t lid = logits.id;
  return tp.emit(std::move(out), tp.needs_grad(logits),
                 [lid, r, v, n, tg = std::move(targets), mk = std::move(mask)](TapeT<T>& t, std::int32_t self) {
    const T g = t.grad_buf(self).data[0] / static_cast<T>(n);
    const auto& lval = t.node_value(lid);
    auto& dl = t.grad_buf(lid);
    for (std::int64_t i = 0; i < r; ++i) {
      if (!mk[static_cast<std::size_t>(i)]) continue;
      const std::size_t row = static_cast<std::size_t>(i * v);
      T mx = lval.data[row];
      for (std::int64_t j = 1; j < v; ++j) mx = std::max(mx, lval.data[row + static_cast<std::size_t>(j)]);
      T sum = 0;
      for (std::int64_t j = 0; j < v; ++j) sum += std::exp(lval.data[row + static_cast<std::size_t>(j)] - mx);
      const T invsum = T(1) / sum;
      for (std::int64_t j = 0; j < v; ++j) {
        const std::size_t idx = row + static_cast<std::size_t>(j);
        dl.data[idx] += g * std::exp(lval.data[idx] - mx) * invsum;
      }
      dl.data[row + static_cast<std::size_t>(tg[static_cast<std::size_t>(i)])] -= g;
    }
  });
}

template <typename T>
VarT<T> transpose2d(VarT<T> x) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  if (xv.ndim() != 2) throw std::invalid_argument("transpose2d: need 2-D, got " + shape_str(xv.shape));
  const std::int64_t r = xv.rows(), c = xv.cols();
  TensorT<T> out({c, r});
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) out.data[static_cast<std::size_t>(j * r + i)] = xv.data[static_cast<std::size_t>(i * c + j)];
  }
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x), [xid, r, c](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    auto& dx = t.grad_buf(xid);
    for (std::int64_t j = 0; j < c; ++j) {
      for (std::int64_t i = 0; i < r; ++i) dx.data[static_cast<std::size_t>(i * c + j)] += dc.data[static_cast<std::size_t>(j * r + i)];
    }
  });
}

template <typename T>
VarT<T> slice_rows(VarT<T> x, std::int64_t r0, std::int64_t r1) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  if (xv.ndim() != 2 || r0 < 0 || r1 > xv.rows() || r0 >= r1) {
    throw std::invalid_argument("slice_rows: invalid range [" + std::to_string(r0) + ", " +
                                std::to_string(r1) + ") for " + shape_str(xv.shape));
  }
  const std::int64_t c = xv.cols();
  TensorT<T> out({r1 - r0, c});
  std::copy(xv.data.begin() + r0 * c, xv.data.begin() + r1 * c, out.data.begin());
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x), [xid, r0, r1, c](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    auto& dx = t.grad_buf(xid);
    for (std::size_t i = 0; i < dc.data.size(); ++i) dx.data[static_cast<std::size_t>(r0 * c) + i] += dc.data[i];
  });
}

template <typename T>
VarT<T> slice_cols(VarT<T> x, std::int64_t c0, std::int64_t c1) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  if (xv.ndim() != 2 || c0 < 0 || c1 > xv.cols() || c0 >= c1) {
    throw std::invalid_argument("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                                std::to_string(c1) + ") for " + shape_str(xv.shape));
  }
  const std::int64_t r = xv.rows(), c = xv.cols(), w = c1 - c0;
  TensorT<T> out({r, w});
  for (std::int64_t i = 0; i < r; ++i) {
    std::copy(xv.data.begin() + i * c + c0, xv.data.begin() + i * c + c1, out.data.begin() + i * w);
  }
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x), [xid, r, c, c0, w](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    auto& dx = t.grad_buf(xid);
    for (std::int64_t i = 0; i < r; ++i) {
      for (std::int64_t j = 0; j < w; ++j) dx.data[static_cast<std::size_t>(i * c + c0 + j)] += dc.data[static_cast<std::size_t>(i * w + j)];
    }
  });
}

template <typename T>
VarT<T> concat_cols(const std::vector<VarT<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input list");
  TapeT<T>& tp = tape_of(xs[0]);
  const std::int64_t r = tp.value(xs[0]).rows();
  std::int64_t total = 0;
  bool ng = false;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    if (v.ndim() != 2 || v.rows() != r) {
      throw std::invalid_argument("concat_cols: row count mismatch at " + shape_str(v.shape));
    }
    total += v.cols();
    ng = ng || tp.needs_grad(x);
  }
  TensorT<T> out({r, total});
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    const std::int64_t c = v.cols();
    for (std::int64_t i = 0; i < r; ++i) {
      std::copy(v.data.begin() + i * c, v.data.begin() + (i + 1) * c, out.data.begin() + i * total + off);
    }
    off += c;
  }
  std::vector<std::int32_t> ids;
  std::vector<std::int64_t> widths;
  std::vector<std::uint8_t> grads;
  for (const auto& x : xs) {
    ids.push_back(x.id);
    widths.push_back(tp.value(x).cols());
    grads.push_back(tp.needs_grad(x) ? 1 : 0);
  }
  return tp.emit(std::move(out), ng,
                 [r, total, ids = std::move(ids), widths = std::move(widths), grads = std::move(grads)](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    std::int64_t off = 0;
    for (std::size_t s = 0; s < ids.size(); ++s) {
      const std::int64_t w = widths[s];
      if (grads[s]) {
        auto& dx = t.grad_buf(ids[s]);
        for (std::int64_t i = 0; i < r; ++i) {
          for (std::int64_t j = 0; j < w; ++j) dx.data[static_cast<std::size_t>(i * w + j)] += dc.data[static_cast<std::size_t>(i * total + off + j)];
        }
      }
      off += w;
    }
  });
}

template <typename T>
VarT<T> concat_rows(const std::vector<VarT<T>>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input list");
  TapeT<T>& tp = tape_of(xs[0]);
  const std::int64_t c = tp.value(xs[0]).cols();
  std::int64_t total = 0;
  bool ng = false;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    if (v.ndim() != 2 || v.cols() != c) {
      throw std::invalid_argument("concat_rows: column count mismatch at " + shape_str(v.shape));
    }
    total += v.rows();
    ng = ng || tp.needs_grad(x);
  }
  TensorT<T> out({total, c});
  std::int64_t off = 0;
  for (const auto& x : xs) {
    const auto& v = tp.value(x);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + off * c);
    off += v.rows();
  }
  std::vector<std::int32_t> ids;
  std::vector<std::int64_t> heights;
  std::vector<std::uint8_t> grads;
  for (const auto& x : xs) {
    ids.push_back(x.id);
    heights.push_back(tp.value(x).rows());
    grads.push_back(tp.needs_grad(x) ? 1 : 0);
  }
  return tp.emit(std::move(out), ng,
                 [c, ids = std::move(ids), heights = std::move(heights), grads = std::move(grads)](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    std::int64_t off = 0;
    for (std::size_t s = 0; s < ids.size(); ++s) {
      const std::int64_t h = heights[s];
      if (grads[s]) {
        auto& dx = t.grad_buf(ids[s]);
        for (std::int64_t i = 0; i < h * c; ++i) dx.data[static_cast<std::size_t>(i)] += dc.data[static_cast<std::size_t>((off * c) + i)];
      }
      off += h;
    }
  });
}

template <typename T>
VarT<T> embed_rows(VarT<T> table, std::vector<std::int32_t> ids) {
  TapeT<T>& tp = tape_of(table);
  const auto& tv = tp.value(table);
  if (tv.ndim() != 2) throw std::invalid_argument("embed_rows: table must be 2-D");
  const std::int64_t v = tv.rows(), d = tv.cols();
  TensorT<T> out({static_cast<std::int64_t>(ids.size()), d});
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const std::int32_t id = ids[t];
    if (id < 0 || id >= v) {
      throw std::invalid_argument("embed_rows: token id " + std::to_string(id) +
                                  " out of range for table rows " + std::to_string(v));
    }
    std::copy(tv.data.begin() + id * d, tv.data.begin() + (id + 1) * d, out.data.begin() + static_cast<std::int64_t>(t) * d);
  }
  const std::int32_t tid = table.id;
  return tp.emit(std::move(out), tp.needs_grad(table),
                 [tid, d, ids = std::move(ids)](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    auto& dt = t.grad_buf(tid);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const std::int64_t row = ids[i];
      for (std::int64_t j = 0; j < d; ++j) {
        dt.data[static_cast<std::size_t>(row * d + j)] += dc.data[static_cast<std::size_t>(static_cast<std::int64_t>(i) * d + j)];
      }
    }
  });
}

template <typename T>
VarT<T> multi_head_attention(VarT<T> q, VarT<T> k, VarT<T> v, int heads,
                             std::vector<std::uint8_t> allowed) {
  TapeT<T>& tp = tape_of(q);
  const auto& qv = tp.value(q);
  const auto& kv = tp.value(k);
  const auto& vv = tp.value(v);
  if (qv.ndim() != 2 || qv.shape != kv.shape || qv.shape != vv.shape) {
    throw std::invalid_argument("attention: q/k/v must share a 2-D shape, got " +
                                shape_str(qv.shape) + ", " + shape_str(kv.shape) + ", " +
                                shape_str(vv.shape));
  }
  const std::int64_t s = qv.rows(), d = qv.cols();
  if (heads <= 0 || d % heads != 0) {
    throw std::invalid_argument("attention: feature dim must divide into heads");
  }
  if (!allowed.empty() && static_cast<std::int64_t>(allowed.size()) != s * s) {
    throw std::invalid_argument("attention: mask size does not match sequence length");
  }
  const std::int64_t dh = d / heads;
  const T scale_f = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  // Saved softmax probabilities, one [s x s] block per head.
  std::vector<T> probs(static_cast<std::size_t>(heads) * static_cast<std::size_t>(s * s));
  TensorT<T> out({s, d});

  std::vector<T> qh(static_cast<std::size_t>(s * dh)), kh(qh.size()), vh(qh.size());
  const auto pack = [&](const TensorT<T>& src, std::vector<T>& dst, std::int64_t head) {
    const std::int64_t c0 = head * dh;
    for (std::int64_t i = 0; i < s; ++i) {
      const T* row = src.data.data() + i * d + c0;
      std::copy(row, row + dh, dst.data() + i * dh);
    }
  };

  for (std::int64_t h = 0; h < heads; ++h) {
    pack(qv, qh, h);
    pack(kv, kh, h);
    pack(vv, vh, h);
    T* p = probs.data() + h * s * s;
    std::fill(p, p + s * s, T(0));
    gemm_nt(qh.data(), kh.data(), p, s, dh, s);
    for (std::int64_t i = 0; i < s; ++i) {
      T* row = p + i * s;
      const std::uint8_t* arow = allowed.empty() ? nullptr : allowed.data() + i * s;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < s; ++j) {
        if (!arow || arow[j]) mx = std::max(mx, row[j] * scale_f);
      }
      if (!(mx > -std::numeric_limits<T>::infinity())) {
        throw std::invalid_argument("attention: row " + std::to_string(i) + " masks everything");
      }
      T sum = 0;
      for (std::int64_t j = 0; j < s; ++j) {
        if (!arow || arow[j]) {
          row[j] = std::exp(row[j] * scale_f - mx);
          sum += row[j];
        } else {
          row[j] = T(0);
        }
      }
      const T inv = T(1) / sum;
      for (std::int64_t j = 0; j < s; ++j) row[j] *= inv;
    }
    // out_h = p * v_h, scattered back into the full-width output.
    std::vector<T> oh(static_cast<std::size_t>(s * dh), T(0));
    gemm_nn(p, vh.data(), oh.data(), s, s, dh);
    const std::int64_t c0 = h * dh;
    for (std::int64_t i = 0; i < s; ++i) {
      std::copy(oh.data() + i * dh, oh.data() + (i + 1) * dh, out.data.data() + i * d + c0);
    }
  }
  check_finite_debug(out, "multi_head_attention");

  const bool gq = tp.needs_grad(q), gk = tp.needs_grad(k), gv = tp.needs_grad(v);
  const std::int32_t qid = q.id, kid = k.id, vid = v.id;
  return tp.emit(
      std::move(out), gq || gk || gv,
      [=, pr = std::move(probs)](TapeT<T>& t, std::int32_t self) {
        const TensorT<T>& dout = t.grad_buf(self);
        const auto& qval = t.node_value(qid);
        const auto& kval = t.node_value(kid);
        const auto& vval = t.node_value(vid);
        TensorT<T>* dq = gq ? &t.grad_buf(qid) : nullptr;
        TensorT<T>* dk = gk ? &t.grad_buf(kid) : nullptr;
        TensorT<T>* dv = gv ? &t.grad_buf(vid) : nullptr;

        std::vector<T> qh(static_cast<std::size_t>(s * dh)), kh(qh.size()), vh(qh.size()),
            doh(qh.size());
        std::vector<T> dp(static_cast<std::size_t>(s * s)), dsc(dp.size());
        std::vector<T> acc(qh.size());
        const auto pack2 = [&](const TensorT<T>& src, std::vector<T>& dst, std::int64_t head) {
          const std::int64_t c0 = head * dh;
          for (std::int64_t i = 0; i < s; ++i) {
            const T* row = src.data.data() + i * d + c0;
            std::copy(row, row + dh, dst.data() + i * dh);
          }
        };
        const auto scatter_add = [&](const std::vector<T>& src, TensorT<T>& dst, std::int64_t head) {
          const std::int64_t c0 = head * dh;
          for (std::int64_t i = 0; i < s; ++i) {
            T* row = dst.data.data() + i * d + c0;
            const T* srow = src.data() + i * dh;
            for (std::int64_t j = 0; j < dh; ++j) row[j] += srow[j];
          }
        };

        for (std::int64_t h = 0; h < heads; ++h) {
          pack2(qval, qh, h);
          pack2(kval, kh, h);
          pack2(vval, vh, h);
          pack2(dout, doh, h);
          const T* p = pr.data() + h * s * s;

          if (dv) {
            std::fill(acc.begin(), acc.end(), T(0));
            gemm_tn(p, doh.data(), acc.data(), s, s, dh);  // p^T * dOut_h
            scatter_add(acc, *dv, h);
          }
          if (dq || dk) {
            std::fill(dp.begin(), dp.end(), T(0));
            gemm_nt(doh.data(), vh.data(), dp.data(), s, dh, s);  // dOut_h * v_h^T
            for (std::int64_t i = 0; i < s; ++i) {
              const T* prow = p + i * s;
              T* dprow = dp.data() + i * s;
              T dot = 0;
              for (std::int64_t j = 0; j < s; ++j) dot += dprow[j] * prow[j];
              T* drow = dsc.data() + i * s;
              for (std::int64_t j = 0; j < s; ++j) {
                drow[j] = scale_f * prow[j] * (dprow[j] - dot);
              }
            }
            if (dq) {
              std::fill(acc.begin(), acc.end(), T(0));
              gemm_nn(dsc.data(), kh.data(), acc.data(), s, s, dh);  // dS * k_h
              scatter_add(acc, *dq, h);
            }
            if (dk) {
              std::fill(acc.begin(), acc.end(), T(0));
              gemm_tn(dsc.data(), qh.data(), acc.data(), s, s, dh);  // dS^T * q_h
              scatter_add(acc, *dk, h);
            }
          }
        }
      });
}

template <typename T>
VarT<T> mean_rows(VarT<T> x) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  if (xv.ndim() != 2) throw std::invalid_argument("mean_rows: need 2-D, got " + shape_str(xv.shape));
  const std::int64_t r = xv.rows(), c = xv.cols();
  TensorT<T> out({1, c});
  for (std::int64_t i = 0; i < r; ++i) {
    for (std::int64_t j = 0; j < c; ++j) out.data[static_cast<std::size_t>(j)] += xv.data[static_cast<std::size_t>(i * c + j)];
  }
  const T inv = T(1) / static_cast<T>(r);
  for (auto& v : out.data) v *= inv;
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x), [xid, r, c, inv](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    auto& dx = t.grad_buf(xid);
    for (std::int64_t i = 0; i < r; ++i) {
      for (std::int64_t j = 0; j < c; ++j) dx.data[static_cast<std::size_t>(i * c + j)] += inv * dc.data[static_cast<std::size_t>(j)];
    }
  });
}

template <typename T>
VarT<T> max_rows(VarT<T> x) {
  TapeT<T>& tp = tape_of(x);
  const auto& xv = tp.value(x);
  if (xv.ndim() != 2) throw std::invalid_argument("max_rows: need 2-D, got " + shape_str(xv.shape));
  const std::int64_t r = xv.rows(), c = xv.cols();
  TensorT<T> out({1, c});
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(c), 0);
  for (std::int64_t j = 0; j < c; ++j) {
    T best = xv.at(0, j);
    std::int32_t bi = 0;
    for (std::int64_t i = 1; i < r; ++i) {
      if (xv.at(i, j) > best) {
        best = xv.at(i, j);
        bi = static_cast<std::int32_t>(i);
      }
    }
    out.data[static_cast<std::size_t>(j)] = best;
    argmax[static_cast<std::size_t>(j)] = bi;
  }
  const std::int32_t xid = x.id;
  return tp.emit(std::move(out), tp.needs_grad(x),
                 [xid, c, am = std::move(argmax)](TapeT<T>& t, std::int32_t self) {
    const TensorT<T>& dc = t.grad_buf(self);
    auto& dx = t.grad_buf(xid);
    for (std::int64_t j = 0; j < c; ++j) {
      dx.at(am[static_cast<std::size_t>(j)], j) += dc.data[static_cast<std::size_t>(j)];
    }
  });
}

// ---- explicit instantiations ----

template class TapeT<float>;
template class TapeT<double>;

#define MICROVLA_INSTANTIATE_OPS(T)                                                              \
  template VarT<T> matmul(VarT<T>, VarT<T>);                                                     \
  template VarT<T> add(VarT<T>, VarT<T>);                                                        \
  template VarT<T> add_bias(VarT<T>, VarT<T>);                                                   \
  template VarT<T> mul(VarT<T>, VarT<T>);                                                        \
  template VarT<T> scale(VarT<T>, double);                                                       \
  template VarT<T> gelu(VarT<T>);                                                                \
  template VarT<T> softmax(VarT<T>, int);                                                        \
  template VarT<T> masked_softmax(VarT<T>, std::vector<std::uint8_t>);                           \
  template VarT<T> layer_norm(VarT<T>, VarT<T>, VarT<T>, double);                                \
  template VarT<T> cross_entropy(VarT<T>, std::vector<std::int32_t>, std::vector<std::uint8_t>); \
  template VarT<T> transpose2d(VarT<T>);                                                         \
  template VarT<T> slice_rows(VarT<T>, std::int64_t, std::int64_t);                              \
  template VarT<T> slice_cols(VarT<T>, std::int64_t, std::int64_t);                              \
  template VarT<T> concat_cols(const std::vector<VarT<T>>&);                                     \
  template VarT<T> concat_rows(const std::vector<VarT<T>>&);                                     \
  template VarT<T> embed_rows(VarT<T>, std::vector<std::int32_t>);                               \
  template VarT<T> multi_head_attention(VarT<T>, VarT<T>, VarT<T>, int,                          \
                                        std::vector<std::uint8_t>);                              \
  template VarT<T> mean_rows(VarT<T>);                                                           \
  template VarT<T> max_rows(VarT<T>);                                                            \
  template void gemm_nn(const T*, const T*, T*, std::int64_t, std::int64_t, std::int64_t);       \
  template void gemm_nt(const T*, const T*, T*, std::int64_t, std::int64_t, std::int64_t);       \
  template void gemm_tn(const T*, const T*, T*, std::int64_t, std::int64_t, std::int64_t);

MICROVLA_INSTANTIATE_OPS(float)
MICROVLA_INSTANTIATE_OPS(double)

#undef MICROVLA_INSTANTIATE_OPS

}  // namespace microvla
