#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "microvla/optim.hpp"
#include "microvla/tape.hpp"
#include "microvla/tensor.hpp"

using namespace microvla;

namespace {

// Naive triple-loop reference, independent of the gemm kernels.
TensorT<double> matmul_oracle(const TensorT<double>& a, const TensorT<double>& b) {
  TensorT<double> c({a.rows(), b.cols()});
  for (std::int64_t i = 0; i < a.rows(); ++i) {
    for (std::int64_t j = 0; j < b.cols(); ++j) {
      double s = 0;
      for (std::int64_t k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      c.at(i, j) = s;
    }
  }
  return c;
}

double max_abs_diff(const TensorT<double>& a, const TensorT<double>& b) {
  REQUIRE(a.shape == b.shape);
  double m = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(a.data[i] - b.data[i]));
  return m;
}

// Finite-difference check of a one-op (or small composite) graph builder.
template <typename BuildFn>
void check_grads_fd(BuildFn build, std::vector<ParameterT<double>*> params, double tol = 1e-3,
                    double eps = 1e-4) {
  TapeT<double> tape;
  ParamBinderT<double> bind(tape);
  VarT<double> loss = build(tape, bind);
  tape.backward(loss);
  std::vector<TensorT<double>> analytic;
  for (auto* p : params) {
    bool found = false;
    for (const auto& [ptr, var] : bind.bound()) {
      if (ptr == p) {
        analytic.push_back(tape.grad(var));
        found = true;
        break;
      }
    }
    REQUIRE(found);
  }
  const auto f = [&]() {
    TapeT<double> t2;
    ParamBinderT<double> b2(t2);
    VarT<double> l = build(t2, b2);
    return static_cast<double>(t2.value(l).data[0]);
  };
  const auto numeric = finite_diff_grad<double>(f, params, eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double err = gradcheck_rel_error(analytic[i], numeric[i]);
    INFO("param ", params[i]->name, " rel err ", err);
    CHECK(err < tol);
  }
}

// Sums all entries of a 2-D value so any op output reduces to a scalar loss.
VarT<double> sum_all(TapeT<double>& tape, VarT<double> v) {
  const std::int64_t rows = tape.value(v).rows();
  const std::int64_t cols = tape.value(v).cols();
  VarT<double> ones = tape.constant(TensorT<double>::full({cols, 1}, 1.0));
  VarT<double> rowsum = matmul(v, ones);                       // [R x 1]
  VarT<double> onesr = tape.constant(TensorT<double>::full({1, rows}, 1.0));
  return matmul(onesr, rowsum);                                // [1 x 1]
}

}  // namespace

TEST_CASE("matmul identity cases") {
  TapeT<double> tape;
  auto eye = tape.constant(TensorT<double>({2, 2}, {1, 0, 0, 1}));
  auto m = tape.constant(TensorT<double>({2, 2}, {1, 2, 3, 4}));
  auto r1 = matmul(eye, eye);
  CHECK(tape.value(r1).data == std::vector<double>{1, 0, 0, 1});
  auto r2 = matmul(m, eye);
  CHECK(tape.value(r2).data == std::vector<double>{1, 2, 3, 4});
}

TEST_CASE("matmul random vs triple-loop oracle") {
  Rng rng(42);
  for (int trial = 0; trial < 20; ++trial) {
    auto a = TensorT<double>::randn({3, 4}, rng, 1.0);
    auto b = TensorT<double>::randn({4, 2}, rng, 1.0);
    TapeT<double> tape;
    auto r = matmul(tape.constant(a), tape.constant(b));
    CHECK(max_abs_diff(tape.value(r), matmul_oracle(a, b)) < 1e-6);
  }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  TapeT<double> tape;
  auto a = tape.constant(TensorT<double>({2, 3}));
  auto b = tape.constant(TensorT<double>({2, 3}));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("softmax symmetry and stability") {
  TapeT<double> tape;
  auto x = tape.constant(TensorT<double>({1, 3}, {0, 0, 0}));
  auto s = softmax(x, -1);
  for (double v : tape.value(s).data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-9));

  auto big = tape.constant(TensorT<double>({1, 2}, {1000, 0}));
  auto sb = softmax(big, -1);
  CHECK(tape.value(sb).data[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(tape.value(sb).data[1] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("softmax random vs direct formula, sums to one") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = TensorT<double>::randn({3, 5}, rng, 2.0);
    TapeT<double> tape;
    auto s = softmax(tape.constant(x), -1);
    const auto& out = tape.value(s);
    for (std::int64_t i = 0; i < 3; ++i) {
      double denom = 0;
      for (std::int64_t j = 0; j < 5; ++j) denom += std::exp(x.at(i, j));
      double rowsum = 0;
      for (std::int64_t j = 0; j < 5; ++j) {
        CHECK(out.at(i, j) == doctest::Approx(std::exp(x.at(i, j)) / denom).epsilon(1e-6));
        CHECK(out.at(i, j) >= 0.0);
        rowsum += out.at(i, j);
      }
      CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("softmax over leading axis") {
  TapeT<double> tape;
  auto x = tape.constant(TensorT<double>({2, 2}, {0, 10, 0, 10}));
  auto s = softmax(x, 0);
  const auto& out = tape.value(s);
  CHECK(out.at(0, 0) == doctest::Approx(0.5));
  CHECK(out.at(1, 0) == doctest::Approx(0.5));
  CHECK(out.at(0, 1) == doctest::Approx(0.5));
  CHECK(out.at(1, 1) == doctest::Approx(0.5));
}

TEST_CASE("layer_norm constant row and normalization") {
  TapeT<double> tape;
  ParamBinderT<double> bind(tape);
  ParameterT<double> gain("g", TensorT<double>::full({4}, 1.0));
  ParameterT<double> bias("b", TensorT<double>::zeros({4}));
  auto x = tape.constant(TensorT<double>({1, 4}, {5, 5, 5, 5}));
  auto y = layer_norm(x, bind(gain), bind(bias));
  for (double v : tape.value(y).data) CHECK(v == doctest::Approx(0.0).epsilon(1e-9));

  Rng rng(3);
  auto xr = TensorT<double>::randn({3, 8}, rng, 2.0);
  ParameterT<double> gain8("g8", TensorT<double>::full({8}, 1.0));
  ParameterT<double> bias8("b8", TensorT<double>::zeros({8}));
  TapeT<double> t2;
  ParamBinderT<double> b2(t2);
  auto y2 = layer_norm(t2.constant(xr), b2(gain8), b2(bias8));
  const auto& out = t2.value(y2);
  for (std::int64_t i = 0; i < 3; ++i) {
    double mean = 0, var = 0;
    for (std::int64_t j = 0; j < 8; ++j) mean += out.at(i, j);
    mean /= 8;
    for (std::int64_t j = 0; j < 8; ++j) var += (out.at(i, j) - mean) * (out.at(i, j) - mean);
    var /= 8;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("layer_norm gradient vs finite differences") {
  Rng rng(11);
  ParameterT<double> x("x", TensorT<double>::randn({3, 6}, rng, 1.0));
  ParameterT<double> gain("g", TensorT<double>::randn({6}, rng, 0.3));
  ParameterT<double> bias("b", TensorT<double>::randn({6}, rng, 0.3));
  for (auto& g : gain.value.data) g += 1.0;
  check_grads_fd(
      [&](TapeT<double>& tape, ParamBinderT<double>& bind) {
        auto y = layer_norm(bind(x), bind(gain), bind(bias));
        return sum_all(tape, mul(y, y));
      },
      {&x, &gain, &bias}, 1e-4, 1e-5);
}

TEST_CASE("cross_entropy analytic cases") {
  // One-hot-aligned logits with a huge gap drive the loss to zero.
  TapeT<double> tape;
  auto logits = tape.constant(TensorT<double>({2, 3}, {100, 0, 0, 0, 100, 0}));
  auto l = cross_entropy(logits, {0, 1}, {1, 1});
  CHECK(tape.value(l).data[0] == doctest::Approx(0.0).epsilon(1e-9));

  // Uniform logits cost ln(V).
  TapeT<double> t2;
  auto uniform = t2.constant(TensorT<double>::zeros({4, 7}));
  auto l2 = cross_entropy(uniform, {0, 1, 2, 3}, {1, 1, 1, 1});
  CHECK(t2.value(l2).data[0] == doctest::Approx(std::log(7.0)).epsilon(1e-9));
}

TEST_CASE("cross_entropy random vs per-position oracle, mask respected") {
  Rng rng(5);
  auto logits = TensorT<double>::randn({5, 6}, rng, 2.0);
  std::vector<std::int32_t> targets = {1, 4, 0, 3, 2};
  std::vector<std::uint8_t> mask = {1, 0, 1, 1, 0};
  TapeT<double> tape;
  auto l = cross_entropy(tape.constant(logits), targets, mask);
  double expect = 0;
  int n = 0;
  for (int i = 0; i < 5; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    double denom = 0;
    for (int j = 0; j < 6; ++j) denom += std::exp(logits.at(i, j));
    expect += -std::log(std::exp(logits.at(i, targets[static_cast<std::size_t>(i)])) / denom);
    ++n;
  }
  expect /= n;
  CHECK(tape.value(l).data[0] == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("cross_entropy empty mask errors") {
  TapeT<double> tape;
  auto logits = tape.constant(TensorT<double>::zeros({2, 3}));
  CHECK_THROWS_WITH_AS(cross_entropy(logits, {0, 1}, {0, 0}),
                       doctest::Contains("no supervised positions"), std::runtime_error);
}

TEST_CASE("backward: sum gives ones, dot gives 2x") {
  Rng rng(9);
  ParameterT<double> x("x", TensorT<double>::randn({4, 3}, rng, 1.0));
  {
    TapeT<double> tape;
    ParamBinderT<double> bind(tape);
    auto l = sum_all(tape, bind(x));
    tape.backward(l);
    for (const auto& [p, var] : bind.bound()) {
      for (double g : tape.grad(var).data) CHECK(g == doctest::Approx(1.0));
    }
  }
  {
    TapeT<double> tape;
    ParamBinderT<double> bind(tape);
    auto xv = bind(x);
    auto l = sum_all(tape, mul(xv, xv));
    tape.backward(l);
    const auto g = tape.grad(xv);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      CHECK(g.data[i] == doctest::Approx(2.0 * x.value.data[i]));
    }
  }
}

TEST_CASE("backward twice without a new forward is a stale-tape error") {
  TapeT<double> tape;
  auto x = tape.leaf(TensorT<double>({1, 1}, {2.0}));
  auto l = scale(x, 3.0);
  tape.backward(l);
  CHECK_THROWS_WITH_AS(tape.backward(l), doctest::Contains("stale"), std::runtime_error);
}

TEST_CASE("frozen parameters receive no gradient and optimizer skips them") {
  Rng rng(12);
  ParameterT<double> w("w", TensorT<double>::randn({2, 2}, rng, 1.0));
  w.frozen = true;
  const auto before = w.value.data;
  TapeT<double> tape;
  ParamBinderT<double> bind(tape);
  auto wv = bind(w);
  auto l = sum_all(tape, mul(wv, wv));
  tape.backward(l);
  bind.accumulate_grads();
  for (double g : w.grad.data) CHECK(g == 0.0);

  // Even with a nonzero gradient routed in from elsewhere, the optimizers
  // must not move a frozen parameter.
  w.grad.fill(10.0);
  AdamWT<double> opt(AdamWOptions{.lr = 0.1});
  opt.step({&w});
  CHECK(w.value.data == before);
  sgd_step<double>({&w}, 0.5);
  CHECK(w.value.data == before);
}

TEST_CASE("optimizer basics: lr 0 is identity, SGD solves the quadratic") {
  Rng rng(1);
  ParameterT<double> w("w", TensorT<double>::randn({3}, rng, 1.0));
  const auto before = w.value.data;
  w.grad.fill(1.0);
  AdamWT<double> opt(AdamWOptions{.lr = 0.0, .weight_decay = 0.0});
  opt.step({&w});
  CHECK(w.value.data == before);

  // f(w) = (w - 3)^2, 200 SGD steps at lr 0.1 contract |w - 3| by 0.8/step.
  ParameterT<double> q("q", TensorT<double>({1}, {0.0}));
  for (int i = 0; i < 200; ++i) {
    q.grad.data[0] = 2.0 * (q.value.data[0] - 3.0);
    sgd_step<double>({&q}, 0.1);
  }
  CHECK(std::abs(q.value.data[0] - 3.0) < 1e-4);
}

TEST_CASE("optimizer aborts on non-finite gradient naming the parameter") {
  ParameterT<double> w("layers.bad", TensorT<double>({2}, {1.0, 2.0}));
  w.grad.data[1] = std::numeric_limits<double>::quiet_NaN();
  AdamWT<double> opt{AdamWOptions{}};
  CHECK_THROWS_WITH_AS(opt.step({&w}), doctest::Contains("layers.bad"), std::runtime_error);
}

TEST_CASE("finite_diff_grad self-check on f(w) = w^2") {
  ParameterT<double> w("w", TensorT<double>({3}, {1.0, -2.0, 0.5}));
  const auto f = [&]() {
    double s = 0;
    for (double v : w.value.data) s += v * v;
    return s;
  };
  const auto g = finite_diff_grad<double>(f, {&w}, 1e-5);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g[0].data[i] == doctest::Approx(2.0 * w.value.data[i]).epsilon(1e-6));
  }
}

TEST_CASE("every op matches central finite differences over many random seeds") {
  // Property suite: ops composed into scalar losses, checked in 64-bit.
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(derive_seed(1234, "op-gradcheck", seed));
    const std::int64_t r = 2 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t c = 2 + static_cast<std::int64_t>(rng.below(3));
    ParameterT<double> a("a", TensorT<double>::randn({r, c}, rng, 1.0));
    ParameterT<double> b("b", TensorT<double>::randn({c, r}, rng, 1.0));
    ParameterT<double> u("u", TensorT<double>::randn({r, c}, rng, 1.0));
    ParameterT<double> bias("bias", TensorT<double>::randn({c}, rng, 1.0));

    check_grads_fd(
        [&](TapeT<double>& tape, ParamBinderT<double>& bind) {
          auto m = matmul(bind(a), bind(b));                       // [r x r]
          auto s = softmax(scale(m, 0.7), -1);
          auto t = transpose2d(s);
          auto g = gelu(add(bind(u), bind(u)));
          auto h = concat_cols<double>({t, g});                    // [r x (r + c)]
          auto sl = slice_cols(h, 1, std::min<std::int64_t>(r + c, 3));
          auto sr = slice_rows(h, 0, r);
          (void)sr;
          auto ab = add_bias(mul(bind(a), bind(u)), bind(bias));
          auto mr = mean_rows(ab);
          auto joined = concat_rows<double>({sl, slice_cols(ab, 0, tape.value(sl).cols())});
          return add(sum_all(tape, joined), sum_all(tape, mr));
        },
        {&a, &b, &u, &bias}, 1e-3);
  }
}

TEST_CASE("fused multi-head attention matches finite differences and the composed ops") {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    Rng rng(derive_seed(4242, "attn-gradcheck", seed));
    const std::int64_t s = 3 + static_cast<std::int64_t>(rng.below(3));
    const std::int64_t d = 4;
    const int heads = 2;
    ParameterT<double> q("q", TensorT<double>::randn({s, d}, rng, 1.0));
    ParameterT<double> k("k", TensorT<double>::randn({s, d}, rng, 1.0));
    ParameterT<double> v("v", TensorT<double>::randn({s, d}, rng, 1.0));
    std::vector<std::uint8_t> allowed(static_cast<std::size_t>(s * s), 0);
    for (std::int64_t i = 0; i < s; ++i) {
      for (std::int64_t j = 0; j <= i; ++j) allowed[static_cast<std::size_t>(i * s + j)] = 1;
    }
    const bool use_mask = seed % 2 == 0;

    // Value equality against the op-composed route.
    TapeT<double> t1;
    ParamBinderT<double> b1(t1);
    auto fused = multi_head_attention(b1(q), b1(k), b1(v), heads,
                                      use_mask ? allowed : std::vector<std::uint8_t>{});
    TapeT<double> t2;
    ParamBinderT<double> b2(t2);
    {
      const std::int64_t dh = d / heads;
      std::vector<VarT<double>> outs;
      auto qv = b2(q), kv = b2(k), vv = b2(v);
      for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(qv, h * dh, (h + 1) * dh);
        auto kh = slice_cols(kv, h * dh, (h + 1) * dh);
        auto vh = slice_cols(vv, h * dh, (h + 1) * dh);
        auto sc = scale(matmul(qh, transpose2d(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        auto pr = use_mask ? masked_softmax(sc, allowed) : softmax(sc, -1);
        outs.push_back(matmul(pr, vh));
      }
      auto composed = concat_cols(outs);
      CHECK(max_abs_diff(t1.value(fused), t2.value(composed)) < 1e-12);
    }

    check_grads_fd(
        [&](TapeT<double>& tape, ParamBinderT<double>& bind) {
          auto o = multi_head_attention(bind(q), bind(k), bind(v), heads,
                                        use_mask ? allowed : std::vector<std::uint8_t>{});
          return sum_all(tape, mul(o, o));
        },
        {&q, &k, &v}, 1e-3);
  }
}

TEST_CASE("masked softmax and embedding gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(derive_seed(99, "mask-gradcheck", seed));
    ParameterT<double> x("x", TensorT<double>::randn({3, 3}, rng, 1.0));
    ParameterT<double> table("table", TensorT<double>::randn({5, 3}, rng, 1.0));
    std::vector<std::uint8_t> allowed = {1, 0, 0, 1, 1, 0, 1, 1, 1};  // causal 3x3
    check_grads_fd(
        [&](TapeT<double>& tape, ParamBinderT<double>& bind) {
          auto e = embed_rows(bind(table), {0, 3, 1});
          auto s = masked_softmax(add(bind(x), e), allowed);
          return cross_entropy(s, {0, 1, 2}, {1, 1, 1});
        },
        {&x, &table}, 1e-3);
  }
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(21);
  const auto a = TensorT<double>::randn({4, 4}, rng, 1.0);
  const auto run = [&]() {
    TapeT<double> tape;
    auto v = tape.constant(a);
    auto out = softmax(matmul(gelu(v), transpose2d(v)), -1);
    return tape.value(out).byte_hash();
  };
  CHECK(run() == run());
}

TEST_CASE("debug builds reject non-finite op outputs") {
#ifndef NDEBUG
  TapeT<double> tape;
  auto big = tape.constant(TensorT<double>({1, 2}, {1e308, 1e308}));
  CHECK_THROWS_AS(add(big, big), std::logic_error);
#endif
}
