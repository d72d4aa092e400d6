#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "microvla/action_codec.hpp"
#include "microvla/datasets.hpp"
#include "microvla/rng.hpp"
#include "microvla/vocab.hpp"

using namespace microvla;

namespace {

ActionVector random_action(Rng& rng) {
  ActionVector a;
  a.dx = rng.uniform(-1, 1);
  a.dy = rng.uniform(-1, 1);
  a.dz = rng.uniform(-1, 1);
  a.roll = rng.uniform(-3.14159, 3.14159);
  a.pitch = rng.uniform(-3.14159, 3.14159);
  a.yaw = rng.uniform(-3.14159, 3.14159);
  a.gripper = rng.coin(0.5) ? 1 : 0;
  return a;
}

std::vector<std::string> toks(std::initializer_list<const char*> ts) {
  return {ts.begin(), ts.end()};
}

}  // namespace

TEST_CASE("quantize rounds half away from zero to the configured digits") {
  CHECK(quantize(0.0312, 4) == doctest::Approx(0.0312).epsilon(1e-12));
  CHECK(quantize(0.0, 4) == 0.0);
  // 0.03125 is exactly representable; the oracle in 64-bit rounds up.
  CHECK(quantize(0.03125, 4) == doctest::Approx(0.0313).epsilon(1e-12));
  CHECK(quantize(-0.03125, 4) == doctest::Approx(-0.0313).epsilon(1e-12));
  CHECK(quantize(0.99995, 4) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_THROWS_AS(quantize(std::numeric_limits<double>::infinity(), 4), std::invalid_argument);
}

TEST_CASE("encode_scalar renders the worked 0.0312 example") {
  CodecConfig cfg;
  CHECK(encode_scalar(0.0312, cfg) == toks({"0", ".", "0", "3", "1", "2"}));
  CHECK(encode_scalar(0.0, cfg) == toks({"0", ".", "0", "0", "0", "0"}));
  CHECK(encode_scalar(-0.5, cfg) == toks({"-", "0", ".", "5", "0", "0", "0"}));
}

TEST_CASE("encode_scalar length is decimals + 2, + 1 when signed") {
  CodecConfig cfg;
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double v = rng.uniform(-9.9, 9.9);
    const auto t = encode_scalar(v, cfg);
    const double q = quantize(v, cfg.decimals);
    const std::size_t expect = static_cast<std::size_t>(cfg.decimals) + 2 + (q < 0 ? 1 : 0);
    CHECK(t.size() == expect);
  }
  CHECK_THROWS_AS(encode_scalar(10.0, cfg), std::invalid_argument);
}

TEST_CASE("negative values near zero encode without a sign") {
  CodecConfig cfg;
  CHECK(encode_scalar(-0.00001, cfg) == toks({"0", ".", "0", "0", "0", "0"}));
}

TEST_CASE("decode_scalar inverts encode_scalar and reports error positions") {
  CodecConfig cfg;
  CHECK(decode_scalar(toks({"0", ".", "0", "3", "1", "2"}), cfg) == doctest::Approx(0.0312));
  // negative zero normalizes to zero
  CHECK(decode_scalar(toks({"-", "0", ".", "0", "0", "0", "0"}), cfg) == 0.0);

  try {
    decode_scalar(toks({"0", ".", "0", "3", "x", "2"}), cfg);
    FAIL("expected CodecError");
  } catch (const CodecError& e) {
    CHECK(e.position() == 4);
  }
  CHECK_THROWS_AS(decode_scalar(toks({"0", ".", "0"}), cfg), CodecError);
  CHECK_THROWS_AS(decode_scalar(toks({"0", "0", "0", "3", "1", "2"}), cfg), CodecError);
}

TEST_CASE("encode_chunk renders zero action and gripper as bare digits") {
  CodecConfig cfg;
  ActionChunk chunk;
  chunk.actions.push_back(ActionVector{});
  const auto t = encode_chunk(chunk, cfg);
  // 6 zero scalars, 6 separators, gripper digit
  std::vector<std::string> expect;
  for (int i = 0; i < 6; ++i) {
    for (const char* s : {"0", ".", "0", "0", "0", "0"}) expect.emplace_back(s);
    expect.emplace_back("<sep>");
  }
  expect.emplace_back("0");
  CHECK(t == expect);

  ActionChunk grip;
  ActionVector g;
  g.gripper = 1;
  grip.actions.push_back(g);
  const auto t2 = encode_chunk(grip, cfg);
  CHECK(t2.back() == "1");
}

TEST_CASE("decode_chunk is the exact inverse on 10000 random quantized chunks") {
  CodecConfig cfg;
  Rng rng(1234);
  for (int i = 0; i < 10000; ++i) {
    ActionChunk chunk;
    const int h = 1 + static_cast<int>(rng.below(4));
    for (int j = 0; j < h; ++j) chunk.actions.push_back(random_action(rng));
    chunk = quantize_chunk(chunk, cfg.decimals);
    const ActionChunk back = decode_chunk(encode_chunk(chunk, cfg), cfg);
    REQUIRE(back == chunk);
  }
}

TEST_CASE("decode_chunk structured errors") {
  CodecConfig cfg;
  ActionChunk chunk;
  chunk.actions.push_back(ActionVector{});
  auto tokens = encode_chunk(chunk, cfg);
  tokens.pop_back();
  tokens.pop_back();  // drop a separator and the gripper digit
  CHECK_THROWS_AS(decode_chunk(tokens, cfg), CodecError);

  auto bad = encode_chunk(chunk, cfg);
  bad[1] = "<asep>";  // separator misuse inside a scalar
  CHECK_THROWS_AS(decode_chunk(bad, cfg), CodecError);
}

TEST_CASE("every string-codec token is in the shared text vocabulary") {
  const Vocabulary vocab = build_default_vocab(0);
  CodecConfig cfg;
  Rng rng(77);
  for (int i = 0; i < 500; ++i) {
    ActionChunk chunk;
    chunk.actions.push_back(random_action(rng));
    chunk.actions.push_back(random_action(rng));
    chunk = quantize_chunk(chunk, cfg.decimals);
    for (const auto& tok : encode_chunk(chunk, cfg)) {
      INFO("token ", tok);
      CHECK(vocab.contains(tok));
    }
  }
}

TEST_CASE("action strings and VL answers share digit token ids") {
  const Vocabulary vocab = build_default_vocab(0);
  // "0.31" appears in pointing answers and in action strings; both tokenize
  // to the same character ids.
  const TokenSequence vl = tokenize_text("(0.31, 0.72)", vocab);
  CodecConfig cfg;
  const auto action_tokens = encode_scalar(0.31, cfg);
  CHECK(vocab.id(action_tokens[0]) == vl.ids[1]);  // '0'
  CHECK(vocab.id(action_tokens[1]) == vl.ids[2]);  // '.'
  CHECK(vocab.id(action_tokens[2]) == vl.ids[3]);  // '3'
  CHECK(vocab.id(action_tokens[3]) == vl.ids[4]);  // '1'
}

TEST_CASE("bin codec boundary and center behavior") {
  BinCodecConfig cfg;
  ActionVector a;
  a.dx = -1.0;
  auto ids = bin_encode(a, cfg);
  CHECK(ids[0] == 0);
  a.dx = 1.0;
  ids = bin_encode(a, cfg);
  CHECK(ids[0] == cfg.num_bins - 1);

  a.dx = 0.0;
  ids = bin_encode(a, cfg);
  CHECK(ids[0] == 128);
  const ActionVector back = bin_decode(ids, cfg);
  CHECK(std::abs(back.dx - 0.0) <= 1.0 / 256 + 1e-12);
}

TEST_CASE("bin round-trip error bounded by half bin width; gripper stays binary") {
  BinCodecConfig cfg;
  const double half_translation = (cfg.translation_max - cfg.translation_min) / cfg.num_bins / 2;
  const double half_rotation = (cfg.rotation_max - cfg.rotation_min) / cfg.num_bins / 2;
  Rng rng(42);
  for (int i = 0; i < 2000; ++i) {
    const ActionVector a = random_action(rng);
    const ActionVector b = bin_decode(bin_encode(a, cfg), cfg);
    CHECK(std::abs(a.dx - b.dx) <= half_translation + 1e-12);
    CHECK(std::abs(a.dy - b.dy) <= half_translation + 1e-12);
    CHECK(std::abs(a.dz - b.dz) <= half_translation + 1e-12);
    CHECK(std::abs(a.roll - b.roll) <= half_rotation + 1e-12);
    CHECK(a.gripper == b.gripper);
  }
}

TEST_CASE("bin decode rejects out-of-range ids and wrong counts") {
  BinCodecConfig cfg;
  CHECK_THROWS_AS(bin_decode({0, 1, 2}, cfg), CodecError);
  CHECK_THROWS_AS(bin_decode({0, 0, 0, 0, 0, 0, 256}, cfg), CodecError);
  CHECK_THROWS_AS(bin_decode({-1, 0, 0, 0, 0, 0, 0}, cfg), CodecError);
}

TEST_CASE("quantization error report matches analytic bounds") {
  CodecConfig scfg;
  BinCodecConfig bcfg;
  const auto r = quantization_error_report(scfg, bcfg);
  CHECK(r.string_analytic_max == doctest::Approx(5e-5));
  CHECK(r.bin_analytic_max == doctest::Approx(3.90625e-3));
  CHECK(r.string_measured_max <= r.string_analytic_max + 1e-12);
  CHECK(r.string_measured_max > r.string_analytic_max * 0.9);
  CHECK(r.bin_measured_max <= r.bin_analytic_max + 1e-12);
  CHECK(r.bin_measured_max > r.bin_analytic_max * 0.9);
  // The report confirms the string codec is finer than the bin baseline.
  CHECK(r.string_measured_max < r.bin_measured_max);
  CHECK(r.string_measured_mean < r.bin_measured_mean);
}

TEST_CASE("action validation") {
  ActionVector a;
  a.dx = 1.5;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  a.dx = 0;
  a.gripper = 2;
  CHECK_THROWS_AS(a.validate(), std::invalid_argument);
  ActionChunk c;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  for (int i = 0; i < 5; ++i) c.actions.push_back(ActionVector{});
  CHECK_THROWS_AS(c.validate(4), std::invalid_argument);
}
