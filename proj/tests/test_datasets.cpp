#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "microvla/datasets.hpp"
#include "microvla/io.hpp"

using namespace microvla;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

}  // namespace

TEST_CASE("robot episodes: labels replay to success and records are consistent") {
  DataGenConfig cfg;
  cfg.robot_episodes = 45;
  const auto episodes = gen_robot_dataset(cfg);
  REQUIRE(episodes.size() == 45);
  int successes = 0;
  for (const auto& ep : episodes) {
    if (ep.success) ++successes;
    REQUIRE_FALSE(ep.steps.empty());
    for (const auto& s : ep.steps) {
      CHECK(s.obs.height == cfg.env.image_size);
      CHECK(static_cast<int>(s.label.actions.size()) == cfg.env.horizon);
      for (const auto& a : s.label.actions) a.validate();
      CHECK(s.instruction == ep.steps[0].instruction);
    }
  }
  CHECK(successes >= 44);  // expert gate at dataset scale
}

TEST_CASE("dataset regeneration with the same seed is byte-identical") {
  DataGenConfig cfg;
  cfg.robot_episodes = 12;
  cfg.vl_samples = 40;
  const Vocabulary vocab = build_default_vocab(cfg.num_bin_tokens);
  const std::string p1 = temp_path("mv_regen1.jsonl"), p2 = temp_path("mv_regen2.jsonl");
  write_robot_dataset(p1, gen_robot_dataset(cfg), cfg, vocab);
  write_robot_dataset(p2, gen_robot_dataset(cfg), cfg, vocab);
  CHECK(slurp(p1) == slurp(p2));

  const std::string v1 = temp_path("mv_vl1.jsonl"), v2 = temp_path("mv_vl2.jsonl");
  write_vl_dataset(v1, gen_vl_dataset(cfg), cfg, vocab);
  write_vl_dataset(v2, gen_vl_dataset(cfg), cfg, vocab);
  CHECK(slurp(v1) == slurp(v2));
}

TEST_CASE("dataset files round trip exactly") {
  DataGenConfig cfg;
  cfg.robot_episodes = 9;
  cfg.vl_samples = 24;
  cfg.class_samples = 30;
  const Vocabulary vocab = build_default_vocab(cfg.num_bin_tokens);

  const auto episodes = gen_robot_dataset(cfg);
  const std::string rp = temp_path("mv_robot.jsonl");
  write_robot_dataset(rp, episodes, cfg, vocab);
  const LoadedDataset robot = load_dataset(rp);
  CHECK(robot.header.kind == "robot");
  CHECK(robot.vocab == vocab);
  std::size_t steps = 0;
  for (const auto& ep : episodes) steps += ep.steps.size();
  REQUIRE(robot.robot.size() == steps);
  CHECK(robot.robot[0].obs.pixels == episodes[0].steps[0].obs.pixels);
  CHECK(robot.robot[0].label == episodes[0].steps[0].label);
  CHECK(robot.robot[0].instruction == episodes[0].steps[0].instruction);

  const auto vl = gen_vl_dataset(cfg);
  const std::string vp = temp_path("mv_vl.jsonl");
  write_vl_dataset(vp, vl, cfg, vocab);
  const LoadedDataset vl_ds = load_dataset(vp);
  REQUIRE(vl_ds.vl.size() == vl.size());
  CHECK(vl_ds.vl[3].question == vl[3].question);
  CHECK(vl_ds.vl[3].answer == vl[3].answer);
  CHECK(vl_ds.vl[3].obs.pixels == vl[3].obs.pixels);

  const auto cls = gen_class_dataset(cfg, false);
  const std::string cp = temp_path("mv_class.jsonl");
  write_class_dataset(cp, cls, cfg, vocab);
  const LoadedDataset cls_ds = load_dataset(cp);
  REQUIRE(cls_ds.cls.size() == cls.size());
  CHECK(cls_ds.cls[7].label == cls[7].label);
  CHECK(cls_ds.cls[7].obs.pixels == cls[7].obs.pixels);
}

TEST_CASE("header carries the config hash and count; corrupt files are rejected") {
  DataGenConfig cfg;
  cfg.robot_episodes = 3;
  const Vocabulary vocab = build_default_vocab(cfg.num_bin_tokens);
  const std::string p = temp_path("mv_hdr.jsonl");
  write_robot_dataset(p, gen_robot_dataset(cfg), cfg, vocab);
  const LoadedDataset ds = load_dataset(p);
  CHECK(ds.header.config_hash == hex_u64(cfg.hash()));

  // Drop a record: count mismatch must be detected.
  const std::string text = slurp(p);
  const std::size_t last_line = text.rfind('\n', text.size() - 2);
  std::ofstream out(temp_path("mv_hdr_cut.jsonl"), std::ios::binary);
  out << text.substr(0, last_line + 1);
  out.close();
  CHECK_THROWS_WITH_AS(load_dataset(temp_path("mv_hdr_cut.jsonl")), doctest::Contains("count"),
                       std::runtime_error);
}

TEST_CASE("pointing answers decode onto the true object center") {
  DataGenConfig cfg;
  cfg.vl_samples = 10000;
  // Generation self-checks run inside; also verify the emitted strings parse
  // and land in the unit square.
  const auto samples = gen_vl_dataset(cfg);
  const Vocabulary vocab = build_default_vocab(cfg.num_bin_tokens);
  vl_self_check(samples, vocab);
  int pointing = 0;
  for (const auto& s : samples) {
    if (!s.answer.empty() && s.answer.front() == '(') ++pointing;
  }
  CHECK(pointing >= 2400);  // one quarter of kinds, round-robin
}

TEST_CASE("relation answers match a direct coordinate comparison oracle") {
  DataGenConfig cfg;
  cfg.vl_samples = 400;
  const auto samples = gen_vl_dataset(cfg);
  int relations = 0;
  for (const auto& s : samples) {
    if (s.question.rfind("is the ", 0) == 0) {
      ++relations;
      CHECK((s.answer == "yes" || s.answer == "no"));
    }
  }
  CHECK(relations == 100);
}

TEST_CASE("class dataset covers all 24 classes with correct names") {
  DataGenConfig cfg;
  cfg.class_samples = 72;
  const auto samples = gen_class_dataset(cfg, false);
  std::vector<int> counts(static_cast<std::size_t>(num_classes()), 0);
  for (const auto& s : samples) {
    REQUIRE(s.label >= 0);
    REQUIRE(s.label < num_classes());
    counts[static_cast<std::size_t>(s.label)]++;
    CHECK(s.class_name == class_label_name(s.label));
  }
  for (int c : counts) CHECK(c == 3);

  // Holdout split draws from a different stream.
  const auto holdout = gen_class_dataset(cfg, true);
  CHECK(holdout[0].obs.pixels != samples[0].obs.pixels);
}

TEST_CASE("base64 and binary stream round trips") {
  Rng rng(8);
  std::vector<std::uint8_t> bytes;
  for (int i = 0; i < 1000; ++i) bytes.push_back(static_cast<std::uint8_t>(rng.below(256)));
  for (std::size_t len : {std::size_t{0}, std::size_t{1}, std::size_t{2}, std::size_t{3},
                          std::size_t{997}, bytes.size()}) {
    const std::vector<std::uint8_t> part(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
    CHECK(base64_decode(base64_encode(part)) == part);
  }

  std::stringstream ss;
  BinaryWriter w(ss);
  w.u32(42);
  w.str("hello");
  w.f32_array({1.5f, -2.25f});
  w.i64_array({-7, 9});
  w.finish();
  BinaryReader r(ss);
  CHECK(r.u32() == 42);
  CHECK(r.str() == "hello");
  CHECK(r.f32_array() == std::vector<float>{1.5f, -2.25f});
  CHECK(r.i64_array() == std::vector<std::int64_t>{-7, 9});
  r.finish();

  // Corruption is caught by the checksum (flip a payload byte, not a length).
  std::string blob = ss.str();
  blob[13] ^= 0x40;
  std::stringstream bad(blob);
  BinaryReader rb(bad);
  rb.u32();
  rb.str();
  rb.f32_array();
  rb.i64_array();
  CHECK_THROWS_AS(rb.finish(), CheckpointError);
}

TEST_CASE("key=value config parsing, overrides, canonical hashing") {
  const KeyValue kv = KeyValue::parse_text("a = 1\n# comment\nb.c = hello world \n\nd=2.5\n");
  CHECK(kv.get_i64("a", 0) == 1);
  CHECK(kv.get_str("b.c", "") == "hello world");
  CHECK(kv.get_f64("d", 0) == 2.5);
  CHECK(kv.get_bool("missing", true));

  KeyValue kv2 = kv;
  kv2.apply_override("a=7");
  CHECK(kv2.get_i64("a", 0) == 7);
  CHECK(kv.hash() != kv2.hash());
  CHECK_THROWS_AS(kv2.apply_override("nonsense"), ConfigError);
  CHECK_THROWS_AS(KeyValue::parse_text("line without equals\n"), ConfigError);

  const KeyValue kv3 = KeyValue::parse_text(kv.canonical_text());
  CHECK(kv3.hash() == kv.hash());
}
