#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "microvla/action_codec.hpp"
#include "microvla/config.hpp"
#include "microvla/env.hpp"
#include "microvla/vocab.hpp"

namespace microvla {

// ---- records ----

struct RobotStepRecord {
  ImageObservation obs;
  std::string instruction;
  ActionChunk label;
  TaskKind task = TaskKind::Reach;
  std::int64_t episode = 0;
  std::int64_t step = 0;
};

// One demonstration episode; every labeled chunk was applied open-loop while
// recording, so replaying it from the recorded state follows the expert.
struct EpisodeRecord {
  std::vector<RobotStepRecord> steps;
  TaskSpec task;
  std::uint64_t seed = 0;
  bool success = false;
};

struct VLSample {
  ImageObservation obs;
  std::string question;
  std::string answer;
};

struct ClassSample {
  ImageObservation obs;
  int label = 0;
  std::string class_name;
};

int num_classes();  // shape x color grid
std::string class_label_name(int label);

// ---- generation ----

struct DataGenConfig {
  std::uint64_t master_seed = 1;
  int robot_episodes = 600;
  int vl_samples = 8000;
  int class_samples = 6000;
  int class_holdout_samples = 1500;
  bool paraphrase_augment = false;  // mix train-visible synonyms into robot data
  int max_env_steps = 30;
  EnvConfig env;
  CodecConfig codec;
  int num_bin_tokens = 256;

  KeyValue to_kv() const;
  static DataGenConfig from_kv(const KeyValue& kv);
  std::uint64_t hash() const { return to_kv().hash(); }
};

// Every string any generator can emit tokenizes against this corpus.
std::vector<std::string> vocab_corpus();
Vocabulary build_default_vocab(int num_bin_tokens);

// Task kinds cycle round-robin; per-episode RNG streams derive from
// (master_seed, episode index) so generation order never matters.
std::vector<EpisodeRecord> gen_robot_dataset(const DataGenConfig& cfg);
std::vector<VLSample> gen_vl_dataset(const DataGenConfig& cfg);
std::vector<ClassSample> gen_class_dataset(const DataGenConfig& cfg, bool holdout_split);

// Renders a coordinate pair with the shared scalar encoding, 2 decimals.
std::string format_point_answer(double x, double y);

// ---- dataset files (line-delimited JSON records, header first) ----

constexpr int kDatasetFormatVersion = 1;

struct DatasetHeader {
  int format_version = kDatasetFormatVersion;
  std::string kind;  // robot | vl | class
  std::string config_hash;
  std::uint64_t master_seed = 0;
  std::int64_t count = 0;
  std::vector<std::string> vocab_tokens;
};

void write_robot_dataset(const std::string& path, const std::vector<EpisodeRecord>& episodes,
                         const DataGenConfig& cfg, const Vocabulary& vocab);
void write_vl_dataset(const std::string& path, const std::vector<VLSample>& samples,
                      const DataGenConfig& cfg, const Vocabulary& vocab);
void write_class_dataset(const std::string& path, const std::vector<ClassSample>& samples,
                         const DataGenConfig& cfg, const Vocabulary& vocab);

struct LoadedDataset {
  DatasetHeader header;
  Vocabulary vocab;
  std::vector<RobotStepRecord> robot;
  std::vector<VLSample> vl;
  std::vector<ClassSample> cls;
};

LoadedDataset load_dataset(const std::string& path);

// ---- generator self-checks (run by gen-data before writing) ----

struct ExpertGateReport {
  // Success fraction per task kind over `episodes` scripted rollouts.
  double reach = 0, pick = 0, place_near = 0;
  double min_rate() const { return std::min(reach, std::min(pick, place_near)); }
};

// Runs the scripted expert through the raw environment loop. Training
// experiments are only meaningful when every rate clears `threshold`.
ExpertGateReport expert_validity_gate(const EnvConfig& env, std::uint64_t seed, int episodes,
                                      int horizon, int max_env_steps);

// Throws when a generated VL pointing answer does not decode near the true
// object center, or a relation answer contradicts coordinates.
void vl_self_check(const std::vector<VLSample>& samples, const Vocabulary& vocab);

}  // namespace microvla
