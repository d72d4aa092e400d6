#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "microvla/config.hpp"
#include "microvla/optim.hpp"
#include "microvla/policy.hpp"

namespace microvla {

// ---- batch mixing ----

struct MixerConfig {
  double robot_fraction = 0.5;
  int batch_size = 16;

  // Exact per-batch robot count; throws unless robot_fraction * batch_size
  // lands on an integer (composition is exact, not stochastic).
  int robot_per_batch() const;
  void validate() const { (void)robot_per_batch(); }
};

// Epoch-reshuffled stream over dataset indices. The permutation for epoch e
// derives from (seed, e), so resume state is just (epoch, cursor).
class IndexStream {
 public:
  IndexStream() = default;
  IndexStream(std::size_t size, std::uint64_t seed, std::string domain);

  std::size_t next();
  std::uint64_t epoch() const { return epoch_; }
  std::uint64_t cursor() const { return cursor_; }
  std::size_t size() const { return size_; }
  void restore(std::uint64_t epoch, std::uint64_t cursor);

 private:
  void reshuffle();

  std::size_t size_ = 0;
  std::uint64_t seed_ = 0;
  std::string domain_;
  std::uint64_t epoch_ = 0;
  std::uint64_t cursor_ = 0;
  std::vector<std::size_t> order_;
};

struct BatchEntry {
  bool robot = false;
  std::size_t index = 0;
};

// Draws exactly robot_per_batch() robot entries and the rest VL entries,
// shuffled within the batch by a stateless per-step key. With cotrain off the
// batch is all-robot regardless of fraction.
std::vector<BatchEntry> sample_batch(IndexStream& robot, IndexStream& vl,
                                     const MixerConfig& mixer, bool cotrain, std::uint64_t seed,
                                     std::uint64_t step);

// ---- training configuration ----

struct TrainConfig {
  std::int64_t steps = 20000;
  std::uint64_t seed = 1;
  AdamWOptions adamw;
  bool cotrain = true;
  MixerConfig mixer;
  PolicyConfig policy;
  CodecConfig codec;
  BinCodecConfig bin_codec;
  std::int64_t eval_every = 500;
  std::int64_t holdout_samples = 64;  // tail slice per dataset used for loss snapshots
  std::string robot_dataset;
  std::string vl_dataset;
  std::string pretrained_encoder;  // encoder bundle; all arms start from it

  KeyValue to_kv() const;
  static TrainConfig from_kv(const KeyValue& kv);
  std::uint64_t hash() const { return to_kv().hash(); }
};

// ---- checkpoints (single binary bundle format) ----

constexpr std::uint32_t kCheckpointFormatVersion = 1;

struct NamedTensor {
  std::string name;
  bool frozen = false;
  TensorT<float> tensor;
};

struct OptSlotRecord {
  std::string name;
  TensorT<float> m;
  TensorT<float> v;
};

struct Bundle {
  std::string kind;  // "policy" | "encoder"
  std::string config_text;
  std::vector<std::string> vocab_tokens;
  std::int64_t step = 0;
  std::vector<NamedTensor> tensors;
  std::int64_t opt_step = 0;
  std::vector<OptSlotRecord> opt_slots;
  std::string rng_state;
  std::uint64_t robot_epoch = 0, robot_cursor = 0;
  std::uint64_t vl_epoch = 0, vl_cursor = 0;
};

void save_bundle(const std::string& path, const Bundle& bundle);
Bundle load_bundle(const std::string& path);

void save_encoder_checkpoint(const std::string& path, const EncoderParams& encoder,
                             const KeyValue& config);
EncoderParams load_encoder_checkpoint(const std::string& path);

std::uint64_t frozen_param_hash(const std::vector<const Parameter*>& params);

// ---- trainer ----

struct StepMetrics {
  std::int64_t step = 0;
  double loss = 0;
  double robot_loss = 0;  // NaN when the batch had no robot samples
  double vl_loss = 0;
};

class Trainer {
 public:
  // Fresh run: loads datasets and the pretrained encoder, builds the model.
  Trainer(TrainConfig config, std::string out_dir);
  // Resume: restores model, optimizer, streams, and RNG from the checkpoint.
  static Trainer resume(const std::string& checkpoint_path, const TrainConfig& config,
                        std::string out_dir);

  // Runs to config.steps, appending metrics records and periodic loss
  // snapshots to <out_dir>/metrics.jsonl. Aborts on non-finite loss, naming
  // the step and the last saved checkpoint.
  void run(const std::function<void(const StepMetrics&)>& on_step = nullptr);

  void save(const std::string& path) const;
  std::string final_checkpoint_path() const;

  PolicyModel& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  std::int64_t step_count() const { return step_; }
  const Vocabulary& vocab() const { return model_.vocab; }

 private:
  Trainer(TrainConfig config, std::string out_dir, const Bundle* restore);

  StepMetrics train_step();
  double snapshot_loss(const std::vector<PolicySample>& samples) const;

  TrainConfig config_;
  std::string out_dir_;
  PolicyModel model_;
  AdamW opt_;
  IndexStream robot_stream_, vl_stream_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::vector<PolicySample> robot_train_, vl_train_;
  std::vector<PolicySample> robot_holdout_, vl_holdout_;
  std::string metrics_path_;
  std::string last_saved_;
};

// Loads a policy checkpoint for evaluation.
PolicyModel load_policy_checkpoint(const std::string& path);
void save_policy_checkpoint(const std::string& path, const PolicyModel& model,
                            const TrainConfig& config, std::int64_t step, const AdamW& opt,
                            const Rng& rng, const IndexStream& robot, const IndexStream& vl);

}  // namespace microvla
