#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "microvla/datasets.hpp"
#include "microvla/env.hpp"
#include "microvla/policy.hpp"

namespace microvla {

// Anything the rollout harness can drive. Trained models ignore scene/task;
// the expert stub uses them (and still round-trips through the codec).
class PolicyLike {
 public:
  virtual ~PolicyLike() = default;
  virtual PredictResult predict(const Scene& scene, const TaskSpec& task,
                                const ImageObservation& obs, const std::string& instruction) = 0;
  virtual std::string id() const = 0;
};

class ModelPolicy : public PolicyLike {
 public:
  ModelPolicy(PolicyModel& model, GenerationConfig gen) : model_(&model), gen_(gen) {}
  PredictResult predict(const Scene&, const TaskSpec&, const ImageObservation& obs,
                        const std::string& instruction) override {
    return predict_action(*model_, obs, instruction, gen_);
  }
  std::string id() const override;

 private:
  PolicyModel* model_;
  GenerationConfig gen_;
};

// Scripted expert wrapped as a policy; its chunks pass through
// encode_chunk/decode_chunk so the harness exercises the same token path.
class ExpertPolicy : public PolicyLike {
 public:
  ExpertPolicy(EnvConfig env, CodecConfig codec) : env_(env), codec_(codec) {}
  PredictResult predict(const Scene& scene, const TaskSpec& task, const ImageObservation&,
                        const std::string&) override;
  std::string id() const override { return "scripted-expert"; }

 private:
  EnvConfig env_;
  CodecConfig codec_;
};

struct EvalSpec {
  std::vector<TaskKind> tasks = {TaskKind::Reach, TaskKind::Pick, TaskKind::PlaceNear};
  std::vector<VariantSpec> variants = default_variants();
  int episodes_per_cell = 100;
  int max_steps = 30;
  std::vector<std::uint64_t> seeds = {9001};
  EnvConfig env;
  GenerationConfig gen;

  void validate() const;
  std::uint64_t hash() const;
};

struct RolloutResult {
  bool success = false;
  int steps_used = 0;
  int format_failures = 0;
  int predict_calls = 0;
};

// Closed loop: render -> predict -> apply the chunk action by action.
// A format failure consumes one step as a no-op.
RolloutResult rollout(PolicyLike& policy, Scene scene, const TaskSpec& task,
                      const std::string& instruction, int max_steps, const EnvConfig& env);

struct CellResult {
  std::string task;
  std::string variant;
  std::uint64_t seed = 0;
  int episodes = 0;
  int successes = 0;
  std::int64_t predict_calls = 0;
  std::int64_t format_failures = 0;

  double success_rate() const { return episodes ? static_cast<double>(successes) / episodes : 0; }
  double format_failure_rate() const {
    return predict_calls ? static_cast<double>(format_failures) / static_cast<double>(predict_calls) : 0;
  }
  bool operator==(const CellResult&) const = default;
};

struct SuccessReport {
  std::vector<CellResult> cells;
  std::string config_hash;
  std::string checkpoint_id;

  // Mean success over seeds for one (task, variant); NaN when absent.
  double rate(const std::string& task, const std::string& variant) const;
  // Unweighted mean over tasks for one variant.
  double variant_mean(const std::string& variant) const;
  // Unweighted mean over tasks and all non-matching variants.
  double ood_aggregate_mean() const;
  double format_failure_rate(const std::string& variant) const;
  bool operator==(const SuccessReport&) const = default;
};

SuccessReport eval_suite(PolicyLike& policy, const EvalSpec& spec);

struct ParaphrasePair {
  std::string task;
  std::uint64_t seed = 0;
  int episode = 0;
  bool orig_success = false;
  bool para_success = false;
  std::string original;
  std::string paraphrased;
  bool operator==(const ParaphrasePair&) const = default;
};

struct ParaphraseReport {
  std::vector<ParaphrasePair> pairs;
  std::string config_hash;
  std::string checkpoint_id;

  double original_rate(const std::string& task = "") const;
  double paraphrased_rate(const std::string& task = "") const;
  double gap() const { return original_rate() - paraphrased_rate(); }
  bool operator==(const ParaphraseReport&) const = default;
};

// Same scenes under both instruction forms (paired design); paraphrases come
// from the holdout split of the bank.
ParaphraseReport paraphrase_eval(PolicyLike& policy, const EvalSpec& spec);

// ---- linear probe ----

struct ProbeConfig {
  int max_iters = 600;
  double lr = 0.5;
  double tol = 1e-7;
  double train_fraction = 0.8;
};

struct ProbeReport {
  double accuracy = 0;     // held-out fraction of the class dataset
  int classes = 0;
  int samples = 0;
  std::string encoder_id;  // value hash before probing (must equal after)
  bool operator==(const ProbeReport&) const = default;
};

// Multinomial logistic regression on mean-pooled frozen features, full-batch
// gradient descent. Never mutates the encoder.
ProbeReport linear_probe(EncoderParams& encoder, const std::vector<ClassSample>& data,
                         const ProbeConfig& config = {});

// ---- report files ----

enum class ReportFormat : std::uint8_t { StructuredRecords, TableText, PlotData };

void write_success_report(const SuccessReport& report, const std::string& path,
                          ReportFormat format);
SuccessReport read_success_report(const std::string& path);

void write_paraphrase_report(const ParaphraseReport& report, const std::string& path,
                             ReportFormat format);
ParaphraseReport read_paraphrase_report(const std::string& path);

}  // namespace microvla
