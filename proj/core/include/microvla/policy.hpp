#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "microvla/action_codec.hpp"
#include "microvla/datasets.hpp"
#include "microvla/encoder.hpp"
#include "microvla/vocab.hpp"

namespace microvla {

enum class EncoderMode : std::uint8_t { Single = 0, Dual = 1 };
enum class CodecMode : std::uint8_t { String = 0, Bin = 1 };

const char* encoder_mode_name(EncoderMode m);
const char* codec_mode_name(CodecMode m);
EncoderMode encoder_mode_from(const std::string& s);
CodecMode codec_mode_from(const std::string& s);

struct PolicyConfig {
  int width = 128;
  int layers = 4;
  int heads = 4;
  int max_seq = 160;
  int horizon = 2;
  int mlp_ratio = 4;
  EncoderMode encoder_mode = EncoderMode::Dual;
  CodecMode codec_mode = CodecMode::String;
  EncoderConfig encoder;

  void validate() const;
};

// Language-conditioned autoregressive decoder over the unified vocabulary.
// One output head serves both action strings and VL answers.
template <typename T>
struct PolicyModelT {
  PolicyConfig config;
  Vocabulary vocab;
  CodecConfig codec;
  BinCodecConfig bin_codec;

  DualEncoderStateT<T> dual;    // encoder_mode == Dual
  EncoderParamsT<T> single;     // encoder_mode == Single
  ParameterT<T> proj_w, proj_b;
  ParameterT<T> tok_embed;
  ParameterT<T> pos;
  std::vector<BlockParamsT<T>> blocks;
  ParameterT<T> ln_f_g, ln_f_b;
  ParameterT<T> head_w, head_b;

  // Fresh policy around an already-initialized encoder (pretrained backbone
  // in the usual flow). Dual mode duplicates-and-freezes inside.
  static PolicyModelT init(const PolicyConfig& config, const Vocabulary& vocab,
                           const CodecConfig& codec, const BinCodecConfig& bin_codec,
                           const EncoderParamsT<T>& encoder, Rng& rng);

  std::vector<ParameterT<T>*> params();
  std::vector<const ParameterT<T>*> params() const;
  std::vector<ParameterT<T>*> trainable_params();
  std::uint64_t value_hash() const;
  void zero_grads();
};

// One training sample: image + prompt ids ([BOS] instruction [ANS]) + target
// ids (answer/action tokens, EOS-terminated in string mode).
struct PolicySample {
  ImageObservation obs;
  std::vector<std::int32_t> prompt_ids;
  std::vector<std::int32_t> target_ids;
  bool is_robot = false;
};

PolicySample build_robot_sample(const RobotStepRecord& record, const Vocabulary& vocab,
                                const CodecConfig& codec, const BinCodecConfig& bin_codec,
                                CodecMode mode);
PolicySample build_vl_sample(const VLSample& sample, const Vocabulary& vocab);
std::vector<std::int32_t> build_prompt_ids(const std::string& instruction, const Vocabulary& vocab);

// Teacher-forced loss: image patches prepended as context positions, prefix
// attention over them, causal attention over tokens, cross-entropy on the
// target positions only. Throws on overlength rather than truncating.
template <typename T>
VarT<T> policy_forward_loss(TapeT<T>& tape, ParamBinderT<T>& bind, PolicyModelT<T>& model,
                            const PolicySample& sample);

// Full-sequence logits (used by causality tests and decoding).
template <typename T>
TensorT<T> policy_all_logits(PolicyModelT<T>& model, const ImageObservation& obs,
                             const std::vector<std::int32_t>& token_ids);

struct GenerationConfig {
  enum class Mode : std::uint8_t { Greedy = 0, Sample = 1 };
  Mode mode = Mode::Greedy;
  int max_new_tokens = 0;  // 0 = derived from the model's codec and horizon
  double temperature = 1.0;

  void validate() const;
};

// Autoregressive decoding until EOS or the token budget. Greedy mode is
// deterministic (ties resolve to the lowest id). Bin-codec models decode a
// fixed-length chunk restricted to bin tokens.
std::vector<std::int32_t> policy_generate(PolicyModelT<float>& model, const ImageObservation& obs,
                                          const std::vector<std::int32_t>& prompt_ids,
                                          const GenerationConfig& gen, Rng* rng = nullptr);

// Generated-but-unparseable output; scored by the harness as a failed step.
struct FormatFailure {
  std::string message;
  std::size_t position = 0;
};

struct PredictResult {
  std::optional<ActionChunk> chunk;
  std::optional<FormatFailure> failure;
  std::vector<std::int32_t> raw_ids;

  bool ok() const { return chunk.has_value(); }
};

PredictResult predict_action(PolicyModelT<float>& model, const ImageObservation& obs,
                             const std::string& instruction, const GenerationConfig& gen,
                             Rng* rng = nullptr);

extern template struct PolicyModelT<float>;
extern template struct PolicyModelT<double>;
extern template VarT<float> policy_forward_loss(TapeT<float>&, ParamBinderT<float>&,
                                                PolicyModelT<float>&, const PolicySample&);
extern template VarT<double> policy_forward_loss(TapeT<double>&, ParamBinderT<double>&,
                                                 PolicyModelT<double>&, const PolicySample&);
extern template TensorT<float> policy_all_logits(PolicyModelT<float>&, const ImageObservation&,
                                                 const std::vector<std::int32_t>&);
extern template TensorT<double> policy_all_logits(PolicyModelT<double>&, const ImageObservation&,
                                                  const std::vector<std::int32_t>&);

using PolicyModel = PolicyModelT<float>;

}  // namespace microvla
