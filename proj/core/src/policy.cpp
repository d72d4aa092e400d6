#include "microvla/policy.hpp"

#include <cmath>
#include <stdexcept>

namespace microvla {

const char* encoder_mode_name(EncoderMode m) {
  return m == EncoderMode::Single ? "single" : "dual";
}
const char* codec_mode_name(CodecMode m) { return m == CodecMode::String ? "string" : "bin"; }

EncoderMode encoder_mode_from(const std::string& s) {
  if (s == "single") return EncoderMode::Single;
  if (s == "dual") return EncoderMode::Dual;
  throw std::invalid_argument("unknown encoder mode '" + s + "' (want single|dual)");
}

CodecMode codec_mode_from(const std::string& s) {
  if (s == "string") return CodecMode::String;
  if (s == "bin") return CodecMode::Bin;
  throw std::invalid_argument("unknown codec mode '" + s + "' (want string|bin)");
}

void PolicyConfig::validate() const {
  encoder.validate();
  if (width % heads != 0) throw std::invalid_argument("policy width must be divisible by heads");
  if (max_seq <= encoder.num_patches() + 8) {
    throw std::invalid_argument("max_seq too small for image patches plus tokens");
  }
  if (horizon < 1 || horizon > 4) throw std::invalid_argument("horizon outside [1, 4]");
}

void GenerationConfig::validate() const {
  if (mode == Mode::Sample && temperature <= 0) {
    throw std::invalid_argument("sampling temperature must be > 0");
  }
}

template <typename T>
PolicyModelT<T> PolicyModelT<T>::init(const PolicyConfig& config, const Vocabulary& vocab,
                                      const CodecConfig& codec, const BinCodecConfig& bin_codec,
                                      const EncoderParamsT<T>& encoder, Rng& rng) {
  config.validate();
  PolicyModelT<T> m;
  m.config = config;
  m.vocab = vocab;
  m.codec = codec;
  m.bin_codec = bin_codec;

  if (config.encoder_mode == EncoderMode::Dual) {
    m.dual = make_dual(encoder);
  } else {
    m.single = encoder;
    m.single.rename_prefix("enc", "enc_train");
    m.single.set_frozen(false);
  }

  const std::int64_t w = config.width;
  const std::int64_t v = vocab.size();
  const std::int64_t feat =
      config.encoder_mode == EncoderMode::Dual ? 2 * config.encoder.embed_dim : config.encoder.embed_dim;
  m.proj_w = ParameterT<T>("policy.proj.w", TensorT<T>::randn({feat, w}, rng, 0.02));
  m.proj_b = ParameterT<T>("policy.proj.b", TensorT<T>::zeros({w}));
  m.tok_embed = ParameterT<T>("policy.tok_embed", TensorT<T>::randn({v, w}, rng, 0.02));
  m.pos = ParameterT<T>("policy.pos", TensorT<T>::randn({config.max_seq, w}, rng, 0.01));
  for (int l = 0; l < config.layers; ++l) {
    // Same block structure as the encoder.
    m.blocks.push_back(BlockParamsT<T>{});
    auto& b = m.blocks.back();
    const std::string prefix = "policy.block" + std::to_string(l);
    const std::int64_t hidden = w * config.mlp_ratio;
    b.ln1_g = ParameterT<T>(prefix + ".ln1.g", TensorT<T>::full({w}, T(1)));
    b.ln1_b = ParameterT<T>(prefix + ".ln1.b", TensorT<T>::zeros({w}));
    b.wq = ParameterT<T>(prefix + ".attn.wq", TensorT<T>::randn({w, w}, rng, 0.02));
    b.bq = ParameterT<T>(prefix + ".attn.bq", TensorT<T>::zeros({w}));
    b.wk = ParameterT<T>(prefix + ".attn.wk", TensorT<T>::randn({w, w}, rng, 0.02));
    b.bk = ParameterT<T>(prefix + ".attn.bk", TensorT<T>::zeros({w}));
    b.wv = ParameterT<T>(prefix + ".attn.wv", TensorT<T>::randn({w, w}, rng, 0.02));
    b.bv = ParameterT<T>(prefix + ".attn.bv", TensorT<T>::zeros({w}));
    b.wo = ParameterT<T>(prefix + ".attn.wo", TensorT<T>::randn({w, w}, rng, 0.02));
    b.bo = ParameterT<T>(prefix + ".attn.bo", TensorT<T>::zeros({w}));
    b.ln2_g = ParameterT<T>(prefix + ".ln2.g", TensorT<T>::full({w}, T(1)));
    b.ln2_b = ParameterT<T>(prefix + ".ln2.b", TensorT<T>::zeros({w}));
    b.mlp_w1 = ParameterT<T>(prefix + ".mlp.w1", TensorT<T>::randn({w, hidden}, rng, 0.02));
    b.mlp_b1 = ParameterT<T>(prefix + ".mlp.b1", TensorT<T>::zeros({hidden}));
    b.mlp_w2 = ParameterT<T>(prefix + ".mlp.w2", TensorT<T>::randn({hidden, w}, rng, 0.02));
    b.mlp_b2 = ParameterT<T>(prefix + ".mlp.b2", TensorT<T>::zeros({w}));
  }
  m.ln_f_g = ParameterT<T>("policy.lnf.g", TensorT<T>::full({w}, T(1)));
  m.ln_f_b = ParameterT<T>("policy.lnf.b", TensorT<T>::zeros({w}));
  m.head_w = ParameterT<T>("policy.head.w", TensorT<T>::randn({w, v}, rng, 0.02));
  m.head_b = ParameterT<T>("policy.head.b", TensorT<T>::zeros({v}));
  return m;
}

template <typename T>
std::vector<ParameterT<T>*> PolicyModelT<T>::params() {
  std::vector<ParameterT<T>*> out;
  if (config.encoder_mode == EncoderMode::Dual) {
    for (auto* p : dual.frozen.params()) out.push_back(p);
    for (auto* p : dual.trainable.params()) out.push_back(p);
  } else {
    for (auto* p : single.params()) out.push_back(p);
  }
  for (ParameterT<T>* p : {&proj_w, &proj_b, &tok_embed, &pos}) out.push_back(p);
  for (auto& b : blocks) b.collect(out);
  for (ParameterT<T>* p : {&ln_f_g, &ln_f_b, &head_w, &head_b}) out.push_back(p);
  return out;
}

template <typename T>
std::vector<const ParameterT<T>*> PolicyModelT<T>::params() const {
  auto mutable_params = const_cast<PolicyModelT<T>*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
std::vector<ParameterT<T>*> PolicyModelT<T>::trainable_params() {
  std::vector<ParameterT<T>*> out;
  for (auto* p : params()) {
    if (!p->frozen) out.push_back(p);
  }
  return out;
}

template <typename T>
std::uint64_t PolicyModelT<T>::value_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params()) {
    h = fnv1a(p->value.data.data(), p->value.data.size() * sizeof(T), h);
  }
  return h;
}

template <typename T>
void PolicyModelT<T>::zero_grads() {
  for (auto* p : params()) p->zero_grad();
}

std::vector<std::int32_t> build_prompt_ids(const std::string& instruction,
                                           const Vocabulary& vocab) {
  std::vector<std::int32_t> ids;
  ids.push_back(vocab.bos());
  const TokenSequence t = tokenize_text(instruction, vocab);
  ids.insert(ids.end(), t.ids.begin(), t.ids.end());
  ids.push_back(vocab.answer_start());
  return ids;
}

PolicySample build_robot_sample(const RobotStepRecord& record, const Vocabulary& vocab,
                                const CodecConfig& codec, const BinCodecConfig& bin_codec,
                                CodecMode mode) {
  PolicySample s;
  s.obs = record.obs;
  s.is_robot = true;
  s.prompt_ids = build_prompt_ids(record.instruction, vocab);
  if (mode == CodecMode::String) {
    for (const auto& tok : encode_chunk(record.label, codec)) s.target_ids.push_back(vocab.id(tok));
    s.target_ids.push_back(vocab.eos());
  } else {
    for (const auto& action : record.label.actions) {
      for (std::int32_t bin : bin_encode(action, bin_codec)) {
        s.target_ids.push_back(vocab.bin_token_id(bin));
      }
    }
  }
  return s;
}

PolicySample build_vl_sample(const VLSample& sample, const Vocabulary& vocab) {
  PolicySample s;
  s.obs = sample.obs;
  s.is_robot = false;
  s.prompt_ids = build_prompt_ids(sample.question, vocab);
  const TokenSequence a = tokenize_text(sample.answer, vocab);
  s.target_ids = a.ids;
  s.target_ids.push_back(vocab.eos());
  return s;
}

namespace {

// Prefix attention: every position sees all image patches; token positions
// are causal among themselves.
std::vector<std::uint8_t> prefix_mask(std::int64_t patches, std::int64_t seq) {
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(seq * seq), 0);
  for (std::int64_t i = 0; i < seq; ++i) {
    for (std::int64_t j = 0; j < seq; ++j) {
      allowed[static_cast<std::size_t>(i * seq + j)] = (j < patches || j <= i) ? 1 : 0;
    }
  }
  return allowed;
}

// Projected image context positions, as a tape node. The full differentiable
// path; training uses this.
template <typename T>
VarT<T> image_context(TapeT<T>& tape, ParamBinderT<T>& bind, PolicyModelT<T>& model,
                      const ImageObservation& obs) {
  VarT<T> feats = model.config.encoder_mode == EncoderMode::Dual
                      ? dual_encoder_forward(tape, bind, model.dual, obs)
                      : encoder_forward(tape, bind, model.single, obs);
  return add_bias(matmul(feats, bind(model.proj_w)), bind(model.proj_b));
}

// Decoder over [image context][tokens].
template <typename T>
VarT<T> decoder_hidden(TapeT<T>& tape, ParamBinderT<T>& bind, PolicyModelT<T>& model,
                       VarT<T> img, const std::vector<std::int32_t>& token_ids) {
  const std::int64_t patches = model.config.encoder.num_patches();
  const std::int64_t seq = patches + static_cast<std::int64_t>(token_ids.size());
  if (seq > model.config.max_seq) {
    throw std::invalid_argument("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                                std::to_string(model.config.max_seq) +
                                "; refusing to truncate silently");
  }
  VarT<T> tok = embed_rows(bind(model.tok_embed), token_ids);
  VarT<T> x = concat_rows<T>({img, tok});
  x = add(x, slice_rows(bind(model.pos), 0, seq));
  const std::vector<std::uint8_t> allowed = prefix_mask(patches, seq);
  for (auto& block : model.blocks) {
    x = transformer_block(tape, bind, block, x, model.config.heads, allowed);
  }
  return layer_norm(x, bind(model.ln_f_g), bind(model.ln_f_b));
}

template <typename T>
VarT<T> policy_hidden(TapeT<T>& tape, ParamBinderT<T>& bind, PolicyModelT<T>& model,
                      const ImageObservation& obs, const std::vector<std::int32_t>& token_ids) {
  VarT<T> img = image_context(tape, bind, model, obs);
  return decoder_hidden(tape, bind, model, img, token_ids);
}

}  // namespace

template <typename T>
VarT<T> policy_forward_loss(TapeT<T>& tape, ParamBinderT<T>& bind, PolicyModelT<T>& model,
                            const PolicySample& sample) {
  if (sample.target_ids.empty()) {
    throw std::runtime_error("cross_entropy: no supervised positions (empty target)");
  }
  const std::int64_t patches = model.config.encoder.num_patches();
  std::vector<std::int32_t> tokens = sample.prompt_ids;
  tokens.insert(tokens.end(), sample.target_ids.begin(), sample.target_ids.end());
  VarT<T> h = policy_hidden(tape, bind, model, sample.obs, tokens);

  // Positions that predict the target tokens: the ANS token through the
  // next-to-last target token.
  const std::int64_t lp = static_cast<std::int64_t>(sample.prompt_ids.size());
  const std::int64_t lt = static_cast<std::int64_t>(sample.target_ids.size());
  const std::int64_t r0 = patches + lp - 1;
  VarT<T> h_sup = slice_rows(h, r0, r0 + lt);
  VarT<T> logits = add_bias(matmul(h_sup, bind(model.head_w)), bind(model.head_b));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(lt), 1);
  return cross_entropy(logits, sample.target_ids, mask);
}

template <typename T>
TensorT<T> policy_all_logits(PolicyModelT<T>& model, const ImageObservation& obs,
                             const std::vector<std::int32_t>& token_ids) {
  TapeT<T> tape;
  ParamBinderT<T> bind(tape);
  VarT<T> h = policy_hidden(tape, bind, model, obs, token_ids);
  VarT<T> logits = add_bias(matmul(h, bind(model.head_w)), bind(model.head_b));
  return tape.value(logits);
}

namespace {

int default_token_budget(const PolicyModelT<float>& model) {
  if (model.config.codec_mode == CodecMode::Bin) return model.config.horizon * 7;
  // Signed scalar: decimals + 3 tokens; 6 scalars + gripper + 6 separators
  // per action, action separators, EOS.
  const int per_action = 6 * (model.codec.decimals + 3) + 1 + 6;
  return model.config.horizon * (per_action + 1) + 2;
}

}  // namespace

std::vector<std::int32_t> policy_generate(PolicyModelT<float>& model, const ImageObservation& obs,
                                          const std::vector<std::int32_t>& prompt_ids,
                                          const GenerationConfig& gen, Rng* rng) {
  gen.validate();
  const int budget = gen.max_new_tokens > 0 ? gen.max_new_tokens : default_token_budget(model);
  const std::int64_t patches = model.config.encoder.num_patches();
  std::vector<std::int32_t> ids = prompt_ids;
  std::vector<std::int32_t> out;

  const bool bin_mode = model.config.codec_mode == CodecMode::Bin;
  const std::int32_t bin_lo = bin_mode ? model.vocab.bin_token_id(0) : 0;
  const std::int32_t bin_hi =
      bin_mode ? model.vocab.bin_token_id(model.vocab.num_bin_tokens() - 1) : 0;

  // The image never changes within one call, so its projected context is
  // computed once and re-entered as a constant for every decoding step.
  TensorT<float> img_ctx;
  {
    TapeT<float> tape;
    ParamBinderT<float> bind(tape);
    img_ctx = tape.value(image_context(tape, bind, model, obs));
  }

  for (int t = 0; t < budget; ++t) {
    if (patches + static_cast<std::int64_t>(ids.size()) + 1 > model.config.max_seq) break;
    TapeT<float> tape;
    ParamBinderT<float> bind(tape);
    VarT<float> h = decoder_hidden(tape, bind, model, tape.constant(img_ctx), ids);
    const std::int64_t last = tape.value(h).rows() - 1;
    VarT<float> h_last = slice_rows(h, last, last + 1);
    VarT<float> logits = add_bias(matmul(h_last, bind(model.head_w)), bind(model.head_b));
    const auto& row = tape.value(logits).data;

    std::int32_t lo = 0, hi = static_cast<std::int32_t>(row.size()) - 1;
    if (bin_mode) {
      lo = bin_lo;
      hi = bin_hi;
    }
    std::int32_t next;
    if (gen.mode == GenerationConfig::Mode::Greedy) {
      next = lo;
      for (std::int32_t i = lo; i <= hi; ++i) {
        if (row[static_cast<std::size_t>(i)] > row[static_cast<std::size_t>(next)]) next = i;
      }
    } else {
      if (rng == nullptr) throw std::invalid_argument("sampling generation requires an rng");
      double mx = row[static_cast<std::size_t>(lo)];
      for (std::int32_t i = lo; i <= hi; ++i) mx = std::max<double>(mx, row[static_cast<std::size_t>(i)]);
      std::vector<double> p(static_cast<std::size_t>(hi - lo + 1));
      double sum = 0;
      for (std::int32_t i = lo; i <= hi; ++i) {
        p[static_cast<std::size_t>(i - lo)] =
            std::exp((row[static_cast<std::size_t>(i)] - mx) / gen.temperature);
        sum += p[static_cast<std::size_t>(i - lo)];
      }
      double r = rng->uniform() * sum;
      next = hi;
      for (std::int32_t i = lo; i <= hi; ++i) {
        r -= p[static_cast<std::size_t>(i - lo)];
        if (r <= 0) {
          next = i;
          break;
        }
      }
    }
    if (!bin_mode && next == model.vocab.eos()) break;
    out.push_back(next);
    ids.push_back(next);
  }
  return out;
}

PredictResult predict_action(PolicyModelT<float>& model, const ImageObservation& obs,
                             const std::string& instruction, const GenerationConfig& gen,
                             Rng* rng) {
  PredictResult result;
  const std::vector<std::int32_t> prompt = build_prompt_ids(instruction, model.vocab);
  result.raw_ids = policy_generate(model, obs, prompt, gen, rng);

  if (model.config.codec_mode == CodecMode::Bin) {
    const int expect = model.config.horizon * 7;
    if (static_cast<int>(result.raw_ids.size()) != expect) {
      result.failure = FormatFailure{"bin decode expects " + std::to_string(expect) + " tokens, got " +
                                         std::to_string(result.raw_ids.size()),
                                     result.raw_ids.size()};
      return result;
    }
    ActionChunk chunk;
    for (int h = 0; h < model.config.horizon; ++h) {
      std::vector<std::int32_t> bins;
      for (int c = 0; c < 7; ++c) {
        const std::int32_t idx = model.vocab.bin_index_of(result.raw_ids[static_cast<std::size_t>(h * 7 + c)]);
        if (idx < 0) {
          result.failure = FormatFailure{"non-bin token in bin-codec output",
                                         static_cast<std::size_t>(h * 7 + c)};
          return result;
        }
        bins.push_back(idx);
      }
      chunk.actions.push_back(bin_decode(bins, model.bin_codec));
    }
    result.chunk = std::move(chunk);
    return result;
  }

  std::vector<std::string> tokens;
  tokens.reserve(result.raw_ids.size());
  for (std::int32_t id : result.raw_ids) tokens.push_back(model.vocab.token(id));
  try {
    ActionChunk chunk = decode_chunk(tokens, model.codec);
    for (const auto& a : chunk.actions) a.validate();
    if (static_cast<int>(chunk.actions.size()) != model.config.horizon) {
      result.failure = FormatFailure{"chunk horizon " + std::to_string(chunk.actions.size()) +
                                         " does not match policy horizon " +
                                         std::to_string(model.config.horizon),
                                     0};
      return result;
    }
    result.chunk = std::move(chunk);
  } catch (const CodecError& e) {
    result.failure = FormatFailure{e.what(), e.position()};
  } catch (const std::invalid_argument& e) {
    result.failure = FormatFailure{e.what(), 0};
  }
  return result;
}

template struct PolicyModelT<float>;
template struct PolicyModelT<double>;
template VarT<float> policy_forward_loss(TapeT<float>&, ParamBinderT<float>&, PolicyModelT<float>&,
                                         const PolicySample&);
template VarT<double> policy_forward_loss(TapeT<double>&, ParamBinderT<double>&,
                                          PolicyModelT<double>&, const PolicySample&);
template TensorT<float> policy_all_logits(PolicyModelT<float>&, const ImageObservation&,
                                          const std::vector<std::int32_t>&);
template TensorT<double> policy_all_logits(PolicyModelT<double>&, const ImageObservation&,
                                           const std::vector<std::int32_t>&);

}  // namespace microvla
