#include "microvla/encoder.hpp"

#include <cmath>
#include <stdexcept>

#ifdef MICROVLA_OPENMP
#include <omp.h>
#endif

namespace microvla {

void EncoderConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
    throw std::invalid_argument("image size " + std::to_string(image_size) +
                                " not divisible by patch size " + std::to_string(patch_size));
  }
  if (embed_dim % num_heads != 0) {
    throw std::invalid_argument("embed_dim must be divisible by num_heads");
  }
}

template <typename T>
void BlockParamsT<T>::collect(std::vector<ParameterT<T>*>& out) {
  for (ParameterT<T>* p : {&ln1_g, &ln1_b, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo, &ln2_g, &ln2_b,
                           &mlp_w1, &mlp_b1, &mlp_w2, &mlp_b2}) {
    out.push_back(p);
  }
}

namespace {

template <typename T>
BlockParamsT<T> init_block(std::int64_t dim, int mlp_ratio, Rng& rng, const std::string& prefix) {
  const double std = 0.02;
  const std::int64_t hidden = dim * mlp_ratio;
  BlockParamsT<T> b;
  b.ln1_g = ParameterT<T>(prefix + ".ln1.g", TensorT<T>::full({dim}, T(1)));
  b.ln1_b = ParameterT<T>(prefix + ".ln1.b", TensorT<T>::zeros({dim}));
  b.wq = ParameterT<T>(prefix + ".attn.wq", TensorT<T>::randn({dim, dim}, rng, std));
  b.bq = ParameterT<T>(prefix + ".attn.bq", TensorT<T>::zeros({dim}));
  b.wk = ParameterT<T>(prefix + ".attn.wk", TensorT<T>::randn({dim, dim}, rng, std));
  b.bk = ParameterT<T>(prefix + ".attn.bk", TensorT<T>::zeros({dim}));
  b.wv = ParameterT<T>(prefix + ".attn.wv", TensorT<T>::randn({dim, dim}, rng, std));
  b.bv = ParameterT<T>(prefix + ".attn.bv", TensorT<T>::zeros({dim}));
  b.wo = ParameterT<T>(prefix + ".attn.wo", TensorT<T>::randn({dim, dim}, rng, std));
  b.bo = ParameterT<T>(prefix + ".attn.bo", TensorT<T>::zeros({dim}));
  b.ln2_g = ParameterT<T>(prefix + ".ln2.g", TensorT<T>::full({dim}, T(1)));
  b.ln2_b = ParameterT<T>(prefix + ".ln2.b", TensorT<T>::zeros({dim}));
  b.mlp_w1 = ParameterT<T>(prefix + ".mlp.w1", TensorT<T>::randn({dim, hidden}, rng, std));
  b.mlp_b1 = ParameterT<T>(prefix + ".mlp.b1", TensorT<T>::zeros({hidden}));
  b.mlp_w2 = ParameterT<T>(prefix + ".mlp.w2", TensorT<T>::randn({hidden, dim}, rng, std));
  b.mlp_b2 = ParameterT<T>(prefix + ".mlp.b2", TensorT<T>::zeros({dim}));
  return b;
}

}  // namespace

template <typename T>
EncoderParamsT<T> EncoderParamsT<T>::init(const EncoderConfig& config, Rng& rng,
                                          const std::string& prefix) {
  config.validate();
  EncoderParamsT<T> e;
  e.config = config;
  const std::int64_t d = config.embed_dim;
  e.patch_w = ParameterT<T>(prefix + ".patch.w",
                            TensorT<T>::randn({config.patch_dim(), d}, rng, 0.02));
  e.patch_b = ParameterT<T>(prefix + ".patch.b", TensorT<T>::zeros({d}));
  e.pos = ParameterT<T>(prefix + ".pos", TensorT<T>::randn({config.num_patches(), d}, rng, 0.01));
  for (int l = 0; l < config.num_layers; ++l) {
    e.blocks.push_back(init_block<T>(d, config.mlp_ratio, rng, prefix + ".block" + std::to_string(l)));
  }
  e.ln_f_g = ParameterT<T>(prefix + ".lnf.g", TensorT<T>::full({d}, T(1)));
  e.ln_f_b = ParameterT<T>(prefix + ".lnf.b", TensorT<T>::zeros({d}));
  return e;
}

template <typename T>
std::vector<ParameterT<T>*> EncoderParamsT<T>::params() {
  std::vector<ParameterT<T>*> out = {&patch_w, &patch_b, &pos};
  for (auto& b : blocks) b.collect(out);
  out.push_back(&ln_f_g);
  out.push_back(&ln_f_b);
  return out;
}

template <typename T>
std::vector<const ParameterT<T>*> EncoderParamsT<T>::params() const {
  auto mutable_params = const_cast<EncoderParamsT<T>*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

template <typename T>
void EncoderParamsT<T>::set_frozen(bool frozen) {
  for (auto* p : params()) p->frozen = frozen;
}

template <typename T>
void EncoderParamsT<T>::rename_prefix(const std::string& old_prefix,
                                      const std::string& new_prefix) {
  for (auto* p : params()) {
    if (p->name.rfind(old_prefix, 0) == 0) {
      p->name = new_prefix + p->name.substr(old_prefix.size());
    }
  }
}

template <typename T>
std::uint64_t EncoderParamsT<T>::value_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params()) {
    h = fnv1a(p->value.data.data(), p->value.data.size() * sizeof(T), h);
  }
  return h;
}

template <typename T>
void EncoderParamsT<T>::zero_grads() {
  for (auto* p : params()) p->zero_grad();
}

template <typename T>
template <typename U>
EncoderParamsT<U> EncoderParamsT<T>::cast() const {
  EncoderParamsT<U> out;
  out.config = config;
  auto src = params();
  // Rebuild with the same structure, then overwrite tensors.
  Rng dummy(0);
  out = EncoderParamsT<U>::init(config, dummy, "tmp");
  auto dst = out.params();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<U>();
    dst[i]->grad = TensorT<U>::zeros(src[i]->value.shape);
    dst[i]->frozen = src[i]->frozen;
    dst[i]->name = src[i]->name;
  }
  return out;
}

template <typename T>
DualEncoderStateT<T> make_dual(const EncoderParamsT<T>& pretrained) {
  DualEncoderStateT<T> state{pretrained, pretrained};
  state.frozen.rename_prefix("enc", "enc_frozen");
  state.frozen.set_frozen(true);
  state.trainable.rename_prefix("enc", "enc_train");
  state.trainable.set_frozen(false);
  return state;
}

template <typename T>
TensorT<T> patchify(const ImageObservation& obs, const EncoderConfig& config) {
  if (obs.height != config.image_size || obs.width != config.image_size) {
    throw std::invalid_argument("observation " + std::to_string(obs.height) + "x" +
                                std::to_string(obs.width) + " does not match encoder image size " +
                                std::to_string(config.image_size));
  }
  const int g = config.grid(), ps = config.patch_size;
  TensorT<T> out({config.num_patches(), config.patch_dim()});
  std::int64_t row = 0;
  for (int pr = 0; pr < g; ++pr) {
    for (int pc = 0; pc < g; ++pc, ++row) {
      std::int64_t col = 0;
      for (int r = 0; r < ps; ++r) {
        for (int c = 0; c < ps; ++c) {
          for (int ch = 0; ch < 3; ++ch, ++col) {
            out.at(row, col) = static_cast<T>(obs.at(pr * ps + r, pc * ps + c, ch));
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
VarT<T> transformer_block(TapeT<T>& tape, ParamBinderT<T>& bind, BlockParamsT<T>& block,
                          VarT<T> x, int num_heads, const std::vector<std::uint8_t>& allowed) {
  VarT<T> h = layer_norm(x, bind(block.ln1_g), bind(block.ln1_b));
  VarT<T> q = add_bias(matmul(h, bind(block.wq)), bind(block.bq));
  VarT<T> k = add_bias(matmul(h, bind(block.wk)), bind(block.bk));
  VarT<T> v = add_bias(matmul(h, bind(block.wv)), bind(block.bv));
  VarT<T> attn_out = multi_head_attention(q, k, v, num_heads, allowed);
  VarT<T> attn = add_bias(matmul(attn_out, bind(block.wo)), bind(block.bo));
  x = add(x, attn);

  VarT<T> m = layer_norm(x, bind(block.ln2_g), bind(block.ln2_b));
  m = gelu(add_bias(matmul(m, bind(block.mlp_w1)), bind(block.mlp_b1)));
  m = add_bias(matmul(m, bind(block.mlp_w2)), bind(block.mlp_b2));
  return add(x, m);
}

template <typename T>
VarT<T> encoder_forward(TapeT<T>& tape, ParamBinderT<T>& bind, EncoderParamsT<T>& params,
                        const ImageObservation& obs) {
  VarT<T> patches = tape.constant(patchify<T>(obs, params.config));
  VarT<T> x = add_bias(matmul(patches, bind(params.patch_w)), bind(params.patch_b));
  x = add(x, bind(params.pos));
  static const std::vector<std::uint8_t> kFullAttention;
  for (auto& block : params.blocks) {
    x = transformer_block(tape, bind, block, x, params.config.num_heads, kFullAttention);
  }
  return layer_norm(x, bind(params.ln_f_g), bind(params.ln_f_b));
}

template <typename T>
VarT<T> dual_encoder_forward(TapeT<T>& tape, ParamBinderT<T>& bind, DualEncoderStateT<T>& state,
                             const ImageObservation& obs) {
  VarT<T> anchor = encoder_forward(tape, bind, state.frozen, obs);
  VarT<T> adapted = encoder_forward(tape, bind, state.trainable, obs);
  return concat_cols<T>({anchor, adapted});
}

template <typename T>
std::vector<T> pooled_features(EncoderParamsT<T>& params, const ImageObservation& obs) {
  TapeT<T> tape;
  ParamBinderT<T> bind(tape);
  // Bind as constants regardless of frozen flags: probing must never touch
  // gradients or parameter bytes.
  const bool was_frozen = params.patch_w.frozen;
  std::vector<bool> saved;
  auto ps = params.params();
  saved.reserve(ps.size());
  for (auto* p : ps) {
    saved.push_back(p->frozen);
    p->frozen = true;
  }
  VarT<T> feats = encoder_forward(tape, bind, params, obs);
  VarT<T> pooled = concat_cols<T>({mean_rows(feats), max_rows(feats)});
  const TensorT<T>& v = tape.value(pooled);
  std::vector<T> out(v.data.begin(), v.data.end());
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->frozen = saved[i];
  (void)was_frozen;
  return out;
}

// ---- pretraining ----

PretrainResult pretrain_encoder(const std::vector<ClassSample>& data, const EncoderConfig& config,
                                const PretrainConfig& pretrain) {
  if (data.empty()) throw std::invalid_argument("pretrain_encoder: empty class dataset");
  config.validate();
  Rng init_rng(derive_seed(pretrain.seed, "encoder-init"));
  EncoderParamsT<float> enc = EncoderParamsT<float>::init(config, init_rng, "enc");
  const int classes = num_classes();
  ParameterT<float> head_w("head.w",
                           TensorT<float>::randn({2 * config.embed_dim, classes}, init_rng, 0.2f));
  ParameterT<float> head_b("head.b", TensorT<float>::zeros({classes}));

  std::vector<ParameterT<float>*> params = enc.params();
  params.push_back(&head_w);
  params.push_back(&head_b);

  AdamWT<float> opt(pretrain.adamw);
  Rng order_rng(derive_seed(pretrain.seed, "encoder-batch"));

  struct SampleGrad {
    std::vector<TensorT<float>> grads;
  };

  const auto forward_loss = [&](const ClassSample& s, ParamBinderT<float>& bind,
                                TapeT<float>& tape) {
    VarT<float> feats = encoder_forward(tape, bind, enc, s.obs);
    VarT<float> pooled = concat_cols<float>({mean_rows(feats), max_rows(feats)});
    VarT<float> logits = add_bias(matmul(pooled, bind(head_w)), bind(head_b));
    return cross_entropy(logits, {s.label}, {1});
  };

  std::vector<std::size_t> order = random_permutation(data.size(), order_rng);
  std::size_t cursor = 0;
  for (int step_i = 0; step_i < pretrain.steps; ++step_i) {
    std::vector<const ClassSample*> batch;
    batch.reserve(static_cast<std::size_t>(pretrain.batch));
    for (int b = 0; b < pretrain.batch; ++b) {
      if (cursor >= order.size()) {
        order = random_permutation(data.size(), order_rng);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    for (auto* p : params) p->zero_grad();

    std::vector<std::vector<std::pair<ParameterT<float>*, TensorT<float>>>> per_sample(
        batch.size());
#ifdef MICROVLA_OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      TapeT<float> tape;
      ParamBinderT<float> bind(tape);
      VarT<float> loss = forward_loss(*batch[bi], bind, tape);
      tape.backward(loss);
      auto& grads = per_sample[bi];
      for (const auto& [ptr, var] : bind.bound()) {
        if (!ptr->frozen) grads.emplace_back(ptr, tape.grad(var));
      }
    }
    const float inv = 1.0f / static_cast<float>(batch.size());
    for (const auto& grads : per_sample) {
      for (const auto& [ptr, g] : grads) {
        for (std::size_t i = 0; i < g.data.size(); ++i) ptr->grad.data[i] += inv * g.data[i];
      }
    }
    opt.step(params);
  }

  // Train-set accuracy gate over a fixed subset.
  const std::size_t eval_n = std::min<std::size_t>(data.size(), 1000);
  std::int64_t correct = 0;
#ifdef MICROVLA_OPENMP
#pragma omp parallel for schedule(dynamic, 8) reduction(+ : correct)
#endif
  for (std::size_t i = 0; i < eval_n; ++i) {
    TapeT<float> tape;
    ParamBinderT<float> bind(tape);
    VarT<float> feats = encoder_forward(tape, bind, enc, data[i].obs);
    VarT<float> pooled = concat_cols<float>({mean_rows(feats), max_rows(feats)});
    VarT<float> logits = add_bias(matmul(pooled, bind(head_w)), bind(head_b));
    const auto& row = tape.value(logits).data;
    int best = 0;
    for (int c = 1; c < classes; ++c) {
      if (row[static_cast<std::size_t>(c)] > row[static_cast<std::size_t>(best)]) best = c;
    }
    if (best == data[i].label) ++correct;
  }
  PretrainResult result{std::move(enc), static_cast<double>(correct) / static_cast<double>(eval_n)};
  if (result.train_accuracy < pretrain.target_train_accuracy) {
    throw std::runtime_error(
        "encoder pretraining reached only " + std::to_string(result.train_accuracy) +
        " train accuracy (target " + std::to_string(pretrain.target_train_accuracy) +
        "); adjust steps/lr or seed " + std::to_string(pretrain.seed));
  }
  return result;
}

// ---- explicit instantiations ----

template struct BlockParamsT<float>;
template struct BlockParamsT<double>;
template struct EncoderParamsT<float>;
template struct EncoderParamsT<double>;
template struct DualEncoderStateT<float>;
template struct DualEncoderStateT<double>;
template EncoderParamsT<double> EncoderParamsT<float>::cast<double>() const;
template EncoderParamsT<float> EncoderParamsT<double>::cast<float>() const;
template EncoderParamsT<float> EncoderParamsT<float>::cast<float>() const;
template DualEncoderStateT<float> make_dual(const EncoderParamsT<float>&);
template DualEncoderStateT<double> make_dual(const EncoderParamsT<double>&);
template TensorT<float> patchify(const ImageObservation&, const EncoderConfig&);
template TensorT<double> patchify(const ImageObservation&, const EncoderConfig&);
template VarT<float> encoder_forward(TapeT<float>&, ParamBinderT<float>&, EncoderParamsT<float>&,
                                     const ImageObservation&);
template VarT<double> encoder_forward(TapeT<double>&, ParamBinderT<double>&,
                                      EncoderParamsT<double>&, const ImageObservation&);
template VarT<float> dual_encoder_forward(TapeT<float>&, ParamBinderT<float>&,
                                          DualEncoderStateT<float>&, const ImageObservation&);
template VarT<double> dual_encoder_forward(TapeT<double>&, ParamBinderT<double>&,
                                           DualEncoderStateT<double>&, const ImageObservation&);
template VarT<float> transformer_block(TapeT<float>&, ParamBinderT<float>&, BlockParamsT<float>&,
                                       VarT<float>, int, const std::vector<std::uint8_t>&);
template VarT<double> transformer_block(TapeT<double>&, ParamBinderT<double>&,
                                        BlockParamsT<double>&, VarT<double>, int,
                                        const std::vector<std::uint8_t>&);
template std::vector<float> pooled_features(EncoderParamsT<float>&, const ImageObservation&);
template std::vector<double> pooled_features(EncoderParamsT<double>&, const ImageObservation&);

}  // namespace microvla
