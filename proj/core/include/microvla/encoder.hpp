#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "microvla/datasets.hpp"
#include "microvla/env.hpp"
#include "microvla/optim.hpp"
#include "microvla/tape.hpp"
#include "microvla/tensor.hpp"

namespace microvla {

struct EncoderConfig {
  int image_size = 32;
  int patch_size = 4;
  int embed_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int mlp_ratio = 4;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return patch_size * patch_size * 3; }
  void validate() const;
};

// One transformer block's parameters; shared layout between the vision
// encoder and the policy decoder.
template <typename T>
struct BlockParamsT {
  ParameterT<T> ln1_g, ln1_b;
  ParameterT<T> wq, bq, wk, bk, wv, bv, wo, bo;
  ParameterT<T> ln2_g, ln2_b;
  ParameterT<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;

  void collect(std::vector<ParameterT<T>*>& out);
};

template <typename T>
struct EncoderParamsT {
  EncoderConfig config;
  ParameterT<T> patch_w, patch_b;
  ParameterT<T> pos;
  std::vector<BlockParamsT<T>> blocks;
  ParameterT<T> ln_f_g, ln_f_b;

  static EncoderParamsT init(const EncoderConfig& config, Rng& rng, const std::string& prefix);

  std::vector<ParameterT<T>*> params();
  std::vector<const ParameterT<T>*> params() const;
  void set_frozen(bool frozen);
  void rename_prefix(const std::string& old_prefix, const std::string& new_prefix);
  std::uint64_t value_hash() const;
  void zero_grads();

  template <typename U>
  EncoderParamsT<U> cast() const;
};

// The partially-frozen pair: one anchor copy that never trains, one copy that
// keeps adapting. Byte-identical at creation.
template <typename T>
struct DualEncoderStateT {
  EncoderParamsT<T> frozen;
  EncoderParamsT<T> trainable;
};

template <typename T>
DualEncoderStateT<T> make_dual(const EncoderParamsT<T>& pretrained);

// Patch pixels as a [num_patches x patch_dim] tensor (no gradient).
template <typename T>
TensorT<T> patchify(const ImageObservation& obs, const EncoderConfig& config);

// Full-attention patch transformer: [num_patches x embed_dim] features.
template <typename T>
VarT<T> encoder_forward(TapeT<T>& tape, ParamBinderT<T>& bind, EncoderParamsT<T>& params,
                        const ImageObservation& obs);

// Dual path: frozen features in the first half, trainable in the second.
template <typename T>
VarT<T> dual_encoder_forward(TapeT<T>& tape, ParamBinderT<T>& bind, DualEncoderStateT<T>& state,
                             const ImageObservation& obs);

// Shared transformer block body (pre-LN attention + MLP with residuals).
// `allowed` is the row-major attention mask; empty means full attention.
template <typename T>
VarT<T> transformer_block(TapeT<T>& tape, ParamBinderT<T>& bind, BlockParamsT<T>& block,
                          VarT<T> x, int num_heads, const std::vector<std::uint8_t>& allowed);

// Mean-pooled features without recording gradients anywhere, for probes.
template <typename T>
std::vector<T> pooled_features(EncoderParamsT<T>& params, const ImageObservation& obs);

// ---- encoder pretraining (supervised shape x color classification) ----

struct PretrainConfig {
  int steps = 1500;
  int batch = 32;
  std::uint64_t seed = 7;
  AdamWOptions adamw{.lr = 1e-3, .weight_decay = 0.01};
  double target_train_accuracy = 0.9;
};

struct PretrainResult {
  EncoderParamsT<float> encoder;
  double train_accuracy = 0;
};

// Trains encoder + linear head on the class dataset, discards the head, and
// returns the backbone. Throws (naming config and seed) when the run cannot
// clear target_train_accuracy.
PretrainResult pretrain_encoder(const std::vector<ClassSample>& data, const EncoderConfig& config,
                                const PretrainConfig& pretrain);

extern template struct BlockParamsT<float>;
extern template struct BlockParamsT<double>;
extern template struct EncoderParamsT<float>;
extern template struct EncoderParamsT<double>;
extern template struct DualEncoderStateT<float>;
extern template struct DualEncoderStateT<double>;
extern template DualEncoderStateT<float> make_dual(const EncoderParamsT<float>&);
extern template DualEncoderStateT<double> make_dual(const EncoderParamsT<double>&);
extern template TensorT<float> patchify(const ImageObservation&, const EncoderConfig&);
extern template TensorT<double> patchify(const ImageObservation&, const EncoderConfig&);
extern template VarT<float> encoder_forward(TapeT<float>&, ParamBinderT<float>&,
                                            EncoderParamsT<float>&, const ImageObservation&);
extern template VarT<double> encoder_forward(TapeT<double>&, ParamBinderT<double>&,
                                             EncoderParamsT<double>&, const ImageObservation&);
extern template VarT<float> dual_encoder_forward(TapeT<float>&, ParamBinderT<float>&,
                                                 DualEncoderStateT<float>&,
                                                 const ImageObservation&);
extern template VarT<double> dual_encoder_forward(TapeT<double>&, ParamBinderT<double>&,
                                                  DualEncoderStateT<double>&,
                                                  const ImageObservation&);
extern template VarT<float> transformer_block(TapeT<float>&, ParamBinderT<float>&,
                                              BlockParamsT<float>&, VarT<float>, int,
                                              const std::vector<std::uint8_t>&);
extern template VarT<double> transformer_block(TapeT<double>&, ParamBinderT<double>&,
                                               BlockParamsT<double>&, VarT<double>, int,
                                               const std::vector<std::uint8_t>&);
extern template std::vector<float> pooled_features(EncoderParamsT<float>&,
                                                   const ImageObservation&);
extern template std::vector<double> pooled_features(EncoderParamsT<double>&,
                                                    const ImageObservation&);

using EncoderParams = EncoderParamsT<float>;
using DualEncoderState = DualEncoderStateT<float>;

}  // namespace microvla
