#include "microvla/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "microvla/io.hpp"

#ifdef MICROVLA_OPENMP
#include <omp.h>
#endif

namespace microvla {

using nlohmann::json;

// ---- mixer ----

int MixerConfig::robot_per_batch() const {
  if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
  if (robot_fraction < 0 || robot_fraction > 1) {
    throw std::invalid_argument("robot_fraction outside [0, 1]");
  }
  const double exact = robot_fraction * batch_size;
  const int rounded = static_cast<int>(std::llround(exact));
  if (std::abs(exact - rounded) > 1e-9) {
    throw std::invalid_argument("robot_fraction * batch_size must be integral, got " +
                                std::to_string(exact));
  }
  return rounded;
}

IndexStream::IndexStream(std::size_t size, std::uint64_t seed, std::string domain)
    : size_(size), seed_(seed), domain_(std::move(domain)) {
  if (size_ == 0) throw std::invalid_argument("IndexStream over empty dataset");
  reshuffle();
}

void IndexStream::reshuffle() {
  Rng rng(derive_seed(seed_, domain_, epoch_));
  order_ = random_permutation(size_, rng);
}

std::size_t IndexStream::next() {
  if (cursor_ >= size_) {
    ++epoch_;
    cursor_ = 0;
    reshuffle();
  }
  return order_[static_cast<std::size_t>(cursor_++)];
}

void IndexStream::restore(std::uint64_t epoch, std::uint64_t cursor) {
  epoch_ = epoch;
  cursor_ = cursor;
  reshuffle();
}

std::vector<BatchEntry> sample_batch(IndexStream& robot, IndexStream& vl,
                                     const MixerConfig& mixer, bool cotrain, std::uint64_t seed,
                                     std::uint64_t step) {
  const int n_robot = cotrain ? mixer.robot_per_batch() : mixer.batch_size;
  const int n_vl = mixer.batch_size - n_robot;
  std::vector<BatchEntry> batch;
  batch.reserve(static_cast<std::size_t>(mixer.batch_size));
  for (int i = 0; i < n_robot; ++i) batch.push_back({true, robot.next()});
  for (int i = 0; i < n_vl; ++i) batch.push_back({false, vl.next()});
  Rng shuffle_rng(derive_seed(seed, "batch-shuffle", step));
  shuffle_rng.shuffle(batch);
  return batch;
}

// ---- config ----

KeyValue TrainConfig::to_kv() const {
  KeyValue kv;
  kv.set_i64("train.steps", steps);
  kv.set_u64("train.seed", seed);
  kv.set_f64("train.lr", adamw.lr);
  kv.set_f64("train.beta1", adamw.beta1);
  kv.set_f64("train.beta2", adamw.beta2);
  kv.set_f64("train.eps", adamw.eps);
  kv.set_f64("train.weight_decay", adamw.weight_decay);
  kv.set_bool("train.cotrain", cotrain);
  kv.set_i64("train.eval_every", eval_every);
  kv.set_i64("train.holdout_samples", holdout_samples);
  kv.set_f64("mixer.robot_fraction", mixer.robot_fraction);
  kv.set_i64("mixer.batch_size", mixer.batch_size);
  kv.set_i64("policy.width", policy.width);
  kv.set_i64("policy.layers", policy.layers);
  kv.set_i64("policy.heads", policy.heads);
  kv.set_i64("policy.max_seq", policy.max_seq);
  kv.set_i64("policy.horizon", policy.horizon);
  kv.set_i64("policy.mlp_ratio", policy.mlp_ratio);
  kv.set("policy.encoder_mode", encoder_mode_name(policy.encoder_mode));
  kv.set("policy.codec_mode", codec_mode_name(policy.codec_mode));
  kv.set_i64("encoder.image_size", policy.encoder.image_size);
  kv.set_i64("encoder.patch_size", policy.encoder.patch_size);
  kv.set_i64("encoder.embed_dim", policy.encoder.embed_dim);
  kv.set_i64("encoder.num_layers", policy.encoder.num_layers);
  kv.set_i64("encoder.num_heads", policy.encoder.num_heads);
  kv.set_i64("encoder.mlp_ratio", policy.encoder.mlp_ratio);
  kv.set_i64("codec.decimals", codec.decimals);
  kv.set_i64("bin.num_bins", bin_codec.num_bins);
  kv.set("data.robot", robot_dataset);
  kv.set("data.vl", vl_dataset);
  kv.set("data.pretrained_encoder", pretrained_encoder);
  return kv;
}

TrainConfig TrainConfig::from_kv(const KeyValue& kv) {
  TrainConfig c;
  c.steps = kv.get_i64("train.steps", c.steps);
  c.seed = kv.get_u64("train.seed", c.seed);
  c.adamw.lr = kv.get_f64("train.lr", c.adamw.lr);
  c.adamw.beta1 = kv.get_f64("train.beta1", c.adamw.beta1);
  c.adamw.beta2 = kv.get_f64("train.beta2", c.adamw.beta2);
  c.adamw.eps = kv.get_f64("train.eps", c.adamw.eps);
  c.adamw.weight_decay = kv.get_f64("train.weight_decay", c.adamw.weight_decay);
  c.cotrain = kv.get_bool("train.cotrain", c.cotrain);
  c.eval_every = kv.get_i64("train.eval_every", c.eval_every);
  c.holdout_samples = kv.get_i64("train.holdout_samples", c.holdout_samples);
  c.mixer.robot_fraction = kv.get_f64("mixer.robot_fraction", c.mixer.robot_fraction);
  c.mixer.batch_size = static_cast<int>(kv.get_i64("mixer.batch_size", c.mixer.batch_size));
  c.policy.width = static_cast<int>(kv.get_i64("policy.width", c.policy.width));
  c.policy.layers = static_cast<int>(kv.get_i64("policy.layers", c.policy.layers));
  c.policy.heads = static_cast<int>(kv.get_i64("policy.heads", c.policy.heads));
  c.policy.max_seq = static_cast<int>(kv.get_i64("policy.max_seq", c.policy.max_seq));
  c.policy.horizon = static_cast<int>(kv.get_i64("policy.horizon", c.policy.horizon));
  c.policy.mlp_ratio = static_cast<int>(kv.get_i64("policy.mlp_ratio", c.policy.mlp_ratio));
  c.policy.encoder_mode = encoder_mode_from(kv.get_str("policy.encoder_mode", "dual"));
  c.policy.codec_mode = codec_mode_from(kv.get_str("policy.codec_mode", "string"));
  c.policy.encoder.image_size = static_cast<int>(kv.get_i64("encoder.image_size", c.policy.encoder.image_size));
  c.policy.encoder.patch_size = static_cast<int>(kv.get_i64("encoder.patch_size", c.policy.encoder.patch_size));
  c.policy.encoder.embed_dim = static_cast<int>(kv.get_i64("encoder.embed_dim", c.policy.encoder.embed_dim));
  c.policy.encoder.num_layers = static_cast<int>(kv.get_i64("encoder.num_layers", c.policy.encoder.num_layers));
  c.policy.encoder.num_heads = static_cast<int>(kv.get_i64("encoder.num_heads", c.policy.encoder.num_heads));
  c.policy.encoder.mlp_ratio = static_cast<int>(kv.get_i64("encoder.mlp_ratio", c.policy.encoder.mlp_ratio));
  c.codec.decimals = static_cast<int>(kv.get_i64("codec.decimals", c.codec.decimals));
  c.bin_codec.num_bins = static_cast<int>(kv.get_i64("bin.num_bins", c.bin_codec.num_bins));
  c.robot_dataset = kv.get_str("data.robot", c.robot_dataset);
  c.vl_dataset = kv.get_str("data.vl", c.vl_dataset);
  c.pretrained_encoder = kv.get_str("data.pretrained_encoder", c.pretrained_encoder);
  return c;
}

// ---- bundles ----

void save_bundle(const std::string& path, const Bundle& bundle) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot write checkpoint '" + path + "'");
  BinaryWriter w(f);
  w.str("MVLABNDL");
  w.u32(kCheckpointFormatVersion);
  w.str(bundle.kind);
  w.str(bundle.config_text);
  w.u64(bundle.vocab_tokens.size());
  for (const auto& t : bundle.vocab_tokens) w.str(t);
  w.i64(bundle.step);
  w.u64(bundle.tensors.size());
  for (const auto& t : bundle.tensors) {
    w.str(t.name);
    w.u8(t.frozen ? 1 : 0);
    w.i64_array(t.tensor.shape);
    w.f32_array(t.tensor.data);
  }
  w.i64(bundle.opt_step);
  w.u64(bundle.opt_slots.size());
  for (const auto& s : bundle.opt_slots) {
    w.str(s.name);
    w.i64_array(s.m.shape);
    w.f32_array(s.m.data);
    w.i64_array(s.v.shape);
    w.f32_array(s.v.data);
  }
  w.str(bundle.rng_state);
  w.u64(bundle.robot_epoch);
  w.u64(bundle.robot_cursor);
  w.u64(bundle.vl_epoch);
  w.u64(bundle.vl_cursor);
  w.finish();
}

Bundle load_bundle(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path + "'");
  BinaryReader r(f);
  Bundle b;
  const std::string magic = r.str();
  if (magic != "MVLABNDL") throw CheckpointError("'" + path + "' is not a checkpoint bundle");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " != expected " + std::to_string(kCheckpointFormatVersion));
  }
  b.kind = r.str();
  b.config_text = r.str();
  const std::uint64_t nv = r.u64();
  for (std::uint64_t i = 0; i < nv; ++i) b.vocab_tokens.push_back(r.str());
  b.step = r.i64();
  const std::uint64_t nt = r.u64();
  for (std::uint64_t i = 0; i < nt; ++i) {
    NamedTensor t;
    t.name = r.str();
    t.frozen = r.u8() != 0;
    auto shape = r.i64_array();
    auto data = r.f32_array();
    t.tensor = TensorT<float>(shape, std::move(data));
    b.tensors.push_back(std::move(t));
  }
  b.opt_step = r.i64();
  const std::uint64_t ns = r.u64();
  for (std::uint64_t i = 0; i < ns; ++i) {
    OptSlotRecord s;
    s.name = r.str();
    auto ms = r.i64_array();
    s.m = TensorT<float>(ms, r.f32_array());
    auto vs = r.i64_array();
    s.v = TensorT<float>(vs, r.f32_array());
    b.opt_slots.push_back(std::move(s));
  }
  b.rng_state = r.str();
  b.robot_epoch = r.u64();
  b.robot_cursor = r.u64();
  b.vl_epoch = r.u64();
  b.vl_cursor = r.u64();
  r.finish();
  return b;
}

void save_encoder_checkpoint(const std::string& path, const EncoderParams& encoder,
                             const KeyValue& config) {
  Bundle b;
  b.kind = "encoder";
  b.config_text = config.canonical_text();
  for (const auto* p : encoder.params()) {
    b.tensors.push_back(NamedTensor{p->name, p->frozen, p->value});
  }
  save_bundle(path, b);
}

EncoderParams load_encoder_checkpoint(const std::string& path) {
  const Bundle b = load_bundle(path);
  if (b.kind != "encoder") {
    throw CheckpointError("'" + path + "' is a " + b.kind + " checkpoint, expected encoder");
  }
  const KeyValue kv = KeyValue::parse_text(b.config_text);
  EncoderConfig config;
  config.image_size = static_cast<int>(kv.get_i64("encoder.image_size", config.image_size));
  config.patch_size = static_cast<int>(kv.get_i64("encoder.patch_size", config.patch_size));
  config.embed_dim = static_cast<int>(kv.get_i64("encoder.embed_dim", config.embed_dim));
  config.num_layers = static_cast<int>(kv.get_i64("encoder.num_layers", config.num_layers));
  config.num_heads = static_cast<int>(kv.get_i64("encoder.num_heads", config.num_heads));
  config.mlp_ratio = static_cast<int>(kv.get_i64("encoder.mlp_ratio", config.mlp_ratio));
  Rng rng(0);
  EncoderParams enc = EncoderParams::init(config, rng, "enc");
  auto params = enc.params();
  if (params.size() != b.tensors.size()) {
    throw CheckpointError("encoder checkpoint has " + std::to_string(b.tensors.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = b.tensors[i];
    if (params[i]->name != t.name || params[i]->value.shape != t.tensor.shape) {
      throw CheckpointError("encoder checkpoint tensor '" + t.name + "' does not match model '" +
                            params[i]->name + "'");
    }
    params[i]->value = t.tensor;
    params[i]->frozen = t.frozen;
  }
  return enc;
}

std::uint64_t frozen_param_hash(const std::vector<const Parameter*>& params) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params) {
    if (!p->frozen) continue;
    h = fnv1a(p->name, h);
    h = fnv1a(p->value.data.data(), p->value.data.size() * sizeof(float), h);
  }
  return h;
}

void save_policy_checkpoint(const std::string& path, const PolicyModel& model,
                            const TrainConfig& config, std::int64_t step, const AdamW& opt,
                            const Rng& rng, const IndexStream& robot, const IndexStream& vl) {
  Bundle b;
  b.kind = "policy";
  b.config_text = config.to_kv().canonical_text();
  b.vocab_tokens = model.vocab.tokens();
  b.step = step;
  for (const auto* p : model.params()) {
    b.tensors.push_back(NamedTensor{p->name, p->frozen, p->value});
  }
  b.opt_step = opt.step_count();
  for (const auto& [name, slot] : opt.slots()) {
    b.opt_slots.push_back(OptSlotRecord{name, slot.m, slot.v});
  }
  b.rng_state = rng.state();
  b.robot_epoch = robot.epoch();
  b.robot_cursor = robot.cursor();
  b.vl_epoch = vl.epoch();
  b.vl_cursor = vl.cursor();
  save_bundle(path, b);
}

namespace {

PolicyModel rebuild_policy(const Bundle& b) {
  if (b.kind != "policy") {
    throw CheckpointError("expected a policy checkpoint, got kind '" + b.kind + "'");
  }
  const TrainConfig config = TrainConfig::from_kv(KeyValue::parse_text(b.config_text));
  const Vocabulary vocab = Vocabulary::from_tokens(b.vocab_tokens);
  Rng rng(0);
  EncoderParams dummy_encoder = EncoderParams::init(config.policy.encoder, rng, "enc");
  PolicyModel model =
      PolicyModel::init(config.policy, vocab, config.codec, config.bin_codec, dummy_encoder, rng);
  auto params = model.params();
  if (params.size() != b.tensors.size()) {
    throw CheckpointError("policy checkpoint has " + std::to_string(b.tensors.size()) +
                          " tensors, model expects " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = b.tensors[i];
    if (params[i]->name != t.name || params[i]->value.shape != t.tensor.shape) {
      throw CheckpointError("policy checkpoint tensor '" + t.name + "' does not match model '" +
                            params[i]->name + "'");
    }
    params[i]->value = t.tensor;
    params[i]->frozen = t.frozen;
    params[i]->zero_grad();
  }
  return model;
}

}  // namespace

PolicyModel load_policy_checkpoint(const std::string& path) {
  return rebuild_policy(load_bundle(path));
}

// ---- trainer ----

Trainer::Trainer(TrainConfig config, std::string out_dir)
    : Trainer(std::move(config), std::move(out_dir), nullptr) {}

Trainer Trainer::resume(const std::string& checkpoint_path, const TrainConfig& config,
                        std::string out_dir) {
  const Bundle b = load_bundle(checkpoint_path);
  // The resumed run must be the same experiment; only the step target and
  // bookkeeping-free fields may differ.
  KeyValue saved = KeyValue::parse_text(b.config_text);
  KeyValue current = config.to_kv();
  saved.set("train.steps", "*");
  current.set("train.steps", "*");
  if (saved.hash() != current.hash()) {
    throw CheckpointError("resume config does not match checkpoint config");
  }
  return Trainer(config, std::move(out_dir), &b);
}

Trainer::Trainer(TrainConfig config, std::string out_dir, const Bundle* restore)
    : config_(std::move(config)),
      out_dir_(std::move(out_dir)),
      opt_(config_.adamw),
      rng_(derive_seed(config_.seed, "trainer")) {
  config_.mixer.validate();
  config_.policy.validate();
  std::filesystem::create_directories(out_dir_);
  metrics_path_ = out_dir_ + "/metrics.jsonl";

  const LoadedDataset robot_ds = load_dataset(config_.robot_dataset);
  if (robot_ds.header.kind != "robot") {
    throw std::runtime_error("'" + config_.robot_dataset + "' is not a robot dataset");
  }
  const LoadedDataset vl_ds = load_dataset(config_.vl_dataset);
  if (vl_ds.header.kind != "vl") {
    throw std::runtime_error("'" + config_.vl_dataset + "' is not a vl dataset");
  }
  if (!(robot_ds.vocab == vl_ds.vocab)) {
    throw std::runtime_error("robot and vl datasets carry different vocabularies");
  }

  if (restore != nullptr) {
    model_ = rebuild_policy(*restore);
    step_ = restore->step;
    std::map<std::string, AdamW::Slot> slots;
    for (const auto& s : restore->opt_slots) {
      slots.emplace(s.name, AdamW::Slot{s.m, s.v});
    }
    opt_.restore(restore->opt_step, std::move(slots));
    rng_.set_state(restore->rng_state);
  } else {
    EncoderParams encoder = load_encoder_checkpoint(config_.pretrained_encoder);
    if (encoder.config.embed_dim != config_.policy.encoder.embed_dim ||
        encoder.config.patch_size != config_.policy.encoder.patch_size ||
        encoder.config.num_layers != config_.policy.encoder.num_layers) {
      throw std::runtime_error("pretrained encoder config does not match policy encoder config");
    }
    Rng init_rng(derive_seed(config_.seed, "policy-init"));
    model_ = PolicyModel::init(config_.policy, robot_ds.vocab, config_.codec, config_.bin_codec,
                               encoder, init_rng);
  }

  // Tail slices are held out of the training streams for loss snapshots.
  const auto holdout = static_cast<std::size_t>(config_.holdout_samples);
  if (robot_ds.robot.size() <= 2 * holdout || vl_ds.vl.size() <= 2 * holdout) {
    throw std::runtime_error("datasets too small for the configured holdout slice");
  }
  const std::size_t robot_n = robot_ds.robot.size() - holdout;
  const std::size_t vl_n = vl_ds.vl.size() - holdout;
  robot_train_.reserve(robot_n);
  for (std::size_t i = 0; i < robot_ds.robot.size(); ++i) {
    PolicySample s = build_robot_sample(robot_ds.robot[i], model_.vocab, config_.codec,
                                        config_.bin_codec, config_.policy.codec_mode);
    (i < robot_n ? robot_train_ : robot_holdout_).push_back(std::move(s));
  }
  vl_train_.reserve(vl_n);
  for (std::size_t i = 0; i < vl_ds.vl.size(); ++i) {
    PolicySample s = build_vl_sample(vl_ds.vl[i], model_.vocab);
    (i < vl_n ? vl_train_ : vl_holdout_).push_back(std::move(s));
  }

  robot_stream_ = IndexStream(robot_train_.size(), config_.seed, "robot-stream");
  vl_stream_ = IndexStream(vl_train_.size(), config_.seed, "vl-stream");
  if (restore != nullptr) {
    robot_stream_.restore(restore->robot_epoch, restore->robot_cursor);
    vl_stream_.restore(restore->vl_epoch, restore->vl_cursor);
  }
}

StepMetrics Trainer::train_step() {
  const std::vector<BatchEntry> batch =
      sample_batch(robot_stream_, vl_stream_, config_.mixer, config_.cotrain, config_.seed,
                   static_cast<std::uint64_t>(step_));
  model_.zero_grads();

  const std::size_t n = batch.size();
  std::vector<double> losses(n, 0.0);
  std::vector<std::vector<std::pair<Parameter*, Tensor>>> per_sample(n);

#ifdef MICROVLA_OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
  for (std::size_t bi = 0; bi < n; ++bi) {
    const PolicySample& sample = batch[bi].robot ? robot_train_[batch[bi].index]
                                                 : vl_train_[batch[bi].index];
    Tape tape;
    ParamBinderT<float> bind(tape);
    Var loss = policy_forward_loss(tape, bind, model_, sample);
    losses[bi] = static_cast<double>(tape.value(loss).data[0]);
    tape.backward(loss);
    auto& grads = per_sample[bi];
    for (const auto& [ptr, var] : bind.bound()) {
      if (!ptr->frozen) grads.emplace_back(ptr, tape.grad(var));
    }
  }

  const float inv = 1.0f / static_cast<float>(n);
  for (const auto& grads : per_sample) {
    for (const auto& [ptr, g] : grads) {
      for (std::size_t i = 0; i < g.data.size(); ++i) ptr->grad.data[i] += inv * g.data[i];
    }
  }
  opt_.step(model_.trainable_params());

  StepMetrics m;
  m.step = step_;
  double robot_sum = 0, vl_sum = 0;
  int robot_n = 0, vl_n = 0;
  for (std::size_t bi = 0; bi < n; ++bi) {
    m.loss += losses[bi];
    if (batch[bi].robot) {
      robot_sum += losses[bi];
      ++robot_n;
    } else {
      vl_sum += losses[bi];
      ++vl_n;
    }
  }
  m.loss /= static_cast<double>(n);
  m.robot_loss = robot_n ? robot_sum / robot_n : std::numeric_limits<double>::quiet_NaN();
  m.vl_loss = vl_n ? vl_sum / vl_n : std::numeric_limits<double>::quiet_NaN();
  return m;
}

double Trainer::snapshot_loss(const std::vector<PolicySample>& samples) const {
  const std::size_t n = std::min<std::size_t>(samples.size(), 32);
  std::vector<double> losses(n, 0.0);
  auto* self = const_cast<Trainer*>(this);
#ifdef MICROVLA_OPENMP
#pragma omp parallel for schedule(dynamic, 1)
#endif
  for (std::size_t i = 0; i < n; ++i) {
    Tape tape;
    ParamBinderT<float> bind(tape);
    Var loss = policy_forward_loss(tape, bind, self->model_, samples[i]);
    losses[i] = static_cast<double>(tape.value(loss).data[0]);
  }
  double sum = 0;
  for (double l : losses) sum += l;
  return n ? sum / static_cast<double>(n) : 0.0;
}

void Trainer::run(const std::function<void(const StepMetrics&)>& on_step) {
  std::ofstream metrics(metrics_path_, std::ios::app);
  if (!metrics) throw std::runtime_error("cannot open metrics log '" + metrics_path_ + "'");

  while (step_ < config_.steps) {
    const std::uint64_t robot_epoch = robot_stream_.epoch();
    const std::uint64_t vl_epoch = vl_stream_.epoch();
    const StepMetrics m = train_step();
    ++step_;

    if (!std::isfinite(m.loss)) {
      const std::string last = last_saved_.empty() ? "(none)" : last_saved_;
      throw std::runtime_error("non-finite loss at step " + std::to_string(step_) +
                               "; last good checkpoint: " + last);
    }

    json j{{"step", step_}, {"loss", m.loss}};
    if (std::isfinite(m.robot_loss)) j["robot_loss"] = m.robot_loss;
    if (std::isfinite(m.vl_loss)) j["vl_loss"] = m.vl_loss;
    metrics << j.dump() << "\n";
    if (robot_stream_.epoch() != robot_epoch) {
      metrics << json{{"step", step_}, {"event", "epoch"}, {"stream", "robot"}, {"epoch", robot_stream_.epoch()}}.dump()
              << "\n";
    }
    if (vl_stream_.epoch() != vl_epoch) {
      metrics << json{{"step", step_}, {"event", "epoch"}, {"stream", "vl"}, {"epoch", vl_stream_.epoch()}}.dump()
              << "\n";
    }

    if (config_.eval_every > 0 && step_ % config_.eval_every == 0) {
      json snap{{"step", step_}, {"event", "snapshot"}};
      snap["holdout_robot_loss"] = snapshot_loss(robot_holdout_);
      if (config_.cotrain) snap["holdout_vl_loss"] = snapshot_loss(vl_holdout_);
      metrics << snap.dump() << "\n";
      metrics.flush();
      save(out_dir_ + "/last.bin");
      last_saved_ = out_dir_ + "/last.bin";
    }
    if (on_step) on_step(m);
  }
  save(final_checkpoint_path());
}

void Trainer::save(const std::string& path) const {
  save_policy_checkpoint(path, model_, config_, step_, opt_, rng_, robot_stream_, vl_stream_);
}

std::string Trainer::final_checkpoint_path() const { return out_dir_ + "/checkpoint.bin"; }

}  // namespace microvla
