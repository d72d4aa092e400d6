#include "microvla/datasets.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "microvla/io.hpp"

namespace microvla {

using nlohmann::json;

namespace {

std::string fill_slots(std::string tpl, const std::string& a, const std::string& b) {
  const auto replace_all = [&](const std::string& from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = tpl.find(from, pos)) != std::string::npos) {
      tpl.replace(pos, from.size(), to);
      pos += to.size();
    }
  };
  replace_all("{a}", a);
  replace_all("{b}", b);
  return tpl;
}

std::string coord_string(double v, int decimals = 2) {
  CodecConfig cfg;
  cfg.decimals = decimals;
  std::string out;
  for (const auto& t : encode_scalar(v, cfg)) out += t;
  return out;
}

const std::vector<std::string>& relation_names() {
  static const std::vector<std::string> rels = {"left of", "right of", "above", "below"};
  return rels;
}

bool relation_truth(const SceneObject& a, const SceneObject& b, int rel) {
  switch (rel) {
    case 0: return a.x < b.x;
    case 1: return a.x > b.x;
    case 2: return a.y < b.y;
    case 3: return a.y > b.y;
    default: return false;
  }
}

std::vector<std::uint8_t> image_bytes(const ImageObservation& img) {
  std::vector<std::uint8_t> bytes(img.pixels.size());
  for (std::size_t i = 0; i < img.pixels.size(); ++i) {
    bytes[i] = static_cast<std::uint8_t>(std::lround(img.pixels[i] * 255.0f));
  }
  return bytes;
}

ImageObservation image_from_bytes(const std::vector<std::uint8_t>& bytes, int h, int w) {
  ImageObservation img;
  img.height = h;
  img.width = w;
  img.pixels.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    img.pixels[i] = static_cast<float>(bytes[i]) / 255.0f;
  }
  return img;
}

json image_json(const ImageObservation& img) {
  return json{{"h", img.height}, {"w", img.width}, {"data", base64_encode(image_bytes(img))},
              {"encoding", "u8x255/base64"}};
}

ImageObservation image_from_json(const json& j) {
  return image_from_bytes(base64_decode(j.at("data").get<std::string>()), j.at("h").get<int>(),
                          j.at("w").get<int>());
}

json action_json(const ActionVector& a) {
  return json::array({a.dx, a.dy, a.dz, a.roll, a.pitch, a.yaw, a.gripper});
}

ActionVector action_from_json(const json& j) {
  ActionVector a;
  a.dx = j.at(0).get<double>();
  a.dy = j.at(1).get<double>();
  a.dz = j.at(2).get<double>();
  a.roll = j.at(3).get<double>();
  a.pitch = j.at(4).get<double>();
  a.yaw = j.at(5).get<double>();
  a.gripper = j.at(6).get<int>();
  return a;
}

TaskKind task_from_name(const std::string& name) {
  for (TaskKind k : {TaskKind::Reach, TaskKind::Pick, TaskKind::PlaceNear}) {
    if (task_name(k) == name) return k;
  }
  throw std::runtime_error("unknown task name '" + name + "'");
}

}  // namespace

int num_classes() { return kNumColors * kNumShapes; }

std::string class_label_name(int label) {
  const int color = label / kNumShapes;
  const int shape = label % kNumShapes;
  return color_name(color) + " " + shape_name(static_cast<ObjShape>(shape));
}

KeyValue DataGenConfig::to_kv() const {
  KeyValue kv;
  kv.set_u64("data.master_seed", master_seed);
  kv.set_i64("data.robot_episodes", robot_episodes);
  kv.set_i64("data.vl_samples", vl_samples);
  kv.set_i64("data.class_samples", class_samples);
  kv.set_i64("data.class_holdout_samples", class_holdout_samples);
  kv.set_bool("data.paraphrase_augment", paraphrase_augment);
  kv.set_i64("data.max_env_steps", max_env_steps);
  kv.set_i64("env.image_size", env.image_size);
  kv.set_f64("env.grasp_radius", env.grasp_radius);
  kv.set_f64("env.success_radius", env.success_radius);
  kv.set_f64("env.spawn_separation", env.spawn_separation);
  kv.set_f64("env.max_step_delta", env.max_step_delta);
  kv.set_i64("env.horizon", env.horizon);
  kv.set_i64("codec.decimals", codec.decimals);
  kv.set_i64("codec.num_bin_tokens", num_bin_tokens);
  return kv;
}

DataGenConfig DataGenConfig::from_kv(const KeyValue& kv) {
  DataGenConfig c;
  c.master_seed = kv.get_u64("data.master_seed", c.master_seed);
  c.robot_episodes = static_cast<int>(kv.get_i64("data.robot_episodes", c.robot_episodes));
  c.vl_samples = static_cast<int>(kv.get_i64("data.vl_samples", c.vl_samples));
  c.class_samples = static_cast<int>(kv.get_i64("data.class_samples", c.class_samples));
  c.class_holdout_samples =
      static_cast<int>(kv.get_i64("data.class_holdout_samples", c.class_holdout_samples));
  c.paraphrase_augment = kv.get_bool("data.paraphrase_augment", c.paraphrase_augment);
  c.max_env_steps = static_cast<int>(kv.get_i64("data.max_env_steps", c.max_env_steps));
  c.env.image_size = static_cast<int>(kv.get_i64("env.image_size", c.env.image_size));
  c.env.grasp_radius = kv.get_f64("env.grasp_radius", c.env.grasp_radius);
  c.env.success_radius = kv.get_f64("env.success_radius", c.env.success_radius);
  c.env.spawn_separation = kv.get_f64("env.spawn_separation", c.env.spawn_separation);
  c.env.max_step_delta = kv.get_f64("env.max_step_delta", c.env.max_step_delta);
  c.env.horizon = static_cast<int>(kv.get_i64("env.horizon", c.env.horizon));
  c.codec.decimals = static_cast<int>(kv.get_i64("codec.decimals", c.codec.decimals));
  c.num_bin_tokens = static_cast<int>(kv.get_i64("codec.num_bin_tokens", c.num_bin_tokens));
  return c;
}

std::vector<std::string> vocab_corpus() {
  std::vector<std::string> corpus;
  const std::string a = "the red square", b = "the blue circle";
  const ParaphraseBank& bank = default_paraphrase_bank();
  for (TaskKind k : {TaskKind::Reach, TaskKind::Pick, TaskKind::PlaceNear}) {
    const auto& e = bank.entry(k);
    corpus.push_back(fill_slots(e.canonical, a, b));
    for (const auto& t : e.train_visible) corpus.push_back(fill_slots(t, a, b));
    for (const auto& t : e.holdout) corpus.push_back(fill_slots(t, a, b));
  }
  for (int c = 0; c < kNumColors; ++c) corpus.push_back(color_name(c));
  for (int s = 0; s < kNumShapes; ++s) {
    corpus.push_back(shape_name(static_cast<ObjShape>(s)));
    corpus.push_back(shape_plural(static_cast<ObjShape>(s)));
  }
  corpus.push_back("is the red square left of the blue circle");
  corpus.push_back("is the red square right of the blue circle");
  corpus.push_back("is the red square above the blue circle");
  corpus.push_back("is the red square below the blue circle");
  corpus.push_back("what color is the triangle");
  corpus.push_back("how many squares are there");
  corpus.push_back("point to the red square");
  corpus.push_back("yes");
  corpus.push_back("no");
  return corpus;
}

Vocabulary build_default_vocab(int num_bin_tokens) {
  return Vocabulary::build(vocab_corpus(), num_bin_tokens);
}

std::vector<EpisodeRecord> gen_robot_dataset(const DataGenConfig& cfg) {
  std::vector<EpisodeRecord> episodes;
  episodes.reserve(static_cast<std::size_t>(cfg.robot_episodes));
  const SceneProfile profile = robot_train_profile();
  const ParaphraseBank& bank = default_paraphrase_bank();
  for (int e = 0; e < cfg.robot_episodes; ++e) {
    const std::uint64_t seed = derive_seed(cfg.master_seed, "robot-episode", static_cast<std::uint64_t>(e));
    Rng rng(seed);
    const TaskKind kind = static_cast<TaskKind>(e % 3);
    auto [scene, task] = sample_scene(rng, profile, kind, cfg.env);
    std::string instruction = canonical_instruction(task);
    if (cfg.paraphrase_augment && rng.coin(0.5)) {
      instruction = paraphrase(instruction, bank, rng, ParaphraseSplit::TrainVisible);
    }
    EpisodeRecord ep;
    ep.task = task;
    ep.seed = seed;
    int env_steps = 0;
    std::int64_t call = 0;
    while (env_steps < cfg.max_env_steps && !success(scene, task)) {
      RobotStepRecord rec;
      rec.obs = render(scene, cfg.env);
      rec.instruction = instruction;
      rec.label = scripted_expert(scene, task, cfg.env.horizon, cfg.env);
      rec.task = kind;
      rec.episode = e;
      rec.step = call++;
      ep.steps.push_back(std::move(rec));
      for (const auto& action : ep.steps.back().label.actions) {
        scene = step(scene, action, cfg.env);
        ++env_steps;
        if (success(scene, task)) break;
      }
    }
    ep.success = success(scene, task);
    episodes.push_back(std::move(ep));
  }
  return episodes;
}

namespace {

VLSample gen_vl_sample(Rng& rng, const DataGenConfig& cfg, int kind) {
  const SceneProfile profile = vl_train_profile();
  for (int attempt = 0; attempt < 50; ++attempt) {
    auto [scene, task] = sample_scene(rng, profile, TaskKind::Reach, cfg.env);
    const auto& objs = scene.objects;
    VLSample s;
    switch (kind) {
      case 0: {  // spatial relation, yes/no
        if (objs.size() < 2) continue;
        const std::size_t i = static_cast<std::size_t>(rng.below(objs.size()));
        std::size_t j = static_cast<std::size_t>(rng.below(objs.size() - 1));
        if (j >= i) ++j;
        const int rel = static_cast<int>(rng.below(relation_names().size()));
        s.question = "is the " + color_name(objs[i].color) + " " + shape_name(objs[i].shape) + " " +
                     relation_names()[static_cast<std::size_t>(rel)] + " the " +
                     color_name(objs[j].color) + " " + shape_name(objs[j].shape);
        s.answer = relation_truth(objs[i], objs[j], rel) ? "yes" : "no";
        break;
      }
      case 1: {  // attribute: needs a shape that appears exactly once
        int counts[kNumShapes] = {0, 0, 0};
        for (const auto& o : objs) counts[static_cast<int>(o.shape)]++;
        std::vector<int> unique_shapes;
        for (int sh = 0; sh < kNumShapes; ++sh) {
          if (counts[sh] == 1) unique_shapes.push_back(sh);
        }
        if (unique_shapes.empty()) continue;
        const int sh = rng.pick(unique_shapes);
        int color = -1;
        for (const auto& o : objs) {
          if (static_cast<int>(o.shape) == sh) color = o.color;
        }
        s.question = "what color is the " + shape_name(static_cast<ObjShape>(sh));
        s.answer = color_name(color);
        break;
      }
      case 2: {  // counting
        const int sh = static_cast<int>(rng.below(kNumShapes));
        int count = 0;
        for (const auto& o : objs) {
          if (static_cast<int>(o.shape) == sh) ++count;
        }
        s.question = "how many " + shape_plural(static_cast<ObjShape>(sh)) + " are there";
        s.answer = std::to_string(count);
        break;
      }
      default: {  // pointing
        const std::size_t i = static_cast<std::size_t>(rng.below(objs.size()));
        s.question = "point to the " + color_name(objs[i].color) + " " + shape_name(objs[i].shape);
        s.answer = format_point_answer(objs[i].x, objs[i].y);
        // Generator self-check: decoded point must land on the object center
        // within coordinate quantization.
        CodecConfig c2;
        c2.decimals = 2;
        const double qx = quantize(objs[i].x, 2), qy = quantize(objs[i].y, 2);
        if (std::abs(qx - objs[i].x) > 0.005 + 1e-12 || std::abs(qy - objs[i].y) > 0.005 + 1e-12) {
          throw std::logic_error("pointing answer drifted from object center");
        }
        break;
      }
    }
    s.obs = render(scene, cfg.env);
    return s;
  }
  throw std::runtime_error("gen_vl_sample: could not satisfy question kind after 50 scenes");
}

}  // namespace

std::vector<VLSample> gen_vl_dataset(const DataGenConfig& cfg) {
  std::vector<VLSample> out;
  out.reserve(static_cast<std::size_t>(cfg.vl_samples));
  for (int i = 0; i < cfg.vl_samples; ++i) {
    Rng rng(derive_seed(cfg.master_seed, "vl-sample", static_cast<std::uint64_t>(i)));
    out.push_back(gen_vl_sample(rng, cfg, i % 4));
  }
  return out;
}

std::vector<ClassSample> gen_class_dataset(const DataGenConfig& cfg, bool holdout_split) {
  const int n = holdout_split ? cfg.class_holdout_samples : cfg.class_samples;
  const char* domain = holdout_split ? "class-holdout" : "class-train";
  const SceneProfile profile = vl_train_profile();
  std::vector<ClassSample> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(cfg.master_seed, domain, static_cast<std::uint64_t>(i)));
    const int label = i % num_classes();
    const int color = label / kNumShapes;
    const int shape = label % kNumShapes;

    Scene scene;
    scene.background = rng.pick(profile.assets.background_ids);
    scene.texture = rng.pick(profile.assets.texture_ids);
    scene.lighting = rng.uniform(profile.lighting_min, profile.lighting_max);
    scene.camera_dx = rng.uniform(-profile.camera_jitter_px, profile.camera_jitter_px);
    scene.camera_dy = rng.uniform(-profile.camera_jitter_px, profile.camera_jitter_px);
    SceneObject obj;
    obj.shape = static_cast<ObjShape>(shape);
    obj.color = color;
    obj.size = rng.uniform(cfg.env.object_min_size, cfg.env.object_max_size);
    const double margin = cfg.env.object_max_size + 0.02;
    obj.x = rng.uniform(margin, 1.0 - margin);
    obj.y = rng.uniform(margin, 1.0 - margin);
    scene.objects.push_back(obj);
    if (rng.coin(0.5)) {
      scene.effector_x = rng.uniform(0.05, 0.95);
      scene.effector_y = rng.uniform(0.05, 0.95);
    } else {
      scene.effector_x = -10;  // off-screen
      scene.effector_y = -10;
    }

    ClassSample s;
    s.obs = render(scene, cfg.env);
    s.label = label;
    s.class_name = class_label_name(label);
    out.push_back(std::move(s));
  }
  return out;
}

std::string format_point_answer(double x, double y) {
  return "(" + coord_string(x) + ", " + coord_string(y) + ")";
}

// ---- file IO ----

namespace {

json header_json(const std::string& kind, const DataGenConfig& cfg, const Vocabulary& vocab,
                 std::int64_t count) {
  return json{{"format_version", kDatasetFormatVersion},
              {"kind", kind},
              {"config_hash", hex_u64(cfg.hash())},
              {"master_seed", cfg.master_seed},
              {"count", count},
              {"vocab", vocab.tokens()}};
}

std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write dataset file '" + path + "'");
  return f;
}

}  // namespace

void write_robot_dataset(const std::string& path, const std::vector<EpisodeRecord>& episodes,
                         const DataGenConfig& cfg, const Vocabulary& vocab) {
  std::int64_t count = 0;
  for (const auto& ep : episodes) count += static_cast<std::int64_t>(ep.steps.size());
  auto f = open_out(path);
  f << header_json("robot", cfg, vocab, count).dump() << "\n";
  for (const auto& ep : episodes) {
    for (const auto& rec : ep.steps) {
      json actions = json::array();
      for (const auto& a : rec.label.actions) actions.push_back(action_json(a));
      std::vector<std::int32_t> target_ids;
      for (const auto& tok : encode_chunk(rec.label, cfg.codec)) target_ids.push_back(vocab.id(tok));
      target_ids.push_back(vocab.eos());
      const json j{{"type", "robot"},
                   {"episode", rec.episode},
                   {"step", rec.step},
                   {"task", task_name(rec.task)},
                   {"seed", ep.seed},
                   {"instruction", rec.instruction},
                   {"actions", actions},
                   {"target_ids", target_ids},
                   {"image", image_json(rec.obs)}};
      f << j.dump() << "\n";
    }
  }
}

void write_vl_dataset(const std::string& path, const std::vector<VLSample>& samples,
                      const DataGenConfig& cfg, const Vocabulary& vocab) {
  auto f = open_out(path);
  f << header_json("vl", cfg, vocab, static_cast<std::int64_t>(samples.size())).dump() << "\n";
  for (const auto& s : samples) {
    TokenSequence ans = tokenize_text(s.answer, vocab);
    std::vector<std::int32_t> target_ids = ans.ids;
    target_ids.push_back(vocab.eos());
    const json j{{"type", "vl"},
                 {"question", s.question},
                 {"answer", s.answer},
                 {"target_ids", target_ids},
                 {"image", image_json(s.obs)}};
    f << j.dump() << "\n";
  }
}

void write_class_dataset(const std::string& path, const std::vector<ClassSample>& samples,
                         const DataGenConfig& cfg, const Vocabulary& vocab) {
  auto f = open_out(path);
  f << header_json("class", cfg, vocab, static_cast<std::int64_t>(samples.size())).dump() << "\n";
  for (const auto& s : samples) {
    const json j{{"type", "class"},
                 {"label", s.label},
                 {"class_name", s.class_name},
                 {"image", image_json(s.obs)}};
    f << j.dump() << "\n";
  }
}

LoadedDataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open dataset file '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw std::runtime_error("dataset file '" + path + "' is empty");
  const json h = json::parse(line);
  LoadedDataset ds;
  ds.header.format_version = h.at("format_version").get<int>();
  if (ds.header.format_version != kDatasetFormatVersion) {
    throw std::runtime_error("dataset format version " +
                             std::to_string(ds.header.format_version) + " != expected " +
                             std::to_string(kDatasetFormatVersion));
  }
  ds.header.kind = h.at("kind").get<std::string>();
  ds.header.config_hash = h.at("config_hash").get<std::string>();
  ds.header.master_seed = h.at("master_seed").get<std::uint64_t>();
  ds.header.count = h.at("count").get<std::int64_t>();
  ds.header.vocab_tokens = h.at("vocab").get<std::vector<std::string>>();
  ds.vocab = Vocabulary::from_tokens(ds.header.vocab_tokens);

  std::int64_t seen = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    const std::string type = j.at("type").get<std::string>();
    if (type != ds.header.kind) {
      throw std::runtime_error("record type '" + type + "' does not match header kind '" +
                               ds.header.kind + "'");
    }
    if (type == "robot") {
      RobotStepRecord r;
      r.obs = image_from_json(j.at("image"));
      r.instruction = j.at("instruction").get<std::string>();
      for (const auto& aj : j.at("actions")) r.label.actions.push_back(action_from_json(aj));
      r.task = task_from_name(j.at("task").get<std::string>());
      r.episode = j.at("episode").get<std::int64_t>();
      r.step = j.at("step").get<std::int64_t>();
      ds.robot.push_back(std::move(r));
    } else if (type == "vl") {
      VLSample s;
      s.obs = image_from_json(j.at("image"));
      s.question = j.at("question").get<std::string>();
      s.answer = j.at("answer").get<std::string>();
      ds.vl.push_back(std::move(s));
    } else if (type == "class") {
      ClassSample s;
      s.obs = image_from_json(j.at("image"));
      s.label = j.at("label").get<int>();
      s.class_name = j.at("class_name").get<std::string>();
      ds.cls.push_back(std::move(s));
    } else {
      throw std::runtime_error("unknown record type '" + type + "'");
    }
    ++seen;
  }
  if (seen != ds.header.count) {
    throw std::runtime_error("dataset record count " + std::to_string(seen) +
                             " does not match header count " + std::to_string(ds.header.count));
  }
  return ds;
}

ExpertGateReport expert_validity_gate(const EnvConfig& env, std::uint64_t seed, int episodes,
                                      int horizon, int max_env_steps) {
  ExpertGateReport report;
  const SceneProfile profile = robot_train_profile();
  for (TaskKind kind : {TaskKind::Reach, TaskKind::Pick, TaskKind::PlaceNear}) {
    int ok = 0;
    for (int e = 0; e < episodes; ++e) {
      Rng rng(derive_seed(seed, "expert-gate-" + task_name(kind), static_cast<std::uint64_t>(e)));
      auto [scene, task] = sample_scene(rng, profile, kind, env);
      int steps = 0;
      while (steps < max_env_steps && !success(scene, task)) {
        const ActionChunk chunk = scripted_expert(scene, task, horizon, env);
        for (const auto& a : chunk.actions) {
          scene = step(scene, a, env);
          ++steps;
          if (success(scene, task)) break;
        }
      }
      if (success(scene, task)) ++ok;
    }
    const double rate = static_cast<double>(ok) / episodes;
    switch (kind) {
      case TaskKind::Reach: report.reach = rate; break;
      case TaskKind::Pick: report.pick = rate; break;
      case TaskKind::PlaceNear: report.place_near = rate; break;
    }
  }
  return report;
}

void vl_self_check(const std::vector<VLSample>& samples, const Vocabulary& vocab) {
  CodecConfig c2;
  c2.decimals = 2;
  for (const auto& s : samples) {
    tokenize_text(s.question, vocab);
    const TokenSequence ans = tokenize_text(s.answer, vocab);
    if (ans.ids.empty()) throw std::runtime_error("empty VL answer for question '" + s.question + "'");
    if (!s.answer.empty() && s.answer.front() == '(') {
      // Pointing answers must decode to coordinates inside the unit square.
      const std::size_t comma = s.answer.find(',');
      if (comma == std::string::npos || s.answer.back() != ')') {
        throw std::runtime_error("malformed pointing answer '" + s.answer + "'");
      }
      const std::string xs = s.answer.substr(1, comma - 1);
      const std::string ys = s.answer.substr(comma + 2, s.answer.size() - comma - 3);
      const auto parse = [&](const std::string& str) {
        std::vector<std::string> toks;
        for (char c : str) toks.emplace_back(1, c);
        return decode_scalar(toks, c2);
      };
      const double x = parse(xs), y = parse(ys);
      if (x < 0 || x > 1 || y < 0 || y > 1) {
        throw std::runtime_error("pointing answer '" + s.answer + "' outside the unit square");
      }
    }
  }
}

}  // namespace microvla
