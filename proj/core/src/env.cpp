#include "microvla/env.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace microvla {

namespace {

const std::vector<std::string> kShapeNames = {"square", "circle", "triangle"};
const std::vector<std::string> kShapePlurals = {"squares", "circles", "triangles"};
const std::vector<std::string> kColorNames = {"red",  "green",  "blue",   "yellow",
                                              "magenta", "cyan", "orange", "purple"};
const float kColorRgb[kNumColors][3] = {
    {0.90f, 0.10f, 0.10f}, {0.10f, 0.80f, 0.15f}, {0.15f, 0.20f, 0.90f}, {0.95f, 0.85f, 0.10f},
    {0.85f, 0.15f, 0.80f}, {0.10f, 0.80f, 0.85f}, {0.95f, 0.55f, 0.10f}, {0.55f, 0.15f, 0.85f}};

// Muted background palette; ids 0-5 train, 6-11 holdout.
const float kBackgroundRgb[12][3] = {
    {0.35f, 0.35f, 0.38f}, {0.25f, 0.30f, 0.25f}, {0.30f, 0.25f, 0.20f}, {0.20f, 0.20f, 0.28f},
    {0.38f, 0.33f, 0.28f}, {0.28f, 0.28f, 0.22f}, {0.45f, 0.40f, 0.42f}, {0.14f, 0.22f, 0.30f},
    {0.42f, 0.30f, 0.35f}, {0.18f, 0.30f, 0.18f}, {0.33f, 0.21f, 0.30f}, {0.12f, 0.12f, 0.14f}};

const std::string kTaskNames[3] = {"reach", "pick", "place_near"};
// Exactly on the 1/255 grid so masked pixels equal the mask color bit-for-bit.
const float kMaskColor[3] = {38.0f / 255.0f, 38.0f / 255.0f, 38.0f / 255.0f};
const float kEffectorColor[3] = {1.0f, 1.0f, 1.0f};

double dist2d(double ax, double ay, double bx, double by) {
  return std::hypot(ax - bx, ay - by);
}

// Texture tint patterns in world space so camera jitter shifts them too.
// Coarse grids keep texture edges away from object-boundary scale.
bool texture_hit(int texture, double wx, double wy) {
  const int gx = static_cast<int>(std::floor(wx * 8.0));
  const int gy = static_cast<int>(std::floor(wy * 8.0));
  switch (texture) {
    case 0: return false;                         // plain
    case 1: return gy % 4 == 0;                   // horizontal stripes
    case 2: return gx % 4 == 0;                   // vertical stripes
    case 3: return (gx + gy) % 2 == 0;            // checker
    case 4: return (gx - gy) % 4 == 0;            // diagonal stripes
    case 5: return gx % 3 == 0 && gy % 3 == 0;    // dots
    case 6: return gx % 4 == 0 || gy % 4 == 0;    // grid
    case 7: return ((gx / 2) + (gy / 2)) % 2 == 0;  // coarse checker
    default: return false;
  }
}

float texture_tint(int texture) {
  return texture >= 4 ? 0.10f : 0.06f;
}

bool inside_object(const SceneObject& o, double wx, double wy) {
  switch (o.shape) {
    case ObjShape::Square:
      return std::abs(wx - o.x) <= o.size && std::abs(wy - o.y) <= o.size;
    case ObjShape::Circle:
      // Radius chosen for equal area with the square, so the boundary (not
      // the extent) is what separates the two shapes.
      return dist2d(wx, wy, o.x, o.y) <= o.size * 1.1284;
    case ObjShape::Triangle: {
      // Apex up (smaller y); half-plane tests against the two slanted edges.
      const double top = o.y - o.size, bottom = o.y + o.size;
      if (wy < top || wy > bottom) return false;
      const double half_width = (wy - top) / (bottom - top) * o.size;
      return std::abs(wx - o.x) <= half_width;
    }
  }
  return false;
}

bool inside_effector(double ex, double ey, double wx, double wy) {
  // A small cross.
  const double arm = 0.05, thick = 0.012;
  const bool horiz = std::abs(wy - ey) <= thick && std::abs(wx - ex) <= arm;
  const bool vert = std::abs(wx - ex) <= thick && std::abs(wy - ey) <= arm;
  return horiz || vert;
}

float quantize255(float v) {
  v = std::clamp(v, 0.0f, 1.0f);
  return std::round(v * 255.0f) / 255.0f;
}

ObjectDesc desc_of(const SceneObject& o) { return ObjectDesc{o.color, o.shape}; }

}  // namespace

const std::string& shape_name(ObjShape s) { return kShapeNames[static_cast<std::size_t>(s)]; }
const std::string& shape_plural(ObjShape s) { return kShapePlurals[static_cast<std::size_t>(s)]; }
const std::string& color_name(int color) { return kColorNames[static_cast<std::size_t>(color)]; }
std::array<float, 3> color_rgb(int color) {
  return {kColorRgb[color][0], kColorRgb[color][1], kColorRgb[color][2]};
}
const std::string& task_name(TaskKind k) { return kTaskNames[static_cast<std::size_t>(k)]; }

int num_backgrounds() { return 12; }
int num_textures() { return 8; }

VisualAssets train_assets() { return VisualAssets{{0, 1, 2, 3, 4, 5}, {0, 1, 2, 3}}; }
VisualAssets holdout_assets() { return VisualAssets{{6, 7, 8, 9, 10, 11}, {4, 5, 6, 7}}; }

SceneProfile robot_train_profile() {
  SceneProfile p;
  p.assets = VisualAssets{{0, 1, 2}, {0, 1}};
  p.lighting_min = 1.0;
  p.lighting_max = 1.0;
  p.camera_jitter_px = 0.0;
  p.min_distractors = 1;
  p.max_distractors = 1;
  return p;
}

SceneProfile vl_train_profile() {
  SceneProfile p;
  p.assets = train_assets();
  p.lighting_min = 0.85;
  p.lighting_max = 1.15;
  p.camera_jitter_px = 1.0;
  p.min_distractors = 0;
  p.max_distractors = 2;
  return p;
}

std::pair<Scene, TaskSpec> sample_scene(Rng& rng, const SceneProfile& profile, TaskKind kind,
                                        const EnvConfig& config) {
  Scene scene;
  scene.background = rng.pick(profile.assets.background_ids);
  scene.texture = rng.pick(profile.assets.texture_ids);
  scene.lighting = profile.lighting_min == profile.lighting_max
                       ? profile.lighting_min
                       : rng.uniform(profile.lighting_min, profile.lighting_max);
  if (profile.camera_jitter_px > 0) {
    scene.camera_dx = rng.uniform(-profile.camera_jitter_px, profile.camera_jitter_px);
    scene.camera_dy = rng.uniform(-profile.camera_jitter_px, profile.camera_jitter_px);
  }

  const int task_objects = kind == TaskKind::PlaceNear ? 2 : 1;
  const int distractors =
      static_cast<int>(rng.range(profile.min_distractors, profile.max_distractors));
  const int total = task_objects + distractors;

  // Distinct (color, shape) pairs make every descriptor unique by construction.
  std::vector<ObjectDesc> descs;
  {
    std::set<std::pair<int, int>> used;
    int tries = 0;
    while (static_cast<int>(descs.size()) < total) {
      if (++tries > config.max_sample_tries * 10) {
        throw std::runtime_error("sample_scene: could not draw distinct descriptors");
      }
      const int color = static_cast<int>(rng.below(kNumColors));
      const int shape = static_cast<int>(rng.below(kNumShapes));
      if (used.emplace(color, shape).second) {
        descs.push_back(ObjectDesc{color, static_cast<ObjShape>(shape)});
      }
    }
  }

  const double margin = config.object_max_size + 0.02;
  int tries = 0;
  for (const ObjectDesc& d : descs) {
    SceneObject obj;
    obj.shape = d.shape;
    obj.color = d.color;
    obj.size = rng.uniform(config.object_min_size, config.object_max_size);
    for (;;) {
      if (++tries > config.max_sample_tries * total) {
        throw std::runtime_error("sample_scene: rejection sampling failed after " +
                                 std::to_string(tries) + " tries");
      }
      obj.x = rng.uniform(margin, 1.0 - margin);
      obj.y = rng.uniform(margin, 1.0 - margin);
      bool ok = true;
      for (const auto& other : scene.objects) {
        if (dist2d(obj.x, obj.y, other.x, other.y) < config.spawn_separation) {
          ok = false;
          break;
        }
      }
      if (ok) break;
    }
    scene.objects.push_back(obj);
  }

  // Effector spawns away from the target so no task starts satisfied.
  tries = 0;
  for (;;) {
    if (++tries > config.max_sample_tries) {
      throw std::runtime_error("sample_scene: effector placement failed");
    }
    scene.effector_x = rng.uniform(0.08, 0.92);
    scene.effector_y = rng.uniform(0.08, 0.92);
    if (dist2d(scene.effector_x, scene.effector_y, scene.objects[0].x, scene.objects[0].y) >=
        config.spawn_separation) {
      break;
    }
  }

  TaskSpec task;
  task.kind = kind;
  task.target = descs[0];
  if (kind == TaskKind::PlaceNear) task.reference = descs[1];
  task.success_radius = config.success_radius;
  return {scene, task};
}

ImageObservation render(const Scene& scene, const EnvConfig& config) {
  const int n = config.image_size;
  ImageObservation img;
  img.height = n;
  img.width = n;
  img.pixels.assign(static_cast<std::size_t>(n * n * 3), 0.0f);

  const float* bg = kBackgroundRgb[scene.background % 12];
  const float tint = texture_tint(scene.texture);

  // 2x2 supersampling: partial coverage at object edges is what makes shapes
  // distinguishable at this resolution.
  static const double kSub[2] = {-0.25, 0.25};

  for (int r = 0; r < n; ++r) {
    for (int c = 0; c < n; ++c) {
      float acc[3] = {0, 0, 0};
      bool any_foreground = false;
      for (double sy : kSub) {
        for (double sx : kSub) {
          const double wx = (c + 0.5 + sx + scene.camera_dx) / n;
          const double wy = (r + 0.5 + sy + scene.camera_dy) / n;

          float rgb[3];
          bool covered = false;
          if (inside_effector(scene.effector_x, scene.effector_y, wx, wy)) {
            rgb[0] = kEffectorColor[0];
            rgb[1] = kEffectorColor[1];
            rgb[2] = kEffectorColor[2];
            covered = true;
          }
          if (!covered && scene.held >= 0 &&
              inside_object(scene.objects[static_cast<std::size_t>(scene.held)], wx, wy)) {
            const auto col = color_rgb(scene.objects[static_cast<std::size_t>(scene.held)].color);
            rgb[0] = col[0];
            rgb[1] = col[1];
            rgb[2] = col[2];
            covered = true;
          }
          if (!covered) {
            for (std::size_t i = 0; i < scene.objects.size(); ++i) {
              if (static_cast<int>(i) == scene.held) continue;
              if (inside_object(scene.objects[i], wx, wy)) {
                const auto col = color_rgb(scene.objects[i].color);
                rgb[0] = col[0];
                rgb[1] = col[1];
                rgb[2] = col[2];
                covered = true;
                break;
              }
            }
          }
          if (covered) {
            any_foreground = true;
          } else if (scene.mask_background) {
            rgb[0] = kMaskColor[0];
            rgb[1] = kMaskColor[1];
            rgb[2] = kMaskColor[2];
          } else {
            const bool tex = texture_hit(scene.texture, wx, wy);
            for (int ch = 0; ch < 3; ++ch) rgb[ch] = bg[ch] + (tex ? tint : 0.0f);
          }
          for (int ch = 0; ch < 3; ++ch) acc[ch] += rgb[ch];
        }
      }
      if (scene.mask_background && !any_foreground) {
        // Fully-background pixels carry the exact mask color (no lighting).
        img.at(r, c, 0) = kMaskColor[0];
        img.at(r, c, 1) = kMaskColor[1];
        img.at(r, c, 2) = kMaskColor[2];
        continue;
      }
      for (int ch = 0; ch < 3; ++ch) {
        img.at(r, c, ch) = quantize255(acc[ch] * 0.25f * static_cast<float>(scene.lighting));
      }
    }
  }
  return img;
}

Scene step(const Scene& scene, const ActionVector& action, const EnvConfig& config) {
  (void)config;
  Scene next = scene;
  next.effector_x = std::clamp(scene.effector_x + action.dx, 0.0, 1.0);
  next.effector_y = std::clamp(scene.effector_y + action.dy, 0.0, 1.0);
  if (next.held >= 0) {
    next.objects[static_cast<std::size_t>(next.held)].x = next.effector_x;
    next.objects[static_cast<std::size_t>(next.held)].y = next.effector_y;
  }
  if (action.gripper == 1) {
    if (next.held < 0) {
      int best = -1;
      double best_d = config.grasp_radius;
      for (std::size_t i = 0; i < next.objects.size(); ++i) {
        const double d =
            dist2d(next.effector_x, next.effector_y, next.objects[i].x, next.objects[i].y);
        if (d <= best_d) {
          best_d = d;
          best = static_cast<int>(i);
        }
      }
      if (best >= 0) {
        next.held = best;
        next.objects[static_cast<std::size_t>(best)].x = next.effector_x;
        next.objects[static_cast<std::size_t>(best)].y = next.effector_y;
      }
    }
  } else if (next.held >= 0) {
    next.held = -1;  // release in place
  }
  return next;
}

int find_object(const Scene& scene, const ObjectDesc& desc) {
  int found = -1;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    if (desc_of(scene.objects[i]) == desc) {
      if (found >= 0) return -1;  // ambiguous
      found = static_cast<int>(i);
    }
  }
  return found;
}

bool success(const Scene& scene, const TaskSpec& task) {
  const int target = find_object(scene, task.target);
  if (target < 0) return false;
  const auto& t = scene.objects[static_cast<std::size_t>(target)];
  switch (task.kind) {
    case TaskKind::Reach:
      return dist2d(scene.effector_x, scene.effector_y, t.x, t.y) <= task.success_radius;
    case TaskKind::Pick:
      return scene.held == target;
    case TaskKind::PlaceNear: {
      const int ref = find_object(scene, task.reference);
      if (ref < 0) return false;
      const auto& r = scene.objects[static_cast<std::size_t>(ref)];
      return scene.held != target && dist2d(t.x, t.y, r.x, r.y) <= task.success_radius;
    }
  }
  return false;
}

namespace {

ActionVector expert_single(const Scene& scene, const TaskSpec& task, const EnvConfig& config) {
  ActionVector a;
  const int target = find_object(scene, task.target);
  if (target < 0) return a;
  const auto& t = scene.objects[static_cast<std::size_t>(target)];

  const auto move_toward = [&](double gx, double gy) {
    const double ddx = gx - scene.effector_x;
    const double ddy = gy - scene.effector_y;
    const double d = std::hypot(ddx, ddy);
    if (d <= config.max_step_delta || d == 0.0) {
      a.dx = ddx;
      a.dy = ddy;
      return d;
    }
    a.dx = ddx / d * config.max_step_delta;
    a.dy = ddy / d * config.max_step_delta;
    return d - config.max_step_delta;
  };

  switch (task.kind) {
    case TaskKind::Reach:
      move_toward(t.x, t.y);
      break;
    case TaskKind::Pick: {
      if (scene.held == target) {
        a.gripper = 1;  // keep holding
        break;
      }
      const double remaining = move_toward(t.x, t.y);
      if (remaining <= config.grasp_radius * 0.5) a.gripper = 1;
      break;
    }
    case TaskKind::PlaceNear: {
      const int ref = find_object(scene, task.reference);
      if (ref < 0) break;
      const auto& r = scene.objects[static_cast<std::size_t>(ref)];
      if (scene.held != target) {
        const double remaining = move_toward(t.x, t.y);
        if (remaining <= config.grasp_radius * 0.5) a.gripper = 1;
      } else {
        // Transport; release just inside the success radius.
        const double remaining = move_toward(r.x, r.y);
        a.gripper = remaining <= task.success_radius * 0.5 ? 0 : 1;
      }
      break;
    }
  }
  return a;
}

}  // namespace

ActionChunk scripted_expert(const Scene& scene, const TaskSpec& task, int horizon,
                            const EnvConfig& config) {
  ActionChunk chunk;
  Scene sim = scene;
  for (int h = 0; h < horizon; ++h) {
    ActionVector a = quantize_action(expert_single(sim, task, config), config.decimals);
    chunk.actions.push_back(a);
    sim = step(sim, a, config);
  }
  return chunk;
}

std::string canonical_instruction(const TaskSpec& task) {
  const ParaphraseBank& bank = default_paraphrase_bank();
  std::string tpl = bank.entry(task.kind).canonical;
  const std::string a = "the " + task.target.text();
  const std::string b = "the " + task.reference.text();
  std::string out;
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl.compare(i, 3, "{a}") == 0) {
      out += a;
      i += 3;
    } else if (tpl.compare(i, 3, "{b}") == 0) {
      out += b;
      i += 3;
    } else {
      out += tpl[i++];
    }
  }
  return out;
}

const ParaphraseBank::Entry& ParaphraseBank::entry(TaskKind k) const {
  switch (k) {
    case TaskKind::Reach: return reach;
    case TaskKind::Pick: return pick;
    case TaskKind::PlaceNear: return place_near;
  }
  throw std::logic_error("bad task kind");
}

const ParaphraseBank& default_paraphrase_bank() {
  // Hand-written synonym tables. Holdout verb words are disjoint from every
  // word that can appear in training instructions or VL questions.
  static const ParaphraseBank bank = {
      /*reach=*/{"reach {a}", {"touch {a}"}, {"approach {a}"}},
      /*pick=*/{"pick {a}", {"get {a}", "take {a}"}, {"grasp {a}", "lift {a}"}},
      /*place_near=*/{"move {a} near {b}",
                      {"put {a} close to {b}"},
                      {"place {a} beside {b}", "bring {a} toward {b}"}},
  };
  return bank;
}

namespace {

// Matches `instruction` against a template, extracting the descriptor slots.
bool match_template(const std::string& tpl, const std::string& instruction, std::string& a,
                    std::string& b) {
  // Split template on slots; require the literal pieces in order.
  std::vector<std::string> literals;
  std::vector<char> slots;
  std::string cur;
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl.compare(i, 3, "{a}") == 0 || tpl.compare(i, 3, "{b}") == 0) {
      literals.push_back(cur);
      cur.clear();
      slots.push_back(tpl[i + 1]);
      i += 3;
    } else {
      cur += tpl[i++];
    }
  }
  literals.push_back(cur);

  std::size_t pos = 0;
  std::vector<std::string> captured;
  for (std::size_t li = 0; li < literals.size(); ++li) {
    const std::string& lit = literals[li];
    if (li == 0) {
      if (instruction.compare(0, lit.size(), lit) != 0) return false;
      pos = lit.size();
      continue;
    }
    std::size_t found;
    if (lit.empty()) {
      found = instruction.size();  // trailing slot captures the rest
    } else {
      found = instruction.find(lit, pos);
      if (found == std::string::npos) return false;
    }
    captured.push_back(instruction.substr(pos, found - pos));
    pos = found + lit.size();
  }
  if (pos != instruction.size()) return false;
  for (std::size_t si = 0; si < slots.size(); ++si) {
    (slots[si] == 'a' ? a : b) = captured[si];
  }
  return true;
}

std::string render_template(const std::string& tpl, const std::string& a, const std::string& b) {
  std::string out;
  for (std::size_t i = 0; i < tpl.size();) {
    if (tpl.compare(i, 3, "{a}") == 0) {
      out += a;
      i += 3;
    } else if (tpl.compare(i, 3, "{b}") == 0) {
      out += b;
      i += 3;
    } else {
      out += tpl[i++];
    }
  }
  return out;
}

}  // namespace

std::string paraphrase(const std::string& instruction, const ParaphraseBank& bank, Rng& rng,
                       ParaphraseSplit split) {
  for (TaskKind k : {TaskKind::Reach, TaskKind::Pick, TaskKind::PlaceNear}) {
    const auto& entry = bank.entry(k);
    std::string a, b;
    if (match_template(entry.canonical, instruction, a, b)) {
      const auto& alts =
          split == ParaphraseSplit::TrainVisible ? entry.train_visible : entry.holdout;
      if (alts.empty()) {
        throw std::runtime_error("paraphrase bank has no entries for split");
      }
      const std::string& tpl = rng.pick(alts);
      return render_template(tpl, a, b);
    }
  }
  throw std::runtime_error("paraphrase: instruction '" + instruction +
                           "' does not match any known template");
}

std::vector<std::string> bank_phrase_words(const ParaphraseBank::Entry& entry, bool holdout) {
  std::vector<std::string> words;
  const auto harvest = [&](const std::string& tpl) {
    std::string cur;
    for (char c : tpl) {
      if (c == ' ') {
        if (!cur.empty() && cur[0] != '{') words.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty() && cur[0] != '{') words.push_back(cur);
  };
  if (holdout) {
    for (const auto& t : entry.holdout) harvest(t);
  } else {
    harvest(entry.canonical);
    for (const auto& t : entry.train_visible) harvest(t);
  }
  return words;
}

std::string VariantSpec::name() const {
  switch (kind) {
    case VariantKind::Matching: return "matching";
    case VariantKind::MaskedBackground: return "masked_background";
    case VariantKind::RandomBackground: return "random_background";
    case VariantKind::RandomTexture: return "random_texture";
    case VariantKind::Distractors: return "distractors" + std::to_string(param);
    case VariantKind::CameraJitter: return "camera_jitter";
    case VariantKind::LightingShift: return "lighting_shift";
    case VariantKind::Paraphrase: return "paraphrase";
  }
  return "unknown";
}

std::vector<VariantSpec> default_variants() {
  return {
      {VariantKind::Matching, 0},      {VariantKind::MaskedBackground, 0},
      {VariantKind::RandomBackground, 0}, {VariantKind::RandomTexture, 0},
      {VariantKind::Distractors, 2},   {VariantKind::CameraJitter, 0},
      {VariantKind::LightingShift, 0},
  };
}

void apply_variant(Scene& scene, std::string& instruction, const VariantSpec& variant, Rng& rng,
                   const EnvConfig& config) {
  const VisualAssets holdout = holdout_assets();
  switch (variant.kind) {
    case VariantKind::Matching:
      return;
    case VariantKind::MaskedBackground:
      scene.mask_background = true;
      return;
    case VariantKind::RandomBackground:
      scene.background = rng.pick(holdout.background_ids);
      return;
    case VariantKind::RandomTexture:
      scene.texture = rng.pick(holdout.texture_ids);
      return;
    case VariantKind::Distractors: {
      // Add extra objects with descriptors unused by the scene.
      std::set<std::pair<int, int>> used;
      for (const auto& o : scene.objects) used.emplace(o.color, static_cast<int>(o.shape));
      int added = 0, tries = 0;
      while (added < variant.param && tries < config.max_sample_tries * 10) {
        ++tries;
        const int color = static_cast<int>(rng.below(kNumColors));
        const int shape = static_cast<int>(rng.below(kNumShapes));
        if (!used.emplace(color, shape).second) continue;
        SceneObject obj;
        obj.color = color;
        obj.shape = static_cast<ObjShape>(shape);
        obj.size = rng.uniform(config.object_min_size, config.object_max_size);
        const double margin = config.object_max_size + 0.02;
        bool placed = false;
        for (int t = 0; t < config.max_sample_tries && !placed; ++t) {
          obj.x = rng.uniform(margin, 1.0 - margin);
          obj.y = rng.uniform(margin, 1.0 - margin);
          placed = true;
          for (const auto& other : scene.objects) {
            if (std::hypot(obj.x - other.x, obj.y - other.y) < config.spawn_separation) {
              placed = false;
              break;
            }
          }
        }
        if (placed) {
          scene.objects.push_back(obj);
          ++added;
        }
      }
      return;
    }
    case VariantKind::CameraJitter:
      scene.camera_dx = rng.coin(0.5) ? rng.uniform(2.0, 3.0) : rng.uniform(-3.0, -2.0);
      scene.camera_dy = rng.coin(0.5) ? rng.uniform(2.0, 3.0) : rng.uniform(-3.0, -2.0);
      return;
    case VariantKind::LightingShift:
      scene.lighting = rng.coin(0.5) ? rng.uniform(0.65, 0.75) : rng.uniform(1.3, 1.4);
      return;
    case VariantKind::Paraphrase:
      instruction = paraphrase(instruction, default_paraphrase_bank(), rng, ParaphraseSplit::Holdout);
      return;
  }
}

}  // namespace microvla
