#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "microvla/action_codec.hpp"
#include "microvla/rng.hpp"

namespace microvla {

// ---- observation ----

struct ImageObservation {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // row-major H x W x 3, values on the 1/255 grid

  float& at(int r, int c, int ch) { return pixels[static_cast<std::size_t>((r * width + c) * 3 + ch)]; }
  float at(int r, int c, int ch) const { return pixels[static_cast<std::size_t>((r * width + c) * 3 + ch)]; }
};

// ---- scene ----

enum class ObjShape : std::uint8_t { Square = 0, Circle = 1, Triangle = 2 };
enum class TaskKind : std::uint8_t { Reach = 0, Pick = 1, PlaceNear = 2 };

constexpr int kNumShapes = 3;
constexpr int kNumColors = 8;

const std::string& shape_name(ObjShape s);
const std::string& shape_plural(ObjShape s);
const std::string& color_name(int color);
std::array<float, 3> color_rgb(int color);

struct SceneObject {
  ObjShape shape = ObjShape::Square;
  int color = 0;     // palette index
  double x = 0, y = 0;
  double size = 0.06;  // half extent in world units
};

struct ObjectDesc {
  int color = 0;
  ObjShape shape = ObjShape::Square;

  bool operator==(const ObjectDesc&) const = default;
  std::string text() const { return color_name(color) + " " + shape_name(shape); }
};

struct Scene {
  std::vector<SceneObject> objects;
  double effector_x = 0.5, effector_y = 0.5;
  int held = -1;  // index into objects, or -1
  int background = 0;
  int texture = 0;
  double camera_dx = 0, camera_dy = 0;  // jitter in pixels
  double lighting = 1.0;
  bool mask_background = false;
};

struct TaskSpec {
  TaskKind kind = TaskKind::Reach;
  ObjectDesc target;
  ObjectDesc reference;  // PlaceNear only
  double success_radius = 0.1;
};

const std::string& task_name(TaskKind k);

// ---- environment configuration ----

struct EnvConfig {
  int image_size = 32;
  double object_min_size = 0.085;
  double object_max_size = 0.125;
  double grasp_radius = 0.09;
  double success_radius = 0.1;
  double spawn_separation = 0.28;
  double max_step_delta = 0.2;
  int decimals = 4;  // expert label quantization
  int horizon = 2;
  int max_sample_tries = 200;
};

// Disjoint visual asset pools; train ids never overlap holdout ids.
struct VisualAssets {
  std::vector<int> background_ids;
  std::vector<int> texture_ids;
};

// Sampling profile: which assets and how much visual variation.
struct SceneProfile {
  VisualAssets assets;
  double lighting_min = 1.0, lighting_max = 1.0;
  double camera_jitter_px = 0.0;
  int min_distractors = 1, max_distractors = 1;
};

// Default pool split used throughout: backgrounds 0-5 / textures 0-3 are the
// training pool, backgrounds 6-11 / textures 4-7 are held out for evaluation.
VisualAssets train_assets();
VisualAssets holdout_assets();
// Narrow distribution used for robot demonstrations.
SceneProfile robot_train_profile();
// Broad distribution used for vision-language and class datasets.
SceneProfile vl_train_profile();

int num_backgrounds();
int num_textures();

// ---- core operations ----

// Solvable scene plus task with uniquely resolvable descriptors. Throws after
// config.max_sample_tries failed placement attempts.
std::pair<Scene, TaskSpec> sample_scene(Rng& rng, const SceneProfile& profile, TaskKind kind,
                                        const EnvConfig& config);

ImageObservation render(const Scene& scene, const EnvConfig& config);

// Applies one action: effector translation (dz and rotations are accepted but
// inert in 2D), then the gripper transition at the new position.
Scene step(const Scene& scene, const ActionVector& action, const EnvConfig& config);

bool success(const Scene& scene, const TaskSpec& task);

// Index of the unique object matching desc, or -1.
int find_object(const Scene& scene, const ObjectDesc& desc);

// Proportional controller toward the current subgoal, emitting `horizon`
// quantized actions per call (simulated internally so the chunk is open-loop
// consistent).
ActionChunk scripted_expert(const Scene& scene, const TaskSpec& task, int horizon,
                            const EnvConfig& config);

// ---- instructions & paraphrases ----

std::string canonical_instruction(const TaskSpec& task);

enum class ParaphraseSplit : std::uint8_t { TrainVisible, Holdout };

struct ParaphraseBank {
  // Verb-phrase templates per task kind; "{a}" and "{b}" expand to object
  // descriptors ("the red square"). The canonical entry is what the robot
  // datasets use; holdout entries share no verb words with canonical,
  // train-visible, or VL question templates.
  struct Entry {
    std::string canonical;
    std::vector<std::string> train_visible;
    std::vector<std::string> holdout;
  };
  Entry reach;
  Entry pick;
  Entry place_near;

  const Entry& entry(TaskKind k) const;
};

const ParaphraseBank& default_paraphrase_bank();

// Rewrites a canonical instruction using a synonym template from the chosen
// split. Throws when the instruction does not match any known template.
std::string paraphrase(const std::string& instruction, const ParaphraseBank& bank, Rng& rng,
                       ParaphraseSplit split);

// All words a bank entry's templates can emit (for the disjointness checks).
std::vector<std::string> bank_phrase_words(const ParaphraseBank::Entry& entry, bool holdout);

// ---- evaluation variants ----

enum class VariantKind : std::uint8_t {
  Matching = 0,
  MaskedBackground,
  RandomBackground,
  RandomTexture,
  Distractors,
  CameraJitter,
  LightingShift,
  Paraphrase,
};

struct VariantSpec {
  VariantKind kind = VariantKind::Matching;
  int param = 2;  // Distractors(n)

  std::string name() const;
};

// All variants evaluated in the default suite (Matching plus perturbations).
std::vector<VariantSpec> default_variants();

// Mutates a Matching draw into the variant's distribution. Paraphrase
// variants rewrite the instruction; visual variants draw from holdout pools.
void apply_variant(Scene& scene, std::string& instruction, const VariantSpec& variant, Rng& rng,
                   const EnvConfig& config);

}  // namespace microvla
