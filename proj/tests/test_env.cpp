#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "microvla/datasets.hpp"
#include "microvla/env.hpp"

using namespace microvla;

namespace {
const EnvConfig kEnv;
}

TEST_CASE("train and holdout visual pools are disjoint") {
  const VisualAssets train = train_assets(), holdout = holdout_assets();
  for (int b : train.background_ids) {
    CHECK(std::find(holdout.background_ids.begin(), holdout.background_ids.end(), b) ==
          holdout.background_ids.end());
  }
  for (int t : train.texture_ids) {
    CHECK(std::find(holdout.texture_ids.begin(), holdout.texture_ids.end(), t) ==
          holdout.texture_ids.end());
  }
  // Robot and VL profiles both draw from the train pool only.
  for (int b : robot_train_profile().assets.background_ids) {
    CHECK(std::find(train.background_ids.begin(), train.background_ids.end(), b) !=
          train.background_ids.end());
  }
  for (int b : vl_train_profile().assets.background_ids) {
    CHECK(std::find(train.background_ids.begin(), train.background_ids.end(), b) !=
          train.background_ids.end());
  }
}

TEST_CASE("sampled scenes never use holdout assets and descriptors stay unique") {
  const auto holdout = holdout_assets();
  const std::set<int> holdout_bg(holdout.background_ids.begin(), holdout.background_ids.end());
  for (int i = 0; i < 10000; ++i) {
    Rng rng(derive_seed(4, "scene", static_cast<std::uint64_t>(i)));
    const TaskKind kind = static_cast<TaskKind>(i % 3);
    const auto [scene, task] = sample_scene(rng, robot_train_profile(), kind, kEnv);
    CHECK(holdout_bg.count(scene.background) == 0);
    CHECK(find_object(scene, task.target) >= 0);
    if (kind == TaskKind::PlaceNear) CHECK(find_object(scene, task.reference) >= 0);
    // All descriptors pairwise distinct by construction.
    std::set<std::pair<int, int>> descs;
    for (const auto& o : scene.objects) {
      CHECK(descs.emplace(o.color, static_cast<int>(o.shape)).second);
    }
    CHECK_FALSE(success(scene, task));
  }
}

TEST_CASE("fixed seed reproduces the scene exactly") {
  Rng a(123), b(123);
  const auto [s1, t1] = sample_scene(a, robot_train_profile(), TaskKind::Pick, kEnv);
  const auto [s2, t2] = sample_scene(b, robot_train_profile(), TaskKind::Pick, kEnv);
  CHECK(s1.objects.size() == s2.objects.size());
  CHECK(s1.effector_x == s2.effector_x);
  CHECK(s1.background == s2.background);
  const auto i1 = render(s1, kEnv), i2 = render(s2, kEnv);
  CHECK(i1.pixels == i2.pixels);
}

TEST_CASE("render is deterministic and quantized to the 255 grid") {
  Rng rng(9);
  const auto [scene, task] = sample_scene(rng, vl_train_profile(), TaskKind::Reach, kEnv);
  const auto img = render(scene, kEnv);
  CHECK(img.pixels == render(scene, kEnv).pixels);
  for (float p : img.pixels) {
    const float q = std::round(p * 255.0f) / 255.0f;
    CHECK(p == q);
  }
}

TEST_CASE("masked background makes all non-object non-effector pixels the mask color") {
  Rng rng(11);
  auto [scene, task] = sample_scene(rng, robot_train_profile(), TaskKind::Pick, kEnv);
  scene.mask_background = true;
  const auto img = render(scene, kEnv);
  int mask_pixels = 0, other = 0;
  for (int r = 0; r < img.height; ++r) {
    for (int c = 0; c < img.width; ++c) {
      const bool is_mask = img.at(r, c, 0) == doctest::Approx(38.0f / 255.0f).epsilon(1e-6) &&
                           img.at(r, c, 1) == img.at(r, c, 0) && img.at(r, c, 2) == img.at(r, c, 0);
      (is_mask ? mask_pixels : other)++;
    }
  }
  CHECK(mask_pixels > other);  // background dominates a sparse scene
  // And no pixel carries the background palette color.
  scene.mask_background = false;
  const auto unmasked = render(scene, kEnv);
  CHECK(unmasked.pixels != img.pixels);
}

TEST_CASE("changing one object's color only changes that object's raster footprint") {
  Rng rng(13);
  auto [scene, task] = sample_scene(rng, robot_train_profile(), TaskKind::Pick, kEnv);
  Scene recolored = scene;
  // Use a color absent from the scene to keep descriptors unique.
  std::set<int> used;
  for (const auto& o : scene.objects) used.insert(o.color);
  int fresh = 0;
  while (used.count(fresh)) ++fresh;
  recolored.objects[0].color = fresh;

  const auto img1 = render(scene, kEnv);
  const auto img2 = render(recolored, kEnv);
  const auto& obj = scene.objects[0];
  int diffs = 0;
  for (int r = 0; r < img1.height; ++r) {
    for (int c = 0; c < img1.width; ++c) {
      const bool differs = img1.at(r, c, 0) != img2.at(r, c, 0) ||
                           img1.at(r, c, 1) != img2.at(r, c, 1) ||
                           img1.at(r, c, 2) != img2.at(r, c, 2);
      if (differs) {
        ++diffs;
        // Pixel center must fall inside the object's bounding box.
        const double wx = (c + 0.5) / img1.width;
        const double wy = (r + 0.5) / img1.height;
        CHECK(std::abs(wx - obj.x) <= obj.size + 1e-9);
        CHECK(std::abs(wy - obj.y) <= obj.size + 1e-9);
      }
    }
  }
  CHECK(diffs > 0);
}

TEST_CASE("step: zero action is identity, bounds clip, pick and release work") {
  Rng rng(17);
  auto [scene, task] = sample_scene(rng, robot_train_profile(), TaskKind::Pick, kEnv);
  const Scene same = step(scene, ActionVector{}, kEnv);
  CHECK(same.effector_x == scene.effector_x);
  CHECK(same.effector_y == scene.effector_y);
  CHECK(same.held == scene.held);

  Scene s = scene;
  s.effector_x = 0.95;
  ActionVector right;
  right.dx = 0.1;
  CHECK(step(s, right, kEnv).effector_x == 1.0);

  // Pick, move, release: the object ends up displaced by the net movement.
  const int target = find_object(scene, task.target);
  REQUIRE(target >= 0);
  Scene at = scene;
  at.effector_x = at.objects[static_cast<std::size_t>(target)].x;
  at.effector_y = at.objects[static_cast<std::size_t>(target)].y;
  ActionVector grasp;
  grasp.gripper = 1;
  Scene held = step(at, grasp, kEnv);
  CHECK(held.held == target);

  ActionVector move;
  move.dx = 0.15;
  move.dy = -0.1;
  move.gripper = 1;
  Scene moved = step(held, move, kEnv);
  CHECK(moved.objects[static_cast<std::size_t>(target)].x ==
        doctest::Approx(at.effector_x + 0.15));
  CHECK(moved.objects[static_cast<std::size_t>(target)].y ==
        doctest::Approx(at.effector_y - 0.1));

  ActionVector release;
  release.gripper = 0;
  Scene dropped = step(moved, release, kEnv);
  CHECK(dropped.held == -1);
  CHECK(dropped.objects[static_cast<std::size_t>(target)].x == moved.objects[static_cast<std::size_t>(target)].x);
}

TEST_CASE("success conditions per task kind") {
  Rng rng(19);
  auto [scene, task] = sample_scene(rng, robot_train_profile(), TaskKind::Reach, kEnv);
  const int target = find_object(scene, task.target);
  Scene at = scene;
  at.effector_x = at.objects[static_cast<std::size_t>(target)].x;
  at.effector_y = at.objects[static_cast<std::size_t>(target)].y;
  CHECK(success(at, task));

  TaskSpec pick = task;
  pick.kind = TaskKind::Pick;
  CHECK_FALSE(success(at, pick));
  at.held = target;
  CHECK(success(at, pick));
}

TEST_CASE("scripted expert: near-zero chunk at the goal, straight-line approach") {
  Rng rng(23);
  auto [scene, task] = sample_scene(rng, robot_train_profile(), TaskKind::Reach, kEnv);
  const int target = find_object(scene, task.target);
  Scene at = scene;
  at.effector_x = at.objects[static_cast<std::size_t>(target)].x;
  at.effector_y = at.objects[static_cast<std::size_t>(target)].y;
  const ActionChunk chunk = scripted_expert(at, task, 2, kEnv);
  for (const auto& a : chunk.actions) {
    CHECK(std::abs(a.dx) < 1e-3);
    CHECK(std::abs(a.dy) < 1e-3);
  }

  // From a distance, consecutive expert steps head the same direction.
  const ActionChunk far = scripted_expert(scene, task, 2, kEnv);
  const double n0 = std::hypot(far.actions[0].dx, far.actions[0].dy);
  if (n0 > 1e-6 && std::hypot(far.actions[1].dx, far.actions[1].dy) > 1e-6) {
    const double cross = far.actions[0].dx * far.actions[1].dy - far.actions[0].dy * far.actions[1].dx;
    CHECK(std::abs(cross) < 1e-3);
  }
  // Expert labels are quantized exactly.
  for (const auto& a : far.actions) {
    CHECK(a.dx == quantize(a.dx, kEnv.decimals));
    CHECK(a.dy == quantize(a.dy, kEnv.decimals));
  }
}

TEST_CASE("expert validity gate clears 99 percent on all tasks") {
  const auto report = expert_validity_gate(kEnv, 31, 1000, kEnv.horizon, 30);
  INFO("reach ", report.reach, " pick ", report.pick, " place_near ", report.place_near);
  CHECK(report.reach >= 0.99);
  CHECK(report.pick >= 0.99);
  CHECK(report.place_near >= 0.99);
}

TEST_CASE("paraphrase rewrites via bank splits; unknown templates error") {
  Rng rng(3);
  const auto& bank = default_paraphrase_bank();
  const std::string out = paraphrase("pick the red square", bank, rng, ParaphraseSplit::Holdout);
  CHECK((out == "grasp the red square" || out == "lift the red square"));
  const std::string tv = paraphrase("pick the red square", bank, rng, ParaphraseSplit::TrainVisible);
  CHECK((tv == "get the red square" || tv == "take the red square"));

  const std::string pn = paraphrase("move the red square near the blue circle", bank, rng,
                                    ParaphraseSplit::Holdout);
  CHECK((pn == "place the red square beside the blue circle" ||
         pn == "bring the red square toward the blue circle"));

  CHECK_THROWS_AS(paraphrase("launch the red square", bank, rng, ParaphraseSplit::Holdout),
                  std::runtime_error);
}

TEST_CASE("identity paraphrase when the bank has one matching entry") {
  ParaphraseBank bank = default_paraphrase_bank();
  bank.pick.holdout = {"pick {a}"};
  Rng rng(1);
  CHECK(paraphrase("pick the red square", bank, rng, ParaphraseSplit::Holdout) ==
        "pick the red square");
}

TEST_CASE("holdout paraphrase verbs never appear in train instructions or VL questions") {
  const auto& bank = default_paraphrase_bank();
  std::set<std::string> train_words;
  for (TaskKind k : {TaskKind::Reach, TaskKind::Pick, TaskKind::PlaceNear}) {
    for (const auto& w : bank_phrase_words(bank.entry(k), false)) train_words.insert(w);
  }
  // Words that VL question templates can emit.
  for (const char* w : {"is", "the", "left", "right", "of", "above", "below", "what", "color",
                        "how", "many", "are", "there", "point", "to", "yes", "no"}) {
    train_words.insert(w);
  }
  for (int c = 0; c < kNumColors; ++c) train_words.insert(color_name(c));
  for (int s = 0; s < kNumShapes; ++s) {
    train_words.insert(shape_name(static_cast<ObjShape>(s)));
    train_words.insert(shape_plural(static_cast<ObjShape>(s)));
  }
  for (TaskKind k : {TaskKind::Reach, TaskKind::Pick, TaskKind::PlaceNear}) {
    for (const auto& w : bank_phrase_words(bank.entry(k), true)) {
      INFO("holdout word ", w);
      CHECK(train_words.count(w) == 0);
    }
  }
}

TEST_CASE("variants mutate scenes into their holdout distributions") {
  const auto holdout = holdout_assets();
  Rng rng(41);
  auto [scene, task] = sample_scene(rng, robot_train_profile(), TaskKind::Pick, kEnv);
  std::string instr = canonical_instruction(task);

  Scene s = scene;
  apply_variant(s, instr, {VariantKind::MaskedBackground, 0}, rng, kEnv);
  CHECK(s.mask_background);

  s = scene;
  apply_variant(s, instr, {VariantKind::RandomBackground, 0}, rng, kEnv);
  CHECK(std::find(holdout.background_ids.begin(), holdout.background_ids.end(), s.background) !=
        holdout.background_ids.end());

  s = scene;
  apply_variant(s, instr, {VariantKind::Distractors, 2}, rng, kEnv);
  CHECK(s.objects.size() == scene.objects.size() + 2);

  s = scene;
  apply_variant(s, instr, {VariantKind::LightingShift, 0}, rng, kEnv);
  CHECK((s.lighting < 0.8 || s.lighting > 1.25));

  s = scene;
  std::string para = instr;
  apply_variant(s, para, {VariantKind::Paraphrase, 0}, rng, kEnv);
  CHECK(para != instr);
}

TEST_CASE("canonical instructions render from task specs") {
  TaskSpec t;
  t.kind = TaskKind::Pick;
  t.target = ObjectDesc{0, ObjShape::Square};
  CHECK(canonical_instruction(t) == "pick the red square");
  t.kind = TaskKind::PlaceNear;
  t.reference = ObjectDesc{2, ObjShape::Circle};
  CHECK(canonical_instruction(t) == "move the red square near the blue circle");
}
