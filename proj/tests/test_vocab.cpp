#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "microvla/datasets.hpp"
#include "microvla/vocab.hpp"

using namespace microvla;

TEST_CASE("empty word corpus gives specials plus characters only") {
  const Vocabulary v = Vocabulary::build({}, 0);
  CHECK(v.size() == 6 + 16);
  CHECK(v.token(0) == Vocabulary::kPad);
  CHECK(v.contains("0"));
  CHECK(v.contains("."));
  CHECK(v.contains(" "));
  CHECK_FALSE(v.contains("pick"));
}

TEST_CASE("building twice from the same corpus gives identical id assignment") {
  const auto corpus = vocab_corpus();
  const Vocabulary a = Vocabulary::build(corpus, 64);
  const Vocabulary b = Vocabulary::build(corpus, 64);
  CHECK(a == b);
  for (const auto& tok : a.tokens()) CHECK(a.id(tok) == b.id(tok));
}

TEST_CASE("vocabulary ordering is specials, characters, sorted words, bins") {
  const Vocabulary v = Vocabulary::build({"zebra apple", "mango"}, 2);
  CHECK(v.token(0) == "<pad>");
  CHECK(v.token(6) == "0");
  const std::int32_t first_word = 6 + 16;
  CHECK(v.token(first_word) == "apple");
  CHECK(v.token(first_word + 1) == "mango");
  CHECK(v.token(first_word + 2) == "zebra");
  CHECK(v.token(first_word + 3) == "<bin0>");
  CHECK(v.bin_token_id(1) == first_word + 4);
  CHECK(v.bin_index_of(v.bin_token_id(1)) == 1);
  CHECK(v.bin_index_of(0) == -1);
}

TEST_CASE("tokenize splits words and characters as specified") {
  const Vocabulary v = build_default_vocab(0);
  const TokenSequence words = tokenize_text("pick the red square", v);
  CHECK(words.ids.size() == 4);
  for (std::int32_t id : words.ids) CHECK(v.is_word(id));

  const TokenSequence chars = tokenize_text("(0.31, 0.72)", v);
  CHECK(chars.ids.size() == 12);
  for (std::int32_t id : chars.ids) CHECK_FALSE(v.is_word(id));
}

TEST_CASE("out-of-vocabulary word errors name the word") {
  const Vocabulary v = build_default_vocab(0);
  CHECK_THROWS_WITH_AS(tokenize_text("pick the shiny square", v), doctest::Contains("shiny"),
                       VocabError);
}

TEST_CASE("detokenize inverts tokenize on generator output") {
  const Vocabulary v = build_default_vocab(0);
  const std::vector<std::string> lines = {
      "pick the red square",
      "move the blue circle near the green triangle",
      "is the red square left of the blue circle",
      "what color is the triangle",
      "how many squares are there",
      "point to the orange circle",
      "(0.31, 0.72)",
      "yes",
      "no",
      "3",
  };
  for (const auto& s : lines) {
    const TokenSequence t = tokenize_text(s, v);
    CHECK(detokenize(t.ids, v) == s);
  }
}

TEST_CASE("round trip over sampled generated instructions and answers") {
  DataGenConfig cfg;
  cfg.robot_episodes = 12;
  cfg.vl_samples = 60;
  const Vocabulary v = build_default_vocab(cfg.num_bin_tokens);
  for (const auto& ep : gen_robot_dataset(cfg)) {
    for (const auto& s : ep.steps) {
      const TokenSequence t = tokenize_text(s.instruction, v);
      CHECK(detokenize(t.ids, v) == s.instruction);
    }
  }
  for (const auto& s : gen_vl_dataset(cfg)) {
    CHECK(detokenize(tokenize_text(s.question, v).ids, v) == s.question);
    CHECK(detokenize(tokenize_text(s.answer, v).ids, v) == s.answer);
  }
}

TEST_CASE("vocabulary from the full corpus covers every emitted token") {
  DataGenConfig cfg;
  cfg.robot_episodes = 30;
  cfg.vl_samples = 200;
  const Vocabulary v = build_default_vocab(cfg.num_bin_tokens);
  // Instructions under every paraphrase split must tokenize too.
  Rng rng(5);
  for (const auto& ep : gen_robot_dataset(cfg)) {
    const std::string canon = ep.steps.empty() ? "" : ep.steps[0].instruction;
    if (canon.empty()) continue;
    tokenize_text(canon, v);
    tokenize_text(paraphrase(canon, default_paraphrase_bank(), rng, ParaphraseSplit::TrainVisible), v);
    tokenize_text(paraphrase(canon, default_paraphrase_bank(), rng, ParaphraseSplit::Holdout), v);
  }
  for (const auto& s : gen_vl_dataset(cfg)) {
    tokenize_text(s.question, v);
    tokenize_text(s.answer, v);
  }
  // Codec tokens, including separators, are vocabulary members.
  CodecConfig codec;
  CHECK(v.id(codec.component_separator) == v.sep_component());
  CHECK(v.id(codec.action_separator) == v.sep_action());
}

TEST_CASE("serialization round trip preserves ids") {
  const Vocabulary v = build_default_vocab(256);
  const Vocabulary w = Vocabulary::from_tokens(v.tokens());
  CHECK(v == w);
  CHECK(w.num_bin_tokens() == 256);
  CHECK(w.bin_token_id(0) == v.bin_token_id(0));
  CHECK(w.pad() == v.pad());
  CHECK(w.answer_start() == v.answer_start());
}

TEST_CASE("token sequences enforce vocabulary bounds") {
  const Vocabulary v = build_default_vocab(0);
  CHECK_THROWS_AS(v.token(v.size()), VocabError);
  CHECK_THROWS_AS(v.token(-1), VocabError);
}
