#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "microvla/action_codec.hpp"

namespace microvla {

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Token ids with a role mask: 0 = prompt/context position, 1 = supervised
// answer/action position.
struct TokenSequence {
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> supervised;

  std::size_t size() const { return ids.size(); }
  void push(std::int32_t id, bool sup) {
    ids.push_back(id);
    supervised.push_back(sup ? 1 : 0);
  }
  void append(const TokenSequence& other) {
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
    supervised.insert(supervised.end(), other.supervised.begin(), other.supervised.end());
  }
};

// Unified token space shared by instructions, VL answers, and action strings.
// Order is deterministic: specials, characters, sorted unique words, then bin
// tokens when a bin codec is configured.
class Vocabulary {
 public:
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kSepComponent = "<sep>";
  static constexpr const char* kSepAction = "<asep>";
  static constexpr const char* kAnswerStart = "<ans>";

  Vocabulary() = default;

  static Vocabulary build(const std::vector<std::string>& corpus, int num_bin_tokens = 0);
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  std::int32_t id(const std::string& token) const;
  bool contains(const std::string& token) const { return index_.count(token) > 0; }
  const std::string& token(std::int32_t id) const;
  std::int32_t size() const { return static_cast<std::int32_t>(tokens_.size()); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::int32_t pad() const { return pad_; }
  std::int32_t bos() const { return bos_; }
  std::int32_t eos() const { return eos_; }
  std::int32_t sep_component() const { return sep_component_; }
  std::int32_t sep_action() const { return sep_action_; }
  std::int32_t answer_start() const { return answer_start_; }

  int num_bin_tokens() const { return num_bin_tokens_; }
  std::int32_t bin_token_id(std::int32_t bin) const;
  // Inverse of bin_token_id; -1 when the id is not a bin token.
  std::int32_t bin_index_of(std::int32_t id) const;

  bool is_special(std::int32_t id) const { return id < num_specials_; }
  bool is_word(std::int32_t id) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void finalize();

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
  std::int32_t pad_ = -1, bos_ = -1, eos_ = -1;
  std::int32_t sep_component_ = -1, sep_action_ = -1, answer_start_ = -1;
  std::int32_t num_specials_ = 0, num_chars_ = 0, num_words_ = 0;
  std::int32_t num_bin_tokens_ = 0, bin_base_ = -1;
};

// Characters that tokenize one-per-token (shared by text and action strings).
bool is_codec_char(char c);

// Whitespace-split tokenization; alphabetic chunks are word tokens, chunks of
// codec characters split per character. Throws VocabError on unknown words.
TokenSequence tokenize_text(const std::string& s, const Vocabulary& vocab);

// Inverse of tokenize_text on the closed corpus.
std::string detokenize(const std::vector<std::int32_t>& ids, const Vocabulary& vocab);

// Token spellings for an encoded chunk mapped to ids (all supervised).
TokenSequence tokens_to_sequence(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                 bool supervised);

}  // namespace microvla
