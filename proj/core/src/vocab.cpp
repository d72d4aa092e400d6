#include "microvla/vocab.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace microvla {

namespace {

const char* kCharTokens[] = {"0", "1", "2", "3", "4", "5", "6", "7",
                             "8", "9", ".", "-", "(", ")", ",", " "};

bool is_alpha_word(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z'))) return false;
  }
  return true;
}

bool is_char_chunk(const std::string& s) {
  if (s.empty()) return false;
  for (char c : s) {
    if (!is_codec_char(c)) return false;
  }
  return true;
}

}  // namespace

bool is_codec_char(char c) {
  return (c >= '0' && c <= '9') || c == '.' || c == '-' || c == '(' || c == ')' || c == ',' ||
         c == ' ';
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, int num_bin_tokens) {
  Vocabulary v;
  v.tokens_ = {kPad, kBos, kEos, kSepComponent, kSepAction, kAnswerStart};
  v.num_specials_ = static_cast<std::int32_t>(v.tokens_.size());
  for (const char* c : kCharTokens) v.tokens_.push_back(c);
  v.num_chars_ = static_cast<std::int32_t>(v.tokens_.size()) - v.num_specials_;

  std::set<std::string> words;
  for (const std::string& line : corpus) {
    std::istringstream is(line);
    std::string chunk;
    while (is >> chunk) {
      if (is_char_chunk(chunk)) continue;
      if (!is_alpha_word(chunk)) {
        throw VocabError("corpus chunk '" + chunk + "' is neither a word nor a character string");
      }
      words.insert(chunk);
    }
  }
  for (const auto& w : words) v.tokens_.push_back(w);
  v.num_words_ = static_cast<std::int32_t>(words.size());

  v.num_bin_tokens_ = num_bin_tokens;
  for (int b = 0; b < num_bin_tokens; ++b) v.tokens_.push_back("<bin" + std::to_string(b) + ">");

  v.finalize();
  return v;
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.num_specials_ = 6;
  v.num_chars_ = static_cast<std::int32_t>(std::size(kCharTokens));
  std::int32_t bins = 0;
  for (const auto& t : v.tokens_) {
    if (t.rfind("<bin", 0) == 0) ++bins;
  }
  v.num_bin_tokens_ = bins;
  v.num_words_ = static_cast<std::int32_t>(v.tokens_.size()) - v.num_specials_ - v.num_chars_ - bins;
  v.finalize();
  return v;
}

void Vocabulary::finalize() {
  index_.clear();
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (!index_.emplace(tokens_[i], static_cast<std::int32_t>(i)).second) {
      throw VocabError("duplicate token '" + tokens_[i] + "'");
    }
  }
  pad_ = id(kPad);
  bos_ = id(kBos);
  eos_ = id(kEos);
  sep_component_ = id(kSepComponent);
  sep_action_ = id(kSepAction);
  answer_start_ = id(kAnswerStart);
  bin_base_ = num_bin_tokens_ > 0 ? id("<bin0>") : -1;
}

std::int32_t Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  if (it == index_.end()) {
    throw VocabError("out-of-vocabulary token '" + token + "'");
  }
  return it->second;
}

const std::string& Vocabulary::token(std::int32_t id) const {
  if (id < 0 || id >= size()) {
    throw VocabError("token id " + std::to_string(id) + " outside vocabulary of size " +
                     std::to_string(size()));
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::int32_t Vocabulary::bin_token_id(std::int32_t bin) const {
  if (bin < 0 || bin >= num_bin_tokens_) {
    throw VocabError("bin index " + std::to_string(bin) + " outside [0, " +
                     std::to_string(num_bin_tokens_) + ")");
  }
  return bin_base_ + bin;
}

std::int32_t Vocabulary::bin_index_of(std::int32_t id) const {
  if (num_bin_tokens_ == 0 || id < bin_base_ || id >= bin_base_ + num_bin_tokens_) return -1;
  return id - bin_base_;
}

bool Vocabulary::is_word(std::int32_t id) const {
  return id >= num_specials_ + num_chars_ && id < num_specials_ + num_chars_ + num_words_;
}

TokenSequence tokenize_text(const std::string& s, const Vocabulary& vocab) {
  TokenSequence seq;
  std::istringstream is(s);
  std::string chunk;
  bool prev_was_chars = false;
  bool first = true;
  while (is >> chunk) {
    if (is_char_chunk(chunk)) {
      if (!first && prev_was_chars) seq.push(vocab.id(" "), false);
      for (char c : chunk) seq.push(vocab.id(std::string(1, c)), false);
      prev_was_chars = true;
    } else {
      if (!is_alpha_word(chunk)) {
        throw VocabError("cannot tokenize chunk '" + chunk + "'");
      }
      seq.push(vocab.id(chunk), false);
      prev_was_chars = false;
    }
    first = false;
  }
  return seq;
}

std::string detokenize(const std::vector<std::int32_t>& ids, const Vocabulary& vocab) {
  std::vector<std::string> pieces;
  std::string char_run;
  for (std::int32_t id : ids) {
    const std::string& tok = vocab.token(id);
    if (tok.size() == 1 && is_codec_char(tok[0])) {
      char_run += tok;
    } else {
      if (!char_run.empty()) {
        pieces.push_back(char_run);
        char_run.clear();
      }
      pieces.push_back(tok);
    }
  }
  if (!char_run.empty()) pieces.push_back(char_run);
  std::string out;
  for (std::size_t i = 0; i < pieces.size(); ++i) {
    if (i) out += ' ';
    out += pieces[i];
  }
  return out;
}

TokenSequence tokens_to_sequence(const std::vector<std::string>& tokens, const Vocabulary& vocab,
                                 bool supervised) {
  TokenSequence seq;
  for (const auto& t : tokens) seq.push(vocab.id(t), supervised);
  return seq;
}

}  // namespace microvla
