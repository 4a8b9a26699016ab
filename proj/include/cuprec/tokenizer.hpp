#pragma once

// Word-level vocabulary with character-level ID spans.
//
// Whitespace-delimited words are single tokens, except words starting with an
// ID sigil ("user_" / "item_"): those become the sigil token followed by one
// token per character of the ID, and every token of the span shares one
// whole-word slot. Slot 0 is reserved for soft-prompt rows.

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace cuprec {

struct Corpus;
struct PromptTemplates;

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

inline constexpr std::string_view kUserSigil = "user_";
inline constexpr std::string_view kItemSigil = "item_";

struct Tokenized {
  std::vector<int> ids;
  std::vector<int> whole_word;  // slot per token, 1-based
  std::size_t unknown = 0;
};

class Vocabulary {
 public:
  /// Specials, both sigils and the digits 0-9.
  Vocabulary();
  explicit Vocabulary(const std::vector<std::string>& tokens);

  /// Adds every ID character, template word and explanation word of the corpus.
  static Vocabulary from_corpus(const Corpus& corpus, const PromptTemplates& templates);

  int add(const std::string& token);
  void add_id_characters(std::string_view id);
  void add_words(std::string_view text);

  int id(const std::string& token) const;  // kUnk when absent
  bool contains(const std::string& token) const { return index_.count(token) != 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  int user_sigil() const { return user_sigil_; }
  int item_sigil() const { return item_sigil_; }
  bool is_sigil(int id) const { return id == user_sigil_ || id == item_sigil_; }

  Tokenized tokenize(std::string_view text) const;
  /// Inverse of tokenize up to whitespace normalisation; specials are skipped.
  std::string detokenize(const std::vector<int>& ids) const;
  /// Token ids of `item_<id>` without EOS.
  std::vector<int> encode_id(std::string_view sigil, std::string_view id) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  int user_sigil_ = -1;
  int item_sigil_ = -1;
};

}  // namespace cuprec
