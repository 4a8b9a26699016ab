#include "cuprec/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

#include "cuprec/interactions.hpp"

namespace cuprec {

namespace {

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t k = 0;
  while (k < text.size()) {
    while (k < text.size() && std::isspace(static_cast<unsigned char>(text[k]))) ++k;
    std::size_t start = k;
    while (k < text.size() && !std::isspace(static_cast<unsigned char>(text[k]))) ++k;
    if (k > start) out.push_back(text.substr(start, k - start));
  }
  return out;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.size() >= prefix.size() && s.substr(0, prefix.size()) == prefix;
}

// Template words without placeholders, e.g. "{user}" is skipped.
bool is_placeholder(std::string_view w) { return w.find('{') != std::string_view::npos; }

}  // namespace

Vocabulary::Vocabulary() {
  for (const char* s : {"<pad>", "<bos>", "<eos>", "<unk>"}) add(s);
  user_sigil_ = add(std::string(kUserSigil));
  item_sigil_ = add(std::string(kItemSigil));
  for (char c = '0'; c <= '9'; ++c) add(std::string(1, c));
}

Vocabulary::Vocabulary(const std::vector<std::string>& tokens) {
  if (tokens.size() < 4) throw std::invalid_argument("vocabulary needs the four special tokens");
  for (const auto& t : tokens) {
    if (index_.count(t)) throw std::invalid_argument("duplicate vocabulary token '" + t + "'");
    add(t);
  }
  auto u = index_.find(std::string(kUserSigil));
  auto i = index_.find(std::string(kItemSigil));
  user_sigil_ = u == index_.end() ? -1 : u->second;
  item_sigil_ = i == index_.end() ? -1 : i->second;
}

int Vocabulary::add(const std::string& token) {
  auto [it, inserted] = index_.try_emplace(token, static_cast<int>(tokens_.size()));
  if (inserted) tokens_.push_back(token);
  return it->second;
}

void Vocabulary::add_id_characters(std::string_view id) {
  for (char c : id) add(std::string(1, c));
}

void Vocabulary::add_words(std::string_view text) {
  for (auto w : split_words(text)) {
    if (is_placeholder(w) || starts_with(w, kUserSigil) || starts_with(w, kItemSigil)) continue;
    add(std::string(w));
  }
}

Vocabulary Vocabulary::from_corpus(const Corpus& corpus, const PromptTemplates& templates) {
  Vocabulary v;
  for (const auto& u : corpus.users) v.add_id_characters(u);
  for (const auto& i : corpus.items) v.add_id_characters(i);
  v.add_words(templates.sequential);
  v.add_words(templates.topn);
  v.add_words(templates.explanation);
  for (const auto& [key, text] : corpus.explanations) v.add_words(text);
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

Tokenized Vocabulary::tokenize(std::string_view text) const {
  Tokenized out;
  int slot = 0;
  for (auto w : split_words(text)) {
    ++slot;
    std::string_view sigil;
    if (user_sigil_ >= 0 && starts_with(w, kUserSigil)) sigil = kUserSigil;
    else if (item_sigil_ >= 0 && starts_with(w, kItemSigil)) sigil = kItemSigil;
    if (!sigil.empty()) {
      out.ids.push_back(sigil == kUserSigil ? user_sigil_ : item_sigil_);
      out.whole_word.push_back(slot);
      for (char c : w.substr(sigil.size())) {
        int t = id(std::string(1, c));
        if (t == kUnk) ++out.unknown;
        out.ids.push_back(t);
        out.whole_word.push_back(slot);
      }
      continue;
    }
    int t = id(std::string(w));
    if (t == kUnk) ++out.unknown;
    out.ids.push_back(t);
    out.whole_word.push_back(slot);
  }
  return out;
}

std::string Vocabulary::detokenize(const std::vector<int>& ids) const {
  std::string out;
  bool in_id = false;
  for (int t : ids) {
    if (t == kPad || t == kBos || t == kEos) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= tokens_.size()) continue;
    const std::string& s = tokens_[static_cast<std::size_t>(t)];
    if (is_sigil(t)) {
      if (!out.empty()) out += ' ';
      out += s;
      in_id = true;
      continue;
    }
    // A single-character token directly after a sigil continues the ID.
    if (in_id && s.size() == 1 && !std::isspace(static_cast<unsigned char>(s[0]))) {
      out += s;
      continue;
    }
    in_id = false;
    if (!out.empty()) out += ' ';
    out += s;
  }
  return out;
}

std::vector<int> Vocabulary::encode_id(std::string_view sigil, std::string_view id) const {
  std::string text(sigil);
  text += id;
  return tokenize(text).ids;
}

}  // namespace cuprec
