#include "merlin/modelstack/tokenizer.hpp"

#include "merlin/error.hpp"

#include <algorithm>
#include <array>
#include <cctype>

namespace merlin::modelstack {

namespace {

constexpr std::array<std::string_view, SpecialIds::count> kReserved = {
    "<pad>", "<unk>", "<bos>", "<sep>", "<eos>", "<start_of_turn>", "<end_of_turn>"};

bool is_punct(char c) { return c == '.' || c == ',' || c == '?' || c == '!' || c == ':' || c == ';'; }

}  // namespace

Tokenizer::Tokenizer(std::vector<std::string> vocab, std::vector<std::string> languages)
    : vocab_(std::move(vocab)), languages_(std::move(languages)) {
  if (vocab_.size() < kReserved.size()) throw InvalidInput("tokenizer: vocabulary lacks reserved tokens");
  for (std::size_t i = 0; i < kReserved.size(); ++i)
    if (vocab_[i] != kReserved[i]) throw InvalidInput("tokenizer: reserved token order mismatch");
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!index_.emplace(vocab_[i], static_cast<int>(i)).second)
      throw InvalidInput("tokenizer: duplicate token '" + vocab_[i] + "'");
  }
}

std::vector<std::string> Tokenizer::split_words(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (c == '<') {
      const auto close = text.find('>', i);
      if (close != std::string_view::npos) {
        const std::string_view tag = text.substr(i, close - i + 1);
        if (std::find(kReserved.begin(), kReserved.end(), tag) != kReserved.end()) {
          flush();
          out.emplace_back(tag);
          i = close;
          continue;
        }
      }
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      flush();
    } else if (is_punct(c)) {
      // Keep decimal points and digit-group commas inside numerals.
      const bool inside_number = (c == '.' || c == ',') && !cur.empty() &&
                                 std::isdigit(static_cast<unsigned char>(cur.back())) && i + 1 < text.size() &&
                                 std::isdigit(static_cast<unsigned char>(text[i + 1]));
      if (inside_number) {
        cur.push_back(c);
      } else {
        flush();
        out.emplace_back(1, c);
      }
    } else {
      cur.push_back(c);
    }
  }
  flush();
  return out;
}

Tokenizer Tokenizer::build(std::span<const std::string> texts, std::vector<std::string> languages) {
  std::vector<std::string> vocab(kReserved.begin(), kReserved.end());
  std::unordered_map<std::string, int> seen;
  for (const auto& v : vocab) seen.emplace(v, 0);
  auto add = [&](const std::string& w) {
    if (seen.emplace(w, 0).second) vocab.push_back(w);
  };
  for (char c = 'a'; c <= 'z'; ++c) add(std::string(1, c));
  for (char c = '0'; c <= '9'; ++c) add(std::string(1, c));
  for (const auto& t : texts)
    for (const auto& w : split_words(t)) add(w);
  return Tokenizer(std::move(vocab), std::move(languages));
}

TokenIds Tokenizer::encode(std::string_view text, std::string_view language) const {
  if (!has_language(language)) throw UnknownLanguage("unknown language tag '" + std::string(language) + "'");
  TokenIds ids;
  for (const auto& w : split_words(text)) {
    const int i = id(w);
    if (i >= 0) {
      ids.push_back(i);
      continue;
    }
    for (char c : w) {
      const int ci = id(std::string(1, c));
      ids.push_back(ci >= 0 ? ci : SpecialIds::unk);
    }
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  for (int i : ids) {
    if (i == SpecialIds::pad || i == SpecialIds::bos || i == SpecialIds::sep || i == SpecialIds::eos) continue;
    const std::string& tok = token(i);
    const bool attach = tok.size() == 1 && is_punct(tok[0]);
    if (!out.empty() && !attach) out.push_back(' ');
    out += tok;
  }
  return out;
}

int Tokenizer::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  return it == index_.end() ? -1 : it->second;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || id >= size()) throw InvalidTokenId("token id " + std::to_string(id) + " outside vocabulary");
  return vocab_[static_cast<std::size_t>(id)];
}

bool Tokenizer::has_language(std::string_view language) const {
  return std::find(languages_.begin(), languages_.end(), language) != languages_.end();
}

nlohmann::json Tokenizer::to_json() const { return {{"vocab", vocab_}, {"languages", languages_}}; }

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  return Tokenizer(j.at("vocab").get<std::vector<std::string>>(), j.at("languages").get<std::vector<std::string>>());
}

}  // namespace merlin::modelstack
