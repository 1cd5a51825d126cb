#pragma once

#include "merlin/tensor.hpp"

#include <nlohmann/json.hpp>

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace merlin::modelstack {

/// Reserved ids shared by every toy vocabulary.
struct SpecialIds {
  static constexpr int pad = 0;
  static constexpr int unk = 1;
  static constexpr int bos = 2;
  static constexpr int sep = 3;
  static constexpr int eos = 4;
  static constexpr int start_of_turn = 5;
  static constexpr int end_of_turn = 6;
  static constexpr int count = 7;
};

/// Word-level tokenizer with a per-character fallback for out-of-vocabulary
/// words. Punctuation `.,?!:;` is split into its own tokens and the literal
/// markers `<bos>`, `<sep>`, `<eos>`, `<start_of_turn>`, `<end_of_turn>` map
/// to their reserved ids.
class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(std::vector<std::string> vocab, std::vector<std::string> languages);

  /// Builds a vocabulary: reserved tokens, then the lowercase alphabet and
  /// digits used by the character fallback, then every word of `texts` in
  /// first-seen order.
  static Tokenizer build(std::span<const std::string> texts, std::vector<std::string> languages);

  TokenIds encode(std::string_view text, std::string_view language) const;
  std::string decode(std::span<const int> ids) const;

  int id(std::string_view token) const;
  const std::string& token(int id) const;
  int size() const { return static_cast<int>(vocab_.size()); }
  bool has_language(std::string_view language) const;
  const std::vector<std::string>& languages() const { return languages_; }
  const std::vector<std::string>& vocabulary() const { return vocab_; }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

  /// Splits text into surface words (no vocabulary lookup).
  static std::vector<std::string> split_words(std::string_view text);

 private:
  std::vector<std::string> vocab_;
  std::vector<std::string> languages_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace merlin::modelstack
