#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace tokenfocus {

// Word-level vocabulary for the toy scorer. Ids [0, reserved) are kept free
// for score-label tokens; words follow in sorted order; the last id is the
// unknown-word token. Words are maximal runs of ASCII alphanumerics,
// lowercased; every other byte that is not whitespace is a one-byte word.
class Tokenizer {
 public:
  static Tokenizer fit(std::span<const std::string> texts, std::size_t reserved);

  Tokenizer(std::vector<std::string> words, std::size_t reserved);

  std::vector<std::size_t> encode(std::string_view text) const;

  std::size_t reserved() const { return reserved_; }
  std::size_t vocab_size() const { return reserved_ + words_.size() + 1; }
  std::size_t unknown_id() const { return reserved_ + words_.size(); }
  const std::vector<std::string>& words() const { return words_; }

  nlohmann::json to_json() const;
  static Tokenizer from_json(const nlohmann::json& j);

  static std::vector<std::string> split(std::string_view text);

 private:
  std::vector<std::string> words_;  // sorted, unique
  std::size_t reserved_;
};

}  // namespace tokenfocus
