#include "tokenfocus/tokenizer.hpp"

#include <algorithm>
#include <cctype>

#include "tokenfocus/error.hpp"

namespace tokenfocus {

std::vector<std::string> Tokenizer::split(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word));
    word.clear();
  };
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      word.push_back(static_cast<char>(std::tolower(c)));
    } else {
      flush();
      if (!std::isspace(c)) out.emplace_back(1, ch);
    }
  }
  flush();
  return out;
}

Tokenizer::Tokenizer(std::vector<std::string> words, std::size_t reserved)
    : words_(std::move(words)), reserved_(reserved) {
  if (!std::is_sorted(words_.begin(), words_.end()) ||
      std::adjacent_find(words_.begin(), words_.end()) != words_.end()) {
    throw InputError("tokenizer vocabulary must be sorted and unique");
  }
}

Tokenizer Tokenizer::fit(std::span<const std::string> texts, std::size_t reserved) {
  std::vector<std::string> words;
  for (const auto& t : texts) {
    auto w = split(t);
    words.insert(words.end(), std::make_move_iterator(w.begin()), std::make_move_iterator(w.end()));
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return Tokenizer(std::move(words), reserved);
}

std::vector<std::size_t> Tokenizer::encode(std::string_view text) const {
  std::vector<std::size_t> ids;
  for (const auto& w : split(text)) {
    const auto it = std::lower_bound(words_.begin(), words_.end(), w);
    ids.push_back(it != words_.end() && *it == w
                      ? reserved_ + static_cast<std::size_t>(it - words_.begin())
                      : unknown_id());
  }
  return ids;
}

nlohmann::json Tokenizer::to_json() const { return {{"reserved", reserved_}, {"words", words_}}; }

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  return Tokenizer(j.at("words").get<std::vector<std::string>>(), j.at("reserved").get<std::size_t>());
}

}  // namespace tokenfocus
