#pragma once

// Synthetic EvalMuse-style fixtures. Each prompt is a handful of words from a
// fixed lexicon; every word carries a hidden weight and every generator model
// a hidden quality. Scores are a fixed function of (words, model), optionally
// passed through simulated annotators.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tokenfocus/dataset.hpp"

namespace tokenfocus::synthetic {

struct LexiconEntry {
  const char* word;
  ElementCategory category;
  double weight;  // in [0, 1]
};

const std::vector<LexiconEntry>& lexicon();

struct ModelProfile {
  std::string name;
  double quality;  // in [0, 1]
};

const std::vector<ModelProfile>& default_models();

struct Config {
  std::size_t prompts = 100;
  std::size_t samples_per_prompt = 6;
  std::size_t min_words = 3;
  std::size_t max_words = 5;
  // 0 means scores are the exact latent values; otherwise each score is the
  // mean of this many simulated annotator ratings.
  std::size_t annotators = 0;
  double annotator_noise = 0.6;  // std-dev of each total-score rating
  std::uint64_t seed = 1234;
  std::string id_prefix;  // prepended to sample and prompt ids
};

// Latent total score in [1, 5] and latent element presence in [0, 1].
double latent_total(const std::vector<std::size_t>& words, const ModelProfile& model);
double latent_element(std::size_t word, const ModelProfile& model);

std::vector<SampleRecord> make_dataset(const Config& cfg);

}  // namespace tokenfocus::synthetic
