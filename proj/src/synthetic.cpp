#include "tokenfocus/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "tokenfocus/random.hpp"

namespace tokenfocus::synthetic {

const std::vector<LexiconEntry>& lexicon() {
  using C = ElementCategory;
  static const std::vector<LexiconEntry> words = {
      {"cat", C::object, 0.92},       {"dog", C::object, 0.85},      {"horse", C::object, 0.40},
      {"castle", C::object, 0.22},    {"bicycle", C::object, 0.15},  {"violin", C::object, 0.08},
      {"lighthouse", C::object, 0.55}, {"teapot", C::object, 0.70},  {"robot", C::object, 0.63},
      {"running", C::action, 0.75},   {"jumping", C::action, 0.35},  {"juggling", C::action, 0.05},
      {"sleeping", C::action, 0.88},  {"reading", C::action, 0.28},  {"dancing", C::action, 0.47},
      {"swimming", C::action, 0.60},  {"red", C::attribute, 0.95},   {"wooden", C::attribute, 0.78},
      {"transparent", C::attribute, 0.12}, {"striped", C::attribute, 0.33},
      {"glowing", C::attribute, 0.52}, {"tiny", C::attribute, 0.67}, {"ancient", C::attribute, 0.25},
      {"metallic", C::attribute, 0.82},
  };
  return words;
}

const std::vector<ModelProfile>& default_models() {
  static const std::vector<ModelProfile> models = {
      {"pixart", 0.20}, {"sd15", 0.45}, {"sdxl", 0.70}, {"dalle3", 0.90}};
  return models;
}

double latent_total(const std::vector<std::size_t>& words, const ModelProfile& model) {
  double mean = 0.0;
  for (std::size_t w : words) mean += lexicon()[w].weight;
  mean /= static_cast<double>(words.size());
  return 1.0 + 4.0 * (0.6 * mean + 0.4 * model.quality);
}

double latent_element(std::size_t word, const ModelProfile& model) {
  return 0.6 * lexicon()[word].weight + 0.4 * model.quality;
}

namespace {

double normal(Rng& rng) {
  // Box-Muller; 1 - u keeps the log argument in (0, 1].
  const double u = 1.0 - rng.uniform();
  const double v = rng.uniform();
  return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

std::string make_id(const std::string& prefix, char kind, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c%05zu", kind, n);
  return prefix + buf;
}

}  // namespace

std::vector<SampleRecord> make_dataset(const Config& cfg) {
  Rng rng(cfg.seed);
  const auto& lex = lexicon();
  const auto& models = default_models();
  std::vector<SampleRecord> out;
  std::size_t sample_no = 0;
  std::vector<std::size_t> pool(lex.size());
  for (std::size_t p = 0; p < cfg.prompts; ++p) {
    const std::size_t span = cfg.max_words - cfg.min_words + 1;
    const std::size_t n_words = cfg.min_words + static_cast<std::size_t>(rng.below(span));
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    rng.shuffle(std::span<std::size_t>(pool));
    std::vector<std::size_t> words(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_words));
    std::string text;
    for (std::size_t w : words) text += (text.empty() ? "" : " ") + std::string(lex[w].word);
    const auto type = rng.uniform() < 0.5 ? PromptType::real : PromptType::synthetic;
    const double quality = std::round(rng.uniform() * 100.0) / 100.0;
    const std::size_t first_model = static_cast<std::size_t>(rng.below(models.size()));
    for (std::size_t s = 0; s < cfg.samples_per_prompt; ++s) {
      const auto& model = models[(first_model + s) % models.size()];
      SampleRecord r;
      r.sample_id = make_id(cfg.id_prefix, 's', sample_no++);
      r.prompt_id = make_id(cfg.id_prefix, 'p', p);
      r.prompt_text = text;
      r.t2i_model = model.name;
      r.prompt_type = type;
      r.prompt_quality = quality;
      r.image_ref = "images/" + r.sample_id + ".png";
      const double latent = latent_total(words, model);
      if (cfg.annotators == 0) {
        r.total_score = latent;
      } else {
        double sum = 0.0;
        for (std::size_t a = 0; a < cfg.annotators; ++a) {
          sum += std::clamp(std::round(latent + cfg.annotator_noise * normal(rng)), 1.0, 5.0);
        }
        r.total_score = sum / static_cast<double>(cfg.annotators);
      }
      for (std::size_t w : words) {
        const double presence = latent_element(w, model);
        double score = presence;
        if (cfg.annotators != 0) {
          std::size_t yes = 0;
          for (std::size_t a = 0; a < cfg.annotators; ++a) yes += rng.uniform() < presence ? 1 : 0;
          score = static_cast<double>(yes) / static_cast<double>(cfg.annotators);
        }
        r.elements.push_back({lex[w].word, lex[w].category, score});
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

}  // namespace tokenfocus::synthetic
