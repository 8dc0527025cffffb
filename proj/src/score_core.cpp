#include "tokenfocus/score_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "tokenfocus/error.hpp"

namespace tokenfocus {

std::string_view to_string(ProjectionMode mode) {
  return mode == ProjectionMode::literal ? "literal" : "logit_renorm";
}

std::string_view to_string(TaskKind kind) { return kind == TaskKind::total ? "total" : "element"; }

ProjectionMode parse_projection_mode(std::string_view text) {
  if (text == "literal") return ProjectionMode::literal;
  if (text == "logit_renorm" || text == "logit-renorm") return ProjectionMode::logit_renorm;
  throw InputError("unknown projection mode '" + std::string(text) + "'");
}

TaskKind parse_task_kind(std::string_view text) {
  if (text == "total") return TaskKind::total;
  if (text == "element") return TaskKind::element;
  throw InputError("unknown task '" + std::string(text) + "'");
}

ScoreSpace::ScoreSpace(std::vector<ScoreEntry> entries, TaskKind kind)
    : entries_(std::move(entries)), kind_(kind) {
  if (entries_.size() < 2) throw InputError("score space needs at least 2 entries");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!std::isfinite(entries_[i].value)) throw InputError("score value must be finite");
    if (i > 0 && !(entries_[i - 1].value < entries_[i].value)) {
      throw InputError("score values must be distinct and ascending");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (entries_[j].token_id == entries_[i].token_id) {
        throw InputError("duplicate score token id " + std::to_string(entries_[i].token_id));
      }
    }
  }
}

ScoreSpace ScoreSpace::integer_range(std::size_t first_token, int lo, int hi, TaskKind kind) {
  std::vector<ScoreEntry> entries;
  for (int v = lo; v <= hi; ++v) {
    entries.push_back({first_token + static_cast<std::size_t>(v - lo), static_cast<double>(v)});
  }
  return ScoreSpace(std::move(entries), kind);
}

std::size_t ScoreSpace::max_token_id() const {
  std::size_t m = 0;
  for (const auto& e : entries_) m = std::max(m, e.token_id);
  return m;
}

std::optional<std::size_t> ScoreSpace::index_of_token(std::size_t token_id) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].token_id == token_id) return i;
  }
  return std::nullopt;
}

std::vector<double> ScoreSpace::values() const {
  std::vector<double> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.value);
  return out;
}

TokenDistribution TokenDistribution::from_logits(std::vector<double> logits) {
  TokenDistribution d;
  d.vocab_size = logits.size();
  d.logits = std::move(logits);
  d.validate();
  return d;
}

TokenDistribution TokenDistribution::from_probabilities(std::vector<double> probabilities) {
  TokenDistribution d;
  d.vocab_size = probabilities.size();
  d.probabilities = std::move(probabilities);
  d.validate();
  return d;
}

void TokenDistribution::validate() const {
  if (vocab_size == 0) throw InputError("vocab_size must be positive");
  if (!logits && !probabilities) throw InputError("distribution has neither logits nor probabilities");
  if (logits && logits->size() != vocab_size) throw InputError("logits length != vocab_size");
  if (probabilities) {
    if (probabilities->size() != vocab_size) throw InputError("probabilities length != vocab_size");
    double sum = 0.0;
    for (double p : *probabilities) {
      if (!std::isfinite(p)) throw NumericError("non-finite probability");
      if (p < 0.0) throw InputError("negative probability");
      sum += p;
    }
    if (std::abs(sum - 1.0) > kProbabilitySumTolerance) {
      throw InputError("probabilities sum to " + std::to_string(sum) + ", expected 1");
    }
  }
}

std::vector<double> stable_softmax(std::span<const double> values) {
  if (values.empty()) throw InputError("softmax of empty vector");
  double max_v = -INFINITY;
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite logit");
    max_v = std::max(max_v, v);
  }
  std::vector<double> out(values.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    out[i] = std::exp(values[i] - max_v);
    sum += out[i];
  }
  for (double& v : out) v /= sum;
  return out;
}

TokenDistribution softmax_full(const TokenDistribution& dist) {
  if (!dist.logits) throw InputError("softmax_full requires logits");
  if (dist.vocab_size == 0 || dist.logits->size() != dist.vocab_size) {
    throw InputError("logits length != vocab_size");
  }
  TokenDistribution out = dist;
  out.probabilities = stable_softmax(*dist.logits);
  return out;
}

namespace {

void check_tokens_in_range(const ScoreSpace& space, std::size_t vocab_size) {
  for (const auto& e : space.entries()) {
    if (e.token_id >= vocab_size) {
      throw InputError("score token id " + std::to_string(e.token_id) +
                       " out of range for vocab_size " + std::to_string(vocab_size));
    }
  }
}

std::vector<double> gather(std::span<const double> values, const ScoreSpace& space) {
  std::vector<double> out;
  out.reserve(space.size());
  for (const auto& e : space.entries()) out.push_back(values[e.token_id]);
  return out;
}

}  // namespace

ScoreDistribution project_scores(const TokenDistribution& dist, const ScoreSpace& space,
                                 ProjectionMode mode) {
  check_tokens_in_range(space, dist.vocab_size);
  if (mode == ProjectionMode::literal) {
    if (!dist.probabilities) {
      throw InputError("literal projection requires probabilities (apply softmax_full first)");
    }
    return {stable_softmax(gather(*dist.probabilities, space))};
  }
  if (!dist.logits) throw InputError("logit_renorm projection requires logits");
  return {stable_softmax(gather(*dist.logits, space))};
}

ScoreDistribution project_fragment(const ScoreTokenFragment& fragment, const ScoreSpace& space,
                                   ProjectionMode mode) {
  const auto& field = mode == ProjectionMode::literal ? fragment.probabilities : fragment.logits;
  if (!field) {
    throw InputError(std::string(to_string(mode)) + " projection requires score_token_" +
                     (mode == ProjectionMode::literal ? "probs" : "logits"));
  }
  if (field->size() != space.size()) throw InputError("fragment not aligned with score space");
  return {stable_softmax(*field)};
}

double expected_score(const ScoreDistribution& sd, const ScoreSpace& space) {
  if (sd.masses.size() != space.size()) throw InputError("score distribution length mismatch");
  double y = 0.0;
  const auto entries = space.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) y += entries[i].value * sd.masses[i];
  // Rounding can push a near-point-mass a hair past the ends.
  return std::clamp(y, space.min_value(), space.max_value());
}

double tokenfocus_loss(double pred, double target) {
  if (!std::isfinite(pred) || !std::isfinite(target)) throw NumericError("non-finite loss input");
  const double d = pred - target;
  return d * d;
}

std::vector<double> tokenfocus_loss_grad(const TokenDistribution& dist, const ScoreSpace& space,
                                         ProjectionMode mode, double target) {
  if (!dist.logits) throw InputError("tokenfocus_loss_grad requires logits");
  if (dist.logits->size() != dist.vocab_size) throw InputError("logits length != vocab_size");
  check_tokens_in_range(space, dist.vocab_size);
  const auto& z = *dist.logits;
  const auto entries = space.entries();

  std::vector<double> probs;
  std::vector<double> masses;
  if (mode == ProjectionMode::literal) {
    probs = stable_softmax(z);
    masses = stable_softmax(gather(probs, space));
  } else {
    masses = stable_softmax(gather(z, space));
  }
  double y = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) y += entries[i].value * masses[i];
  const double dloss = 2.0 * (y - target);
  if (!std::isfinite(dloss)) throw NumericError("non-finite target");

  // d y / d q_i for the inputs q of the second softmax.
  std::vector<double> dq(entries.size());
  for (std::size_t i = 0; i < entries.size(); ++i) dq[i] = masses[i] * (entries[i].value - y);

  std::vector<double> grad(dist.vocab_size, 0.0);
  if (mode == ProjectionMode::logit_renorm) {
    for (std::size_t i = 0; i < entries.size(); ++i) grad[entries[i].token_id] = dloss * dq[i];
    return grad;
  }
  // q_i = p_{s_i}; dq_i/dz_w = p_{s_i} (delta(w, s_i) - p_w).
  double weighted = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) weighted += dq[i] * probs[entries[i].token_id];
  for (std::size_t w = 0; w < grad.size(); ++w) grad[w] = -dloss * probs[w] * weighted;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const std::size_t w = entries[i].token_id;
    grad[w] += dloss * probs[w] * dq[i];
  }
  return grad;
}

double score_from_logits(std::span<const double> logits, const ScoreSpace& space,
                         ProjectionMode mode) {
  auto dist = TokenDistribution::from_logits({logits.begin(), logits.end()});
  if (mode == ProjectionMode::literal) dist = softmax_full(dist);
  return expected_score(project_scores(dist, space, mode), space);
}

}  // namespace tokenfocus
