#pragma once

// First-token scoring chain from vocabulary logits to a squared-error loss
// on the expected score, with its analytic gradient in the logits.

#include <cstddef>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

namespace tokenfocus {

enum class TaskKind { total, element };

// How the score-token masses are renormalized.
//   literal:      mass_i = exp(p(s_i)) / sum_j exp(p(s_j)), p = full-vocabulary softmax
//   logit_renorm: mass_i = exp(z(s_i)) / sum_j exp(z(s_j)), z = raw logits
enum class ProjectionMode { literal, logit_renorm };

std::string_view to_string(ProjectionMode mode);
std::string_view to_string(TaskKind kind);
// Accepts "literal", "logit_renorm" and "logit-renorm".
ProjectionMode parse_projection_mode(std::string_view text);
TaskKind parse_task_kind(std::string_view text);

struct ScoreEntry {
  std::size_t token_id = 0;
  double value = 0.0;

  friend bool operator==(const ScoreEntry&, const ScoreEntry&) = default;
};

// Ordered mapping from score-label token ids to numeric score values.
// Validated on construction: >= 2 entries, distinct token ids, strictly
// ascending values.
class ScoreSpace {
 public:
  ScoreSpace(std::vector<ScoreEntry> entries, TaskKind kind);

  // Consecutive token ids starting at first_token, values lo..hi step 1.
  static ScoreSpace integer_range(std::size_t first_token, int lo, int hi, TaskKind kind);

  std::span<const ScoreEntry> entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  TaskKind kind() const { return kind_; }
  double min_value() const { return entries_.front().value; }
  double max_value() const { return entries_.back().value; }
  std::size_t max_token_id() const;
  std::optional<std::size_t> index_of_token(std::size_t token_id) const;
  std::vector<double> values() const;

  friend bool operator==(const ScoreSpace&, const ScoreSpace&) = default;

 private:
  std::vector<ScoreEntry> entries_;
  TaskKind kind_;
};

// Logits and/or probabilities at the first generated position.
struct TokenDistribution {
  std::size_t vocab_size = 0;
  std::optional<std::vector<double>> logits;
  std::optional<std::vector<double>> probabilities;

  static TokenDistribution from_logits(std::vector<double> logits);
  // Throws unless entries are >= 0 and sum to 1 within 1e-9.
  static TokenDistribution from_probabilities(std::vector<double> probabilities);

  void validate() const;
};

struct ScoreDistribution {
  std::vector<double> masses;
};

// Per-score-entry values read from an external model, aligned with a
// ScoreSpace. Only the score-token slice of the vocabulary is available, so
// this is not a TokenDistribution.
struct ScoreTokenFragment {
  std::optional<std::vector<double>> probabilities;
  std::optional<std::vector<double>> logits;
};

inline constexpr double kProbabilitySumTolerance = 1e-9;

// Numerically stable softmax (max-subtracted). Throws NumericError on a
// non-finite input.
std::vector<double> stable_softmax(std::span<const double> values);

TokenDistribution softmax_full(const TokenDistribution& dist);

ScoreDistribution project_scores(const TokenDistribution& dist, const ScoreSpace& space,
                                 ProjectionMode mode);

// Same projection from externally supplied score-token values. Throws
// InputError naming the missing field when the fragment lacks what `mode`
// needs.
ScoreDistribution project_fragment(const ScoreTokenFragment& fragment, const ScoreSpace& space,
                                   ProjectionMode mode);

double expected_score(const ScoreDistribution& sd, const ScoreSpace& space);

double tokenfocus_loss(double pred, double target);

// dL/dz for L = (expected_score(project(softmax(z))) - target)^2. Requires
// logits. In logit_renorm mode, entries outside the score space are exactly 0.
std::vector<double> tokenfocus_loss_grad(const TokenDistribution& dist, const ScoreSpace& space,
                                         ProjectionMode mode, double target);

// Convenience: logits -> prediction, applying the full softmax first in
// literal mode.
double score_from_logits(std::span<const double> logits, const ScoreSpace& space,
                         ProjectionMode mode);

}  // namespace tokenfocus

namespace tokenfocus {

// Score spaces for both annotation tasks.
struct TaskSpaces {
  ScoreSpace total;
  ScoreSpace element;

  const ScoreSpace& for_task(TaskKind kind) const {
    return kind == TaskKind::total ? total : element;
  }
};

}  // namespace tokenfocus
