#pragma once

// Annotation records with their structurally augmented prompts. Also holds
// prompt-disjoint fold plans and external score-token distributions.
//
// File formats are UTF-8 JSON lines. The first non-blank line is a header
// {"format": <name>, "version": 1}; an empty file is an empty dataset.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenfocus/error.hpp"
#include "tokenfocus/score_core.hpp"

namespace tokenfocus {

inline constexpr const char* kDatasetFormat = "tokenfocus-dataset";
inline constexpr const char* kExternalFormat = "tokenfocus-external";
inline constexpr int kFormatVersion = 1;

enum class PromptType { real, synthetic };
enum class ElementCategory { object, action, attribute };

std::string_view to_string(PromptType t);
std::string_view to_string(ElementCategory c);

struct ElementAnnotation {
  std::string text;
  ElementCategory category = ElementCategory::object;
  double score = 0.0;  // annotator mean in [0, 1]

  friend bool operator==(const ElementAnnotation&, const ElementAnnotation&) = default;
};

// Manually annotated prompt-evaluation fields; each optional, each in [0, 1].
struct PromptEvaluation {
  std::optional<double> semantic_clarity;
  std::optional<double> generability;
  std::optional<double> division_clarity;
  std::optional<double> segmentation_confidence;
  std::optional<double> attribute_confidence;

  bool empty() const {
    return !semantic_clarity && !generability && !division_clarity && !segmentation_confidence &&
           !attribute_confidence;
  }

  friend bool operator==(const PromptEvaluation&, const PromptEvaluation&) = default;
};

struct SampleRecord {
  std::string sample_id;
  std::string prompt_id;
  std::string prompt_text;
  std::string t2i_model;
  PromptType prompt_type = PromptType::real;
  std::optional<double> prompt_quality;
  PromptEvaluation prompt_eval;
  std::string image_ref;
  double total_score = 1.0;  // annotator mean in [1, 5]
  std::vector<ElementAnnotation> elements;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

// A record that failed validation, positioned in its source.
class DatasetError : public InputError {
 public:
  DatasetError(std::size_t line, std::string field, const std::string& reason);
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }
  const std::string& reason() const { return reason_; }

 private:
  std::size_t line_;
  std::string field_;
  std::string reason_;
};

struct Diagnostic {
  std::size_t line = 0;  // 1-based
  std::string field;     // empty when the whole line is at fault
  std::string reason;
};

struct ParseResult {
  std::vector<SampleRecord> records;
  std::vector<Diagnostic> diagnostics;
};

// Validates a single record. Throws DatasetError with line 0.
SampleRecord record_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const SampleRecord& record);

// Collects one diagnostic per bad line; bad lines contribute no record.
ParseResult parse_dataset_lenient(std::istream& in);
// Throws DatasetError at the first bad line.
std::vector<SampleRecord> parse_dataset(std::istream& in);
void write_dataset(std::ostream& out, std::span<const SampleRecord> records);

std::vector<SampleRecord> load_dataset(const std::string& path);
void save_dataset(const std::string& path, std::span<const SampleRecord> records);

struct TaskRef {
  TaskKind kind = TaskKind::total;
  std::size_t element_index = 0;

  static TaskRef total() { return {TaskKind::total, 0}; }
  static TaskRef element(std::size_t index) { return {TaskKind::element, index}; }
};

// Deterministic prompt template. Fields appear one per line in a fixed order;
// backslashes, CR and LF inside field values are escaped so every field stays
// on its own line.
std::string build_prompt(const SampleRecord& record, TaskRef task, const ScoreSpace& space);

// Shortest round-trip decimal text for a double.
std::string format_number(double value);

struct FoldPlan {
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::map<std::string, std::size_t> assignment;  // prompt_id -> fold

  std::size_t fold_of(const std::string& prompt_id) const;
  std::vector<std::string> prompts_in_fold(std::size_t fold) const;
  void validate() const;

  friend bool operator==(const FoldPlan&, const FoldPlan&) = default;
};

// Sorts the distinct prompt ids, shuffles them with the seeded generator and
// deals them round-robin, so fold sizes differ by at most one prompt.
FoldPlan split_folds(std::span<const SampleRecord> records, std::size_t k, std::uint64_t seed);

nlohmann::ordered_json to_json(const FoldPlan& plan);
FoldPlan fold_plan_from_json(const nlohmann::json& j);
void save_fold_plan(const std::string& path, const FoldPlan& plan);
FoldPlan load_fold_plan(const std::string& path);

struct FoldView {
  std::vector<SampleRecord> train;
  std::vector<SampleRecord> eval;
  std::optional<std::string> warning;  // set when either side is empty
};

FoldView fold_view(std::span<const SampleRecord> records, const FoldPlan& plan, std::size_t fold);

struct ExternalScores {
  std::optional<ScoreTokenFragment> total;
  std::map<std::size_t, ScoreTokenFragment> elements;  // element index -> fragment
};

using ExternalDistributions = std::map<std::string, ExternalScores>;

// Record: {"sample_id", "task": "total"|"element", "element_index" (element
// only), "score_token_probs": {"<token_id>": p, ...}, "score_token_logits":
// {...}}. Each present map must cover exactly the task's score tokens.
ExternalDistributions load_external_distributions(std::istream& in, const TaskSpaces& spaces);
ExternalDistributions load_external_distributions(const std::string& path,
                                                  const TaskSpaces& spaces);

}  // namespace tokenfocus
