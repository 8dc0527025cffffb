#pragma once

// Command-line front end for the `tokenfocus` executable. Holds the run
// configuration, prediction files and the subcommand dispatcher.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenfocus/ensemble.hpp"
#include "tokenfocus/metrics.hpp"
#include "tokenfocus/pipeline.hpp"
#include "tokenfocus/score_core.hpp"
#include "tokenfocus/toy_scorer.hpp"

namespace tokenfocus::cli {

inline constexpr const char* kPredictionsFormat = "tokenfocus-predictions";
inline constexpr const char* kReportFormat = "tokenfocus-report";
inline constexpr const char* kBlendReportFormat = "tokenfocus-blend-report";

enum class TaskSelection { total, element, both };

std::vector<TaskKind> tasks_of(TaskSelection selection);
TaskSelection parse_task_selection(const std::string& text);

// Paths are resolved against the directory holding the config file.
struct RunConfig {
  std::string dataset;
  std::string test_dataset;
  std::string external;
  std::string plan;        // defaults to <output_dir>/plan.json
  std::string output_dir;  // defaults to "."
  TaskSelection task = TaskSelection::both;
  TaskSpaces spaces = default_spaces();
  ProjectionMode mode = ProjectionMode::literal;
  TrainingConfig training;
  GbtConfig gbt;
  ModelShape shape;
  std::size_t k = 5;
  std::uint64_t seed = 1234;
  unsigned threads = 1;

  std::string plan_path() const;
  // Training config with the run's seed and projection mode applied.
  TrainingConfig effective_training() const;
};

// Throws InputError for schema violations and IoError when the file or a
// referenced input path is missing.
RunConfig run_config_from_json(const nlohmann::json& j, const std::string& base_dir);
RunConfig load_run_config(const std::string& path);

// One line of a predictions file.
struct Prediction {
  std::string sample_id;
  std::optional<double> total;
  std::vector<double> elements;  // empty when element scores were not produced

  friend bool operator==(const Prediction&, const Prediction&) = default;
};

void write_predictions(std::ostream& out, std::span<const Prediction> predictions);
std::vector<Prediction> read_predictions(std::istream& in);
std::vector<Prediction> load_predictions(const std::string& path);
void save_predictions(const std::string& path, std::span<const Prediction> predictions);

// Metrics for one named run. A field is empty when the predictions do not
// cover it or the correlation is undefined.
struct RunMetrics {
  std::string name;
  std::optional<double> srcc;
  std::optional<double> plcc;
  std::optional<double> acc;
  std::optional<double> overall;
};

// Predictions must cover exactly the dataset's sample ids.
RunMetrics evaluate_predictions(std::string name, std::span<const SampleRecord> records,
                                std::span<const Prediction> predictions,
                                double threshold = kDefaultAccuracyThreshold,
                                AccuracyLevel level = AccuracyLevel::instance);

// Runs one command. args excludes the program name. Returns the exit status:
// 0 success, 1 validation or domain failure, 2 I/O failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tokenfocus::cli
