#pragma once

// Stacking ensemble: fold-model predictions plus structural features feed a
// squared-loss gradient-boosted regression-tree meta-learner.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenfocus/dataset.hpp"

namespace tokenfocus {

struct FeatureMatrix {
  std::vector<std::string> columns;
  std::size_t rows = 0;
  std::vector<double> values;  // row-major, rows x columns.size()

  std::size_t cols() const { return columns.size(); }
  double at(std::size_t r, std::size_t c) const { return values[r * columns.size() + c]; }
  std::span<const double> row(std::size_t r) const {
    return {values.data() + r * columns.size(), columns.size()};
  }
  // Rectangular, unique column names, finite values.
  void validate() const;

  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

// Headered CSV; values use shortest round-trip formatting.
void write_feature_csv(std::ostream& out, const FeatureMatrix& m);
FeatureMatrix read_feature_csv(std::istream& in);

// One row of the meta-learning problem: a whole sample (total task) or one of
// its elements (element task).
struct MetaRow {
  const SampleRecord* record = nullptr;
  std::optional<std::size_t> element_index;

  std::string key() const;  // "sample_id" or "sample_id#index"
  double target() const;
};

std::vector<MetaRow> total_rows(std::span<const SampleRecord> records);
std::vector<MetaRow> element_rows(std::span<const SampleRecord> records);

// Column layout, in order:
//   pred_fold_0 .. pred_fold_{k-1}
//   t2i_model=<name> for each training model (sorted), t2i_model=<unknown>
//   prompt_type=<type> for each training type (sorted), prompt_type=<unknown>
//   prompt_token_count, element_count
//   prompt_quality            (only if some training row has it; -1 when absent)
//   category=object, category=action, category=attribute   (element rows only)
class FeatureSchema {
 public:
  static FeatureSchema fit(std::span<const MetaRow> train_rows, std::size_t k);

  // predictions: row key -> k values. Throws InputError naming the first row
  // without a full prediction vector.
  FeatureMatrix build(std::span<const MetaRow> rows,
                      const std::map<std::string, std::vector<double>>& predictions) const;

  std::vector<std::string> columns() const;
  std::size_t k() const { return k_; }

 private:
  std::size_t k_ = 0;
  std::vector<std::string> models_;
  std::vector<std::string> prompt_types_;
  bool prompt_quality_ = false;
  bool element_rows_ = false;
};

// Total-task features with the schema fitted on `records` themselves.
FeatureMatrix build_features(std::span<const SampleRecord> records,
                             const std::map<std::string, std::vector<double>>& fold_predictions);

struct GbtConfig {
  std::size_t n_rounds = 200;
  std::size_t max_depth = 4;
  double shrinkage = 0.1;
  std::size_t min_samples_leaf = 5;
  std::uint64_t seed = 0;  // recorded only; the exact greedy booster draws no randomness

  void validate() const;
};

nlohmann::json to_json(const GbtConfig& cfg);
GbtConfig gbt_config_from_json(const nlohmann::json& j);

struct TreeNode {
  int feature = -1;  // -1 for leaves
  double threshold = 0.0;
  int left = -1;   // rows with x[feature] <= threshold
  int right = -1;
  double value = 0.0;  // leaf output; mean residual of the node's rows
  std::size_t samples = 0;

  bool is_leaf() const { return feature < 0; }
};

struct RegressionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(std::span<const double> row) const;
  std::size_t depth() const;
};

struct GbtModel {
  double base_prediction = 0.0;
  double shrinkage = 1.0;
  std::vector<std::string> feature_names;
  std::vector<RegressionTree> trees;
};

struct SplitChoice {
  std::size_t feature = 0;
  double threshold = 0.0;
  double gain = 0.0;  // reduction in squared error
};

// Exact greedy search over all features and all midpoints between distinct
// sorted values. Ties go to the lowest feature, then the lowest threshold.
// Returns nullopt when no split leaves both sides with min_leaf rows and a
// positive gain.
std::optional<SplitChoice> best_split(const FeatureMatrix& x, std::span<const std::size_t> rows,
                                      std::span<const double> residuals, std::size_t min_leaf);

RegressionTree fit_tree(const FeatureMatrix& x, std::span<const double> residuals,
                        std::size_t max_depth, std::size_t min_samples_leaf);

GbtModel fit_gbt(const FeatureMatrix& x, std::span<const double> y, const GbtConfig& cfg);

// Throws InputError when the columns differ from the training schema.
std::vector<double> predict_gbt(const GbtModel& model, const FeatureMatrix& x);

nlohmann::json to_json(const GbtModel& model);
GbtModel gbt_model_from_json(const nlohmann::json& j);

// Per fold model: row key -> prediction. Must cover every training and test row.
using FoldPredictions = std::vector<std::map<std::string, double>>;

struct BlendRow {
  std::string label;  // "fold 0".."fold k-1", "Avg", "Blend"
  // Absent when undefined (constant predictions) or, for acc, on total rows.
  std::optional<double> srcc;
  std::optional<double> plcc;
  std::optional<double> acc;
};

struct BlendResult {
  std::vector<double> test_predictions;
  std::vector<std::vector<double>> fold_test_predictions;  // [fold][test row]
  FeatureSchema schema;
  GbtModel model;
  std::vector<BlendRow> report;
};

// Meta-training row for a sample in fold f: column j holds fold model j's
// prediction, so column f is that sample's out-of-fold prediction. Test rows
// fill every prediction column with the mean of the k fold models.
BlendResult blend(std::span<const MetaRow> train_rows, const FoldPlan& plan,
                  std::span<const MetaRow> test_rows, const FoldPredictions& predictions,
                  const GbtConfig& cfg);

}  // namespace tokenfocus
