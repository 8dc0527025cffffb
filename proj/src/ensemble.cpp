#include "tokenfocus/ensemble.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "tokenfocus/metrics.hpp"
#include "tokenfocus/tokenizer.hpp"

namespace tokenfocus {

using nlohmann::json;

void FeatureMatrix::validate() const {
  if (values.size() != rows * columns.size()) throw InputError("feature matrix is not rectangular");
  std::set<std::string> seen;
  for (const auto& c : columns) {
    if (!seen.insert(c).second) throw InputError("duplicate feature column '" + c + "'");
  }
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError("non-finite feature value");
  }
}

void write_feature_csv(std::ostream& out, const FeatureMatrix& m) {
  m.validate();
  for (std::size_t c = 0; c < m.cols(); ++c) {
    if (m.columns[c].find_first_of(",\"\n") != std::string::npos) {
      throw InputError("feature column name not CSV-safe: " + m.columns[c]);
    }
    out << (c ? "," : "") << m.columns[c];
  }
  out << '\n';
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << format_number(m.at(r, c));
    out << '\n';
  }
}

FeatureMatrix read_feature_csv(std::istream& in) {
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  FeatureMatrix m;
  std::string line;
  if (!std::getline(in, line)) throw InputError("feature CSV has no header");
  m.columns = split(line);
  std::size_t number = 1;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    const auto cells = split(line);
    if (cells.size() != m.cols()) {
      throw InputError("feature CSV line " + std::to_string(number) + ": expected " +
                       std::to_string(m.cols()) + " cells");
    }
    for (const auto& cell : cells) {
      double v = 0.0;
      const auto res = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (res.ec != std::errc() || res.ptr != cell.data() + cell.size()) {
        throw InputError("feature CSV line " + std::to_string(number) + ": bad number '" + cell + "'");
      }
      m.values.push_back(v);
    }
    ++m.rows;
  }
  m.validate();
  return m;
}

std::string MetaRow::key() const {
  return element_index ? record->sample_id + "#" + std::to_string(*element_index) : record->sample_id;
}

double MetaRow::target() const {
  return element_index ? record->elements.at(*element_index).score : record->total_score;
}

std::vector<MetaRow> total_rows(std::span<const SampleRecord> records) {
  std::vector<MetaRow> rows;
  for (const auto& r : records) rows.push_back({&r, std::nullopt});
  return rows;
}

std::vector<MetaRow> element_rows(std::span<const SampleRecord> records) {
  std::vector<MetaRow> rows;
  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.elements.size(); ++i) rows.push_back({&r, i});
  }
  return rows;
}

FeatureSchema FeatureSchema::fit(std::span<const MetaRow> train_rows, std::size_t k) {
  if (k == 0) throw InputError("feature schema needs k >= 1");
  if (train_rows.empty()) throw InputError("feature schema needs training rows");
  FeatureSchema s;
  s.k_ = k;
  std::set<std::string> models, types;
  for (const auto& row : train_rows) {
    models.insert(row.record->t2i_model);
    types.insert(std::string(to_string(row.record->prompt_type)));
    if (row.record->prompt_quality) s.prompt_quality_ = true;
  }
  s.element_rows_ = train_rows.front().element_index.has_value();
  for (const auto& row : train_rows) {
    if (row.element_index.has_value() != s.element_rows_) {
      throw InputError("feature schema rows mix total and element tasks");
    }
  }
  s.models_.assign(models.begin(), models.end());
  s.prompt_types_.assign(types.begin(), types.end());
  return s;
}

std::vector<std::string> FeatureSchema::columns() const {
  std::vector<std::string> cols;
  for (std::size_t j = 0; j < k_; ++j) cols.push_back("pred_fold_" + std::to_string(j));
  for (const auto& m : models_) cols.push_back("t2i_model=" + m);
  cols.push_back("t2i_model=<unknown>");
  for (const auto& t : prompt_types_) cols.push_back("prompt_type=" + t);
  cols.push_back("prompt_type=<unknown>");
  cols.push_back("prompt_token_count");
  cols.push_back("element_count");
  if (prompt_quality_) cols.push_back("prompt_quality");
  if (element_rows_) {
    cols.push_back("category=object");
    cols.push_back("category=action");
    cols.push_back("category=attribute");
  }
  return cols;
}

FeatureMatrix FeatureSchema::build(std::span<const MetaRow> rows,
                                   const std::map<std::string, std::vector<double>>& predictions) const {
  FeatureMatrix m;
  m.columns = columns();
  m.rows = rows.size();
  m.values.reserve(rows.size() * m.cols());
  for (const auto& row : rows) {
    if (row.element_index.has_value() != element_rows_) {
      throw InputError("row " + row.key() + " does not match the schema's task");
    }
    const auto key = row.key();
    const auto it = predictions.find(key);
    if (it == predictions.end() || it->second.size() != k_) {
      throw InputError("missing fold predictions for '" + key + "'");
    }
    m.values.insert(m.values.end(), it->second.begin(), it->second.end());
    const auto& r = *row.record;
    const auto one_hot = [&](const std::vector<std::string>& vocab, const std::string& value) {
      const auto pos = std::lower_bound(vocab.begin(), vocab.end(), value);
      const bool known = pos != vocab.end() && *pos == value;
      for (auto v = vocab.begin(); v != vocab.end(); ++v) m.values.push_back(known && v == pos ? 1.0 : 0.0);
      m.values.push_back(known ? 0.0 : 1.0);
    };
    one_hot(models_, r.t2i_model);
    one_hot(prompt_types_, std::string(to_string(r.prompt_type)));
    m.values.push_back(static_cast<double>(Tokenizer::split(r.prompt_text).size()));
    m.values.push_back(static_cast<double>(r.elements.size()));
    if (prompt_quality_) m.values.push_back(r.prompt_quality.value_or(-1.0));
    if (element_rows_) {
      const auto cat = r.elements.at(*row.element_index).category;
      m.values.push_back(cat == ElementCategory::object ? 1.0 : 0.0);
      m.values.push_back(cat == ElementCategory::action ? 1.0 : 0.0);
      m.values.push_back(cat == ElementCategory::attribute ? 1.0 : 0.0);
    }
  }
  m.validate();
  return m;
}

FeatureMatrix build_features(std::span<const SampleRecord> records,
                             const std::map<std::string, std::vector<double>>& fold_predictions) {
  const auto rows = total_rows(records);
  if (rows.empty()) throw InputError("no records");
  const auto first = fold_predictions.find(rows.front().key());
  if (first == fold_predictions.end()) {
    throw InputError("missing fold predictions for '" + rows.front().key() + "'");
  }
  return FeatureSchema::fit(rows, first->second.size()).build(rows, fold_predictions);
}

// ---- boosting ----

void GbtConfig::validate() const {
  if (n_rounds == 0) throw InputError("n_rounds must be positive");
  if (!(shrinkage > 0.0 && shrinkage <= 1.0)) throw InputError("shrinkage must lie in (0, 1]");
  if (min_samples_leaf == 0) throw InputError("min_samples_leaf must be positive");
}

json to_json(const GbtConfig& cfg) {
  return {{"n_rounds", cfg.n_rounds},
          {"max_depth", cfg.max_depth},
          {"shrinkage", cfg.shrinkage},
          {"min_samples_leaf", cfg.min_samples_leaf},
          {"seed", cfg.seed}};
}

GbtConfig gbt_config_from_json(const json& j) {
  GbtConfig cfg;
  if (!j.is_object()) throw InputError("gbt config must be a JSON object");
  cfg.n_rounds = j.value("n_rounds", cfg.n_rounds);
  cfg.max_depth = j.value("max_depth", cfg.max_depth);
  cfg.shrinkage = j.value("shrinkage", cfg.shrinkage);
  cfg.min_samples_leaf = j.value("min_samples_leaf", cfg.min_samples_leaf);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

double RegressionTree::predict(std::span<const double> row) const {
  std::size_t i = 0;
  while (!nodes[i].is_leaf()) {
    const auto& n = nodes[i];
    i = static_cast<std::size_t>(row[static_cast<std::size_t>(n.feature)] <= n.threshold ? n.left : n.right);
  }
  return nodes[i].value;
}

std::size_t RegressionTree::depth() const {
  std::vector<std::size_t> d(nodes.size(), 0);
  std::size_t max_d = 0;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    max_d = std::max(max_d, d[i]);
    if (!nodes[i].is_leaf()) {
      d[static_cast<std::size_t>(nodes[i].left)] = d[i] + 1;
      d[static_cast<std::size_t>(nodes[i].right)] = d[i] + 1;
    }
  }
  return max_d;
}

namespace {

// Mean as first + mean(offsets): exact when all values are equal.
double shifted_mean(std::span<const std::size_t> rows, std::span<const double> values) {
  const double first = values[rows[0]];
  double acc = 0.0;
  for (std::size_t r : rows) acc += values[r] - first;
  return first + acc / static_cast<double>(rows.size());
}

double sum_squared_error(std::span<const std::size_t> rows, std::span<const double> values) {
  const double mean = shifted_mean(rows, values);
  double sse = 0.0;
  for (std::size_t r : rows) sse += (values[r] - mean) * (values[r] - mean);
  return sse;
}

double midpoint(double lo, double hi) {
  const double mid = lo + 0.5 * (hi - lo);
  return mid < hi ? mid : lo;
}

}  // namespace

std::optional<SplitChoice> best_split(const FeatureMatrix& x, std::span<const std::size_t> rows,
                                      std::span<const double> residuals, std::size_t min_leaf) {
  const std::size_t n = rows.size();
  if (n < 2 * min_leaf || n < 2) return std::nullopt;
  // Centering makes the gain formula numerically benign.
  const double mean = shifted_mean(rows, residuals);
  double total = 0.0;
  for (std::size_t r : rows) total += residuals[r] - mean;
  const double parent_sse = sum_squared_error(rows, residuals);
  const double tolerance = 1e-12 * std::max(1.0, parent_sse);

  std::optional<SplitChoice> best;
  std::vector<std::size_t> order(rows.begin(), rows.end());
  for (std::size_t f = 0; f < x.cols(); ++f) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return x.at(a, f) < x.at(b, f); });
    double left_sum = 0.0;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      left_sum += residuals[order[i]] - mean;
      const double lo = x.at(order[i], f);
      const double hi = x.at(order[i + 1], f);
      if (lo == hi) continue;
      const std::size_t n_left = i + 1;
      const std::size_t n_right = n - n_left;
      if (n_left < min_leaf || n_right < min_leaf) continue;
      const double right_sum = total - left_sum;
      const double gain = left_sum * left_sum / static_cast<double>(n_left) +
                          right_sum * right_sum / static_cast<double>(n_right) -
                          total * total / static_cast<double>(n);
      if (gain > tolerance && (!best || gain > best->gain + tolerance)) {
        best = SplitChoice{f, midpoint(lo, hi), gain};
      }
    }
  }
  return best;
}

RegressionTree fit_tree(const FeatureMatrix& x, std::span<const double> residuals,
                        std::size_t max_depth, std::size_t min_samples_leaf) {
  RegressionTree tree;
  struct Pending {
    std::size_t node;
    std::vector<std::size_t> rows;
    std::size_t depth;
  };
  std::vector<std::size_t> all(x.rows);
  std::iota(all.begin(), all.end(), 0);
  tree.nodes.push_back({});
  std::vector<Pending> stack;
  stack.push_back({0, std::move(all), 0});
  while (!stack.empty()) {
    Pending p = std::move(stack.back());
    stack.pop_back();
    TreeNode& node = tree.nodes[p.node];
    node.samples = p.rows.size();
    node.value = shifted_mean(p.rows, residuals);
    if (p.depth >= max_depth) continue;
    const auto split = best_split(x, p.rows, residuals, min_samples_leaf);
    if (!split) continue;
    std::vector<std::size_t> left, right;
    for (std::size_t r : p.rows) (x.at(r, split->feature) <= split->threshold ? left : right).push_back(r);
    const int left_id = static_cast<int>(tree.nodes.size());
    node.feature = static_cast<int>(split->feature);
    node.threshold = split->threshold;
    node.left = left_id;
    node.right = left_id + 1;
    tree.nodes.push_back({});
    tree.nodes.push_back({});
    // Right first so the left subtree is expanded first.
    stack.push_back({static_cast<std::size_t>(left_id + 1), std::move(right), p.depth + 1});
    stack.push_back({static_cast<std::size_t>(left_id), std::move(left), p.depth + 1});
  }
  return tree;
}

GbtModel fit_gbt(const FeatureMatrix& x, std::span<const double> y, const GbtConfig& cfg) {
  cfg.validate();
  x.validate();
  if (x.rows != y.size()) throw InputError("feature rows != target length");
  if (y.size() < 2 * cfg.min_samples_leaf || y.size() < 2) {
    throw InputError("need at least 2 * min_samples_leaf rows, have " + std::to_string(y.size()));
  }
  for (double v : y) {
    if (!std::isfinite(v)) throw NumericError("non-finite target");
  }
  GbtModel model;
  model.shrinkage = cfg.shrinkage;
  model.feature_names = x.columns;
  std::vector<std::size_t> all(y.size());
  std::iota(all.begin(), all.end(), 0);
  model.base_prediction = shifted_mean(all, y);
  std::vector<double> fitted(y.size(), model.base_prediction);
  std::vector<double> residuals(y.size());
  for (std::size_t round = 0; round < cfg.n_rounds; ++round) {
    for (std::size_t i = 0; i < y.size(); ++i) residuals[i] = y[i] - fitted[i];
    auto tree = fit_tree(x, residuals, cfg.max_depth, cfg.min_samples_leaf);
    for (std::size_t i = 0; i < y.size(); ++i) fitted[i] += cfg.shrinkage * tree.predict(x.row(i));
    model.trees.push_back(std::move(tree));
  }
  return model;
}

std::vector<double> predict_gbt(const GbtModel& model, const FeatureMatrix& x) {
  if (x.columns != model.feature_names) throw InputError("feature columns differ from training schema");
  std::vector<double> out(x.rows, model.base_prediction);
  for (std::size_t r = 0; r < x.rows; ++r) {
    const auto row = x.row(r);
    for (const auto& t : model.trees) out[r] += model.shrinkage * t.predict(row);
  }
  return out;
}

json to_json(const GbtModel& model) {
  json trees = json::array();
  for (const auto& t : model.trees) {
    json nodes = json::array();
    for (const auto& n : t.nodes) {
      nodes.push_back({{"feature", n.feature},
                       {"threshold", n.threshold},
                       {"left", n.left},
                       {"right", n.right},
                       {"value", n.value},
                       {"samples", n.samples}});
    }
    trees.push_back(std::move(nodes));
  }
  return {{"format", "tokenfocus-gbt"},
          {"version", kFormatVersion},
          {"base_prediction", model.base_prediction},
          {"shrinkage", model.shrinkage},
          {"feature_names", model.feature_names},
          {"trees", trees}};
}

GbtModel gbt_model_from_json(const json& j) {
  try {
    GbtModel m;
    m.base_prediction = j.at("base_prediction").get<double>();
    m.shrinkage = j.at("shrinkage").get<double>();
    m.feature_names = j.at("feature_names").get<std::vector<std::string>>();
    for (const auto& t : j.at("trees")) {
      RegressionTree tree;
      for (const auto& n : t) {
        TreeNode node;
        node.feature = n.at("feature").get<int>();
        node.threshold = n.at("threshold").get<double>();
        node.left = n.at("left").get<int>();
        node.right = n.at("right").get<int>();
        node.value = n.at("value").get<double>();
        node.samples = n.value("samples", std::size_t{0});
        tree.nodes.push_back(node);
      }
      const auto count = static_cast<int>(tree.nodes.size());
      if (count == 0) throw InputError("empty tree");
      for (const auto& n : tree.nodes) {
        if (n.is_leaf()) continue;
        if (n.feature >= static_cast<int>(m.feature_names.size()) || n.left <= 0 || n.right <= 0 ||
            n.left >= count || n.right >= count) {
          throw InputError("tree node references out of range");
        }
      }
      m.trees.push_back(std::move(tree));
    }
    return m;
  } catch (const json::exception& e) {
    throw InputError(std::string("bad GBT model: ") + e.what());
  }
}

// ---- blending ----

namespace {

BlendRow score_row(std::string label, std::span<const double> preds, std::span<const double> targets,
                   bool element_task) {
  BlendRow row;
  row.label = std::move(label);
  try {
    row.srcc = srcc(preds, targets);
    row.plcc = plcc(preds, targets);
  } catch (const InputError&) {
    row.srcc.reset();
    row.plcc.reset();
  }
  if (element_task) row.acc = accuracy(preds, targets);
  return row;
}

double lookup(const std::map<std::string, double>& m, const std::string& key, std::size_t fold) {
  const auto it = m.find(key);
  if (it == m.end()) {
    throw InputError("fold " + std::to_string(fold) + " has no prediction for '" + key + "'");
  }
  return it->second;
}

}  // namespace

BlendResult blend(std::span<const MetaRow> train_rows, const FoldPlan& plan,
                  std::span<const MetaRow> test_rows, const FoldPredictions& predictions,
                  const GbtConfig& cfg) {
  const std::size_t k = predictions.size();
  if (k < 2) throw InputError("blending needs at least 2 fold models");
  plan.validate();
  if (plan.k != k) {
    throw InputError("fold plan has k=" + std::to_string(plan.k) + " but " + std::to_string(k) +
                     " fold models were given");
  }
  if (train_rows.empty() || test_rows.empty()) throw InputError("blending needs train and test rows");

  std::map<std::string, std::vector<double>> train_features, test_features;
  std::vector<double> train_targets, test_targets;
  for (const auto& row : train_rows) {
    plan.fold_of(row.record->prompt_id);
    const auto key = row.key();
    std::vector<double> cols(k);
    for (std::size_t j = 0; j < k; ++j) cols[j] = lookup(predictions[j], key, j);
    train_features[key] = std::move(cols);
    train_targets.push_back(row.target());
  }
  BlendResult result;
  result.fold_test_predictions.assign(k, {});
  for (const auto& row : test_rows) {
    const auto key = row.key();
    double mean = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double p = lookup(predictions[j], key, j);
      result.fold_test_predictions[j].push_back(p);
      mean += p;
    }
    mean /= static_cast<double>(k);
    test_features[key] = std::vector<double>(k, mean);
    test_targets.push_back(row.target());
  }

  result.schema = FeatureSchema::fit(train_rows, k);
  const auto x_train = result.schema.build(train_rows, train_features);
  const auto x_test = result.schema.build(test_rows, test_features);
  result.model = fit_gbt(x_train, train_targets, cfg);
  result.test_predictions = predict_gbt(result.model, x_test);

  const bool element_task = train_rows.front().element_index.has_value();
  std::vector<BlendRow> folds;
  for (std::size_t j = 0; j < k; ++j) {
    folds.push_back(score_row("fold " + std::to_string(j), result.fold_test_predictions[j],
                              test_targets, element_task));
  }
  BlendRow avg{"Avg", 0.0, 0.0, std::nullopt};
  auto average = [&](auto member) -> std::optional<double> {
    double acc = 0.0;
    for (const auto& f : folds) {
      if (!(f.*member)) return std::nullopt;
      acc += *(f.*member);
    }
    return acc / static_cast<double>(folds.size());
  };
  avg.srcc = average(&BlendRow::srcc);
  avg.plcc = average(&BlendRow::plcc);
  avg.acc = average(&BlendRow::acc);
  result.report = std::move(folds);
  result.report.push_back(avg);
  result.report.push_back(score_row("Blend", result.test_predictions, test_targets, element_task));
  return result;
}

}  // namespace tokenfocus
