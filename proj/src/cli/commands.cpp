#include "tokenfocus/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "tokenfocus/dataset.hpp"
#include "tokenfocus/error.hpp"
#include "tokenfocus/synthetic.hpp"

namespace tokenfocus::cli {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::vector<TaskKind> tasks_of(TaskSelection selection) {
  switch (selection) {
    case TaskSelection::total: return {TaskKind::total};
    case TaskSelection::element: return {TaskKind::element};
    case TaskSelection::both: return {TaskKind::total, TaskKind::element};
  }
  return {};
}

TaskSelection parse_task_selection(const std::string& text) {
  if (text == "total") return TaskSelection::total;
  if (text == "element") return TaskSelection::element;
  if (text == "both") return TaskSelection::both;
  throw InputError("unknown task '" + text + "' (expected total, element or both)");
}

std::string RunConfig::plan_path() const {
  if (!plan.empty()) return plan;
  return (fs::path(output_dir.empty() ? "." : output_dir) / "plan.json").string();
}

TrainingConfig RunConfig::effective_training() const {
  TrainingConfig cfg = training;
  cfg.seed = seed;
  cfg.projection_mode = mode;
  return cfg;
}

// ---- run config ----

namespace {

const std::set<std::string> kConfigKeys = {
    "dataset", "test_dataset", "external", "plan", "output_dir", "task", "score_spaces",
    "mode",    "training",     "gbt",      "model", "k",         "seed", "threads"};

std::string resolve(const std::string& base_dir, const std::string& path) {
  if (path.empty() || fs::path(path).is_absolute() || base_dir.empty()) return path;
  return (fs::path(base_dir) / path).lexically_normal().string();
}

void require_file(const std::string& key, const std::string& path) {
  if (!path.empty() && !fs::is_regular_file(path)) {
    throw IoError("config " + key + " '" + path + "' does not exist");
  }
}

std::string string_field(const json& j, const char* key) {
  if (!j.contains(key)) return {};
  if (!j.at(key).is_string()) throw InputError(std::string("config ") + key + " must be a string");
  return j.at(key).get<std::string>();
}

}  // namespace

RunConfig run_config_from_json(const json& j, const std::string& base_dir) {
  if (!j.is_object()) throw InputError("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kConfigKeys.count(key)) throw InputError("unknown config key '" + key + "'");
  }
  RunConfig cfg;
  cfg.dataset = resolve(base_dir, string_field(j, "dataset"));
  cfg.test_dataset = resolve(base_dir, string_field(j, "test_dataset"));
  cfg.external = resolve(base_dir, string_field(j, "external"));
  cfg.plan = resolve(base_dir, string_field(j, "plan"));
  cfg.output_dir = resolve(base_dir, string_field(j, "output_dir"));
  if (cfg.output_dir.empty()) cfg.output_dir = base_dir.empty() ? "." : base_dir;
  if (j.contains("task")) cfg.task = parse_task_selection(string_field(j, "task"));
  if (j.contains("score_spaces")) cfg.spaces = spaces_from_json(j.at("score_spaces"));
  if (j.contains("mode")) cfg.mode = parse_projection_mode(string_field(j, "mode"));
  if (j.contains("training")) cfg.training = training_config_from_json(j.at("training"));
  if (j.contains("gbt")) cfg.gbt = gbt_config_from_json(j.at("gbt"));
  if (j.contains("model")) {
    const auto& m = j.at("model");
    if (!m.is_object()) throw InputError("config model must be an object");
    cfg.shape.embed_dim = m.value("embed_dim", cfg.shape.embed_dim);
    cfg.shape.hidden_dim = m.value("hidden_dim", cfg.shape.hidden_dim);
    if (cfg.shape.embed_dim == 0 || cfg.shape.hidden_dim == 0) {
      throw InputError("model dimensions must be positive");
    }
  }
  cfg.k = j.value("k", cfg.k);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.threads = j.value("threads", cfg.threads);
  if (cfg.threads == 0) throw InputError("threads must be at least 1");
  cfg.gbt.seed = cfg.seed;
  // train() derives the schedule horizon from the data, so only the other
  // fields are checked here.
  auto check = cfg.effective_training();
  check.total_steps = std::max(check.total_steps, check.warmup_steps);
  check.validate();
  require_file("dataset", cfg.dataset);
  require_file("test_dataset", cfg.test_dataset);
  require_file("external", cfg.external);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw InputError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return run_config_from_json(j, fs::path(path).parent_path().string());
}

// ---- predictions ----

void write_predictions(std::ostream& out, std::span<const Prediction> predictions) {
  out << ordered_json{{"format", kPredictionsFormat}, {"version", kFormatVersion}}.dump() << '\n';
  for (const auto& p : predictions) {
    ordered_json line;
    line["sample_id"] = p.sample_id;
    if (p.total) line["total"] = *p.total;
    if (!p.elements.empty()) line["elements"] = p.elements;
    out << line.dump() << '\n';
  }
}

std::vector<Prediction> read_predictions(std::istream& in) {
  std::vector<Prediction> out;
  std::set<std::string> seen;
  std::string text;
  std::size_t line_no = 0;
  bool header = false;
  while (std::getline(in, text)) {
    ++line_no;
    if (text.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = "predictions line " + std::to_string(line_no) + ": ";
    json j;
    try {
      j = json::parse(text);
    } catch (const json::exception&) {
      throw InputError(where + "not valid JSON");
    }
    if (!header) {
      if (!j.is_object() || j.value("format", "") != kPredictionsFormat ||
          j.value("version", 0) != kFormatVersion) {
        throw InputError(where + "expected predictions header");
      }
      header = true;
      continue;
    }
    try {
      Prediction p;
      p.sample_id = j.at("sample_id").get<std::string>();
      if (j.contains("total")) p.total = j.at("total").get<double>();
      if (j.contains("elements")) p.elements = j.at("elements").get<std::vector<double>>();
      for (const auto& [key, value] : j.items()) {
        if (key != "sample_id" && key != "total" && key != "elements") {
          throw InputError(where + "unknown field '" + key + "'");
        }
      }
      if (!seen.insert(p.sample_id).second) {
        throw InputError(where + "duplicate sample_id '" + p.sample_id + "'");
      }
      out.push_back(std::move(p));
    } catch (const json::exception& e) {
      throw InputError(where + e.what());
    }
  }
  if (in.bad()) throw IoError("read error");
  return out;
}

std::vector<Prediction> load_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open predictions '" + path + "'");
  return read_predictions(in);
}

void save_predictions(const std::string& path, std::span<const Prediction> predictions) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_predictions(out, predictions);
  if (!out) throw IoError("failed writing '" + path + "'");
}

// ---- metrics over prediction files ----

namespace {

std::optional<double> guarded(double (*metric)(std::span<const double>, std::span<const double>),
                              std::span<const double> a, std::span<const double> b) {
  try {
    return metric(a, b);
  } catch (const InputError&) {
    return std::nullopt;
  }
}

}  // namespace

RunMetrics evaluate_predictions(std::string name, std::span<const SampleRecord> records,
                                std::span<const Prediction> predictions, double threshold,
                                AccuracyLevel level) {
  std::map<std::string, const Prediction*> by_id;
  for (const auto& p : predictions) by_id[p.sample_id] = &p;
  if (by_id.size() != records.size()) {
    throw InputError(name + ": " + std::to_string(by_id.size()) + " predictions for " +
                     std::to_string(records.size()) + " records");
  }
  bool have_total = true;
  bool have_elements = true;
  std::vector<double> pred_total, label_total;
  std::vector<std::vector<double>> pred_elem, label_elem;
  for (const auto& r : records) {
    const auto it = by_id.find(r.sample_id);
    if (it == by_id.end()) throw InputError(name + ": no prediction for sample '" + r.sample_id + "'");
    const Prediction& p = *it->second;
    have_total = have_total && p.total.has_value();
    if (p.total) {
      pred_total.push_back(*p.total);
      label_total.push_back(r.total_score);
    }
    if (p.elements.empty() && !r.elements.empty()) have_elements = false;
    if (!p.elements.empty() && p.elements.size() != r.elements.size()) {
      throw InputError(name + ": sample '" + r.sample_id + "' has " + std::to_string(p.elements.size()) +
                       " element predictions for " + std::to_string(r.elements.size()) + " elements");
    }
    std::vector<double> labels;
    for (const auto& e : r.elements) labels.push_back(e.score);
    pred_elem.push_back(p.elements);
    label_elem.push_back(std::move(labels));
  }
  RunMetrics m;
  m.name = std::move(name);
  if (have_total) {
    m.srcc = guarded(&srcc, pred_total, label_total);
    m.plcc = guarded(&plcc, pred_total, label_total);
  }
  if (have_elements) {
    try {
      m.acc = element_accuracy(pred_elem, label_elem, threshold, level);
    } catch (const InputError&) {
      m.acc.reset();
    }
  }
  if (m.srcc && m.plcc && m.acc) m.overall = composite(*m.srcc, *m.plcc, *m.acc);
  return m;
}

// ---- command helpers ----

namespace {

std::string fixed6(std::optional<double> v) {
  if (!v) return "null";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

std::string cell(std::optional<double> v) { return v ? fixed6(v) : "-"; }

std::string pad(std::string s, std::size_t width) {
  if (s.size() < width) s.append(width - s.size(), ' ');
  return s;
}

std::string json_string(const std::string& s) { return json(s).dump(); }

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::string join(const std::string& dir, const std::string& name) {
  return (fs::path(dir) / name).string();
}

std::string checkpoint_name(std::size_t fold, TaskKind task) {
  return "fold" + std::to_string(fold) + "_" + std::string(to_string(task)) + ".ckpt";
}

std::vector<MetaRow> rows_for(std::span<const SampleRecord> records, TaskKind task) {
  return task == TaskKind::total ? total_rows(records) : element_rows(records);
}

// Flags shared by the pipeline commands; each overrides the config file.
struct CommonFlags {
  std::string config;
  std::string dataset;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string task;
  std::optional<std::size_t> k;
  std::optional<unsigned> threads;
  std::string out;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "Run configuration JSON");
  cmd->add_option("--dataset", f.dataset, "Dataset JSON-lines file");
  cmd->add_option("--seed", f.seed, "Seed for every random draw");
  cmd->add_option("--mode", f.mode, "Projection mode: literal or logit-renorm");
  cmd->add_option("--task", f.task, "total, element or both");
  cmd->add_option("--k", f.k, "Number of folds");
  cmd->add_option("--threads", f.threads, "Scoring worker threads");
  cmd->add_option("--out", f.out, "Output file or directory");
}

RunConfig resolve_config(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? run_config_from_json(json::object(), "")
                                   : load_run_config(f.config);
  if (!f.dataset.empty()) {
    require_file("dataset", f.dataset);
    cfg.dataset = f.dataset;
  }
  if (f.seed) {
    cfg.seed = *f.seed;
    cfg.gbt.seed = *f.seed;
  }
  if (!f.mode.empty()) cfg.mode = parse_projection_mode(f.mode);
  if (!f.task.empty()) cfg.task = parse_task_selection(f.task);
  if (f.k) cfg.k = *f.k;
  if (f.threads) {
    if (*f.threads == 0) throw InputError("threads must be at least 1");
    cfg.threads = *f.threads;
  }
  return cfg;
}

std::vector<SampleRecord> require_dataset(const RunConfig& cfg) {
  if (cfg.dataset.empty()) throw InputError("no dataset given (use --dataset or the config file)");
  return load_dataset(cfg.dataset);
}

FoldPlan plan_for(const RunConfig& cfg, std::span<const SampleRecord> records) {
  const auto path = cfg.plan_path();
  if (fs::exists(path)) {
    auto plan = load_fold_plan(path);
    for (const auto& r : records) plan.fold_of(r.prompt_id);
    return plan;
  }
  return split_folds(records, cfg.k, cfg.seed);
}

// ---- validate ----

int cmd_validate(const std::string& path, std::ostream& out) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  const auto result = parse_dataset_lenient(in);
  for (const auto& d : result.diagnostics) {
    out << "line " << d.line << ": " << (d.field.empty() ? "(line)" : d.field) << ": " << d.reason
        << '\n';
  }
  if (!result.diagnostics.empty()) {
    out << result.diagnostics.size() << " invalid record(s), " << result.records.size()
        << " valid\n";
    return 1;
  }
  out << result.records.size() << " records OK\n";
  return 0;
}

// ---- split ----

int cmd_split(const RunConfig& cfg, const std::string& out_path, std::ostream& out) {
  const auto records = require_dataset(cfg);
  const auto plan = split_folds(records, cfg.k, cfg.seed);
  const auto path = out_path.empty() ? cfg.plan_path() : out_path;
  if (fs::path(path).has_parent_path()) ensure_dir(fs::path(path).parent_path().string());
  save_fold_plan(path, plan);

  out << pad("Fold", 6) << pad("T-Prompts", 11) << pad("E-Prompts", 11) << pad("T-Samples", 11)
      << "E-Samples\n";
  for (std::size_t f = 0; f < plan.k; ++f) {
    const auto view = fold_view(records, plan, f);
    const auto eval_prompts = plan.prompts_in_fold(f).size();
    out << pad(std::to_string(f), 6) << pad(std::to_string(plan.assignment.size() - eval_prompts), 11)
        << pad(std::to_string(eval_prompts), 11) << pad(std::to_string(view.train.size()), 11)
        << view.eval.size() << '\n';
  }
  out << "wrote " << path << '\n';
  return 0;
}

// ---- train ----

std::string loss_csv(const TrainLog& log) {
  std::string s = "step,epoch,head_lr,encoder_lr,loss\n";
  for (const auto& r : log.steps) {
    s += std::to_string(r.step) + ',' + std::to_string(r.epoch) + ',' + format_number(r.head_lr) + ',' +
         format_number(r.encoder_lr) + ',' + format_number(r.loss) + '\n';
  }
  return s;
}

std::string epoch_csv(const TrainLog& log) {
  std::string s = "epoch,mean_loss\n";
  for (std::size_t e = 0; e < log.epoch_losses.size(); ++e) {
    s += std::to_string(e) + ',' + format_number(log.epoch_losses[e]) + '\n';
  }
  return s;
}

int cmd_train(const RunConfig& cfg, long fold, const std::string& out_dir, std::ostream& out) {
  const auto records = require_dataset(cfg);
  const auto plan = plan_for(cfg, records);
  if (fold < 0 || static_cast<std::size_t>(fold) >= plan.k) {
    throw InputError("invalid fold " + std::to_string(fold) + " for k=" + std::to_string(plan.k));
  }
  const auto f = static_cast<std::size_t>(fold);
  const auto view = fold_view(records, plan, f);
  if (view.train.empty()) throw InputError("fold " + std::to_string(f) + " has no training samples");
  const auto dir = out_dir.empty() ? cfg.output_dir : out_dir;
  ensure_dir(dir);

  TrainingConfig tcfg = cfg.effective_training();
  tcfg.seed = cfg.seed + f;
  for (const auto task : tasks_of(cfg.task)) {
    const auto trained = train_scorer(view.train, task, cfg.spaces, cfg.shape, tcfg);
    json extra = {{"fold", f}, {"k", plan.k}, {"plan_seed", plan.seed}};
    save_checkpoint(join(dir, checkpoint_name(f, task)),
                    to_checkpoint(trained.scorer, cfg.spaces, tcfg, std::move(extra)));
    const auto stem = "fold" + std::to_string(f) + "_" + std::string(to_string(task));
    write_text(join(dir, stem + "_loss.csv"), loss_csv(trained.log));
    write_text(join(dir, stem + "_epochs.csv"), epoch_csv(trained.log));
    const auto& losses = trained.log.epoch_losses;
    out << "fold " << f << ' ' << to_string(task) << ": " << trained.log.steps.size() << " steps, "
        << "mean loss " << fixed6(losses.front()) << " -> " << fixed6(losses.back()) << '\n';
  }
  return 0;
}

// ---- score ----

// The whole dataset, or one side of a fold view.
std::vector<SampleRecord> select_split(const RunConfig& cfg, std::vector<SampleRecord> records,
                                       std::optional<long> fold, const std::string& split) {
  if (split == "all") return records;
  if (split != "train" && split != "eval") {
    throw InputError("unknown split '" + split + "' (expected all, train or eval)");
  }
  if (!fold) throw InputError("--split " + split + " needs --fold");
  const auto plan = plan_for(cfg, records);
  if (*fold < 0 || static_cast<std::size_t>(*fold) >= plan.k) {
    throw InputError("invalid fold " + std::to_string(*fold));
  }
  auto view = fold_view(records, plan, static_cast<std::size_t>(*fold));
  return split == "train" ? std::move(view.train) : std::move(view.eval);
}

std::map<std::string, double> score_with_checkpoint(const std::string& path,
                                                    std::span<const MetaRow> rows,
                                                    const RunConfig& cfg, TaskKind task) {
  const auto ckpt = load_checkpoint(path);
  const auto scorer = scorer_from_checkpoint(ckpt);
  if (scorer.task != task) {
    throw InputError("checkpoint '" + path + "' was trained for the " +
                     std::string(to_string(scorer.task)) + " task");
  }
  const auto spaces = ckpt.metadata.contains("score_spaces")
                          ? spaces_from_json(ckpt.metadata.at("score_spaces"))
                          : cfg.spaces;
  return score_rows(scorer, rows, spaces, cfg.mode, cfg.threads);
}

std::vector<Prediction> assemble(std::span<const SampleRecord> records, TaskSelection selection,
                                 const std::map<std::string, double>& scores) {
  const auto tasks = tasks_of(selection);
  const bool want_total = tasks.front() == TaskKind::total;
  const bool want_elements = tasks.back() == TaskKind::element;
  std::vector<Prediction> out;
  for (const auto& r : records) {
    Prediction p{r.sample_id, std::nullopt, {}};
    if (want_total) p.total = scores.at(r.sample_id);
    if (want_elements) {
      for (std::size_t i = 0; i < r.elements.size(); ++i) {
        p.elements.push_back(scores.at(r.sample_id + "#" + std::to_string(i)));
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::map<std::string, double> score_external(std::span<const SampleRecord> records,
                                             const RunConfig& cfg, const std::string& path) {
  const auto ext = load_external_distributions(path, cfg.spaces);
  const auto tasks = tasks_of(cfg.task);
  std::map<std::string, double> scores;
  for (const auto& r : records) {
    const auto it = ext.find(r.sample_id);
    if (it == ext.end()) throw InputError("sample '" + r.sample_id + "': no external distribution");
    const auto& entry = it->second;
    auto project = [&](const ScoreTokenFragment& frag, const ScoreSpace& space, const std::string& what) {
      try {
        return expected_score(project_fragment(frag, space, cfg.mode), space);
      } catch (const InputError& e) {
        throw InputError("sample '" + r.sample_id + "' " + what + ": " + e.what());
      }
    };
    for (const auto task : tasks) {
      if (task == TaskKind::total) {
        if (!entry.total) throw InputError("sample '" + r.sample_id + "': no total distribution");
        scores[r.sample_id] = project(*entry.total, cfg.spaces.total, "total");
      } else {
        for (std::size_t i = 0; i < r.elements.size(); ++i) {
          const auto e = entry.elements.find(i);
          const auto what = "element " + std::to_string(i);
          if (e == entry.elements.end()) {
            throw InputError("sample '" + r.sample_id + "': no distribution for " + what);
          }
          scores[r.sample_id + "#" + std::to_string(i)] = project(e->second, cfg.spaces.element, what);
        }
      }
    }
  }
  return scores;
}

int cmd_score(const RunConfig& cfg, std::optional<long> fold, const std::string& split,
              const std::string& external, const std::string& checkpoint_dir,
              const std::string& out_path, std::ostream& out) {
  const auto records = select_split(cfg, require_dataset(cfg), fold, split);

  std::map<std::string, double> scores;
  const auto ext_path = external.empty() ? cfg.external : external;
  if (!ext_path.empty()) {
    scores = score_external(records, cfg, ext_path);
  } else {
    if (!fold) throw InputError("scoring with checkpoints needs --fold (or give --external)");
    if (*fold < 0) throw InputError("invalid fold " + std::to_string(*fold));
    const auto dir = checkpoint_dir.empty() ? cfg.output_dir : checkpoint_dir;
    for (const auto task : tasks_of(cfg.task)) {
      const auto rows = rows_for(records, task);
      auto s = score_with_checkpoint(join(dir, checkpoint_name(static_cast<std::size_t>(*fold), task)),
                                     rows, cfg, task);
      scores.merge(s);
    }
  }
  const auto preds = assemble(records, cfg.task, scores);
  const auto path = out_path.empty() ? join(cfg.output_dir, "predictions.jsonl") : out_path;
  if (fs::path(path).has_parent_path()) ensure_dir(fs::path(path).parent_path().string());
  save_predictions(path, preds);
  out << "scored " << preds.size() << " samples -> " << path << '\n';
  return 0;
}

// ---- report ----

std::vector<double> parse_triple(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    std::size_t used = 0;
    double x = 0.0;
    try {
      x = std::stod(part, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size() || !std::isfinite(x)) {
      throw InputError("--precomputed expects S,P,A numbers, got '" + text + "'");
    }
    v.push_back(x);
  }
  if (v.size() != 3) throw InputError("--precomputed expects exactly three numbers S,P,A");
  return v;
}

std::string report_json(const std::vector<RunMetrics>& runs, AccuracyLevel level, double threshold) {
  std::string s = "{\"format\": " + json_string(kReportFormat) + ", \"version\": 1, \"acc_level\": ";
  s += level == AccuracyLevel::instance ? "\"instance\"" : "\"per-image\"";
  s += ", \"threshold\": " + fixed6(threshold) + ", \"runs\": [";
  for (std::size_t i = 0; i < runs.size(); ++i) {
    const auto& r = runs[i];
    if (i) s += ", ";
    s += "{\"name\": " + json_string(r.name) + ", \"srcc\": " + fixed6(r.srcc) +
         ", \"plcc\": " + fixed6(r.plcc) + ", \"acc\": " + fixed6(r.acc) +
         ", \"overall\": " + fixed6(r.overall) + "}";
  }
  s += "]}\n";
  return s;
}

void print_report(const std::vector<RunMetrics>& runs, std::ostream& out) {
  std::size_t width = 5;
  for (const auto& r : runs) width = std::max(width, r.name.size() + 2);
  out << pad("Run", width) << pad("SRCC", 10) << pad("PLCC", 10) << pad("ACC", 10) << "Overall";
  if (runs.size() > 1) out << "   vs first";
  out << '\n';
  for (const auto& r : runs) {
    out << pad(r.name, width) << pad(cell(r.srcc), 10) << pad(cell(r.plcc), 10) << pad(cell(r.acc), 10)
        << pad(cell(r.overall), 10);
    if (runs.size() > 1 && r.overall && runs.front().overall) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%+.4f", *r.overall - *runs.front().overall);
      out << buf;
    }
    out << '\n';
  }
}

int cmd_report(const RunConfig& cfg, const std::vector<std::string>& prediction_files,
               const std::vector<std::string>& precomputed, const std::string& level_text,
               double threshold, std::optional<long> fold, const std::string& split,
               const std::string& out_path, std::ostream& out) {
  if (prediction_files.empty() && precomputed.empty()) {
    throw InputError("report needs --predictions or --precomputed");
  }
  AccuracyLevel level = AccuracyLevel::instance;
  if (level_text == "per-image") {
    level = AccuracyLevel::per_image;
  } else if (level_text != "instance") {
    throw InputError("unknown --acc-level '" + level_text + "' (expected instance or per-image)");
  }
  std::vector<RunMetrics> runs;
  for (std::size_t i = 0; i < precomputed.size(); ++i) {
    const auto v = parse_triple(precomputed[i]);
    const auto m = MetricReport::from(v[0], v[1], v[2]);
    runs.push_back({"precomputed" + (precomputed.size() > 1 ? "-" + std::to_string(i + 1) : ""), m.srcc,
                    m.plcc, m.acc, m.overall});
  }
  if (!prediction_files.empty()) {
    const auto records = select_split(cfg, require_dataset(cfg), fold, split);
    for (const auto& file : prediction_files) {
      runs.push_back(evaluate_predictions(fs::path(file).stem().string(), records, load_predictions(file),
                                          threshold, level));
    }
  }
  const auto path = out_path.empty() ? join(cfg.output_dir, "report.json") : out_path;
  if (fs::path(path).has_parent_path()) ensure_dir(fs::path(path).parent_path().string());
  write_text(path, report_json(runs, level, threshold));
  print_report(runs, out);
  return 0;
}

// ---- blend ----

std::string blend_row_json(const BlendRow& row, std::optional<double> overall) {
  std::string s = "{\"label\": " + json_string(row.label) + ", \"srcc\": " + fixed6(row.srcc) +
                  ", \"plcc\": " + fixed6(row.plcc) + ", \"acc\": " + fixed6(row.acc);
  if (overall) s += ", \"overall\": " + fixed6(overall);
  return s + "}";
}

int cmd_blend(const RunConfig& cfg, const std::vector<std::string>& prediction_files,
              const std::string& out_dir, std::ostream& out) {
  const auto train = require_dataset(cfg);
  if (cfg.test_dataset.empty()) throw InputError("blend needs test_dataset in the config");
  const auto test = load_dataset(cfg.test_dataset);
  const auto plan = plan_for(cfg, train);
  if (plan.k < 2) throw InputError("blending needs at least 2 folds, plan has k=" + std::to_string(plan.k));
  if (!prediction_files.empty() && prediction_files.size() != plan.k) {
    throw InputError("blending needs one predictions file per fold: got " +
                     std::to_string(prediction_files.size()) + " for k=" + std::to_string(plan.k));
  }
  std::vector<SampleRecord> all(train);
  all.insert(all.end(), test.begin(), test.end());

  // Per fold: row key -> prediction over train and test samples, every task.
  FoldPredictions predictions(plan.k);
  for (std::size_t f = 0; f < plan.k; ++f) {
    if (!prediction_files.empty()) {
      for (const auto& p : load_predictions(prediction_files[f])) {
        if (p.total) predictions[f][p.sample_id] = *p.total;
        for (std::size_t i = 0; i < p.elements.size(); ++i) {
          predictions[f][p.sample_id + "#" + std::to_string(i)] = p.elements[i];
        }
      }
      continue;
    }
    for (const auto task : tasks_of(cfg.task)) {
      const auto path = join(cfg.output_dir, checkpoint_name(f, task));
      if (!fs::exists(path)) throw InputError("missing fold artifact '" + path + "'");
      const auto rows = rows_for(all, task);
      auto s = score_with_checkpoint(path, rows, cfg, task);
      predictions[f].merge(s);
    }
  }

  const auto dir = out_dir.empty() ? cfg.output_dir : out_dir;
  ensure_dir(dir);
  std::map<TaskKind, BlendResult> results;
  std::map<std::string, double> blended;
  for (const auto task : tasks_of(cfg.task)) {
    const auto train_rows = rows_for(train, task);
    const auto test_rows = rows_for(test, task);
    auto result = blend(train_rows, plan, test_rows, predictions, cfg.gbt);
    for (std::size_t i = 0; i < test_rows.size(); ++i) {
      blended[test_rows[i].key()] = result.test_predictions[i];
    }
    write_text(join(dir, "gbt_" + std::string(to_string(task)) + ".json"),
               to_json(result.model).dump(1) + "\n");
    results.emplace(task, std::move(result));
  }
  save_predictions(join(dir, "blend_predictions.jsonl"), assemble(test, cfg.task, blended));

  // Composite per report row when both tasks ran.
  const bool both = results.size() == 2;
  auto overall_of = [&](std::size_t i) -> std::optional<double> {
    if (!both) return std::nullopt;
    const auto& t = results.at(TaskKind::total).report[i];
    const auto& e = results.at(TaskKind::element).report[i];
    if (!t.srcc || !t.plcc || !e.acc) return std::nullopt;
    return composite(*t.srcc, *t.plcc, *e.acc);
  };

  std::string s = "{\"format\": " + json_string(kBlendReportFormat) + ", \"version\": 1, \"k\": " +
                  std::to_string(plan.k) + ", \"tasks\": {";
  bool first = true;
  for (const auto& [task, result] : results) {
    if (!first) s += ", ";
    first = false;
    s += json_string(std::string(to_string(task))) + ": [";
    for (std::size_t i = 0; i < result.report.size(); ++i) {
      if (i) s += ", ";
      s += blend_row_json(result.report[i], std::nullopt);
    }
    s += "]";
  }
  s += "}";
  if (both) {
    s += ", \"overall\": [";
    const auto& rows = results.at(TaskKind::total).report;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (i) s += ", ";
      s += "{\"label\": " + json_string(rows[i].label) + ", \"overall\": " + fixed6(overall_of(i)) + "}";
    }
    s += "]";
  }
  s += "}\n";
  write_text(join(dir, "blend_report.json"), s);

  const auto& labels = results.begin()->second.report;
  out << pad("Model", 9) << pad("SRCC", 10) << pad("PLCC", 10) << pad("ACC", 10);
  if (both) out << "Overall";
  out << '\n';
  for (std::size_t i = 0; i < labels.size(); ++i) {
    std::optional<double> sr, pl, ac;
    if (results.count(TaskKind::total)) {
      sr = results.at(TaskKind::total).report[i].srcc;
      pl = results.at(TaskKind::total).report[i].plcc;
    } else {
      sr = labels[i].srcc;
      pl = labels[i].plcc;
    }
    if (results.count(TaskKind::element)) ac = results.at(TaskKind::element).report[i].acc;
    if (i + 2 == labels.size()) out << std::string(46, '-') << '\n';
    out << pad(labels[i].label, 9) << pad(cell(sr), 10) << pad(cell(pl), 10) << pad(cell(ac), 10);
    if (both) out << cell(overall_of(i));
    out << '\n';
  }
  return 0;
}

// ---- synth ----

int cmd_synth(const synthetic::Config& cfg, const std::string& out_path, std::ostream& out) {
  if (out_path.empty()) throw InputError("synth needs --out");
  const auto records = synthetic::make_dataset(cfg);
  if (fs::path(out_path).has_parent_path()) ensure_dir(fs::path(out_path).parent_path().string());
  save_dataset(out_path, records);
  out << "wrote " << records.size() << " records -> " << out_path << '\n';
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"TokenFocus-VQA scoring, evaluation and blending"};
  app.name("tokenfocus");
  app.require_subcommand(1);

  std::string validate_path;
  auto* validate = app.add_subcommand("validate", "Check a dataset file record by record");
  validate->add_option("dataset", validate_path, "Dataset JSON-lines file")->required();

  CommonFlags split_flags;
  auto* split = app.add_subcommand("split", "Write a prompt-disjoint k-fold plan");
  add_common(split, split_flags);

  CommonFlags train_flags;
  long train_fold = -1;
  auto* train = app.add_subcommand("train", "Train the toy scorer on one fold's training view");
  add_common(train, train_flags);
  train->add_option("--fold", train_fold, "Held-out fold index")->required();

  CommonFlags score_flags;
  std::optional<long> score_fold;
  std::string score_split = "all";
  std::string score_external;
  std::string score_ckpt_dir;
  auto* score = app.add_subcommand("score", "Predict total and element scores");
  add_common(score, score_flags);
  score->add_option("--fold", score_fold, "Fold whose checkpoints (and view) to use");
  score->add_option("--split", score_split, "all, train or eval (train/eval need --fold)");
  score->add_option("--external", score_external, "External score-token distributions");
  score->add_option("--checkpoint-dir", score_ckpt_dir, "Directory holding fold checkpoints");

  CommonFlags report_flags;
  std::vector<std::string> report_predictions;
  std::vector<std::string> report_precomputed;
  std::string report_level = "instance";
  double report_threshold = kDefaultAccuracyThreshold;
  auto* report = app.add_subcommand("report", "Compute SRCC, PLCC, ACC and the composite score");
  add_common(report, report_flags);
  report->add_option("--predictions", report_predictions, "Predictions file (repeatable)");
  report->add_option("--precomputed", report_precomputed, "Metric triple S,P,A (repeatable)");
  report->add_option("--acc-level", report_level, "instance or per-image");
  report->add_option("--threshold", report_threshold, "Element binarization threshold");
  std::optional<long> report_fold;
  std::string report_split = "all";
  report->add_option("--fold", report_fold, "Fold whose view selects the records");
  report->add_option("--split", report_split, "all, train or eval (train/eval need --fold)");

  CommonFlags blend_flags;
  std::vector<std::string> blend_predictions;
  auto* blend_cmd = app.add_subcommand("blend", "Stack fold predictions with boosted trees");
  add_common(blend_cmd, blend_flags);
  blend_cmd->add_option("--predictions", blend_predictions,
                        "Per-fold predictions files covering train and test samples, in fold order");

  synthetic::Config synth_cfg;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic annotated dataset");
  synth->add_option("--prompts", synth_cfg.prompts, "Number of prompts");
  synth->add_option("--samples-per-prompt", synth_cfg.samples_per_prompt, "Images per prompt");
  synth->add_option("--annotators", synth_cfg.annotators, "Simulated annotators (0 = exact scores)");
  synth->add_option("--seed", synth_cfg.seed, "Generator seed");
  synth->add_option("--prefix", synth_cfg.id_prefix, "Prefix for sample and prompt ids");
  synth->add_option("--out", synth_out, "Output dataset file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (*validate) return cmd_validate(validate_path, out);
    if (*split) return cmd_split(resolve_config(split_flags), split_flags.out, out);
    if (*train) return cmd_train(resolve_config(train_flags), train_fold, train_flags.out, out);
    if (*score) {
      return cmd_score(resolve_config(score_flags), score_fold, score_split, score_external,
                       score_ckpt_dir, score_flags.out, out);
    }
    if (*report) {
      return cmd_report(resolve_config(report_flags), report_predictions, report_precomputed,
                        report_level, report_threshold, report_fold, report_split, report_flags.out,
                        out);
    }
    if (*blend_cmd) return cmd_blend(resolve_config(blend_flags), blend_predictions, blend_flags.out, out);
    if (*synth) return cmd_synth(synth_cfg, synth_out, out);
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace tokenfocus::cli
