#include "tokenfocus/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "tokenfocus/random.hpp"

namespace tokenfocus {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(PromptType t) { return t == PromptType::real ? "real" : "synthetic"; }

std::string_view to_string(ElementCategory c) {
  switch (c) {
    case ElementCategory::object:
      return "object";
    case ElementCategory::action:
      return "action";
    case ElementCategory::attribute:
      return "attribute";
  }
  return "object";
}

DatasetError::DatasetError(std::size_t line, std::string field, const std::string& reason)
    : InputError((line ? "line " + std::to_string(line) + ": " : std::string()) +
                 (field.empty() ? reason : field + ": " + reason)),
      line_(line),
      field_(std::move(field)),
      reason_(reason) {}

std::string format_number(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

namespace {

const std::set<std::string> kRecordKeys = {"sample_id",   "prompt_id",      "prompt_text",
                                           "t2i_model",   "prompt_type",    "prompt_quality",
                                           "prompt_eval", "image_ref",      "total_score",
                                           "elements"};
const std::vector<std::pair<const char*, std::optional<double> PromptEvaluation::*>> kEvalFields = {
    {"semantic_clarity", &PromptEvaluation::semantic_clarity},
    {"generability", &PromptEvaluation::generability},
    {"division_clarity", &PromptEvaluation::division_clarity},
    {"segmentation_confidence", &PromptEvaluation::segmentation_confidence},
    {"attribute_confidence", &PromptEvaluation::attribute_confidence},
};

[[noreturn]] void fail(const std::string& field, const std::string& reason) {
  throw DatasetError(0, field, reason);
}

std::string get_string(const json& j, const char* key, bool allow_empty = false) {
  if (!j.contains(key)) fail(key, "missing");
  if (!j[key].is_string()) fail(key, "expected string");
  auto s = j[key].get<std::string>();
  if (!allow_empty && s.empty()) fail(key, "must be non-empty");
  return s;
}

double get_number(const json& j, const char* key, const std::string& field, double lo, double hi) {
  if (!j.contains(key)) fail(field, "missing");
  if (!j[key].is_number()) fail(field, "expected number");
  const double v = j[key].get<double>();
  if (!std::isfinite(v) || v < lo || v > hi) {
    fail(field, "value " + format_number(v) + " outside [" + format_number(lo) + ", " +
                    format_number(hi) + "]");
  }
  return v;
}

ElementCategory parse_category(const std::string& s, const std::string& field) {
  if (s == "object") return ElementCategory::object;
  if (s == "action") return ElementCategory::action;
  if (s == "attribute") return ElementCategory::attribute;
  fail(field, "unknown category '" + s + "'");
}

void check_header(const json& j, const char* format) {
  if (!j.is_object() || !j.contains("format")) fail("format", "missing header record");
  if (j["format"] != format) {
    fail("format", "expected '" + std::string(format) + "', got " + j["format"].dump());
  }
  if (!j.contains("version") || j["version"] != kFormatVersion) {
    fail("version", "unsupported version");
  }
}

bool blank(const std::string& line) {
  return std::all_of(line.begin(), line.end(),
                     [](unsigned char c) { return std::isspace(c) != 0; });
}

// Calls fn(line_number, parsed) for every record line after the header.
template <typename Fn>
void for_each_line(std::istream& in, const char* format, Fn&& fn,
                   std::vector<Diagnostic>* diagnostics) {
  std::string line;
  std::size_t number = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (blank(line)) continue;
    try {
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw DatasetError(0, "", std::string("malformed JSON: ") + e.what());
      }
      if (!header_seen) {
        header_seen = true;
        check_header(j, format);
        continue;
      }
      fn(number, j);
    } catch (const DatasetError& e) {
      if (!diagnostics) throw DatasetError(number, e.field(), e.reason());
      diagnostics->push_back({number, e.field(), e.reason()});
    } catch (const InputError& e) {
      if (!diagnostics) throw DatasetError(number, "", e.what());
      diagnostics->push_back({number, "", e.what()});
    } catch (const json::exception& e) {
      if (!diagnostics) throw DatasetError(number, "", e.what());
      diagnostics->push_back({number, "", e.what()});
    }
  }
  if (in.bad()) throw IoError("read error");
}

}  // namespace

SampleRecord record_from_json(const json& j) {
  if (!j.is_object()) fail("", "record must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!kRecordKeys.count(key)) fail(key, "unknown field");
  }
  SampleRecord r;
  r.sample_id = get_string(j, "sample_id");
  r.prompt_id = get_string(j, "prompt_id");
  r.prompt_text = get_string(j, "prompt_text", true);
  r.t2i_model = get_string(j, "t2i_model");
  const auto type = get_string(j, "prompt_type");
  if (type == "real") {
    r.prompt_type = PromptType::real;
  } else if (type == "synthetic") {
    r.prompt_type = PromptType::synthetic;
  } else {
    fail("prompt_type", "expected 'real' or 'synthetic', got '" + type + "'");
  }
  if (j.contains("prompt_quality") && !j["prompt_quality"].is_null()) {
    r.prompt_quality = get_number(j, "prompt_quality", "prompt_quality", 0.0, 1.0);
  }
  if (j.contains("prompt_eval") && !j["prompt_eval"].is_null()) {
    const auto& e = j["prompt_eval"];
    if (!e.is_object()) fail("prompt_eval", "expected object");
    for (const auto& [key, _] : e.items()) {
      const bool known = std::any_of(kEvalFields.begin(), kEvalFields.end(),
                                     [&](const auto& f) { return key == f.first; });
      if (!known) fail("prompt_eval." + key, "unknown field");
    }
    for (const auto& [key, member] : kEvalFields) {
      if (e.contains(key) && !e[key].is_null()) {
        r.prompt_eval.*member = get_number(e, key, std::string("prompt_eval.") + key, 0.0, 1.0);
      }
    }
  }
  r.image_ref = get_string(j, "image_ref", true);
  r.total_score = get_number(j, "total_score", "total_score", 1.0, 5.0);
  if (j.contains("elements")) {
    const auto& els = j["elements"];
    if (!els.is_array()) fail("elements", "expected array");
    for (std::size_t i = 0; i < els.size(); ++i) {
      const std::string prefix = "elements[" + std::to_string(i) + "]";
      const auto& e = els[i];
      if (!e.is_object()) fail(prefix, "expected object");
      for (const auto& [key, _] : e.items()) {
        if (key != "text" && key != "category" && key != "score") fail(prefix + "." + key, "unknown field");
      }
      ElementAnnotation a;
      if (!e.contains("text") || !e["text"].is_string()) fail(prefix + ".text", "expected string");
      a.text = e["text"].get<std::string>();
      if (!e.contains("category") || !e["category"].is_string()) {
        fail(prefix + ".category", "expected string");
      }
      a.category = parse_category(e["category"].get<std::string>(), prefix + ".category");
      a.score = get_number(e, "score", prefix + ".score", 0.0, 1.0);
      r.elements.push_back(std::move(a));
    }
  }
  return r;
}

ordered_json to_json(const SampleRecord& r) {
  ordered_json j;
  j["sample_id"] = r.sample_id;
  j["prompt_id"] = r.prompt_id;
  j["prompt_text"] = r.prompt_text;
  j["t2i_model"] = r.t2i_model;
  j["prompt_type"] = std::string(to_string(r.prompt_type));
  if (r.prompt_quality) j["prompt_quality"] = *r.prompt_quality;
  if (!r.prompt_eval.empty()) {
    ordered_json e = ordered_json::object();
    for (const auto& [key, member] : kEvalFields) {
      if (r.prompt_eval.*member) e[key] = *(r.prompt_eval.*member);
    }
    j["prompt_eval"] = e;
  }
  j["image_ref"] = r.image_ref;
  j["total_score"] = r.total_score;
  j["elements"] = ordered_json::array();
  for (const auto& a : r.elements) {
    ordered_json e;
    e["text"] = a.text;
    e["category"] = std::string(to_string(a.category));
    e["score"] = a.score;
    j["elements"].push_back(e);
  }
  return j;
}

ParseResult parse_dataset_lenient(std::istream& in) {
  ParseResult result;
  std::set<std::string> seen;
  for_each_line(
      in, kDatasetFormat,
      [&](std::size_t, const json& j) {
        auto record = record_from_json(j);
        if (!seen.insert(record.sample_id).second) {
          fail("sample_id", "duplicate sample_id '" + record.sample_id + "'");
        }
        result.records.push_back(std::move(record));
      },
      &result.diagnostics);
  return result;
}

std::vector<SampleRecord> parse_dataset(std::istream& in) {
  std::vector<SampleRecord> records;
  std::set<std::string> seen;
  for_each_line(
      in, kDatasetFormat,
      [&](std::size_t, const json& j) {
        auto record = record_from_json(j);
        if (!seen.insert(record.sample_id).second) {
          fail("sample_id", "duplicate sample_id '" + record.sample_id + "'");
        }
        records.push_back(std::move(record));
      },
      nullptr);
  return records;
}

void write_dataset(std::ostream& out, std::span<const SampleRecord> records) {
  ordered_json header;
  header["format"] = kDatasetFormat;
  header["version"] = kFormatVersion;
  out << header.dump() << '\n';
  for (const auto& r : records) out << to_json(r).dump() << '\n';
}

std::vector<SampleRecord> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  return parse_dataset(in);
}

void save_dataset(const std::string& path, std::span<const SampleRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_dataset(out, records);
  if (!out) throw IoError("failed writing '" + path + "'");
}

// ---- prompt construction ----

namespace {

std::string escape_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '\\':
        out += "\\\\";
        break;
      case '\n':
        out += "\\n";
        break;
      case '\r':
        out += "\\r";
        break;
      default:
        out += c;
    }
  }
  return out;
}

}  // namespace

std::string build_prompt(const SampleRecord& record, TaskRef task, const ScoreSpace& space) {
  if (task.kind == TaskKind::element && task.element_index >= record.elements.size()) {
    throw InputError("element index " + std::to_string(task.element_index) + " out of range for " +
                     record.sample_id + " (" + std::to_string(record.elements.size()) +
                     " elements)");
  }
  std::string out;
  if (task.kind == TaskKind::total) {
    out += "Task: Rate how well the image matches the text prompt.\n";
  } else {
    out += "Task: Judge whether the image shows the given element of the text prompt.\n";
  }
  out += "Answer with exactly one of:";
  const auto entries = space.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    out += (i ? ", " : " ") + format_number(entries[i].value);
  }
  out += "\n";
  out += "Generation model: " + escape_field(record.t2i_model) + "\n";
  out += "Prompt type: " + std::string(to_string(record.prompt_type)) + "\n";
  if (record.prompt_quality || !record.prompt_eval.empty()) {
    std::vector<std::string> parts;
    if (record.prompt_quality) parts.push_back("quality=" + format_number(*record.prompt_quality));
    const auto& e = record.prompt_eval;
    if (e.semantic_clarity) parts.push_back("semantic clarity=" + format_number(*e.semantic_clarity));
    if (e.generability) parts.push_back("generability=" + format_number(*e.generability));
    if (e.division_clarity) parts.push_back("division clarity=" + format_number(*e.division_clarity));
    if (e.segmentation_confidence) {
      parts.push_back("segmentation confidence=" + format_number(*e.segmentation_confidence));
    }
    if (e.attribute_confidence) {
      parts.push_back("attribute confidence=" + format_number(*e.attribute_confidence));
    }
    out += "Prompt evaluation:";
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "; " : " ") + parts[i];
    out += "\n";
  }
  out += "Prompt: " + escape_field(record.prompt_text) + "\n";
  if (task.kind == TaskKind::element) {
    const auto& el = record.elements[task.element_index];
    out += "Element: " + escape_field(el.text) + " (" + std::string(to_string(el.category)) + ")\n";
  }
  out += "Answer:";
  return out;
}

// ---- folds ----

std::size_t FoldPlan::fold_of(const std::string& prompt_id) const {
  const auto it = assignment.find(prompt_id);
  if (it == assignment.end()) throw InputError("prompt_id '" + prompt_id + "' not in fold plan");
  return it->second;
}

std::vector<std::string> FoldPlan::prompts_in_fold(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [prompt, f] : assignment) {
    if (f == fold) out.push_back(prompt);
  }
  return out;
}

void FoldPlan::validate() const {
  if (k < 2) throw InputError("fold plan needs k >= 2");
  for (const auto& [prompt, f] : assignment) {
    if (f >= k) throw InputError("prompt '" + prompt + "' assigned to fold out of range");
  }
}

FoldPlan split_folds(std::span<const SampleRecord> records, std::size_t k, std::uint64_t seed) {
  if (k < 2) throw InputError("k must be at least 2");
  std::vector<std::string> prompts;
  prompts.reserve(records.size());
  for (const auto& r : records) prompts.push_back(r.prompt_id);
  std::sort(prompts.begin(), prompts.end());
  prompts.erase(std::unique(prompts.begin(), prompts.end()), prompts.end());
  if (prompts.size() < k) {
    throw InputError("need at least k=" + std::to_string(k) + " distinct prompts, have " +
                     std::to_string(prompts.size()));
  }
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(prompts));
  FoldPlan plan;
  plan.k = k;
  plan.seed = seed;
  for (std::size_t i = 0; i < prompts.size(); ++i) plan.assignment.emplace(prompts[i], i % k);
  return plan;
}

ordered_json to_json(const FoldPlan& plan) {
  ordered_json j;
  j["format"] = "tokenfocus-foldplan";
  j["version"] = kFormatVersion;
  j["k"] = plan.k;
  j["seed"] = plan.seed;
  ordered_json a = ordered_json::object();
  for (const auto& [prompt, f] : plan.assignment) a[prompt] = f;
  j["assignment"] = a;
  return j;
}

FoldPlan fold_plan_from_json(const json& j) {
  try {
    FoldPlan plan;
    plan.k = j.at("k").get<std::size_t>();
    plan.seed = j.value("seed", std::uint64_t{0});
    for (const auto& [prompt, f] : j.at("assignment").items()) {
      plan.assignment.emplace(prompt, f.get<std::size_t>());
    }
    plan.validate();
    return plan;
  } catch (const json::exception& e) {
    throw InputError(std::string("bad fold plan: ") + e.what());
  }
}

void save_fold_plan(const std::string& path, const FoldPlan& plan) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << to_json(plan).dump(2) << '\n';
  if (!out) throw IoError("failed writing '" + path + "'");
}

FoldPlan load_fold_plan(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open fold plan '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("bad fold plan: ") + e.what());
  }
  return fold_plan_from_json(j);
}

FoldView fold_view(std::span<const SampleRecord> records, const FoldPlan& plan, std::size_t fold) {
  if (fold >= plan.k) {
    throw InputError("fold " + std::to_string(fold) + " out of range for k=" +
                     std::to_string(plan.k));
  }
  FoldView view;
  for (const auto& r : records) {
    (plan.fold_of(r.prompt_id) == fold ? view.eval : view.train).push_back(r);
  }
  if (view.train.empty() || view.eval.empty()) {
    view.warning = "fold " + std::to_string(fold) + " has an empty " +
                   (view.train.empty() ? "train" : "eval") + " side";
  }
  return view;
}

// ---- external distributions ----

namespace {

std::vector<double> read_token_map(const json& m, const ScoreSpace& space, const char* field,
                                   bool probabilities) {
  if (!m.is_object()) fail(field, "expected object keyed by token id");
  std::vector<std::optional<double>> aligned(space.size());
  for (const auto& [key, value] : m.items()) {
    std::size_t token = 0;
    const auto res = std::from_chars(key.data(), key.data() + key.size(), token);
    if (res.ec != std::errc() || res.ptr != key.data() + key.size()) {
      fail(field, "token id '" + key + "' is not an integer");
    }
    const auto idx = space.index_of_token(token);
    if (!idx) fail(field, "unknown token id " + key + " for " + std::string(to_string(space.kind())) + " score space");
    if (!value.is_number()) fail(field, "expected number for token " + key);
    const double v = value.get<double>();
    if (!std::isfinite(v)) fail(field, "non-finite value for token " + key);
    if (probabilities && (v < 0.0 || v > 1.0)) fail(field, "probability outside [0, 1] for token " + key);
    aligned[*idx] = v;
  }
  std::vector<double> out;
  for (std::size_t i = 0; i < aligned.size(); ++i) {
    if (!aligned[i]) {
      fail(field, "missing score token " + std::to_string(space.entries()[i].token_id));
    }
    out.push_back(*aligned[i]);
  }
  return out;
}

}  // namespace

ExternalDistributions load_external_distributions(std::istream& in, const TaskSpaces& spaces) {
  ExternalDistributions out;
  for_each_line(
      in, kExternalFormat,
      [&](std::size_t, const json& j) {
        if (!j.is_object()) fail("", "record must be a JSON object");
        const auto id = get_string(j, "sample_id");
        const auto task = parse_task_kind(get_string(j, "task"));
        const ScoreSpace& space = spaces.for_task(task);
        ScoreTokenFragment fragment;
        if (j.contains("score_token_probs")) {
          fragment.probabilities = read_token_map(j["score_token_probs"], space, "score_token_probs", true);
        }
        if (j.contains("score_token_logits")) {
          fragment.logits = read_token_map(j["score_token_logits"], space, "score_token_logits", false);
        }
        if (!fragment.probabilities && !fragment.logits) {
          fail("", "record has neither score_token_probs nor score_token_logits");
        }
        auto& entry = out[id];
        if (task == TaskKind::total) {
          if (j.contains("element_index")) fail("element_index", "not allowed for total task");
          if (entry.total) fail("sample_id", "duplicate (sample_id, task) for '" + id + "'");
          entry.total = std::move(fragment);
        } else {
          if (!j.contains("element_index") || !j["element_index"].is_number_unsigned()) {
            fail("element_index", "element task requires a non-negative integer element_index");
          }
          const auto index = j["element_index"].get<std::size_t>();
          if (!entry.elements.emplace(index, std::move(fragment)).second) {
            fail("sample_id", "duplicate (sample_id, task) for '" + id + "' element " +
                                  std::to_string(index));
          }
        }
      },
      nullptr);
  return out;
}

ExternalDistributions load_external_distributions(const std::string& path,
                                                  const TaskSpaces& spaces) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open external distributions '" + path + "'");
  return load_external_distributions(in, spaces);
}

}  // namespace tokenfocus
