#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "tokenfocus/dataset.hpp"
#include "tokenfocus/pipeline.hpp"
#include "tokenfocus/random.hpp"
#include "tokenfocus/synthetic.hpp"

using namespace tokenfocus;

namespace {

std::string fixture(const std::string& name) { return std::string(TOKENFOCUS_FIXTURES) + "/" + name; }

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::string kHeader = "{\"format\": \"tokenfocus-dataset\", \"version\": 1}\n";

std::string record_line(const std::string& id, const std::string& prompt, double total) {
  return "{\"sample_id\": \"" + id + "\", \"prompt_id\": \"" + prompt +
         "\", \"prompt_text\": \"a cat\", \"t2i_model\": \"m\", \"prompt_type\": \"real\", "
         "\"image_ref\": \"x\", \"total_score\": " + format_number(total) + ", \"elements\": []}\n";
}

std::vector<SampleRecord> one_sample_per_prompt(std::size_t prompts) {
  std::vector<SampleRecord> out;
  for (std::size_t i = 0; i < prompts; ++i) {
    SampleRecord r;
    r.sample_id = "s" + std::to_string(i);
    r.prompt_id = "p" + std::to_string(i);
    out.push_back(r);
  }
  return out;
}

}  // namespace

TEST_CASE("empty sources parse to an empty dataset") {
  std::stringstream empty("");
  CHECK(parse_dataset(empty).empty());
  std::stringstream header_only(kHeader + "\n\n");
  CHECK(parse_dataset(header_only).empty());
}

TEST_CASE("out-of-range total score names the field") {
  std::stringstream in(kHeader + record_line("a", "p", 5.5));
  try {
    parse_dataset(in);
    FAIL("expected an error");
  } catch (const DatasetError& e) {
    CHECK(e.field() == "total_score");
    CHECK(e.line() == 2);
  }
}

TEST_CASE("ten-line fixture round-trips bit-identically") {
  const auto records = load_dataset(fixture("ten_records.jsonl"));
  REQUIRE(records.size() == 10);
  CHECK(records[4].prompt_eval.attribute_confidence == 0.0);
  CHECK(records[5].prompt_text == "line one\nline two with a back\\slash");
  CHECK(records[2].elements.size() == 4);
  CHECK_FALSE(records[2].prompt_quality.has_value());

  std::stringstream first;
  write_dataset(first, records);
  std::stringstream reread(first.str());
  const auto again = parse_dataset(reread);
  CHECK(again == records);
  std::stringstream second;
  write_dataset(second, again);
  CHECK(second.str() == first.str());
}

TEST_CASE("lenient parsing reports one diagnostic per bad line") {
  std::string text = kHeader;
  for (int i = 0; i < 5; ++i) text += record_line("s" + std::to_string(i), "p", 3.0);
  text += "{\"sample_id\": \"bad\"}\n";
  text += record_line("s9", "p", 2.0);
  std::stringstream in(text);
  const auto result = parse_dataset_lenient(in);
  CHECK(result.records.size() == 6);
  REQUIRE(result.diagnostics.size() == 1);
  CHECK(result.diagnostics[0].line == 7);
  CHECK(result.diagnostics[0].field == "prompt_id");
}

TEST_CASE("record validation") {
  auto parse_one = [](const std::string& line) {
    std::stringstream in(kHeader + line);
    return parse_dataset(in);
  };
  CHECK_THROWS_AS(parse_one("{\"sample_id\": \"a\", \"bogus\": 1}\n"), DatasetError);
  CHECK_THROWS_AS(parse_one("not json\n"), DatasetError);
  CHECK_THROWS_AS(parse_one(record_line("a", "p", 0.5)), DatasetError);
  std::stringstream dup(kHeader + record_line("a", "p", 2.0) + record_line("a", "q", 2.0));
  CHECK_THROWS_AS(parse_dataset(dup), DatasetError);
  std::stringstream wrong_header("{\"format\": \"other\", \"version\": 1}\n");
  CHECK_THROWS_AS(parse_dataset(wrong_header), DatasetError);
  std::stringstream no_header(record_line("a", "p", 2.0));
  CHECK_THROWS_AS(parse_dataset(no_header), DatasetError);
}

TEST_CASE("prompt templates match the golden files") {
  const auto records = load_dataset(fixture("ten_records.jsonl"));
  const auto spaces = default_spaces();
  CHECK(build_prompt(records[3], TaskRef::total(), spaces.total) == slurp(fixture("prompt_total_s004.txt")));
  CHECK(build_prompt(records[0], TaskRef::element(1), spaces.element) ==
        slurp(fixture("prompt_element_s001_1.txt")));
  CHECK(build_prompt(records[5], TaskRef::total(), spaces.total) == slurp(fixture("prompt_total_s006.txt")));
}

TEST_CASE("prompt template locality and optional elision") {
  const auto records = load_dataset(fixture("ten_records.jsonl"));
  const auto space = default_spaces().total;
  auto other = records[0];
  other.t2i_model = "imagen";
  const auto a = build_prompt(records[0], TaskRef::total(), space);
  const auto b = build_prompt(other, TaskRef::total(), space);
  CHECK(a != b);
  std::string a_rest = a, b_rest = b;
  a_rest.replace(a_rest.find("sdxl"), 4, "@");
  b_rest.replace(b_rest.find("imagen"), 6, "@");
  CHECK(a_rest == b_rest);

  const auto bare = build_prompt(records[2], TaskRef::total(), space);
  CHECK(bare.find("evaluation") == std::string::npos);
  CHECK(bare.find("quality") == std::string::npos);
  CHECK_THROWS_AS(build_prompt(records[4], TaskRef::element(0), space), InputError);
}

TEST_CASE("prompt template is injective on embedded fields") {
  const auto space = default_spaces().total;
  SampleRecord base;
  base.prompt_text = "a\\nb";
  SampleRecord newline = base;
  newline.prompt_text = "a\nb";
  CHECK(build_prompt(base, TaskRef::total(), space) != build_prompt(newline, TaskRef::total(), space));
  SampleRecord split_a = base, split_b = base;
  split_a.t2i_model = "x\nPrompt type: real";
  split_b.t2i_model = "x";
  CHECK(build_prompt(split_a, TaskRef::total(), space) != build_prompt(split_b, TaskRef::total(), space));
}

TEST_CASE("split_folds on 100 prompts gives 20 prompts per fold") {
  synthetic::Config cfg;
  cfg.prompts = 100;
  cfg.samples_per_prompt = 6;
  const auto records = synthetic::make_dataset(cfg);
  REQUIRE(records.size() == 600);
  const auto plan = split_folds(records, 5, 42);
  std::set<std::string> seen;
  std::size_t eval_total = 0;
  for (std::size_t f = 0; f < 5; ++f) {
    const auto prompts = plan.prompts_in_fold(f);
    CHECK(prompts.size() == 20);
    for (const auto& p : prompts) CHECK(seen.insert(p).second);
    const auto view = fold_view(records, plan, f);
    CHECK(view.train.size() + view.eval.size() == records.size());
    std::set<std::string> train_prompts, eval_prompts;
    for (const auto& r : view.train) train_prompts.insert(r.prompt_id);
    for (const auto& r : view.eval) eval_prompts.insert(r.prompt_id);
    CHECK(train_prompts.size() == 80);
    CHECK(eval_prompts.size() == 20);
    for (const auto& p : eval_prompts) CHECK_FALSE(train_prompts.count(p));
    eval_total += view.eval.size();
    CHECK_FALSE(view.warning.has_value());
  }
  CHECK(seen.size() == 100);
  CHECK(eval_total == records.size());
}

TEST_CASE("split_folds ignores record order and follows the seed") {
  synthetic::Config cfg;
  cfg.prompts = 37;
  auto records = synthetic::make_dataset(cfg);
  const auto plan = split_folds(records, 4, 9);
  std::reverse(records.begin(), records.end());
  Rng rng(1);
  rng.shuffle(std::span<SampleRecord>(records));
  CHECK(split_folds(records, 4, 9) == plan);
  const auto other = split_folds(records, 4, 10);
  CHECK(other.assignment != plan.assignment);
  for (std::size_t f = 0; f < 4; ++f) {
    CHECK(other.prompts_in_fold(f).size() == plan.prompts_in_fold(f).size());
  }
  CHECK_THROWS_AS(split_folds(records, 0, 1), InputError);
  CHECK_THROWS_AS(split_folds(records, 38, 1), InputError);
}

TEST_CASE("challenge-scale prompt count keeps the 4:1 ratio within one prompt") {
  const auto records = one_sample_per_prompt(2991);
  const auto plan = split_folds(records, 5, 2025);
  for (std::size_t f = 0; f < 5; ++f) {
    const auto eval = static_cast<double>(plan.prompts_in_fold(f).size());
    const double train = 2991.0 - eval;
    CHECK(std::abs(eval - 2991.0 / 5.0) <= 1.0);
    CHECK(std::abs(train - 2991.0 * 4.0 / 5.0) <= 1.0);
    CHECK((train == 2393.0 || train == 2392.0));
  }
}

TEST_CASE("degenerate fold view carries a warning") {
  const auto records = one_sample_per_prompt(1);
  FoldPlan plan{2, 0, {{"p0", 0}}};
  const auto v0 = fold_view(records, plan, 0);
  const auto v1 = fold_view(records, plan, 1);
  CHECK(v0.warning.has_value());
  CHECK(v1.warning.has_value());
  CHECK(v0.train.size() + v0.eval.size() == 1);
  CHECK_THROWS_AS(fold_view(records, plan, 2), InputError);
}

TEST_CASE("fold plans survive JSON") {
  const auto plan = split_folds(one_sample_per_prompt(23), 3, 5);
  const auto back = fold_plan_from_json(to_json(plan));
  CHECK(back == plan);
  CHECK(to_json(back).dump() == to_json(plan).dump());
  FoldPlan broken = plan;
  broken.assignment.begin()->second = 7;
  CHECK_THROWS_AS(broken.validate(), InputError);
}

TEST_CASE("external distributions") {
  const auto spaces = default_spaces();
  const std::string header = "{\"format\": \"tokenfocus-external\", \"version\": 1}\n";
  SUBCASE("probabilities reproduce the hand-computed literal projection") {
    std::stringstream in(header +
                         "{\"sample_id\": \"a\", \"task\": \"element\", \"element_index\": 0, "
                         "\"score_token_probs\": {\"6\": 0.25, \"7\": 0.375}}\n");
    const auto ext = load_external_distributions(in, spaces);
    const auto& frag = ext.at("a").elements.at(0);
    const auto m = project_fragment(frag, spaces.element, ProjectionMode::literal).masses;
    CHECK(std::abs(m[0] - 0.4688) < 5e-5);
    CHECK(std::abs(m[1] - 0.5312) < 5e-5);
  }
  SUBCASE("logits only cannot be read in literal mode") {
    std::stringstream in(header +
                         "{\"sample_id\": \"a\", \"task\": \"total\", \"score_token_logits\": "
                         "{\"1\": 0, \"2\": 0, \"3\": 1, \"4\": 0, \"5\": 0}}\n");
    const auto ext = load_external_distributions(in, spaces);
    CHECK_THROWS_AS(project_fragment(*ext.at("a").total, spaces.total, ProjectionMode::literal), InputError);
    CHECK_NOTHROW(project_fragment(*ext.at("a").total, spaces.total, ProjectionMode::logit_renorm));
  }
  SUBCASE("empty source gives an empty map") {
    std::stringstream in("");
    CHECK(load_external_distributions(in, spaces).empty());
  }
  SUBCASE("bad records") {
    auto load = [&](const std::string& line) {
      std::stringstream in(header + line);
      return load_external_distributions(in, spaces);
    };
    CHECK_THROWS_AS(load("{\"sample_id\": \"a\", \"task\": \"element\", \"element_index\": 0, "
                         "\"score_token_probs\": {\"6\": 0.5, \"9\": 0.5}}\n"),
                    InputError);
    CHECK_THROWS_AS(load("{\"sample_id\": \"a\", \"task\": \"element\", \"element_index\": 0, "
                         "\"score_token_probs\": {\"6\": 1.5, \"7\": 0.5}}\n"),
                    InputError);
    CHECK_THROWS_AS(load("{\"sample_id\": \"a\", \"task\": \"element\", "
                         "\"score_token_probs\": {\"6\": 0.5, \"7\": 0.5}}\n"),
                    InputError);
    const std::string rec = "{\"sample_id\": \"a\", \"task\": \"element\", \"element_index\": 1, "
                            "\"score_token_probs\": {\"6\": 0.5, \"7\": 0.5}}\n";
    CHECK_THROWS_AS(load(rec + rec), InputError);
  }
}

TEST_CASE("synthetic generator is deterministic and valid") {
  synthetic::Config cfg;
  cfg.prompts = 12;
  cfg.annotators = 3;
  cfg.id_prefix = "x";
  const auto a = synthetic::make_dataset(cfg);
  CHECK(a == synthetic::make_dataset(cfg));
  CHECK(a.size() == 72);
  CHECK(a.front().sample_id.rfind("x", 0) == 0);
  std::stringstream buf;
  write_dataset(buf, a);
  std::stringstream in(buf.str());
  CHECK(parse_dataset(in) == a);
  cfg.seed += 1;
  CHECK(a != synthetic::make_dataset(cfg));
}
