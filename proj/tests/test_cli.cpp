#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "tokenfocus/cli.hpp"
#include "tokenfocus/dataset.hpp"

using namespace tokenfocus;
namespace fs = std::filesystem;

namespace {

std::string fixture(const std::string& name) { return std::string(TOKENFOCUS_FIXTURES) + "/" + name; }

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write(const fs::path& path, const std::string& text) { std::ofstream(path, std::ios::binary) << text; }

std::size_t line_count(const fs::path& path) {
  const auto s = slurp(path);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

// A fresh scratch directory per test, removed on exit.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) {
    dir = fs::temp_directory_path() / ("tokenfocus_cli_" + name + "_" + std::to_string(std::random_device{}()));
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  std::string operator/(const std::string& name) const { return (dir / name).string(); }
};

// Small synthetic train/test sets and a config that trains in well under a second.
void prepare_run(const Scratch& s, const std::string& task, double base_lr = 3e-2, double encoder_lr = 3e-3) {
  REQUIRE(run_cli({"synth", "--prompts", "20", "--samples-per-prompt", "3", "--seed", "5", "--prefix", "tr",
                   "--out", s / "train.jsonl"})
              .code == 0);
  REQUIRE(run_cli({"synth", "--prompts", "6", "--samples-per-prompt", "3", "--seed", "6", "--prefix", "te",
                   "--out", s / "test.jsonl"})
              .code == 0);
  const nlohmann::json cfg = {
      {"dataset", "train.jsonl"},
      {"test_dataset", "test.jsonl"},
      {"output_dir", "run"},
      {"task", task},
      {"mode", "logit_renorm"},
      {"k", 3},
      {"seed", 21},
      {"model", {{"embed_dim", 8}, {"hidden_dim", 12}}},
      {"training",
       {{"base_lr", base_lr}, {"encoder_lr", encoder_lr}, {"batch_size", 8}, {"warmup_steps", 5}, {"epochs", 2}}},
      {"gbt", {{"n_rounds", 20}, {"min_samples_leaf", 3}}}};
  write(s.dir / "config.json", cfg.dump(2));
}

}  // namespace

TEST_CASE("validate exit codes") {
  Scratch s("validate");
  const auto ok = run_cli({"validate", fixture("ten_records.jsonl")});
  CHECK(ok.code == 0);
  CHECK(ok.out == "10 records OK\n");

  auto text = slurp(fixture("ten_records.jsonl"));
  text += "{\"sample_id\": \"bad\", \"prompt_id\": \"p\", \"prompt_text\": \"x\"}\n";
  write(s.dir / "bad.jsonl", text);
  const auto bad = run_cli({"validate", s / "bad.jsonl"});
  CHECK(bad.code == 1);
  CHECK(bad.out.find("line 12: ") != std::string::npos);

  CHECK(run_cli({"validate", s / "missing.jsonl"}).code == 2);
  CHECK(run_cli({"bogus"}).code == 1);
  CHECK(run_cli({"--help"}).code == 0);
}

TEST_CASE("split is deterministic in the seed") {
  Scratch s("split");
  prepare_run(s, "total");
  const auto a = run_cli({"split", "--config", s / "config.json", "--out", s / "a.json"});
  REQUIRE(a.code == 0);
  CHECK(a.out.find("Fold  T-Prompts") == 0);
  REQUIRE(run_cli({"split", "--config", s / "config.json", "--out", s / "b.json"}).code == 0);
  REQUIRE(run_cli({"split", "--config", s / "config.json", "--seed", "22", "--out", s / "c.json"}).code == 0);
  CHECK(slurp(s / "a.json") == slurp(s / "b.json"));
  CHECK(slurp(s / "a.json") != slurp(s / "c.json"));
  const auto plan = load_fold_plan(s / "a.json");
  CHECK(plan.k == 3);
  CHECK(plan.assignment.size() == 20);
}

TEST_CASE("train writes checkpoints and loss logs") {
  Scratch s("train");
  prepare_run(s, "both");
  REQUIRE(run_cli({"split", "--config", s / "config.json"}).code == 0);
  const auto r = run_cli({"train", "--config", s / "config.json", "--fold", "1"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("fold 1 total: ") == 0);
  const fs::path run = s.dir / "run";
  for (const std::string task : {"total", "element"}) {
    CHECK(fs::exists(run / ("fold1_" + task + ".ckpt")));
    CHECK(line_count(run / ("fold1_" + task + "_epochs.csv")) == 1 + 3);
  }
  // 20 prompts in 3 folds: fold 1 trains on 13 prompts x 3 samples = 39 rows, 5 batches per epoch.
  const auto plan = load_fold_plan((run / "plan.json").string());
  const auto train_prompts = plan.assignment.size() - plan.prompts_in_fold(1).size();
  const auto batches = (train_prompts * 3 + 7) / 8;
  CHECK(line_count(run / "fold1_total_loss.csv") == 1 + 2 * batches);

  const auto first = slurp(run / "fold1_total.ckpt");
  REQUIRE(run_cli({"train", "--config", s / "config.json", "--fold", "1"}).code == 0);
  CHECK(slurp(run / "fold1_total.ckpt") == first);

  CHECK(run_cli({"train", "--config", s / "config.json", "--fold", "3"}).code == 1);
  CHECK(run_cli({"train", "--config", s / "config.json", "--fold", "-1"}).code == 1);
}

TEST_CASE("zero learning rates leave the epoch losses flat") {
  Scratch s("flat");
  prepare_run(s, "total", 0.0, 0.0);
  REQUIRE(run_cli({"train", "--config", s / "config.json", "--fold", "0"}).code == 0);
  std::ifstream in(s.dir / "run" / "fold0_total_epochs.csv");
  std::string line;
  std::getline(in, line);
  std::vector<std::string> losses;
  while (std::getline(in, line)) losses.push_back(line.substr(line.find(',') + 1));
  REQUIRE(losses.size() == 3);
  CHECK(losses[0] == losses[1]);
  CHECK(losses[1] == losses[2]);
}

TEST_CASE("external distributions score to the hand values") {
  Scratch s("external");
  write(s.dir / "one.jsonl",
        "{\"format\": \"tokenfocus-dataset\", \"version\": 1}\n"
        "{\"sample_id\": \"x1\", \"prompt_id\": \"p\", \"prompt_text\": \"a cat\", \"t2i_model\": \"m\", \"prompt_type\": \"real\", \"image_ref\": \"i.png\", "
        "\"total_score\": 3.0, \"elements\": [{\"text\": \"cat\", \"category\": \"object\", \"score\": 1.0}]}\n");
  write(s.dir / "probs.jsonl",
        "{\"format\": \"tokenfocus-external\", \"version\": 1}\n"
        "{\"sample_id\": \"x1\", \"task\": \"element\", \"element_index\": 0, "
        "\"score_token_probs\": {\"6\": 0.25, \"7\": 0.375}}\n");
  const auto r = run_cli({"score", "--dataset", s / "one.jsonl", "--task", "element", "--mode", "literal",
                          "--external", s / "probs.jsonl", "--out", s / "preds.jsonl"});
  REQUIRE(r.code == 0);
  const auto preds = cli::load_predictions(s / "preds.jsonl");
  REQUIRE(preds.size() == 1);
  REQUIRE(preds[0].elements.size() == 1);
  CHECK(std::abs(preds[0].elements[0] - 0.5312) < 5e-5);
  CHECK_FALSE(preds[0].total.has_value());

  write(s.dir / "logits.jsonl",
        "{\"format\": \"tokenfocus-external\", \"version\": 1}\n"
        "{\"sample_id\": \"x1\", \"task\": \"element\", \"element_index\": 0, "
        "\"score_token_logits\": {\"6\": 0.1, \"7\": 0.2}}\n");
  const auto bad = run_cli({"score", "--dataset", s / "one.jsonl", "--task", "element", "--mode", "literal",
                            "--external", s / "logits.jsonl", "--out", s / "bad.jsonl"});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("x1") != std::string::npos);
}

TEST_CASE("checkpoint scoring covers every sample within the score range") {
  Scratch s("score");
  prepare_run(s, "both");
  REQUIRE(run_cli({"train", "--config", s / "config.json", "--fold", "0"}).code == 0);
  REQUIRE(run_cli({"score", "--config", s / "config.json", "--fold", "0", "--out", s / "all.jsonl"}).code == 0);
  const auto records = load_dataset(s / "train.jsonl");
  const auto preds = cli::load_predictions(s / "all.jsonl");
  REQUIRE(preds.size() == records.size());
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CHECK(preds[i].sample_id == records[i].sample_id);
    REQUIRE(preds[i].total);
    CHECK(*preds[i].total >= 1.0);
    CHECK(*preds[i].total <= 5.0);
    CHECK(preds[i].elements.size() == records[i].elements.size());
    for (double e : preds[i].elements) CHECK((e >= 0.0 && e <= 1.0));
  }
  REQUIRE(run_cli({"score", "--config", s / "config.json", "--fold", "0", "--split", "eval", "--out",
                   s / "eval.jsonl"})
              .code == 0);
  CHECK(cli::load_predictions(s / "eval.jsonl").size() < records.size());
  CHECK(run_cli({"report", "--config", s / "config.json", "--fold", "0", "--split", "eval", "--predictions",
                 s / "eval.jsonl", "--out", s / "eval_report.json"})
            .code == 0);
  CHECK(run_cli({"report", "--config", s / "config.json", "--predictions", s / "eval.jsonl", "--out",
                 s / "mismatch.json"})
            .code == 1);
  CHECK(run_cli({"score", "--config", s / "config.json", "--split", "eval"}).code == 1);
}

TEST_CASE("report ranks perfect, shuffled and precomputed runs") {
  Scratch s("report");
  prepare_run(s, "both");
  const auto records = load_dataset(s / "train.jsonl");
  std::vector<cli::Prediction> perfect, shuffled;
  for (const auto& r : records) {
    cli::Prediction p{r.sample_id, r.total_score, {}};
    for (const auto& e : r.elements) p.elements.push_back(e.score);
    perfect.push_back(p);
  }
  shuffled = perfect;
  std::mt19937_64 rng(3);
  std::vector<double> totals;
  for (const auto& p : perfect) totals.push_back(*p.total);
  std::shuffle(totals.begin(), totals.end(), rng);
  for (std::size_t i = 0; i < shuffled.size(); ++i) shuffled[i].total = totals[i];
  cli::save_predictions(s / "perfect.jsonl", perfect);
  cli::save_predictions(s / "shuffled.jsonl", shuffled);

  const auto r = run_cli({"report", "--config", s / "config.json", "--predictions", s / "perfect.jsonl",
                          "--predictions", s / "shuffled.jsonl", "--precomputed", "0.8002,0.8321,0.8691",
                          "--out", s / "report.json"});
  REQUIRE(r.code == 0);
  const auto j = nlohmann::json::parse(slurp(s / "report.json"));
  const auto& runs = j.at("runs");
  REQUIRE(runs.size() == 3);
  CHECK(runs[0].at("overall").get<double>() == doctest::Approx(0.842625).epsilon(1e-9));
  CHECK(runs[1].at("name") == "perfect");
  CHECK(runs[1].at("srcc").get<double>() == 1.0);
  CHECK(runs[1].at("overall").get<double>() == 1.0);
  CHECK(runs[2].at("overall").get<double>() < runs[1].at("overall").get<double>());
  CHECK(r.out.find("vs first") != std::string::npos);
  CHECK(run_cli({"report", "--config", s / "config.json", "--precomputed", "0.8,0.8"}).code == 1);
}

TEST_CASE("blend end to end") {
  Scratch s("blend");
  prepare_run(s, "both");
  REQUIRE(run_cli({"split", "--config", s / "config.json"}).code == 0);
  const auto missing = run_cli({"blend", "--config", s / "config.json"});
  CHECK(missing.code == 1);
  CHECK(missing.err.find("missing fold artifact") != std::string::npos);
  for (const std::string f : {"0", "1", "2"}) {
    REQUIRE(run_cli({"train", "--config", s / "config.json", "--fold", f}).code == 0);
  }
  const auto r = run_cli({"blend", "--config", s / "config.json"});
  REQUIRE(r.code == 0);
  for (const std::string label : {"fold 0", "fold 2", "Avg", "Blend", "-----"}) {
    CHECK(r.out.find(label) != std::string::npos);
  }
  const fs::path run = s.dir / "run";
  const auto report = nlohmann::json::parse(slurp(run / "blend_report.json"));
  CHECK(report.at("tasks").at("total").size() == 5);
  CHECK(report.at("overall").size() == 5);
  const auto first_preds = slurp(run / "blend_predictions.jsonl");
  const auto first_model = slurp(run / "gbt_total.json");
  REQUIRE(run_cli({"blend", "--config", s / "config.json"}).code == 0);
  CHECK(slurp(run / "blend_predictions.jsonl") == first_preds);
  CHECK(slurp(run / "gbt_total.json") == first_model);

  const auto one = run_cli({"blend", "--config", s / "config.json", "--predictions", s / "x.jsonl"});
  CHECK(one.code == 1);
}
