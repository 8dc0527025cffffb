#include "tokenfocus/pipeline.hpp"

#include <algorithm>

namespace tokenfocus {

using nlohmann::json;

Tokenizer fit_tokenizer(std::span<const SampleRecord> records, const TaskSpaces& spaces) {
  std::vector<std::string> texts;
  for (const auto& r : records) {
    texts.push_back(build_prompt(r, TaskRef::total(), spaces.total));
    for (std::size_t i = 0; i < r.elements.size(); ++i) {
      texts.push_back(build_prompt(r, TaskRef::element(i), spaces.element));
    }
  }
  const std::size_t reserved = std::max(spaces.total.max_token_id(), spaces.element.max_token_id()) + 1;
  return Tokenizer::fit(texts, reserved);
}

std::vector<std::size_t> encode_row(const MetaRow& row, const TaskSpaces& spaces,
                                    const Tokenizer& tokenizer) {
  const auto task = row.element_index ? TaskRef::element(*row.element_index) : TaskRef::total();
  return tokenizer.encode(build_prompt(*row.record, task, spaces.for_task(task.kind)));
}

std::vector<TrainingSample> training_samples(std::span<const MetaRow> rows, const TaskSpaces& spaces,
                                             const Tokenizer& tokenizer) {
  std::vector<TrainingSample> out;
  out.reserve(rows.size());
  for (const auto& row : rows) out.push_back({encode_row(row, spaces, tokenizer), row.target()});
  return out;
}

namespace {

std::vector<MetaRow> rows_for(std::span<const SampleRecord> records, TaskKind task) {
  return task == TaskKind::total ? total_rows(records) : element_rows(records);
}

}  // namespace

TrainedScorer train_scorer(std::span<const SampleRecord> train_set, TaskKind task,
                           const TaskSpaces& spaces, const ModelShape& shape,
                           const TrainingConfig& cfg) {
  TrainedScorer out{{{}, fit_tokenizer(train_set, spaces), task}, {}};
  const ModelDims dims{out.scorer.tokenizer.vocab_size(), shape.embed_dim, shape.hidden_dim};
  out.scorer.model.params = ToyModelParams::random(dims, cfg.seed);
  const auto rows = rows_for(train_set, task);
  const auto samples = training_samples(rows, spaces, out.scorer.tokenizer);
  out.log = train(out.scorer.model, samples, spaces.for_task(task), cfg);
  return out;
}

std::map<std::string, double> score_rows(const FoldScorer& scorer, std::span<const MetaRow> rows,
                                         const TaskSpaces& spaces, ProjectionMode mode,
                                         unsigned threads) {
  std::vector<std::vector<std::size_t>> inputs;
  inputs.reserve(rows.size());
  for (const auto& row : rows) {
    if (row.element_index.has_value() != (scorer.task == TaskKind::element)) {
      throw InputError("row " + row.key() + " does not match the scorer's task");
    }
    inputs.push_back(encode_row(row, spaces, scorer.tokenizer));
  }
  const auto preds = predict_batch(scorer.model, inputs, spaces.for_task(scorer.task), mode, threads);
  std::map<std::string, double> out;
  for (std::size_t i = 0; i < rows.size(); ++i) out[rows[i].key()] = preds[i];
  return out;
}

namespace {

json space_to_json(const ScoreSpace& space) {
  json entries = json::array();
  for (const auto& e : space.entries()) entries.push_back({{"token_id", e.token_id}, {"value", e.value}});
  return entries;
}

ScoreSpace space_from_json(const json& j, TaskKind kind) {
  if (!j.is_array()) throw InputError("score space must be an array of {token_id, value}");
  std::vector<ScoreEntry> entries;
  for (const auto& e : j) {
    if (!e.is_object() || !e.contains("token_id") || !e.contains("value") ||
        !e["token_id"].is_number_unsigned() || !e["value"].is_number()) {
      throw InputError("score space entry must be {\"token_id\": uint, \"value\": number}");
    }
    entries.push_back({e["token_id"].get<std::size_t>(), e["value"].get<double>()});
  }
  return ScoreSpace(std::move(entries), kind);
}

}  // namespace

json spaces_to_json(const TaskSpaces& spaces) {
  return {{"total", space_to_json(spaces.total)}, {"element", space_to_json(spaces.element)}};
}

TaskSpaces spaces_from_json(const json& j) {
  if (!j.is_object() || !j.contains("total") || !j.contains("element")) {
    throw InputError("score_spaces needs 'total' and 'element'");
  }
  return {space_from_json(j["total"], TaskKind::total), space_from_json(j["element"], TaskKind::element)};
}

TaskSpaces default_spaces() {
  return {ScoreSpace::integer_range(1, 1, 5, TaskKind::total),
          ScoreSpace({{6, 0.0}, {7, 1.0}}, TaskKind::element)};
}

Checkpoint to_checkpoint(const FoldScorer& scorer, const TaskSpaces& spaces,
                         const TrainingConfig& cfg, json extra) {
  Checkpoint ckpt;
  ckpt.model = scorer.model;
  ckpt.metadata = std::move(extra);
  ckpt.metadata["task"] = std::string(to_string(scorer.task));
  ckpt.metadata["tokenizer"] = scorer.tokenizer.to_json();
  ckpt.metadata["score_spaces"] = spaces_to_json(spaces);
  ckpt.metadata["training"] = to_json(cfg);
  ckpt.metadata["seed"] = cfg.seed;
  return ckpt;
}

FoldScorer scorer_from_checkpoint(const Checkpoint& ckpt) {
  try {
    FoldScorer s{ckpt.model, Tokenizer::from_json(ckpt.metadata.at("tokenizer")),
                 parse_task_kind(ckpt.metadata.at("task").get<std::string>())};
    if (s.tokenizer.vocab_size() != s.model.params.dims().vocab_size) {
      throw InputError("checkpoint tokenizer does not match model vocabulary");
    }
    return s;
  } catch (const json::exception& e) {
    throw InputError(std::string("checkpoint metadata incomplete: ") + e.what());
  }
}

StackingRun run_stacking(std::span<const SampleRecord> train, std::span<const SampleRecord> test,
                         std::size_t k, std::uint64_t seed, TaskKind task, const TaskSpaces& spaces,
                         const ModelShape& shape, const TrainingConfig& cfg, const GbtConfig& gbt) {
  StackingRun run;
  run.plan = split_folds(train, k, seed);
  const auto train_rows = rows_for(train, task);
  const auto test_rows = rows_for(test, task);
  FoldPredictions predictions;
  for (std::size_t f = 0; f < k; ++f) {
    const auto view = fold_view(train, run.plan, f);
    TrainingConfig fold_cfg = cfg;
    fold_cfg.seed = cfg.seed + f;
    run.folds.push_back(train_scorer(view.train, task, spaces, shape, fold_cfg));
    auto preds = score_rows(run.folds.back().scorer, train_rows, spaces, cfg.projection_mode);
    auto test_preds = score_rows(run.folds.back().scorer, test_rows, spaces, cfg.projection_mode);
    preds.merge(test_preds);
    predictions.push_back(std::move(preds));
  }
  run.blend = blend(train_rows, run.plan, test_rows, predictions, gbt);
  return run;
}

}  // namespace tokenfocus
