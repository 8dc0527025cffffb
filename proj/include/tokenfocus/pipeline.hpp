#pragma once

// Glue between annotation records and the toy scorer, up to the full
// k-fold stacking run.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tokenfocus/dataset.hpp"
#include "tokenfocus/ensemble.hpp"
#include "tokenfocus/tokenizer.hpp"
#include "tokenfocus/toy_scorer.hpp"

namespace tokenfocus {

struct ModelShape {
  std::size_t embed_dim = 16;
  std::size_t hidden_dim = 32;
};

// Score-token ids are reserved below every word id.
Tokenizer fit_tokenizer(std::span<const SampleRecord> records, const TaskSpaces& spaces);

std::vector<std::size_t> encode_row(const MetaRow& row, const TaskSpaces& spaces,
                                    const Tokenizer& tokenizer);

std::vector<TrainingSample> training_samples(std::span<const MetaRow> rows, const TaskSpaces& spaces,
                                             const Tokenizer& tokenizer);

struct FoldScorer {
  ToyModel model;
  Tokenizer tokenizer;
  TaskKind task = TaskKind::total;
};

struct TrainedScorer {
  FoldScorer scorer;
  TrainLog log;
};

// Fits the tokenizer on `train`, initializes from cfg.seed and trains on the
// task's rows.
TrainedScorer train_scorer(std::span<const SampleRecord> train, TaskKind task,
                           const TaskSpaces& spaces, const ModelShape& shape,
                           const TrainingConfig& cfg);

// row key -> prediction.
std::map<std::string, double> score_rows(const FoldScorer& scorer, std::span<const MetaRow> rows,
                                         const TaskSpaces& spaces, ProjectionMode mode,
                                         unsigned threads = 1);

nlohmann::json spaces_to_json(const TaskSpaces& spaces);
TaskSpaces spaces_from_json(const nlohmann::json& j);
// Total: tokens 1..5 -> scores 1..5. Element: tokens 6, 7 -> scores 0, 1.
TaskSpaces default_spaces();

Checkpoint to_checkpoint(const FoldScorer& scorer, const TaskSpaces& spaces,
                         const TrainingConfig& cfg, nlohmann::json extra = nlohmann::json::object());
FoldScorer scorer_from_checkpoint(const Checkpoint& ckpt);

struct StackingRun {
  FoldPlan plan;
  std::vector<TrainedScorer> folds;
  BlendResult blend;
};

// Splits `train` into k prompt-disjoint folds, trains one scorer per fold on
// the other k-1 folds, scores train and test rows with every scorer, and
// blends.
StackingRun run_stacking(std::span<const SampleRecord> train, std::span<const SampleRecord> test,
                         std::size_t k, std::uint64_t seed, TaskKind task, const TaskSpaces& spaces,
                         const ModelShape& shape, const TrainingConfig& cfg, const GbtConfig& gbt);

}  // namespace tokenfocus
