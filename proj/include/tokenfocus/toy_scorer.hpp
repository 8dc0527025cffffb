#pragma once

// Desk-scale differentiable first-token scorer.
//
//   tokens -> embedding rows -> single-query attention pooling -> tanh layer
//          -> vocabulary logits
//
// Parameters split into two learning-rate groups: the "encoder" group
// (embedding, attention query) and the "head" group (W1, b1, W2, b2 and any
// low-rank adapters).

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tokenfocus/matrix.hpp"
#include "tokenfocus/score_core.hpp"

namespace tokenfocus {

struct ModelDims {
  std::size_t vocab_size = 0;
  std::size_t embed_dim = 0;
  std::size_t hidden_dim = 0;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct TensorRef {
  std::string name;
  std::span<double> values;
};

struct ToyModelParams {
  Matrix embedding;           // vocab_size x embed_dim
  std::vector<double> query;  // embed_dim
  Matrix w1;                  // embed_dim x hidden_dim
  std::vector<double> b1;     // hidden_dim
  Matrix w2;                  // hidden_dim x vocab_size
  std::vector<double> b2;     // vocab_size

  static ToyModelParams zeros(const ModelDims& dims);
  // Every entry uniform in (-0.08, 0.08), drawn in tensor order.
  static ToyModelParams random(const ModelDims& dims, std::uint64_t seed);

  ModelDims dims() const;
  // Throws InputError on inconsistent shapes, NumericError on non-finite values.
  void validate() const;

  // Fixed order: embedding, query, w1, b1, w2, b2.
  std::vector<TensorRef> tensors();
  std::size_t parameter_count() const;

  friend bool operator==(const ToyModelParams&, const ToyModelParams&) = default;
};

// W_eff = W + (alpha / rank) * B * A, with W of shape m x n.
struct LowRankAdapter {
  Matrix a;  // rank x n
  Matrix b;  // m x rank
  std::size_t rank = 0;
  double alpha = 0.0;

  // A ~ uniform(-0.08, 0.08), B = 0, so the initial delta is zero.
  static LowRankAdapter create(std::size_t m, std::size_t n, std::size_t rank, double alpha,
                               std::uint64_t seed);

  double scale() const { return alpha / static_cast<double>(rank); }
  void validate(std::size_t m, std::size_t n) const;

  friend bool operator==(const LowRankAdapter&, const LowRankAdapter&) = default;
};

Matrix apply_adapter(const Matrix& w, const LowRankAdapter& adapter);

struct AdapterGradients {
  Matrix a;
  Matrix b;
};

// Chain rule through W_eff for a given dL/dW_eff.
AdapterGradients adapter_gradients(const Matrix& grad_w_eff, const LowRankAdapter& adapter);

struct AdapterSet {
  std::optional<LowRankAdapter> w1;
  std::optional<LowRankAdapter> w2;

  bool empty() const { return !w1 && !w2; }

  friend bool operator==(const AdapterSet&, const AdapterSet&) = default;
};

struct ToyModel {
  ToyModelParams params;
  AdapterSet adapters;  // when non-empty, base w1/w2 are frozen during training
};

TokenDistribution forward(const ToyModelParams& params, const AdapterSet* adapters,
                          std::span<const std::size_t> tokens);

enum class LossKind { token_focus, cross_entropy };

struct TrainingConfig {
  double base_lr = 1e-4;     // head group
  double encoder_lr = 1e-5;  // embedding + attention group
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double epsilon = 1e-8;
  std::size_t batch_size = 64;
  std::size_t warmup_steps = 200;
  std::size_t total_steps = 1;  // schedule horizon; train() derives it from the data
  std::size_t epochs = 3;
  std::uint64_t seed = 1234;
  ProjectionMode projection_mode = ProjectionMode::literal;
  LossKind loss = LossKind::token_focus;

  void validate() const;
};

nlohmann::json to_json(const TrainingConfig& cfg);
// Missing keys keep their defaults.
TrainingConfig training_config_from_json(const nlohmann::json& j);

// Multiplier in [0, 1]: linear warmup from (1 / warmup), then cosine decay to
// 0 at total_steps.
double schedule_factor(std::size_t step, const TrainingConfig& cfg);
double cosine_lr(std::size_t step, double group_base, const TrainingConfig& cfg);

struct OptimizerState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  std::uint64_t step = 0;
};

struct ParamSlot {
  std::span<double> value;
  std::span<const double> grad;
  double lr = 0.0;
};

// One AdamW step over all slots. Moment buffers are created lazily on the
// first call and must keep the same slot shapes afterwards.
void adamw_step(std::span<const ParamSlot> slots, OptimizerState& state,
                const TrainingConfig& cfg);
void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                double lr, const TrainingConfig& cfg);

struct TrainingSample {
  std::vector<std::size_t> tokens;
  double target = 0.0;
};

struct ModelGradients {
  ToyModelParams params;
  AdapterSet adapters;
};

// Mean loss over `batch` and its gradient with respect to every parameter
// (base weights and adapters alike).
double loss_and_gradients(const ToyModel& model, std::span<const TrainingSample> batch,
                          const ScoreSpace& space, ProjectionMode mode, LossKind loss,
                          ModelGradients& grads);

double sample_loss(const ToyModel& model, const TrainingSample& sample, const ScoreSpace& space,
                   ProjectionMode mode, LossKind loss);
double mean_loss(const ToyModel& model, std::span<const TrainingSample> samples,
                 const ScoreSpace& space, ProjectionMode mode,
                 LossKind loss = LossKind::token_focus);

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double head_lr = 0.0;
  double encoder_lr = 0.0;
  double loss = 0.0;  // mean over the step's batch
};

struct TrainLog {
  std::vector<StepRecord> steps;
  // Full-dataset mean loss before training, then after each epoch.
  std::vector<double> epoch_losses;
};

// Single-threaded and deterministic in cfg.seed. Batches are a fresh seeded
// permutation of the samples each epoch.
TrainLog train(ToyModel& model, std::span<const TrainingSample> samples, const ScoreSpace& space,
               const TrainingConfig& cfg);

double predict(const ToyModel& model, std::span<const std::size_t> tokens, const ScoreSpace& space,
               ProjectionMode mode);

// Fans out over `threads` workers; results are stored by input index.
std::vector<double> predict_batch(const ToyModel& model,
                                  std::span<const std::vector<std::size_t>> inputs,
                                  const ScoreSpace& space, ProjectionMode mode,
                                  unsigned threads = 1);

// Checkpoint layout (all integers little-endian):
//   bytes 0..7   magic "TFVQACK1"
//   bytes 8..15  u64 header length N
//   next N bytes UTF-8 JSON header: {"dims": {...}, "tensors": [{"name", "rows",
//                "cols"}...], "metadata": {...}}
//   remainder    IEEE-754 binary64 values, tensors in header order, row-major
struct Checkpoint {
  ToyModel model;
  nlohmann::json metadata = nlohmann::json::object();
};

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt);
Checkpoint read_checkpoint(std::istream& in);
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tokenfocus
