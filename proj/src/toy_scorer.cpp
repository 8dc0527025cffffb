#include "tokenfocus/toy_scorer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <thread>

#include "tokenfocus/error.hpp"
#include "tokenfocus/random.hpp"

namespace tokenfocus {

namespace {

constexpr double kInitRange = 0.08;

void fill_uniform(std::span<double> values, Rng& rng) {
  for (double& v : values) v = rng.uniform(-kInitRange, kInitRange);
}

void check_finite(std::span<const double> values, const char* what) {
  for (double v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
  }
}

// Forward activations kept for the backward pass.
struct Activations {
  std::vector<std::vector<double>> rows;  // embedding row per input position
  std::vector<double> attention;
  std::vector<double> pooled;
  std::vector<double> hidden;
  std::vector<double> logits;
};

Matrix effective(const Matrix& w, const std::optional<LowRankAdapter>& adapter) {
  return adapter ? apply_adapter(w, *adapter) : w;
}

void run_forward(const ToyModelParams& p, const Matrix& w1, const Matrix& w2,
                 std::span<const std::size_t> tokens, Activations& act) {
  const std::size_t vocab = p.embedding.rows;
  const std::size_t d = p.embedding.cols;
  const std::size_t h = w1.cols;
  if (tokens.empty()) throw InputError("empty token sequence");
  act.rows.clear();
  std::vector<double> scores;
  scores.reserve(tokens.size());
  for (std::size_t t : tokens) {
    if (t >= vocab) {
      throw InputError("token index " + std::to_string(t) + " out of range for vocab_size " +
                       std::to_string(vocab));
    }
    auto row = p.embedding.row(t);
    act.rows.emplace_back(row.begin(), row.end());
    scores.push_back(std::inner_product(row.begin(), row.end(), p.query.begin(), 0.0));
  }
  act.attention = stable_softmax(scores);
  act.pooled.assign(d, 0.0);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) act.pooled[k] += act.attention[i] * act.rows[i][k];
  }
  act.hidden = p.b1;
  for (std::size_t k = 0; k < d; ++k) {
    const double c = act.pooled[k];
    const auto wrow = w1.row(k);
    for (std::size_t j = 0; j < h; ++j) act.hidden[j] += c * wrow[j];
  }
  for (double& v : act.hidden) v = std::tanh(v);
  act.logits = p.b2;
  for (std::size_t j = 0; j < h; ++j) {
    const double hj = act.hidden[j];
    const auto wrow = w2.row(j);
    for (std::size_t v = 0; v < vocab; ++v) act.logits[v] += hj * wrow[v];
  }
}

// Accumulates scale * d(output)/d(params) for the given logit gradient.
// grad_w1 / grad_w2 receive the gradient with respect to the effective weights.
void run_backward(const ToyModelParams& p, const Matrix& w1, const Matrix& w2,
                  std::span<const std::size_t> tokens, const Activations& act,
                  std::span<const double> grad_logits, double scale, ToyModelParams& g) {
  const std::size_t vocab = p.embedding.rows;
  const std::size_t d = p.embedding.cols;
  const std::size_t h = w1.cols;

  std::vector<double> grad_hidden(h, 0.0);
  for (std::size_t v = 0; v < vocab; ++v) g.b2[v] += scale * grad_logits[v];
  for (std::size_t j = 0; j < h; ++j) {
    const auto wrow = w2.row(j);
    auto grow = g.w2.row(j);
    double acc = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) {
      grow[v] += scale * act.hidden[j] * grad_logits[v];
      acc += wrow[v] * grad_logits[v];
    }
    grad_hidden[j] = acc * (1.0 - act.hidden[j] * act.hidden[j]);
  }
  std::vector<double> grad_pooled(d, 0.0);
  for (std::size_t j = 0; j < h; ++j) g.b1[j] += scale * grad_hidden[j];
  for (std::size_t k = 0; k < d; ++k) {
    const auto wrow = w1.row(k);
    auto grow = g.w1.row(k);
    double acc = 0.0;
    for (std::size_t j = 0; j < h; ++j) {
      grow[j] += scale * act.pooled[k] * grad_hidden[j];
      acc += wrow[j] * grad_hidden[j];
    }
    grad_pooled[k] = acc;
  }
  // pooled = sum_i attention_i * row_i, attention = softmax(query . row_i)
  const std::size_t n = tokens.size();
  std::vector<double> grad_attn(n);
  double mean_grad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    grad_attn[i] = std::inner_product(act.rows[i].begin(), act.rows[i].end(), grad_pooled.begin(),
                                      0.0);
    mean_grad += act.attention[i] * grad_attn[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double grad_score = act.attention[i] * (grad_attn[i] - mean_grad);
    auto grow = g.embedding.row(tokens[i]);
    for (std::size_t k = 0; k < d; ++k) {
      g.query[k] += scale * grad_score * act.rows[i][k];
      grow[k] += scale * (act.attention[i] * grad_pooled[k] + grad_score * p.query[k]);
    }
  }
}

std::vector<double> loss_grad_logits(std::span<const double> logits, const ScoreSpace& space,
                                     ProjectionMode mode, LossKind loss, double target,
                                     double& loss_value) {
  auto dist = TokenDistribution::from_logits({logits.begin(), logits.end()});
  if (loss == LossKind::token_focus) {
    loss_value = tokenfocus_loss(score_from_logits(logits, space, mode), target);
    return tokenfocus_loss_grad(dist, space, mode, target);
  }
  // Cross-entropy on the score token nearest to the target.
  std::size_t best = 0;
  const auto entries = space.entries();
  for (std::size_t i = 1; i < entries.size(); ++i) {
    if (std::abs(entries[i].value - target) < std::abs(entries[best].value - target)) best = i;
  }
  const std::size_t token = entries[best].token_id;
  if (token >= logits.size()) throw InputError("score token id out of range");
  auto probs = stable_softmax(logits);
  loss_value = -std::log(std::max(probs[token], 1e-300));
  probs[token] -= 1.0;
  return probs;
}

ModelGradients zero_gradients(const ToyModel& model) {
  ModelGradients g;
  g.params = ToyModelParams::zeros(model.params.dims());
  if (model.adapters.w1) {
    g.adapters.w1 = model.adapters.w1;
    std::fill(g.adapters.w1->a.data.begin(), g.adapters.w1->a.data.end(), 0.0);
    std::fill(g.adapters.w1->b.data.begin(), g.adapters.w1->b.data.end(), 0.0);
  }
  if (model.adapters.w2) {
    g.adapters.w2 = model.adapters.w2;
    std::fill(g.adapters.w2->a.data.begin(), g.adapters.w2->a.data.end(), 0.0);
    std::fill(g.adapters.w2->b.data.begin(), g.adapters.w2->b.data.end(), 0.0);
  }
  return g;
}

}  // namespace

ToyModelParams ToyModelParams::zeros(const ModelDims& dims) {
  if (dims.vocab_size == 0 || dims.embed_dim == 0 || dims.hidden_dim == 0) {
    throw InputError("model dimensions must be positive");
  }
  ToyModelParams p;
  p.embedding = Matrix(dims.vocab_size, dims.embed_dim);
  p.query.assign(dims.embed_dim, 0.0);
  p.w1 = Matrix(dims.embed_dim, dims.hidden_dim);
  p.b1.assign(dims.hidden_dim, 0.0);
  p.w2 = Matrix(dims.hidden_dim, dims.vocab_size);
  p.b2.assign(dims.vocab_size, 0.0);
  return p;
}

ToyModelParams ToyModelParams::random(const ModelDims& dims, std::uint64_t seed) {
  auto p = zeros(dims);
  Rng rng(seed);
  for (auto& t : p.tensors()) fill_uniform(t.values, rng);
  return p;
}

ModelDims ToyModelParams::dims() const { return {embedding.rows, embedding.cols, w1.cols}; }

void ToyModelParams::validate() const {
  const auto d = dims();
  if (d.vocab_size == 0 || d.embed_dim == 0 || d.hidden_dim == 0) {
    throw InputError("model dimensions must be positive");
  }
  if (query.size() != d.embed_dim || w1.rows != d.embed_dim || b1.size() != d.hidden_dim ||
      w2.rows != d.hidden_dim || w2.cols != d.vocab_size || b2.size() != d.vocab_size ||
      embedding.data.size() != d.vocab_size * d.embed_dim ||
      w1.data.size() != w1.rows * w1.cols || w2.data.size() != w2.rows * w2.cols) {
    throw InputError("inconsistent model parameter shapes");
  }
  check_finite(embedding.data, "embedding");
  check_finite(query, "query");
  check_finite(w1.data, "w1");
  check_finite(b1, "b1");
  check_finite(w2.data, "w2");
  check_finite(b2, "b2");
}

std::vector<TensorRef> ToyModelParams::tensors() {
  return {{"embedding", embedding.data}, {"query", query}, {"w1", w1.data},
          {"b1", b1},                    {"w2", w2.data},  {"b2", b2}};
}

std::size_t ToyModelParams::parameter_count() const {
  return embedding.size() + query.size() + w1.size() + b1.size() + w2.size() + b2.size();
}

LowRankAdapter LowRankAdapter::create(std::size_t m, std::size_t n, std::size_t rank, double alpha,
                                      std::uint64_t seed) {
  LowRankAdapter ad;
  ad.rank = rank;
  ad.alpha = alpha;
  ad.a = Matrix(rank, n);
  ad.b = Matrix(m, rank);
  ad.validate(m, n);
  Rng rng(seed);
  fill_uniform(ad.a.data, rng);
  return ad;
}

void LowRankAdapter::validate(std::size_t m, std::size_t n) const {
  if (rank == 0) throw InputError("adapter rank must be positive");
  if (rank > std::min(m, n)) throw InputError("adapter rank exceeds min(m, n)");
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw InputError("adapter alpha must be positive");
  if (a.rows != rank || a.cols != n || b.rows != m || b.cols != rank) {
    throw InputError("adapter shape mismatch");
  }
}

Matrix apply_adapter(const Matrix& w, const LowRankAdapter& adapter) {
  adapter.validate(w.rows, w.cols);
  Matrix out = w;
  const double s = adapter.scale();
  for (std::size_t i = 0; i < w.rows; ++i) {
    for (std::size_t r = 0; r < adapter.rank; ++r) {
      const double bir = s * adapter.b(i, r);
      if (bir == 0.0) continue;
      const auto arow = adapter.a.row(r);
      auto orow = out.row(i);
      for (std::size_t j = 0; j < w.cols; ++j) orow[j] += bir * arow[j];
    }
  }
  return out;
}

AdapterGradients adapter_gradients(const Matrix& grad_w_eff, const LowRankAdapter& adapter) {
  adapter.validate(grad_w_eff.rows, grad_w_eff.cols);
  const double s = adapter.scale();
  AdapterGradients g{Matrix(adapter.rank, grad_w_eff.cols), Matrix(grad_w_eff.rows, adapter.rank)};
  // dA = s * B^T G, dB = s * G A^T
  for (std::size_t i = 0; i < grad_w_eff.rows; ++i) {
    const auto grow = grad_w_eff.row(i);
    for (std::size_t r = 0; r < adapter.rank; ++r) {
      const double bir = adapter.b(i, r);
      const auto arow = adapter.a.row(r);
      auto garow = g.a.row(r);
      double acc = 0.0;
      for (std::size_t j = 0; j < grad_w_eff.cols; ++j) {
        garow[j] += s * bir * grow[j];
        acc += grow[j] * arow[j];
      }
      g.b(i, r) = s * acc;
    }
  }
  return g;
}

TokenDistribution forward(const ToyModelParams& params, const AdapterSet* adapters,
                          std::span<const std::size_t> tokens) {
  const AdapterSet none;
  const AdapterSet& ad = adapters ? *adapters : none;
  Activations act;
  run_forward(params, effective(params.w1, ad.w1), effective(params.w2, ad.w2), tokens, act);
  return TokenDistribution::from_logits(std::move(act.logits));
}

void TrainingConfig::validate() const {
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw InputError("betas must lie in (0, 1)");
  }
  if (batch_size == 0) throw InputError("batch_size must be positive");
  if (total_steps == 0) throw InputError("total_steps must be positive");
  if (epochs == 0) throw InputError("epochs must be positive");
  if (warmup_steps > total_steps) throw InputError("warmup_steps exceeds total_steps");
  if (!(base_lr >= 0.0) || !(encoder_lr >= 0.0) || !(weight_decay >= 0.0) || !(epsilon > 0.0)) {
    throw InputError("learning rates, weight decay and epsilon must be non-negative");
  }
}

nlohmann::json to_json(const TrainingConfig& cfg) {
  return {{"base_lr", cfg.base_lr},
          {"encoder_lr", cfg.encoder_lr},
          {"weight_decay", cfg.weight_decay},
          {"beta1", cfg.beta1},
          {"beta2", cfg.beta2},
          {"epsilon", cfg.epsilon},
          {"batch_size", cfg.batch_size},
          {"warmup_steps", cfg.warmup_steps},
          {"total_steps", cfg.total_steps},
          {"epochs", cfg.epochs},
          {"seed", cfg.seed},
          {"projection_mode", std::string(to_string(cfg.projection_mode))},
          {"loss", cfg.loss == LossKind::token_focus ? "token_focus" : "cross_entropy"}};
}

TrainingConfig training_config_from_json(const nlohmann::json& j) {
  TrainingConfig cfg;
  if (!j.is_object()) throw InputError("training config must be a JSON object");
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
  };
  get("base_lr", cfg.base_lr);
  get("encoder_lr", cfg.encoder_lr);
  get("weight_decay", cfg.weight_decay);
  get("beta1", cfg.beta1);
  get("beta2", cfg.beta2);
  get("epsilon", cfg.epsilon);
  get("batch_size", cfg.batch_size);
  get("warmup_steps", cfg.warmup_steps);
  get("total_steps", cfg.total_steps);
  get("epochs", cfg.epochs);
  get("seed", cfg.seed);
  if (j.contains("projection_mode")) {
    cfg.projection_mode = parse_projection_mode(j.at("projection_mode").get<std::string>());
  }
  if (j.contains("loss")) {
    const auto loss = j.at("loss").get<std::string>();
    if (loss == "token_focus") {
      cfg.loss = LossKind::token_focus;
    } else if (loss == "cross_entropy") {
      cfg.loss = LossKind::cross_entropy;
    } else {
      throw InputError("unknown loss '" + loss + "'");
    }
  }
  return cfg;
}

double schedule_factor(std::size_t step, const TrainingConfig& cfg) {
  if (step > cfg.total_steps) {
    throw InputError("step " + std::to_string(step) + " outside [0, " +
                     std::to_string(cfg.total_steps) + "]");
  }
  if (step < cfg.warmup_steps) {
    return static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.total_steps == cfg.warmup_steps) return 0.0;
  const double progress = static_cast<double>(step - cfg.warmup_steps) /
                          static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double cosine_lr(std::size_t step, double group_base, const TrainingConfig& cfg) {
  return group_base * schedule_factor(step, cfg);
}

void adamw_step(std::span<const ParamSlot> slots, OptimizerState& state,
                const TrainingConfig& cfg) {
  if (state.first_moment.empty() && state.step == 0) {
    for (const auto& s : slots) {
      state.first_moment.emplace_back(s.value.size(), 0.0);
      state.second_moment.emplace_back(s.value.size(), 0.0);
    }
  }
  if (state.first_moment.size() != slots.size() || state.second_moment.size() != slots.size()) {
    throw InputError("optimizer state does not match parameter slots");
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    if (slots[i].grad.size() != slots[i].value.size() ||
        state.first_moment[i].size() != slots[i].value.size() ||
        state.second_moment[i].size() != slots[i].value.size()) {
      throw InputError("parameter/gradient/state shape mismatch");
    }
    if (!(slots[i].lr >= 0.0)) throw InputError("learning rate must be non-negative");
    check_finite(slots[i].grad, "gradient");
  }
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& s = slots[i];
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (std::size_t k = 0; k < s.value.size(); ++k) {
      const double g = s.grad[k];
      s.value[k] -= s.lr * cfg.weight_decay * s.value[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      s.value[k] -= s.lr * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

void adamw_step(std::span<double> params, std::span<const double> grads, OptimizerState& state,
                double lr, const TrainingConfig& cfg) {
  const ParamSlot slot{params, grads, lr};
  adamw_step(std::span<const ParamSlot>(&slot, 1), state, cfg);
}

double loss_and_gradients(const ToyModel& model, std::span<const TrainingSample> batch,
                          const ScoreSpace& space, ProjectionMode mode, LossKind loss,
                          ModelGradients& grads) {
  if (batch.empty()) throw InputError("empty batch");
  const auto& p = model.params;
  const Matrix w1 = effective(p.w1, model.adapters.w1);
  const Matrix w2 = effective(p.w2, model.adapters.w2);
  grads = zero_gradients(model);
  // Gradients with respect to the effective weights; routed to adapters below.
  ToyModelParams& g = grads.params;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  Activations act;
  for (const auto& sample : batch) {
    run_forward(p, w1, w2, sample.tokens, act);
    double value = 0.0;
    const auto grad_logits = loss_grad_logits(act.logits, space, mode, loss, sample.target, value);
    total += value;
    run_backward(p, w1, w2, sample.tokens, act, grad_logits, scale, g);
  }
  if (model.adapters.w1) {
    auto ag = adapter_gradients(g.w1, *model.adapters.w1);
    grads.adapters.w1->a = std::move(ag.a);
    grads.adapters.w1->b = std::move(ag.b);
  }
  if (model.adapters.w2) {
    auto ag = adapter_gradients(g.w2, *model.adapters.w2);
    grads.adapters.w2->a = std::move(ag.a);
    grads.adapters.w2->b = std::move(ag.b);
  }
  return total * scale;
}

double sample_loss(const ToyModel& model, const TrainingSample& sample, const ScoreSpace& space,
                   ProjectionMode mode, LossKind loss) {
  const auto dist = forward(model.params, &model.adapters, sample.tokens);
  double value = 0.0;
  loss_grad_logits(*dist.logits, space, mode, loss, sample.target, value);
  return value;
}

double mean_loss(const ToyModel& model, std::span<const TrainingSample> samples,
                 const ScoreSpace& space, ProjectionMode mode, LossKind loss) {
  if (samples.empty()) throw InputError("mean_loss of empty sample set");
  double total = 0.0;
  for (const auto& s : samples) total += sample_loss(model, s, space, mode, loss);
  return total / static_cast<double>(samples.size());
}

TrainLog train(ToyModel& model, std::span<const TrainingSample> samples, const ScoreSpace& space,
               const TrainingConfig& cfg) {
  if (samples.empty()) throw InputError("training set is empty");
  model.params.validate();
  if (model.params.dims().vocab_size <= space.max_token_id()) {
    throw InputError("score token id out of range for model vocabulary");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const double y = samples[i].target;
    if (!(y >= space.min_value() && y <= space.max_value())) {
      throw InputError("target " + std::to_string(y) + " of sample " + std::to_string(i) +
                       " outside score range");
    }
  }
  const std::size_t steps_per_epoch = (samples.size() + cfg.batch_size - 1) / std::max<std::size_t>(cfg.batch_size, 1);
  TrainingConfig sched = cfg;
  sched.total_steps = cfg.epochs * steps_per_epoch;
  sched.warmup_steps = std::min(cfg.warmup_steps, sched.total_steps);
  sched.validate();

  const bool frozen_base = !model.adapters.empty();
  TrainLog log;
  log.epoch_losses.push_back(mean_loss(model, samples, space, cfg.projection_mode, cfg.loss));

  Rng rng(cfg.seed);
  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), 0);
  OptimizerState state;
  ModelGradients grads;
  std::vector<TrainingSample> batch;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(samples[order[i]]);
      const double loss =
          loss_and_gradients(model, batch, space, cfg.projection_mode, cfg.loss, grads);

      const double factor = schedule_factor(step, sched);
      const double head_lr = cfg.base_lr * factor;
      const double encoder_lr = cfg.encoder_lr * factor;
      auto& p = model.params;
      auto& g = grads.params;
      std::vector<ParamSlot> slots{
          {p.embedding.data, g.embedding.data, encoder_lr},
          {p.query, g.query, encoder_lr},
          {p.b1, g.b1, head_lr},
          {p.b2, g.b2, head_lr},
      };
      if (!frozen_base) {
        slots.push_back({p.w1.data, g.w1.data, head_lr});
        slots.push_back({p.w2.data, g.w2.data, head_lr});
      }
      if (model.adapters.w1) {
        slots.push_back({model.adapters.w1->a.data, grads.adapters.w1->a.data, head_lr});
        slots.push_back({model.adapters.w1->b.data, grads.adapters.w1->b.data, head_lr});
      }
      if (model.adapters.w2) {
        slots.push_back({model.adapters.w2->a.data, grads.adapters.w2->a.data, head_lr});
        slots.push_back({model.adapters.w2->b.data, grads.adapters.w2->b.data, head_lr});
      }
      adamw_step(slots, state, cfg);
      log.steps.push_back({step, epoch, head_lr, encoder_lr, loss});
      ++step;
    }
    log.epoch_losses.push_back(mean_loss(model, samples, space, cfg.projection_mode, cfg.loss));
  }
  return log;
}

double predict(const ToyModel& model, std::span<const std::size_t> tokens, const ScoreSpace& space,
               ProjectionMode mode) {
  const auto dist = forward(model.params, &model.adapters, tokens);
  return score_from_logits(*dist.logits, space, mode);
}

std::vector<double> predict_batch(const ToyModel& model,
                                  std::span<const std::vector<std::size_t>> inputs,
                                  const ScoreSpace& space, ProjectionMode mode, unsigned threads) {
  std::vector<double> out(inputs.size());
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(inputs.size(), 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < inputs.size(); ++i) out[i] = predict(model, inputs[i], space, mode);
    return out;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  const std::size_t chunk = (inputs.size() + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        const std::size_t end = std::min(inputs.size(), (w + 1) * chunk);
        for (std::size_t i = w * chunk; i < end; ++i) out[i] = predict(model, inputs[i], space, mode);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---- checkpoints ----

namespace {

constexpr char kMagic[8] = {'T', 'F', 'V', 'Q', 'A', 'C', 'K', '1'};

void put_u64(std::ostream& out, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(buf), 8);
}

std::uint64_t get_u64(std::istream& in) {
  unsigned char buf[8];
  if (!in.read(reinterpret_cast<char*>(buf), 8)) throw InputError("truncated checkpoint");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

struct NamedTensor {
  std::string name;
  std::size_t rows;
  std::size_t cols;
  std::span<double> values;
};

std::vector<NamedTensor> checkpoint_tensors(ToyModel& m) {
  auto& p = m.params;
  std::vector<NamedTensor> out{{"embedding", p.embedding.rows, p.embedding.cols, p.embedding.data},
                               {"query", 1, p.query.size(), p.query},
                               {"w1", p.w1.rows, p.w1.cols, p.w1.data},
                               {"b1", 1, p.b1.size(), p.b1},
                               {"w2", p.w2.rows, p.w2.cols, p.w2.data},
                               {"b2", 1, p.b2.size(), p.b2}};
  auto add = [&](const char* prefix, std::optional<LowRankAdapter>& ad) {
    if (!ad) return;
    out.push_back({std::string(prefix) + ".lora_a", ad->a.rows, ad->a.cols, ad->a.data});
    out.push_back({std::string(prefix) + ".lora_b", ad->b.rows, ad->b.cols, ad->b.data});
  };
  add("w1", m.adapters.w1);
  add("w2", m.adapters.w2);
  return out;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Checkpoint& ckpt) {
  ToyModel model = ckpt.model;
  model.params.validate();
  const auto dims = model.params.dims();
  nlohmann::json header;
  header["dims"] = {{"vocab_size", dims.vocab_size},
                    {"embed_dim", dims.embed_dim},
                    {"hidden_dim", dims.hidden_dim}};
  nlohmann::json adapters = nlohmann::json::object();
  if (model.adapters.w1) {
    adapters["w1"] = {{"rank", model.adapters.w1->rank}, {"alpha", model.adapters.w1->alpha}};
  }
  if (model.adapters.w2) {
    adapters["w2"] = {{"rank", model.adapters.w2->rank}, {"alpha", model.adapters.w2->alpha}};
  }
  header["adapters"] = adapters;
  const auto tensors = checkpoint_tensors(model);
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    header["tensors"].push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  }
  header["metadata"] = ckpt.metadata;
  const std::string text = header.dump();
  out.write(kMagic, sizeof kMagic);
  put_u64(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    for (double v : t.values) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw IoError("failed writing checkpoint");
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw InputError("not a checkpoint (bad magic)");
  }
  const std::uint64_t len = get_u64(in);
  if (len > (1u << 30)) throw InputError("checkpoint header too large");
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw InputError("truncated checkpoint header");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("bad checkpoint header: ") + e.what());
  }
  Checkpoint ckpt;
  const auto& d = header.at("dims");
  ckpt.model.params = ToyModelParams::zeros({d.at("vocab_size").get<std::size_t>(),
                                             d.at("embed_dim").get<std::size_t>(),
                                             d.at("hidden_dim").get<std::size_t>()});
  const auto& adapters = header.value("adapters", nlohmann::json::object());
  const auto dims = ckpt.model.params.dims();
  auto make = [&](const char* key, std::size_t m, std::size_t n) -> std::optional<LowRankAdapter> {
    if (!adapters.contains(key)) return std::nullopt;
    LowRankAdapter ad;
    ad.rank = adapters[key].at("rank").get<std::size_t>();
    ad.alpha = adapters[key].at("alpha").get<double>();
    ad.a = Matrix(ad.rank, n);
    ad.b = Matrix(m, ad.rank);
    ad.validate(m, n);
    return ad;
  };
  ckpt.model.adapters.w1 = make("w1", dims.embed_dim, dims.hidden_dim);
  ckpt.model.adapters.w2 = make("w2", dims.hidden_dim, dims.vocab_size);
  const auto tensors = checkpoint_tensors(ckpt.model);
  const auto& listed = header.at("tensors");
  if (listed.size() != tensors.size()) throw InputError("checkpoint tensor list mismatch");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (listed[i].at("name").get<std::string>() != tensors[i].name ||
        listed[i].at("rows").get<std::size_t>() != tensors[i].rows ||
        listed[i].at("cols").get<std::size_t>() != tensors[i].cols) {
      throw InputError("checkpoint tensor '" + tensors[i].name + "' shape mismatch");
    }
    for (double& v : tensors[i].values) v = std::bit_cast<double>(get_u64(in));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("trailing bytes in checkpoint");
  ckpt.metadata = header.value("metadata", nlohmann::json::object());
  ckpt.model.params.validate();
  return ckpt;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_checkpoint(out, ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  return read_checkpoint(in);
}

}  // namespace tokenfocus
