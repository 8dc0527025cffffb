#include <cmath>
#include <numeric>

#include "doctest.h"
#include "oracles.hpp"
#include "tokenfocus/error.hpp"
#include "tokenfocus/random.hpp"
#include "tokenfocus/score_core.hpp"

using namespace tokenfocus;

namespace {

ScoreSpace two_token_space() { return ScoreSpace({{2, 0.0}, {4, 1.0}}, TaskKind::element); }

std::vector<double> logits_ln23() { return {0.0, 0.0, std::log(2.0), 0.0, std::log(3.0)}; }

}  // namespace

TEST_CASE("score space validation") {
  CHECK_THROWS_AS(ScoreSpace({{1, 1.0}}, TaskKind::total), InputError);
  CHECK_THROWS_AS(ScoreSpace({{1, 1.0}, {1, 2.0}}, TaskKind::total), InputError);
  CHECK_THROWS_AS(ScoreSpace({{1, 2.0}, {2, 1.0}}, TaskKind::total), InputError);
  CHECK_THROWS_AS(ScoreSpace({{1, 1.0}, {2, 1.0}}, TaskKind::total), InputError);
  const auto s = ScoreSpace::integer_range(10, 1, 5, TaskKind::total);
  CHECK(s.size() == 5);
  CHECK(s.entries()[0].token_id == 10);
  CHECK(s.max_token_id() == 14);
  CHECK(s.index_of_token(12) == 2);
  CHECK_FALSE(s.index_of_token(9).has_value());
}

TEST_CASE("token distribution validation") {
  CHECK_NOTHROW(TokenDistribution::from_probabilities({0.25, 0.75}));
  CHECK_THROWS_AS(TokenDistribution::from_probabilities({0.5, 0.6}), InputError);
  CHECK_THROWS_AS(TokenDistribution::from_probabilities({-0.1, 1.1}), InputError);
  TokenDistribution empty{3, std::nullopt, std::nullopt};
  CHECK_THROWS_AS(empty.validate(), InputError);
}

TEST_CASE("softmax_full examples") {
  const auto uniform = softmax_full(TokenDistribution::from_logits({0, 0, 0, 0}));
  for (double p : *uniform.probabilities) CHECK(p == doctest::Approx(0.25).epsilon(1e-15));

  const auto base = softmax_full(TokenDistribution::from_logits({1, 2, 3}));
  const std::vector<double> expected = {0.09003, 0.24473, 0.66524};
  const auto ref = oracle::softmax({1, 2, 3});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(std::abs((*base.probabilities)[i] - expected[i]) < 5e-6);
    CHECK(std::abs((*base.probabilities)[i] - ref[i]) < 1e-15);
  }
  for (double c : {-700.0, -3.5, 0.0, 42.0, 900.0}) {
    const auto shifted = softmax_full(TokenDistribution::from_logits({c + 1, c + 2, c + 3}));
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(std::abs((*shifted.probabilities)[i] - (*base.probabilities)[i]) < 1e-12);
    }
  }
}

TEST_CASE("stable softmax rejects non-finite input") {
  const std::vector<double> bad = {1.0, std::nan("")};
  CHECK_THROWS_AS(stable_softmax(bad), NumericError);
}

TEST_CASE("project_scores examples") {
  const auto space = two_token_space();
  const auto uniform = TokenDistribution::from_probabilities({0.2, 0.2, 0.2, 0.2, 0.2});
  for (auto mode : {ProjectionMode::literal}) {
    const auto m = project_scores(uniform, space, mode).masses;
    CHECK(m[0] == doctest::Approx(0.5));
    CHECK(m[1] == doctest::Approx(0.5));
  }
  const auto zero_logits = TokenDistribution::from_logits({0, 0, 0, 0, 0});
  CHECK(project_scores(softmax_full(zero_logits), space, ProjectionMode::literal).masses[0] ==
        doctest::Approx(0.5));
  CHECK(project_scores(zero_logits, space, ProjectionMode::logit_renorm).masses[0] == doctest::Approx(0.5));

  const auto z = TokenDistribution::from_logits(logits_ln23());
  const auto renorm = project_scores(z, space, ProjectionMode::logit_renorm).masses;
  CHECK(renorm[0] == doctest::Approx(0.4).epsilon(1e-14));
  CHECK(renorm[1] == doctest::Approx(0.6).epsilon(1e-14));

  const auto full = *softmax_full(z).probabilities;
  const std::vector<double> p = {0.125, 0.125, 0.25, 0.125, 0.375};
  for (std::size_t i = 0; i < 5; ++i) CHECK(full[i] == doctest::Approx(p[i]).epsilon(1e-14));
  const auto literal = project_scores(softmax_full(z), space, ProjectionMode::literal).masses;
  CHECK(std::abs(literal[0] - 0.4688) < 5e-5);
  CHECK(std::abs(literal[1] - 0.5312) < 5e-5);
  const double e0 = std::exp(0.25), e1 = std::exp(0.375);
  CHECK(literal[1] == doctest::Approx(e1 / (e0 + e1)).epsilon(1e-14));
}

TEST_CASE("each mode needs its own field") {
  const auto z = TokenDistribution::from_logits(logits_ln23());
  CHECK_THROWS_AS(project_scores(z, two_token_space(), ProjectionMode::literal), InputError);
  const auto probs = TokenDistribution::from_probabilities({0.2, 0.2, 0.2, 0.2, 0.2});
  CHECK_THROWS_AS(project_scores(probs, two_token_space(), ProjectionMode::logit_renorm), InputError);
}

TEST_CASE("score token outside the vocabulary is rejected") {
  const auto z = TokenDistribution::from_logits({0, 0, 0});
  CHECK_THROWS_AS(project_scores(z, two_token_space(), ProjectionMode::logit_renorm), InputError);
}

TEST_CASE("project_fragment names the missing field") {
  const auto space = two_token_space();
  ScoreTokenFragment only_logits{std::nullopt, std::vector<double>{0.0, 1.0}};
  try {
    project_fragment(only_logits, space, ProjectionMode::literal);
    FAIL("expected an error");
  } catch (const InputError& e) {
    CHECK(std::string(e.what()).find("score_token_probs") != std::string::npos);
  }
  ScoreTokenFragment probs{std::vector<double>{0.25, 0.375}, std::nullopt};
  const auto m = project_fragment(probs, space, ProjectionMode::literal).masses;
  CHECK(std::abs(m[0] - 0.4688) < 5e-5);
}

TEST_CASE("expected_score examples") {
  const ScoreSpace binary({{0, 0.0}, {1, 1.0}}, TaskKind::element);
  CHECK(expected_score({{1.0, 0.0}}, binary) == 0.0);
  CHECK(expected_score({{0.4688, 0.5312}}, binary) == doctest::Approx(0.5312).epsilon(1e-15));
  const auto five = ScoreSpace::integer_range(1, 1, 5, TaskKind::total);
  CHECK(expected_score({{0.2, 0.2, 0.2, 0.2, 0.2}}, five) == doctest::Approx(3.0).epsilon(1e-15));
  CHECK_THROWS_AS(expected_score({{0.5, 0.5, 0.0}}, binary), InputError);
}

TEST_CASE("tokenfocus_loss examples") {
  CHECK(tokenfocus_loss(0.7, 0.7) == 0.0);
  CHECK(tokenfocus_loss(0.5312, 1.0) == doctest::Approx(0.4688 * 0.4688).epsilon(1e-14));
  CHECK(tokenfocus_loss(0.5312, 1.0) == doctest::Approx(0.21977).epsilon(1e-4));
  Rng rng(3);
  for (int i = 0; i < 50; ++i) {
    const double a = rng.uniform(-5, 5), b = rng.uniform(-5, 5);
    CHECK(tokenfocus_loss(a, b) == tokenfocus_loss(b, a));
  }
}

TEST_CASE("gradient vanishes at zero gap") {
  const auto space = two_token_space();
  const auto z = TokenDistribution::from_logits(logits_ln23());
  for (auto mode : {ProjectionMode::literal, ProjectionMode::logit_renorm}) {
    const double pred = score_from_logits(*z.logits, space, mode);
    for (double g : tokenfocus_loss_grad(z, space, mode, pred)) CHECK(g == 0.0);
  }
}

TEST_CASE("logit_renorm gradient ignores non-score logits") {
  const auto g = tokenfocus_loss_grad(TokenDistribution::from_logits(logits_ln23()), two_token_space(),
                                      ProjectionMode::logit_renorm, 1.0);
  CHECK(g[0] == 0.0);
  CHECK(g[1] == 0.0);
  CHECK(g[3] == 0.0);
  CHECK(g[2] != 0.0);
}

TEST_CASE("gradient matches central differences on random configurations") {
  Rng rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t vocab = 4 + rng.below(12);
    std::vector<double> z(vocab);
    for (auto& v : z) v = rng.uniform(-3, 3);
    const auto space = ScoreSpace::integer_range(rng.below(vocab - 3), 1, 3, TaskKind::total);
    std::vector<std::size_t> tokens;
    for (const auto& e : space.entries()) tokens.push_back(e.token_id);
    const auto values = space.values();
    const double target = rng.uniform(1, 3);
    for (bool literal : {true, false}) {
      const auto mode = literal ? ProjectionMode::literal : ProjectionMode::logit_renorm;
      const auto g = tokenfocus_loss_grad(TokenDistribution::from_logits(z), space, mode, target);
      const auto fd = oracle::central_difference(
          [&](const std::vector<double>& x) { return oracle::loss_of_logits(x, tokens, values, literal, target); },
          z, 1e-5);
      for (std::size_t i = 0; i < vocab; ++i) {
        INFO("g=" << g[i] << " fd=" << fd[i]);
        CHECK(oracle::relative_error(g[i], fd[i], oracle::kFdFloor) <= 1e-5);
      }
    }
  }
}

TEST_CASE("projection invariants") {
  Rng rng(5);
  const auto space = ScoreSpace::integer_range(0, 1, 5, TaskKind::total);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> z(8);
    for (auto& v : z) v = rng.uniform(-4, 4);
    const auto lit = project_scores(softmax_full(TokenDistribution::from_logits(z)), space, ProjectionMode::literal).masses;
    const auto ren = project_scores(TokenDistribution::from_logits(z), space, ProjectionMode::logit_renorm).masses;
    CHECK(std::accumulate(lit.begin(), lit.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::accumulate(ren.begin(), ren.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(std::max_element(lit.begin(), lit.end()) - lit.begin() ==
          std::max_element(ren.begin(), ren.end()) - ren.begin());
    const double y = expected_score({lit}, space);
    CHECK(y > 1.0);
    CHECK(y < 5.0);
    auto shifted = z;
    for (auto& v : shifted) v += 17.25;
    const auto lit2 =
        project_scores(softmax_full(TokenDistribution::from_logits(shifted)), space, ProjectionMode::literal).masses;
    for (std::size_t i = 0; i < lit.size(); ++i) CHECK(std::abs(lit[i] - lit2[i]) < 1e-12);
  }
}

TEST_CASE("mode parsing") {
  CHECK(parse_projection_mode("literal") == ProjectionMode::literal);
  CHECK(parse_projection_mode("logit-renorm") == ProjectionMode::logit_renorm);
  CHECK(parse_projection_mode("logit_renorm") == ProjectionMode::logit_renorm);
  CHECK_THROWS_AS(parse_projection_mode("softmax"), InputError);
}
