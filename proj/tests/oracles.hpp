#pragma once

// Independent reference implementations used by the unit and acceptance
// tests. Nothing here calls into the library's numeric code.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <vector>

#include "json.hpp"

namespace oracle {

// Softmax in long double without max subtraction; inputs stay small in tests.
inline std::vector<double> softmax(const std::vector<double>& z) {
  long double total = 0.0L;
  std::vector<long double> e(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(z[i]));
    total += e[i];
  }
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<double>(e[i] / total);
  return out;
}

// Two stages: full softmax, then softmax of the selected probabilities.
inline std::vector<double> project_literal(const std::vector<double>& z,
                                           const std::vector<std::size_t>& tokens) {
  const auto p = softmax(z);
  std::vector<double> picked;
  for (auto t : tokens) picked.push_back(p[t]);
  return softmax(picked);
}

// One stage: softmax of the selected raw logits.
inline std::vector<double> project_renorm(const std::vector<double>& z,
                                          const std::vector<std::size_t>& tokens) {
  std::vector<double> picked;
  for (auto t : tokens) picked.push_back(z[t]);
  return softmax(picked);
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  long double s = 0.0L;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * b[i];
  return static_cast<double>(s);
}

inline double loss_of_logits(const std::vector<double>& z, const std::vector<std::size_t>& tokens,
                             const std::vector<double>& values, bool literal, double target) {
  const auto m = literal ? project_literal(z, tokens) : project_renorm(z, tokens);
  const double gap = dot(m, values) - target;
  return gap * gap;
}

// Central differences of f at x with step h.
inline std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                              std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Denominator floor for gradient checks. Central differences with step 1e-5
// carry roughly 1e-11 of rounding noise, so components far below the floor
// are compared in absolute terms.
inline constexpr double kFdFloor = 1e-5;

// |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Rank table by counting: rank_i = #(x_j < x_i) + (#(x_j == x_i) + 1) / 2.
inline std::vector<double> brute_ranks(const std::vector<double>& x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (double v : x) {
      if (v < x[i]) ++less;
      if (v == x[i]) ++equal;
    }
    r[i] = static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
  }
  return r;
}

// cov(x, y) / (sd(x) sd(y)) straight from the definition.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const long double n = static_cast<long double>(x.size());
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return static_cast<double>(sxy / std::sqrt(sxx * syy));
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(brute_ranks(x), brute_ranks(y));
}

struct Split {
  std::size_t feature = 0;
  double threshold = 0.0;
  double gain = 0.0;
};

inline double sse(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  long double m = 0;
  for (double x : v) m += x;
  m /= static_cast<long double>(v.size());
  long double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return static_cast<double>(s);
}

// Tries every (feature, midpoint) pair and scores it by the drop in summed
// squared error. Gains within `tie` of the best count as equal and resolve to
// the lowest feature, then the lowest threshold.
inline std::optional<Split> exhaustive_split(const std::vector<std::vector<double>>& x,
                                             const std::vector<double>& r, std::size_t min_leaf) {
  const double parent = sse(r);
  const double tie = 1e-12 * std::max(1.0, parent);
  std::vector<Split> candidates;
  for (std::size_t f = 0; f < x.front().size(); ++f) {
    std::vector<double> vals;
    for (const auto& row : x) vals.push_back(row[f]);
    std::sort(vals.begin(), vals.end());
    vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
    for (std::size_t i = 0; i + 1 < vals.size(); ++i) {
      const double t = vals[i] + (vals[i + 1] - vals[i]) / 2.0;
      std::vector<double> left, right;
      for (std::size_t n = 0; n < x.size(); ++n) (x[n][f] <= t ? left : right).push_back(r[n]);
      if (left.size() < min_leaf || right.size() < min_leaf) continue;
      candidates.push_back({f, t, parent - sse(left) - sse(right)});
    }
  }
  double best = 0.0;
  for (const auto& c : candidates) best = std::max(best, c.gain);
  if (best <= tie) return std::nullopt;
  for (const auto& c : candidates) {
    if (c.gain >= best - tie) return c;  // candidates are already in (feature, threshold) order
  }
  return std::nullopt;
}

// Walks a serialized booster: base + shrinkage * sum of leaf values.
inline double walk_model(const nlohmann::json& model, const std::vector<double>& row) {
  double out = model.at("base_prediction").get<double>();
  const double eta = model.at("shrinkage").get<double>();
  for (const auto& tree : model.at("trees")) {
    int node = 0;
    while (tree[node].at("feature").get<int>() >= 0) {
      const auto& n = tree[node];
      node = row[n.at("feature").get<std::size_t>()] <= n.at("threshold").get<double>()
                 ? n.at("left").get<int>()
                 : n.at("right").get<int>();
    }
    out += eta * tree[node].at("value").get<double>();
  }
  return out;
}

}  // namespace oracle
