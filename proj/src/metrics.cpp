#include "tokenfocus/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "tokenfocus/error.hpp"

namespace tokenfocus {

MetricReport MetricReport::from(double s, double p, double a) {
  return {s, p, a, composite(s, p, a)};
}

std::vector<double> fractional_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && values[order[j]] == values[order[i]]) ++j;
    // positions i..j-1 hold ranks i+1..j
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = rank;
    i = j;
  }
  return ranks;
}

namespace {

void check_pair(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw InputError("correlation inputs differ in length");
  if (x.size() < 2) throw InputError("correlation needs at least 2 points");
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i]) || !std::isfinite(y[i])) throw NumericError("non-finite correlation input");
  }
}

}  // namespace

double plcc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw InputError("correlation undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double srcc(std::span<const double> x, std::span<const double> y) {
  check_pair(x, y);
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  return plcc(rx, ry);
}

double accuracy(std::span<const double> preds, std::span<const double> labels, double threshold) {
  if (preds.size() != labels.size()) throw InputError("accuracy inputs differ in length");
  if (preds.empty()) throw InputError("accuracy of empty input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if ((preds[i] >= threshold) == (labels[i] >= threshold)) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(preds.size());
}

double element_accuracy(std::span<const std::vector<double>> preds,
                        std::span<const std::vector<double>> labels, double threshold,
                        AccuracyLevel level) {
  if (preds.size() != labels.size()) throw InputError("element accuracy: image count mismatch");
  std::vector<double> flat_p, flat_l;
  double image_sum = 0.0;
  std::size_t images = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i].size() != labels[i].size()) {
      throw InputError("element accuracy: element count mismatch at image " + std::to_string(i));
    }
    if (preds[i].empty()) continue;
    flat_p.insert(flat_p.end(), preds[i].begin(), preds[i].end());
    flat_l.insert(flat_l.end(), labels[i].begin(), labels[i].end());
    image_sum += accuracy(preds[i], labels[i], threshold);
    ++images;
  }
  if (level == AccuracyLevel::instance) return accuracy(flat_p, flat_l, threshold);
  if (images == 0) throw InputError("accuracy of empty input");
  return image_sum / static_cast<double>(images);
}

double composite(double s, double p, double a) {
  if (!std::isfinite(s) || !std::isfinite(p) || !std::isfinite(a)) {
    throw NumericError("non-finite metric");
  }
  return 0.25 * s + 0.25 * p + 0.5 * a;
}

std::string to_json_text(const MetricReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "{\"srcc\": %.6f, \"plcc\": %.6f, \"acc\": %.6f, \"overall\": %.6f}",
                r.srcc, r.plcc, r.acc, r.overall);
  return buf;
}

}  // namespace tokenfocus
