#pragma once

// Challenge metrics. SRCC and PLCC apply to total scores and accuracy to
// binarized element scores; the composite is O = 0.25 S + 0.25 P + 0.5 A.

#include <span>
#include <string>
#include <vector>

namespace tokenfocus {

inline constexpr double kDefaultAccuracyThreshold = 0.5;

struct MetricReport {
  double srcc = 0.0;
  double plcc = 0.0;
  double acc = 0.0;
  double overall = 0.0;

  // overall is always derived from the other three.
  static MetricReport from(double srcc, double plcc, double acc);
};

// 1-based ranks; tied values share the mean of the ranks they span.
std::vector<double> fractional_ranks(std::span<const double> values);

// Both throw InputError on length mismatch, length < 2, or zero variance.
double plcc(std::span<const double> x, std::span<const double> y);
double srcc(std::span<const double> x, std::span<const double> y);

// Fraction of positions where (pred >= threshold) == (label >= threshold).
double accuracy(std::span<const double> preds, std::span<const double> labels,
                double threshold = kDefaultAccuracyThreshold);

enum class AccuracyLevel { instance, per_image };

// Element accuracy over images. `instance` pools every element; `per_image`
// averages each image's own accuracy (images without elements are skipped).
double element_accuracy(std::span<const std::vector<double>> preds,
                        std::span<const std::vector<double>> labels,
                        double threshold = kDefaultAccuracyThreshold,
                        AccuracyLevel level = AccuracyLevel::instance);

double composite(double srcc, double plcc, double acc);

// {"srcc": 0.123456, "plcc": ..., "acc": ..., "overall": ...}
std::string to_json_text(const MetricReport& report);

}  // namespace tokenfocus
