#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace mpjudge::metrics {

// Average ranks starting at 1; ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> v);

// Pearson / Spearman correlation. NumericError when either side is
// constant; ContractError on length mismatch or fewer than two samples.
double plcc(std::span<const double> pred, std::span<const double> target);
double srcc(std::span<const double> pred, std::span<const double> target);

double mae(std::span<const double> pred, std::span<const double> target);

// Fraction of samples where (pred >= tau) == (target >= tau).
double accuracy_threshold(std::span<const double> pred, std::span<const double> target, double tau = 0.5);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  bool precision_defined = false;  // false when nothing was predicted positive
  bool recall_defined = false;     // false when the target has no positives
};

PrecisionRecall precision_recall(std::span<const int> pred_labels, std::span<const int> target_labels);

struct EvalResult {
  double srcc = 0.0;
  double plcc = 0.0;
  double mae = 0.0;
  double acc = 0.0;
  std::optional<double> precision;
  std::optional<double> recall;
  std::size_t n = 0;
  double tau = 0.5;
};

// Precision and recall use the tau binarization of both sides.
EvalResult evaluate(std::span<const double> pred, std::span<const double> target, double tau = 0.5);

nlohmann::json to_json(const EvalResult& r);
std::string to_table(const EvalResult& r);

}  // namespace mpjudge::metrics
