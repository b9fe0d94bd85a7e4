#include "mpjudge/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "mpjudge/errors.hpp"

namespace mpjudge::metrics {

namespace {

void check_pair(std::span<const double> a, std::span<const double> b, std::size_t min, const char* what) {
  if (a.size() != b.size())
    throw ContractError(std::string(what) + ": length mismatch " + std::to_string(a.size()) + " vs " +
                        std::to_string(b.size()));
  if (a.size() < min)
    throw ContractError(std::string(what) + ": needs at least " + std::to_string(min) + " samples");
}

}  // namespace

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

double plcc(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 2, "plcc");
  const double n = static_cast<double>(pred.size());
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / n;
  const double mt = std::accumulate(target.begin(), target.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp, b = target[i] - mt;
    sxy += a * b;
    sxx += a * a;
    syy += b * b;
  }
  if (sxx == 0.0 || syy == 0.0) throw NumericError("correlation is undefined for constant input");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double srcc(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 2, "srcc");
  const auto rp = average_ranks(pred), rt = average_ranks(target);
  return plcc(rp, rt);
}

double mae(std::span<const double> pred, std::span<const double> target) {
  check_pair(pred, target, 1, "mae");
  double s = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

double accuracy_threshold(std::span<const double> pred, std::span<const double> target, double tau) {
  check_pair(pred, target, 1, "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += (pred[i] >= tau) == (target[i] >= tau);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

PrecisionRecall precision_recall(std::span<const int> pred, std::span<const int> target) {
  if (pred.size() != target.size()) throw ContractError("precision_recall: length mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if ((pred[i] != 0 && pred[i] != 1) || (target[i] != 0 && target[i] != 1))
      throw ContractError("precision_recall: labels must be 0 or 1");
    tp += pred[i] && target[i];
    fp += pred[i] && !target[i];
    fn += !pred[i] && target[i];
  }
  PrecisionRecall r;
  if (tp + fp > 0) r.precision = static_cast<double>(tp) / static_cast<double>(tp + fp), r.precision_defined = true;
  if (tp + fn > 0) r.recall = static_cast<double>(tp) / static_cast<double>(tp + fn), r.recall_defined = true;
  return r;
}

EvalResult evaluate(std::span<const double> pred, std::span<const double> target, double tau) {
  EvalResult r;
  r.n = pred.size();
  r.tau = tau;
  r.srcc = srcc(pred, target);
  r.plcc = plcc(pred, target);
  r.mae = mae(pred, target);
  r.acc = accuracy_threshold(pred, target, tau);
  std::vector<int> lp(pred.size()), lt(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i) lp[i] = pred[i] >= tau, lt[i] = target[i] >= tau;
  const auto pr = precision_recall(lp, lt);
  if (pr.precision_defined) r.precision = pr.precision;
  if (pr.recall_defined) r.recall = pr.recall;
  return r;
}

nlohmann::json to_json(const EvalResult& r) {
  nlohmann::json j;
  j["n"] = r.n;
  j["srcc"] = r.srcc;
  j["plcc"] = r.plcc;
  j["mae"] = r.mae;
  j["acc"] = r.acc;
  j["tau"] = r.tau;
  j["precision"] = r.precision ? nlohmann::json(*r.precision) : nlohmann::json(nullptr);
  j["recall"] = r.recall ? nlohmann::json(*r.recall) : nlohmann::json(nullptr);
  return j;
}

std::string to_table(const EvalResult& r) {
  auto opt = [](const std::optional<double>& v) {
    char buf[32];
    if (!v) return std::string("n/a");
    std::snprintf(buf, sizeof buf, "%.4f", *v);
    return std::string(buf);
  };
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "n          %zu\nSRCC       %.4f\nPLCC       %.4f\nMAE        %.4f\nACC@%.2f   %.4f\n", r.n, r.srcc,
                r.plcc, r.mae, r.tau, r.acc);
  return std::string(buf) + "Precision  " + opt(r.precision) + "\nRecall     " + opt(r.recall) + "\n";
}

}  // namespace mpjudge::metrics
