#pragma once

// Slow, literal reference computations shared by the unit and acceptance
// tests. Each one follows the textbook definition with no shortcuts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

// Drops the first index holding the maximum and a different index holding
// the minimum, then averages the rest.
inline double trimmed_mean(const std::vector<double>& v) {
  std::size_t hi = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[hi]) hi = i;
  std::size_t lo = hi == 0 ? 1 : 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (i != hi && v[i] < v[lo]) lo = i;
  double sum = 0;
  int n = 0;
  for (std::size_t i = 0; i < v.size(); ++i)
    if (i != hi && i != lo) sum += v[i], ++n;
  return sum / n;
}

// Population standard deviation via the mean of pairwise squared gaps:
// var = (1 / (2 n^2)) sum_{j,k} (s_j - s_k)^2
inline double population_stddev(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double s = 0;
  for (double a : v)
    for (double b : v) s += (a - b) * (a - b);
  return std::sqrt(s / (2 * n * n));
}

inline double pair_sum(const std::vector<double>& v) {
  double s = 0;
  for (std::size_t j = 0; j < v.size(); ++j)
    for (std::size_t k = j + 1; k < v.size(); ++k) s += (v[j] - v[k]) * (v[j] - v[k]);
  return s;
}

// Interval alpha with explicit j<k loops.
inline double krippendorff_alpha(const std::vector<std::vector<double>>& items) {
  double num = 0, pairs = 0;
  std::vector<double> all;
  for (const auto& it : items) {
    num += pair_sum(it);
    pairs += static_cast<double>(it.size() * (it.size() - 1)) / 2;
    all.insert(all.end(), it.begin(), it.end());
  }
  const double d_o = num / pairs;
  const double n = static_cast<double>(all.size());
  const double d_e = pair_sum(all) / (n * (n - 1) / 2);
  return 1 - d_o / d_e;
}

// Rank by counting: 1 + (# strictly smaller) + (# equal others) / 2.
inline std::vector<double> count_ranks(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) ++less;
      if (j != i && v[j] == v[i]) ++equal;
    }
    r[i] = 1 + less + equal / 2;
  }
  return r;
}

// Raw-sum Pearson formula.
inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i], sy += y[i];
    sxx += x[i] * x[i], syy += y[i] * y[i], sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson(count_ranks(x), count_ranks(y));
}

}  // namespace oracle
