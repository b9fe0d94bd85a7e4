#include <cmath>
#include <random>

#include "doctest.h"
#include "mpjudge/errors.hpp"
#include "mpjudge/metrics.hpp"
#include "oracles.hpp"

using namespace mpjudge;
using namespace mpjudge::metrics;
using V = std::vector<double>;

TEST_CASE("correlation examples") {
  const V a{0.1, 0.4, 0.2, 0.9};
  CHECK(srcc(a, a) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(srcc(a, V{-0.1, -0.4, -0.2, -0.9}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(plcc(a, V{3.2, 3.8, 3.4, 4.8}) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(plcc(a, V{-0.1, -0.4, -0.2, -0.9}) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(std::abs(plcc(V{0, 1, 2}, V{0, 1, 4}) - 0.9608) < 1e-3);

  // ranks of [1,2,2,4] are [1, 2.5, 2.5, 4]
  CHECK(average_ranks(V{1, 2, 2, 4}) == V{1, 2.5, 2.5, 4});
  const double tied = srcc(V{1, 2, 2, 4}, V{1, 2, 3, 4});
  CHECK(std::abs(tied - oracle::pearson(V{1, 2.5, 2.5, 4}, V{1, 2, 3, 4})) < 1e-12);
  CHECK(std::abs(tied - std::sqrt(0.9)) < 1e-12);

  CHECK_THROWS_AS(srcc(V{1, 1, 1}, V{1, 2, 3}), NumericError);
  CHECK_THROWS_AS(plcc(V{1, 2, 3}, V{5, 5, 5}), NumericError);
  CHECK_THROWS_AS(plcc(V{1}, V{1}), ContractError);
  CHECK_THROWS_AS(plcc(V{1, 2}, V{1, 2, 3}), ContractError);
}

TEST_CASE("error and accuracy examples") {
  CHECK(mae(V{0.3, 0.4}, V{0.3, 0.4}) == 0.0);
  CHECK(mae(V{0.2, 0.8}, V{0.4, 0.4}) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(mae(V{0.8, 0.2}, V{0.4, 0.4}) == mae(V{0.2, 0.8}, V{0.4, 0.4}));

  CHECK(accuracy_threshold(V{0.1, 0.7}, V{0.1, 0.7}) == 1.0);
  CHECK(accuracy_threshold(V{0.6, 0.4}, V{0.4, 0.6}, 0.5) == 0.0);
  CHECK(accuracy_threshold(V{0.7, 0.2, 0.55}, V{0.9, 0.4, 0.45}) == doctest::Approx(2.0 / 3.0));
  CHECK(accuracy_threshold(V{0.5}, V{0.99}) == 1.0);  // tau counts as positive
}

TEST_CASE("precision and recall examples") {
  auto same = precision_recall(std::vector<int>{1, 0, 1}, std::vector<int>{1, 0, 1});
  CHECK(same.precision == 1.0);
  CHECK(same.recall == 1.0);
  auto all_pos = precision_recall(std::vector<int>{1, 1, 1, 1}, std::vector<int>{1, 0, 1, 0});
  CHECK(all_pos.precision == 0.5);
  CHECK(all_pos.recall == 1.0);
  auto mixed = precision_recall(std::vector<int>{1, 0, 1, 0}, std::vector<int>{1, 1, 0, 0});
  CHECK(mixed.precision == 0.5);
  CHECK(mixed.recall == 0.5);
  auto none = precision_recall(std::vector<int>{0, 0}, std::vector<int>{0, 0});
  CHECK_FALSE(none.precision_defined);
  CHECK_FALSE(none.recall_defined);
  CHECK_THROWS_AS(precision_recall(std::vector<int>{2}, std::vector<int>{1}), ContractError);
}

TEST_CASE("metrics agree with brute-force references") {
  std::mt19937_64 rng(51);
  std::uniform_real_distribution<double> u(0, 1);
  std::uniform_int_distribution<int> len(2, 12), grid(0, 5);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = len(rng);
    V p(n), t(n);
    for (int i = 0; i < n; ++i) {
      // coarse values on odd trials exercise ties
      p[i] = trial % 2 ? grid(rng) / 5.0 : u(rng);
      t[i] = trial % 2 ? grid(rng) / 5.0 : u(rng);
    }
    p[0] = 0.0, p[1] = 1.0, t[0] = 1.0, t[1] = 0.0;  // never constant

    CHECK(std::abs(plcc(p, t) - oracle::pearson(p, t)) < 1e-9);
    CHECK(std::abs(srcc(p, t) - oracle::spearman(p, t)) < 1e-9);
    CHECK(average_ranks(p) == oracle::count_ranks(p));

    double abs_sum = 0;
    int agree = 0;
    for (int i = 0; i < n; ++i) abs_sum += std::abs(p[i] - t[i]), agree += (p[i] >= 0.5) == (t[i] >= 0.5);
    CHECK(std::abs(mae(p, t) - abs_sum / n) < 1e-9);
    CHECK(std::abs(accuracy_threshold(p, t) - double(agree) / n) < 1e-9);

    // invariances
    V monotone(n), affine(n);
    for (int i = 0; i < n; ++i) monotone[i] = std::exp(3 * p[i]) - 7, affine[i] = 2.5 * p[i] + 1;
    CHECK(srcc(monotone, t) == doctest::Approx(srcc(p, t)).epsilon(1e-12));
    CHECK(plcc(affine, t) == doctest::Approx(plcc(p, t)).epsilon(1e-9));
    const double s = srcc(p, t), c = plcc(p, t);
    CHECK(s >= -1.0);
    CHECK(s <= 1.0);
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("evaluation report") {
  auto r = evaluate(V{0.7, 0.2, 0.55, 0.1}, V{0.9, 0.4, 0.45, 0.2});
  CHECK(r.n == 4);
  CHECK(r.acc == 0.75);
  CHECK(*r.precision == 0.5);
  CHECK(*r.recall == 1.0);
  auto j = to_json(r);
  CHECK(j["n"] == 4);
  CHECK(j["acc"] == 0.75);
  CHECK(to_table(r).find("SRCC") != std::string::npos);
  auto neg = evaluate(V{0.1, 0.2}, V{0.3, 0.1});
  CHECK_FALSE(neg.precision.has_value());
  CHECK(to_json(neg)["precision"].is_null());
  CHECK(evaluate(V{0.1, 0.2}, V{0.3, 0.1}).srcc == neg.srcc);
}
