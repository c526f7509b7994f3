#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "calmargin/error.hpp"
#include "calmargin/random.hpp"
#include "calmargin/ranking.hpp"

using namespace calmargin;

namespace {

const std::vector<std::string> kMethods{"CE", "CE+DICE", "FL", "ECP", "LS", "SVLS", "MbLS"};

// Brute-force average rank: 1 + (#strictly better) + 0.5 * (#tied others).
std::vector<double> oracle_ranks(const std::vector<double>& s, Orientation o) {
  std::vector<double> r(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    double better = 0.0, tied = 0.0;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (j == i) continue;
      if (s[j] == s[i]) tied += 1.0;
      else if (o == Orientation::kLowerBetter ? s[j] < s[i] : s[j] > s[i]) better += 1.0;
    }
    r[i] = 1.0 + better + 0.5 * tied;
  }
  return r;
}

template <class F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kValidation;
}

}  // namespace

TEST_CASE("average ranks: ordering and ties") {
  CHECK(average_ranks({0.3, 0.1, 0.2}, Orientation::kLowerBetter) == std::vector<double>{3, 1, 2});
  CHECK(average_ranks({0.3, 0.1, 0.2}, Orientation::kHigherBetter) == std::vector<double>{1, 3, 2});
  CHECK(average_ranks({1.0, 2.0, 2.0, 3.0}, Orientation::kLowerBetter) ==
        std::vector<double>{1, 2.5, 2.5, 4});
  for (std::size_t n = 1; n <= 9; ++n) {
    const auto r = average_ranks(std::vector<double>(n, 0.5), Orientation::kLowerBetter);
    for (double v : r) CHECK(v == doctest::Approx((n + 1) / 2.0));
  }
}

TEST_CASE("average ranks match brute force and always sum to n(n+1)/2") {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 1 + rng.below(10);
    std::vector<double> s(n);
    // few distinct values so ties are common
    for (double& v : s) v = static_cast<double>(rng.below(4));
    for (auto o : {Orientation::kLowerBetter, Orientation::kHigherBetter}) {
      const auto r = average_ranks(s, o);
      CHECK(r == oracle_ranks(s, o));
      CHECK(std::accumulate(r.begin(), r.end(), 0.0) == doctest::Approx(n * (n + 1) / 2.0));
    }
  }
}

TEST_CASE("sum rank over a 3x2 table enumerated by hand") {
  // DSC higher is better, ECE lower is better.
  const std::vector<MetricSpec> metrics{{"dsc", Orientation::kHigherBetter},
                                        {"ece", Orientation::kLowerBetter}};
  const auto r = sum_rank({"a", "b", "c"},
                          {{{"dsc", 0.9}, {"ece", 0.20}},
                           {{"dsc", 0.8}, {"ece", 0.10}},
                           {{"dsc", 0.7}, {"ece", 0.30}}},
                          metrics);
  CHECK(r.ranks[0] == std::vector<double>{1, 2});
  CHECK(r.ranks[1] == std::vector<double>{2, 1});
  CHECK(r.ranks[2] == std::vector<double>{3, 3});
  CHECK(r.total == std::vector<double>{3, 3, 6});
  CHECK(r.final_rank == std::vector<double>{1.5, 1.5, 3});
}

TEST_CASE("published ECE rows rank the margin loss first") {
  const std::vector<MetricSpec> ece{{"ece", Orientation::kLowerBetter}};
  auto rank_row = [&](const std::vector<double>& row) {
    std::vector<MethodScores> s;
    for (double v : row) s.push_back({{"ece", v}});
    return sum_rank(kMethods, s, ece);
  };

  const auto acdc = rank_row({0.079, 0.137, 0.113, 0.109, 0.081, 0.176, 0.061});
  std::vector<double> got;
  for (const auto& row : acdc.ranks) got.push_back(row[0]);
  CHECK(got == std::vector<double>{2, 6, 5, 4, 3, 7, 1});

  const auto promise = rank_row({0.411, 0.430, 0.247, 0.306, 0.280, 0.344, 0.232});
  CHECK(promise.final_rank[6] == 1.0);
  CHECK(promise.final_rank[1] == 7.0);
}

TEST_CASE("ranks are invariant under strictly monotone transforms") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<double> s(6);
    for (double& v : s) v = rng.uniform(0.01, 1.0);
    std::vector<double> logged = s, cubed = s, negated = s;
    for (double& v : logged) v = std::log(v);
    for (double& v : cubed) v = v * v * v + 2.0;
    for (double& v : negated) v = -v;
    const auto base = average_ranks(s, Orientation::kLowerBetter);
    CHECK(average_ranks(logged, Orientation::kLowerBetter) == base);
    CHECK(average_ranks(cubed, Orientation::kLowerBetter) == base);
    CHECK(average_ranks(negated, Orientation::kHigherBetter) == base);
  }
}

TEST_CASE("mean case rank") {
  const std::vector<MetricSpec> metrics{{"dsc", Orientation::kHigherBetter},
                                        {"ece", Orientation::kLowerBetter}};

  SUBCASE("identical methods tie at the middle rank") {
    std::vector<MethodScores> cases{{{"dsc", 0.8}, {"ece", 0.1}}, {{"dsc", 0.6}, {"ece", 0.2}}};
    const auto r = mean_case_rank({"a", "b", "c"}, {cases, cases, cases}, metrics);
    for (double v : r.mean_rank) CHECK(v == 2.0);
    for (double v : r.final_rank) CHECK(v == 2.0);
  }

  SUBCASE("hand-computed fixture") {
    // case 0: a wins both; case 1: b wins dsc, a wins ece.
    const auto r = mean_case_rank(
        {"a", "b"},
        {{{{"dsc", 0.9}, {"ece", 0.1}}, {{"dsc", 0.5}, {"ece", 0.1}}},
         {{{"dsc", 0.8}, {"ece", 0.3}}, {{"dsc", 0.7}, {"ece", 0.4}}}},
        metrics);
    CHECK(r.case_ranks[0] == std::vector<double>{1.0, 1.5});
    CHECK(r.case_ranks[1] == std::vector<double>{2.0, 1.5});
    CHECK(r.mean_rank[0] == doctest::Approx(1.25));
    CHECK(r.mean_rank[1] == doctest::Approx(1.75));
    CHECK(r.final_rank == std::vector<double>{1, 2});
  }

  SUBCASE("swapping two methods swaps their ranks") {
    Rng rng(9);
    std::vector<std::vector<MethodScores>> v(4, std::vector<MethodScores>(5));
    for (auto& m : v)
      for (auto& c : m) c = {{"dsc", rng.uniform()}, {"ece", rng.uniform()}};
    const auto r = mean_case_rank({"a", "b", "c", "d"}, v, metrics);
    std::swap(v[0], v[2]);
    const auto s = mean_case_rank({"c", "b", "a", "d"}, v, metrics);
    CHECK(s.mean_rank[0] == doctest::Approx(r.mean_rank[2]));
    CHECK(s.mean_rank[2] == doctest::Approx(r.mean_rank[0]));
    CHECK(s.mean_rank[1] == doctest::Approx(r.mean_rank[1]));
  }

  SUBCASE("errors") {
    const MethodScores ok{{"dsc", 0.5}, {"ece", 0.1}};
    CHECK(code_of([&] { mean_case_rank({"a", "b"}, {{ok, ok}, {ok}}, metrics); }) ==
          ErrorCode::kValidation);
    CHECK(code_of([&] { mean_case_rank({"a", "b"}, {{ok}, {{{"dsc", 0.5}}}}, metrics); }) ==
          ErrorCode::kValidation);
    CHECK(code_of([&] { mean_case_rank({"a"}, {{ok}}, metrics); }) == ErrorCode::kValidation);
    CHECK(code_of([&] { sum_rank({"a"}, {ok}, metrics); }) == ErrorCode::kValidation);
    CHECK(code_of([&] { sum_rank({"a", "b"}, {ok, {{"ece", 0.2}}}, metrics); }) ==
          ErrorCode::kValidation);
  }
}
