#include "calmargin/ranking.hpp"

#include <algorithm>
#include <numeric>

#include "calmargin/error.hpp"

namespace calmargin {

std::vector<double> average_ranks(const std::vector<double>& scores, Orientation orientation) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  auto better = [&](std::size_t a, std::size_t b) {
    return orientation == Orientation::kHigherBetter ? scores[a] > scores[b]
                                                     : scores[a] < scores[b];
  };
  std::stable_sort(order.begin(), order.end(), better);
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i + 1;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    // positions i..j-1 hold ranks i+1..j
    const double shared = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t t = i; t < j; ++t) ranks[order[t]] = shared;
    i = j;
  }
  return ranks;
}

namespace {

double lookup(const MethodScores& scores, const std::string& metric, const std::string& method) {
  const auto it = scores.find(metric);
  require(it != scores.end(), ErrorCode::kValidation,
          "method '" + method + "' is missing metric '" + metric + "'");
  return it->second;
}

}  // namespace

RankMatrix sum_rank(const std::vector<std::string>& methods,
                    const std::vector<MethodScores>& scores,
                    const std::vector<MetricSpec>& metrics) {
  require(methods.size() >= 2, ErrorCode::kValidation, "ranking needs at least two methods");
  require(scores.size() == methods.size(), ErrorCode::kShapeMismatch,
          "one score set per method is required");
  require(!metrics.empty(), ErrorCode::kValidation, "ranking needs at least one metric");

  const std::size_t n = methods.size();
  RankMatrix out;
  out.methods = methods;
  out.metrics = metrics;
  out.scores.assign(n, std::vector<double>(metrics.size()));
  out.ranks.assign(n, std::vector<double>(metrics.size()));
  out.total.assign(n, 0.0);

  for (std::size_t m = 0; m < metrics.size(); ++m) {
    std::vector<double> column(n);
    for (std::size_t i = 0; i < n; ++i) {
      column[i] = lookup(scores[i], metrics[m].name, methods[i]);
      out.scores[i][m] = column[i];
    }
    const auto ranks = average_ranks(column, metrics[m].orientation);
    for (std::size_t i = 0; i < n; ++i) {
      out.ranks[i][m] = ranks[i];
      out.total[i] += ranks[i];
    }
  }
  out.final_rank = average_ranks(out.total, Orientation::kLowerBetter);
  return out;
}

CaseRankResult mean_case_rank(const std::vector<std::string>& methods,
                              const std::vector<std::vector<MethodScores>>& values,
                              const std::vector<MetricSpec>& metrics) {
  require(methods.size() >= 2, ErrorCode::kValidation, "ranking needs at least two methods");
  require(values.size() == methods.size(), ErrorCode::kShapeMismatch,
          "one case list per method is required");
  require(!metrics.empty(), ErrorCode::kValidation, "ranking needs at least one metric");
  const std::size_t n = methods.size();
  const std::size_t cases = values.front().size();
  require(cases > 0, ErrorCode::kValidation, "no cases to rank");
  for (const auto& per_method : values) {
    require(per_method.size() == cases, ErrorCode::kValidation,
            "every method must be evaluated on every case");
  }

  CaseRankResult out;
  out.methods = methods;
  out.case_ranks.assign(n, std::vector<double>(cases, 0.0));
  out.mean_rank.assign(n, 0.0);
  for (std::size_t c = 0; c < cases; ++c) {
    for (const auto& metric : metrics) {
      std::vector<double> column(n);
      for (std::size_t i = 0; i < n; ++i) column[i] = lookup(values[i][c], metric.name, methods[i]);
      const auto ranks = average_ranks(column, metric.orientation);
      for (std::size_t i = 0; i < n; ++i) out.case_ranks[i][c] += ranks[i];
    }
    for (std::size_t i = 0; i < n; ++i) {
      out.case_ranks[i][c] /= static_cast<double>(metrics.size());
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < cases; ++c) out.mean_rank[i] += out.case_ranks[i][c];
    out.mean_rank[i] /= static_cast<double>(cases);
  }
  out.final_rank = average_ranks(out.mean_rank, Orientation::kLowerBetter);
  return out;
}

}  // namespace calmargin
