#pragma once

#include <map>
#include <string>
#include <vector>

namespace calmargin {

enum class Orientation { kHigherBetter, kLowerBetter };

struct MetricSpec {
  std::string name;
  Orientation orientation = Orientation::kLowerBetter;
};

// Competition ranks (1 = best) with tied entries sharing their average rank.
std::vector<double> average_ranks(const std::vector<double>& scores, Orientation orientation);

struct RankMatrix {
  std::vector<std::string> methods;
  std::vector<MetricSpec> metrics;
  std::vector<std::vector<double>> scores;  // [method][metric]
  std::vector<std::vector<double>> ranks;   // [method][metric]
  std::vector<double> total;                // R_T = sum over metrics
  std::vector<double> final_rank;           // rank of R_T, ascending
};

// One mean score per metric for every method.
using MethodScores = std::map<std::string, double>;

RankMatrix sum_rank(const std::vector<std::string>& methods,
                    const std::vector<MethodScores>& scores,
                    const std::vector<MetricSpec>& metrics);

struct CaseRankResult {
  std::vector<std::string> methods;
  std::vector<std::vector<double>> case_ranks;  // [method][case]
  std::vector<double> mean_rank;                // per method
  std::vector<double> final_rank;
};

// values[method][case] holds that case's metric scores.
CaseRankResult mean_case_rank(const std::vector<std::string>& methods,
                              const std::vector<std::vector<MethodScores>>& values,
                              const std::vector<MetricSpec>& metrics);

}  // namespace calmargin
