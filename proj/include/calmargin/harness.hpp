#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "calmargin/dataset.hpp"
#include "calmargin/losses.hpp"
#include "calmargin/metrics.hpp"
#include "calmargin/ranking.hpp"
#include "calmargin/temperature.hpp"
#include "calmargin/trainer.hpp"

namespace calmargin {

inline constexpr const char* kArtifactVersion = "1.0.0";

struct NamedLoss {
  std::string name;
  LossConfig config;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  SyntheticTask task;
  std::size_t patch_radius = 1;
  std::size_t hidden = 32;
  TrainSchedule schedule;
  std::vector<NamedLoss> losses;
  EvaluationSettings metrics;
  std::size_t background_class = 0;
  bool temperature_scaling = true;
  TemperatureSearch ts_search;
  std::vector<double> noise_grid{0.0, 0.01, 0.02, 0.03, 0.04, 0.05};
  std::vector<std::filesystem::path> rank_inputs;  // empty: this run's eval report
  std::vector<MetricSpec> rank_metrics{{"dsc_mean", Orientation::kHigherBetter},
                                       {"asd_mean", Orientation::kLowerBetter},
                                       {"ece", Orientation::kLowerBetter},
                                       {"cece", Orientation::kLowerBetter}};
  std::filesystem::path output_dir;

  // Canonical JSON with every default filled in; output_dir is left out.
  std::string canonical_json() const;
  // FNV-1a over canonical_json(), as 16 hex digits.
  std::string hash() const;
};

// Strict parse: unknown keys and out-of-range values throw kConfig.
ExperimentConfig parse_config(const std::string& json_text, const std::filesystem::path& base_dir);
ExperimentConfig load_config(const std::filesystem::path& path);

enum class Command { kTrain, kEval, kCalibrate, kPerturb, kRank, kReliability };
std::string to_string(Command command);
Command parse_command(const std::string& name);

struct RunOptions {
  bool force = false;
  std::size_t threads = 1;
};

// Runs one command under config.output_dir and records it in manifest.json.
void run_command(Command command, const ExperimentConfig& config, const RunOptions& options);

// Reads CALMARGIN_THREADS; defaults to 1.
std::size_t threads_from_env();

// Maps an exception to the CLI exit code (1 usage/config, 2 validation, 3 numerical).
int exit_code_for(ErrorCode code);

// Metric reports for a set of cases (one image each); used by the eval-style commands.
std::vector<MetricReport> evaluate_cases(const std::string& method,
                                         const std::vector<LogitField>& logits,
                                         const std::vector<LabelField>& labels,
                                         const EvaluationSettings& settings,
                                         double temperature = 1.0);

// CSV text for reports; '.' decimal, shortest round-trip doubles, "NA" for undefined.
std::string reports_csv(const std::vector<MetricReport>& reports, std::size_t num_classes);
std::string reliability_csv(const ReliabilityTable& table);

// Locale-independent shortest round-trip formatting.
std::string format_double(double value);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const;
};
CsvTable parse_csv(const std::string& text);

// Ranking inputs: rows carrying `method`, `case` and metric columns.
struct RankOutputs {
  RankMatrix sum;
  CaseRankResult per_case;
};
RankOutputs rank_reports(const std::vector<CsvTable>& tables,
                         const std::vector<MetricSpec>& metrics);

}  // namespace calmargin
