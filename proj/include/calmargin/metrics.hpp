#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "calmargin/tensor.hpp"

namespace calmargin {

inline constexpr std::size_t kDefaultBins = 15;

// Which pixels enter the calibration statistics.
enum class MaskRule {
  kUnion,     // gt foreground OR predicted foreground
  kGtOnly,    // gt foreground
  kAll,       // every pixel
};

std::string to_string(MaskRule rule);
MaskRule parse_mask_rule(const std::string& name);

// Boolean mask, one entry per pixel.
using PixelMask = std::vector<bool>;

PixelMask foreground_mask(const LabelField& pred, const LabelField& gt,
                          MaskRule rule = MaskRule::kUnion);

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  std::size_t count = 0;
  double accuracy = 0.0;    // 0 for empty bins
  double confidence = 0.0;  // 0 for empty bins
};

struct ReliabilityTable {
  std::vector<ReliabilityBin> bins;
  std::size_t total = 0;

  // sum_i |B_i| / N * |A_i - C_i|
  double calibration_error() const;
};

// Bin index for a value in [0, 1]; bins are [e_i, e_{i+1}) with the last one closed at 1.
std::size_t bin_index(double value, std::size_t num_bins);
std::vector<double> bin_edges(std::size_t num_bins);

struct EceResult {
  double value = 0.0;
  ReliabilityTable table;
};

struct CeceResult {
  double value = 0.0;
  std::vector<ReliabilityTable> per_class;
};

EceResult ece(const ProbField& probs, const LabelField& gt, const PixelMask& mask,
              std::size_t num_bins = kDefaultBins);

// Classwise ECE, averaged over the K classes.
CeceResult cece(const ProbField& probs, const LabelField& gt, const PixelMask& mask,
                std::size_t num_bins = kDefaultBins);

// Mean -log softmax(l / T)_y over masked pixels.
double nll(const LogitField& logits, const LabelField& gt, const PixelMask& mask,
           double temperature = 1.0);

struct OverlapCounts {
  std::size_t intersection = 0;
  std::size_t pred = 0;
  std::size_t gt = 0;
};

struct DiceResult {
  std::vector<OverlapCounts> counts;
  std::vector<double> per_class;  // 1 when the class is absent from both
  double mean = 0.0;              // over non-background classes
};

DiceResult dsc(const LabelField& pred, const LabelField& gt);

struct SurfaceDistanceResult {
  std::vector<std::optional<double>> per_class;  // nullopt when undefined
  std::optional<double> mean;                    // over defined non-background classes
};

// Boundary pixels of `label`: in the class with a 4-neighbour outside it (image border counts
// as outside).
std::vector<std::size_t> class_boundary(const LabelField& field, std::size_t label);

SurfaceDistanceResult asd(const LabelField& pred, const LabelField& gt);

struct MetricReport {
  std::string method;
  std::string case_id;
  std::vector<double> dsc_per_class;
  std::vector<std::optional<double>> asd_per_class;
  double dsc_mean = 0.0;
  std::optional<double> asd_mean;
  double ece = 0.0;
  double cece = 0.0;
  double nll = 0.0;
};

struct EvaluationSettings {
  std::size_t num_bins = kDefaultBins;
  MaskRule mask = MaskRule::kUnion;
};

// Full report for one image. Calibration terms use softmax(l / T); predictions are argmax l.
MetricReport evaluate_case(const std::string& method, const std::string& case_id,
                           const LogitField& logits, const LabelField& gt,
                           const EvaluationSettings& settings, double temperature = 1.0);

}  // namespace calmargin
