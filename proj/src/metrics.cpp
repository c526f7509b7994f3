#include "calmargin/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace calmargin {

std::string to_string(MaskRule rule) {
  switch (rule) {
    case MaskRule::kUnion: return "union";
    case MaskRule::kGtOnly: return "gt";
    case MaskRule::kAll: return "all";
  }
  return "?";
}

MaskRule parse_mask_rule(const std::string& name) {
  if (name == "union") return MaskRule::kUnion;
  if (name == "gt") return MaskRule::kGtOnly;
  if (name == "all") return MaskRule::kAll;
  fail(ErrorCode::kConfig, "unknown mask rule '" + name + "'");
}

PixelMask foreground_mask(const LabelField& pred, const LabelField& gt, MaskRule rule) {
  require(pred.height() == gt.height() && pred.width() == gt.width(), ErrorCode::kShapeMismatch,
          "prediction and ground truth have different shapes");
  const std::size_t bg = gt.background_class();
  PixelMask mask(gt.num_pixels());
  for (std::size_t p = 0; p < gt.num_pixels(); ++p) {
    switch (rule) {
      case MaskRule::kUnion: mask[p] = gt.at(p) != bg || pred.at(p) != bg; break;
      case MaskRule::kGtOnly: mask[p] = gt.at(p) != bg; break;
      case MaskRule::kAll: mask[p] = true; break;
    }
  }
  return mask;
}

std::vector<double> bin_edges(std::size_t num_bins) {
  std::vector<double> edges(num_bins + 1);
  for (std::size_t i = 0; i <= num_bins; ++i) {
    edges[i] = static_cast<double>(i) / static_cast<double>(num_bins);
  }
  return edges;
}

std::size_t bin_index(double value, std::size_t num_bins) {
  const auto m = static_cast<double>(num_bins);
  auto b = static_cast<std::size_t>(std::clamp(std::floor(value * m), 0.0, m - 1.0));
  // Settle against the stored edges so the result agrees with edge comparisons.
  while (b > 0 && value < static_cast<double>(b) / m) --b;
  while (b + 1 < num_bins && value >= static_cast<double>(b + 1) / m) ++b;
  return b;
}

double ReliabilityTable::calibration_error() const {
  if (total == 0) return 0.0;
  double error = 0.0;
  for (const auto& bin : bins) {
    if (bin.count == 0) continue;
    error += static_cast<double>(bin.count) / static_cast<double>(total) *
             std::abs(bin.accuracy - bin.confidence);
  }
  return error;
}

namespace {

void check_inputs(const ProbField& probs, const LabelField& gt, const PixelMask& mask,
                  std::size_t num_bins) {
  require(num_bins >= 1, ErrorCode::kValidation, "number of bins must be >= 1");
  require(gt.same_grid(probs), ErrorCode::kShapeMismatch,
          "probabilities and labels have different shapes");
  require(mask.size() == gt.num_pixels(), ErrorCode::kShapeMismatch, "mask size mismatch");
  require(std::find(mask.begin(), mask.end(), true) != mask.end(), ErrorCode::kNoForeground,
          "no foreground samples");
}

// Accumulates (value, hit) pairs into a table; sums are taken in pixel order.
class TableBuilder {
 public:
  explicit TableBuilder(std::size_t num_bins)
      : num_bins_(num_bins), hits_(num_bins, 0.0), mass_(num_bins, 0.0), counts_(num_bins, 0) {}

  void add(double value, bool hit) {
    const std::size_t b = bin_index(value, num_bins_);
    ++counts_[b];
    mass_[b] += value;
    if (hit) hits_[b] += 1.0;
  }

  ReliabilityTable finish() const {
    ReliabilityTable table;
    const auto edges = bin_edges(num_bins_);
    for (std::size_t b = 0; b < num_bins_; ++b) {
      ReliabilityBin bin{edges[b], edges[b + 1], counts_[b], 0.0, 0.0};
      if (counts_[b] > 0) {
        bin.accuracy = hits_[b] / static_cast<double>(counts_[b]);
        bin.confidence = mass_[b] / static_cast<double>(counts_[b]);
      }
      table.total += counts_[b];
      table.bins.push_back(bin);
    }
    return table;
  }

 private:
  std::size_t num_bins_;
  std::vector<double> hits_;
  std::vector<double> mass_;
  std::vector<std::size_t> counts_;
};

}  // namespace

EceResult ece(const ProbField& probs, const LabelField& gt, const PixelMask& mask,
              std::size_t num_bins) {
  check_inputs(probs, gt, mask, num_bins);
  TableBuilder builder(num_bins);
  for (std::size_t p = 0; p < gt.num_pixels(); ++p) {
    if (!mask[p]) continue;
    const auto s = probs.pixel(p);
    const std::size_t pred = argmax(s);
    builder.add(s[pred], pred == gt.at(p));
  }
  EceResult out{0.0, builder.finish()};
  out.value = out.table.calibration_error();
  return out;
}

CeceResult cece(const ProbField& probs, const LabelField& gt, const PixelMask& mask,
                std::size_t num_bins) {
  check_inputs(probs, gt, mask, num_bins);
  const std::size_t k = probs.num_classes();
  CeceResult out;
  for (std::size_t c = 0; c < k; ++c) {
    TableBuilder builder(num_bins);
    for (std::size_t p = 0; p < gt.num_pixels(); ++p) {
      if (mask[p]) builder.add(probs.pixel(p)[c], gt.at(p) == c);
    }
    out.per_class.push_back(builder.finish());
    out.value += out.per_class.back().calibration_error();
  }
  out.value /= static_cast<double>(k);
  return out;
}

double nll(const LogitField& logits, const LabelField& gt, const PixelMask& mask,
           double temperature) {
  require(temperature > 0.0, ErrorCode::kValidation, "temperature must be > 0");
  require(gt.same_grid(logits), ErrorCode::kShapeMismatch,
          "logits and labels have different shapes");
  require(mask.size() == gt.num_pixels(), ErrorCode::kShapeMismatch, "mask size mismatch");
  const std::size_t k = logits.num_classes();
  std::vector<double> scaled(k), log_s(k);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < gt.num_pixels(); ++p) {
    if (!mask[p]) continue;
    const auto l = logits.pixel(p);
    for (std::size_t c = 0; c < k; ++c) scaled[c] = l[c] / temperature;
    log_softmax(scaled, log_s);
    total -= log_s[gt.at(p)];
    ++count;
  }
  require(count > 0, ErrorCode::kNoForeground, "no foreground samples");
  return total / static_cast<double>(count);
}

DiceResult dsc(const LabelField& pred, const LabelField& gt) {
  require(pred.same_grid(gt), ErrorCode::kShapeMismatch,
          "prediction and ground truth have different shapes");
  const std::size_t k = gt.num_classes();
  DiceResult out;
  out.counts.resize(k);
  for (std::size_t p = 0; p < gt.num_pixels(); ++p) {
    const std::size_t a = pred.at(p);
    const std::size_t b = gt.at(p);
    ++out.counts[a].pred;
    ++out.counts[b].gt;
    if (a == b) ++out.counts[a].intersection;
  }
  std::size_t included = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const auto& n = out.counts[c];
    const std::size_t denom = n.pred + n.gt;
    const double value = denom == 0 ? 1.0
                                    : static_cast<double>(2 * n.intersection) /
                                          static_cast<double>(denom);
    out.per_class.push_back(value);
    if (c != gt.background_class()) {
      out.mean += value;
      ++included;
    }
  }
  if (included > 0) out.mean /= static_cast<double>(included);
  return out;
}

std::vector<std::size_t> class_boundary(const LabelField& field, std::size_t label) {
  const std::size_t h = field.height();
  const std::size_t w = field.width();
  std::vector<std::size_t> boundary;
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      if (field.at(r, c) != label) continue;
      const bool interior = r > 0 && r + 1 < h && c > 0 && c + 1 < w &&
                            field.at(r - 1, c) == label && field.at(r + 1, c) == label &&
                            field.at(r, c - 1) == label && field.at(r, c + 1) == label;
      if (!interior) boundary.push_back(r * w + c);
    }
  }
  return boundary;
}

namespace {

double mean_nearest_distance(const std::vector<std::size_t>& from,
                             const std::vector<std::size_t>& to, std::size_t width) {
  double total = 0.0;
  for (std::size_t a : from) {
    const auto ar = static_cast<double>(a / width);
    const auto ac = static_cast<double>(a % width);
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t b : to) {
      const double dr = ar - static_cast<double>(b / width);
      const double dc = ac - static_cast<double>(b % width);
      best = std::min(best, dr * dr + dc * dc);
    }
    total += std::sqrt(best);
  }
  return total / static_cast<double>(from.size());
}

}  // namespace

SurfaceDistanceResult asd(const LabelField& pred, const LabelField& gt) {
  require(pred.same_grid(gt), ErrorCode::kShapeMismatch,
          "prediction and ground truth have different shapes");
  SurfaceDistanceResult out;
  double sum = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < gt.num_classes(); ++c) {
    const auto pb = class_boundary(pred, c);
    const auto gb = class_boundary(gt, c);
    if (pb.empty() || gb.empty()) {
      out.per_class.emplace_back(std::nullopt);
      continue;
    }
    const double value = 0.5 * (mean_nearest_distance(pb, gb, gt.width()) +
                                mean_nearest_distance(gb, pb, gt.width()));
    out.per_class.emplace_back(value);
    if (c != gt.background_class()) {
      sum += value;
      ++defined;
    }
  }
  if (defined > 0) out.mean = sum / static_cast<double>(defined);
  return out;
}

MetricReport evaluate_case(const std::string& method, const std::string& case_id,
                           const LogitField& logits, const LabelField& gt,
                           const EvaluationSettings& settings, double temperature) {
  require(temperature > 0.0, ErrorCode::kValidation, "temperature must be > 0");
  const LabelField pred = predict(logits, gt.background_class());
  const PixelMask mask = foreground_mask(pred, gt, settings.mask);

  std::vector<double> scaled = logits.values();
  for (double& v : scaled) v /= temperature;
  const ProbField probs =
      softmax(LogitField(logits.height(), logits.width(), logits.num_classes(), std::move(scaled)));

  MetricReport report;
  report.method = method;
  report.case_id = case_id;
  const auto dice = dsc(pred, gt);
  report.dsc_per_class = dice.per_class;
  report.dsc_mean = dice.mean;
  const auto surface = asd(pred, gt);
  report.asd_per_class = surface.per_class;
  report.asd_mean = surface.mean;
  report.ece = ece(probs, gt, mask, settings.num_bins).value;
  report.cece = cece(probs, gt, mask, settings.num_bins).value;
  report.nll = nll(logits, gt, mask, temperature);
  return report;
}

}  // namespace calmargin
