#include "calmargin/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace calmargin {

std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kValidation: return "validation error";
    case ErrorCode::kShapeMismatch: return "shape mismatch";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kBadVersion: return "bad version";
    case ErrorCode::kDimensionOverflow: return "dimension overflow";
    case ErrorCode::kTruncatedPayload: return "truncated payload";
    case ErrorCode::kDtypeMismatch: return "dtype mismatch";
    case ErrorCode::kIo: return "io error";
    case ErrorCode::kNoForeground: return "no foreground samples";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kNumerical: return "numerical failure";
    case ErrorCode::kAlreadyCompleted: return "already completed";
  }
  return "unknown error";
}

namespace {

void check_grid(std::size_t height, std::size_t width, std::size_t num_classes,
                std::size_t min_classes, std::size_t value_count, std::size_t per_pixel) {
  require(height >= 1 && width >= 1, ErrorCode::kValidation, "field must be at least 1x1");
  require(num_classes >= min_classes, ErrorCode::kValidation,
          "field needs at least " + std::to_string(min_classes) + " classes");
  require(value_count == height * width * per_pixel, ErrorCode::kShapeMismatch,
          "value count does not match field dimensions");
}

}  // namespace

ClassVectorField::ClassVectorField(std::size_t height, std::size_t width,
                                   std::size_t num_classes, std::vector<double> values)
    : height_(height), width_(width), num_classes_(num_classes), values_(std::move(values)) {
  check_grid(height_, width_, num_classes_, 1, values_.size(), num_classes_);
}

LogitField::LogitField(std::size_t height, std::size_t width, std::size_t num_classes,
                       std::vector<double> values)
    : ClassVectorField(height, width, num_classes, std::move(values)) {
  require(num_classes_ >= 2, ErrorCode::kValidation, "logit field needs K >= 2");
  for (double v : values_) {
    require(std::isfinite(v), ErrorCode::kValidation, "logit field contains a non-finite value");
  }
}

ProbField::ProbField(std::size_t height, std::size_t width, std::size_t num_classes,
                     std::vector<double> values)
    : ClassVectorField(height, width, num_classes, std::move(values)) {
  for (std::size_t p = 0; p < num_pixels(); ++p) {
    double sum = 0.0;
    for (double v : pixel(p)) {
      require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorCode::kValidation,
              "probability outside [0, 1]");
      sum += v;
    }
    require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::kValidation,
            "probability vector does not sum to 1");
  }
}

SoftLabelField::SoftLabelField(std::size_t height, std::size_t width, std::size_t num_classes,
                               std::vector<double> values)
    : ClassVectorField(height, width, num_classes, std::move(values)) {
  for (std::size_t p = 0; p < num_pixels(); ++p) {
    double sum = 0.0;
    for (double v : pixel(p)) {
      require(std::isfinite(v) && v >= 0.0, ErrorCode::kValidation, "negative soft label");
      sum += v;
    }
    require(std::abs(sum - 1.0) <= 1e-9, ErrorCode::kValidation,
            "soft label vector does not sum to 1");
  }
}

LabelField::LabelField(std::size_t height, std::size_t width, std::size_t num_classes,
                       std::vector<std::int32_t> values, std::size_t background_class)
    : height_(height),
      width_(width),
      num_classes_(num_classes),
      background_(background_class),
      values_(std::move(values)) {
  check_grid(height_, width_, num_classes_, 1, values_.size(), 1);
  require(background_ < num_classes_, ErrorCode::kValidation, "background class out of range");
  for (std::int32_t v : values_) {
    require(v >= 0 && static_cast<std::size_t>(v) < num_classes_, ErrorCode::kValidation,
            "label value out of range");
  }
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[best]) best = k;
  }
  return best;
}

double log_sum_exp(std::span<const double> values) {
  const double top = values[argmax(values)];
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - top);
  return top + std::log(sum);
}

void log_softmax(std::span<const double> logits, std::span<double> out) {
  const double lse = log_sum_exp(logits);
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = logits[k] - lse;
}

void softmax(std::span<const double> logits, std::span<double> out) {
  const double top = logits[argmax(logits)];
  double sum = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    out[k] = std::exp(logits[k] - top);
    sum += out[k];
  }
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] /= sum;
}

ProbField softmax(const LogitField& logits) {
  const std::size_t k = logits.num_classes();
  std::vector<double> probs(logits.values().size());
  for (std::size_t p = 0; p < logits.num_pixels(); ++p) {
    softmax(logits.pixel(p), std::span<double>(probs.data() + p * k, k));
  }
  return ProbField(logits.height(), logits.width(), k, std::move(probs));
}

std::vector<double> logit_distances(std::span<const double> logits) {
  const double top = logits[argmax(logits)];
  std::vector<double> d(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) d[k] = top - logits[k];
  return d;
}

std::vector<double> logit_distances(const LogitField& logits) {
  std::vector<double> out;
  out.reserve(logits.values().size());
  for (std::size_t p = 0; p < logits.num_pixels(); ++p) {
    const auto d = logit_distances(logits.pixel(p));
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

LabelField predict(const ClassVectorField& field, std::size_t background_class) {
  std::vector<std::int32_t> labels(field.num_pixels());
  for (std::size_t p = 0; p < field.num_pixels(); ++p) {
    labels[p] = static_cast<std::int32_t>(argmax(field.pixel(p)));
  }
  return LabelField(field.height(), field.width(), field.num_classes(), std::move(labels),
                    background_class);
}

}  // namespace calmargin
