#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "calmargin/error.hpp"

namespace calmargin {

// Pixel-major, class-innermost storage shared by the floating-point fields.
class ClassVectorField {
 public:
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t num_pixels() const noexcept { return height_ * width_; }

  std::span<const double> pixel(std::size_t index) const {
    return {values_.data() + index * num_classes_, num_classes_};
  }
  std::span<const double> pixel(std::size_t row, std::size_t col) const {
    return pixel(row * width_ + col);
  }
  const std::vector<double>& values() const noexcept { return values_; }

  bool same_shape(const ClassVectorField& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ &&
           num_classes_ == other.num_classes_;
  }

 protected:
  ClassVectorField() = default;
  ClassVectorField(std::size_t height, std::size_t width, std::size_t num_classes,
                   std::vector<double> values);

  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<double> values_;
};

// Raw per-pixel network outputs. All entries finite, K >= 2.
class LogitField : public ClassVectorField {
 public:
  LogitField() = default;
  LogitField(std::size_t height, std::size_t width, std::size_t num_classes,
             std::vector<double> values);
};

// Per-pixel categorical distributions (softmax outputs).
class ProbField : public ClassVectorField {
 public:
  ProbField() = default;
  ProbField(std::size_t height, std::size_t width, std::size_t num_classes,
            std::vector<double> values);
};

// Smoothed targets: non-negative, each pixel sums to 1.
class SoftLabelField : public ClassVectorField {
 public:
  SoftLabelField() = default;
  SoftLabelField(std::size_t height, std::size_t width, std::size_t num_classes,
                 std::vector<double> values);
};

class LabelField {
 public:
  LabelField() = default;
  LabelField(std::size_t height, std::size_t width, std::size_t num_classes,
             std::vector<std::int32_t> values, std::size_t background_class = 0);

  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t num_classes() const noexcept { return num_classes_; }
  std::size_t num_pixels() const noexcept { return height_ * width_; }
  std::size_t background_class() const noexcept { return background_; }

  std::size_t at(std::size_t index) const { return static_cast<std::size_t>(values_[index]); }
  std::size_t at(std::size_t row, std::size_t col) const { return at(row * width_ + col); }
  const std::vector<std::int32_t>& values() const noexcept { return values_; }

  bool same_grid(const ClassVectorField& field) const noexcept {
    return height_ == field.height() && width_ == field.width() &&
           num_classes_ == field.num_classes();
  }
  bool same_grid(const LabelField& other) const noexcept {
    return height_ == other.height_ && width_ == other.width_ &&
           num_classes_ == other.num_classes_;
  }

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t num_classes_ = 0;
  std::size_t background_ = 0;
  std::vector<std::int32_t> values_;
};

// Lowest index wins ties.
std::size_t argmax(std::span<const double> values);

// log sum_k exp(values_k), computed with the max subtracted.
double log_sum_exp(std::span<const double> values);

// Writes log-softmax of `logits` into `out` (same length).
void log_softmax(std::span<const double> logits, std::span<double> out);

// Writes softmax of `logits` into `out` (same length).
void softmax(std::span<const double> logits, std::span<double> out);

ProbField softmax(const LogitField& logits);

// d_k = max_j l_j - l_k for one pixel.
std::vector<double> logit_distances(std::span<const double> logits);

// Per-pixel distance vectors, same layout as the logits.
std::vector<double> logit_distances(const LogitField& logits);

// Per-pixel argmax of any class-vector field.
LabelField predict(const ClassVectorField& field, std::size_t background_class = 0);

}  // namespace calmargin
