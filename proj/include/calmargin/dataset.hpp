#pragma once

#include <cstdint>
#include <vector>

#include "calmargin/tensor.hpp"

namespace calmargin {

// Single-channel image with intensities in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
};

struct SyntheticTask {
  std::uint64_t seed = 0;
  std::size_t height = 32;
  std::size_t width = 32;
  std::size_t num_classes = 4;
  // Base intensity per class; empty means evenly spaced over [0.1, 0.9].
  std::vector<double> intensities;
  double noise_sigma = 0.1;
  // Shape size as a fraction of the shorter image side.
  double min_extent = 0.15;
  double max_extent = 0.35;
  std::size_t shapes_per_class = 1;
  std::size_t train_count = 200;
  std::size_t val_count = 10;
  std::size_t test_count = 10;

  void validate() const;
  std::vector<double> class_intensities() const;
};

struct Split {
  std::vector<Image> images;
  std::vector<LabelField> labels;
};

struct Dataset {
  Split train;
  Split val;
  Split test;
};

Dataset generate_dataset(const SyntheticTask& task);

// Adds i.i.d. N(0, sigma^2) noise and clamps to [0, 1]. sigma = 0 returns the input unchanged.
std::vector<Image> perturb_gaussian(const std::vector<Image>& images, double sigma,
                                    std::uint64_t seed);

// Per-class pixel counts over a split.
std::vector<std::size_t> class_histogram(const Split& split, std::size_t num_classes);

}  // namespace calmargin
