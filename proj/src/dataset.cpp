#include "calmargin/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "calmargin/random.hpp"

namespace calmargin {

namespace {

constexpr int kMaxAttempts = 64;

void paint_shape(Rng& rng, const SyntheticTask& task, std::vector<std::int32_t>& labels,
                 std::int32_t label) {
  const auto h = static_cast<double>(task.height);
  const auto w = static_cast<double>(task.width);
  const double side = std::min(h, w);
  const double extent = rng.uniform(task.min_extent, task.max_extent) * side;
  const double cy = rng.uniform(0.0, h);
  const double cx = rng.uniform(0.0, w);
  const bool circle = rng.uniform() < 0.5;
  const double aspect = rng.uniform(0.6, 1.4);
  const double half_h = 0.5 * extent * aspect;
  const double half_w = 0.5 * extent / aspect;
  for (std::size_t r = 0; r < task.height; ++r) {
    for (std::size_t c = 0; c < task.width; ++c) {
      const double dy = (static_cast<double>(r) + 0.5 - cy) / half_h;
      const double dx = (static_cast<double>(c) + 0.5 - cx) / half_w;
      const bool inside = circle ? dy * dy + dx * dx <= 1.0
                                 : std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
      if (inside) labels[r * task.width + c] = label;
    }
  }
}

bool covers_all_classes(const std::vector<std::int32_t>& labels, std::size_t num_classes) {
  std::vector<bool> seen(num_classes, false);
  for (std::int32_t v : labels) seen[static_cast<std::size_t>(v)] = true;
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

void generate_image(const SyntheticTask& task, std::uint64_t index, Split& split) {
  const auto intensities = task.class_intensities();
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    Rng rng(task.seed, SeedPurpose::kData, index * kMaxAttempts + static_cast<std::uint64_t>(attempt));
    std::vector<std::int32_t> labels(task.height * task.width, 0);
    for (std::size_t k = 1; k < task.num_classes; ++k) {
      for (std::size_t s = 0; s < task.shapes_per_class; ++s) {
        paint_shape(rng, task, labels, static_cast<std::int32_t>(k));
      }
    }
    if (!covers_all_classes(labels, task.num_classes)) continue;

    Image image{task.height, task.width, std::vector<double>(labels.size())};
    for (std::size_t p = 0; p < labels.size(); ++p) {
      double v = intensities[static_cast<std::size_t>(labels[p])];
      if (task.noise_sigma > 0.0) v += task.noise_sigma * rng.normal();
      image.pixels[p] = std::clamp(v, 0.0, 1.0);
    }
    split.images.push_back(std::move(image));
    split.labels.emplace_back(task.height, task.width, task.num_classes, std::move(labels), 0);
    return;
  }
  fail(ErrorCode::kValidation, "class-coverage failure: image " + std::to_string(index) +
                                   " missed a class after " + std::to_string(kMaxAttempts) +
                                   " attempts");
}

}  // namespace

void SyntheticTask::validate() const {
  require(height >= 4 && width >= 4, ErrorCode::kConfig, "task images must be at least 4x4");
  require(num_classes >= 2, ErrorCode::kConfig, "task needs at least 2 classes");
  require(intensities.empty() || intensities.size() == num_classes, ErrorCode::kConfig,
          "one intensity per class is required");
  for (double v : intensities) {
    require(v >= 0.0 && v <= 1.0, ErrorCode::kConfig, "intensities must lie in [0, 1]");
  }
  require(noise_sigma >= 0.0, ErrorCode::kConfig, "noise sigma must be >= 0");
  require(min_extent > 0.0 && max_extent >= min_extent && max_extent <= 1.0, ErrorCode::kConfig,
          "shape extents must satisfy 0 < min <= max <= 1");
  require(shapes_per_class >= 1, ErrorCode::kConfig, "at least one shape per class");
  require(train_count >= 1 && val_count >= 1 && test_count >= 1, ErrorCode::kConfig,
          "every split needs at least one image");
}

std::vector<double> SyntheticTask::class_intensities() const {
  if (!intensities.empty()) return intensities;
  std::vector<double> out(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    out[k] = 0.1 + 0.8 * static_cast<double>(k) / static_cast<double>(num_classes - 1);
  }
  return out;
}

Dataset generate_dataset(const SyntheticTask& task) {
  task.validate();
  Dataset data;
  std::uint64_t index = 0;
  for (Split* split : {&data.train, &data.val, &data.test}) {
    const std::size_t count = split == &data.train ? task.train_count
                              : split == &data.val ? task.val_count
                                                   : task.test_count;
    for (std::size_t i = 0; i < count; ++i) generate_image(task, index++, *split);
  }
  return data;
}

std::vector<Image> perturb_gaussian(const std::vector<Image>& images, double sigma,
                                    std::uint64_t seed) {
  require(sigma >= 0.0 && std::isfinite(sigma), ErrorCode::kValidation,
          "noise sigma must be >= 0");
  if (sigma == 0.0) return images;
  std::vector<Image> out = images;
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng(seed, SeedPurpose::kNoise, i);
    for (double& v : out[i].pixels) v = std::clamp(v + sigma * rng.normal(), 0.0, 1.0);
  }
  return out;
}

std::vector<std::size_t> class_histogram(const Split& split, std::size_t num_classes) {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const auto& labels : split.labels) {
    for (std::int32_t v : labels.values()) ++counts[static_cast<std::size_t>(v)];
  }
  return counts;
}

}  // namespace calmargin
