#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "calmargin/dataset.hpp"
#include "calmargin/losses.hpp"
#include "calmargin/metrics.hpp"
#include "calmargin/model.hpp"

namespace calmargin {

struct LearningRateStage {
  std::size_t start_epoch = 0;
  double lr = 1e-3;
};

struct TrainSchedule {
  std::size_t epochs = 30;
  std::size_t batch_size = 4;
  AdamOptions adam;
  std::vector<LearningRateStage> stages{{0, 1e-2}, {15, 1e-3}};

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_dsc = 0.0;
  double val_ece = 0.0;
};

struct TrainResult {
  PixelModel model;           // parameters of the best-validation-DSC epoch
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
};

// `seed` drives batch order only; initialise the model before calling.
TrainResult train(PixelModel model, const Dataset& data, const LossConfig& loss,
                  const TrainSchedule& schedule, std::uint64_t seed,
                  const EvaluationSettings& eval = {});

// Mean image loss and parameter gradient over a set of images (used by training and the
// whole-model gradient check).
struct BatchGradient {
  double loss = 0.0;
  std::vector<double> grad;
};
BatchGradient batch_gradient(const PixelModel& model, const std::vector<const Image*>& images,
                             const std::vector<const LabelField*>& labels,
                             const LossConfig& loss);

// Mean validation DSC (foreground classes) and mean per-image ECE.
std::pair<double, double> validation_scores(const PixelModel& model, const Split& split,
                                            const EvaluationSettings& eval);

struct ClassLogitProfile {
  std::size_t gt_class = 0;
  std::size_t pixel_count = 0;
  std::vector<double> mean_logits;
  std::vector<double> mean_distances;  // logit distances of the mean vector
};

// Mean logit vector over the pixels of each ground-truth class. Classes with no pixels are
// left out; `omitted` lists them.
struct LogitProfile {
  std::vector<ClassLogitProfile> classes;
  std::vector<std::size_t> omitted;
};
LogitProfile logit_distance_profile(const PixelModel& model, const Split& split);

// max_k d_k(l) for every pixel whose gt class is not background (all pixels when
// include_background is set).
std::vector<double> max_logit_distances(const PixelModel& model, const Split& split,
                                        bool include_background = false);

}  // namespace calmargin
