#include "calmargin/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "calmargin/random.hpp"

namespace calmargin {

void TrainSchedule::validate() const {
  require(epochs >= 1, ErrorCode::kConfig, "schedule needs at least one epoch");
  require(batch_size >= 1, ErrorCode::kConfig, "batch size must be >= 1");
  require(!stages.empty() && stages.front().start_epoch == 0, ErrorCode::kConfig,
          "the first learning-rate stage must start at epoch 0");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    require(stages[i].start_epoch <= epochs, ErrorCode::kConfig,
            "stage boundary beyond the last epoch");
    require(stages[i].lr >= 0.0 && std::isfinite(stages[i].lr), ErrorCode::kConfig,
            "learning rate must be >= 0");
    if (i > 0) {
      require(stages[i].start_epoch > stages[i - 1].start_epoch, ErrorCode::kConfig,
              "stage boundaries must increase");
    }
  }
  require(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 &&
              adam.epsilon > 0.0,
          ErrorCode::kConfig, "invalid Adam hyperparameters");
}

double TrainSchedule::lr_at(std::size_t epoch) const {
  double lr = stages.front().lr;
  for (const auto& stage : stages) {
    if (epoch >= stage.start_epoch) lr = stage.lr;
  }
  return lr;
}

BatchGradient batch_gradient(const PixelModel& model, const std::vector<const Image*>& images,
                             const std::vector<const LabelField*>& labels,
                             const LossConfig& loss) {
  require(images.size() == labels.size() && !images.empty(), ErrorCode::kShapeMismatch,
          "batch images and labels differ in count");
  BatchGradient out{0.0, std::vector<double>(model.parameters().size(), 0.0)};
  const double weight = 1.0 / static_cast<double>(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    PixelModel::Activations saved;
    const LogitField logits = model.forward(*images[i], saved);
    LossEval eval = compound_loss(loss, logits, *labels[i]);
    eval.scale(weight);
    out.loss += eval.value;
    model.backward(*images[i], saved, eval.grad, out.grad);
  }
  return out;
}

std::pair<double, double> validation_scores(const PixelModel& model, const Split& split,
                                            const EvaluationSettings& eval) {
  double dsc_sum = 0.0;
  double ece_sum = 0.0;
  std::size_t ece_cases = 0;
  for (std::size_t i = 0; i < split.images.size(); ++i) {
    const LogitField logits = model.forward(split.images[i]);
    const LabelField& gt = split.labels[i];
    const LabelField pred = predict(logits, gt.background_class());
    dsc_sum += dsc(pred, gt).mean;
    const PixelMask mask = foreground_mask(pred, gt, eval.mask);
    if (std::find(mask.begin(), mask.end(), true) != mask.end()) {
      ece_sum += ece(softmax(logits), gt, mask, eval.num_bins).value;
      ++ece_cases;
    }
  }
  const double n = static_cast<double>(split.images.size());
  return {dsc_sum / n, ece_cases > 0 ? ece_sum / static_cast<double>(ece_cases) : 0.0};
}

TrainResult train(PixelModel model, const Dataset& data, const LossConfig& loss,
                  const TrainSchedule& schedule, std::uint64_t seed,
                  const EvaluationSettings& eval) {
  schedule.validate();
  loss.validate();
  const auto& train_split = data.train;
  require(!train_split.images.empty(), ErrorCode::kValidation, "empty training split");
  for (const auto& labels : train_split.labels) {
    require(labels.num_classes() == model.num_classes(), ErrorCode::kShapeMismatch,
            "label classes do not match the model");
  }

  Adam optimizer(model.parameters().size(), schedule.adam);
  Rng batch_rng(seed, SeedPurpose::kBatching);
  std::vector<std::size_t> order(train_split.images.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> image_loss(order.size(), 0.0);

  TrainResult result{model, {}, 0};
  double best_dsc = -1.0;
  for (std::size_t epoch = 0; epoch < schedule.epochs; ++epoch) {
    const double lr = schedule.lr_at(epoch);
    batch_rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += schedule.batch_size) {
      const std::size_t end = std::min(order.size(), start + schedule.batch_size);
      const double weight = 1.0 / static_cast<double>(end - start);
      std::vector<double> grad(model.parameters().size(), 0.0);
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t idx = order[b];
        PixelModel::Activations saved;
        const LogitField logits = model.forward(train_split.images[idx], saved);
        LossEval eval_loss = compound_loss(loss, logits, train_split.labels[idx]);
        if (!std::isfinite(eval_loss.value)) {
          fail(ErrorCode::kNumerical, "non-finite loss at epoch " + std::to_string(epoch) +
                                          ", image " + std::to_string(idx) + " (loss " +
                                          std::string(to_string(loss.kind)) + ")");
        }
        image_loss[idx] = eval_loss.value;
        eval_loss.scale(weight);
        model.backward(train_split.images[idx], saved, eval_loss.grad, grad);
      }
      for (double g : grad) {
        require(std::isfinite(g), ErrorCode::kNumerical,
                "non-finite gradient at epoch " + std::to_string(epoch));
      }
      optimizer.step(model.parameters(), grad, lr);
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    // Summed in image order so the value does not depend on the shuffle.
    for (double v : image_loss) entry.train_loss += v;
    entry.train_loss /= static_cast<double>(image_loss.size());
    std::tie(entry.val_dsc, entry.val_ece) = validation_scores(model, data.val, eval);
    result.log.push_back(entry);
    if (entry.val_dsc > best_dsc) {
      best_dsc = entry.val_dsc;
      result.best_epoch = epoch;
      result.model = model;
    }
  }
  return result;
}

LogitProfile logit_distance_profile(const PixelModel& model, const Split& split) {
  const std::size_t k = model.num_classes();
  std::vector<std::vector<double>> sums(k, std::vector<double>(k, 0.0));
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < split.images.size(); ++i) {
    const LogitField logits = model.forward(split.images[i]);
    const LabelField& gt = split.labels[i];
    for (std::size_t p = 0; p < gt.num_pixels(); ++p) {
      const std::size_t y = gt.at(p);
      const auto l = logits.pixel(p);
      for (std::size_t c = 0; c < k; ++c) sums[y][c] += l[c];
      ++counts[y];
    }
  }
  LogitProfile out;
  for (std::size_t y = 0; y < k; ++y) {
    if (counts[y] == 0) {
      out.omitted.push_back(y);
      continue;
    }
    ClassLogitProfile entry;
    entry.gt_class = y;
    entry.pixel_count = counts[y];
    for (double s : sums[y]) entry.mean_logits.push_back(s / static_cast<double>(counts[y]));
    entry.mean_distances = logit_distances(entry.mean_logits);
    out.classes.push_back(std::move(entry));
  }
  return out;
}

std::vector<double> max_logit_distances(const PixelModel& model, const Split& split,
                                        bool include_background) {
  std::vector<double> out;
  for (std::size_t i = 0; i < split.images.size(); ++i) {
    const LogitField logits = model.forward(split.images[i]);
    const LabelField& gt = split.labels[i];
    for (std::size_t p = 0; p < gt.num_pixels(); ++p) {
      if (!include_background && gt.at(p) == gt.background_class()) continue;
      const auto d = logit_distances(logits.pixel(p));
      out.push_back(*std::max_element(d.begin(), d.end()));
    }
  }
  return out;
}

}  // namespace calmargin
