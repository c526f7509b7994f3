#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "calmargin/dataset.hpp"
#include "calmargin/tensor.hpp"

namespace calmargin {

// Per-pixel MLP: (2r+1)^2 patch intensities -> tanh hidden layer -> K logits.
// Parameter layout: W1 [H x F], b1 [H], W2 [K x H], b2 [K]. Out-of-image taps read 0.
class PixelModel {
 public:
  PixelModel(std::size_t patch_radius, std::size_t hidden, std::size_t num_classes);

  static std::size_t parameter_count(std::size_t patch_radius, std::size_t hidden,
                                     std::size_t num_classes);

  std::size_t patch_radius() const noexcept { return radius_; }
  std::size_t hidden() const noexcept { return hidden_; }
  std::size_t num_classes() const noexcept { return classes_; }
  std::size_t num_features() const noexcept { return features_; }

  std::span<const double> parameters() const noexcept { return params_; }
  std::span<double> parameters() noexcept { return params_; }
  void set_parameters(std::vector<double> params);

  // Symmetric uniform in +-1/sqrt(fan_in) for weights, zero biases.
  void initialize(std::uint64_t seed);

  LogitField forward(const Image& image) const;

  // Hidden activations saved by forward() for a later backward() on the same image.
  struct Activations {
    std::vector<double> hidden;  // pixels x H
  };
  LogitField forward(const Image& image, Activations& saved) const;

  // Adds dL/dparams for one image to `grad`, given dL/dlogits for that image.
  void backward(const Image& image, std::span<const double> logit_grad,
                std::span<double> grad) const;
  void backward(const Image& image, const Activations& saved, std::span<const double> logit_grad,
                std::span<double> grad) const;

 private:
  void patch(const Image& image, std::size_t row, std::size_t col, std::span<double> out) const;

  std::size_t radius_;
  std::size_t hidden_;
  std::size_t classes_;
  std::size_t features_;
  std::vector<double> params_;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class Adam {
 public:
  Adam(std::size_t size, AdamOptions options = {});
  void step(std::span<double> params, std::span<const double> grad, double lr);
  std::uint64_t steps() const noexcept { return t_; }

 private:
  AdamOptions options_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::uint64_t t_ = 0;
};

}  // namespace calmargin
