#include "calmargin/model.hpp"

#include <cmath>

#include "calmargin/random.hpp"

namespace calmargin {

PixelModel::PixelModel(std::size_t patch_radius, std::size_t hidden, std::size_t num_classes)
    : radius_(patch_radius),
      hidden_(hidden),
      classes_(num_classes),
      features_((2 * patch_radius + 1) * (2 * patch_radius + 1)),
      params_(parameter_count(patch_radius, hidden, num_classes), 0.0) {
  require(hidden >= 1, ErrorCode::kConfig, "hidden width must be >= 1");
  require(num_classes >= 2, ErrorCode::kConfig, "model needs at least 2 classes");
}

std::size_t PixelModel::parameter_count(std::size_t patch_radius, std::size_t hidden,
                                        std::size_t num_classes) {
  const std::size_t f = (2 * patch_radius + 1) * (2 * patch_radius + 1);
  return f * hidden + hidden + hidden * num_classes + num_classes;
}

void PixelModel::set_parameters(std::vector<double> params) {
  require(params.size() == params_.size(), ErrorCode::kShapeMismatch,
          "parameter vector has the wrong length");
  params_ = std::move(params);
}

void PixelModel::initialize(std::uint64_t seed) {
  Rng rng(seed, SeedPurpose::kInit);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(features_));
  const double hid_scale = 1.0 / std::sqrt(static_cast<double>(hidden_));
  double* p = params_.data();
  for (std::size_t i = 0; i < features_ * hidden_; ++i) *p++ = rng.uniform(-in_scale, in_scale);
  for (std::size_t i = 0; i < hidden_; ++i) *p++ = 0.0;
  for (std::size_t i = 0; i < hidden_ * classes_; ++i) *p++ = rng.uniform(-hid_scale, hid_scale);
  for (std::size_t i = 0; i < classes_; ++i) *p++ = 0.0;
}

void PixelModel::patch(const Image& image, std::size_t row, std::size_t col,
                       std::span<double> out) const {
  const auto r = static_cast<long>(radius_);
  std::size_t i = 0;
  for (long dy = -r; dy <= r; ++dy) {
    for (long dx = -r; dx <= r; ++dx) {
      const long y = static_cast<long>(row) + dy;
      const long x = static_cast<long>(col) + dx;
      const bool inside = y >= 0 && x >= 0 && y < static_cast<long>(image.height) &&
                          x < static_cast<long>(image.width);
      out[i++] = inside ? image.at(static_cast<std::size_t>(y), static_cast<std::size_t>(x)) : 0.0;
    }
  }
}

LogitField PixelModel::forward(const Image& image) const {
  Activations unused;
  return forward(image, unused);
}

LogitField PixelModel::forward(const Image& image, Activations& saved) const {
  const double* w1 = params_.data();
  const double* b1 = w1 + features_ * hidden_;
  const double* w2 = b1 + hidden_;
  const double* b2 = w2 + hidden_ * classes_;
  const std::size_t pixels = image.height * image.width;
  std::vector<double> x(features_);
  saved.hidden.resize(pixels * hidden_);
  std::vector<double> logits(pixels * classes_);
  for (std::size_t row = 0; row < image.height; ++row) {
    for (std::size_t col = 0; col < image.width; ++col) {
      const std::size_t p = row * image.width + col;
      patch(image, row, col, x);
      double* a = saved.hidden.data() + p * hidden_;
      for (std::size_t j = 0; j < hidden_; ++j) {
        double z = b1[j];
        for (std::size_t f = 0; f < features_; ++f) z += w1[j * features_ + f] * x[f];
        a[j] = std::tanh(z);
      }
      double* out = logits.data() + p * classes_;
      for (std::size_t k = 0; k < classes_; ++k) {
        double z = b2[k];
        for (std::size_t j = 0; j < hidden_; ++j) z += w2[k * hidden_ + j] * a[j];
        out[k] = z;
      }
    }
  }
  // Diverged parameters are a numerical failure, not malformed input.
  for (double v : logits)
    require(std::isfinite(v), ErrorCode::kNumerical, "model produced a non-finite logit");
  return LogitField(image.height, image.width, classes_, std::move(logits));
}

void PixelModel::backward(const Image& image, std::span<const double> logit_grad,
                          std::span<double> grad) const {
  Activations saved;
  forward(image, saved);
  backward(image, saved, logit_grad, grad);
}

void PixelModel::backward(const Image& image, const Activations& saved,
                          std::span<const double> logit_grad, std::span<double> grad) const {
  require(grad.size() == params_.size(), ErrorCode::kShapeMismatch, "gradient buffer size");
  require(logit_grad.size() == image.height * image.width * classes_, ErrorCode::kShapeMismatch,
          "logit gradient size");
  require(saved.hidden.size() == image.height * image.width * hidden_, ErrorCode::kShapeMismatch,
          "saved activations do not match the image");
  const double* w2 = params_.data() + features_ * hidden_ + hidden_;
  double* gw1 = grad.data();
  double* gb1 = gw1 + features_ * hidden_;
  double* gw2 = gb1 + hidden_;
  double* gb2 = gw2 + hidden_ * classes_;

  std::vector<double> x(features_), da(hidden_);
  for (std::size_t row = 0; row < image.height; ++row) {
    for (std::size_t col = 0; col < image.width; ++col) {
      const std::size_t p = row * image.width + col;
      const double* gl = logit_grad.data() + p * classes_;
      const double* a = saved.hidden.data() + p * hidden_;
      std::fill(da.begin(), da.end(), 0.0);
      for (std::size_t k = 0; k < classes_; ++k) {
        gb2[k] += gl[k];
        for (std::size_t j = 0; j < hidden_; ++j) {
          gw2[k * hidden_ + j] += gl[k] * a[j];
          da[j] += gl[k] * w2[k * hidden_ + j];
        }
      }
      patch(image, row, col, x);
      for (std::size_t j = 0; j < hidden_; ++j) {
        const double dz = da[j] * (1.0 - a[j] * a[j]);
        gb1[j] += dz;
        for (std::size_t f = 0; f < features_; ++f) gw1[j * features_ + f] += dz * x[f];
      }
    }
  }
}

Adam::Adam(std::size_t size, AdamOptions options)
    : options_(options), m_(size, 0.0), v_(size, 0.0) {}

void Adam::step(std::span<double> params, std::span<const double> grad, double lr) {
  require(params.size() == m_.size() && grad.size() == m_.size(), ErrorCode::kShapeMismatch,
          "optimizer state size mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = options_.beta1 * m_[i] + (1.0 - options_.beta1) * grad[i];
    v_[i] = options_.beta2 * v_[i] + (1.0 - options_.beta2) * grad[i] * grad[i];
    const double m_hat = m_[i] / c1;
    const double v_hat = v_[i] / c2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + options_.epsilon);
  }
}

}  // namespace calmargin
