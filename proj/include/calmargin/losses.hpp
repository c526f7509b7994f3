#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "calmargin/tensor.hpp"

namespace calmargin {

enum class LossKind { kCE, kCEDice, kLS, kFL, kECP, kSVLS, kMbLSL1, kMbLSL2 };

std::string_view to_string(LossKind kind);
LossKind parse_loss_kind(std::string_view name);

enum class PenaltyKind { kL1, kL2 };

struct LossConfig {
  LossKind kind = LossKind::kCE;
  double alpha = 0.1;      // LS smoothing weight
  double gamma = 2.0;      // FL focusing exponent
  double lambda = 0.1;     // ECP / MbLS penalty weight
  double margin = 10.0;    // MbLS margin
  int svls_kernel_size = 3;
  double svls_sigma = 1.0;
  double dice_weight = 1.0;
  double epsilon = 1e-5;   // Dice smoothing

  // Throws kValidation when a parameter relevant to `kind` is out of range.
  void validate() const;
};

// Loss value (mean over pixels) and its gradient w.r.t. the logits.
struct LossEval {
  double value = 0.0;
  std::vector<double> grad;  // H x W x K, same layout as LogitField

  LossEval& operator+=(const LossEval& other);
  LossEval& scale(double factor);
};

LossEval ce_loss(const LogitField& logits, const LabelField& labels);
LossEval ce_loss(const LogitField& logits, const SoftLabelField& targets);

SoftLabelField one_hot(const LabelField& labels);
SoftLabelField ls_transform(const LabelField& labels, double alpha);
LossEval ls_loss(const LogitField& logits, const LabelField& labels, double alpha);

LossEval focal_loss(const LogitField& logits, const LabelField& labels, double gamma);

// CE - lambda * H(s).
LossEval ecp_loss(const LogitField& logits, const LabelField& labels, double lambda);

SoftLabelField svls_transform(const LabelField& labels, int kernel_size, double sigma);
LossEval svls_loss(const LogitField& logits, const LabelField& labels, int kernel_size,
                   double sigma);

// Normalized 2D Gaussian weights, row-major kernel_size x kernel_size.
std::vector<double> gaussian_kernel(int kernel_size, double sigma);

// Soft Dice averaged over all classes, gradient taken through the softmax.
LossEval dice_loss(const LogitField& logits, const LabelField& labels, double epsilon);

// Hinge penalty on logit distances beyond `margin`; L2 squares each hinge.
LossEval mbls_penalty(const LogitField& logits, double margin, PenaltyKind kind);
LossEval mbls_loss(const LogitField& logits, const LabelField& labels, double margin,
                   double lambda, PenaltyKind kind);

LossEval compound_loss(const LossConfig& config, const LogitField& logits,
                       const LabelField& labels);

// Per-vector helpers reused by the bound checks.
double entropy(std::span<const double> probs);
// KL(u || s) with u uniform over the classes.
double kl_uniform_to(std::span<const double> probs);
// KL(s || u).
double kl_to_uniform(std::span<const double> probs);

}  // namespace calmargin
