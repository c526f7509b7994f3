#include "calmargin/losses.hpp"

#include <cmath>
#include <string>

namespace calmargin {

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::kCE: return "CE";
    case LossKind::kCEDice: return "CE_DICE";
    case LossKind::kLS: return "LS";
    case LossKind::kFL: return "FL";
    case LossKind::kECP: return "ECP";
    case LossKind::kSVLS: return "SVLS";
    case LossKind::kMbLSL1: return "MBLS_L1";
    case LossKind::kMbLSL2: return "MBLS_L2";
  }
  return "?";
}

LossKind parse_loss_kind(std::string_view name) {
  for (auto kind : {LossKind::kCE, LossKind::kCEDice, LossKind::kLS, LossKind::kFL,
                    LossKind::kECP, LossKind::kSVLS, LossKind::kMbLSL1, LossKind::kMbLSL2}) {
    if (to_string(kind) == name) return kind;
  }
  fail(ErrorCode::kConfig, "unknown loss kind '" + std::string(name) + "'");
}

namespace {

void check_alpha(double alpha) {
  require(alpha >= 0.0 && alpha < 1.0, ErrorCode::kValidation, "alpha must lie in [0, 1)");
}
void check_gamma(double gamma) {
  require(gamma >= 0.0 && std::isfinite(gamma), ErrorCode::kValidation, "gamma must be >= 0");
}
void check_lambda(double lambda) {
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kValidation, "lambda must be >= 0");
}
void check_margin(double margin) {
  require(margin >= 0.0 && std::isfinite(margin), ErrorCode::kValidation, "margin must be >= 0");
}
void check_epsilon(double epsilon) {
  require(epsilon > 0.0 && std::isfinite(epsilon), ErrorCode::kValidation,
          "dice epsilon must be > 0");
}
void check_kernel(int kernel_size, double sigma) {
  require(kernel_size >= 1 && kernel_size % 2 == 1, ErrorCode::kValidation,
          "kernel size must be odd and >= 1");
  require(sigma > 0.0 && std::isfinite(sigma), ErrorCode::kValidation, "sigma must be > 0");
}

void check_same_grid(const LogitField& logits, const LabelField& labels) {
  require(labels.same_grid(logits), ErrorCode::kShapeMismatch,
          "labels and logits have different shapes");
}

}  // namespace

void LossConfig::validate() const {
  switch (kind) {
    case LossKind::kCE: break;
    case LossKind::kCEDice:
      check_epsilon(epsilon);
      require(dice_weight >= 0.0, ErrorCode::kValidation, "dice weight must be >= 0");
      break;
    case LossKind::kLS: check_alpha(alpha); break;
    case LossKind::kFL: check_gamma(gamma); break;
    case LossKind::kECP: check_lambda(lambda); break;
    case LossKind::kSVLS: check_kernel(svls_kernel_size, svls_sigma); break;
    case LossKind::kMbLSL1:
    case LossKind::kMbLSL2:
      check_margin(margin);
      check_lambda(lambda);
      break;
  }
}

LossEval& LossEval::operator+=(const LossEval& other) {
  require(grad.size() == other.grad.size(), ErrorCode::kShapeMismatch,
          "cannot add loss gradients of different sizes");
  value += other.value;
  for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += other.grad[i];
  return *this;
}

LossEval& LossEval::scale(double factor) {
  value *= factor;
  for (double& g : grad) g *= factor;
  return *this;
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double s : probs) {
    if (s > 0.0) h -= s * std::log(s);
  }
  return h;
}

double kl_uniform_to(std::span<const double> probs) {
  const double u = 1.0 / static_cast<double>(probs.size());
  double kl = 0.0;
  for (double s : probs) kl += u * (std::log(u) - std::log(s));
  return kl;
}

double kl_to_uniform(std::span<const double> probs) {
  const double log_k = std::log(static_cast<double>(probs.size()));
  double kl = 0.0;
  for (double s : probs) {
    if (s > 0.0) kl += s * (std::log(s) + log_k);
  }
  return kl;
}

LossEval ce_loss(const LogitField& logits, const LabelField& labels) {
  check_same_grid(logits, labels);
  const std::size_t n = logits.num_pixels();
  const std::size_t k = logits.num_classes();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossEval out{0.0, std::vector<double>(logits.values().size())};
  std::vector<double> log_s(k);
  for (std::size_t p = 0; p < n; ++p) {
    log_softmax(logits.pixel(p), log_s);
    const std::size_t y = labels.at(p);
    out.value -= log_s[y];
    double* g = out.grad.data() + p * k;
    for (std::size_t c = 0; c < k; ++c) {
      g[c] = (std::exp(log_s[c]) - (c == y ? 1.0 : 0.0)) * inv_n;
    }
  }
  out.value *= inv_n;
  return out;
}

LossEval ce_loss(const LogitField& logits, const SoftLabelField& targets) {
  require(logits.same_shape(targets), ErrorCode::kShapeMismatch,
          "targets and logits have different shapes");
  const std::size_t n = logits.num_pixels();
  const std::size_t k = logits.num_classes();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossEval out{0.0, std::vector<double>(logits.values().size())};
  std::vector<double> log_s(k);
  for (std::size_t p = 0; p < n; ++p) {
    log_softmax(logits.pixel(p), log_s);
    const auto y = targets.pixel(p);
    double* g = out.grad.data() + p * k;
    for (std::size_t c = 0; c < k; ++c) {
      if (y[c] != 0.0) out.value -= y[c] * log_s[c];
      g[c] = (std::exp(log_s[c]) - y[c]) * inv_n;
    }
  }
  out.value *= inv_n;
  return out;
}

SoftLabelField one_hot(const LabelField& labels) {
  return ls_transform(labels, 0.0);
}

SoftLabelField ls_transform(const LabelField& labels, double alpha) {
  check_alpha(alpha);
  const std::size_t k = labels.num_classes();
  const double off = alpha / static_cast<double>(k);
  const double on = (1.0 - alpha) + off;
  std::vector<double> values(labels.num_pixels() * k, off);
  for (std::size_t p = 0; p < labels.num_pixels(); ++p) values[p * k + labels.at(p)] = on;
  return SoftLabelField(labels.height(), labels.width(), k, std::move(values));
}

LossEval ls_loss(const LogitField& logits, const LabelField& labels, double alpha) {
  check_same_grid(logits, labels);
  return ce_loss(logits, ls_transform(labels, alpha));
}

LossEval focal_loss(const LogitField& logits, const LabelField& labels, double gamma) {
  check_gamma(gamma);
  check_same_grid(logits, labels);
  const std::size_t n = logits.num_pixels();
  const std::size_t k = logits.num_classes();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossEval out{0.0, std::vector<double>(logits.values().size())};
  std::vector<double> log_s(k);
  for (std::size_t p = 0; p < n; ++p) {
    log_softmax(logits.pixel(p), log_s);
    const std::size_t y = labels.at(p);
    const double log_p = log_s[y];
    const double p_y = std::exp(log_p);
    // 1 - p_y without cancellation: sum of the other class probabilities.
    double rest = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      if (c != y) rest += std::exp(log_s[c]);
    }
    const double modulator = gamma == 0.0 ? 1.0 : std::pow(rest, gamma);
    out.value -= modulator * log_p;

    // dL/dl_j = coeff * (delta_jy - s_j), coeff = gamma (1-p)^(gamma-1) p log p - (1-p)^gamma.
    // The first term vanishes as p -> 1 for every gamma > 0.
    double focus = 0.0;
    if (gamma != 0.0 && rest > 0.0) focus = gamma * std::pow(rest, gamma - 1.0) * p_y * log_p;
    const double coeff = focus - modulator;
    double* g = out.grad.data() + p * k;
    for (std::size_t c = 0; c < k; ++c) {
      g[c] = coeff * ((c == y ? 1.0 : 0.0) - std::exp(log_s[c])) * inv_n;
    }
  }
  out.value *= inv_n;
  return out;
}

LossEval ecp_loss(const LogitField& logits, const LabelField& labels, double lambda) {
  check_lambda(lambda);
  LossEval out = ce_loss(logits, labels);
  if (lambda == 0.0) return out;
  const std::size_t n = logits.num_pixels();
  const std::size_t k = logits.num_classes();
  const double scale = lambda / static_cast<double>(n);
  std::vector<double> log_s(k);
  double entropy_sum = 0.0;
  for (std::size_t p = 0; p < n; ++p) {
    log_softmax(logits.pixel(p), log_s);
    double h = 0.0;
    for (std::size_t c = 0; c < k; ++c) h -= std::exp(log_s[c]) * log_s[c];
    entropy_sum += h;
    // d(-H)/dl_j = s_j (log s_j + H)
    double* g = out.grad.data() + p * k;
    for (std::size_t c = 0; c < k; ++c) g[c] += scale * std::exp(log_s[c]) * (log_s[c] + h);
  }
  out.value -= lambda * entropy_sum / static_cast<double>(n);
  return out;
}

std::vector<double> gaussian_kernel(int kernel_size, double sigma) {
  check_kernel(kernel_size, sigma);
  const int half = kernel_size / 2;
  std::vector<double> w(static_cast<std::size_t>(kernel_size * kernel_size));
  double sum = 0.0;
  for (int dy = -half; dy <= half; ++dy) {
    for (int dx = -half; dx <= half; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      w[static_cast<std::size_t>((dy + half) * kernel_size + dx + half)] = v;
      sum += v;
    }
  }
  for (double& v : w) v /= sum;
  return w;
}

SoftLabelField svls_transform(const LabelField& labels, int kernel_size, double sigma) {
  const auto kernel = gaussian_kernel(kernel_size, sigma);
  const int half = kernel_size / 2;
  const auto h = static_cast<int>(labels.height());
  const auto w = static_cast<int>(labels.width());
  const std::size_t k = labels.num_classes();
  std::vector<double> values(labels.num_pixels() * k, 0.0);
  for (int row = 0; row < h; ++row) {
    for (int col = 0; col < w; ++col) {
      double* out = values.data() + (static_cast<std::size_t>(row * w + col)) * k;
      // Zero padding: out-of-image taps contribute nothing.
      for (int dy = -half; dy <= half; ++dy) {
        const int r = row + dy;
        if (r < 0 || r >= h) continue;
        for (int dx = -half; dx <= half; ++dx) {
          const int c = col + dx;
          if (c < 0 || c >= w) continue;
          const double weight =
              kernel[static_cast<std::size_t>((dy + half) * kernel_size + dx + half)];
          out[labels.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c))] += weight;
        }
      }
      double sum = 0.0;
      for (std::size_t c = 0; c < k; ++c) sum += out[c];
      for (std::size_t c = 0; c < k; ++c) out[c] /= sum;
    }
  }
  return SoftLabelField(labels.height(), labels.width(), k, std::move(values));
}

LossEval svls_loss(const LogitField& logits, const LabelField& labels, int kernel_size,
                   double sigma) {
  check_same_grid(logits, labels);
  return ce_loss(logits, svls_transform(labels, kernel_size, sigma));
}

LossEval dice_loss(const LogitField& logits, const LabelField& labels, double epsilon) {
  check_epsilon(epsilon);
  check_same_grid(logits, labels);
  const std::size_t n = logits.num_pixels();
  const std::size_t k = logits.num_classes();
  const ProbField probs = softmax(logits);

  std::vector<double> inter(k, 0.0), pred_mass(k, 0.0), gt_mass(k, 0.0);
  for (std::size_t p = 0; p < n; ++p) {
    const auto s = probs.pixel(p);
    const std::size_t y = labels.at(p);
    for (std::size_t c = 0; c < k; ++c) pred_mass[c] += s[c];
    inter[y] += s[y];
    gt_mass[y] += 1.0;
  }

  LossEval out{0.0, std::vector<double>(logits.values().size())};
  std::vector<double> numer(k), denom(k);
  for (std::size_t c = 0; c < k; ++c) {
    numer[c] = 2.0 * inter[c] + epsilon;
    denom[c] = pred_mass[c] + gt_mass[c] + epsilon;
    out.value += 1.0 - numer[c] / denom[c];
  }
  const double inv_k = 1.0 / static_cast<double>(k);
  out.value *= inv_k;

  std::vector<double> ds(k);
  for (std::size_t p = 0; p < n; ++p) {
    const auto s = probs.pixel(p);
    const std::size_t y = labels.at(p);
    double dot = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      const double y_pc = c == y ? 1.0 : 0.0;
      ds[c] = -inv_k * (2.0 * y_pc * denom[c] - numer[c]) / (denom[c] * denom[c]);
      dot += s[c] * ds[c];
    }
    double* g = out.grad.data() + p * k;
    for (std::size_t c = 0; c < k; ++c) g[c] = s[c] * (ds[c] - dot);
  }
  return out;
}

LossEval mbls_penalty(const LogitField& logits, double margin, PenaltyKind kind) {
  check_margin(margin);
  const std::size_t n = logits.num_pixels();
  const std::size_t k = logits.num_classes();
  const double inv_n = 1.0 / static_cast<double>(n);
  LossEval out{0.0, std::vector<double>(logits.values().size(), 0.0)};
  for (std::size_t p = 0; p < n; ++p) {
    const auto l = logits.pixel(p);
    const std::size_t top = argmax(l);
    double* g = out.grad.data() + p * k;
    for (std::size_t c = 0; c < k; ++c) {
      const double violation = l[top] - l[c] - margin;
      // Exactly at the margin the hinge is treated as inactive.
      if (violation <= 0.0) continue;
      const double slope = kind == PenaltyKind::kL1 ? 1.0 : 2.0 * violation;
      out.value += kind == PenaltyKind::kL1 ? violation : violation * violation;
      g[top] += slope * inv_n;
      g[c] -= slope * inv_n;
    }
  }
  out.value *= inv_n;
  return out;
}

LossEval mbls_loss(const LogitField& logits, const LabelField& labels, double margin,
                   double lambda, PenaltyKind kind) {
  check_margin(margin);
  check_lambda(lambda);
  LossEval out = ce_loss(logits, labels);
  if (lambda == 0.0) return out;
  out += mbls_penalty(logits, margin, kind).scale(lambda);
  return out;
}

LossEval compound_loss(const LossConfig& config, const LogitField& logits,
                       const LabelField& labels) {
  config.validate();
  switch (config.kind) {
    case LossKind::kCE: return ce_loss(logits, labels);
    case LossKind::kCEDice: {
      LossEval out = ce_loss(logits, labels);
      if (config.dice_weight == 0.0) return out;
      out += dice_loss(logits, labels, config.epsilon).scale(config.dice_weight);
      return out;
    }
    case LossKind::kLS: return ls_loss(logits, labels, config.alpha);
    case LossKind::kFL: return focal_loss(logits, labels, config.gamma);
    case LossKind::kECP: return ecp_loss(logits, labels, config.lambda);
    case LossKind::kSVLS:
      return svls_loss(logits, labels, config.svls_kernel_size, config.svls_sigma);
    case LossKind::kMbLSL1:
      return mbls_loss(logits, labels, config.margin, config.lambda, PenaltyKind::kL1);
    case LossKind::kMbLSL2:
      return mbls_loss(logits, labels, config.margin, config.lambda, PenaltyKind::kL2);
  }
  fail(ErrorCode::kConfig, "unknown loss kind");
}

}  // namespace calmargin
