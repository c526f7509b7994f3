#include "calmargin/temperature.hpp"

#include <cmath>

namespace calmargin {

ScalarMinimum golden_section_log(const std::function<double(double)>& f, double lower,
                                 double upper, double tolerance) {
  require(lower > 0.0 && upper > lower, ErrorCode::kValidation, "invalid search bracket");
  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(lower);
  double b = std::log(upper);
  double c = b - inv_phi * (b - a);
  double d = a + inv_phi * (b - a);
  double fc = f(std::exp(c));
  double fd = f(std::exp(d));
  int iterations = 0;
  while (std::exp(b) - std::exp(a) > tolerance) {
    ++iterations;
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = f(std::exp(c));
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = f(std::exp(d));
    }
  }
  ScalarMinimum best{std::exp(c), fc, iterations};
  if (fd < best.value) best = {std::exp(d), fd, iterations};
  // The interior probes never reach the bracket ends; check them explicitly.
  for (double edge : {lower, upper}) {
    const double fe = f(edge);
    if (fe < best.value) best = {edge, fe, iterations};
  }
  return best;
}

double validation_nll(const std::vector<LogitField>& logits, const std::vector<LabelField>& labels,
                      MaskRule mask, double temperature) {
  require(logits.size() == labels.size(), ErrorCode::kShapeMismatch,
          "one label field per logit field is required");
  const std::size_t k = logits.empty() ? 0 : logits.front().num_classes();
  std::vector<double> scaled(k), log_s(k);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const auto& l = logits[i];
    const auto& y = labels[i];
    require(y.same_grid(l), ErrorCode::kShapeMismatch, "logits and labels differ in shape");
    const PixelMask included = foreground_mask(predict(l, y.background_class()), y, mask);
    for (std::size_t p = 0; p < y.num_pixels(); ++p) {
      if (!included[p]) continue;
      const auto px = l.pixel(p);
      for (std::size_t c = 0; c < k; ++c) scaled[c] = px[c] / temperature;
      log_softmax(scaled, log_s);
      total -= log_s[y.at(p)];
      ++count;
    }
  }
  require(count > 0, ErrorCode::kNoForeground, "empty validation set");
  return total / static_cast<double>(count);
}

TemperatureFit fit_temperature(const std::vector<LogitField>& logits,
                               const std::vector<LabelField>& labels,
                               const TemperatureSearch& search) {
  require(!logits.empty(), ErrorCode::kValidation, "empty validation set");
  auto objective = [&](double t) { return validation_nll(logits, labels, search.mask, t); };
  TemperatureFit fit;
  fit.nll_before = objective(1.0);
  const auto best = golden_section_log(objective, search.lower, search.upper, search.tolerance);
  fit.iterations = best.iterations;
  require(std::isfinite(best.value), ErrorCode::kNumerical, "validation NLL is not finite");
  if (best.value <= fit.nll_before) {
    fit.temperature = best.argmin;
    fit.nll_after = best.value;
  } else {
    fit.temperature = 1.0;
    fit.nll_after = fit.nll_before;
  }
  return fit;
}

ProbField apply_temperature(const LogitField& logits, double temperature) {
  require(temperature > 0.0 && std::isfinite(temperature), ErrorCode::kValidation,
          "temperature must be > 0");
  std::vector<double> scaled = logits.values();
  for (double& v : scaled) v /= temperature;
  return softmax(LogitField(logits.height(), logits.width(), logits.num_classes(),
                            std::move(scaled)));
}

}  // namespace calmargin
