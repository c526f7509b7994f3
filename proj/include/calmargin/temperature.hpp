#pragma once

#include <functional>
#include <vector>

#include "calmargin/metrics.hpp"
#include "calmargin/tensor.hpp"

namespace calmargin {

struct TemperatureFit {
  double temperature = 1.0;
  double nll_before = 0.0;  // at T = 1
  double nll_after = 0.0;
  int iterations = 0;
};

struct TemperatureSearch {
  double lower = 0.05;
  double upper = 20.0;
  double tolerance = 1e-4;  // absolute, on T
  MaskRule mask = MaskRule::kUnion;
};

// Golden-section minimisation of f over [lower, upper] carried out in log space.
struct ScalarMinimum {
  double argmin = 0.0;
  double value = 0.0;
  int iterations = 0;
};
ScalarMinimum golden_section_log(const std::function<double(double)>& f, double lower,
                                 double upper, double tolerance);

// Mean validation NLL of softmax(l / T) over all masked pixels of all images.
double validation_nll(const std::vector<LogitField>& logits, const std::vector<LabelField>& labels,
                      MaskRule mask, double temperature);

TemperatureFit fit_temperature(const std::vector<LogitField>& logits,
                               const std::vector<LabelField>& labels,
                               const TemperatureSearch& search = {});

ProbField apply_temperature(const LogitField& logits, double temperature);

}  // namespace calmargin
