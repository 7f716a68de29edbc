#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "myotracker/tensor.hpp"

namespace myo {

struct GradCheckReport {
  std::string name;
  double max_relative_error = 0.0;
  int instances = 0;
  double step = 1e-4;
  bool passed = false;
};

using ScalarFunction = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares reverse-mode gradients of `f` against central finite differences
// at every element of every input. The relative error of one element is
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double max_gradient_error(const ScalarFunction& f, const std::vector<Tensor<double>>& inputs,
                          double step = 1e-4, double floor = 1e-2);

inline constexpr double kGradCheckTolerance = 1e-4;

// Every differentiable op, a conv -> norm -> attention -> linear composite, the
// encoder and the trajectory loss of the whole default-architecture model (with
// respect to a sample of parameters), each over `instances` random draws.
std::vector<GradCheckReport> run_gradcheck_suite(std::uint64_t seed, int instances = 5, bool include_model = true);

}  // namespace myo
