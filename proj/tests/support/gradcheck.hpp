#pragma once

// Central finite-difference oracle for the tape. The function under test maps
// the current input values to an output tensor; the checked scalar is a fixed
// random projection of that output, accumulated in double so that float
// rounding of the sum does not swamp the difference quotient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "sgm/ops.hpp"
#include "sgm/tensor.hpp"

namespace sgm::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;  // worst input tensor
  std::size_t probes = 0;
};

// Relative error of the probed entries of one input: ||a - n|| / max(||a||, ||n||).
inline double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double scale = std::max({std::sqrt(na), std::sqrt(nn), 1e-6});
  return std::sqrt(diff) / scale;
}

// `inputs` must require grad. At most `max_probes` entries per input are
// perturbed (all when smaller).
inline GradCheckResult grad_check(const std::function<Tensor()>& fn, std::vector<Tensor> inputs, double h,
                                  std::uint64_t seed, std::size_t max_probes = 64, bool project = true) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
  Tensor weights;
  auto scalar = [&](const Tensor& out) {
    if (!weights.defined()) {
      weights = project ? Tensor::uniform(out.shape(), rng, -1.0f, 1.0f) : Tensor::full(out.shape(), 1.0f);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += static_cast<double>(weights[i]) * out[i];
    return s;
  };
  {
    NoGradGuard g;
    scalar(fn());
  }

  for (auto& t : inputs) t.clear_grad();
  {
    Tape tape;
    Tensor out = fn();
    Tensor loss = sum(mul(out, weights));
    tape.backward(loss);
  }

  GradCheckResult res;
  for (auto& t : inputs) {
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_probes) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_probes);
    }
    std::vector<double> analytic, numeric;
    for (std::size_t i : idx) {
      analytic.push_back(t.has_grad() ? t.grad()[i] : 0.0);
      const float orig = t[i];
      NoGradGuard g;
      t[i] = orig + static_cast<float>(h);
      const double up = scalar(fn());
      t[i] = orig - static_cast<float>(h);
      const double down = scalar(fn());
      t[i] = orig;
      // The perturbation actually applied in float.
      const double step = static_cast<double>(orig + static_cast<float>(h)) - static_cast<double>(orig - static_cast<float>(h));
      numeric.push_back((up - down) / step);
    }
    res.max_rel_error = std::max(res.max_rel_error, relative_error(analytic, numeric));
    res.probes += idx.size();
  }
  for (auto& t : inputs) t.clear_grad();
  return res;
}

}  // namespace sgm::testing
