#pragma once

// Shared helpers for the test suite, chiefly the central finite-difference
// gradient oracle that analytic gradients are checked against.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "simul/tensor.hpp"

namespace testutil {

// |a - fd| / (|a| + 1e-8): tight form used for single-op checks, where random
// inputs make every gradient entry generically nonzero.
inline double grad_err_tight(double analytic, double fd) {
  return std::abs(analytic - fd) / (std::abs(analytic) + 1e-8);
}

// |a - fd| / max(|a|, |fd|, 1e-6): symmetric form used for whole-model checks,
// where an exactly-zero analytic gradient (e.g. behind a stop-gradient) must
// not be failed on finite-difference noise.
inline double grad_err_sym(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max({std::abs(analytic), std::abs(fd), 1e-6});
}

struct GradCheckResult {
  double max_err = 0.0;
  long checked = 0;
  std::string worst;  // "param[k]: analytic=..., fd=..."
};

// Compares analytic gradients of `forward` (a deterministic scalar function
// of `params`) against central differences. `forward` is run once under a
// tape for the analytic side, then twice per parameter entry without a tape.
// Parameters are perturbed in place and restored.
inline GradCheckResult check_gradients(
    const std::function<simul::Tensor()>& forward, std::vector<simul::Tensor> params,
    std::vector<std::string> names = {}, double h = 1e-5,
    double (*err_fn)(double, double) = grad_err_tight) {
  using simul::Tensor;
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    simul::Tape tape;
    Tensor loss = forward();
    tape.backward(loss);
  }
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (auto& p : params) grads.push_back(p.grad());

  GradCheckResult result;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].mutable_data();
    for (size_t k = 0; k < data.size(); ++k) {
      const double saved = data[k];
      data[k] = saved + h;
      const double up = forward().value();
      data[k] = saved - h;
      const double down = forward().value();
      data[k] = saved;
      const double fd = (up - down) / (2.0 * h);
      const double analytic = grads[pi].data()[k];
      const double err = err_fn(analytic, fd);
      ++result.checked;
      if (err > result.max_err) {
        result.max_err = err;
        const std::string name =
            pi < names.size() ? names[pi] : "param" + std::to_string(pi);
        result.worst = name + "[" + std::to_string(k) + "]: analytic=" +
                       std::to_string(analytic) + ", fd=" + std::to_string(fd);
      }
    }
  }
  return result;
}

inline simul::Tensor random_tensor(int rows, int cols, std::mt19937_64& rng, double lo = -1.0,
                                   double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> data(static_cast<size_t>(rows) * cols);
  for (double& v : data) v = dist(rng);
  return simul::Tensor::from_data(rows, cols, std::move(data));
}

inline double max_abs_diff(const simul::Tensor& a, const simul::Tensor& b) {
  double m = 0.0;
  for (long i = 0; i < a.numel(); ++i)
    m = std::max(m, std::abs(a.data()[static_cast<size_t>(i)] - b.data()[static_cast<size_t>(i)]));
  return m;
}

}  // namespace testutil
