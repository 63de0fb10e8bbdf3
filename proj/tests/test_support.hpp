#pragma once

// Shared helpers for the unit tests: central finite differences and small
// fixtures. Kept independent of the library's own differentiation paths.

#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace surfmap::testing {

// Central-difference gradient of a scalar function of one double tensor.
inline torch::Tensor finite_difference(const std::function<double(const torch::Tensor&)>& f,
                                       const torch::Tensor& x, double h) {
  auto base = x.detach().clone().to(torch::kFloat64).contiguous();
  auto grad = torch::zeros_like(base);
  auto* data = base.data_ptr<double>();
  auto* g = grad.data_ptr<double>();
  for (int64_t i = 0; i < base.numel(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double up = f(base);
    data[i] = saved - h;
    const double down = f(base);
    data[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

// Norm-wise relative error between two gradients.
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b) {
  const double diff = (a - b).norm().item<double>();
  const double scale = std::max({a.norm().item<double>(), b.norm().item<double>(), 1e-12});
  return diff / scale;
}

// Gradient of f at x by autograd.
inline torch::Tensor autograd_gradient(const std::function<torch::Tensor(const torch::Tensor&)>& f,
                                       const torch::Tensor& x) {
  auto leaf = x.detach().clone().to(torch::kFloat64).requires_grad_(true);
  auto y = f(leaf);
  y.backward();
  return leaf.grad().detach().clone();
}

// Coordinates in [0, 1] that stay at least `margin` (in texel units) away
// from texel lines, where bilinear interpolation has kinks.
inline torch::Tensor coords_off_kinks(int64_t n, int64_t width, int64_t height, double margin,
                                      torch::Generator& gen) {
  auto c = torch::empty({n, 2}, torch::kFloat64);
  auto acc = c.accessor<double, 2>();
  for (int64_t i = 0; i < n; ++i) {
    for (int d = 0; d < 2; ++d) {
      const int64_t size = d == 0 ? width : height;
      double v = 0.0;
      do {
        v = torch::rand({1}, gen, torch::kFloat64).item<double>();
        const double t = v * static_cast<double>(size - 1);
        if (std::abs(t - std::round(t)) > margin) break;
      } while (true);
      acc[i][d] = v;
    }
  }
  return c;
}

// Relative error between the autograd gradient and central differences.
inline double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& loss, const torch::Tensor& x,
                             double step = 1e-6) {
  const auto analytic = autograd_gradient(loss, x);
  const auto numeric = finite_difference([&](const torch::Tensor& t) { return loss(t).item<double>(); }, x, step);
  return relative_error(analytic, numeric);
}

}  // namespace surfmap::testing
