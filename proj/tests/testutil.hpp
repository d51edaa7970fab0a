#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "cloak/losses.hpp"
#include "cloak/rng.hpp"
#include "cloak/sequential.hpp"

namespace testutil {

using cloak::Rng;
using cloak::Sequential;
using cloak::TensorT;

template <typename T>
void randomize(TensorT<T>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
}

/// Scalar loss of the network output plus its gradient; the oracle side
/// only ever sees the scalar.
using LossFn = std::function<std::pair<double, TensorT<double>>(const TensorT<double>&)>;

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst;  // which derivative was worst, for diagnostics
};

inline double rel_err(double a, double b) {
  const double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

/// Central-difference check of every parameter gradient and the input
/// gradient of `net` against the analytic backward pass.
inline GradCheckReport check_gradients(Sequential<double>& net, TensorT<double> x,
                                       const LossFn& loss, double h = 1e-5) {
  GradCheckReport rep;
  auto params = net.params();
  for (auto& p : params) p.grad->fill(0.0);

  TensorT<double> y = net.forward(x);
  auto [value, dy] = loss(y);
  (void)value;
  TensorT<double> dx = net.backward(dy, true);

  auto eval = [&](const TensorT<double>& input) {
    TensorT<double> out = net.forward(input);
    return loss(out).first;
  };

  auto probe = [&](double& slot, double analytic, const std::string& label) {
    const double orig = slot;
    slot = orig + h;
    const double fp = eval(x);
    slot = orig - h;
    const double fm = eval(x);
    slot = orig;
    const double numeric = (fp - fm) / (2.0 * h);
    const double e = rel_err(analytic, numeric);
    if (e > rep.max_rel_err) {
      rep.max_rel_err = e;
      rep.worst = label;
    }
  };

  for (auto& p : params) {
    for (std::int64_t i = 0; i < p.value->numel(); ++i)
      probe((*p.value)[i], (*p.grad)[i], p.name + "[" + std::to_string(i) + "]");
  }
  for (std::int64_t i = 0; i < x.numel(); ++i)
    probe(x[i], dx[i], "input[" + std::to_string(i) + "]");
  return rep;
}

inline LossFn mse_against(TensorT<double> target) {
  return [target = std::move(target)](const TensorT<double>& y) {
    const double v = cloak::reconstruction_loss(target, y);
    return std::make_pair(v, cloak::reconstruction_loss_grad(target, y));
  };
}

inline LossFn crossentropy_against(std::vector<int> labels) {
  return [labels = std::move(labels)](const TensorT<double>& y) {
    auto [v, g] = cloak::classification_loss_with_grad(
        y, std::span<const int>(labels.data(), labels.size()));
    return std::make_pair(v, std::move(g));
  };
}

/// Scratch directory under the build tree, unique per test name.
inline std::string scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cloak_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir.string();
}

}  // namespace testutil
