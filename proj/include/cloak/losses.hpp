#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "cloak/errors.hpp"
#include "cloak/tensor.hpp"

namespace cloak {

/// Per-step loss values of an adversarial training step.
///
/// Invariants: classification and reconstruction terms are nonnegative,
/// the reconstructor objective equals the reconstruction term exactly, and
/// the obfuscator objective is L_c - lambda * L_r.
struct LossRecord {
  std::int64_t step = 0;
  int epoch = 0;
  double L_c = 0.0;
  double L_r = 0.0;
  double obf_objective = 0.0;
  double deobf_objective = 0.0;
  double lr = 0.0;
};

/// Numerically stable softmax over the feature dimension of (n, k, 1, 1).
template <typename T>
TensorT<T> softmax(const TensorT<T>& logits) {
  const int N = logits.n();
  const int K = static_cast<int>(logits.image_size());
  TensorT<T> p = logits;
  for (int n = 0; n < N; ++n) {
    T* row = p.data() + static_cast<std::int64_t>(n) * K;
    T mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    T sum = T(0);
    for (int k = 0; k < K; ++k) {
      row[k] = std::exp(row[k] - mx);
      sum += row[k];
    }
    for (int k = 0; k < K; ++k) row[k] /= sum;
  }
  return p;
}

/// Mean crossentropy (nats) of the true class under softmax(logits).
template <typename T>
double classification_loss(const TensorT<T>& logits, std::span<const int> labels) {
  const int N = logits.n();
  const int K = static_cast<int>(logits.image_size());
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError("classification_loss: batch/label count mismatch");
  double total = 0;
  for (int n = 0; n < N; ++n) {
    if (labels[n] < 0 || labels[n] >= K)
      throw Error("classification_loss: label " + std::to_string(labels[n]) +
                  " out of range for " + std::to_string(K) + " classes");
    const T* row = logits.data() + static_cast<std::int64_t>(n) * K;
    T mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double lse = 0;
    for (int k = 0; k < K; ++k) lse += std::exp(static_cast<double>(row[k] - mx));
    total += std::log(lse) + mx - row[labels[n]];
  }
  return total / N;
}

/// Loss value together with d(loss)/d(logits); one softmax pass serves both.
template <typename T>
std::pair<double, TensorT<T>> classification_loss_with_grad(const TensorT<T>& logits,
                                                            std::span<const int> labels) {
  const int N = logits.n();
  const int K = static_cast<int>(logits.image_size());
  double value = classification_loss(logits, labels);
  TensorT<T> grad = softmax(logits);
  for (int n = 0; n < N; ++n) {
    grad[static_cast<std::int64_t>(n) * K + labels[n]] -= T(1);
  }
  const T scale = T(1) / static_cast<T>(N);
  for (std::int64_t i = 0; i < grad.numel(); ++i) grad[i] *= scale;
  return {value, std::move(grad)};
}

/// Squared Euclidean distance between image batches, averaged over every
/// element (batch, channel and pixel), so the value is size-independent.
template <typename T>
double reconstruction_loss(const TensorT<T>& original, const TensorT<T>& reconstructed) {
  if (!original.same_shape(reconstructed))
    throw ShapeError("reconstruction_loss: shape mismatch");
  double total = 0;
  for (std::int64_t i = 0; i < original.numel(); ++i) {
    const double d = static_cast<double>(reconstructed[i]) - original[i];
    total += d * d;
  }
  return total / static_cast<double>(original.numel());
}

/// Gradient of reconstruction_loss with respect to the reconstruction.
template <typename T>
TensorT<T> reconstruction_loss_grad(const TensorT<T>& original,
                                    const TensorT<T>& reconstructed) {
  if (!original.same_shape(reconstructed))
    throw ShapeError("reconstruction_loss_grad: shape mismatch");
  TensorT<T> g = reconstructed;
  const T scale = T(2) / static_cast<T>(original.numel());
  for (std::int64_t i = 0; i < g.numel(); ++i) g[i] = (g[i] - original[i]) * scale;
  return g;
}

/// The two adversarial objectives: the obfuscator minimizes
/// L_c - lambda * L_r (keeping classification while defeating
/// reconstruction); the reconstructor minimizes L_r alone.
inline std::pair<double, double> compose_objectives(double L_c, double L_r, double lambda) {
  return {L_c - lambda * L_r, L_r};
}

/// Appends loss records to a newline-delimited structured log, one record
/// per line. Implemented in src/losses.cpp.
class LossLog {
 public:
  LossLog() = default;
  explicit LossLog(const std::string& path);
  void append(const LossRecord& rec);
  bool is_open() const { return out_.is_open(); }

  static std::vector<LossRecord> read(const std::string& path);

 private:
  std::ofstream out_;
};

}  // namespace cloak
