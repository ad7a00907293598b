#pragma once

#include <cstdint>
#include <vector>

#include "pmap/nn.hpp"

namespace pmap {

// Weighted softmax cross entropy over independent cells.
// logits: [n, C]; labels: n values in [0, C); weights: [C].
// loss = sum_i w[y_i] * -log softmax(logits_i)[y_i] / sum_i w[y_i].
// The gradient lands in dlogits (overwritten).
template <typename T>
inline double cross_entropy(const Tensor<T>& logits, const std::vector<uint8_t>& labels,
                            const std::vector<double>& weights, Tensor<T>* dlogits) {
  int64_t n = logits.extent(0), c = logits.extent(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw ShapeError("cross_entropy: label count mismatch");
  if (static_cast<int64_t>(weights.size()) != c)
    throw ShapeError("cross_entropy: weight count mismatch");
  if (dlogits && !dlogits->same_shape(logits)) *dlogits = Tensor<T>(logits.shape());

  double loss = 0.0, wsum = 0.0;
  for (int64_t i = 0; i < n; ++i) wsum += weights[labels[static_cast<size_t>(i)]];
  if (wsum <= 0.0) throw InvalidArgument("cross_entropy: total weight must be positive");

  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * c;
    int y = labels[static_cast<size_t>(i)];
    double w = weights[static_cast<size_t>(y)];
    double mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0.0;
    for (int64_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j]) - mx);
    double log_z = mx + std::log(sum);
    loss += w * (log_z - static_cast<double>(row[y]));
    if (dlogits) {
      T* drow = dlogits->data() + i * c;
      for (int64_t j = 0; j < c; ++j) {
        double p = std::exp(static_cast<double>(row[j]) - log_z);
        double g = w * (p - (j == y ? 1.0 : 0.0)) / wsum;
        drow[j] = static_cast<T>(g);
      }
    }
  }
  return loss / wsum;
}

template <typename T>
inline double cross_entropy(const Tensor<T>& logits, const std::vector<uint8_t>& labels,
                            const std::vector<double>& weights) {
  return cross_entropy(logits, labels, weights, static_cast<Tensor<T>*>(nullptr));
}

}  // namespace pmap
