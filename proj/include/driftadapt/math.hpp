#pragma once

#include "driftadapt/types.hpp"

namespace driftadapt {

/// A scalar objective together with its gradient with respect to the operation's
/// differentiable input (documented per function).
struct LossResult {
  double value = 0.0;
  Matrix grad;
};

Matrix softmax_rows(const Matrix& logits);
Matrix log_softmax_rows(const Matrix& logits);

/// Rows scaled to unit L2 norm; zero rows stay zero.
Matrix l2_normalize_rows(const Matrix& m);

std::vector<int> argmax_rows(const Matrix& m);

/// Backpropagates dL/dp through p = softmax(z), row by row.
Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs);

}  // namespace driftadapt
