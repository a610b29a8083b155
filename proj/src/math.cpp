#include "driftadapt/math.hpp"

#include <cmath>

namespace driftadapt {

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double mx = logits.row(r).maxCoeff();
    const double lse = mx + std::log((logits.row(r).array() - mx).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

Matrix softmax_rows(const Matrix& logits) { return log_softmax_rows(logits).array().exp(); }

Matrix l2_normalize_rows(const Matrix& m) {
  Matrix out = m;
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    const double n = out.row(r).norm();
    if (n > 0.0) out.row(r) /= n;
  }
  return out;
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    Eigen::Index idx;
    m.row(r).maxCoeff(&idx);
    out[static_cast<std::size_t>(r)] = static_cast<int>(idx);
  }
  return out;
}

Matrix softmax_backward(const Matrix& probs, const Matrix& grad_probs) {
  const Eigen::VectorXd inner = (probs.array() * grad_probs.array()).rowwise().sum();
  return probs.array() * (grad_probs.colwise() - inner).array();
}

}  // namespace driftadapt
