#include "driftadapt/optim.hpp"

#include "driftadapt/error.hpp"

#include <cmath>

namespace driftadapt {

double lr_at(double eta0, long iteration, long total_iterations) {
  if (total_iterations <= 0) throw InputError("lr schedule needs total_iterations >= 1");
  if (iteration < 0 || iteration > total_iterations) {
    throw InputError("lr schedule iteration outside [0, total_iterations]");
  }
  const double p = static_cast<double>(iteration) / static_cast<double>(total_iterations);
  return eta0 * std::pow(1.0 + 10.0 * p, -0.75);
}

std::string to_string(GradNormScope scope) {
  return scope == GradNormScope::global ? "global" : "per_tensor";
}

GradNormScope parse_grad_norm_scope(const std::string& name) {
  if (name == "global") return GradNormScope::global;
  if (name == "per_tensor") return GradNormScope::per_tensor;
  throw ConfigError("unknown gradient normalization scope '" + name + "'");
}

double global_norm(std::span<Matrix* const> grads) {
  double sum = 0.0;
  for (const Matrix* g : grads) sum += g->squaredNorm();
  return std::sqrt(sum);
}

GradNormReport normalize_gradients(std::span<Matrix* const> grads, double epsilon,
                                   GradNormScope scope) {
  GradNormReport report;
  report.pre_norm = global_norm(grads);
  if (!std::isfinite(report.pre_norm)) {
    report.finite = false;
    report.post_norm = report.pre_norm;
    return report;
  }
  if (scope == GradNormScope::global) {
    if (report.pre_norm > epsilon) {
      const double inv = 1.0 / report.pre_norm;
      for (Matrix* g : grads) *g *= inv;
      report.applied = true;
    }
  } else {
    for (Matrix* g : grads) {
      const double n = g->norm();
      if (n > epsilon) {
        *g /= n;
        report.applied = true;
      }
    }
  }
  report.post_norm = global_norm(grads);
  return report;
}

GradNormReport normalize_gradients(std::span<nn::Parameter* const> params, double epsilon,
                                   GradNormScope scope) {
  std::vector<Matrix*> grads;
  grads.reserve(params.size());
  for (auto* p : params) grads.push_back(&p->grad);
  return normalize_gradients(std::span<Matrix* const>(grads), epsilon, scope);
}

void SgdMomentum::step(std::span<nn::Parameter* const> params, double lr) {
  for (auto* p : params) {
    auto [it, inserted] = velocity_.try_emplace(p->name);
    Matrix& v = it->second;
    if (inserted || v.rows() != p->grad.rows() || v.cols() != p->grad.cols()) {
      v = p->grad;
    } else {
      v = momentum_ * v + p->grad;
    }
    p->value.noalias() -= lr * v;
  }
}

}  // namespace driftadapt
