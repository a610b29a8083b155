#pragma once

#include "driftadapt/nn.hpp"

#include <map>
#include <span>
#include <string>
#include <vector>

namespace driftadapt {

/// eta0 * (1 + 10 p)^(-0.75) with p = iteration / total_iterations.
double lr_at(double eta0, long iteration, long total_iterations);

enum class GradNormScope { global, per_tensor };

std::string to_string(GradNormScope scope);
GradNormScope parse_grad_norm_scope(const std::string& name);

struct GradNormReport {
  double pre_norm = 0.0;   // global L2 norm before scaling
  double post_norm = 0.0;  // global L2 norm after scaling, recomputed from the result
  bool applied = false;
  bool finite = true;      // false means nothing was touched
};

/// Global L2 norm over every entry of every gradient tensor.
double global_norm(std::span<Matrix* const> grads);

/// Rescales gradients to unit L2 norm. Global scope divides everything by one
/// scalar; per-tensor scope normalizes each tensor on its own. Norms at or
/// below `epsilon` are left unchanged. Non-finite gradients are reported and
/// left untouched.
GradNormReport normalize_gradients(std::span<Matrix* const> grads, double epsilon = 1e-12,
                                   GradNormScope scope = GradNormScope::global);
GradNormReport normalize_gradients(std::span<nn::Parameter* const> params, double epsilon = 1e-12,
                                   GradNormScope scope = GradNormScope::global);

/// SGD with heavy-ball momentum: v <- mu v + g; w <- w - lr v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9) : momentum_(momentum) {}

  void step(std::span<nn::Parameter* const> params, double lr);

  double momentum() const { return momentum_; }
  /// Velocity buffers keyed by parameter name.
  std::map<std::string, Matrix>& velocity() { return velocity_; }
  const std::map<std::string, Matrix>& velocity() const { return velocity_; }

 private:
  double momentum_;
  std::map<std::string, Matrix> velocity_;
};

}  // namespace driftadapt
