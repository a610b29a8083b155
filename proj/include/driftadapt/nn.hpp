#pragma once

#include "driftadapt/rng.hpp"
#include "driftadapt/types.hpp"

#include <string>
#include <utility>
#include <vector>

namespace driftadapt::nn {

enum class Mode { train, eval };

struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;

  Parameter() = default;
  Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
    grad.setZero(value.rows(), value.cols());
  }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Named tensor reference used for checkpointing (parameters and running statistics).
using StateEntry = std::pair<std::string, Matrix*>;

/// NHWC activation: `data` has n*h*w rows and c columns.
struct Activation {
  int n = 0, h = 0, w = 0, c = 0;
  Matrix data;
};

Activation pack_images(const std::vector<const Image*>& images);

/// 3x3 convolution, stride 1, zero padding 1, via im2col.
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, const std::string& name, Rng& rng);

  Activation forward(const Activation& x);
  Activation backward(const Activation& grad_out);

  void collect(std::vector<Parameter*>& out) { out.push_back(&weight_); out.push_back(&bias_); }
  void collect_state(std::vector<StateEntry>& out);

 private:
  int in_ = 0, out_ = 0;
  Parameter weight_, bias_;
  Matrix cols_;
  int n_ = 0, h_ = 0, w_ = 0;
};

/// Batch normalization over matrix rows (per column statistics).
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(int features, const std::string& name, double momentum = 0.1, double eps = 1e-5);

  Matrix forward(const Matrix& x, Mode mode);
  Matrix backward(const Matrix& grad_out);

  void collect(std::vector<Parameter*>& out) { out.push_back(&gamma_); out.push_back(&beta_); }
  void collect_state(std::vector<StateEntry>& out);

  const Matrix& running_mean() const { return running_mean_; }
  const Matrix& running_var() const { return running_var_; }

  /// Restricts running-statistic updates to the rows of the flagged samples
  /// (rows are grouped per sample, in order). Normalization still uses the
  /// whole batch. An empty mask means every row counts.
  void set_statistics_mask(std::vector<bool> per_sample) { stats_mask_ = std::move(per_sample); }

 private:
  void update_running(const Matrix& x, const RowVector& mean, const RowVector& var);

  double momentum_ = 0.1, eps_ = 1e-5;
  Parameter gamma_, beta_;
  Matrix running_mean_, running_var_;
  Matrix xhat_;
  RowVector inv_std_;
  Mode last_mode_ = Mode::eval;
  std::vector<bool> stats_mask_;
};

class Relu {
 public:
  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& grad_out) const;

 private:
  Matrix mask_;
};

/// 2x2 max pooling with stride 2 (odd trailing rows/columns are dropped).
class MaxPool2 {
 public:
  Activation forward(const Activation& x);
  Activation backward(const Activation& grad_out) const;

 private:
  std::vector<Eigen::Index> argmax_;
  int n_ = 0, h_ = 0, w_ = 0, c_ = 0;
};

/// y = x W + b with W of shape in x out.
class Linear {
 public:
  Linear() = default;
  Linear(int in, int out, const std::string& name, Rng& rng);

  Matrix forward(const Matrix& x);
  Matrix backward(const Matrix& grad_out);

  int in_features() const { return static_cast<int>(weight_.value.rows()); }
  int out_features() const { return static_cast<int>(weight_.value.cols()); }

  void collect(std::vector<Parameter*>& out) { out.push_back(&weight_); out.push_back(&bias_); }
  void collect_state(std::vector<StateEntry>& out);

 private:
  Parameter weight_, bias_;
  Matrix input_;
};

/// Weight-normalized affine map: row k of the effective weight is gain_k * v_k / ||v_k||.
class WeightNormLinear {
 public:
  WeightNormLinear() = default;
  WeightNormLinear(int in, int out, const std::string& name, Rng& rng);

  Matrix forward(const Matrix& x);
  /// Returns the input gradient; parameter gradients accumulate only when requested.
  Matrix backward(const Matrix& grad_out, bool accumulate_parameter_grads);

  /// Row-normalized direction component.
  Matrix direction() const;
  Matrix effective_weight() const;

  void collect(std::vector<Parameter*>& out) {
    out.push_back(&direction_);
    out.push_back(&gain_);
    out.push_back(&bias_);
  }
  void collect_state(std::vector<StateEntry>& out);

 private:
  Parameter direction_, gain_, bias_;
  Matrix input_;
  Matrix weight_cache_;
};

}  // namespace driftadapt::nn
