#include "driftadapt/nn.hpp"

#include "driftadapt/error.hpp"

#include <cmath>

namespace driftadapt::nn {

namespace {

Matrix uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

}  // namespace

Activation pack_images(const std::vector<const Image*>& images) {
  if (images.empty()) throw InputError("empty image batch");
  Activation a;
  a.n = static_cast<int>(images.size());
  a.h = images.front()->height;
  a.w = images.front()->width;
  a.c = 3;
  a.data.resize(static_cast<Eigen::Index>(a.n) * a.h * a.w, 3);
  const std::size_t per_image = static_cast<std::size_t>(a.h) * a.w * 3;
  for (int i = 0; i < a.n; ++i) {
    const Image& img = *images[static_cast<std::size_t>(i)];
    if (img.height != a.h || img.width != a.w || img.pixels.size() != per_image) {
      throw InputError("image batch has mixed shapes");
    }
    std::copy(img.pixels.begin(), img.pixels.end(), a.data.data() + per_image * static_cast<std::size_t>(i));
  }
  return a;
}

// ---------------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, const std::string& name, Rng& rng)
    : in_(in_channels), out_(out_channels) {
  const int fan_in = 9 * in_channels;
  weight_ = Parameter(name + ".weight",
                      uniform_matrix(fan_in, out_channels, std::sqrt(6.0 / fan_in), rng));
  bias_ = Parameter(name + ".bias", Matrix::Zero(1, out_channels));
}

Activation Conv2d::forward(const Activation& x) {
  if (x.c != in_) throw InputError("conv input channel mismatch");
  n_ = x.n;
  h_ = x.h;
  w_ = x.w;
  const Eigen::Index rows = static_cast<Eigen::Index>(n_) * h_ * w_;
  cols_.setZero(rows, 9 * in_);
  for (int b = 0; b < n_; ++b) {
    for (int y = 0; y < h_; ++y) {
      for (int xx = 0; xx < w_; ++xx) {
        const Eigen::Index r = (static_cast<Eigen::Index>(b) * h_ + y) * w_ + xx;
        double* dst = cols_.row(r).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h_) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w_) continue;
            const Eigen::Index src = (static_cast<Eigen::Index>(b) * h_ + sy) * w_ + sx;
            const double* s = x.data.row(src).data();
            std::copy(s, s + in_, dst + (ky * 3 + kx) * in_);
          }
        }
      }
    }
  }
  Activation out{n_, h_, w_, out_, Matrix()};
  out.data.noalias() = cols_ * weight_.value;
  out.data.rowwise() += bias_.value.row(0);
  return out;
}

Activation Conv2d::backward(const Activation& grad_out) {
  weight_.grad.noalias() += cols_.transpose() * grad_out.data;
  bias_.grad += grad_out.data.colwise().sum();
  const Matrix dcols = grad_out.data * weight_.value.transpose();
  Activation dx{n_, h_, w_, in_, Matrix::Zero(static_cast<Eigen::Index>(n_) * h_ * w_, in_)};
  for (int b = 0; b < n_; ++b) {
    for (int y = 0; y < h_; ++y) {
      for (int xx = 0; xx < w_; ++xx) {
        const Eigen::Index r = (static_cast<Eigen::Index>(b) * h_ + y) * w_ + xx;
        const double* src = dcols.row(r).data();
        for (int ky = 0; ky < 3; ++ky) {
          const int sy = y + ky - 1;
          if (sy < 0 || sy >= h_) continue;
          for (int kx = 0; kx < 3; ++kx) {
            const int sx = xx + kx - 1;
            if (sx < 0 || sx >= w_) continue;
            const Eigen::Index dst = (static_cast<Eigen::Index>(b) * h_ + sy) * w_ + sx;
            double* d = dx.data.row(dst).data();
            const double* s = src + (ky * 3 + kx) * in_;
            for (int c = 0; c < in_; ++c) d[c] += s[c];
          }
        }
      }
    }
  }
  return dx;
}

void Conv2d::collect_state(std::vector<StateEntry>& out) {
  out.emplace_back(weight_.name, &weight_.value);
  out.emplace_back(bias_.name, &bias_.value);
}

// ---------------------------------------------------------------------------

BatchNorm::BatchNorm(int features, const std::string& name, double momentum, double eps)
    : momentum_(momentum), eps_(eps) {
  gamma_ = Parameter(name + ".gamma", Matrix::Ones(1, features));
  beta_ = Parameter(name + ".beta", Matrix::Zero(1, features));
  running_mean_ = Matrix::Zero(1, features);
  running_var_ = Matrix::Ones(1, features);
}

Matrix BatchNorm::forward(const Matrix& x, Mode mode) {
  const auto m = x.rows();
  if (x.cols() != gamma_.value.cols()) throw InputError("batch norm feature mismatch");
  last_mode_ = mode;
  RowVector mean, var;
  if (mode == Mode::train) {
    mean = x.colwise().mean();
    var = (x.rowwise() - mean).array().square().colwise().mean().matrix();
    update_running(x, mean, var);
  } else {
    mean = running_mean_.row(0);
    var = running_var_.row(0);
  }
  inv_std_ = (var.array() + eps_).rsqrt().matrix();
  xhat_ = (x.rowwise() - mean).array().rowwise() * inv_std_.array();
  Matrix y = xhat_.array().rowwise() * gamma_.value.row(0).array();
  y.rowwise() += beta_.value.row(0);
  return y;
}

void BatchNorm::update_running(const Matrix& x, const RowVector& mean, const RowVector& var) {
  const auto m = x.rows();
  if (stats_mask_.empty()) {
    const double unbias = m > 1 ? static_cast<double>(m) / static_cast<double>(m - 1) : 1.0;
    running_mean_ = (1.0 - momentum_) * running_mean_ + momentum_ * mean;
    running_var_ = (1.0 - momentum_) * running_var_ + momentum_ * (var * unbias);
    return;
  }
  const auto samples = static_cast<Eigen::Index>(stats_mask_.size());
  if (m % samples != 0) throw InputError("batch norm statistics mask does not divide the batch");
  const auto per = m / samples;
  Eigen::Index count = 0;
  for (bool b : stats_mask_) count += b ? per : 0;
  if (count == 0) return;
  RowVector sub_mean = RowVector::Zero(x.cols());
  for (Eigen::Index s = 0; s < samples; ++s) {
    if (stats_mask_[static_cast<std::size_t>(s)]) sub_mean += x.middleRows(s * per, per).colwise().sum();
  }
  sub_mean /= static_cast<double>(count);
  RowVector sub_var = RowVector::Zero(x.cols());
  for (Eigen::Index s = 0; s < samples; ++s) {
    if (!stats_mask_[static_cast<std::size_t>(s)]) continue;
    sub_var += (x.middleRows(s * per, per).rowwise() - sub_mean).array().square().colwise().sum().matrix();
  }
  sub_var /= static_cast<double>(count > 1 ? count - 1 : 1);
  running_mean_ = (1.0 - momentum_) * running_mean_ + momentum_ * sub_mean;
  running_var_ = (1.0 - momentum_) * running_var_ + momentum_ * sub_var;
}

Matrix BatchNorm::backward(const Matrix& grad_out) {
  gamma_.grad += (grad_out.array() * xhat_.array()).colwise().sum().matrix();
  beta_.grad += grad_out.colwise().sum();
  const Matrix dxhat = grad_out.array().rowwise() * gamma_.value.row(0).array();
  if (last_mode_ == Mode::eval) {
    return dxhat.array().rowwise() * inv_std_.array();
  }
  const double m = static_cast<double>(grad_out.rows());
  const RowVector sum_d = dxhat.colwise().sum();
  const RowVector sum_dx = (dxhat.array() * xhat_.array()).colwise().sum().matrix();
  Matrix dx = (m * dxhat).rowwise() - sum_d;
  dx -= (xhat_.array().rowwise() * sum_dx.array()).matrix();
  return dx.array().rowwise() * (inv_std_.array() / m);
}

void BatchNorm::collect_state(std::vector<StateEntry>& out) {
  const auto base = gamma_.name.substr(0, gamma_.name.size() - 6);
  out.emplace_back(gamma_.name, &gamma_.value);
  out.emplace_back(beta_.name, &beta_.value);
  out.emplace_back(base + ".running_mean", &running_mean_);
  out.emplace_back(base + ".running_var", &running_var_);
}

// ---------------------------------------------------------------------------

Matrix Relu::forward(const Matrix& x) {
  mask_ = (x.array() > 0.0).cast<double>().matrix();
  return x.cwiseMax(0.0);
}

Matrix Relu::backward(const Matrix& grad_out) const { return grad_out.cwiseProduct(mask_); }

Activation MaxPool2::forward(const Activation& x) {
  n_ = x.n;
  h_ = x.h;
  w_ = x.w;
  c_ = x.c;
  const int oh = h_ / 2, ow = w_ / 2;
  if (oh == 0 || ow == 0) throw InputError("max pool input too small");
  Activation out{n_, oh, ow, c_, Matrix(static_cast<Eigen::Index>(n_) * oh * ow, c_)};
  argmax_.assign(static_cast<std::size_t>(out.data.size()), 0);
  for (int b = 0; b < n_; ++b) {
    for (int y = 0; y < oh; ++y) {
      for (int xx = 0; xx < ow; ++xx) {
        const Eigen::Index orow = (static_cast<Eigen::Index>(b) * oh + y) * ow + xx;
        for (int c = 0; c < c_; ++c) {
          double best = -std::numeric_limits<double>::infinity();
          Eigen::Index best_idx = 0;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const Eigen::Index irow = (static_cast<Eigen::Index>(b) * h_ + 2 * y + dy) * w_ + 2 * xx + dx;
              const double v = x.data(irow, c);
              if (v > best) {
                best = v;
                best_idx = irow * c_ + c;
              }
            }
          }
          out.data(orow, c) = best;
          argmax_[static_cast<std::size_t>(orow * c_ + c)] = best_idx;
        }
      }
    }
  }
  return out;
}

Activation MaxPool2::backward(const Activation& grad_out) const {
  Activation dx{n_, h_, w_, c_, Matrix::Zero(static_cast<Eigen::Index>(n_) * h_ * w_, c_)};
  for (Eigen::Index i = 0; i < grad_out.data.size(); ++i) {
    dx.data.data()[argmax_[static_cast<std::size_t>(i)]] += grad_out.data.data()[i];
  }
  return dx;
}

// ---------------------------------------------------------------------------

Linear::Linear(int in, int out, const std::string& name, Rng& rng) {
  weight_ = Parameter(name + ".weight", uniform_matrix(in, out, std::sqrt(6.0 / (in + out)), rng));
  bias_ = Parameter(name + ".bias", Matrix::Zero(1, out));
}

Matrix Linear::forward(const Matrix& x) {
  if (x.cols() != weight_.value.rows()) throw InputError("linear input dimension mismatch");
  input_ = x;
  Matrix y = x * weight_.value;
  y.rowwise() += bias_.value.row(0);
  return y;
}

Matrix Linear::backward(const Matrix& grad_out) {
  weight_.grad.noalias() += input_.transpose() * grad_out;
  bias_.grad += grad_out.colwise().sum();
  return grad_out * weight_.value.transpose();
}

void Linear::collect_state(std::vector<StateEntry>& out) {
  out.emplace_back(weight_.name, &weight_.value);
  out.emplace_back(bias_.name, &bias_.value);
}

// ---------------------------------------------------------------------------

WeightNormLinear::WeightNormLinear(int in, int out, const std::string& name, Rng& rng) {
  Matrix v = uniform_matrix(out, in, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  Matrix g(1, out);
  for (int k = 0; k < out; ++k) g(0, k) = v.row(k).norm();
  direction_ = Parameter(name + ".direction", std::move(v));
  gain_ = Parameter(name + ".gain", std::move(g));
  bias_ = Parameter(name + ".bias", Matrix::Zero(1, out));
}

Matrix WeightNormLinear::direction() const {
  Matrix d = direction_.value;
  for (Eigen::Index k = 0; k < d.rows(); ++k) d.row(k) /= d.row(k).norm();
  return d;
}

Matrix WeightNormLinear::effective_weight() const {
  Matrix w = direction();
  for (Eigen::Index k = 0; k < w.rows(); ++k) w.row(k) *= gain_.value(0, k);
  return w;
}

Matrix WeightNormLinear::forward(const Matrix& x) {
  if (x.cols() != direction_.value.cols()) throw InputError("classifier input dimension mismatch");
  input_ = x;
  weight_cache_ = effective_weight();
  Matrix y = x * weight_cache_.transpose();
  y.rowwise() += bias_.value.row(0);
  return y;
}

Matrix WeightNormLinear::backward(const Matrix& grad_out, bool accumulate_parameter_grads) {
  if (accumulate_parameter_grads) {
    const Matrix dw = grad_out.transpose() * input_;  // out x in
    bias_.grad += grad_out.colwise().sum();
    for (Eigen::Index k = 0; k < dw.rows(); ++k) {
      const double norm = direction_.value.row(k).norm();
      const RowVector unit = direction_.value.row(k) / norm;
      const double proj = dw.row(k).dot(unit);
      gain_.grad(0, k) += proj;
      direction_.grad.row(k) += (gain_.value(0, k) / norm) * (dw.row(k) - proj * unit);
    }
  }
  return grad_out * weight_cache_;
}

void WeightNormLinear::collect_state(std::vector<StateEntry>& out) {
  out.emplace_back(direction_.name, &direction_.value);
  out.emplace_back(gain_.name, &gain_.value);
  out.emplace_back(bias_.name, &bias_.value);
}

}  // namespace driftadapt::nn
