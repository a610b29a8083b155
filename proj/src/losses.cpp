#include "driftadapt/losses.hpp"

#include "driftadapt/error.hpp"

#include <cmath>
#include <limits>
#include <map>

namespace driftadapt {

namespace {

constexpr double kTiny = std::numeric_limits<double>::min();

double xlogx(double p) { return p > 0.0 ? p * std::log(p) : 0.0; }

double safe_log(double p) { return std::log(std::max(p, kTiny)); }

}  // namespace

void validate_probabilities(const Matrix& probs) {
  if (probs.rows() == 0 || probs.cols() == 0) throw InputError("empty probability matrix");
  for (Eigen::Index r = 0; r < probs.rows(); ++r) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      const double p = probs(r, c);
      if (!std::isfinite(p) || p < 0.0 || p > 1.0 + 1e-12) {
        throw InputError("probability row " + std::to_string(r) + " has invalid entries");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-5) {
      throw InputError("probability row " + std::to_string(r) + " does not sum to 1");
    }
  }
}

LossResult entropy_loss(const Matrix& probs) {
  validate_probabilities(probs);
  const double b = static_cast<double>(probs.rows());
  LossResult r;
  r.grad.resize(probs.rows(), probs.cols());
  double sum = 0.0;
  for (Eigen::Index i = 0; i < probs.size(); ++i) {
    const double p = probs.data()[i];
    sum -= xlogx(p);
    r.grad.data()[i] = -(safe_log(p) + 1.0) / b;
  }
  r.value = sum / b;
  return r;
}

LossResult diversity_loss(const Matrix& probs) {
  validate_probabilities(probs);
  const double b = static_cast<double>(probs.rows());
  const RowVector mean = probs.colwise().mean();
  LossResult r;
  r.value = 0.0;
  RowVector g(mean.size());
  for (Eigen::Index k = 0; k < mean.size(); ++k) {
    r.value += xlogx(mean(k));
    g(k) = (safe_log(mean(k)) + 1.0) / b;
  }
  r.grad = g.replicate(probs.rows(), 1);
  return r;
}

LossResult equal_diversity_loss(const Matrix& probs) {
  validate_probabilities(probs);
  const double b = static_cast<double>(probs.rows());
  const double c = static_cast<double>(probs.cols());
  const RowVector mean = probs.colwise().mean();
  LossResult r;
  r.value = 0.0;
  RowVector g(mean.size());
  for (Eigen::Index k = 0; k < mean.size(); ++k) {
    if (mean(k) > 0.0) r.value += mean(k) * std::log(mean(k) * c);
    g(k) = (safe_log(mean(k) * c) + 1.0) / b;
  }
  r.value = std::max(r.value, 0.0);
  r.grad = g.replicate(probs.rows(), 1);
  return r;
}

LossResult pseudolabel_ce(const Matrix& probs, std::span<const int> labels) {
  validate_probabilities(probs);
  if (labels.size() != static_cast<std::size_t>(probs.rows())) {
    throw InputError("probabilities and pseudolabels disagree on batch size");
  }
  const double b = static_cast<double>(probs.rows());
  LossResult r;
  r.grad = Matrix::Zero(probs.rows(), probs.cols());
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    const int y = labels[static_cast<std::size_t>(i)];
    if (y < 0 || y >= probs.cols()) throw InputError("pseudolabel out of range");
    const double p = std::max(probs(i, y), kTiny);
    r.value -= std::log(p) / b;
    r.grad(i, y) = -1.0 / (p * b);
  }
  return r;
}

// ---------------------------------------------------------------------------

PseudolabelAssignment refine_pseudolabels(const Matrix& features, const Matrix& probs, int rounds) {
  const auto n = features.rows();
  if (n < 1) throw InputError("pseudolabel refinement needs at least one sample");
  if (rounds < 1) throw InputError("pseudolabel refinement needs rounds >= 1");
  if (probs.rows() != n) throw InputError("features and probabilities disagree on sample count");
  validate_probabilities(probs);
  const auto classes = probs.cols();
  const Matrix z = l2_normalize_rows(features);

  PseudolabelAssignment out;
  out.confidences.resize(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) out.confidences[static_cast<std::size_t>(i)] = probs.row(i).maxCoeff();

  Matrix weights = probs;  // soft round
  for (int round = 0; round < rounds; ++round) {
    const RowVector mass = weights.colwise().sum();
    out.centroids = weights.transpose() * z;
    out.empty.assign(static_cast<std::size_t>(classes), false);
    for (Eigen::Index k = 0; k < classes; ++k) {
      if (mass(k) > 0.0) {
        out.centroids.row(k) /= mass(k);
      } else {
        out.centroids.row(k).setZero();
        out.empty[static_cast<std::size_t>(k)] = true;
      }
    }
    const Matrix unit = l2_normalize_rows(out.centroids);
    const Matrix sims = z * unit.transpose();  // cosine similarity; distance = 1 - sim
    out.labels.assign(static_cast<std::size_t>(n), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = -1;
      double best_sim = -std::numeric_limits<double>::infinity();
      for (Eigen::Index k = 0; k < classes; ++k) {
        if (out.empty[static_cast<std::size_t>(k)]) continue;
        if (sims(i, k) > best_sim) {
          best_sim = sims(i, k);
          best = static_cast<int>(k);
        }
      }
      if (best < 0) throw InputError("all pseudolabel centroids are empty");
      out.labels[static_cast<std::size_t>(i)] = best;
    }
    if (round + 1 < rounds) {
      weights.setZero();
      for (Eigen::Index i = 0; i < n; ++i) weights(i, out.labels[static_cast<std::size_t>(i)]) = 1.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

ContrastiveResult prototypical_contrastive_loss(const Matrix& incoming_features,
                                                std::span<const int> incoming_labels,
                                                const Matrix& buffer_features,
                                                std::span<const int> buffer_labels, double tau) {
  if (!(tau > 0.0)) throw InputError("contrastive temperature must be positive");
  if (incoming_labels.size() != static_cast<std::size_t>(incoming_features.rows()) ||
      buffer_labels.size() != static_cast<std::size_t>(buffer_features.rows())) {
    throw InputError("contrastive features and labels disagree on sample count");
  }
  ContrastiveResult out;
  out.grad = Matrix::Zero(incoming_features.rows(), incoming_features.cols());
  if (buffer_features.rows() > 0 && buffer_features.cols() != incoming_features.cols()) {
    throw InputError("incoming and buffer features differ in dimension");
  }

  // Prototypes: normalized mean of normalized buffer features, one per present class.
  std::map<int, RowVector> sums;
  const Matrix zb = l2_normalize_rows(buffer_features);
  for (Eigen::Index i = 0; i < zb.rows(); ++i) {
    auto [it, inserted] = sums.try_emplace(buffer_labels[static_cast<std::size_t>(i)],
                                           RowVector::Zero(zb.cols()));
    it->second += zb.row(i);
  }
  std::vector<int> classes;
  Matrix protos(static_cast<Eigen::Index>(sums.size()), incoming_features.cols());
  std::map<int, Eigen::Index> slot;
  for (const auto& [label, s] : sums) {
    const auto row = static_cast<Eigen::Index>(classes.size());
    const double norm = s.norm();
    protos.row(row) = norm > 0.0 ? RowVector(s / norm) : RowVector(s);
    slot[label] = row;
    classes.push_back(label);
  }

  std::vector<Eigen::Index> used_rows;
  for (Eigen::Index i = 0; i < incoming_features.rows(); ++i) {
    if (slot.count(incoming_labels[static_cast<std::size_t>(i)])) used_rows.push_back(i);
  }
  out.used = used_rows.size();
  if (used_rows.empty()) {
    out.all_excluded = true;
    return out;
  }

  const double inv_count = 1.0 / static_cast<double>(used_rows.size());
  for (Eigen::Index i : used_rows) {
    const RowVector x = incoming_features.row(i);
    const double norm = x.norm();
    if (norm == 0.0) continue;
    const RowVector z = x / norm;
    const Eigen::VectorXd logits = (protos * z.transpose()) / tau;
    const double mx = logits.maxCoeff();
    const Eigen::VectorXd e = (logits.array() - mx).exp();
    const double lse = mx + std::log(e.sum());
    const Eigen::VectorXd soft = e / e.sum();
    const Eigen::Index y = slot.at(incoming_labels[static_cast<std::size_t>(i)]);
    out.value += (lse - logits(y)) * inv_count;
    // dL/dz = (sum_j soft_j c_j - c_y) / tau; project through z = x/|x|.
    RowVector dz = (soft.transpose() * protos - protos.row(y)) / tau;
    const RowVector dx = (dz - dz.dot(z) * z) / norm;
    out.grad.row(i) = dx * inv_count;
  }
  return out;
}

// ---------------------------------------------------------------------------

std::string to_string(Method method) {
  switch (method) {
    case Method::cshot: return "cshot";
    case Method::conda: return "conda";
    case Method::uclgv: return "uclgv";
  }
  return "unknown";
}

Method parse_method(const std::string& name) {
  if (name == "cshot") return Method::cshot;
  if (name == "conda") return Method::conda;
  if (name == "uclgv") return Method::uclgv;
  throw ConfigError("unknown method '" + name + "' (expected cshot, conda or uclgv)");
}

LossBreakdown total_adaptation_loss(Method method, const LossBatch& batch, const ReplayFeatures* replay,
                                   const LossWeights& weights) {
  if (method != Method::cshot && replay == nullptr) {
    throw ConfigError(to_string(method) + " requires a replay buffer");
  }
  const auto rows = static_cast<std::size_t>(batch.probs.rows());
  if (batch.features.rows() != batch.probs.rows() || batch.pseudolabels.size() != rows ||
      batch.tags.size() != rows) {
    throw InputError("loss batch components disagree on sample count");
  }

  LossBreakdown out;
  const auto ce = pseudolabel_ce(batch.probs, batch.pseudolabels);
  const auto ent = entropy_loss(batch.probs);
  const auto div = method == Method::cshot ? diversity_loss(batch.probs) : equal_diversity_loss(batch.probs);
  out.ce = ce.value;
  out.entropy = ent.value;
  out.diversity = div.value;
  out.total = weights.beta * ce.value + ent.value + div.value;
  out.grad_probs = weights.beta * ce.grad + ent.grad + div.grad;
  out.grad_features = Matrix::Zero(batch.features.rows(), batch.features.cols());

  if (method == Method::uclgv && weights.lambda != 0.0) {
    std::vector<Eigen::Index> incoming;
    for (std::size_t i = 0; i < rows; ++i) {
      if (batch.tags[i] == SampleTag::incoming) incoming.push_back(static_cast<Eigen::Index>(i));
    }
    Matrix feats(static_cast<Eigen::Index>(incoming.size()), batch.features.cols());
    std::vector<int> labels;
    for (std::size_t j = 0; j < incoming.size(); ++j) {
      feats.row(static_cast<Eigen::Index>(j)) = batch.features.row(incoming[j]);
      labels.push_back(batch.pseudolabels[static_cast<std::size_t>(incoming[j])]);
    }
    const auto pcl = prototypical_contrastive_loss(feats, labels, replay->features, replay->labels, weights.tau);
    out.contrastive = pcl.value;
    out.contrastive_all_excluded = pcl.all_excluded;
    out.total += weights.lambda * pcl.value;
    for (std::size_t j = 0; j < incoming.size(); ++j) {
      out.grad_features.row(incoming[j]) = weights.lambda * pcl.grad.row(static_cast<Eigen::Index>(j));
    }
  }
  return out;
}

}  // namespace driftadapt
