#pragma once

#include "driftadapt/math.hpp"
#include "driftadapt/types.hpp"

#include <span>
#include <string>
#include <vector>

namespace driftadapt {

// Probability-space objectives. Each returns the value and dL/dprobs; rows of
// `probs` must be distributions (sum to 1 within 1e-5), otherwise InputError.

/// Mean per-sample Shannon entropy, in [0, ln C].
LossResult entropy_loss(const Matrix& probs);

/// sum_k pbar_k ln pbar_k over the batch-mean prediction, in [-ln C, 0].
LossResult diversity_loss(const Matrix& probs);

/// KL(pbar || uniform) = sum_k pbar_k ln(C pbar_k); zero iff pbar is uniform.
LossResult equal_diversity_loss(const Matrix& probs);

/// Mean negative log-probability of `labels`.
LossResult pseudolabel_ce(const Matrix& probs, std::span<const int> labels);

void validate_probabilities(const Matrix& probs);

struct PseudolabelAssignment {
  std::vector<int> labels;
  std::vector<double> confidences;  // max softmax probability per sample
  Matrix centroids;                 // C x d, rows of empty classes are zero
  std::vector<bool> empty;          // per class
};

/// Centroid refinement: a soft round weighted by `probs` on L2-normalized
/// features, then `rounds - 1` hard rounds, each assigning samples to the
/// nearest non-empty centroid by cosine distance (lowest index wins ties).
PseudolabelAssignment refine_pseudolabels(const Matrix& features, const Matrix& probs, int rounds = 2);

struct ContrastiveResult {
  double value = 0.0;
  Matrix grad;                  // dL/d incoming_features; buffer prototypes are constants
  std::size_t used = 0;         // incoming samples that had a prototype
  bool all_excluded = false;
};

/// InfoNCE between incoming features and per-class prototypes of the buffer
/// features (normalized means of normalized features). Incoming samples whose
/// class has no buffer prototype are excluded from the mean.
ContrastiveResult prototypical_contrastive_loss(const Matrix& incoming_features,
                                                std::span<const int> incoming_labels,
                                                const Matrix& buffer_features,
                                                std::span<const int> buffer_labels, double tau);

enum class Method { cshot, conda, uclgv };

std::string to_string(Method method);
Method parse_method(const std::string& name);

struct LossWeights {
  double beta = 0.3;    // pseudolabel cross-entropy
  double lambda = 1.0;  // prototypical contrastive term
  double tau = 0.1;     // contrastive temperature
};

enum class SampleTag { incoming, replay };

/// One minibatch as seen by the objective.
struct LossBatch {
  Matrix probs;     // B x C
  Matrix features;  // B x d
  std::vector<int> pseudolabels;
  std::vector<SampleTag> tags;
};

/// Prototype source for the contrastive term (features of buffer samples).
struct ReplayFeatures {
  Matrix features;
  std::vector<int> labels;
};

struct LossBreakdown {
  double total = 0.0;
  double ce = 0.0;          // unweighted
  double entropy = 0.0;
  double diversity = 0.0;   // diversity for cshot, equal diversity otherwise
  double contrastive = 0.0; // unweighted
  Matrix grad_probs;
  Matrix grad_features;
  bool contrastive_all_excluded = false;
};

/// cshot: beta CE + entropy + diversity.
/// conda: beta CE + entropy + equal diversity.
/// uclgv: conda + lambda * contrastive(incoming rows vs replay prototypes).
/// conda and uclgv require `replay` (may be empty); ConfigError otherwise.
LossBreakdown total_adaptation_loss(Method method, const LossBatch& batch, const ReplayFeatures* replay,
                                   const LossWeights& weights);

}  // namespace driftadapt
