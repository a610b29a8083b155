#pragma once

#include "driftadapt/archive.hpp"
#include "driftadapt/math.hpp"
#include "driftadapt/nn.hpp"
#include "driftadapt/types.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace driftadapt {

/// Width of the bottleneck feature space.
inline constexpr int kFeatureDim = 256;

struct InputShape {
  int height = 32;
  int width = 32;
};

/// Differentiable image-to-vector map. Implementations cache what backward needs.
class Backbone {
 public:
  virtual ~Backbone() = default;

  virtual std::string key() const = 0;
  virtual int output_dim() const = 0;
  virtual Matrix forward(const nn::Activation& x, nn::Mode mode) = 0;
  virtual void backward(const Matrix& grad_out) = 0;
  virtual void collect(std::vector<nn::Parameter*>& out) = 0;
  virtual void collect_state(std::vector<nn::StateEntry>& out) = 0;
  virtual void collect_batch_norms(std::vector<nn::BatchNorm*>&) {}
  virtual std::unique_ptr<Backbone> clone() const = 0;
};

using BackboneFactory = std::function<std::unique_ptr<Backbone>(InputShape, Rng&)>;

/// Registers a backbone under `key`; built-ins are "conv3", "conv3-wide" and "mlp".
void register_backbone(const std::string& key, BackboneFactory factory);
std::unique_ptr<Backbone> make_backbone(const std::string& key, InputShape shape, Rng& rng);
std::vector<std::string> backbone_keys();

/// Feature extractor: backbone, affine bottleneck to kFeatureDim, batch normalization.
class Encoder {
 public:
  Encoder(std::unique_ptr<Backbone> backbone, Rng& rng);
  Encoder(const Encoder& other);
  Encoder& operator=(const Encoder& other);
  Encoder(Encoder&&) noexcept = default;
  Encoder& operator=(Encoder&&) noexcept = default;

  Matrix forward(const nn::Activation& x, nn::Mode mode);
  void backward(const Matrix& grad_features);

  void collect(std::vector<nn::Parameter*>& out);
  void collect_state(std::vector<nn::StateEntry>& out);
  void collect_batch_norms(std::vector<nn::BatchNorm*>& out);
  const Backbone& backbone() const { return *backbone_; }

 private:
  std::unique_ptr<Backbone> backbone_;
  nn::Linear bottleneck_;
  nn::BatchNorm norm_;
};

/// Weight-normalized classifier head. Once frozen it never accumulates gradients.
class Hypothesis {
 public:
  Hypothesis(int class_count, Rng& rng);

  Matrix forward(const Matrix& features) { return head_.forward(features); }
  Matrix backward(const Matrix& grad_logits) { return head_.backward(grad_logits, !frozen_); }

  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }
  Matrix direction() const { return head_.direction(); }

  void collect(std::vector<nn::Parameter*>& out) { head_.collect(out); }
  void collect_state(std::vector<nn::StateEntry>& out) { head_.collect_state(out); }

 private:
  nn::WeightNormLinear head_;
  bool frozen_ = false;
};

struct ModelOutput {
  Matrix features;  // B x kFeatureDim
  Matrix logits;    // B x C
};

class Model {
 public:
  Model(const std::string& backbone_key, InputShape shape, std::vector<std::string> class_names,
        std::uint64_t seed);

  ModelOutput forward(const std::vector<const Image*>& batch, nn::Mode mode);
  /// Backpropagates from the logits plus an optional direct feature gradient.
  void backward(const Matrix& grad_logits, const Matrix* grad_features = nullptr);

  /// Encoder parameters, plus the head's while it is not frozen.
  std::vector<nn::Parameter*> trainable_parameters();
  std::vector<nn::Parameter*> hypothesis_parameters();
  std::vector<nn::StateEntry> state();
  void zero_grad();

  /// Per-sample flags for which rows of the next train-mode batches update
  /// batch-norm running statistics; empty restores the default (all rows).
  void set_statistics_mask(const std::vector<bool>& per_sample);

  /// Eval-mode forward in batches of `batch_size`.
  ModelOutput predict(const std::vector<const Image*>& images, std::size_t batch_size = 256);

  Hypothesis& hypothesis() { return hypothesis_; }
  const Hypothesis& hypothesis() const { return hypothesis_; }
  Encoder& encoder() { return encoder_; }

  int class_count() const { return static_cast<int>(class_names_.size()); }
  const std::vector<std::string>& class_names() const { return class_names_; }
  const std::string& backbone_key() const { return backbone_key_; }
  InputShape input_shape() const { return shape_; }
  const std::string& provenance() const { return provenance_; }
  void set_provenance(std::string hash) { provenance_ = std::move(hash); }

  /// Adds every state tensor under `prefix` plus model metadata to `archive`.
  void write_to(Archive& archive, const std::string& prefix = "model/");
  static Model read_from(const Archive& archive, const std::string& prefix = "model/");

 private:
  std::string backbone_key_;
  std::size_t statistics_mask_size_ = 0;
  InputShape shape_;
  std::vector<std::string> class_names_;
  std::string provenance_;
  Encoder encoder_;
  Hypothesis hypothesis_;
};

/// Mean cross-entropy against smoothed targets (1 - eps on the label, eps/(C-1)
/// elsewhere). Gradient is with respect to the logits.
LossResult label_smoothing_ce(const Matrix& logits, std::span<const int> labels, double eps);

struct SourceTrainingConfig {
  std::string backbone = "conv3";
  int epochs = 20;
  int minibatch_size = 64;
  double eta0 = 0.01;
  double momentum = 0.9;
  double label_smoothing = 0.1;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  static SourceTrainingConfig from_json(const nlohmann::json& doc);
};

struct SourceTrainingLog {
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

/// Supervised training with label smoothing; the returned model has a frozen head.
Model train_source(const LabeledDataset& dataset, const SourceTrainingConfig& config,
                   SourceTrainingLog* log = nullptr);

using Predictor = std::function<std::vector<int>(const std::vector<const Image*>&)>;

double evaluate_accuracy(const Predictor& predict, const LabeledDataset& dataset);
/// Evaluation-mode accuracy; running statistics are not touched.
double evaluate_accuracy(Model& model, const LabeledDataset& dataset);

void save_model(const std::filesystem::path& path, Model& model);
/// Refuses (ConfigError) when `expected_class_count` is given and differs.
Model load_model(const std::filesystem::path& path, std::optional<int> expected_class_count = {});

std::vector<const Image*> image_pointers(const LabeledDataset& dataset);

}  // namespace driftadapt
