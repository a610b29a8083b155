#pragma once

#include "driftadapt/degradation.hpp"
#include "driftadapt/losses.hpp"
#include "driftadapt/model.hpp"
#include "driftadapt/optim.hpp"
#include "driftadapt/replay_buffer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace driftadapt {

struct AdaptationConfig {
  Method method = Method::conda;
  double eta0 = 0.002;
  double momentum = 0.9;
  int chunk_size = 256;
  int epochs_per_chunk = 15;
  int minibatch_size = 64;
  bool grad_norm = true;
  GradNormScope grad_norm_scope = GradNormScope::global;
  double grad_norm_epsilon = 1e-12;
  std::size_t buffer_capacity = 420;
  /// Defaults to confidence for conda and random for uclgv.
  std::optional<RetentionPolicy> buffer_policy;
  LossWeights weights;
  int refine_rounds = 2;
  /// Batch-norm layers run in training mode (statistics update) during adaptation.
  bool adapt_batch_norm = true;
  /// Only incoming rows (not replayed ones) move the running statistics.
  bool bn_stats_incoming_only = true;
  std::uint64_t seed = 0;

  RetentionPolicy effective_policy() const;
  bool uses_buffer() const { return method != Method::cshot; }
  void validate() const;

  nlohmann::json to_json() const;
  /// Starts from defaults; unknown keys are rejected with ConfigError.
  static AdaptationConfig from_json(const nlohmann::json& doc);
};

struct IterationRecord {
  long iteration = 0;
  double lr = 0.0;
  double total = 0.0;
  double ce = 0.0;
  double entropy = 0.0;
  double diversity = 0.0;
  double contrastive = 0.0;
  double grad_norm_pre = 0.0;
  double grad_norm_post = 0.0;
  bool skipped = false;  // non-finite gradient, no optimizer step
};

struct ChunkRecord {
  int chunk_index = 0;
  int domain_index = 0;
  std::string domain_name;
  int level = 0;
  std::vector<SampleKey> incoming;
  std::size_t replay_count = 0;
  long total_iterations = 0;
  std::vector<IterationRecord> iterations;
  std::size_t buffer_size = 0;
  double accuracy = 0.0;
  std::vector<std::string> warnings;

  nlohmann::json to_json() const;
  static ChunkRecord from_json(const nlohmann::json& doc);
};

struct AdaptationTrace {
  nlohmann::json config;
  double source_accuracy = 0.0;
  std::vector<ChunkRecord> chunks;
  double final_accuracy = 0.0;

  std::vector<double> chunk_accuracies() const;
  nlohmann::json summary_json() const;
  nlohmann::json to_json() const;
  static AdaptationTrace from_json(const nlohmann::json& doc);
};

/// One JSON object per chunk.
void write_trace_jsonl(const std::filesystem::path& path, const AdaptationTrace& trace);
AdaptationTrace read_trace_jsonl(const std::filesystem::path& path, const nlohmann::json& summary);

/// Single-pass continual adaptation over a domain sequence. Each domain is
/// shuffled once (seeded by config seed and domain index) and cut into
/// consecutive chunks; every chunk is visited exactly once.
class ContinualEngine {
 public:
  ContinualEngine(Model source_model, const DomainSequence& sequence, AdaptationConfig config);

  bool finished() const { return next_chunk_ >= plan_.size(); }
  std::size_t chunk_count() const { return plan_.size(); }
  std::size_t next_chunk() const { return next_chunk_; }

  /// Adapts on the next planned chunk and returns its record.
  const ChunkRecord& step();
  const AdaptationTrace& run();

  /// Adapts on an arbitrary chunk (merge, refine, optimize, repopulate, evaluate).
  ChunkRecord adapt_chunk(std::span<const Sample> chunk, int chunk_index, int domain_index);

  const AdaptationTrace& trace() const { return trace_; }
  Model& model() { return model_; }
  const ReplayBuffer& buffer() const { return buffer_; }
  const AdaptationConfig& config() const { return config_; }

  /// Model, optimizer velocity, buffer, RNG state, position and trace.
  void save_checkpoint(const std::filesystem::path& path);
  static ContinualEngine resume(const std::filesystem::path& path, const DomainSequence& sequence);

 private:
  struct ChunkPlan {
    int domain = 0;
    std::vector<std::int32_t> indices;
  };

  ContinualEngine(Model model, const DomainSequence& sequence, AdaptationConfig config, bool evaluate_source);
  void build_plan();
  std::vector<Sample> chunk_samples(const ChunkPlan& plan) const;

  const DomainSequence* sequence_;
  AdaptationConfig config_;
  Model model_;
  SgdMomentum sgd_;
  ReplayBuffer buffer_;
  Rng rng_;
  std::vector<ChunkPlan> plan_;
  std::size_t next_chunk_ = 0;
  AdaptationTrace trace_;
};

/// Requires the sequence's class list to equal the model's (ConfigError otherwise).
AdaptationTrace run_continual(const Model& source_model, const DomainSequence& sequence,
                              const AdaptationConfig& config);

}  // namespace driftadapt
