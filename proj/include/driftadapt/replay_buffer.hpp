#pragma once

#include "driftadapt/losses.hpp"
#include "driftadapt/rng.hpp"
#include "driftadapt/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace driftadapt {

/// Identifies a raw sample within a domain sequence.
struct SampleKey {
  std::int32_t domain = 0;
  std::int32_t index = 0;
  auto operator<=>(const SampleKey&) const = default;
};

/// An unlabeled sample: raw pixels and where they came from.
struct Sample {
  SampleKey key;
  ImagePtr pixels;
};

struct StoredSample {
  Sample sample;
  int pseudolabel = 0;
  double confidence = 0.0;
};

struct TaggedSample {
  Sample sample;
  SampleTag tag = SampleTag::incoming;
};

enum class RetentionPolicy { confidence, random };

std::string to_string(RetentionPolicy policy);
RetentionPolicy parse_retention_policy(const std::string& name);

/// Class-balanced store of raw samples with a per-class cap of floor(L / C).
/// Leftover capacity when C does not divide L is never used.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity, int class_count, RetentionPolicy policy, std::uint64_t seed);

  std::size_t capacity() const { return capacity_; }
  int class_count() const { return static_cast<int>(slots_.size()); }
  std::size_t per_class_cap() const { return capacity_ / slots_.size(); }
  RetentionPolicy policy() const { return policy_; }

  std::size_t size() const;
  bool empty() const { return size() == 0; }
  const std::vector<StoredSample>& slots(int label) const;
  /// All stored samples, class by class.
  std::vector<StoredSample> contents() const;

  /// Chunk samples tagged incoming followed by buffer samples tagged replay.
  std::vector<TaggedSample> merge(std::span<const Sample> chunk) const;

  /// Per class: keep up to the cap from the chunk (highest confidence first, or a
  /// seeded uniform draw), then fill remaining slots from the previous contents
  /// under the same policy.
  void repopulate(std::span<const Sample> chunk, std::span<const int> pseudolabels,
                  std::span<const double> confidences);

  /// Snapshot with sample keys (pixels are restored through `resolve`).
  nlohmann::json snapshot() const;
  static ReplayBuffer restore(const nlohmann::json& snapshot,
                              const std::function<ImagePtr(SampleKey)>& resolve);

  /// Throws if any invariant is violated; used by tests and the engine.
  void check_invariants() const;

 private:
  std::vector<StoredSample> select(std::vector<StoredSample> candidates, std::size_t keep);

  std::size_t capacity_;
  RetentionPolicy policy_;
  std::uint64_t seed_;
  Rng rng_;
  std::vector<std::vector<StoredSample>> slots_;
};

}  // namespace driftadapt
