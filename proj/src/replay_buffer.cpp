#include "driftadapt/replay_buffer.hpp"

#include "driftadapt/error.hpp"

#include <algorithm>
#include <numeric>

namespace driftadapt {

std::string to_string(RetentionPolicy policy) {
  return policy == RetentionPolicy::confidence ? "confidence" : "random";
}

RetentionPolicy parse_retention_policy(const std::string& name) {
  if (name == "confidence") return RetentionPolicy::confidence;
  if (name == "random") return RetentionPolicy::random;
  throw ConfigError("unknown buffer policy '" + name + "'");
}

ReplayBuffer::ReplayBuffer(std::size_t capacity, int class_count, RetentionPolicy policy,
                           std::uint64_t seed)
    : capacity_(capacity), policy_(policy), seed_(seed), rng_(seed) {
  if (class_count < 1) throw ConfigError("replay buffer needs at least one class");
  if (capacity < static_cast<std::size_t>(class_count)) {
    throw ConfigError("replay buffer capacity " + std::to_string(capacity) + " is below the class count " +
                      std::to_string(class_count));
  }
  slots_.resize(static_cast<std::size_t>(class_count));
}

std::size_t ReplayBuffer::size() const {
  std::size_t n = 0;
  for (const auto& s : slots_) n += s.size();
  return n;
}

const std::vector<StoredSample>& ReplayBuffer::slots(int label) const {
  if (label < 0 || label >= class_count()) throw InputError("buffer class out of range");
  return slots_[static_cast<std::size_t>(label)];
}

std::vector<StoredSample> ReplayBuffer::contents() const {
  std::vector<StoredSample> out;
  out.reserve(size());
  for (const auto& s : slots_) out.insert(out.end(), s.begin(), s.end());
  return out;
}

std::vector<TaggedSample> ReplayBuffer::merge(std::span<const Sample> chunk) const {
  std::vector<TaggedSample> out;
  out.reserve(chunk.size() + size());
  for (const auto& s : chunk) out.push_back({s, SampleTag::incoming});
  for (const auto& cls : slots_) {
    for (const auto& s : cls) out.push_back({s.sample, SampleTag::replay});
  }
  return out;
}

std::vector<StoredSample> ReplayBuffer::select(std::vector<StoredSample> candidates, std::size_t keep) {
  if (candidates.size() <= keep) return candidates;
  if (policy_ == RetentionPolicy::confidence) {
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const StoredSample& a, const StoredSample& b) { return a.confidence > b.confidence; });
    candidates.resize(keep);
    return candidates;
  }
  // Seeded uniform draw without replacement, kept in input order.
  std::vector<std::size_t> idx(candidates.size());
  std::iota(idx.begin(), idx.end(), 0);
  rng_.shuffle(idx.begin(), idx.end());
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  std::vector<StoredSample> out;
  out.reserve(keep);
  for (auto i : idx) out.push_back(std::move(candidates[i]));
  return out;
}

void ReplayBuffer::repopulate(std::span<const Sample> chunk, std::span<const int> pseudolabels,
                              std::span<const double> confidences) {
  if (pseudolabels.size() != chunk.size() || confidences.size() != chunk.size()) {
    throw InputError("pseudolabels and confidences must align with chunk samples");
  }
  for (int y : pseudolabels) {
    if (y < 0 || y >= class_count()) throw InputError("pseudolabel " + std::to_string(y) + " out of range");
  }
  if (chunk.empty()) return;

  const std::size_t cap = per_class_cap();
  std::vector<std::vector<StoredSample>> incoming(slots_.size());
  for (std::size_t i = 0; i < chunk.size(); ++i) {
    incoming[static_cast<std::size_t>(pseudolabels[i])].push_back({chunk[i], pseudolabels[i], confidences[i]});
  }
  for (std::size_t k = 0; k < slots_.size(); ++k) {
    auto kept = select(std::move(incoming[k]), cap);
    if (kept.size() < cap) {
      auto previous = select(std::move(slots_[k]), cap - kept.size());
      kept.insert(kept.end(), std::make_move_iterator(previous.begin()), std::make_move_iterator(previous.end()));
    }
    slots_[k] = std::move(kept);
  }
}

nlohmann::json ReplayBuffer::snapshot() const {
  nlohmann::json doc;
  doc["capacity"] = capacity_;
  doc["class_count"] = class_count();
  doc["policy"] = to_string(policy_);
  doc["seed"] = seed_;
  doc["rng"] = rng_.state();
  doc["slots"] = nlohmann::json::array();
  for (const auto& cls : slots_) {
    auto arr = nlohmann::json::array();
    for (const auto& s : cls) {
      arr.push_back({{"domain", s.sample.key.domain},
                     {"index", s.sample.key.index},
                     {"pseudolabel", s.pseudolabel},
                     {"confidence", s.confidence}});
    }
    doc["slots"].push_back(std::move(arr));
  }
  return doc;
}

ReplayBuffer ReplayBuffer::restore(const nlohmann::json& doc,
                                   const std::function<ImagePtr(SampleKey)>& resolve) {
  try {
    ReplayBuffer buf(doc.at("capacity").get<std::size_t>(), doc.at("class_count").get<int>(),
                     parse_retention_policy(doc.at("policy").get<std::string>()),
                     doc.at("seed").get<std::uint64_t>());
    buf.rng_.set_state(doc.at("rng").get<std::string>());
    const auto& slots = doc.at("slots");
    for (std::size_t k = 0; k < slots.size() && k < buf.slots_.size(); ++k) {
      for (const auto& s : slots[k]) {
        SampleKey key{s.at("domain").get<std::int32_t>(), s.at("index").get<std::int32_t>()};
        buf.slots_[k].push_back({Sample{key, resolve(key)}, s.at("pseudolabel").get<int>(),
                                 s.at("confidence").get<double>()});
      }
    }
    buf.check_invariants();
    return buf;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed buffer snapshot: ") + e.what());
  }
}

void ReplayBuffer::check_invariants() const {
  const auto cap = per_class_cap();
  for (std::size_t k = 0; k < slots_.size(); ++k) {
    if (slots_[k].size() > cap) throw ValidationError("buffer class exceeds its per-class cap");
    for (const auto& s : slots_[k]) {
      if (s.pseudolabel != static_cast<int>(k)) throw ValidationError("buffer sample stored under the wrong class");
    }
  }
  if (size() > capacity_) throw ValidationError("buffer exceeds its capacity");
}

}  // namespace driftadapt
