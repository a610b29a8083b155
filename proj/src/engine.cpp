#include "driftadapt/engine.hpp"

#include "driftadapt/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

namespace driftadapt {

RetentionPolicy AdaptationConfig::effective_policy() const {
  if (buffer_policy) return *buffer_policy;
  return method == Method::uclgv ? RetentionPolicy::random : RetentionPolicy::confidence;
}

void AdaptationConfig::validate() const {
  if (!(eta0 > 0.0) || !std::isfinite(eta0)) throw ConfigError("eta0 must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0,1)");
  if (minibatch_size < 1) throw ConfigError("minibatch_size must be >= 1");
  if (chunk_size < minibatch_size) throw ConfigError("chunk_size must be >= minibatch_size");
  if (epochs_per_chunk < 1) throw ConfigError("epochs_per_chunk must be >= 1");
  if (refine_rounds < 1) throw ConfigError("refine_rounds must be >= 1");
  if (!(weights.tau > 0.0)) throw ConfigError("tau must be positive");
  if (weights.beta < 0.0 || weights.lambda < 0.0) throw ConfigError("loss weights must be nonnegative");
  if (uses_buffer() && buffer_capacity == 0) throw ConfigError("buffer capacity must be positive");
  if (!(grad_norm_epsilon > 0.0)) throw ConfigError("grad_norm_epsilon must be positive");
}

nlohmann::json AdaptationConfig::to_json() const {
  return {{"method", to_string(method)},
          {"eta0", eta0},
          {"momentum", momentum},
          {"chunk_size", chunk_size},
          {"epochs_per_chunk", epochs_per_chunk},
          {"minibatch_size", minibatch_size},
          {"grad_norm", grad_norm},
          {"grad_norm_scope", to_string(grad_norm_scope)},
          {"grad_norm_epsilon", grad_norm_epsilon},
          {"buffer_capacity", buffer_capacity},
          {"buffer_policy", to_string(effective_policy())},
          {"beta", weights.beta},
          {"lambda", weights.lambda},
          {"tau", weights.tau},
          {"refine_rounds", refine_rounds},
          {"adapt_batch_norm", adapt_batch_norm},
          {"bn_stats_incoming_only", bn_stats_incoming_only},
          {"prototype_refresh", "per_iteration"},
          {"seed", seed}};
}

AdaptationConfig AdaptationConfig::from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known = {
      "method", "eta0", "momentum", "chunk_size", "epochs_per_chunk", "minibatch_size", "grad_norm",
      "grad_norm_scope", "grad_norm_epsilon", "buffer_capacity", "buffer_policy", "beta", "lambda", "tau",
      "refine_rounds", "adapt_batch_norm", "bn_stats_incoming_only", "prototype_refresh", "seed"};
  if (!doc.is_object()) throw ConfigError("adaptation config must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) throw ConfigError("unknown adaptation config key '" + key + "'");
  }
  AdaptationConfig c;
  try {
    if (doc.contains("method")) c.method = parse_method(doc["method"].get<std::string>());
    c.eta0 = doc.value("eta0", c.eta0);
    c.momentum = doc.value("momentum", c.momentum);
    c.chunk_size = doc.value("chunk_size", c.chunk_size);
    c.epochs_per_chunk = doc.value("epochs_per_chunk", c.epochs_per_chunk);
    c.minibatch_size = doc.value("minibatch_size", c.minibatch_size);
    c.grad_norm = doc.value("grad_norm", c.grad_norm);
    if (doc.contains("grad_norm_scope")) {
      c.grad_norm_scope = parse_grad_norm_scope(doc["grad_norm_scope"].get<std::string>());
    }
    c.grad_norm_epsilon = doc.value("grad_norm_epsilon", c.grad_norm_epsilon);
    c.buffer_capacity = doc.value("buffer_capacity", c.buffer_capacity);
    if (doc.contains("buffer_policy")) {
      c.buffer_policy = parse_retention_policy(doc["buffer_policy"].get<std::string>());
    }
    c.weights.beta = doc.value("beta", c.weights.beta);
    c.weights.lambda = doc.value("lambda", c.weights.lambda);
    c.weights.tau = doc.value("tau", c.weights.tau);
    c.refine_rounds = doc.value("refine_rounds", c.refine_rounds);
    c.adapt_batch_norm = doc.value("adapt_batch_norm", c.adapt_batch_norm);
    c.bn_stats_incoming_only = doc.value("bn_stats_incoming_only", c.bn_stats_incoming_only);
    c.seed = doc.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed adaptation config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------

nlohmann::json ChunkRecord::to_json() const {
  nlohmann::json doc;
  doc["chunk_index"] = chunk_index;
  doc["domain_index"] = domain_index;
  doc["domain_name"] = domain_name;
  doc["level"] = level;
  auto keys = nlohmann::json::array();
  for (const auto& k : incoming) keys.push_back({k.domain, k.index});
  doc["incoming"] = std::move(keys);
  doc["replay_count"] = replay_count;
  doc["total_iterations"] = total_iterations;
  auto its = nlohmann::json::array();
  for (const auto& it : iterations) {
    its.push_back({{"i", it.iteration},
                   {"lr", it.lr},
                   {"loss", it.total},
                   {"ce", it.ce},
                   {"entropy", it.entropy},
                   {"diversity", it.diversity},
                   {"contrastive", it.contrastive},
                   {"grad_norm_pre", it.grad_norm_pre},
                   {"grad_norm_post", it.grad_norm_post},
                   {"skipped", it.skipped}});
  }
  doc["iterations"] = std::move(its);
  doc["buffer_size"] = buffer_size;
  doc["accuracy"] = accuracy;
  doc["warnings"] = warnings;
  return doc;
}

ChunkRecord ChunkRecord::from_json(const nlohmann::json& doc) {
  ChunkRecord r;
  r.chunk_index = doc.at("chunk_index").get<int>();
  r.domain_index = doc.at("domain_index").get<int>();
  r.domain_name = doc.at("domain_name").get<std::string>();
  r.level = doc.at("level").get<int>();
  for (const auto& k : doc.at("incoming")) r.incoming.push_back({k.at(0).get<std::int32_t>(), k.at(1).get<std::int32_t>()});
  r.replay_count = doc.at("replay_count").get<std::size_t>();
  r.total_iterations = doc.at("total_iterations").get<long>();
  for (const auto& it : doc.at("iterations")) {
    IterationRecord x;
    x.iteration = it.at("i").get<long>();
    x.lr = it.at("lr").get<double>();
    x.total = it.at("loss").get<double>();
    x.ce = it.at("ce").get<double>();
    x.entropy = it.at("entropy").get<double>();
    x.diversity = it.at("diversity").get<double>();
    x.contrastive = it.at("contrastive").get<double>();
    x.grad_norm_pre = it.at("grad_norm_pre").get<double>();
    x.grad_norm_post = it.at("grad_norm_post").get<double>();
    x.skipped = it.at("skipped").get<bool>();
    r.iterations.push_back(x);
  }
  r.buffer_size = doc.at("buffer_size").get<std::size_t>();
  r.accuracy = doc.at("accuracy").get<double>();
  r.warnings = doc.at("warnings").get<std::vector<std::string>>();
  return r;
}

std::vector<double> AdaptationTrace::chunk_accuracies() const {
  std::vector<double> out;
  out.reserve(chunks.size());
  for (const auto& c : chunks) out.push_back(c.accuracy);
  return out;
}

nlohmann::json AdaptationTrace::summary_json() const {
  return {{"config", config},
          {"source_accuracy", source_accuracy},
          {"final_accuracy", final_accuracy},
          {"chunk_count", chunks.size()},
          {"chunk_accuracies", chunk_accuracies()}};
}

nlohmann::json AdaptationTrace::to_json() const {
  auto doc = summary_json();
  auto arr = nlohmann::json::array();
  for (const auto& c : chunks) arr.push_back(c.to_json());
  doc["chunks"] = std::move(arr);
  return doc;
}

AdaptationTrace AdaptationTrace::from_json(const nlohmann::json& doc) {
  AdaptationTrace t;
  t.config = doc.at("config");
  t.source_accuracy = doc.at("source_accuracy").get<double>();
  t.final_accuracy = doc.at("final_accuracy").get<double>();
  for (const auto& c : doc.at("chunks")) t.chunks.push_back(ChunkRecord::from_json(c));
  return t;
}

void write_trace_jsonl(const std::filesystem::path& path, const AdaptationTrace& trace) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write trace " + path.string());
  for (const auto& c : trace.chunks) out << c.to_json().dump() << '\n';
}

AdaptationTrace read_trace_jsonl(const std::filesystem::path& path, const nlohmann::json& summary) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read trace " + path.string());
  AdaptationTrace t;
  t.config = summary.at("config");
  t.source_accuracy = summary.at("source_accuracy").get<double>();
  t.final_accuracy = summary.at("final_accuracy").get<double>();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) t.chunks.push_back(ChunkRecord::from_json(nlohmann::json::parse(line)));
  }
  return t;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<Matrix> snapshot_values(std::span<nn::Parameter* const> params) {
  std::vector<Matrix> out;
  for (const auto* p : params) out.push_back(p->value);
  return out;
}

bool bitwise_equal(const std::vector<Matrix>& a, std::span<nn::Parameter* const> b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Matrix& v = b[i]->value;
    if (a[i].rows() != v.rows() || a[i].cols() != v.cols()) return false;
    if (std::memcmp(a[i].data(), v.data(), static_cast<std::size_t>(v.size()) * sizeof(double)) != 0) return false;
  }
  return true;
}

}  // namespace

ContinualEngine::ContinualEngine(Model source_model, const DomainSequence& sequence, AdaptationConfig config)
    : ContinualEngine(std::move(source_model), sequence, std::move(config), true) {}

ContinualEngine::ContinualEngine(Model model, const DomainSequence& sequence, AdaptationConfig config,
                                 bool evaluate_source)
    : sequence_(&sequence),
      config_(std::move(config)),
      model_(std::move(model)),
      sgd_(config_.momentum),
      buffer_(std::max<std::size_t>(config_.buffer_capacity, 1), std::max(1, model_.class_count()),
              config_.effective_policy(), hash_combine(config_.seed, 0xB0FFULL)),
      rng_(hash_combine(config_.seed, 0xE161EULL)) {
  config_.validate();
  if (sequence.class_names() != model_.class_names()) {
    throw ConfigError("domain sequence classes do not match the model's classes");
  }
  model_.hypothesis().freeze();
  build_plan();
  trace_.config = config_.to_json();
  if (evaluate_source) {
    trace_.source_accuracy = evaluate_accuracy(model_, sequence.target);
    trace_.final_accuracy = trace_.source_accuracy;
  }
}

void ContinualEngine::build_plan() {
  plan_.clear();
  const auto chunk = static_cast<std::size_t>(config_.chunk_size);
  for (std::size_t d = 0; d < sequence_->domain_count(); ++d) {
    const auto& domain = sequence_->adaptation_domain(d);
    std::vector<std::int32_t> order(domain.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int32_t>(i);
    Rng rng(hash_combine(config_.seed, 0xD0A1ULL + d));
    rng.shuffle(order.begin(), order.end());
    for (std::size_t start = 0; start < order.size(); start += chunk) {
      const auto end = std::min(order.size(), start + chunk);
      plan_.push_back({static_cast<int>(d), {order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end)}});
    }
  }
}

std::vector<Sample> ContinualEngine::chunk_samples(const ChunkPlan& plan) const {
  const auto& domain = sequence_->adaptation_domain(static_cast<std::size_t>(plan.domain));
  std::vector<Sample> out;
  out.reserve(plan.indices.size());
  for (auto i : plan.indices) {
    out.push_back({SampleKey{plan.domain, i}, domain.images[static_cast<std::size_t>(i)]});
  }
  return out;
}

const ChunkRecord& ContinualEngine::step() {
  if (finished()) throw InputError("all chunks have been consumed");
  const auto& plan = plan_[next_chunk_];
  const auto samples = chunk_samples(plan);
  trace_.chunks.push_back(adapt_chunk(samples, static_cast<int>(next_chunk_), plan.domain));
  trace_.final_accuracy = trace_.chunks.back().accuracy;
  ++next_chunk_;
  return trace_.chunks.back();
}

const AdaptationTrace& ContinualEngine::run() {
  while (!finished()) step();
  return trace_;
}

ChunkRecord ContinualEngine::adapt_chunk(std::span<const Sample> chunk, int chunk_index, int domain_index) {
  if (chunk.empty()) throw InputError("cannot adapt on an empty chunk");
  ChunkRecord record;
  record.chunk_index = chunk_index;
  record.domain_index = domain_index;
  record.domain_name = sequence_->adaptation_domain_name(static_cast<std::size_t>(domain_index));
  record.level = domain_index + 1;
  for (const auto& s : chunk) record.incoming.push_back(s.key);

  // Combined set X' = chunk U buffer. Replay rows carry their stored class.
  std::vector<TaggedSample> merged;
  std::vector<int> stored_label;
  if (config_.uses_buffer()) {
    merged = buffer_.merge(chunk);
    stored_label.assign(chunk.size(), -1);
    for (const auto& s : buffer_.contents()) stored_label.push_back(s.pseudolabel);
  } else {
    for (const auto& s : chunk) merged.push_back({s, SampleTag::incoming});
    stored_label.assign(chunk.size(), -1);
  }
  record.replay_count = merged.size() - chunk.size();

  std::vector<const Image*> all_images;
  for (const auto& m : merged) all_images.push_back(m.sample.pixels.get());

  const std::size_t n = merged.size();
  const std::size_t mb = std::min<std::size_t>(static_cast<std::size_t>(config_.minibatch_size), n);
  if (chunk.size() < static_cast<std::size_t>(config_.minibatch_size)) {
    record.warnings.push_back("chunk of " + std::to_string(chunk.size()) +
                              " samples is smaller than the minibatch size");
  }
  const long per_epoch = static_cast<long>((n + mb - 1) / mb);
  const long total = per_epoch * config_.epochs_per_chunk;
  record.total_iterations = total;

  const auto hypothesis_before = snapshot_values(model_.hypothesis_parameters());
  const auto train_mode = config_.adapt_batch_norm ? nn::Mode::train : nn::Mode::eval;
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  long iteration = 0;
  std::size_t excluded_iterations = 0;
  std::size_t skipped = 0;

  for (int epoch = 0; epoch < config_.epochs_per_chunk; ++epoch) {
    const auto pred = model_.predict(all_images);
    const auto assignment = refine_pseudolabels(pred.features, softmax_rows(pred.logits), config_.refine_rounds);
    rng_.shuffle(order.begin(), order.end());

    for (std::size_t start = 0; start < n; start += mb) {
      const auto end = std::min(n, start + mb);
      std::vector<const Image*> images;
      LossBatch batch;
      for (std::size_t j = start; j < end; ++j) {
        images.push_back(all_images[order[j]]);
        batch.pseudolabels.push_back(assignment.labels[order[j]]);
        batch.tags.push_back(merged[order[j]].tag);
      }
      model_.zero_grad();
      if (config_.bn_stats_incoming_only) {
        std::vector<bool> mask;
        for (auto tag : batch.tags) mask.push_back(tag == SampleTag::incoming);
        model_.set_statistics_mask(mask);
      }
      const auto out = model_.forward(images, train_mode);
      model_.set_statistics_mask({});
      batch.probs = softmax_rows(out.logits);
      batch.features = out.features;

      // Prototypes come from this minibatch's replay rows, gradient stopped.
      ReplayFeatures replay;
      if (config_.method == Method::uclgv) {
        std::vector<Eigen::Index> rows;
        for (std::size_t j = start; j < end; ++j) {
          if (merged[order[j]].tag == SampleTag::replay) {
            rows.push_back(static_cast<Eigen::Index>(j - start));
            replay.labels.push_back(stored_label[order[j]]);
          }
        }
        replay.features.resize(static_cast<Eigen::Index>(rows.size()), out.features.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) {
          replay.features.row(static_cast<Eigen::Index>(r)) = out.features.row(rows[r]);
        }
      }

      const auto loss = total_adaptation_loss(config_.method, batch,
                                              config_.uses_buffer() ? &replay : nullptr, config_.weights);
      if (config_.method == Method::uclgv && loss.contrastive_all_excluded) ++excluded_iterations;

      const Matrix grad_logits = softmax_backward(batch.probs, loss.grad_probs);
      model_.backward(grad_logits, &loss.grad_features);

      auto params = model_.trainable_parameters();
      IterationRecord it;
      it.iteration = iteration;
      it.lr = lr_at(config_.eta0, iteration, total);
      it.total = loss.total;
      it.ce = loss.ce;
      it.entropy = loss.entropy;
      it.diversity = loss.diversity;
      it.contrastive = loss.contrastive;
      GradNormReport report;
      if (config_.grad_norm) {
        report = normalize_gradients(params, config_.grad_norm_epsilon, config_.grad_norm_scope);
      } else {
        std::vector<Matrix*> grads;
        for (auto* p : params) grads.push_back(&p->grad);
        report.pre_norm = report.post_norm = global_norm(grads);
        report.finite = std::isfinite(report.pre_norm);
      }
      it.grad_norm_pre = report.pre_norm;
      it.grad_norm_post = report.post_norm;
      if (!report.finite || !std::isfinite(loss.total)) {
        it.skipped = true;
        ++skipped;
      } else {
        sgd_.step(params, it.lr);
      }
      record.iterations.push_back(it);
      ++iteration;
    }
  }
  if (excluded_iterations > 0) {
    record.warnings.push_back("contrastive term had no buffer prototypes in " +
                              std::to_string(excluded_iterations) + " iterations");
  }
  if (skipped > 0) {
    record.warnings.push_back("skipped " + std::to_string(skipped) + " steps with non-finite gradients");
  }

  if (config_.uses_buffer()) {
    std::vector<const Image*> chunk_images;
    for (const auto& s : chunk) chunk_images.push_back(s.pixels.get());
    const auto probs = softmax_rows(model_.predict(chunk_images).logits);
    const auto labels = argmax_rows(probs);
    std::vector<double> confidences(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      confidences[i] = probs(static_cast<Eigen::Index>(i), labels[i]);
    }
    buffer_.repopulate(chunk, labels, confidences);
    buffer_.check_invariants();
  }
  record.buffer_size = buffer_.size();
  record.accuracy = evaluate_accuracy(model_, sequence_->target);

  if (!bitwise_equal(hypothesis_before, model_.hypothesis_parameters())) {
    throw NumericError("classifier parameters changed during adaptation");
  }
  return record;
}

void ContinualEngine::save_checkpoint(const std::filesystem::path& path) {
  Archive archive;
  archive.meta["kind"] = "engine_checkpoint";
  archive.meta["config"] = config_.to_json();
  archive.meta["next_chunk"] = next_chunk_;
  archive.meta["rng"] = rng_.state();
  archive.meta["buffer"] = buffer_.snapshot();
  archive.meta["trace"] = trace_.to_json();
  archive.meta["sequence_classes"] = sequence_->class_names();
  archive.meta["sequence_manifest_hash"] = json_hash(sequence_->manifest);
  model_.write_to(archive);
  auto names = nlohmann::json::array();
  for (const auto& [name, v] : sgd_.velocity()) {
    archive.tensors["velocity/" + name] = v;
    names.push_back(name);
  }
  archive.meta["velocity"] = std::move(names);
  archive.save(path);
}

ContinualEngine ContinualEngine::resume(const std::filesystem::path& path, const DomainSequence& sequence) {
  const auto archive = Archive::load(path);
  try {
    const auto& meta = archive.meta;
    if (meta.at("kind") != "engine_checkpoint") throw IoError("not an engine checkpoint: " + path.string());
    if (meta.at("sequence_manifest_hash").get<std::string>() != json_hash(sequence.manifest)) {
      throw ConfigError("checkpoint was written for a different domain sequence");
    }
    auto config = AdaptationConfig::from_json(meta.at("config"));
    ContinualEngine engine(Model::read_from(archive), sequence, config, false);
    engine.next_chunk_ = meta.at("next_chunk").get<std::size_t>();
    engine.rng_.set_state(meta.at("rng").get<std::string>());
    engine.trace_ = AdaptationTrace::from_json(meta.at("trace"));
    engine.buffer_ = ReplayBuffer::restore(meta.at("buffer"), [&sequence](SampleKey key) {
      const auto& domain = sequence.adaptation_domain(static_cast<std::size_t>(key.domain));
      if (key.index < 0 || static_cast<std::size_t>(key.index) >= domain.size()) {
        throw IoError("buffer snapshot references a missing sample");
      }
      return domain.images[static_cast<std::size_t>(key.index)];
    });
    for (const auto& name : meta.at("velocity")) {
      const auto n = name.get<std::string>();
      engine.sgd_.velocity()[n] = archive.tensor("velocity/" + n);
    }
    if (engine.next_chunk_ > engine.plan_.size()) throw IoError("checkpoint position beyond the chunk plan");
    return engine;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed engine checkpoint: ") + e.what());
  }
}

AdaptationTrace run_continual(const Model& source_model, const DomainSequence& sequence,
                              const AdaptationConfig& config) {
  if (sequence.class_names() != source_model.class_names()) {
    throw ConfigError("domain sequence classes do not match the model's classes");
  }
  ContinualEngine engine(source_model, sequence, config);
  return engine.run();
}

}  // namespace driftadapt
