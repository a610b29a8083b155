#include "driftadapt/model.hpp"

#include "driftadapt/error.hpp"
#include "driftadapt/optim.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <set>

namespace driftadapt {

namespace {

/// Three conv blocks (conv, batch norm, ReLU, 2x2 max pool) and a flatten.
class ConvBackbone final : public Backbone {
 public:
  ConvBackbone(std::string key, InputShape shape, std::array<int, 3> widths, Rng& rng)
      : key_(std::move(key)), shape_(shape) {
    int in = 3;
    for (int b = 0; b < 3; ++b) {
      const auto name = "backbone.block" + std::to_string(b);
      blocks_[b].conv = nn::Conv2d(in, widths[b], name + ".conv", rng);
      blocks_[b].norm = nn::BatchNorm(widths[b], name + ".bn");
      in = widths[b];
    }
    int h = shape.height, w = shape.width;
    for (int b = 0; b < 3; ++b) {
      h /= 2;
      w /= 2;
    }
    if (h <= 0 || w <= 0) throw ConfigError("conv backbone needs inputs of at least 8x8 pixels");
    out_dim_ = h * w * widths[2];
  }

  std::string key() const override { return key_; }
  int output_dim() const override { return out_dim_; }

  Matrix forward(const nn::Activation& x, nn::Mode mode) override {
    if (x.h != shape_.height || x.w != shape_.width) {
      throw InputError("batch resolution " + std::to_string(x.h) + "x" + std::to_string(x.w) +
                       " does not match backbone input " + std::to_string(shape_.height) + "x" +
                       std::to_string(shape_.width));
    }
    nn::Activation a = x;
    for (auto& blk : blocks_) {
      a = blk.conv.forward(a);
      a.data = blk.relu.forward(blk.norm.forward(a.data, mode));
      a = blk.pool.forward(a);
    }
    batch_ = a.n;
    last_ = {a.n, a.h, a.w, a.c, Matrix()};
    // NHWC rows of one image are contiguous, so flattening is a reshape.
    return Eigen::Map<const Matrix>(a.data.data(), a.n, static_cast<Eigen::Index>(a.h) * a.w * a.c);
  }

  void backward(const Matrix& grad_out) override {
    nn::Activation g = last_;
    g.data = Eigen::Map<const Matrix>(grad_out.data(), static_cast<Eigen::Index>(g.n) * g.h * g.w, g.c);
    for (int b = 2; b >= 0; --b) {
      auto& blk = blocks_[b];
      g = blk.pool.backward(g);
      g.data = blk.norm.backward(blk.relu.backward(g.data));
      if (b > 0) {
        g = blk.conv.backward(g);
      } else {
        blk.conv.backward(g);
      }
    }
  }

  void collect(std::vector<nn::Parameter*>& out) override {
    for (auto& blk : blocks_) {
      blk.conv.collect(out);
      blk.norm.collect(out);
    }
  }

  void collect_state(std::vector<nn::StateEntry>& out) override {
    for (auto& blk : blocks_) {
      blk.conv.collect_state(out);
      blk.norm.collect_state(out);
    }
  }

  void collect_batch_norms(std::vector<nn::BatchNorm*>& out) override {
    for (auto& blk : blocks_) out.push_back(&blk.norm);
  }

  std::unique_ptr<Backbone> clone() const override { return std::make_unique<ConvBackbone>(*this); }

 private:
  struct Block {
    nn::Conv2d conv;
    nn::BatchNorm norm;
    nn::Relu relu;
    nn::MaxPool2 pool;
  };
  std::string key_;
  InputShape shape_;
  std::array<Block, 3> blocks_;
  int out_dim_ = 0;
  int batch_ = 0;
  nn::Activation last_;
};

/// Flatten, one hidden affine layer, ReLU. Small enough for finite-difference checks.
class MlpBackbone final : public Backbone {
 public:
  MlpBackbone(InputShape shape, int hidden, Rng& rng)
      : shape_(shape), hidden_(shape.height * shape.width * 3, hidden, "backbone.fc", rng) {}

  std::string key() const override { return "mlp"; }
  int output_dim() const override { return hidden_.out_features(); }

  Matrix forward(const nn::Activation& x, nn::Mode) override {
    if (x.h != shape_.height || x.w != shape_.width) throw InputError("batch resolution mismatch");
    const Matrix flat = Eigen::Map<const Matrix>(x.data.data(), x.n, static_cast<Eigen::Index>(x.h) * x.w * 3);
    return relu_.forward(hidden_.forward(flat));
  }

  void backward(const Matrix& grad_out) override { hidden_.backward(relu_.backward(grad_out)); }
  void collect(std::vector<nn::Parameter*>& out) override { hidden_.collect(out); }
  void collect_state(std::vector<nn::StateEntry>& out) override { hidden_.collect_state(out); }
  std::unique_ptr<Backbone> clone() const override { return std::make_unique<MlpBackbone>(*this); }

 private:
  InputShape shape_;
  nn::Linear hidden_;
  nn::Relu relu_;
};

struct Registry {
  std::mutex mutex;
  std::map<std::string, BackboneFactory> factories;

  Registry() {
    factories["conv3"] = [](InputShape s, Rng& rng) {
      return std::make_unique<ConvBackbone>("conv3", s, std::array<int, 3>{8, 16, 32}, rng);
    };
    factories["conv3-wide"] = [](InputShape s, Rng& rng) {
      return std::make_unique<ConvBackbone>("conv3-wide", s, std::array<int, 3>{16, 32, 64}, rng);
    };
    factories["mlp"] = [](InputShape s, Rng& rng) { return std::make_unique<MlpBackbone>(s, 16, rng); };
  }
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void register_backbone(const std::string& key, BackboneFactory factory) {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  r.factories[key] = std::move(factory);
}

std::unique_ptr<Backbone> make_backbone(const std::string& key, InputShape shape, Rng& rng) {
  auto& r = registry();
  BackboneFactory factory;
  {
    std::lock_guard lock(r.mutex);
    const auto it = r.factories.find(key);
    if (it == r.factories.end()) throw ConfigError("unknown backbone '" + key + "'");
    factory = it->second;
  }
  return factory(shape, rng);
}

std::vector<std::string> backbone_keys() {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  std::vector<std::string> keys;
  for (const auto& [k, f] : r.factories) keys.push_back(k);
  return keys;
}

// ---------------------------------------------------------------------------

Encoder::Encoder(std::unique_ptr<Backbone> backbone, Rng& rng)
    : backbone_(std::move(backbone)),
      bottleneck_(backbone_->output_dim(), kFeatureDim, "bottleneck.fc", rng),
      norm_(kFeatureDim, "bottleneck.bn") {}

Encoder::Encoder(const Encoder& other)
    : backbone_(other.backbone_->clone()), bottleneck_(other.bottleneck_), norm_(other.norm_) {}

Encoder& Encoder::operator=(const Encoder& other) {
  if (this != &other) {
    backbone_ = other.backbone_->clone();
    bottleneck_ = other.bottleneck_;
    norm_ = other.norm_;
  }
  return *this;
}

Matrix Encoder::forward(const nn::Activation& x, nn::Mode mode) {
  return norm_.forward(bottleneck_.forward(backbone_->forward(x, mode)), mode);
}

void Encoder::backward(const Matrix& grad_features) {
  backbone_->backward(bottleneck_.backward(norm_.backward(grad_features)));
}

void Encoder::collect(std::vector<nn::Parameter*>& out) {
  backbone_->collect(out);
  bottleneck_.collect(out);
  norm_.collect(out);
}

void Encoder::collect_batch_norms(std::vector<nn::BatchNorm*>& out) {
  backbone_->collect_batch_norms(out);
  out.push_back(&norm_);
}

void Encoder::collect_state(std::vector<nn::StateEntry>& out) {
  backbone_->collect_state(out);
  bottleneck_.collect_state(out);
  norm_.collect_state(out);
}

Hypothesis::Hypothesis(int class_count, Rng& rng) : head_(kFeatureDim, class_count, "head", rng) {}

// ---------------------------------------------------------------------------

namespace {

Encoder build_encoder(const std::string& key, InputShape shape, Rng& rng) {
  auto backbone = make_backbone(key, shape, rng);
  return Encoder(std::move(backbone), rng);
}

}  // namespace

Model::Model(const std::string& backbone_key, InputShape shape, std::vector<std::string> class_names,
             std::uint64_t seed)
    : backbone_key_(backbone_key),
      shape_(shape),
      class_names_(std::move(class_names)),
      encoder_([&] {
        Rng rng(seed);
        return build_encoder(backbone_key, shape, rng);
      }()),
      hypothesis_([&] {
        if (class_names_.empty()) throw ConfigError("model needs at least one class");
        Rng rng(hash_combine(seed, 0x4EADULL));
        return Hypothesis(static_cast<int>(class_names_.size()), rng);
      }()) {}

ModelOutput Model::forward(const std::vector<const Image*>& batch, nn::Mode mode) {
  if (mode == nn::Mode::train && statistics_mask_size_ != 0 && statistics_mask_size_ != batch.size()) {
    throw InputError("statistics mask covers " + std::to_string(statistics_mask_size_) + " samples, batch has " +
                     std::to_string(batch.size()));
  }
  const auto x = nn::pack_images(batch);
  ModelOutput out;
  out.features = encoder_.forward(x, mode);
  out.logits = hypothesis_.forward(out.features);
  return out;
}

void Model::backward(const Matrix& grad_logits, const Matrix* grad_features) {
  Matrix g = hypothesis_.backward(grad_logits);
  if (grad_features) g += *grad_features;
  encoder_.backward(g);
}

std::vector<nn::Parameter*> Model::trainable_parameters() {
  std::vector<nn::Parameter*> out;
  encoder_.collect(out);
  if (!hypothesis_.frozen()) hypothesis_.collect(out);
  return out;
}

std::vector<nn::Parameter*> Model::hypothesis_parameters() {
  std::vector<nn::Parameter*> out;
  hypothesis_.collect(out);
  return out;
}

std::vector<nn::StateEntry> Model::state() {
  std::vector<nn::StateEntry> out;
  encoder_.collect_state(out);
  hypothesis_.collect_state(out);
  return out;
}

void Model::set_statistics_mask(const std::vector<bool>& per_sample) {
  std::vector<nn::BatchNorm*> norms;
  encoder_.collect_batch_norms(norms);
  for (auto* bn : norms) bn->set_statistics_mask(per_sample);
  statistics_mask_size_ = per_sample.size();
}

void Model::zero_grad() {
  std::vector<nn::Parameter*> all;
  encoder_.collect(all);
  hypothesis_.collect(all);
  for (auto* p : all) p->zero_grad();
}

ModelOutput Model::predict(const std::vector<const Image*>& images, std::size_t batch_size) {
  ModelOutput out;
  out.features.resize(static_cast<Eigen::Index>(images.size()), kFeatureDim);
  out.logits.resize(static_cast<Eigen::Index>(images.size()), class_count());
  for (std::size_t start = 0; start < images.size(); start += batch_size) {
    const auto end = std::min(images.size(), start + batch_size);
    std::vector<const Image*> batch(images.begin() + static_cast<long>(start), images.begin() + static_cast<long>(end));
    auto part = forward(batch, nn::Mode::eval);
    out.features.middleRows(static_cast<Eigen::Index>(start), part.features.rows()) = part.features;
    out.logits.middleRows(static_cast<Eigen::Index>(start), part.logits.rows()) = part.logits;
  }
  return out;
}

void Model::write_to(Archive& archive, const std::string& prefix) {
  archive.meta[prefix + "backbone"] = backbone_key_;
  archive.meta[prefix + "input_shape"] = {shape_.height, shape_.width};
  archive.meta[prefix + "classes"] = class_names_;
  archive.meta[prefix + "provenance"] = provenance_;
  archive.meta[prefix + "hypothesis_frozen"] = hypothesis_.frozen();
  for (const auto& [name, m] : state()) archive.tensors[prefix + name] = *m;
}

Model Model::read_from(const Archive& archive, const std::string& prefix) {
  try {
    const auto& meta = archive.meta;
    const auto shape = meta.at(prefix + "input_shape");
    Model model(meta.at(prefix + "backbone").get<std::string>(),
                InputShape{shape.at(0).get<int>(), shape.at(1).get<int>()},
                meta.at(prefix + "classes").get<std::vector<std::string>>(), 0);
    model.provenance_ = meta.at(prefix + "provenance").get<std::string>();
    for (auto& [name, m] : model.state()) {
      const Matrix& stored = archive.tensor(prefix + name);
      if (stored.rows() != m->rows() || stored.cols() != m->cols()) {
        throw IoError("checkpoint tensor '" + name + "' has the wrong shape");
      }
      *m = stored;
    }
    if (meta.at(prefix + "hypothesis_frozen").get<bool>()) model.hypothesis_.freeze();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed model checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------

LossResult label_smoothing_ce(const Matrix& logits, std::span<const int> labels, double eps) {
  if (!(eps >= 0.0 && eps < 1.0)) throw InputError("label smoothing eps must lie in [0,1)");
  const auto batch = logits.rows();
  const auto classes = logits.cols();
  if (batch == 0 || static_cast<std::size_t>(batch) != labels.size()) {
    throw InputError("logits and labels disagree on batch size");
  }
  const double off = classes > 1 ? eps / static_cast<double>(classes - 1) : 0.0;
  const double on = classes > 1 ? 1.0 - eps : 1.0;
  Matrix target = Matrix::Constant(batch, classes, off);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const int y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= classes) throw InputError("label " + std::to_string(y) + " out of range");
    target(b, y) = on;
  }
  const Matrix logp = log_softmax_rows(logits);
  LossResult r;
  r.value = -(target.array() * logp.array()).sum() / static_cast<double>(batch);
  r.grad = (logp.array().exp() - target.array()) / static_cast<double>(batch);
  return r;
}

nlohmann::json SourceTrainingConfig::to_json() const {
  return {{"backbone", backbone},   {"epochs", epochs},   {"minibatch_size", minibatch_size},
          {"eta0", eta0},           {"momentum", momentum}, {"label_smoothing", label_smoothing},
          {"seed", seed}};
}

SourceTrainingConfig SourceTrainingConfig::from_json(const nlohmann::json& doc) {
  static const std::set<std::string> known = {"backbone", "epochs", "minibatch_size", "eta0",
                                              "momentum", "label_smoothing", "seed"};
  if (!doc.is_object()) throw ConfigError("source training config must be an object");
  for (const auto& [key, value] : doc.items()) {
    if (!known.count(key)) throw ConfigError("unknown source training key '" + key + "'");
  }
  SourceTrainingConfig c;
  try {
    c.backbone = doc.value("backbone", c.backbone);
    c.epochs = doc.value("epochs", c.epochs);
    c.minibatch_size = doc.value("minibatch_size", c.minibatch_size);
    c.eta0 = doc.value("eta0", c.eta0);
    c.momentum = doc.value("momentum", c.momentum);
    c.label_smoothing = doc.value("label_smoothing", c.label_smoothing);
    c.seed = doc.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed source training config: ") + e.what());
  }
  return c;
}

std::vector<const Image*> image_pointers(const LabeledDataset& dataset) {
  std::vector<const Image*> out;
  out.reserve(dataset.size());
  for (const auto& img : dataset.images) out.push_back(img.get());
  return out;
}

Model train_source(const LabeledDataset& dataset, const SourceTrainingConfig& config,
                   SourceTrainingLog* log) {
  validate_dataset(dataset);
  if (config.epochs < 1 || config.minibatch_size < 1 || !(config.eta0 > 0.0)) {
    throw ConfigError("source training needs epochs >= 1, minibatch_size >= 1 and eta0 > 0");
  }
  const auto& first = *dataset.images.front();
  Model model(config.backbone, InputShape{first.height, first.width}, dataset.class_names, config.seed);
  model.set_provenance(json_hash(config.to_json()));

  SgdMomentum sgd(config.momentum);
  Rng rng(hash_combine(config.seed, 0x50C0ULL));
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const auto mb = static_cast<std::size_t>(config.minibatch_size);
  const long per_epoch = static_cast<long>((dataset.size() + mb - 1) / mb);
  const long total = per_epoch * config.epochs;
  long iteration = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += mb) {
      const auto end = std::min(order.size(), start + mb);
      std::vector<const Image*> batch;
      std::vector<int> labels;
      for (std::size_t j = start; j < end; ++j) {
        batch.push_back(dataset.images[order[j]].get());
        labels.push_back(dataset.labels[order[j]]);
      }
      model.zero_grad();
      const auto out = model.forward(batch, nn::Mode::train);
      const auto loss = label_smoothing_ce(out.logits, labels, config.label_smoothing);
      model.backward(loss.grad);
      sgd.step(model.trainable_parameters(), lr_at(config.eta0, iteration, total));
      ++iteration;
      loss_sum += loss.value * static_cast<double>(end - start);
    }
    if (log) log->epoch_loss.push_back(loss_sum / static_cast<double>(dataset.size()));
  }
  model.hypothesis().freeze();
  if (log) log->train_accuracy = evaluate_accuracy(model, dataset);
  return model;
}

double evaluate_accuracy(const Predictor& predict, const LabeledDataset& dataset) {
  if (dataset.empty()) throw InputError("cannot evaluate on an empty dataset");
  const auto preds = predict(image_pointers(dataset));
  if (preds.size() != dataset.size()) throw InputError("predictor returned the wrong number of labels");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == dataset.labels[i];
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

double evaluate_accuracy(Model& model, const LabeledDataset& dataset) {
  return evaluate_accuracy(
      [&model](const std::vector<const Image*>& images) { return argmax_rows(model.predict(images).logits); },
      dataset);
}

void save_model(const std::filesystem::path& path, Model& model) {
  Archive archive;
  archive.meta["kind"] = "source_model";
  model.write_to(archive);
  archive.save(path);
}

Model load_model(const std::filesystem::path& path, std::optional<int> expected_class_count) {
  const auto archive = Archive::load(path);
  Model model = Model::read_from(archive);
  if (expected_class_count && *expected_class_count != model.class_count()) {
    throw ConfigError("checkpoint has " + std::to_string(model.class_count()) +
                      " classes but " + std::to_string(*expected_class_count) + " were expected");
  }
  return model;
}

}  // namespace driftadapt
