#include "driftadapt/dataset.hpp"
#include "driftadapt/error.hpp"
#include "driftadapt/model.hpp"
#include "driftadapt/optim.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

namespace driftadapt {
namespace {

std::vector<Image> random_images(int count, int size, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image> out;
  for (int i = 0; i < count; ++i) {
    Image img(size, size);
    for (auto& v : img.pixels) v = rng.uniform();
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<const Image*> pointers(const std::vector<Image>& images) {
  std::vector<const Image*> out;
  for (const auto& i : images) out.push_back(&i);
  return out;
}

TEST(ForwardFeatures, ShapeIsBatchBy256) {
  Model model("conv3", {32, 32}, {"a", "b", "c", "d"}, 1);
  const auto imgs = random_images(4, 32, 2);
  const auto out = model.forward(pointers(imgs), nn::Mode::eval);
  EXPECT_EQ(out.features.rows(), 4);
  EXPECT_EQ(out.features.cols(), kFeatureDim);
  EXPECT_TRUE(out.features.allFinite());
}

TEST(ForwardFeatures, DuplicatedRowsMatchInEvalMode) {
  Model model("conv3", {16, 16}, {"a", "b"}, 3);
  const auto imgs = random_images(2, 16, 4);
  const auto out = model.forward({&imgs[0], &imgs[1], &imgs[0]}, nn::Mode::eval);
  EXPECT_EQ(out.features.row(0), out.features.row(2));
  EXPECT_EQ(out.logits.row(0), out.logits.row(2));
}

TEST(ForwardFeatures, RejectsMismatchedResolution) {
  Model model("conv3", {32, 32}, {"a", "b"}, 1);
  const auto imgs = random_images(2, 16, 4);
  EXPECT_THROW(model.forward(pointers(imgs), nn::Mode::eval), InputError);
}

TEST(ForwardLogits, ShapeAndSoftmaxNormalization) {
  std::vector<std::string> classes;
  for (int k = 0; k < 21; ++k) classes.push_back("c" + std::to_string(k));
  Model model("conv3", {16, 16}, classes, 5);
  const auto imgs = random_images(4, 16, 6);
  const auto out = model.forward(pointers(imgs), nn::Mode::eval);
  ASSERT_EQ(out.logits.rows(), 4);
  ASSERT_EQ(out.logits.cols(), 21);
  const Matrix p = softmax_rows(out.logits);
  for (Eigen::Index r = 0; r < p.rows(); ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-6);
}

TEST(EvalMode, DoesNotTouchRunningStatistics) {
  Model model("conv3", {16, 16}, {"a", "b"}, 7);
  const auto imgs = random_images(8, 16, 8);
  std::vector<Matrix> before;
  for (auto& [name, m] : model.state()) before.push_back(*m);
  model.forward(pointers(imgs), nn::Mode::eval);
  std::size_t i = 0;
  for (auto& [name, m] : model.state()) EXPECT_EQ(before[i++], *m) << name;
  model.forward(pointers(imgs), nn::Mode::train);
  bool changed = false;
  i = 0;
  for (auto& [name, m] : model.state()) changed |= before[i++] != *m;
  EXPECT_TRUE(changed);
}

// ---------------------------------------------------------------------------

TEST(LabelSmoothingCe, ZeroEpsEqualsPlainCrossEntropy) {
  Rng rng(11);
  Matrix logits(5, 4);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-3, 3);
  const std::vector<int> labels = {0, 3, 2, 1, 1};
  long double plain = 0;
  for (int b = 0; b < 5; ++b) {
    long double z = 0;
    for (int k = 0; k < 4; ++k) z += std::exp(static_cast<long double>(logits(b, k)));
    plain -= std::log(std::exp(static_cast<long double>(logits(b, labels[b]))) / z);
  }
  plain /= 5;
  EXPECT_NEAR(label_smoothing_ce(logits, labels, 0.0).value, static_cast<double>(plain), 1e-9);
}

TEST(LabelSmoothingCe, UniformLogitsCostLnC) {
  const Matrix logits = Matrix::Constant(3, 4, 0.7);
  for (double eps : {0.0, 0.1, 0.5}) {
    EXPECT_NEAR(label_smoothing_ce(logits, std::vector<int>{0, 1, 3}, eps).value, std::log(4.0), 1e-12);
  }
}

TEST(LabelSmoothingCe, MatchesHighPrecisionHandValue) {
  Matrix logits(1, 4);
  logits << 5, 0, 0, 0;
  // -(0.9 ln p0 + 3 * (0.1/3) ln p1) with p from softmax, evaluated at 40 digits.
  EXPECT_NEAR(label_smoothing_ce(logits, std::vector<int>{0}, 0.1).value, 0.52001225335962700860, 1e-12);
}

TEST(LabelSmoothingCe, RejectsOutOfRangeLabels) {
  const Matrix logits = Matrix::Zero(2, 3);
  EXPECT_THROW(label_smoothing_ce(logits, std::vector<int>{0, 3}, 0.1), InputError);
  EXPECT_THROW(label_smoothing_ce(logits, std::vector<int>{0, -1}, 0.1), InputError);
  EXPECT_THROW(label_smoothing_ce(logits, std::vector<int>{0, 1}, 1.0), InputError);
}

TEST(LabelSmoothingCe, IsNonnegative) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Matrix logits(3, 5);
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = rng.uniform(-10, 10);
    EXPECT_GE(label_smoothing_ce(logits, std::vector<int>{0, 2, 4}, rng.uniform(0, 0.9)).value, 0.0);
  }
}

// Checks every (or a strided subset of) parameter entry against central differences.
void check_model_gradients(Model& model, const std::vector<Image>& imgs, const std::vector<int>& labels,
                           nn::Mode mode, std::size_t max_entries_per_tensor) {
  const auto batch = pointers(imgs);
  auto loss_fn = [&] { return label_smoothing_ce(model.forward(batch, mode).logits, labels, 0.1).value; };

  model.zero_grad();
  const auto out = model.forward(batch, mode);
  model.backward(label_smoothing_ce(out.logits, labels, 0.1).grad);

  std::vector<nn::Parameter*> params = model.trainable_parameters();
  std::size_t checked = 0;
  for (auto* p : params) {
    const Matrix analytic = p->grad;
    const auto stride = std::max<Eigen::Index>(1, p->value.size() / static_cast<Eigen::Index>(max_entries_per_tensor));
    for (Eigen::Index i = 0; i < p->value.size(); i += stride) {
      const double numeric = testing::central_difference(p->value, i, loss_fn);
      EXPECT_TRUE(testing::gradients_agree(analytic.data()[i], numeric))
          << p->name << "[" << i << "] analytic=" << analytic.data()[i] << " numeric=" << numeric;
      ++checked;
    }
  }
  EXPECT_GT(checked, 0u);
}

TEST(GradientCheck, ToyEncoderLabelSmoothingMatchesFiniteDifferences) {
  Model model("mlp", {4, 4}, {"a", "b", "c"}, 21);
  const auto imgs = random_images(6, 4, 22);
  check_model_gradients(model, imgs, {0, 1, 2, 0, 2, 1}, nn::Mode::train, 40);
}

TEST(GradientCheck, ToyEncoderEvalModeMatchesFiniteDifferences) {
  Model model("mlp", {4, 4}, {"a", "b", "c"}, 23);
  const auto imgs = random_images(5, 4, 24);
  check_model_gradients(model, imgs, {0, 1, 2, 0, 2}, nn::Mode::eval, 40);
}

TEST(GradientCheck, ConvBackboneMatchesFiniteDifferences) {
  Model model("conv3", {8, 8}, {"a", "b", "c"}, 25);
  const auto imgs = random_images(4, 8, 26);
  check_model_gradients(model, imgs, {0, 1, 2, 1}, nn::Mode::train, 12);
}

TEST(GradientCheck, FrozenHeadAccumulatesNoGradients) {
  Model model("mlp", {4, 4}, {"a", "b"}, 27);
  model.hypothesis().freeze();
  const auto imgs = random_images(3, 4, 28);
  model.zero_grad();
  const auto out = model.forward(pointers(imgs), nn::Mode::train);
  model.backward(label_smoothing_ce(out.logits, std::vector<int>{0, 1, 0}, 0.1).grad);
  for (auto* p : model.hypothesis_parameters()) EXPECT_EQ(p->grad.squaredNorm(), 0.0) << p->name;
  for (auto* t : model.trainable_parameters()) {
    for (auto* h : model.hypothesis_parameters()) EXPECT_NE(t, h);
  }
}

// ---------------------------------------------------------------------------

TEST(WeightNorm, DirectionRowsStayUnitNormDuringTraining) {
  auto ds = make_shapes_dataset(4, 16, 31);
  Model model("conv3", {16, 16}, ds.class_names, 32);
  SgdMomentum sgd(0.9);
  for (int step = 0; step < 5; ++step) {
    model.zero_grad();
    const auto out = model.forward(image_pointers(ds), nn::Mode::train);
    model.backward(label_smoothing_ce(out.logits, ds.labels, 0.1).grad);
    sgd.step(model.trainable_parameters(), 0.05);
    const Matrix dir = model.hypothesis().direction();
    for (Eigen::Index k = 0; k < dir.rows(); ++k) EXPECT_NEAR(dir.row(k).norm(), 1.0, 1e-6);
  }
}

TEST(TrainSource, ReachesHighTrainingAccuracyOnShapes) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    const auto ds = make_shapes_dataset(32, 32, 100 + seed);
    SourceTrainingConfig config;
    config.seed = seed;
    config.epochs = 20;
    SourceTrainingLog log;
    auto model = train_source(ds, config, &log);
    EXPECT_GE(log.train_accuracy, 0.95) << "seed " << seed;
    EXPECT_TRUE(model.hypothesis().frozen());
  }
}

TEST(TrainSource, MissingClassIsRejected) {
  auto ds = make_shapes_dataset(3, 16, 5);
  std::vector<ImagePtr> images;
  std::vector<int> labels;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (ds.labels[i] == 2) continue;
    images.push_back(ds.images[i]);
    labels.push_back(ds.labels[i]);
  }
  ds.images = images;
  ds.labels = labels;
  EXPECT_THROW(train_source(ds, SourceTrainingConfig{}), ValidationError);
}

TEST(TrainSource, IsDeterministic) {
  const auto ds = make_shapes_dataset(6, 16, 9);
  SourceTrainingConfig config;
  config.epochs = 2;
  config.seed = 4;
  auto a = train_source(ds, config);
  auto b = train_source(ds, config);
  auto sa = a.state();
  auto sb = b.state();
  ASSERT_EQ(sa.size(), sb.size());
  for (std::size_t i = 0; i < sa.size(); ++i) EXPECT_EQ(*sa[i].second, *sb[i].second) << sa[i].first;
}

// ---------------------------------------------------------------------------

TEST(EvaluateAccuracy, OracleAndConstantPredictors) {
  const auto ds = make_shapes_dataset(5, 16, 12);
  std::map<const Image*, int> truth;
  for (std::size_t i = 0; i < ds.size(); ++i) truth[ds.images[i].get()] = ds.labels[i];
  const Predictor oracle = [&](const std::vector<const Image*>& batch) {
    std::vector<int> out;
    for (const auto* img : batch) out.push_back(truth.at(img));
    return out;
  };
  const Predictor constant = [](const std::vector<const Image*>& batch) {
    return std::vector<int>(batch.size(), 2);
  };
  EXPECT_DOUBLE_EQ(evaluate_accuracy(oracle, ds), 1.0);
  EXPECT_DOUBLE_EQ(evaluate_accuracy(constant, ds), 0.25);
}

TEST(EvaluateAccuracy, MatchesManualArgmaxCount) {
  const auto ds = make_shapes_dataset(5, 16, 13);  // 20 samples
  Model model("conv3", {16, 16}, ds.class_names, 14);
  int correct = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto out = model.forward({ds.images[i].get()}, nn::Mode::eval);
    Eigen::Index arg;
    out.logits.row(0).maxCoeff(&arg);
    correct += arg == ds.labels[i];
  }
  EXPECT_DOUBLE_EQ(evaluate_accuracy(model, ds), correct / 20.0);
}

// ---------------------------------------------------------------------------

TEST(Checkpoint, RoundTripAndClassCountGuard) {
  const auto ds = make_shapes_dataset(3, 16, 15);
  SourceTrainingConfig config;
  config.epochs = 1;
  auto model = train_source(ds, config);
  const auto path = std::filesystem::temp_directory_path() / "driftadapt_model_test.ckpt";
  save_model(path, model);
  auto loaded = load_model(path, 4);
  EXPECT_EQ(loaded.class_names(), model.class_names());
  EXPECT_EQ(loaded.provenance(), model.provenance());
  EXPECT_TRUE(loaded.hypothesis().frozen());
  auto a = model.state();
  auto b = loaded.state();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].second, *b[i].second);
  EXPECT_THROW(load_model(path, 5), ConfigError);
  std::filesystem::remove(path);
}

TEST(Registry, UnknownBackboneIsAConfigError) {
  EXPECT_THROW(Model("resnet50", {32, 32}, {"a"}, 0), ConfigError);
  const auto keys = backbone_keys();
  EXPECT_NE(std::find(keys.begin(), keys.end(), "conv3"), keys.end());
}

}  // namespace
}  // namespace driftadapt
