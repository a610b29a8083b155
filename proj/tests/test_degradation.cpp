#include "driftadapt/dataset.hpp"
#include "driftadapt/degradation.hpp"
#include "driftadapt/error.hpp"
#include "driftadapt/rng.hpp"

#include "oracles.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

namespace driftadapt {
namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& v : img.pixels) v = rng.uniform();
  return img;
}

std::vector<Image> test_images(int count, std::uint64_t seed) {
  const auto ds = make_shapes_dataset((count + 3) / 4, 32, seed);
  std::vector<Image> out;
  for (int i = 0; i < count; ++i) out.push_back(*ds.images[static_cast<std::size_t>(i)]);
  return out;
}

TEST(SynthCloud, ZeroStrengthIsBitwiseIdentity) {
  const auto img = random_image(17, 23, 1);
  EXPECT_EQ(synth_cloud(img, CloudParams{0.0, 8.0, 0.0}, 3, 4), img);
  EXPECT_EQ(synth_cloud(img, CloudParams{0.5, 8.0, 0.0}, 3, 4), img);
  EXPECT_EQ(synth_cloud(img, CloudParams{0.0, 8.0, 0.7}, 3, 4), img);
}

TEST(SynthCloud, FullCoverOnBlackIsNearWhite) {
  const Image black(64, 64);
  const auto out = synth_cloud(black, CloudParams{1.0, 8.0, 1.0}, 5, 0);
  for (double v : out.pixels) EXPECT_GE(v, 0.9);
}

TEST(SynthCloud, OutputStaysInRangeAndIsDeterministic) {
  const auto img = random_image(32, 32, 2);
  for (const auto& level : DegradationSchedule::default_cloud(7).levels) {
    const auto& p = std::get<CloudParams>(level);
    const auto a = synth_cloud(img, p, 7, 11);
    EXPECT_EQ(a, synth_cloud(img, p, 7, 11));
    EXPECT_NE(a, synth_cloud(img, p, 7, 12));
    for (double v : a.pixels) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(SynthCloud, NonFinitePixelsAreRejected) {
  auto img = random_image(8, 8, 3);
  img.pixels[5] = std::nan("");
  EXPECT_THROW(synth_cloud(img, CloudParams{0.5, 8.0, 0.5}, 0, 0), InputError);
  EXPECT_THROW(synth_snow(img, SnowParams{5.0, 3.0, 0.8}, 0, 0), InputError);
}

TEST(SynthCloud, InvalidParametersAreRejected) {
  const auto img = random_image(8, 8, 4);
  EXPECT_THROW(synth_cloud(img, CloudParams{1.5, 8.0, 0.5}, 0, 0), InputError);
  EXPECT_THROW(synth_cloud(img, CloudParams{0.5, -1.0, 0.5}, 0, 0), InputError);
  EXPECT_THROW(synth_snow(img, SnowParams{1.0, 3.0, 0.0}, 0, 0), InputError);
  EXPECT_THROW(synth_snow(img, SnowParams{-1.0, 3.0, 0.5}, 0, 0), InputError);
}

TEST(SynthSnow, ZeroStrengthIsBitwiseIdentity) {
  const auto img = random_image(19, 21, 5);
  EXPECT_EQ(synth_snow(img, SnowParams{0.0, 3.0, 1.0}, 1, 2), img);
}

TEST(SynthSnow, GrayImageScalesByBrightness) {
  Image gray(16, 16);
  std::fill(gray.pixels.begin(), gray.pixels.end(), 0.5);
  const auto out = synth_snow(gray, SnowParams{0.0, 3.0, 0.6}, 0, 0);
  for (double v : out.pixels) EXPECT_NEAR(v, 0.3, 1e-15);
}

TEST(SynthSnow, StreakCountFollowsDensity) {
  const Image black(50, 40);
  const auto out = synth_snow(black, SnowParams{20.0, 1.0, 1.0}, 3, 9);
  const auto mask = snow_flake_mask(50, 40, SnowParams{20.0, 1.0, 1.0}, 3, 9);
  std::size_t lit = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) {
      ++lit;
      EXPECT_EQ(out.pixels[i * 3], 1.0);
    } else {
      EXPECT_EQ(out.pixels[i * 3], 0.0);
    }
  }
  // 40 streaks of length 1 cover at most two pixels each.
  EXPECT_GT(lit, 0u);
  EXPECT_LE(lit, 80u);
}

TEST(SynthSnow, MaskedMeanBrightnessDecreasesAcrossLevels) {
  const auto clean = test_images(1, 6)[0];
  const auto schedule = DegradationSchedule::default_snow(2);
  double previous = 2.0;
  for (const auto& level : schedule.levels) {
    const auto& p = std::get<SnowParams>(level);
    const auto out = synth_snow(clean, p, schedule.seed, 0);
    const auto mask = snow_flake_mask(clean.height, clean.width, p, schedule.seed, 0);
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (mask[i]) continue;
      for (int c = 0; c < 3; ++c) sum += out.pixels[i * 3 + c];
      count += 3;
    }
    const double mean = sum / static_cast<double>(count);
    EXPECT_LT(mean, previous);
    previous = mean;
  }
}

void expect_ssim_strictly_decreasing(const DegradationSchedule& schedule, int images) {
  const auto clean = test_images(images, 40);
  for (std::size_t i = 0; i < clean.size(); ++i) {
    double previous = testing::ssim(clean[i], clean[i]);
    EXPECT_NEAR(previous, 1.0, 1e-12);
    for (std::size_t l = 0; l < schedule.levels.size(); ++l) {
      const double s = testing::ssim(clean[i], apply_level(clean[i], schedule.levels[l], schedule.seed, i));
      EXPECT_LT(s, previous) << "image " << i << " level " << l + 1;
      previous = s;
    }
  }
}

TEST(Schedules, DefaultCloudSsimStrictlyDecreasing) {
  expect_ssim_strictly_decreasing(DegradationSchedule::default_cloud(0), 20);
}

TEST(Schedules, DefaultSnowSsimStrictlyDecreasing) {
  expect_ssim_strictly_decreasing(DegradationSchedule::default_snow(0), 20);
}

TEST(Schedules, DefaultsHaveExpectedLevelCountsAndValidate) {
  EXPECT_EQ(DegradationSchedule::default_cloud().levels.size(), 7u);
  EXPECT_EQ(DegradationSchedule::default_snow().levels.size(), 5u);
  EXPECT_NO_THROW(DegradationSchedule::default_cloud().validate());
  EXPECT_NO_THROW(DegradationSchedule::default_snow().validate());
}

TEST(Schedules, NonMonotonicScheduleIsRejected) {
  auto s = DegradationSchedule::default_snow();
  std::swap(s.levels[1], s.levels[2]);
  EXPECT_THROW(s.validate(), ConfigError);
  auto c = DegradationSchedule::default_cloud();
  c.levels.emplace_back(SnowParams{});
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Schedules, JsonRoundTrip) {
  for (auto s : {DegradationSchedule::default_cloud(3), DegradationSchedule::default_snow(4)}) {
    const auto back = DegradationSchedule::from_json(s.to_json());
    EXPECT_EQ(back.to_json(), s.to_json());
  }
  EXPECT_THROW(DegradationSchedule::from_json(nlohmann::json{{"kind", "fog"}, {"levels", {}}}), ConfigError);
}

TEST(ValueNoise, RangeAndDeterminism) {
  const auto a = value_noise(20, 30, 6.0, 1);
  EXPECT_EQ(a, value_noise(20, 30, 6.0, 1));
  EXPECT_NE(a, value_noise(20, 30, 6.0, 2));
  for (double v : a) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

LabeledDataset ten_images() {
  auto ds = make_shapes_dataset(3, 16, 8);
  ds.images.resize(10);
  ds.labels.resize(10);
  return ds;
}

TEST(BuildDomainSequence, CloudGivesSixIntermediatesAndTarget) {
  const auto seq = build_domain_sequence(ten_images(), DegradationSchedule::default_cloud(1));
  EXPECT_EQ(seq.intermediates.size(), 6u);
  EXPECT_EQ(seq.target.size(), 10u);
  for (const auto& d : seq.intermediates) {
    EXPECT_EQ(d.size(), 10u);
    EXPECT_EQ(d.class_names, seq.source.class_names);
  }
  EXPECT_EQ(seq.adaptation_domain_name(0), "intermediate_01");
  EXPECT_EQ(seq.adaptation_domain_name(6), "target");
}

TEST(BuildDomainSequence, SnowGivesFourIntermediatesAndTarget) {
  const auto clean = ten_images();
  const auto schedule = DegradationSchedule::default_snow(1);
  const auto seq = build_domain_sequence(clean, schedule);
  EXPECT_EQ(seq.intermediates.size(), 4u);
  EXPECT_EQ(seq.target.size(), 10u);
  // Image i of every domain is a corruption of clean image i with the same label.
  for (std::size_t i = 0; i < clean.size(); ++i) {
    EXPECT_EQ(*seq.intermediates[2].images[i], apply_level(*clean.images[i], schedule.levels[2], 1, i));
    EXPECT_EQ(seq.target.labels[i], clean.labels[i]);
  }
}

TEST(BuildDomainSequence, IsDeterministic) {
  const auto a = build_domain_sequence(ten_images(), DegradationSchedule::default_cloud(5));
  const auto b = build_domain_sequence(ten_images(), DegradationSchedule::default_cloud(5));
  for (std::size_t d = 0; d < a.domain_count(); ++d) {
    EXPECT_EQ(dataset_digest(a.adaptation_domain(d)), dataset_digest(b.adaptation_domain(d)));
  }
  EXPECT_EQ(a.manifest, b.manifest);
}

TEST(BuildDomainSequence, EmptyClassIsRejected) {
  auto ds = ten_images();
  ds.class_names.push_back("hexagon");
  EXPECT_THROW(build_domain_sequence(ds, DegradationSchedule::default_snow()), ValidationError);
}

TEST(Dataset, DomainSequenceSurvivesDiskRoundTrip) {
  const auto seq = build_domain_sequence(ten_images(), DegradationSchedule::default_snow(2));
  const auto root = std::filesystem::temp_directory_path() / "driftadapt_seq_test";
  std::filesystem::remove_all(root);
  write_domain_sequence(root, seq);
  EXPECT_TRUE(std::filesystem::exists(root / "manifest.json"));
  const auto back = load_domain_sequence(root);
  ASSERT_EQ(back.domain_count(), seq.domain_count());
  for (std::size_t d = 0; d < seq.domain_count(); ++d) {
    const auto& a = seq.adaptation_domain(d);
    const auto& b = back.adaptation_domain(d);
    ASSERT_EQ(a.size(), b.size());
    EXPECT_EQ(a.labels, b.labels);
    // 16-bit PNG quantization.
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t k = 0; k < a.images[i]->pixels.size(); ++k) {
        EXPECT_NEAR(a.images[i]->pixels[k], b.images[i]->pixels[k], 1.0 / 65535.0);
      }
    }
  }
  std::filesystem::remove_all(root);
}

}  // namespace
}  // namespace driftadapt
