#include "driftadapt/degradation.hpp"

#include "driftadapt/error.hpp"
#include "driftadapt/rng.hpp"

#include <algorithm>
#include <cmath>

namespace driftadapt {

namespace {

constexpr int kOctaves = 4;
constexpr double kPersistence = 0.5;
// Width of the soft cloud edge, in noise units.
constexpr double kCloudEdge = 0.08;

double lattice_value(std::uint64_t seed, int octave, long ix, long iy) {
  const auto h = hash_combine(hash_combine(seed, static_cast<std::uint64_t>(octave)),
                              hash_combine(static_cast<std::uint64_t>(ix),
                                           static_cast<std::uint64_t>(iy) + 0x51ED27ULL));
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

std::uint64_t image_seed(std::uint64_t seed, std::uint64_t image_id) {
  return splitmix64(seed ^ image_id);
}

void check_finite(const Image& image) {
  if (image.height <= 0 || image.width <= 0 ||
      image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw InputError("image has inconsistent shape");
  }
  for (double v : image.pixels) {
    if (!std::isfinite(v)) throw InputError("image contains non-finite pixel values");
  }
}

bool finite_all(std::initializer_list<double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

struct Streak {
  double x0, y0, dx, dy, length;
};

std::vector<Streak> draw_streaks(int height, int width, const SnowParams& params,
                                 std::uint64_t seed, std::uint64_t image_id) {
  const double count_real = params.flake_density * height * width / 1000.0;
  const auto count = static_cast<std::size_t>(std::llround(count_real));
  Rng rng(image_seed(seed, image_id) ^ 0x5A0F1A4EULL);
  std::vector<Streak> streaks;
  streaks.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const double x0 = rng.uniform(0.0, width);
    const double y0 = rng.uniform(0.0, height);
    // Mostly falling streaks with a random slant.
    const double angle = M_PI / 2.0 + rng.uniform(-0.45, 0.45);
    streaks.push_back({x0, y0, std::cos(angle), std::sin(angle), params.flake_length});
  }
  return streaks;
}

}  // namespace

std::string to_string(DegradationKind kind) {
  return kind == DegradationKind::cloud_cover ? "cloud_cover" : "snowfall";
}

DegradationKind parse_degradation_kind(const std::string& name) {
  if (name == "cloud_cover" || name == "cloud") return DegradationKind::cloud_cover;
  if (name == "snowfall" || name == "snow") return DegradationKind::snowfall;
  throw ConfigError("unknown degradation kind '" + name + "'");
}

void validate(const CloudParams& p) {
  if (!finite_all({p.density, p.size_scale, p.opacity})) {
    throw InputError("cloud parameters must be finite");
  }
  if (p.density < 0.0 || p.density > 1.0) throw InputError("cloud density must lie in [0,1]");
  if (p.opacity < 0.0 || p.opacity > 1.0) throw InputError("cloud opacity must lie in [0,1]");
  if (p.size_scale <= 0.0) throw InputError("cloud size_scale must be positive");
}

void validate(const SnowParams& p) {
  if (!finite_all({p.flake_density, p.flake_length, p.brightness, p.flake_intensity})) {
    throw InputError("snow parameters must be finite");
  }
  if (p.flake_density < 0.0) throw InputError("snow flake_density must be nonnegative");
  if (p.flake_length < 0.0) throw InputError("snow flake_length must be nonnegative");
  if (p.brightness <= 0.0 || p.brightness > 1.0) {
    throw InputError("snow brightness must lie in (0,1]");
  }
  if (p.flake_intensity < 0.0 || p.flake_intensity > 1.0) {
    throw InputError("snow flake_intensity must lie in [0,1]");
  }
}

DegradationSchedule DegradationSchedule::default_cloud(std::uint64_t seed) {
  DegradationSchedule s;
  s.kind = DegradationKind::cloud_cover;
  s.seed = seed;
  const double density[] = {0.10, 0.20, 0.30, 0.40, 0.50, 0.60, 0.70};
  const double size[] = {8.00, 8.05, 8.10, 8.15, 8.20, 8.25, 8.30};
  const double opacity[] = {0.35, 0.45, 0.55, 0.65, 0.75, 0.85, 0.95};
  for (int i = 0; i < 7; ++i) s.levels.emplace_back(CloudParams{density[i], size[i], opacity[i]});
  return s;
}

DegradationSchedule DegradationSchedule::default_snow(std::uint64_t seed) {
  DegradationSchedule s;
  s.kind = DegradationKind::snowfall;
  s.seed = seed;
  const double flakes[] = {1.0, 2.0, 3.0, 4.0, 5.0};
  const double brightness[] = {0.86, 0.72, 0.58, 0.44, 0.30};
  for (int i = 0; i < 5; ++i) s.levels.emplace_back(SnowParams{flakes[i], 3.0, brightness[i], brightness[i]});
  return s;
}

DegradationSchedule DegradationSchedule::make_default(DegradationKind kind, std::uint64_t seed) {
  return kind == DegradationKind::cloud_cover ? default_cloud(seed) : default_snow(seed);
}

void DegradationSchedule::validate() const {
  if (levels.empty()) throw ConfigError("degradation schedule has no levels");
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const bool is_cloud = std::holds_alternative<CloudParams>(levels[i]);
    if (is_cloud != (kind == DegradationKind::cloud_cover)) {
      throw ConfigError("level " + std::to_string(i + 1) + " does not match schedule kind");
    }
    std::visit([](const auto& p) { driftadapt::validate(p); }, levels[i]);
    if (i == 0) continue;
    if (is_cloud) {
      const auto& a = std::get<CloudParams>(levels[i - 1]);
      const auto& b = std::get<CloudParams>(levels[i]);
      if (!(b.density > a.density) || !(b.size_scale > a.size_scale)) {
        throw ConfigError("cloud density and size must increase strictly across levels");
      }
    } else {
      const auto& a = std::get<SnowParams>(levels[i - 1]);
      const auto& b = std::get<SnowParams>(levels[i]);
      if (!(b.flake_density > a.flake_density) || !(b.brightness < a.brightness)) {
        throw ConfigError(
            "snow flake density must increase and brightness decrease strictly across levels");
      }
    }
  }
}

nlohmann::json DegradationSchedule::to_json() const {
  nlohmann::json doc;
  doc["kind"] = to_string(kind);
  doc["seed"] = seed;
  doc["levels"] = nlohmann::json::array();
  for (const auto& level : levels) {
    if (const auto* c = std::get_if<CloudParams>(&level)) {
      doc["levels"].push_back(
          {{"density", c->density}, {"size_scale", c->size_scale}, {"opacity", c->opacity}});
    } else {
      const auto& s = std::get<SnowParams>(level);
      doc["levels"].push_back({{"flake_density", s.flake_density},
                               {"flake_length", s.flake_length},
                               {"brightness", s.brightness},
                               {"flake_intensity", s.flake_intensity}});
    }
  }
  return doc;
}

DegradationSchedule DegradationSchedule::from_json(const nlohmann::json& doc) {
  DegradationSchedule s;
  try {
    s.kind = parse_degradation_kind(doc.at("kind").get<std::string>());
    s.seed = doc.value("seed", std::uint64_t{0});
    for (const auto& level : doc.at("levels")) {
      if (s.kind == DegradationKind::cloud_cover) {
        s.levels.emplace_back(CloudParams{level.at("density").get<double>(),
                                          level.at("size_scale").get<double>(),
                                          level.at("opacity").get<double>()});
      } else {
        s.levels.emplace_back(SnowParams{level.at("flake_density").get<double>(),
                                         level.at("flake_length").get<double>(),
                                         level.at("brightness").get<double>(),
                                         level.value("flake_intensity", 1.0)});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed degradation schedule: ") + e.what());
  }
  s.validate();
  return s;
}

std::vector<double> value_noise(int height, int width, double base_wavelength, std::uint64_t seed) {
  std::vector<double> out(static_cast<std::size_t>(height) * width, 0.0);
  double amplitude = 1.0;
  double total = 0.0;
  double wavelength = base_wavelength;
  for (int octave = 0; octave < kOctaves; ++octave) {
    const double inv = 1.0 / std::max(wavelength, 1.0);
    for (int y = 0; y < height; ++y) {
      const double fy = y * inv;
      const long iy = static_cast<long>(std::floor(fy));
      const double ty = smooth(fy - iy);
      for (int x = 0; x < width; ++x) {
        const double fx = x * inv;
        const long ix = static_cast<long>(std::floor(fx));
        const double tx = smooth(fx - ix);
        const double v00 = lattice_value(seed, octave, ix, iy);
        const double v10 = lattice_value(seed, octave, ix + 1, iy);
        const double v01 = lattice_value(seed, octave, ix, iy + 1);
        const double v11 = lattice_value(seed, octave, ix + 1, iy + 1);
        const double top = v00 + (v10 - v00) * tx;
        const double bottom = v01 + (v11 - v01) * tx;
        out[static_cast<std::size_t>(y) * width + x] += amplitude * (top + (bottom - top) * ty);
      }
    }
    total += amplitude;
    amplitude *= kPersistence;
    wavelength *= 0.5;
  }
  for (double& v : out) v /= total;
  return out;
}

Image synth_cloud(const Image& image, const CloudParams& params, std::uint64_t seed,
                  std::uint64_t image_id) {
  check_finite(image);
  validate(params);
  Image out = image;
  if (params.opacity == 0.0 || params.density == 0.0) return out;

  const std::size_t n = static_cast<std::size_t>(image.height) * image.width;
  const auto base = image_seed(seed, image_id);
  const auto shape = value_noise(image.height, image.width, params.size_scale, base);
  // Fine detail for the cloud's own shading, independent of the coverage field.
  const auto shade = value_noise(image.height, image.width, std::max(2.0, params.size_scale / 3.0),
                                 base ^ 0xC1044DULL);

  // Threshold at the (1 - density) quantile so density is the covered fraction.
  std::vector<double> sorted = shape;
  const auto rank = static_cast<std::size_t>(
      std::clamp((1.0 - params.density) * static_cast<double>(n - 1), 0.0, static_cast<double>(n - 1)));
  std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(rank), sorted.end());
  const double threshold = sorted[rank];

  for (std::size_t i = 0; i < n; ++i) {
    const double cover = std::clamp((shape[i] - threshold) / kCloudEdge + params.density, 0.0, 1.0);
    const double alpha = params.opacity * cover;
    if (alpha <= 0.0) continue;
    const double color = 0.9 + 0.1 * shade[i];
    for (int c = 0; c < 3; ++c) {
      double& px = out.pixels[i * 3 + c];
      px = std::clamp(px * (1.0 - alpha) + color * alpha, 0.0, 1.0);
    }
  }
  return out;
}

std::vector<bool> snow_flake_mask(int height, int width, const SnowParams& params,
                                  std::uint64_t seed, std::uint64_t image_id) {
  validate(params);
  std::vector<bool> mask(static_cast<std::size_t>(height) * width, false);
  for (const auto& s : draw_streaks(height, width, params, seed, image_id)) {
    const int steps = std::max(1, static_cast<int>(std::ceil(s.length * 2.0)));
    for (int k = 0; k <= steps; ++k) {
      const double t = s.length * k / steps;
      const int x = static_cast<int>(std::floor(s.x0 + s.dx * t));
      const int y = static_cast<int>(std::floor(s.y0 + s.dy * t));
      if (x < 0 || y < 0 || x >= width || y >= height) continue;
      mask[static_cast<std::size_t>(y) * width + x] = true;
    }
  }
  return mask;
}

Image synth_snow(const Image& image, const SnowParams& params, std::uint64_t seed,
                 std::uint64_t image_id) {
  check_finite(image);
  validate(params);
  Image out = image;
  if (params.brightness != 1.0) {
    for (double& v : out.pixels) v = std::clamp(v * params.brightness, 0.0, 1.0);
  }
  if (params.flake_density == 0.0) return out;
  const auto mask = snow_flake_mask(image.height, image.width, params, seed, image_id);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (!mask[i]) continue;
    for (int c = 0; c < 3; ++c) out.pixels[i * 3 + c] = params.flake_intensity;
  }
  return out;
}

Image apply_level(const Image& image, const LevelParams& params, std::uint64_t seed,
                  std::uint64_t image_id) {
  if (const auto* c = std::get_if<CloudParams>(&params)) return synth_cloud(image, *c, seed, image_id);
  return synth_snow(image, std::get<SnowParams>(params), seed, image_id);
}

const LabeledDataset& DomainSequence::adaptation_domain(std::size_t index) const {
  if (index < intermediates.size()) return intermediates[index];
  if (index == intermediates.size()) return target;
  throw InputError("domain index out of range");
}

std::string DomainSequence::adaptation_domain_name(std::size_t index) const {
  if (index < intermediates.size()) {
    const auto n = std::to_string(index + 1);
    return "intermediate_" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
  }
  if (index == intermediates.size()) return "target";
  throw InputError("domain index out of range");
}

std::uint64_t dataset_digest(const LabeledDataset& dataset) {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  auto feed = [&h](const void* data, std::size_t bytes) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < bytes; ++i) {
      h ^= p[i];
      h *= 0x100000001B3ULL;
    }
  };
  for (const auto& name : dataset.class_names) feed(name.data(), name.size());
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    feed(&dataset.labels[i], sizeof(int));
    feed(dataset.images[i]->pixels.data(), dataset.images[i]->pixels.size() * sizeof(double));
  }
  return h;
}

DomainSequence build_domain_sequence(const LabeledDataset& clean, const DegradationSchedule& schedule) {
  validate_dataset(clean);
  schedule.validate();
  if (schedule.levels.size() < 1) throw ConfigError("schedule needs at least one level");

  DomainSequence seq;
  seq.source = clean;
  const std::size_t level_count = schedule.levels.size();
  std::vector<LabeledDataset> domains(level_count);
  for (std::size_t level = 0; level < level_count; ++level) {
    auto& d = domains[level];
    d.class_names = clean.class_names;
    d.labels = clean.labels;
    d.images.reserve(clean.size());
    for (std::size_t i = 0; i < clean.size(); ++i) {
      d.images.push_back(std::make_shared<const Image>(
          apply_level(*clean.images[i], schedule.levels[level], schedule.seed, i)));
    }
  }
  seq.target = std::move(domains.back());
  domains.pop_back();
  seq.intermediates = std::move(domains);

  auto& m = seq.manifest;
  m["schedule"] = schedule.to_json();
  m["classes"] = clean.class_names;
  m["images_per_domain"] = clean.size();
  m["source"] = {{"name", "source"}, {"digest", dataset_digest(seq.source)}};
  m["domains"] = nlohmann::json::array();
  for (std::size_t i = 0; i < seq.domain_count(); ++i) {
    m["domains"].push_back({{"name", seq.adaptation_domain_name(i)},
                            {"level", i + 1},
                            {"role", i + 1 == seq.domain_count() ? "target" : "intermediate"},
                            {"params", m["schedule"]["levels"][i]},
                            {"digest", dataset_digest(seq.adaptation_domain(i))}});
  }
  return seq;
}

}  // namespace driftadapt
