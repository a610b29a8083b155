#pragma once

#include "driftadapt/types.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

namespace driftadapt {

enum class DegradationKind { cloud_cover, snowfall };

std::string to_string(DegradationKind kind);
DegradationKind parse_degradation_kind(const std::string& name);

/// Cloud layer controls. size_scale is the base wavelength of the noise in pixels.
struct CloudParams {
  double density = 0.0;
  double size_scale = 8.0;
  double opacity = 0.0;
};

/// Snow controls. flake_density counts streaks per thousand pixels; streak
/// pixels are painted with flake_intensity (1 is white).
struct SnowParams {
  double flake_density = 0.0;
  double flake_length = 3.0;
  double brightness = 1.0;
  double flake_intensity = 1.0;
};

using LevelParams = std::variant<CloudParams, SnowParams>;

void validate(const CloudParams& params);
void validate(const SnowParams& params);

struct DegradationSchedule {
  DegradationKind kind = DegradationKind::cloud_cover;
  std::vector<LevelParams> levels;
  std::uint64_t seed = 0;

  /// Seven cloud levels, increasing density, size and opacity.
  static DegradationSchedule default_cloud(std::uint64_t seed = 0);
  /// Five snow levels, increasing flake density, decreasing brightness. Flakes
  /// are lit like the rest of the scene (intensity equals brightness).
  static DegradationSchedule default_snow(std::uint64_t seed = 0);
  static DegradationSchedule make_default(DegradationKind kind, std::uint64_t seed = 0);

  /// Checks per-level validity, kind consistency and strict severity ordering.
  void validate() const;

  nlohmann::json to_json() const;
  static DegradationSchedule from_json(const nlohmann::json& doc);
};

/// Multi-octave value noise in [0,1] (4 octaves, persistence 0.5). Row-major H*W.
std::vector<double> value_noise(int height, int width, double base_wavelength, std::uint64_t seed);

Image synth_cloud(const Image& image, const CloudParams& params, std::uint64_t seed,
                  std::uint64_t image_id);

Image synth_snow(const Image& image, const SnowParams& params, std::uint64_t seed,
                 std::uint64_t image_id);

/// Pixels touched by snow streaks for the given draw, row-major H*W.
std::vector<bool> snow_flake_mask(int height, int width, const SnowParams& params,
                                  std::uint64_t seed, std::uint64_t image_id);

Image apply_level(const Image& image, const LevelParams& params, std::uint64_t seed,
                  std::uint64_t image_id);

/// Source, degraded intermediates in increasing severity, and the most severe target.
struct DomainSequence {
  LabeledDataset source;
  std::vector<LabeledDataset> intermediates;
  LabeledDataset target;
  nlohmann::json manifest;

  std::size_t domain_count() const { return intermediates.size() + 1; }
  /// Adaptation order: intermediates then target. Index 0 is the mildest level.
  const LabeledDataset& adaptation_domain(std::size_t index) const;
  std::string adaptation_domain_name(std::size_t index) const;
  std::vector<std::string> class_names() const { return target.class_names; }
};

DomainSequence build_domain_sequence(const LabeledDataset& clean, const DegradationSchedule& schedule);

/// 64-bit FNV-1a digest of a dataset's labels and pixel bytes.
std::uint64_t dataset_digest(const LabeledDataset& dataset);

}  // namespace driftadapt
