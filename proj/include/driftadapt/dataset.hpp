#pragma once

#include "driftadapt/degradation.hpp"
#include "driftadapt/types.hpp"

#include <cstdint>
#include <filesystem>

namespace driftadapt {

/// Reads PNG (8/16-bit, gray/RGB/RGBA) or binary PPM into an RGB image in [0,1].
Image read_image(const std::filesystem::path& path);

/// Writes a 16-bit RGB PNG.
void write_png(const std::filesystem::path& path, const Image& image);

/// Loads `root/<class_name>/<image files>`; classes and files in lexicographic order.
LabeledDataset load_class_folders(const std::filesystem::path& root);

void save_class_folders(const std::filesystem::path& root, const LabeledDataset& dataset);

/// Writes `root/source`, `root/intermediate_NN`, `root/target` and `root/manifest.json`.
void write_domain_sequence(const std::filesystem::path& root, const DomainSequence& sequence);

DomainSequence load_domain_sequence(const std::filesystem::path& root);

/// Desk-scale 4-class toy task: circle, square, triangle and cross drawn in random
/// colors over textured backgrounds. Classes are balanced and interleaved.
LabeledDataset make_shapes_dataset(int per_class, int size, std::uint64_t seed);

/// Deterministic class-balanced split; `fraction` of each class goes to the second part.
std::pair<LabeledDataset, LabeledDataset> split_dataset(const LabeledDataset& dataset,
                                                        double fraction, std::uint64_t seed);

}  // namespace driftadapt
