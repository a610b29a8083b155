#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace driftadapt {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

/// An RGB image stored row-major, channels interleaved (HWC), values in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  static constexpr int channels = 3;

  std::size_t size() const { return pixels.size(); }
  double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  double at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool operator==(const Image&) const = default;
};

using ImagePtr = std::shared_ptr<const Image>;

/// A labeled image collection. Labels index into class_names.
struct LabeledDataset {
  std::vector<std::string> class_names;
  std::vector<ImagePtr> images;
  std::vector<int> labels;

  std::size_t size() const { return images.size(); }
  int class_count() const { return static_cast<int>(class_names.size()); }
  bool empty() const { return images.empty(); }
};

/// Throws ValidationError unless every class has at least one sample and labels are in range.
void validate_dataset(const LabeledDataset& dataset);

/// Throws InputError if any pixel is non-finite or outside [0,1].
void validate_image(const Image& image);

}  // namespace driftadapt
