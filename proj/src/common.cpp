#include "driftadapt/error.hpp"
#include "driftadapt/rng.hpp"
#include "driftadapt/types.hpp"

#include <cmath>
#include <sstream>

namespace driftadapt {

std::string_view to_string(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::input: return "input";
    case ErrorCategory::validation: return "validation";
    case ErrorCategory::config: return "config";
    case ErrorCategory::io: return "io";
    case ErrorCategory::numeric: return "numeric";
  }
  return "unknown";
}

int exit_code(ErrorCategory category) {
  switch (category) {
    case ErrorCategory::input: return 2;
    case ErrorCategory::validation: return 3;
    case ErrorCategory::config: return 4;
    case ErrorCategory::io: return 5;
    case ErrorCategory::numeric: return 6;
  }
  return 1;
}

std::string Rng::state() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

void Rng::set_state(const std::string& state) {
  std::istringstream in(state);
  in >> engine_;
  if (in.fail()) throw InputError("malformed RNG state");
}

void validate_image(const Image& image) {
  if (image.height <= 0 || image.width <= 0 ||
      image.pixels.size() != static_cast<std::size_t>(image.height) * image.width * 3) {
    throw InputError("image has inconsistent shape");
  }
  for (double v : image.pixels) {
    if (!std::isfinite(v)) throw InputError("image contains non-finite pixel values");
    if (v < 0.0 || v > 1.0) throw InputError("image pixel outside [0,1]");
  }
}

void validate_dataset(const LabeledDataset& dataset) {
  if (dataset.empty()) throw ValidationError("dataset is empty");
  if (dataset.labels.size() != dataset.images.size()) {
    throw ValidationError("dataset label count does not match image count");
  }
  if (dataset.class_names.empty()) throw ValidationError("dataset has no classes");
  std::vector<std::size_t> counts(dataset.class_names.size(), 0);
  for (int label : dataset.labels) {
    if (label < 0 || label >= dataset.class_count()) {
      throw ValidationError("dataset label " + std::to_string(label) + " out of range");
    }
    ++counts[static_cast<std::size_t>(label)];
  }
  for (std::size_t k = 0; k < counts.size(); ++k) {
    if (counts[k] == 0) {
      throw ValidationError("class '" + dataset.class_names[k] + "' has no samples");
    }
  }
  const int h = dataset.images.front()->height;
  const int w = dataset.images.front()->width;
  for (const auto& img : dataset.images) {
    if (!img || img->height != h || img->width != w) {
      throw ValidationError("dataset images must share one resolution");
    }
  }
}

}  // namespace driftadapt
