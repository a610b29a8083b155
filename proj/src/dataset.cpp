#include "driftadapt/dataset.hpp"

#include "driftadapt/error.hpp"
#include "driftadapt/rng.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>

namespace driftadapt {

namespace fs = std::filesystem;

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

bool has_extension(const fs::path& p, std::initializer_list<const char*> exts) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return std::any_of(exts.begin(), exts.end(), [&](const char* e) { return ext == e; });
}

Image read_png(const fs::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open image " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("malformed PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);

  const int width = static_cast<int>(png_get_image_width(png, info));
  const int height = static_cast<int>(png_get_image_height(png, info));
  const int out_depth = png_get_bit_depth(png, info);
  const auto rowbytes = png_get_rowbytes(png, info);
  std::vector<unsigned char> buffer(rowbytes * static_cast<std::size_t>(height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(height));
  for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + rowbytes * y;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(height, width);
  for (int y = 0; y < height; ++y) {
    const unsigned char* row = rows[static_cast<std::size_t>(y)];
    for (int x = 0; x < width * 3; ++x) {
      double v;
      if (out_depth == 16) {
        std::uint16_t s;
        std::memcpy(&s, row + 2 * x, 2);
        v = s / 65535.0;
      } else {
        v = row[x] / 255.0;
      }
      img.pixels[static_cast<std::size_t>(y) * width * 3 + x] = v;
    }
  }
  return img;
}

Image read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open image " + path.string());
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P6" || width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
    throw IoError("unsupported PPM " + path.string());
  }
  in.get();
  Image img(height, width);
  const bool wide = maxval > 255;
  for (auto& v : img.pixels) {
    int value;
    if (wide) {
      const int hi = in.get();
      const int lo = in.get();
      value = (hi << 8) | lo;
    } else {
      value = in.get();
    }
    if (!in) throw IoError("truncated PPM " + path.string());
    v = static_cast<double>(value) / maxval;
  }
  return img;
}

void draw_shape(Image& img, int kind, double cx, double cy, double half, double angle,
                const std::array<double, 3>& color) {
  const double ca = std::cos(angle), sa = std::sin(angle);
  auto inside = [&](double px, double py) {
    const double dx = px - cx, dy = py - cy;
    const double u = (ca * dx + sa * dy) / half;
    const double v = (-sa * dx + ca * dy) / half;
    switch (kind) {
      case 0: return u * u + v * v <= 1.0;                       // circle
      case 1: return std::abs(u) <= 0.85 && std::abs(v) <= 0.85;  // square
      case 2: return v <= 0.8 && v >= -1.0 + 0.0 && std::abs(u) <= (v + 1.0) * 0.55;  // triangle
      default: return (std::abs(u) <= 0.3 && std::abs(v) <= 1.0) ||
                      (std::abs(v) <= 0.3 && std::abs(u) <= 1.0);  // cross
    }
  };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy)
        for (int sx = 0; sx < 2; ++sx) hits += inside(x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
      if (hits == 0) continue;
      const double a = hits / 4.0;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = img.at(y, x, c) * (1.0 - a) + color[c] * a;
    }
  }
}

}  // namespace

Image read_image(const fs::path& path) {
  if (has_extension(path, {".png"})) return read_png(path);
  if (has_extension(path, {".ppm"})) return read_ppm(path);
  throw IoError("unsupported image format: " + path.string());
}

void write_png(const fs::path& path, const Image& image) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot write image " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  std::vector<unsigned char> row(static_cast<std::size_t>(image.width) * 6);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height),
               16, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width * 3; ++x) {
      const double v = std::clamp(image.pixels[static_cast<std::size_t>(y) * image.width * 3 + x], 0.0, 1.0);
      const auto s = static_cast<std::uint16_t>(std::lround(v * 65535.0));
      row[2 * static_cast<std::size_t>(x)] = static_cast<unsigned char>(s >> 8);
      row[2 * static_cast<std::size_t>(x) + 1] = static_cast<unsigned char>(s & 0xFF);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

LabeledDataset load_class_folders(const fs::path& root) {
  if (!fs::is_directory(root)) throw ValidationError("dataset directory not found: " + root.string());
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw ValidationError("no class directories under " + root.string());

  LabeledDataset dataset;
  for (const auto& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && has_extension(entry.path(), {".png", ".ppm"})) {
        files.push_back(entry.path());
      }
    }
    if (files.empty()) throw ValidationError("class directory has no images: " + dir.string());
    std::sort(files.begin(), files.end());
    const int label = dataset.class_count();
    dataset.class_names.push_back(dir.filename().string());
    for (const auto& f : files) {
      dataset.images.push_back(std::make_shared<const Image>(read_image(f)));
      dataset.labels.push_back(label);
    }
  }
  validate_dataset(dataset);
  return dataset;
}

void save_class_folders(const fs::path& root, const LabeledDataset& dataset) {
  validate_dataset(dataset);
  std::error_code ec;
  for (const auto& name : dataset.class_names) {
    fs::create_directories(root / name, ec);
    if (ec) throw IoError("cannot create directory " + (root / name).string());
  }
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%06zu.png", i);
    write_png(root / dataset.class_names[static_cast<std::size_t>(dataset.labels[i])] / name,
              *dataset.images[i]);
  }
}

void write_domain_sequence(const fs::path& root, const DomainSequence& sequence) {
  save_class_folders(root / "source", sequence.source);
  for (std::size_t i = 0; i < sequence.domain_count(); ++i) {
    save_class_folders(root / sequence.adaptation_domain_name(i), sequence.adaptation_domain(i));
  }
  std::ofstream out(root / "manifest.json");
  if (!out) throw IoError("cannot write manifest under " + root.string());
  out << sequence.manifest.dump(2) << '\n';
}

namespace {

// Files are named by dataset index, so reloading class folders scrambles the
// original order. Restore it from the numeric file stem.
LabeledDataset load_indexed(const fs::path& dir) {
  LabeledDataset raw = load_class_folders(dir);
  std::vector<std::pair<long, std::size_t>> order;
  std::size_t cursor = 0;
  for (const auto& name : raw.class_names) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir / name)) {
      if (e.is_regular_file() && has_extension(e.path(), {".png", ".ppm"})) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      long index;
      try {
        index = std::stol(f.stem().string());
      } catch (const std::exception&) {
        index = static_cast<long>(cursor);
      }
      order.emplace_back(index, cursor++);
    }
  }
  std::sort(order.begin(), order.end());
  LabeledDataset ds;
  ds.class_names = raw.class_names;
  for (const auto& [index, pos] : order) {
    ds.images.push_back(raw.images[pos]);
    ds.labels.push_back(raw.labels[pos]);
  }
  return ds;
}

}  // namespace

DomainSequence load_domain_sequence(const fs::path& root) {
  std::ifstream in(root / "manifest.json");
  if (!in) throw ValidationError("missing manifest.json under " + root.string());
  DomainSequence seq;
  try {
    seq.manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest: ") + e.what());
  }
  seq.source = load_indexed(root / "source");
  const auto& domains = seq.manifest.at("domains");
  for (std::size_t i = 0; i < domains.size(); ++i) {
    const auto name = domains[i].at("name").get<std::string>();
    auto ds = load_indexed(root / name);
    if (ds.class_names != seq.source.class_names) {
      throw ValidationError("domain '" + name + "' class set differs from source");
    }
    if (i + 1 == domains.size()) {
      seq.target = std::move(ds);
    } else {
      seq.intermediates.push_back(std::move(ds));
    }
  }
  if (seq.target.empty()) throw ValidationError("manifest lists no target domain");
  return seq;
}

LabeledDataset make_shapes_dataset(int per_class, int size, std::uint64_t seed) {
  if (per_class <= 0 || size < 8) throw InputError("shapes dataset needs per_class > 0 and size >= 8");
  LabeledDataset ds;
  ds.class_names = {"circle", "cross", "square", "triangle"};
  const int kinds[] = {0, 3, 1, 2};
  Rng rng(seed);
  for (int i = 0; i < per_class; ++i) {
    for (int label = 0; label < 4; ++label) {
      Image img(size, size);
      // Two-colour gradient background with low-frequency texture.
      std::array<double, 3> bg0{}, bg1{}, fg{};
      for (auto& c : bg0) c = rng.uniform(0.05, 0.55);
      for (auto& c : bg1) c = rng.uniform(0.05, 0.55);
      const auto texture = value_noise(size, size, size / 3.0, rng.next_u64());
      const double gx = rng.uniform(-1.0, 1.0), gy = rng.uniform(-1.0, 1.0);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double t = std::clamp(0.5 + 0.5 * (gx * (x - size / 2.0) + gy * (y - size / 2.0)) / size, 0.0, 1.0);
          const double n = texture[static_cast<std::size_t>(y) * size + x] - 0.5;
          for (int c = 0; c < 3; ++c) img.at(y, x, c) = bg0[c] * (1 - t) + bg1[c] * t + 0.15 * n;
        }
      }
      // Foreground brighter than the background on average.
      for (auto& c : fg) c = rng.uniform(0.55, 1.0);
      const double half = size * rng.uniform(0.24, 0.34);
      const double cx = size / 2.0 + rng.uniform(-0.12, 0.12) * size;
      const double cy = size / 2.0 + rng.uniform(-0.12, 0.12) * size;
      const double angle = rng.uniform(-0.3, 0.3);
      draw_shape(img, kinds[label], cx, cy, half, angle, fg);
      for (auto& v : img.pixels) v = std::clamp(v + 0.03 * rng.normal(), 0.0, 1.0);
      ds.images.push_back(std::make_shared<const Image>(std::move(img)));
      ds.labels.push_back(label);
    }
  }
  return ds;
}

std::pair<LabeledDataset, LabeledDataset> split_dataset(const LabeledDataset& dataset,
                                                        double fraction, std::uint64_t seed) {
  validate_dataset(dataset);
  if (fraction < 0.0 || fraction > 1.0) throw InputError("split fraction must lie in [0,1]");
  LabeledDataset a, b;
  a.class_names = b.class_names = dataset.class_names;
  Rng rng(seed);
  for (int k = 0; k < dataset.class_count(); ++k) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      if (dataset.labels[i] == k) idx.push_back(i);
    }
    rng.shuffle(idx.begin(), idx.end());
    const auto n_b = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size())));
    for (std::size_t j = 0; j < idx.size(); ++j) {
      auto& dst = j < n_b ? b : a;
      dst.images.push_back(dataset.images[idx[j]]);
      dst.labels.push_back(k);
    }
  }
  return {std::move(a), std::move(b)};
}

}  // namespace driftadapt
