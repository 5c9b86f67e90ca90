#pragma once

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "lrmix/tensor.hpp"

namespace lrmix {

inline constexpr std::size_t kNumClasses = 6;
inline constexpr std::array<const char*, kNumClasses> kClassNames{"BA", "BU", "LV", "TR", "CA", "IS"};

enum ClassId : std::uint8_t {
  kBackground = 0,
  kBuilding = 1,
  kLowVegetation = 2,
  kTree = 3,
  kCar = 4,
  kImpervious = 5,
};

/// 3 x H x W pixels in [-1, 1].
struct Image {
  Tensor<float> pixels;
  std::string id;

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
};

struct LabelRaster {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> classes;  // row-major
  std::string id;

  LabelRaster() = default;
  LabelRaster(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), classes(h * w, fill) {}

  std::uint8_t& at(std::size_t i, std::size_t j) { return classes[i * width + j]; }
  std::uint8_t at(std::size_t i, std::size_t j) const { return classes[i * width + j]; }
  bool operator==(const LabelRaster& o) const {
    return height == o.height && width == o.width && classes == o.classes;
  }
};

struct Sample {
  Image image;
  LabelRaster labels;
};

using Dataset = std::vector<Sample>;

// ---------------------------------------------------------------------------
// Patches and splits

/// Non-overlapping row-major tiling; trailing rows/columns that do not fill a
/// whole patch are dropped.
inline std::vector<Sample> crop_patches(const Image& image, const LabelRaster& labels, std::size_t patch) {
  const std::size_t h = image.height(), w = image.width();
  if (labels.height != h || labels.width != w) throw UsageError("crop_patches: image and label shapes differ");
  if (patch == 0 || patch > std::min(h, w))
    throw UsageError("crop_patches: patch " + std::to_string(patch) + " exceeds image " + std::to_string(h) + "x" +
                     std::to_string(w));
  std::vector<Sample> out;
  for (std::size_t r = 0; r + patch <= h; r += patch)
    for (std::size_t c = 0; c + patch <= w; c += patch) {
      const std::string id = image.id + "_r" + std::to_string(r / patch) + "c" + std::to_string(c / patch);
      Sample s{Image{Tensor<float>(Shape{3, patch, patch}), id}, LabelRaster(patch, patch)};
      s.labels.id = id;
      for (std::size_t ch = 0; ch < 3; ++ch)
        for (std::size_t i = 0; i < patch; ++i)
          for (std::size_t j = 0; j < patch; ++j)
            s.image.pixels[(ch * patch + i) * patch + j] = image.pixels[(ch * h + r + i) * w + c + j];
      for (std::size_t i = 0; i < patch; ++i)
        for (std::size_t j = 0; j < patch; ++j) s.labels.at(i, j) = labels.at(r + i, c + j);
      out.push_back(std::move(s));
    }
  return out;
}

// Fisher-Yates driven directly by the engine so the permutation does not
// depend on the standard library's distribution implementation.
template <class Item>
void seeded_shuffle(std::vector<Item>& items, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = items.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(items[i - 1], items[j]);
  }
}

template <class Item>
struct Split {
  std::vector<Item> train, val, test;
};

/// Deterministic shuffle, then floor allocation of the val/test shares; every
/// leftover item goes to train.
template <class Item>
Split<Item> split_dataset(std::vector<Item> items, std::array<double, 3> ratios, std::uint64_t seed) {
  if (items.empty()) throw UsageError("split_dataset: no items to split");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9 || *std::min_element(ratios.begin(), ratios.end()) < 0)
    throw UsageError("split_dataset: ratios must be non-negative and sum to 1");
  const double n = static_cast<double>(items.size());
  const auto share = [&](double r) { return static_cast<std::size_t>(std::floor(r * n + 1e-9)); };
  const std::size_t n_val = share(ratios[1]), n_test = share(ratios[2]);
  const std::size_t n_train = items.size() - n_val - n_test;
  seeded_shuffle(items, seed);
  Split<Item> out;
  out.train.assign(std::make_move_iterator(items.begin()), std::make_move_iterator(items.begin() + n_train));
  out.val.assign(std::make_move_iterator(items.begin() + n_train),
                 std::make_move_iterator(items.begin() + n_train + n_val));
  out.test.assign(std::make_move_iterator(items.begin() + n_train + n_val), std::make_move_iterator(items.end()));
  return out;
}

inline Split<Sample> split_dataset(Dataset items, std::uint64_t seed) {
  return split_dataset<Sample>(std::move(items), {0.70, 0.15, 0.15}, seed);
}

// ---------------------------------------------------------------------------
// Synthetic two-domain scenes

/// Rendering parameters of one domain.
struct DomainStyle {
  std::array<std::array<float, 3>, kNumClasses> palette{{
      {0.25f, 0.05f, -0.25f},   // BA: bare soil
      {0.65f, 0.60f, 0.55f},    // BU: light roofs
      {-0.15f, 0.55f, -0.35f},  // LV: grass
      {-0.55f, 0.15f, -0.60f},  // TR: dark canopy
      {0.85f, -0.55f, -0.50f},  // CA: red cars
      {-0.05f, -0.05f, 0.15f},  // IS: asphalt
  }};
  float contrast = 1.0f;
  float texture_frequency = 0.6f;  // radians per pixel
  float texture_amplitude = 0.08f;
  float noise = 0.03f;
};

/// Global invertible colour map y = M x + b applied to every pixel.
struct ColorRestyle {
  std::array<float, 9> matrix{0, 0.85f, 0, 0, 0, 0.85f, 0.85f, 0, 0};  // rotate channels, mild compression
  std::array<float, 3> offset{0.05f, 0.0f, -0.05f};
};

struct SceneSpec {
  std::uint64_t seed = 7;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t roads = 1;
  std::size_t buildings = 2;
  std::size_t vegetation = 2;
  std::size_t trees = 3;
  std::size_t cars = 2;
  bool shared_layout = false;
  DomainStyle source_style;
  DomainStyle target_style = [] {
    DomainStyle s;
    s.texture_frequency = 1.3f;
    s.texture_amplitude = 0.12f;
    return s;
  }();
  ColorRestyle restyle;
};

inline Image apply_restyle(const Image& image, const ColorRestyle& r) {
  Image out = image;
  const std::size_t plane = image.height() * image.width();
  for (std::size_t p = 0; p < plane; ++p) {
    const float x[3] = {image.pixels[p], image.pixels[plane + p], image.pixels[2 * plane + p]};
    for (std::size_t c = 0; c < 3; ++c) {
      const float y = r.matrix[c * 3] * x[0] + r.matrix[c * 3 + 1] * x[1] + r.matrix[c * 3 + 2] * x[2] + r.offset[c];
      out.pixels[c * plane + p] = std::clamp(y, -1.0f, 1.0f);
    }
  }
  return out;
}

namespace detail {

inline std::size_t uniform_index(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {  // inclusive
  return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
}

inline LabelRaster draw_layout(const SceneSpec& spec, std::mt19937_64& rng) {
  const std::size_t h = spec.height, w = spec.width;
  LabelRaster lab(h, w, kBackground);
  auto rect = [&](std::size_t r0, std::size_t c0, std::size_t rh, std::size_t cw, std::uint8_t cls) {
    for (std::size_t i = r0; i < std::min(h, r0 + rh); ++i)
      for (std::size_t j = c0; j < std::min(w, c0 + cw); ++j) lab.at(i, j) = cls;
  };
  auto ellipse = [&](double ci, double cj, double ri, double rj, std::uint8_t cls) {
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        const double di = (static_cast<double>(i) - ci) / ri, dj = (static_cast<double>(j) - cj) / rj;
        if (di * di + dj * dj <= 1.0) lab.at(i, j) = cls;
      }
  };
  const std::size_t unit = std::max<std::size_t>(1, std::min(h, w) / 16);  // 4 px on a 64 px canvas

  // Impervious bands; cars are later parked on them.
  std::vector<std::array<std::size_t, 4>> roads;
  for (std::size_t k = 0; k < spec.roads; ++k) {
    const std::size_t width = uniform_index(rng, 2 * unit, 3 * unit);
    if (rng() % 2) {
      const std::size_t r = uniform_index(rng, 0, h - width);
      roads.push_back({r, 0, width, w});
    } else {
      const std::size_t c = uniform_index(rng, 0, w - width);
      roads.push_back({0, c, h, width});
    }
    rect(roads.back()[0], roads.back()[1], roads.back()[2], roads.back()[3], kImpervious);
  }
  for (std::size_t k = 0; k < spec.vegetation; ++k)
    ellipse(static_cast<double>(uniform_index(rng, 0, h - 1)), static_cast<double>(uniform_index(rng, 0, w - 1)),
            static_cast<double>(uniform_index(rng, 2 * unit, 3 * unit)),
            static_cast<double>(uniform_index(rng, 2 * unit, 4 * unit)), kLowVegetation);
  for (std::size_t k = 0; k < spec.buildings; ++k) {
    const std::size_t rh = uniform_index(rng, 2 * unit, 4 * unit), cw = uniform_index(rng, 2 * unit, 4 * unit);
    rect(uniform_index(rng, 0, h - rh), uniform_index(rng, 0, w - cw), rh, cw, kBuilding);
  }
  for (std::size_t k = 0; k < spec.trees; ++k) {
    const double radius = static_cast<double>(uniform_index(rng, unit, 2 * unit - 1)) + 0.5;
    ellipse(static_cast<double>(uniform_index(rng, 0, h - 1)), static_cast<double>(uniform_index(rng, 0, w - 1)),
            radius, radius, kTree);
  }
  for (std::size_t k = 0; k < spec.cars && !roads.empty(); ++k) {
    const auto& road = roads[k % roads.size()];
    const bool horizontal = road[3] == w;
    const std::size_t long_side = std::max<std::size_t>(2, unit + unit / 2), short_side = std::max<std::size_t>(1, unit / 2 + 1);
    const std::size_t rh = horizontal ? short_side : long_side, cw = horizontal ? long_side : short_side;
    const std::size_t r = road[0] + uniform_index(rng, 0, road[2] - std::min(road[2], rh));
    const std::size_t c = road[1] + uniform_index(rng, 0, road[3] - std::min(road[3], cw));
    rect(r, c, rh, cw, kCar);
  }
  return lab;
}

inline Image render(const LabelRaster& lab, const DomainStyle& style, std::mt19937_64& rng, std::string id) {
  const std::size_t h = lab.height, w = lab.width, plane = h * w;
  Image img{Tensor<float>(Shape{3, h, w}), std::move(id)};
  std::array<float, kNumClasses> phase{};
  for (auto& p : phase) p = static_cast<float>(rng() % 6283) / 1000.0f;
  std::normal_distribution<float> noise(0.0f, style.noise);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      const std::uint8_t cls = lab.at(i, j);
      const float tex = style.texture_amplitude *
                        std::sin(style.texture_frequency * static_cast<float>(i + 2 * j) + phase[cls]);
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = style.contrast * style.palette[cls][c] + tex + noise(rng);
        img.pixels[c * plane + i * w + j] = std::clamp(v, -1.0f, 1.0f);
      }
    }
  return img;
}

}  // namespace detail

struct DomainPair {
  Dataset source;
  Dataset target;
};

/// n labelled scenes per domain. Target images are rendered with the target
/// style and then passed through the global colour restyle; labels are never
/// touched by styling.
inline DomainPair generate_domain_pair(const SceneSpec& spec, std::size_t n) {
  if (n == 0) throw UsageError("generate_domain_pair: n must be at least 1");
  if (spec.height < 16 || spec.width < 16) throw UsageError("generate_domain_pair: canvas must be at least 16x16");
  DomainPair out;
  std::mt19937_64 layout_rng(spec.seed);
  std::mt19937_64 target_layout_rng(spec.seed ^ 0x5eed7a76e7ULL);
  std::mt19937_64 source_render_rng(spec.seed + 1);
  std::mt19937_64 target_render_rng(spec.seed + 2);
  for (std::size_t k = 0; k < n; ++k) {
    char num[24];
    std::snprintf(num, sizeof(num), "%04zu", k);
    LabelRaster src_lab = detail::draw_layout(spec, layout_rng);
    LabelRaster tgt_lab = spec.shared_layout ? src_lab : detail::draw_layout(spec, target_layout_rng);
    src_lab.id = std::string("src_") + num;
    tgt_lab.id = std::string("tgt_") + num;
    Image src = detail::render(src_lab, spec.source_style, source_render_rng, src_lab.id);
    Image tgt = apply_restyle(detail::render(tgt_lab, spec.target_style, target_render_rng, tgt_lab.id), spec.restyle);
    out.source.push_back({std::move(src), std::move(src_lab)});
    out.target.push_back({std::move(tgt), std::move(tgt_lab)});
  }
  return out;
}

inline std::size_t distinct_classes(const LabelRaster& lab) {
  std::array<bool, 256> seen{};
  for (auto c : lab.classes) seen[c] = true;
  return static_cast<std::size_t>(std::count(seen.begin(), seen.end(), true));
}

// ---------------------------------------------------------------------------
// Raster I/O (8-bit PNG)

namespace detail {

inline void require_png(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  if (ext != ".png") throw IngestionError(path.string() + ": unsupported raster format `" + ext + "` (expected .png)");
}

inline std::vector<std::uint8_t> read_png(const std::filesystem::path& path, png_uint_32 format, std::size_t channels,
                                          std::size_t& height, std::size_t& width) {
  require_png(path);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw IngestionError(path.string() + ": " + img.message);
  if (channels == 1 && (img.format & PNG_FORMAT_FLAG_COLOR)) {
    png_image_free(&img);
    throw IngestionError(path.string() + ": label raster must be single-channel");
  }
  img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, buf.data(), 0, nullptr))
    throw IngestionError(path.string() + ": " + img.message);
  height = img.height;
  width = img.width;
  return buf;
}

inline void write_png(const std::filesystem::path& path, png_uint_32 format, std::size_t height, std::size_t width,
                      const std::vector<std::uint8_t>& buf) {
  require_png(path);
  png_image img{};
  img.version = PNG_IMAGE_VERSION;
  img.format = format;
  img.height = static_cast<png_uint_32>(height);
  img.width = static_cast<png_uint_32>(width);
  if (!png_image_write_to_file(&img, path.c_str(), 0, buf.data(), 0, nullptr))
    throw IngestionError(path.string() + ": " + img.message);
}

}  // namespace detail

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f));
}
inline float from_byte(std::uint8_t b) { return static_cast<float>(b) / 127.5f - 1.0f; }

inline Image load_image(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const auto buf = detail::read_png(path, PNG_FORMAT_RGB, 3, h, w);
  Image img{Tensor<float>(Shape{3, h, w}), path.stem().string()};
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c) img.pixels[c * h * w + p] = from_byte(buf[p * 3 + c]);
  return img;
}

inline void save_image(const std::filesystem::path& path, const Image& img) {
  if (img.pixels.rank() != 3 || img.pixels.dim(0) != 3) throw UsageError("save_image: expected a 3 x H x W image");
  const std::size_t h = img.height(), w = img.width();
  std::vector<std::uint8_t> buf(h * w * 3);
  for (std::size_t p = 0; p < h * w; ++p)
    for (std::size_t c = 0; c < 3; ++c) buf[p * 3 + c] = to_byte(img.pixels[c * h * w + p]);
  detail::write_png(path, PNG_FORMAT_RGB, h, w, buf);
}

inline LabelRaster load_labels(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  auto buf = detail::read_png(path, PNG_FORMAT_GRAY, 1, h, w);
  for (std::size_t p = 0; p < buf.size(); ++p)
    if (buf[p] >= kNumClasses)
      throw IngestionError(path.string() + ": class index " + std::to_string(buf[p]) + " at pixel (" +
                           std::to_string(p / w) + ", " + std::to_string(p % w) + ") is outside 0-5");
  LabelRaster lab(h, w);
  lab.classes = std::move(buf);
  lab.id = path.stem().string();
  return lab;
}

inline void save_labels(const std::filesystem::path& path, const LabelRaster& lab) {
  for (auto c : lab.classes)
    if (c >= kNumClasses) throw UsageError("save_labels: class index out of range");
  detail::write_png(path, PNG_FORMAT_GRAY, lab.height, lab.width, lab.classes);
}

/// Writes `<root>/<split>/images/<id>.png` and `<root>/<split>/labels/<id>.png`.
inline void save_dataset(const std::filesystem::path& root, const std::string& split, const Dataset& data) {
  const auto images = root / split / "images", labels = root / split / "labels";
  std::filesystem::create_directories(images);
  std::filesystem::create_directories(labels);
  for (const auto& s : data) {
    save_image(images / (s.image.id + ".png"), s.image);
    save_labels(labels / (s.image.id + ".png"), s.labels);
  }
}

/// Loads a split directory, pairing images and labels by file stem.
inline Dataset load_dataset(const std::filesystem::path& split_dir) {
  const auto images = split_dir / "images", labels = split_dir / "labels";
  if (!std::filesystem::is_directory(images))
    throw IngestionError(split_dir.string() + ": missing images/ directory");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(images))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  Dataset out;
  for (const auto& f : files) {
    Sample s{load_image(f), {}};
    const auto lab_path = labels / f.filename();
    if (!std::filesystem::exists(lab_path)) throw IngestionError(f.string() + ": no label raster at " + lab_path.string());
    s.labels = load_labels(lab_path);
    if (s.labels.height != s.image.height() || s.labels.width != s.image.width())
      throw IngestionError(lab_path.string() + ": label shape differs from its image");
    out.push_back(std::move(s));
  }
  if (out.empty()) throw IngestionError(split_dir.string() + ": no images found");
  return out;
}

// ---------------------------------------------------------------------------
// Batching

/// Stacks images [begin, end) of `order` into an N x 3 x H x W tensor.
inline Tensor<float> stack_images(const Dataset& data, const std::vector<std::size_t>& order, std::size_t begin,
                                  std::size_t end) {
  const auto& first = data.at(order.at(begin)).image;
  const std::size_t h = first.height(), w = first.width(), plane = 3 * h * w;
  Tensor<float> out(Shape{end - begin, 3, h, w});
  for (std::size_t k = begin; k < end; ++k) {
    const auto& px = data[order[k]].image.pixels;
    if (px.shape() != first.pixels.shape()) throw UsageError("stack_images: images differ in size");
    std::copy(px.data().begin(), px.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>((k - begin) * plane));
  }
  return out;
}

inline Tensor<float> stack_images(const Dataset& data) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  return stack_images(data, order, 0, order.size());
}

inline std::vector<std::int32_t> stack_labels(const Dataset& data, const std::vector<std::size_t>& order,
                                              std::size_t begin, std::size_t end) {
  std::vector<std::int32_t> out;
  for (std::size_t k = begin; k < end; ++k)
    for (auto c : data[order[k]].labels.classes) out.push_back(c);
  return out;
}

/// Image tensor 1 x 3 x H x W for a single sample.
inline Tensor<float> as_batch(const Image& img) { return img.pixels.reshaped(Shape{1, 3, img.height(), img.width()}); }

inline Image image_from_batch(const Tensor<float>& batch, std::size_t index, std::string id) {
  const std::size_t h = batch.dim(2), w = batch.dim(3), plane = 3 * h * w;
  Image img{Tensor<float>(Shape{3, h, w}), std::move(id)};
  std::copy(batch.data().begin() + static_cast<std::ptrdiff_t>(index * plane),
            batch.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * plane), img.pixels.data().begin());
  return img;
}

}  // namespace lrmix
