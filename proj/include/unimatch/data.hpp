#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "unimatch/color.hpp"
#include "unimatch/datamodel.hpp"
#include "unimatch/rng.hpp"

namespace unimatch {

class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class SplitError : public ConfigError {
 public:
  using ConfigError::ConfigError;
};

struct SyntheticSpec {
  int num_samples = 200;
  int image_size = 64;
  int num_classes = 3;
  int shapes_min = 1;
  int shapes_max = 3;
  double noise = 0.08;
  std::uint64_t seed = 7;
  std::string id_prefix = "syn";
};

struct Sample {
  FloatTensor image;  // (3, H, W) in [0,1]
  IndexTensor mask;   // (H, W)
};

/// In-memory dataset. Reads are const and safe to run concurrently.
class DatasetHandle {
 public:
  DatasetHandle() = default;
  DatasetHandle(std::string dataset_id, int num_classes, std::int32_t ignore_value)
      : dataset_id_(std::move(dataset_id)), num_classes_(num_classes), ignore_value_(ignore_value) {}

  void add(std::string id, Sample s) {
    require(s.image.rank() == 3 && s.image.dim(0) == 3, "sample image must be (3,H,W)");
    require(s.mask.rank() == 2 && s.mask.dim(0) == s.image.dim(1) && s.mask.dim(1) == s.image.dim(2),
            "sample mask must match image spatial shape");
    if (index_.count(id)) throw ContractError("duplicate sample id '" + id + "'");
    index_.emplace(id, samples_.size());
    ids_.push_back(std::move(id));
    samples_.push_back(std::move(s));
  }

  const std::string& dataset_id() const { return dataset_id_; }
  const std::vector<std::string>& ids() const { return ids_; }
  std::size_t size() const { return ids_.size(); }
  int num_classes() const { return num_classes_; }
  std::int32_t ignore_value() const { return ignore_value_; }
  bool contains(const std::string& id) const { return index_.count(id) > 0; }

  const Sample& get(const std::string& id) const {
    auto it = index_.find(id);
    if (it == index_.end()) throw ContractError("unknown sample id '" + id + "'");
    return samples_[it->second];
  }
  const Sample& at(std::size_t i) const { return samples_.at(i); }

  /// Per-channel mean and std over all pixels, used for normalization and padding.
  std::array<float, 3> mean() const { return stats().first; }
  std::array<float, 3> stddev() const { return stats().second; }

 private:
  std::pair<std::array<float, 3>, std::array<float, 3>> stats() const {
    std::array<double, 3> sum{}, sq{};
    double n = 0;
    for (const auto& s : samples_) {
      const std::size_t p = s.image.dim(1) * s.image.dim(2);
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < p; ++i) {
          const double v = s.image[c * p + i];
          sum[c] += v;
          sq[c] += v * v;
        }
      n += static_cast<double>(p);
    }
    std::array<float, 3> m{0.5f, 0.5f, 0.5f}, sd{0.25f, 0.25f, 0.25f};
    if (n > 0)
      for (std::size_t c = 0; c < 3; ++c) {
        m[c] = static_cast<float>(sum[c] / n);
        sd[c] = static_cast<float>(std::sqrt(std::max(sq[c] / n - (sum[c] / n) * (sum[c] / n), 1e-6)));
      }
    return {m, sd};
  }

  std::string dataset_id_;
  int num_classes_ = 0;
  std::int32_t ignore_value_ = kIgnoreValue;
  std::vector<std::string> ids_;
  std::vector<Sample> samples_;
  std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Synthetic shapes

namespace detail {

enum class ShapeKind { disk, rectangle, triangle };

struct Placed {
  double cy, cx, radius;
};

inline bool inside(ShapeKind kind, double dy, double dx, double r, double aspect, double angle) {
  switch (kind) {
    case ShapeKind::disk:
      return dy * dy + dx * dx <= r * r;
    case ShapeKind::rectangle: {
      // axis-aligned bar, aspect = width / height
      const double hy = 0.8 * r / std::sqrt(aspect), hx = 0.8 * r * std::sqrt(aspect);
      return std::abs(dy) <= hy && std::abs(dx) <= hx;
    }
    case ShapeKind::triangle: {
      // equilateral triangle inscribed in radius r, rotated by angle
      const double c = std::cos(angle), s = std::sin(angle);
      const double y = c * dy - s * dx, x = s * dy + c * dx;
      const double k = std::sqrt(3.0);
      return y <= r * 0.5 && (k * x - y) <= r && (-k * x - y) <= r;
    }
  }
  return false;
}

}  // namespace detail

/// Colored disks, elongated bars and triangles over a noisy background. Shape
/// kind determines the class (class 1 + kind, cycling for K > 4 with a
/// size band per cycle); background is class 0. Later shapes occlude
/// earlier ones.
inline DatasetHandle generate_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic: num_classes must be >= 2");
  if (spec.image_size < 32) throw ConfigError("synthetic: image_size must be >= 32");
  if (spec.num_samples < spec.num_classes)
    throw ConfigError("synthetic: num_samples must be >= num_classes");
  if (spec.shapes_min < 0 || spec.shapes_max < spec.shapes_min)
    throw ConfigError("synthetic: invalid shapes-per-image range");

  const std::size_t S = static_cast<std::size_t>(spec.image_size);
  const int fg = spec.num_classes - 1;
  DatasetHandle ds("synthetic-" + std::to_string(spec.seed) + "-" + std::to_string(spec.num_samples),
                   spec.num_classes, kIgnoreValue);

  for (int i = 0; i < spec.num_samples; ++i) {
    Rng rng(derive_seed(spec.seed, "synthetic", static_cast<std::uint64_t>(i)));
    Sample s{FloatTensor({3, S, S}), IndexTensor({S, S}, 0)};

    // background: low-saturation base color with a linear gradient
    const auto base = detail::hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.3), rng.uniform(0.3, 0.7));
    const double gy = rng.uniform(-0.15, 0.15), gx = rng.uniform(-0.15, 0.15);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x)
          s.image[(c * S + y) * S + x] =
              static_cast<float>(base[c] + gy * (static_cast<double>(y) / S - 0.5) +
                                 gx * (static_cast<double>(x) / S - 0.5));

    const int n_shapes = static_cast<int>(rng.between(spec.shapes_min, spec.shapes_max));
    std::vector<detail::Placed> placed;
    for (int k = 0; k < n_shapes; ++k) {
      // the first shape of image i cycles through classes so all appear
      const int cls = (k == 0) ? 1 + (i % fg) : 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(fg)));
      const auto kind = static_cast<detail::ShapeKind>((cls - 1) % 3);
      const int band = (cls - 1) / 3;
      const double r_lo = S * (0.10 + 0.06 * band), r_hi = S * (0.20 + 0.06 * band);
      double r = rng.uniform(r_lo, r_hi), cy = 0, cx = 0;
      for (int attempt = 0; attempt < 20; ++attempt) {
        cy = rng.uniform(r * 0.6, S - r * 0.6);
        cx = rng.uniform(r * 0.6, S - r * 0.6);
        bool clear = std::all_of(placed.begin(), placed.end(), [&](const detail::Placed& p) {
          return std::hypot(p.cy - cy, p.cx - cx) > p.radius + r;
        });
        if (clear) break;
      }
      placed.push_back({cy, cx, r});
      double aspect = 1.0;
      if (kind == detail::ShapeKind::rectangle) {
        aspect = rng.uniform(2.5, 4.0);
        if (rng.bernoulli(0.5)) aspect = 1.0 / aspect;
      }
      const double angle = rng.uniform(0.0, 2.0 * M_PI);
      const auto color = detail::hsv_to_rgb(rng.uniform(), rng.uniform(0.5, 1.0), rng.uniform(0.5, 1.0));
      for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
          if (!detail::inside(kind, dy, dx, r, aspect, angle)) continue;
          s.mask(y, x) = cls;
          for (std::size_t c = 0; c < 3; ++c) s.image[(c * S + y) * S + x] = color[c];
        }
    }
    for (auto& v : s.image.values())
      v = std::clamp(static_cast<float>(v + spec.noise * rng.normal()), 0.0f, 1.0f);

    char id[32];
    std::snprintf(id, sizeof(id), "%s%05d", spec.id_prefix.c_str(), i);
    ds.add(id, std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Splits

/// round-half-up(ratio * n), computed in exact integer arithmetic.
inline std::size_t labeled_count(Ratio ratio, std::size_t n) {
  const auto num = static_cast<std::int64_t>(n) * ratio.num;
  return static_cast<std::size_t>((2 * num + ratio.den) / (2 * ratio.den));
}

inline SplitManifest make_split(const DatasetHandle& ds, Ratio ratio, std::uint64_t seed) {
  if (ratio.num <= 0 || ratio.num >= ratio.den)
    throw SplitError("split ratio must lie in (0,1), got " + ratio.str());
  const std::size_t n = labeled_count(ratio, ds.size());
  if (n == 0) throw SplitError("split ratio " + ratio.str() + " yields no labeled samples");
  if (n >= ds.size()) throw SplitError("split ratio " + ratio.str() + " leaves no unlabeled samples");

  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order.begin(), order.end());
  std::vector<bool> is_labeled(ds.size(), false);
  for (std::size_t i = 0; i < n; ++i) is_labeled[order[i]] = true;

  SplitManifest m;
  m.dataset_id = ds.dataset_id();
  m.ratio = ratio;
  m.seed = seed;
  for (std::size_t i = 0; i < ds.size(); ++i)
    (is_labeled[i] ? m.labeled_ids : m.unlabeled_ids).push_back(ds.ids()[i]);
  return m;
}

inline void check_manifest(const SplitManifest& m, const DatasetHandle& ds) {
  if (m.labeled_ids.empty() || m.unlabeled_ids.empty())
    throw ConfigError("manifest: labeled and unlabeled sets must both be non-empty");
  std::unordered_map<std::string, int> seen;
  for (const auto& id : m.labeled_ids) seen[id] |= 1;
  for (const auto& id : m.unlabeled_ids) seen[id] |= 2;
  for (const auto& [id, flags] : seen) {
    if (flags == 3) throw ConfigError("manifest: id '" + id + "' is both labeled and unlabeled");
    if (!ds.contains(id)) throw ConfigError("manifest: id '" + id + "' not in dataset");
  }
}

// ---------------------------------------------------------------------------
// On-disk ingestion: binary PPM (P6) images and PGM (P5) masks.

namespace netpbm {

inline void skip_space_and_comments(std::istream& in) {
  while (true) {
    int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      return;
    }
  }
}

struct Raster {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved
};

inline Raster read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  Raster r;
  if (magic == "P6") r.channels = 3;
  else if (magic == "P5") r.channels = 1;
  else throw IngestionError(path.string() + ": unsupported raster format '" + magic + "'");
  int maxval = 0;
  skip_space_and_comments(in);
  in >> r.width;
  skip_space_and_comments(in);
  in >> r.height;
  skip_space_and_comments(in);
  in >> maxval;
  in.get();
  if (!in || maxval != 255 || r.width == 0 || r.height == 0)
    throw IngestionError(path.string() + ": malformed header (8-bit rasters only)");
  r.pixels.resize(r.width * r.height * r.channels);
  in.read(reinterpret_cast<char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
  if (!in) throw IngestionError(path.string() + ": truncated pixel data");
  return r;
}

inline void write(const std::filesystem::path& path, const Raster& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << (r.channels == 3 ? "P6" : "P5") << '\n' << r.width << ' ' << r.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(r.pixels.data()), static_cast<std::streamsize>(r.pixels.size()));
}

inline void write_image(const std::filesystem::path& path, const FloatTensor& chw) {
  Raster r{chw.dim(2), chw.dim(1), 3, {}};
  r.pixels.resize(r.width * r.height * 3);
  const std::size_t p = r.width * r.height;
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      r.pixels[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(chw[c * p + i], 0.0f, 1.0f) * 255.0f));
  write(path, r);
}

inline void write_mask(const std::filesystem::path& path, const IndexTensor& hw) {
  Raster r{hw.dim(1), hw.dim(0), 1, {}};
  r.pixels.resize(hw.size());
  for (std::size_t i = 0; i < hw.size(); ++i) r.pixels[i] = static_cast<std::uint8_t>(hw[i]);
  write(path, r);
}

}  // namespace netpbm

struct DiskDescriptor {
  std::filesystem::path root;  // contains images/*.ppm and masks/*.pgm
  int num_classes = 0;
  std::int32_t ignore_value = kIgnoreValue;
};

inline DatasetHandle load_dataset(const DiskDescriptor& d) {
  namespace fs = std::filesystem;
  const fs::path img_dir = d.root / "images", mask_dir = d.root / "masks";
  if (!fs::is_directory(img_dir) || !fs::is_directory(mask_dir))
    throw IngestionError(d.root.string() + ": expected images/ and masks/ subdirectories");
  if (d.num_classes < 2) throw ConfigError("load_dataset: num_classes must be >= 2");

  std::map<std::string, fs::path> images, masks;
  for (const auto& e : fs::directory_iterator(img_dir))
    if (e.is_regular_file()) images[e.path().stem().string()] = e.path();
  for (const auto& e : fs::directory_iterator(mask_dir))
    if (e.is_regular_file()) masks[e.path().stem().string()] = e.path();
  if (images.empty()) throw IngestionError(img_dir.string() + ": no images found");

  std::string missing;
  for (const auto& [stem, _] : images)
    if (!masks.count(stem)) missing += (missing.empty() ? "" : ", ") + stem;
  if (!missing.empty()) throw IngestionError("images without masks: " + missing);

  DatasetHandle ds(d.root.filename().string(), d.num_classes, d.ignore_value);
  std::string corrupt;
  for (const auto& [stem, path] : images) {
    const auto img = netpbm::read(path);
    const auto msk = netpbm::read(masks[stem]);
    if (img.channels != 3 || msk.channels != 1)
      throw IngestionError(stem + ": expected RGB image and single-channel mask");
    if (img.width != msk.width || img.height != msk.height)
      throw IngestionError(stem + ": image/mask size mismatch");
    Sample s{FloatTensor({3, img.height, img.width}), IndexTensor({img.height, img.width})};
    const std::size_t p = img.width * img.height;
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t c = 0; c < 3; ++c) s.image[c * p + i] = img.pixels[i * 3 + c] / 255.0f;
    bool bad = false;
    for (std::size_t i = 0; i < p; ++i) {
      const std::int32_t v = msk.pixels[i];
      bad = bad || (v != d.ignore_value && v >= d.num_classes);
      s.mask[i] = v;
    }
    if (bad) corrupt += (corrupt.empty() ? "" : ", ") + stem;
    ds.add(stem, std::move(s));
  }
  if (!corrupt.empty())
    throw IngestionError("masks with values >= num_classes (and not ignore): " + corrupt);
  return ds;
}

/// Subset of `ds` restricted to `ids`, preserving order.
inline DatasetHandle subset(const DatasetHandle& ds, const std::vector<std::string>& ids) {
  DatasetHandle out(ds.dataset_id(), ds.num_classes(), ds.ignore_value());
  for (const auto& id : ids) out.add(id, ds.get(id));
  return out;
}

}  // namespace unimatch
