#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cdbuf/errors.hpp"
#include "cdbuf/rng.hpp"
#include "cdbuf/serialize.hpp"
#include "cdbuf/tensor.hpp"

namespace cdbuf {

struct Box {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive pixel/feature coordinates
  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
};

struct LabeledImage {
  Tensor pixels;  // [1,H,W], values in [0,1]
  int label = 0;
  std::vector<Box> boxes;  // >= 1, inside image bounds
};

struct ToyDataset {
  std::vector<LabeledImage> images;
  int classes = 4;
  std::uint64_t seed = 0;
};

enum class CorruptionKind { kGaussianNoise, kBrightnessShift, kBoxBlur, kHazeMix };

inline const char* corruption_name(CorruptionKind k) {
  switch (k) {
    case CorruptionKind::kGaussianNoise: return "gaussian_noise";
    case CorruptionKind::kBrightnessShift: return "brightness_shift";
    case CorruptionKind::kBoxBlur: return "box_blur";
    case CorruptionKind::kHazeMix: return "haze_mix";
  }
  return "?";
}

inline CorruptionKind corruption_from_name(const std::string& s) {
  if (s == "gaussian_noise") return CorruptionKind::kGaussianNoise;
  if (s == "brightness_shift") return CorruptionKind::kBrightnessShift;
  if (s == "box_blur") return CorruptionKind::kBoxBlur;
  if (s == "haze_mix") return CorruptionKind::kHazeMix;
  throw ConfigError("unknown corruption kind '" + s + "'");
}

struct CorruptionSpec {
  CorruptionKind kind = CorruptionKind::kHazeMix;
  double severity = 0.0;  // in [0,1]; 0 is the exact identity
  std::uint64_t seed = 0;
};

// Generator knobs. The corruption formulas are fixed; these dataset
// parameters are what gets calibrated so corruption severity translates into
// a graded accuracy drop.
struct GenParams {
  int image_hw = 16;
  int classes = 4;
  double background = 0.30;
  double background_noise = 0.10;
  double patch_value = 0.85;
  double patch_jitter = 0.06;
};

namespace detail {

inline void draw_patch(std::vector<double>& img, int hw, int label, int px, int py, double value,
                       Box* box) {
  auto set = [&](int y, int x) { img[static_cast<std::size_t>(y) * hw + x] = value; };
  switch (label) {
    case 0:  // vertical bar, 6x2
      for (int y = 0; y < 6; ++y)
        for (int x = 0; x < 2; ++x) set(py + y, px + x);
      *box = {double(px), double(py), double(px + 1), double(py + 5)};
      break;
    case 1:  // horizontal bar, 2x6
      for (int y = 0; y < 2; ++y)
        for (int x = 0; x < 6; ++x) set(py + y, px + x);
      *box = {double(px), double(py), double(px + 5), double(py + 1)};
      break;
    case 2:  // solid square, 4x4
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) set(py + y, px + x);
      *box = {double(px), double(py), double(px + 3), double(py + 3)};
      break;
    default:  // X cross on a 6x6 grid
      for (int d = 0; d < 6; ++d) {
        set(py + d, px + d);
        set(py + d, px + 5 - d);
      }
      *box = {double(px), double(py), double(px + 5), double(py + 5)};
      break;
  }
}

inline int patch_extent(int label, bool horizontal) {
  switch (label) {
    case 0: return horizontal ? 2 : 6;
    case 1: return horizontal ? 6 : 2;
    case 2: return 4;
    default: return 6;
  }
}

}  // namespace detail

// n grayscale canvases with background noise and one class-defining patch;
// labels are assigned round-robin so counts stay balanced by construction.
inline ToyDataset gen_dataset(int n, std::uint64_t seed, const GenParams& gp = {}) {
  if (n < 1) throw ConfigError("gen_dataset: n must be >= 1");
  ToyDataset ds;
  ds.classes = gp.classes;
  ds.seed = seed;
  ds.images.reserve(static_cast<std::size_t>(n));
  const int hw = gp.image_hw;
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i)));
    const int label = i % gp.classes;
    std::vector<double> img(static_cast<std::size_t>(hw) * hw);
    for (auto& v : img)
      v = std::clamp(gp.background + gp.background_noise * rng.normal(), 0.0, 1.0);
    const int pw = detail::patch_extent(label, true);
    const int ph = detail::patch_extent(label, false);
    const int px = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hw - pw + 1)));
    const int py = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(hw - ph + 1)));
    const double value =
        std::clamp(gp.patch_value + gp.patch_jitter * rng.normal(), 0.0, 1.0);
    Box box;
    detail::draw_patch(img, hw, label, px, py, value, &box);
    LabeledImage li;
    li.pixels = Tensor::from_data({1, hw, hw}, std::move(img));
    li.label = label;
    li.boxes.push_back(box);
    ds.images.push_back(std::move(li));
  }
  return ds;
}

// Applies one corruption. severity 0 is a bit-exact identity for every kind;
// labels and boxes pass through untouched; outputs are clamped to [0,1].
inline LabeledImage corrupt(const LabeledImage& img, const CorruptionSpec& spec) {
  if (spec.severity < 0.0 || spec.severity > 1.0) {
    throw ConfigError("corrupt: severity must be in [0,1]");
  }
  LabeledImage out;
  out.label = img.label;
  out.boxes = img.boxes;
  std::vector<double> px(img.pixels.data().begin(), img.pixels.data().end());
  if (spec.severity == 0.0) {
    out.pixels = Tensor::from_data(img.pixels.shape(), std::move(px));
    return out;
  }
  const int h = img.pixels.shape()[1], w = img.pixels.shape()[2];
  switch (spec.kind) {
    case CorruptionKind::kGaussianNoise: {
      Rng rng(spec.seed);
      const double sigma = 0.5 * spec.severity;
      for (auto& v : px) v = std::clamp(v + rng.normal(0.0, sigma), 0.0, 1.0);
      break;
    }
    case CorruptionKind::kBrightnessShift: {
      const double shift = 0.6 * spec.severity;
      for (auto& v : px) v = std::clamp(v + shift, 0.0, 1.0);
      break;
    }
    case CorruptionKind::kBoxBlur: {
      const int k = 1 + 2 * static_cast<int>(std::lround(3.0 * spec.severity));
      if (k > 1) {
        const int r = k / 2;
        std::vector<double> blurred(px.size());
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            int cnt = 0;  // border taps renormalized by in-bounds count
            for (int dy = -r; dy <= r; ++dy)
              for (int dx = -r; dx <= r; ++dx) {
                const int yy = y + dy, xx = x + dx;
                if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
                acc += px[static_cast<std::size_t>(yy) * w + xx];
                ++cnt;
              }
            blurred[static_cast<std::size_t>(y) * w + x] =
                std::clamp(acc / cnt, 0.0, 1.0);
          }
        px = std::move(blurred);
      }
      break;
    }
    case CorruptionKind::kHazeMix: {
      const double t = 0.8 * spec.severity;
      for (auto& v : px) v = std::clamp((1.0 - t) * v + t * 0.7, 0.0, 1.0);
      break;
    }
  }
  out.pixels = Tensor::from_data(img.pixels.shape(), std::move(px));
  return out;
}

// Per-image corruption with an independent noise stream per index, so the
// clean base images are shared across severity sweeps.
inline ToyDataset corrupt_dataset(const ToyDataset& ds, const CorruptionSpec& spec) {
  ToyDataset out;
  out.classes = ds.classes;
  out.seed = ds.seed;
  out.images.reserve(ds.images.size());
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    CorruptionSpec s = spec;
    s.seed = mix_seed(spec.seed, i);
    out.images.push_back(corrupt(ds.images[i], s));
  }
  return out;
}

struct LadderCell {
  CorruptionKind kind;
  double severity;
  ToyDataset data;
};

// One corrupted dataset per (kind, severity) from a shared clean base.
inline std::vector<LadderCell> severity_ladder(const std::vector<CorruptionKind>& kinds,
                                               const std::vector<double>& severities,
                                               int n_per_cell, std::uint64_t seed,
                                               const GenParams& gp = {}) {
  ToyDataset base = gen_dataset(n_per_cell, seed, gp);
  std::vector<LadderCell> cells;
  for (CorruptionKind kind : kinds)
    for (double sev : severities) {
      CorruptionSpec spec{kind, sev, mix_seed(seed, 0x10000u + static_cast<int>(kind))};
      cells.push_back({kind, sev, corrupt_dataset(base, spec)});
    }
  return cells;
}

inline std::uint64_t dataset_hash(const ToyDataset& ds) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& img : ds.images) {
    h = fnv1a_doubles(img.pixels.data(), h);
    h = fnv1a(&img.label, sizeof(img.label), h);
    for (const auto& b : img.boxes) h = fnv1a(&b, sizeof(b), h);
  }
  return h;
}

// Dataset dump: the cdstats-1 array container plus a label/box manifest.
inline void save_dataset(const std::string& path, const ToyDataset& ds) {
  Archive ar;
  ar.meta["format"] = "cdstats-1";
  ar.meta["kind"] = "dataset";
  ar.meta["classes"] = ds.classes;
  ar.meta["seed"] = ds.seed;
  nlohmann::ordered_json labels = nlohmann::ordered_json::array();
  nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < ds.images.size(); ++i) {
    const auto& img = ds.images[i];
    labels.push_back(img.label);
    nlohmann::ordered_json bx = nlohmann::ordered_json::array();
    for (const auto& b : img.boxes) bx.push_back({b.x0, b.y0, b.x1, b.y1});
    boxes.push_back(bx);
    ar.arrays.push_back({"image/" + std::to_string(i), img.pixels.shape(),
                         {img.pixels.data().begin(), img.pixels.data().end()}});
  }
  ar.meta["labels"] = labels;
  ar.meta["boxes"] = boxes;
  write_archive(path, ar);
}

inline ToyDataset load_dataset(const std::string& path) {
  Archive ar = read_archive(path);
  if (ar.meta.value("kind", "") != "dataset") throw IoError("'" + path + "' is not a dataset dump");
  ToyDataset ds;
  ds.classes = ar.meta.at("classes").get<int>();
  ds.seed = ar.meta.at("seed").get<std::uint64_t>();
  const auto& labels = ar.meta.at("labels");
  const auto& boxes = ar.meta.at("boxes");
  for (std::size_t i = 0; i < ar.arrays.size(); ++i) {
    LabeledImage img;
    img.pixels = Tensor::from_data(ar.arrays[i].shape, ar.arrays[i].data);
    img.label = labels.at(i).get<int>();
    for (const auto& b : boxes.at(i)) {
      img.boxes.push_back({b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(),
                           b.at(3).get<double>()});
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

}  // namespace cdbuf
