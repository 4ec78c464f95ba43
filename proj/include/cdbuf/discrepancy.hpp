#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cdbuf/errors.hpp"
#include "cdbuf/tensor.hpp"

namespace cdbuf {

// Distance used for the per-channel feature discrepancy. L1 is the default
// and the only tested path; the alternatives exist as configuration choices.
enum class DiscrepancyMetric { kL1, kL2, kCosine };

inline const char* metric_name(DiscrepancyMetric m) {
  switch (m) {
    case DiscrepancyMetric::kL1: return "l1";
    case DiscrepancyMetric::kL2: return "l2";
    case DiscrepancyMetric::kCosine: return "cosine";
  }
  return "?";
}

inline DiscrepancyMetric metric_from_name(const std::string& s) {
  if (s == "l1") return DiscrepancyMetric::kL1;
  if (s == "l2") return DiscrepancyMetric::kL2;
  if (s == "cosine") return DiscrepancyMetric::kCosine;
  throw ConfigError("unknown discrepancy metric '" + s + "'");
}

struct DiscrepancyScore {
  std::vector<double> image;     // per channel, image level
  std::vector<double> instance;  // per channel, instance level
  bool instance_absent = false;
  std::vector<double> combined;  // per channel, normalized sum
  double layer_agg = 0.0;        // channel mean of combined
};

namespace detail {

// Per-channel mean deviation of stacked target features [M,C,h,w] from a
// source mean [C,h,w], divided by M*h*w.
inline std::vector<double> per_channel_distance(const Tensor& target, const Tensor& source_mean,
                                                DiscrepancyMetric metric) {
  if (target.rank() != 4 || source_mean.rank() != 3) {
    throw ShapeError("discrepancy: expects target [M,C,h,w] and source mean [C,h,w]");
  }
  const int m = target.shape()[0], c = target.shape()[1], h = target.shape()[2],
            w = target.shape()[3];
  if (source_mean.shape()[0] != c || source_mean.shape()[1] != h || source_mean.shape()[2] != w) {
    throw ShapeError("discrepancy: source mean " + shape_str(source_mean.shape()) +
                     " does not match target " + shape_str(target.shape()));
  }
  const int hw = h * w;
  std::vector<double> d(static_cast<std::size_t>(c), 0.0);
  for (int ic = 0; ic < c; ++ic) {
    const std::size_t sbase = static_cast<std::size_t>(ic) * hw;
    double acc = 0.0;
    double dot = 0.0, tnorm = 0.0, snorm = 0.0;
    for (int im = 0; im < m; ++im) {
      const std::size_t tbase = (static_cast<std::size_t>(im) * c + ic) * hw;
      for (int i = 0; i < hw; ++i) {
        const double tv = target[tbase + i], sv = source_mean[sbase + i];
        switch (metric) {
          case DiscrepancyMetric::kL1: acc += std::fabs(tv - sv); break;
          case DiscrepancyMetric::kL2: acc += (tv - sv) * (tv - sv); break;
          case DiscrepancyMetric::kCosine:
            dot += tv * sv;
            tnorm += tv * tv;
            snorm += sv * sv;
            break;
        }
      }
    }
    const double denom = static_cast<double>(m) * hw;
    switch (metric) {
      case DiscrepancyMetric::kL1: d[static_cast<std::size_t>(ic)] = acc / denom; break;
      case DiscrepancyMetric::kL2:
        d[static_cast<std::size_t>(ic)] = std::sqrt(acc) / denom;
        break;
      case DiscrepancyMetric::kCosine: {
        const double nn = std::sqrt(tnorm) * std::sqrt(snorm);
        d[static_cast<std::size_t>(ic)] = nn > 0.0 ? 1.0 - dot / nn : 0.0;
        break;
      }
    }
  }
  return d;
}

}  // namespace detail

// Per-channel mean absolute deviation of target taps from the source image
// mean, averaged over batch and spatial positions.
inline std::vector<double> image_discrepancy(const Tensor& taps, const Tensor& image_mean,
                                             DiscrepancyMetric metric = DiscrepancyMetric::kL1) {
  if (taps.rank() != 4 || taps.shape()[0] == 0) {
    throw ConfigError("image_discrepancy: empty batch");
  }
  return detail::per_channel_distance(taps, image_mean, metric);
}

// Instance-level counterpart over cropped instance features. An empty batch
// of instances is a handled degenerate case, not an error: returns zeros and
// flags absence so the combination rule can degrade gracefully.
inline std::vector<double> instance_discrepancy(const Tensor& instances, const Tensor& inst_mean,
                                                bool* instance_absent,
                                                DiscrepancyMetric metric = DiscrepancyMetric::kL1) {
  if (instances.rank() != 4) throw ShapeError("instance_discrepancy: expects [M,C,h,w]");
  if (instances.shape()[0] == 0) {
    if (instance_absent) *instance_absent = true;
    return std::vector<double>(static_cast<std::size_t>(instances.shape()[1]), 0.0);
  }
  if (instance_absent) *instance_absent = false;
  return detail::per_channel_distance(instances, inst_mean, metric);
}

// Normalizes each vector to unit channel mean, then sums. Without instances
// the image term is doubled so the output scale matches the two-term case.
inline std::vector<double> combine_discrepancy(const std::vector<double>& d_image,
                                               const std::vector<double>& d_instance,
                                               bool instance_absent) {
  if (!instance_absent && d_image.size() != d_instance.size()) {
    throw ShapeError("combine_discrepancy: channel counts differ");
  }
  auto normalized = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    std::vector<double> out(v.size());
    const double denom = std::max(mean, 1e-12);
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / denom;
    return out;
  };
  std::vector<double> a = normalized(d_image);
  if (instance_absent) {
    for (auto& v : a) v *= 2.0;
    return a;
  }
  std::vector<double> b = normalized(d_instance);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
  return a;
}

inline double layer_aggregate(const std::vector<double>& d) {
  if (d.empty()) throw ConfigError("layer_aggregate: empty channel vector");
  double acc = 0.0;
  for (double v : d) acc += v;
  return acc / static_cast<double>(d.size());
}

}  // namespace cdbuf
