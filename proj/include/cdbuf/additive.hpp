#pragma once

#include <cmath>
#include <vector>

#include "cdbuf/errors.hpp"
#include "cdbuf/rng.hpp"
#include "cdbuf/tensor.hpp"

namespace cdbuf {

// Residual adapter for one block: parallel 1x1 and 3x3 convolutions with a
// per-channel output scale.
struct AdapterParams {
  Tensor w1x1;   // [C,C,1,1]
  Tensor w3x3;   // [C,C,3,3]
  Tensor alpha;  // [C]

  std::vector<Tensor> parameters() const { return {w1x1, w3x3, alpha}; }
};

// alpha starts at 1e-2 so fresh adapters barely perturb the source forward;
// conv weights draw from uniform(+-1/sqrt(fan_in)).
inline AdapterParams init_adapter(int channels, Rng& rng) {
  if (channels < 1) throw ConfigError("init_adapter: channels must be >= 1");
  AdapterParams p;
  auto init_conv = [&](int kh, int kw) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels) * kh * kw);
    std::vector<double> w(static_cast<std::size_t>(channels) * channels * kh * kw);
    for (auto& v : w) v = rng.uniform(-bound, bound);
    return Tensor::param({channels, channels, kh, kw}, std::move(w));
  };
  p.w1x1 = init_conv(1, 1);
  p.w3x3 = init_conv(3, 3);
  p.alpha = Tensor::param({channels}, std::vector<double>(static_cast<std::size_t>(channels), 1e-2));
  return p;
}

// F_add = (Conv1x1(F) + Conv3x3(F)) / 2, scaled per channel by alpha.
inline Tensor adapter_forward(const Tensor& f, const AdapterParams& p) {
  if (f.rank() != 4) throw ShapeError("adapter_forward: expects [N,C,H,W]");
  if (f.shape()[1] != p.w1x1.shape()[1]) {
    throw ShapeError("adapter_forward: channel axis 1 of input (" +
                     std::to_string(f.shape()[1]) + ") does not match adapter channels (" +
                     std::to_string(p.w1x1.shape()[1]) + ")");
  }
  Tensor mixed = scale(add(conv2d(f, p.w1x1, 1, 0), conv2d(f, p.w3x3, 1, 1)), 0.5);
  return mul_cw(mixed, p.alpha);
}

// Compensation strength from the shared mask scores:
//   m_soft = sigmoid((|s| - tau)/lambda_a), raw = 1 - m_soft,
//   out = k * minmax(raw) in [0, k].
// All-equal raw values map to 0.5*k (neutral middle). The whole expression
// carries gradient into s; min/max route their subgradient to the first
// extremal channel.
inline Tensor inverse_soft_mask(const Tensor& scores, double tau, double lambda_a, double k) {
  if (lambda_a <= 0.0 || k <= 0.0) {
    throw ConfigError("inverse_soft_mask: lambda_a and k must be > 0");
  }
  Tensor soft = sigmoid(scale(add_scalar(abs_t(scores), -tau), 1.0 / lambda_a));
  Tensor raw = add_scalar(scale(soft, -1.0), 1.0);
  Tensor lo = reduce_min(raw);
  Tensor hi = reduce_max(raw);
  if (hi.value() - lo.value() == 0.0) {
    return Tensor::full({scores.shape()[0]}, 0.5 * k);
  }
  Tensor span = add(hi, scale(lo, -1.0));
  Tensor normed = mul_st(add_st(raw, scale(lo, -1.0)), reciprocal(span));
  return scale(normed, k);
}

// Per-channel modulation of the adapter output (the engine adds the result
// onto the block output).
inline Tensor apply_additive(const Tensor& f_add, const Tensor& inv_mask) {
  return mul_cw(f_add, inv_mask);
}

}  // namespace cdbuf
