#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cdbuf/errors.hpp"
#include "cdbuf/rng.hpp"
#include "cdbuf/tensor.hpp"

namespace cdbuf {

// Learnable channel-suppression state: one score vector per BN layer plus
// the network-wide threshold machinery.
struct MaskState {
  std::vector<Tensor> scores;  // per BN layer, learnable [C]
  double rho_target = 0.05;
  double lambda_s = 0.05;
  double react_p = 0.05;
  double tau = 0.0;  // last computed threshold
};

// Scores start at |gamma| per layer and are marked learnable.
inline MaskState init_scores(const std::vector<Tensor>& gammas, double rho_target = 0.05,
                             double lambda_s = 0.05, double react_p = 0.05) {
  MaskState st;
  st.rho_target = rho_target;
  st.lambda_s = lambda_s;
  st.react_p = react_p;
  st.scores.reserve(gammas.size());
  for (const auto& g : gammas) {
    std::vector<double> s(g.data().begin(), g.data().end());
    for (auto& v : s) v = std::fabs(v);
    st.scores.push_back(Tensor::param({g.shape()[0]}, std::move(s)));
  }
  return st;
}

// tau is the k-th order statistic of the pooled |s| multiset with
// k = floor(rho * count). Eq-style >=-comparison keeps ties at tau active,
// so at most k channels are suppressed, and exactly k when the values around
// position k are distinct. rho = 0 yields tau = min and suppresses nothing.
inline double compute_threshold(std::vector<double> pooled_abs, double rho_target) {
  if (pooled_abs.empty()) throw ConfigError("compute_threshold: empty score set");
  if (rho_target < 0.0 || rho_target >= 1.0) {
    throw ConfigError("compute_threshold: rho_target must be in [0,1)");
  }
  std::sort(pooled_abs.begin(), pooled_abs.end());
  const auto k = static_cast<std::size_t>(rho_target * static_cast<double>(pooled_abs.size()));
  return pooled_abs[k];
}

inline std::vector<double> pooled_abs_scores(const MaskState& st,
                                             const std::vector<char>* layer_enabled = nullptr) {
  std::vector<double> pooled;
  for (std::size_t l = 0; l < st.scores.size(); ++l) {
    if (layer_enabled && !(*layer_enabled)[l]) continue;
    for (double v : st.scores[l].data()) pooled.push_back(std::fabs(v));
  }
  return pooled;
}

// Hard mask for one layer: 1 where |s| >= tau.
inline std::vector<double> hard_mask(const Tensor& scores, double tau) {
  std::vector<double> m(static_cast<std::size_t>(scores.numel()));
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::fabs(scores[i]) >= tau ? 1.0 : 0.0;
  return m;
}

// Straight-through mask: forward value equals the hard mask exactly, while
// the gradient follows the sigmoid soft path,
//   m = m_hard + (m_soft - sg(m_soft)),  m_soft = sigmoid((|s| - tau)/lambda_s).
inline Tensor ste_mask(const Tensor& scores, const std::vector<double>& m_hard, double tau,
                       double lambda_s) {
  if (lambda_s <= 0.0) throw ConfigError("ste_mask: lambda_s must be > 0");
  if (m_hard.size() != static_cast<std::size_t>(scores.numel())) {
    throw ShapeError("ste_mask: hard mask length does not match scores");
  }
  Tensor soft = sigmoid(scale(add_scalar(abs_t(scores), -tau), 1.0 / lambda_s));
  Tensor hard = Tensor::from_data({scores.shape()[0]}, m_hard);
  return add(hard, sub(soft, stop_gradient(soft)));
}

inline Tensor ste_mask(const Tensor& scores, double tau, double lambda_s) {
  return ste_mask(scores, hard_mask(scores, tau), tau, lambda_s);
}

// Channel suppression on BN output: zeroes masked channels, differentiable
// through both the features and (via the straight-through path) the scores.
inline Tensor apply_subtractive(const Tensor& f_bn, const Tensor& m) {
  return mul_cw(f_bn, m);
}

// Discrepancy-weighted score regularization, (1/C) sum_c |D_c * s_c| per
// layer, averaged over layers so the weight stays depth-independent.
// D enters as constants: the loss pressures scores, not the metric.
inline Tensor mask_loss(const std::vector<Tensor>& scores,
                        const std::vector<std::vector<double>>& d_per_layer,
                        const std::vector<char>* layer_enabled = nullptr) {
  if (scores.size() != d_per_layer.size()) {
    throw ShapeError("mask_loss: layer count mismatch");
  }
  Tensor total;
  int layers = 0;
  for (std::size_t l = 0; l < scores.size(); ++l) {
    if (layer_enabled && !(*layer_enabled)[l]) continue;
    if (d_per_layer[l].size() != static_cast<std::size_t>(scores[l].numel())) {
      throw ShapeError("mask_loss: discrepancy length mismatch at layer " + std::to_string(l));
    }
    Tensor d = Tensor::from_data({scores[l].shape()[0]}, d_per_layer[l]);
    Tensor term = mean_all(abs_t(mul(d, scores[l])));
    total = layers == 0 ? term : add(total, term);
    ++layers;
  }
  if (layers == 0) return Tensor::scalar(0.0);
  return scale(total, 1.0 / static_cast<double>(layers));
}

// Bernoulli(r) reset of suppressed channels' scores to |gamma|; active
// channels and gamma itself are never touched. Returns the reset count.
inline int reactivate(MaskState& st, const std::vector<Tensor>& gammas,
                      const std::vector<std::vector<double>>& m_hard, Rng& rng,
                      const std::vector<char>* layer_enabled = nullptr) {
  if (gammas.size() != st.scores.size() || m_hard.size() != st.scores.size()) {
    throw ShapeError("reactivate: layer count mismatch");
  }
  int count = 0;
  for (std::size_t l = 0; l < st.scores.size(); ++l) {
    if (layer_enabled && !(*layer_enabled)[l]) continue;
    auto s = st.scores[l].mutable_data();
    for (std::size_t c = 0; c < s.size(); ++c) {
      if (m_hard[l][c] != 0.0) continue;
      if (rng.bernoulli(st.react_p)) {
        s[c] = std::fabs(gammas[l][c]);
        ++count;
      }
    }
  }
  return count;
}

}  // namespace cdbuf
