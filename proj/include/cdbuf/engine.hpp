#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "cdbuf/additive.hpp"
#include "cdbuf/data.hpp"
#include "cdbuf/discrepancy.hpp"
#include "cdbuf/errors.hpp"
#include "cdbuf/net.hpp"
#include "cdbuf/rng.hpp"
#include "cdbuf/serialize.hpp"
#include "cdbuf/subtractive.hpp"
#include "cdbuf/tensor.hpp"

namespace cdbuf {

struct Switches {
  bool mask_loss_on = true;
  bool subtractive_on = true;
  bool additive_on = true;
  bool grad_scaling_on = true;
  bool modulation_on = true;  // inverse-mask coupling; off = plain adapters
};

struct Hyper {
  double lambda_reg = 0.05;
  double lambda_s = 0.05;
  double lambda_a = 0.1;
  double rho_target = 0.05;
  double k_scale = 10.0;
  double react_p = 0.05;
  double lr = 1e-4;
  int batch = 16;
};

// Full test-time adaptation state. Backbone conv weights and the classifier
// head are frozen; gradients reach only the adapter parameters, the BN
// affine pairs, and the mask scores.
struct AdaptState {
  ToyNet net;
  MaskState masks;
  std::vector<AdapterParams> adapters;  // per block
  Hyper hyper;
  Switches sw;
  std::vector<char> stage_enable;  // per stage
  Rng rng;
  std::int64_t step_count = 0;

  std::vector<char> layer_enabled() {
    std::vector<char> out;
    for (const ConvBn* cb : net.bn_layers())
      out.push_back(stage_enable[static_cast<std::size_t>(cb->stage)]);
    return out;
  }

  std::vector<char> block_enabled() {
    std::vector<char> out;
    for (const Block* b : net.blocks())
      out.push_back(stage_enable[static_cast<std::size_t>(b->stage)]);
    return out;
  }

  // Index of the block's second BN layer in bn_layers() order; the block's
  // adapter modulation reads this layer's scores.
  std::vector<std::size_t> block_last_bn_index() {
    std::vector<std::size_t> out;
    std::size_t li = 1;  // skip stem
    for (std::size_t s = 0; s < net.stages.size(); ++s) {
      if (s > 0) ++li;  // transition
      for (std::size_t b = 0; b < net.stages[s].size(); ++b) {
        out.push_back(li + 1);
        li += 2;
      }
    }
    return out;
  }
};

inline AdaptState make_adapt_state(const ToyNet& net, const Hyper& hyper, const Switches& sw,
                                   std::vector<char> stage_enable, std::uint64_t seed) {
  AdaptState st;
  st.net = clone_net(net);  // isolate this run from the source model
  if (stage_enable.empty()) stage_enable.assign(st.net.stages.size(), 1);
  if (stage_enable.size() != st.net.stages.size()) {
    throw ConfigError("make_adapt_state: stage_enable size does not match stages");
  }
  st.stage_enable = std::move(stage_enable);
  st.hyper = hyper;
  st.sw = sw;
  st.rng.reseed(mix_seed(seed, 0xadab7));
  // Freeze backbone: gradients stop at conv weights and the head.
  for (auto& p : st.net.backbone_params()) p.set_requires_grad(false);
  std::vector<Tensor> gammas;
  for (const ConvBn* cb : st.net.bn_layers()) gammas.push_back(cb->gamma);
  st.masks = init_scores(gammas, hyper.rho_target, hyper.lambda_s, hyper.react_p);
  Rng arng(mix_seed(seed, 0xadda));
  for (const Block* b : st.net.blocks()) {
    st.adapters.push_back(init_adapter(b->a.gamma.shape()[0], arng));
  }
  return st;
}

// Per-step mask context: threshold, hard masks, and the discrepancy vectors
// measured from this step's forward taps. Tests can freeze one of these and
// feed it back in, which keeps the loss a deterministic function of the
// parameters during finite-difference checks.
struct StepContext {
  double tau = 0.0;
  std::vector<std::vector<double>> m_hard;  // per layer; empty = no masking
  std::vector<std::vector<double>> d;       // per layer combined discrepancy
  std::vector<double> d_layer;              // per layer channel mean
  int suppressed = 0;
  // Gradient-check mode: attach the hard masks as plain constants instead of
  // straight-through tensors. The STE backward is intentionally inconsistent
  // with the hard forward (that is the trick), so finite differences can only
  // see the rest of the objective; the STE path has its own analytic check.
  bool masks_const = false;
};

struct StepOverrides {
  // Injected per-layer discrepancy (for controlled experiments); bypasses
  // the measured values.
  const std::vector<std::vector<double>>* d_override = nullptr;
};

// Computes tau from the pooled enabled-layer scores and the hard masks.
inline void prepare_masks(AdaptState& st, StepContext& ctx) {
  auto enabled = st.layer_enabled();
  const bool need_tau = st.sw.subtractive_on || (st.sw.additive_on && st.sw.modulation_on);
  if (!need_tau) return;
  auto pooled = pooled_abs_scores(st.masks, &enabled);
  if (pooled.empty()) return;
  ctx.tau = compute_threshold(std::move(pooled), st.masks.rho_target);
  st.masks.tau = ctx.tau;
  if (!st.sw.subtractive_on) return;
  ctx.m_hard.resize(st.masks.scores.size());
  ctx.suppressed = 0;
  for (std::size_t l = 0; l < st.masks.scores.size(); ++l) {
    if (!enabled[l]) continue;
    ctx.m_hard[l] = hard_mask(st.masks.scores[l], ctx.tau);
    for (double v : ctx.m_hard[l])
      if (v == 0.0) ++ctx.suppressed;
  }
}

// Channel-mean / channel-std alignment of BN-input taps against the source
// statistics, summed over layers. Differentiable into everything upstream.
inline Tensor align_loss(const std::vector<Tensor>& taps, const SourceStats& stats) {
  if (taps.size() != stats.layers.size()) {
    throw ConfigError("align_loss: tap count " + std::to_string(taps.size()) +
                      " does not match stats layers " + std::to_string(stats.layers.size()));
  }
  Tensor total;
  for (std::size_t l = 0; l < taps.size(); ++l) {
    const Tensor& tap = taps[l];
    Tensor mu_t = channel_mean(tap);
    Tensor centered = add_cw(tap, scale(mu_t, -1.0));
    Tensor sigma_t = sqrt_t(channel_mean(mul(centered, centered)));
    Tensor term = add(mean_all(abs_t(sub(mu_t, stats.layers[l].mu))),
                      mean_all(abs_t(sub(sigma_t, stats.layers[l].sigma))));
    total = l == 0 ? term : add(total, term);
  }
  return total;
}

inline Tensor total_loss(const Tensor& loss_align, const Tensor& loss_mask, double lambda_reg) {
  return add(loss_align, scale(loss_mask, lambda_reg));
}

// Measures per-layer discrepancy from tap data (detached). Two views come
// out of the same raw measurements:
//   ctx.d       - the normalized combination that weights the mask loss
//                 (per-layer unit-mean, so only relative channel pressure)
//   ctx.d_layer - the raw image+instance aggregate, which keeps the absolute
//                 scale; this is what layer-level gradient scaling and the
//                 severity analyses read. Normalized vectors have constant
//                 channel mean by construction and carry no layer or
//                 severity signal.
inline void measure_step_discrepancy(const std::vector<Tensor>& taps, const Batch& batch,
                                     const SourceStats& stats, int image_hw, StepContext& ctx,
                                     DiscrepancyMetric metric = DiscrepancyMetric::kL1) {
  ctx.d.resize(taps.size());
  ctx.d_layer.resize(taps.size());
  for (std::size_t l = 0; l < taps.size(); ++l) {
    const Tensor& tap = taps[l];
    auto d_img = image_discrepancy(tap, stats.layers[l].img_mean, metric);
    auto fboxes = boxes_to_feature(batch.boxes, image_hw, tap.shape()[2]);
    RoiCropOut crops = roi_crop(tap, fboxes, stats.roi_h, stats.roi_w);
    bool absent = false;
    auto d_inst = instance_discrepancy(crops.features, stats.layers[l].inst_mean, &absent, metric);
    ctx.d[l] = combine_discrepancy(d_img, d_inst, absent);
    const double raw_img = layer_aggregate(d_img);
    ctx.d_layer[l] = absent ? 2.0 * raw_img : raw_img + layer_aggregate(d_inst);
  }
}

struct LossOut {
  Tensor total;
  Tensor align;
  Tensor mask;
  Tensor logits;
  std::vector<Tensor> taps;
};

// Builds the buffered forward and the full adaptation objective. When
// use_ctx_d is set the caller supplies ctx.d (frozen); otherwise D is
// measured from this forward's taps. D always enters the loss as constants.
inline LossOut compute_adapt_loss(AdaptState& st, const Batch& batch, const SourceStats& stats,
                                  StepContext& ctx, bool use_ctx_d,
                                  const StepOverrides* ov = nullptr) {
  auto layer_en = st.layer_enabled();
  auto block_en = st.block_enabled();
  auto block_bn = st.block_last_bn_index();

  BufferAttach attach;
  if (st.sw.subtractive_on && !ctx.m_hard.empty()) {
    attach.bn_masks.resize(st.masks.scores.size());
    for (std::size_t l = 0; l < st.masks.scores.size(); ++l) {
      if (!layer_en[l] || ctx.m_hard[l].empty()) continue;
      attach.bn_masks[l] =
          ctx.masks_const
              ? Tensor::from_data({st.masks.scores[l].shape()[0]}, ctx.m_hard[l])
              : ste_mask(st.masks.scores[l], ctx.m_hard[l], ctx.tau, st.masks.lambda_s);
    }
  }
  if (st.sw.additive_on) {
    attach.adapters.resize(st.adapters.size(), nullptr);
    attach.adapter_mult.resize(st.adapters.size());
    for (std::size_t b = 0; b < st.adapters.size(); ++b) {
      if (!block_en[b]) continue;
      attach.adapters[b] = &st.adapters[b];
      if (st.sw.modulation_on) {
        attach.adapter_mult[b] = inverse_soft_mask(st.masks.scores[block_bn[b]], ctx.tau,
                                                   st.hyper.lambda_a, st.hyper.k_scale);
      }
    }
  }

  ForwardOut fo = forward_with_taps(st.net, batch.images, BnMode::kEval, &attach);

  if (ov && ov->d_override) {
    ctx.d = *ov->d_override;
    ctx.d_layer.resize(ctx.d.size());
    for (std::size_t l = 0; l < ctx.d.size(); ++l) ctx.d_layer[l] = layer_aggregate(ctx.d[l]);
  } else if (!use_ctx_d) {
    measure_step_discrepancy(fo.taps, batch, stats, st.net.cfg.image_hw, ctx);
  }

  LossOut out;
  out.logits = fo.logits;
  out.taps = fo.taps;
  out.align = align_loss(fo.taps, stats);
  if (st.sw.mask_loss_on) {
    out.mask = mask_loss(st.masks.scores, ctx.d, &layer_en);
    out.total = total_loss(out.align, out.mask, st.hyper.lambda_reg);
  } else {
    out.mask = Tensor::scalar(0.0);
    out.total = total_loss(out.align, out.mask, 0.0);
  }
  return out;
}

// The three learnable groups, restricted to enabled stages.
inline std::vector<Tensor> adapt_params(AdaptState& st) {
  std::vector<Tensor> out;
  auto layer_en = st.layer_enabled();
  auto block_en = st.block_enabled();
  const auto layers = st.net.bn_layers();
  for (std::size_t l = 0; l < layers.size(); ++l) {
    if (!layer_en[l]) continue;
    out.push_back(layers[l]->gamma);
    out.push_back(layers[l]->beta);
    out.push_back(st.masks.scores[l]);
  }
  for (std::size_t b = 0; b < st.adapters.size(); ++b) {
    if (!block_en[b]) continue;
    out.push_back(st.adapters[b].w1x1);
    out.push_back(st.adapters[b].w3x3);
    out.push_back(st.adapters[b].alpha);
  }
  return out;
}

// Multiplies each enabled block's adapter gradients by
// clamp(D_block / mean(D_block), 0.5, 2.0); all-zero discrepancy skips
// scaling. BN-affine and mask-score gradients are untouched.
inline std::vector<double> scale_adapter_grads(AdaptState& st, const StepContext& ctx) {
  auto block_en = st.block_enabled();
  auto block_bn = st.block_last_bn_index();
  std::vector<double> d_block(st.adapters.size(), 0.0);
  for (std::size_t b = 0; b < st.adapters.size(); ++b) {
    // block discrepancy = mean of its two BN layers' aggregates
    d_block[b] = 0.5 * (ctx.d_layer[block_bn[b] - 1] + ctx.d_layer[block_bn[b]]);
  }
  double mean = 0.0;
  int used = 0;
  for (std::size_t b = 0; b < d_block.size(); ++b) {
    if (!block_en[b]) continue;
    mean += d_block[b];
    ++used;
  }
  std::vector<double> g(st.adapters.size(), 1.0);
  if (used == 0) return g;
  mean /= used;
  if (mean <= 0.0) return g;  // zero-guard: no scaling pressure
  for (std::size_t b = 0; b < st.adapters.size(); ++b) {
    if (!block_en[b]) continue;
    g[b] = std::clamp(d_block[b] / mean, 0.5, 2.0);
    for (auto& p : st.adapters[b].parameters()) {
      if (p.node()->grad.empty()) continue;
      for (auto& v : p.node()->grad) v *= g[b];
    }
  }
  return g;
}

struct StepReport {
  std::int64_t step = 0;
  int segment = 0;
  double loss_align = 0.0;
  double loss_mask = 0.0;
  double loss_total = 0.0;
  int suppressed = 0;
  int reactivated = 0;
  std::vector<double> d_layer;
  double accuracy = -1.0;  // -1 = not evaluated this step
};

// One full adaptation step: threshold + masks, buffered forward, measured
// discrepancy, losses, backward, layer-scaled update of the three parameter
// groups, then stochastic reactivation (strictly after the update).
inline StepReport adapt_step(AdaptState& st, const Batch& batch, const SourceStats& stats,
                             const StepOverrides* ov = nullptr) {
  StepContext ctx;
  prepare_masks(st, ctx);
  LossOut loss = compute_adapt_loss(st, batch, stats, ctx, /*use_ctx_d=*/false, ov);

  if (!std::isfinite(loss.total.value())) {
    std::ostringstream os;
    os << "adapt_step: non-finite loss at step " << st.step_count
       << " (align=" << loss.align.value() << ", mask=" << loss.mask.value() << ", d_layer=[";
    for (std::size_t l = 0; l < ctx.d_layer.size(); ++l) os << (l ? "," : "") << ctx.d_layer[l];
    os << "])";
    throw NumericError(os.str());
  }

  auto params = adapt_params(st);
  for (auto& p : params) p.zero_grad();
  backward(loss.total);
  if (st.sw.grad_scaling_on && st.sw.additive_on) scale_adapter_grads(st, ctx);
  const double lr = st.hyper.lr;
  for (auto& p : params) {
    auto g = p.grad();
    if (g.empty()) continue;
    auto d = p.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
  }

  StepReport rep;
  rep.step = st.step_count;
  rep.loss_align = loss.align.value();
  rep.loss_mask = loss.mask.value();
  rep.loss_total = loss.total.value();
  rep.suppressed = ctx.suppressed;
  rep.d_layer = ctx.d_layer;
  if (st.sw.subtractive_on && st.masks.react_p > 0.0 && !ctx.m_hard.empty()) {
    std::vector<Tensor> gammas;
    for (const ConvBn* cb : st.net.bn_layers()) gammas.push_back(cb->gamma);
    auto layer_en = st.layer_enabled();
    // layers without masks this step contribute nothing
    std::vector<std::vector<double>> hard = ctx.m_hard;
    for (std::size_t l = 0; l < hard.size(); ++l)
      if (hard[l].empty())
        hard[l].assign(static_cast<std::size_t>(st.masks.scores[l].numel()), 1.0);
    rep.reactivated = reactivate(st.masks, gammas, hard, st.rng, &layer_en);
  }
  ++st.step_count;
  return rep;
}

// Evaluation with the current buffers: hard masks from the current
// threshold, current adapters and modulation, eval-mode BN. Pure.
inline double evaluate(AdaptState& st, const ToyDataset& ds) {
  NoGradGuard ng;
  StepContext ctx;
  prepare_masks(st, ctx);
  auto layer_en = st.layer_enabled();
  auto block_en = st.block_enabled();
  auto block_bn = st.block_last_bn_index();
  BufferAttach attach;
  if (st.sw.subtractive_on && !ctx.m_hard.empty()) {
    attach.bn_masks.resize(st.masks.scores.size());
    for (std::size_t l = 0; l < st.masks.scores.size(); ++l) {
      if (!layer_en[l] || ctx.m_hard[l].empty()) continue;
      attach.bn_masks[l] =
          Tensor::from_data({st.masks.scores[l].shape()[0]}, ctx.m_hard[l]);
    }
  }
  if (st.sw.additive_on) {
    attach.adapters.resize(st.adapters.size(), nullptr);
    attach.adapter_mult.resize(st.adapters.size());
    for (std::size_t b = 0; b < st.adapters.size(); ++b) {
      if (!block_en[b]) continue;
      attach.adapters[b] = &st.adapters[b];
      if (st.sw.modulation_on) {
        attach.adapter_mult[b] = inverse_soft_mask(st.masks.scores[block_bn[b]], ctx.tau,
                                                   st.hyper.lambda_a, st.hyper.k_scale);
      }
    }
  }
  return classify_accuracy(st.net, ds, &attach);
}

struct StreamItem {
  Batch batch;
  int segment = 0;
};

// Drives adapt_step over a batch stream, interleaving evaluation every
// eval_every steps (and once more at the end). State carries across
// segments, which is the continual protocol.
inline std::vector<StepReport> adapt_stream(AdaptState& st, const std::vector<StreamItem>& stream,
                                            const ToyDataset* eval_set, int eval_every,
                                            const SourceStats& stats) {
  std::vector<StepReport> reports;
  reports.reserve(stream.size());
  for (std::size_t i = 0; i < stream.size(); ++i) {
    StepReport rep = adapt_step(st, stream[i].batch, stats);
    rep.segment = stream[i].segment;
    const bool last = i + 1 == stream.size();
    if (eval_set && eval_every > 0 &&
        (last || (i + 1) % static_cast<std::size_t>(eval_every) == 0)) {
      rep.accuracy = evaluate(st, *eval_set);
    }
    reports.push_back(std::move(rep));
  }
  return reports;
}

// Mean per-layer discrepancy of the unadapted (buffer-free) network over a
// dataset, plus the network-wide mean. The direct-test view of D.
struct DiscrepancySummary {
  std::vector<double> per_layer;
  double network_mean = 0.0;
};

inline DiscrepancySummary measure_discrepancy(ToyNet& net, const SourceStats& stats,
                                              const ToyDataset& ds, int batch_size = 16) {
  if (ds.images.empty()) throw ConfigError("measure_discrepancy: empty dataset");
  NoGradGuard ng;
  DiscrepancySummary out;
  std::int64_t batches = 0;
  for (std::size_t start = 0; start < ds.images.size();
       start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ds.images.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Batch batch = make_batch(ds, idx);
    ForwardOut fo = forward_with_taps(net, batch.images, BnMode::kEval);
    StepContext ctx;
    measure_step_discrepancy(fo.taps, batch, stats, net.cfg.image_hw, ctx);
    if (out.per_layer.empty()) out.per_layer.assign(ctx.d_layer.size(), 0.0);
    for (std::size_t l = 0; l < ctx.d_layer.size(); ++l) out.per_layer[l] += ctx.d_layer[l];
    ++batches;
  }
  for (auto& v : out.per_layer) v /= static_cast<double>(batches);
  for (double v : out.per_layer) out.network_mean += v;
  out.network_mean /= static_cast<double>(out.per_layer.size());
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints ("cdckpt-1")
// ---------------------------------------------------------------------------

struct Checkpoint {
  ToyNet net;
  bool has_adapt_state = false;
  MaskState masks;
  std::vector<AdapterParams> adapters;
  std::int64_t step_count = 0;
  std::array<std::uint64_t, 4> rng_state{};
  Hyper hyper;
};

namespace detail {

inline void push_tensor(Archive& ar, const std::string& name, const Tensor& t) {
  ar.arrays.push_back({name, t.shape(), {t.data().begin(), t.data().end()}});
}

inline void push_vec(Archive& ar, const std::string& name, const std::vector<double>& v) {
  ar.arrays.push_back({name, {static_cast<int>(v.size())}, v});
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  Archive ar;
  ar.meta["format"] = "cdckpt-1";
  const NetConfig& cfg = ck.net.cfg;
  ar.meta["net"] = {{"image_hw", cfg.image_hw},
                    {"in_channels", cfg.in_channels},
                    {"classes", cfg.classes},
                    {"stage_widths", cfg.stage_widths},
                    {"blocks_per_stage", cfg.blocks_per_stage},
                    {"bn_eps", cfg.bn_eps},
                    {"bn_momentum", cfg.bn_momentum}};
  ar.meta["has_adapt_state"] = ck.has_adapt_state;
  ar.meta["step_count"] = ck.step_count;
  ar.meta["rng_state"] = ck.rng_state;
  ar.meta["hyper"] = {{"lambda_reg", ck.hyper.lambda_reg}, {"lambda_s", ck.hyper.lambda_s},
                      {"lambda_a", ck.hyper.lambda_a},     {"rho_target", ck.hyper.rho_target},
                      {"k_scale", ck.hyper.k_scale},       {"react_p", ck.hyper.react_p},
                      {"lr", ck.hyper.lr},                 {"batch", ck.hyper.batch}};
  ar.meta["tau"] = ck.masks.tau;
  auto layers = ck.net.bn_layers();
  nlohmann::ordered_json names = nlohmann::ordered_json::array();
  for (const ConvBn* cb : layers) names.push_back(cb->name);
  ar.meta["layers"] = names;
  for (const ConvBn* cb : layers) {
    detail::push_tensor(ar, cb->name + "/w", cb->w);
    detail::push_tensor(ar, cb->name + "/gamma", cb->gamma);
    detail::push_tensor(ar, cb->name + "/beta", cb->beta);
    detail::push_vec(ar, cb->name + "/run_mean", cb->run_mean);
    detail::push_vec(ar, cb->name + "/run_var", cb->run_var);
  }
  detail::push_tensor(ar, "head/w", ck.net.head_w);
  detail::push_tensor(ar, "head/b", ck.net.head_b);
  if (ck.has_adapt_state) {
    for (std::size_t l = 0; l < ck.masks.scores.size(); ++l) {
      detail::push_tensor(ar, "mask/scores/" + std::to_string(l), ck.masks.scores[l]);
    }
    for (std::size_t b = 0; b < ck.adapters.size(); ++b) {
      const std::string p = "adapter/" + std::to_string(b);
      detail::push_tensor(ar, p + "/w1x1", ck.adapters[b].w1x1);
      detail::push_tensor(ar, p + "/w3x3", ck.adapters[b].w3x3);
      detail::push_tensor(ar, p + "/alpha", ck.adapters[b].alpha);
    }
  }
  write_archive(path, ar);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  Archive ar = read_archive(path);
  if (ar.meta.value("format", "") != "cdckpt-1") {
    throw IoError("'" + path + "' is not a cdckpt-1 checkpoint");
  }
  NetConfig cfg;
  const auto& nj = ar.meta.at("net");
  cfg.image_hw = nj.at("image_hw").get<int>();
  cfg.in_channels = nj.at("in_channels").get<int>();
  cfg.classes = nj.at("classes").get<int>();
  cfg.stage_widths = nj.at("stage_widths").get<std::vector<int>>();
  cfg.blocks_per_stage = nj.at("blocks_per_stage").get<int>();
  cfg.bn_eps = nj.at("bn_eps").get<double>();
  cfg.bn_momentum = nj.at("bn_momentum").get<double>();
  Checkpoint ck;
  ck.net = make_toynet(cfg, 0);
  auto load_into = [&](const std::string& name, Tensor t) {
    const ArchiveArray& a = ar.find(name);
    if (a.shape != t.shape()) throw IoError("checkpoint: shape mismatch for '" + name + "'");
    std::copy(a.data.begin(), a.data.end(), t.mutable_data().begin());
  };
  for (ConvBn* cb : ck.net.bn_layers()) {
    load_into(cb->name + "/w", cb->w);
    load_into(cb->name + "/gamma", cb->gamma);
    load_into(cb->name + "/beta", cb->beta);
    cb->run_mean = ar.find(cb->name + "/run_mean").data;
    cb->run_var = ar.find(cb->name + "/run_var").data;
  }
  load_into("head/w", ck.net.head_w);
  load_into("head/b", ck.net.head_b);
  ck.has_adapt_state = ar.meta.value("has_adapt_state", false);
  ck.step_count = ar.meta.value("step_count", std::int64_t{0});
  if (ar.meta.contains("rng_state")) {
    auto rs = ar.meta.at("rng_state").get<std::vector<std::uint64_t>>();
    std::copy(rs.begin(), rs.end(), ck.rng_state.begin());
  }
  if (ar.meta.contains("hyper")) {
    const auto& hj = ar.meta.at("hyper");
    ck.hyper.lambda_reg = hj.at("lambda_reg").get<double>();
    ck.hyper.lambda_s = hj.at("lambda_s").get<double>();
    ck.hyper.lambda_a = hj.at("lambda_a").get<double>();
    ck.hyper.rho_target = hj.at("rho_target").get<double>();
    ck.hyper.k_scale = hj.at("k_scale").get<double>();
    ck.hyper.react_p = hj.at("react_p").get<double>();
    ck.hyper.lr = hj.at("lr").get<double>();
    ck.hyper.batch = hj.at("batch").get<int>();
  }
  if (ck.has_adapt_state) {
    std::vector<Tensor> gammas;
    for (const ConvBn* cb : ck.net.bn_layers()) gammas.push_back(cb->gamma);
    ck.masks = init_scores(gammas, ck.hyper.rho_target, ck.hyper.lambda_s, ck.hyper.react_p);
    ck.masks.tau = ar.meta.value("tau", 0.0);
    for (std::size_t l = 0; l < ck.masks.scores.size(); ++l) {
      const ArchiveArray& a = ar.find("mask/scores/" + std::to_string(l));
      std::copy(a.data.begin(), a.data.end(), ck.masks.scores[l].mutable_data().begin());
    }
    Rng tmp(0);
    for (std::size_t b = 0; b < ck.net.blocks().size(); ++b) {
      AdapterParams ap = init_adapter(ck.net.blocks()[b]->a.gamma.shape()[0], tmp);
      const std::string p = "adapter/" + std::to_string(b);
      auto fill = [&](const std::string& name, Tensor t) {
        const ArchiveArray& a = ar.find(name);
        std::copy(a.data.begin(), a.data.end(), t.mutable_data().begin());
      };
      fill(p + "/w1x1", ap.w1x1);
      fill(p + "/w3x3", ap.w3x3);
      fill(p + "/alpha", ap.alpha);
      ck.adapters.push_back(std::move(ap));
    }
  }
  return ck;
}

// Rebuilds a live AdaptState from a checkpoint carrying adaptation state.
inline AdaptState resume_adapt_state(Checkpoint ck, const Switches& sw,
                                     std::vector<char> stage_enable) {
  AdaptState st = make_adapt_state(ck.net, ck.hyper, sw, std::move(stage_enable), 0);
  if (ck.has_adapt_state) {
    for (std::size_t l = 0; l < st.masks.scores.size(); ++l) {
      std::copy(ck.masks.scores[l].data().begin(), ck.masks.scores[l].data().end(),
                st.masks.scores[l].mutable_data().begin());
    }
    st.masks.tau = ck.masks.tau;
    for (std::size_t b = 0; b < st.adapters.size(); ++b) {
      auto copy_into = [](const Tensor& src, Tensor dst) {
        std::copy(src.data().begin(), src.data().end(), dst.mutable_data().begin());
      };
      copy_into(ck.adapters[b].w1x1, st.adapters[b].w1x1);
      copy_into(ck.adapters[b].w3x3, st.adapters[b].w3x3);
      copy_into(ck.adapters[b].alpha, st.adapters[b].alpha);
    }
    st.step_count = ck.step_count;
    st.rng.set_state(ck.rng_state);
  }
  return st;
}

inline Checkpoint to_checkpoint(AdaptState& st) {
  Checkpoint ck;
  ck.net = st.net;
  ck.has_adapt_state = true;
  ck.masks = st.masks;
  ck.adapters = st.adapters;
  ck.step_count = st.step_count;
  ck.rng_state = st.rng.state();
  ck.hyper = st.hyper;
  return ck;
}

}  // namespace cdbuf
