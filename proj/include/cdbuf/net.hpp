#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cdbuf/additive.hpp"
#include "cdbuf/data.hpp"
#include "cdbuf/errors.hpp"
#include "cdbuf/rng.hpp"
#include "cdbuf/serialize.hpp"
#include "cdbuf/tensor.hpp"

namespace cdbuf {

struct NetConfig {
  int image_hw = 16;
  int in_channels = 1;
  int classes = 4;
  std::vector<int> stage_widths = {8, 16};
  int blocks_per_stage = 2;
  double bn_eps = 1e-5;
  double bn_momentum = 0.1;
};

// One conv + BN unit. Every BN layer in the network is the BN of one of
// these; taps are recorded at the BN input (the conv output).
struct ConvBn {
  Tensor w;  // [O,C,kh,kw]
  Tensor gamma, beta;
  std::vector<double> run_mean, run_var;
  int stride = 1;
  int pad = 1;
  int stage = 0;
  std::string name;
};

// Identity residual block: conv-BN-relu-conv-BN plus shortcut, then relu.
// Same width in and out, so the per-block adapter is square.
struct Block {
  ConvBn a, b;
  int stage = 0;
};

struct ToyNet {
  NetConfig cfg;
  ConvBn stem;                      // in_channels -> widths[0]
  std::vector<ConvBn> transitions;  // widths[i-1] -> widths[i], stride 2
  std::vector<std::vector<Block>> stages;
  Tensor head_w, head_b;  // [K, w_last], [K]

  // BN layers in forward order: stem, stage 0 blocks, transition 1, stage 1
  // blocks, ... This order defines layer indices everywhere (stats, masks).
  std::vector<ConvBn*> bn_layers() {
    std::vector<ConvBn*> out;
    out.push_back(&stem);
    for (std::size_t s = 0; s < stages.size(); ++s) {
      if (s > 0) out.push_back(&transitions[s - 1]);
      for (auto& blk : stages[s]) {
        out.push_back(&blk.a);
        out.push_back(&blk.b);
      }
    }
    return out;
  }

  std::vector<const ConvBn*> bn_layers() const {
    auto mut = const_cast<ToyNet*>(this)->bn_layers();
    return {mut.begin(), mut.end()};
  }

  std::vector<Block*> blocks() {
    std::vector<Block*> out;
    for (auto& st : stages)
      for (auto& blk : st) out.push_back(&blk);
    return out;
  }

  // Backbone weights: convs + head. These stay frozen during adaptation.
  std::vector<Tensor> backbone_params() {
    std::vector<Tensor> out;
    for (ConvBn* cb : bn_layers()) out.push_back(cb->w);
    out.push_back(head_w);
    out.push_back(head_b);
    return out;
  }

  std::vector<Tensor> affine_params() {
    std::vector<Tensor> out;
    for (ConvBn* cb : bn_layers()) {
      out.push_back(cb->gamma);
      out.push_back(cb->beta);
    }
    return out;
  }

  std::vector<Tensor> all_params() {
    auto out = backbone_params();
    for (auto& t : affine_params()) out.push_back(t);
    return out;
  }

  std::uint64_t weights_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const ConvBn* cb : bn_layers()) {
      h = fnv1a_doubles(cb->w.data(), h);
      h = fnv1a_doubles(cb->gamma.data(), h);
      h = fnv1a_doubles(cb->beta.data(), h);
      h = fnv1a(cb->run_mean.data(), cb->run_mean.size() * sizeof(double), h);
      h = fnv1a(cb->run_var.data(), cb->run_var.size() * sizeof(double), h);
    }
    h = fnv1a_doubles(head_w.data(), h);
    h = fnv1a_doubles(head_b.data(), h);
    return h;
  }
};

namespace detail {

inline ConvBn make_conv_bn(int in_ch, int out_ch, int stride, int stage, const std::string& name,
                           Rng& rng) {
  ConvBn cb;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ch) * 9);
  std::vector<double> w(static_cast<std::size_t>(out_ch) * in_ch * 9);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  cb.w = Tensor::param({out_ch, in_ch, 3, 3}, std::move(w));
  cb.gamma = Tensor::param({out_ch}, std::vector<double>(static_cast<std::size_t>(out_ch), 1.0));
  cb.beta = Tensor::param({out_ch}, std::vector<double>(static_cast<std::size_t>(out_ch), 0.0));
  cb.run_mean.assign(static_cast<std::size_t>(out_ch), 0.0);
  cb.run_var.assign(static_cast<std::size_t>(out_ch), 1.0);
  cb.stride = stride;
  cb.pad = 1;
  cb.stage = stage;
  cb.name = name;
  return cb;
}

}  // namespace detail

inline ToyNet make_toynet(const NetConfig& cfg, std::uint64_t seed) {
  if (cfg.stage_widths.empty()) throw ConfigError("make_toynet: need at least one stage");
  ToyNet net;
  net.cfg = cfg;
  Rng rng(mix_seed(seed, 0xbacca));
  net.stem = detail::make_conv_bn(cfg.in_channels, cfg.stage_widths[0], 1, 0, "stem", rng);
  for (std::size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    if (s > 0) {
      net.transitions.push_back(detail::make_conv_bn(cfg.stage_widths[s - 1], cfg.stage_widths[s],
                                                     2, static_cast<int>(s),
                                                     "t" + std::to_string(s), rng));
    }
    std::vector<Block> blocks;
    for (int b = 0; b < cfg.blocks_per_stage; ++b) {
      const std::string prefix = "s" + std::to_string(s) + ".b" + std::to_string(b);
      Block blk;
      blk.stage = static_cast<int>(s);
      blk.a = detail::make_conv_bn(cfg.stage_widths[s], cfg.stage_widths[s], 1,
                                   static_cast<int>(s), prefix + ".bn1", rng);
      blk.b = detail::make_conv_bn(cfg.stage_widths[s], cfg.stage_widths[s], 1,
                                   static_cast<int>(s), prefix + ".bn2", rng);
      blocks.push_back(std::move(blk));
    }
    net.stages.push_back(std::move(blocks));
  }
  const int last = cfg.stage_widths.back();
  const double hb = 1.0 / std::sqrt(static_cast<double>(last));
  std::vector<double> hw(static_cast<std::size_t>(cfg.classes) * last);
  for (auto& v : hw) v = rng.uniform(-hb, hb);
  net.head_w = Tensor::param({cfg.classes, last}, std::move(hw));
  net.head_b = Tensor::param({cfg.classes}, std::vector<double>(static_cast<std::size_t>(cfg.classes), 0.0));
  return net;
}

// Deep copy: fresh parameter tensors with copied data. Plain struct copies
// of ToyNet share tensor storage, which is wrong for isolated experiments.
inline ToyNet clone_net(const ToyNet& src) {
  ToyNet out = src;  // copies config, names, running stats, and tensor handles
  auto fresh = [](Tensor& t) {
    Tensor n = Tensor::from_data(t.shape(), {t.data().begin(), t.data().end()});
    n.set_requires_grad(t.requires_grad());
    t = n;
  };
  auto redo = [&](ConvBn& cb) {
    fresh(cb.w);
    fresh(cb.gamma);
    fresh(cb.beta);
  };
  redo(out.stem);
  for (auto& t : out.transitions) redo(t);
  for (auto& st : out.stages)
    for (auto& blk : st) {
      redo(blk.a);
      redo(blk.b);
    }
  fresh(out.head_w);
  fresh(out.head_b);
  return out;
}

// Channel-modulation state attached to a forward pass. All vectors are
// indexed in bn_layers()/blocks() order; an undefined Tensor means "leave
// this layer/block untouched".
struct BufferAttach {
  std::vector<Tensor> bn_masks;      // per BN layer, straight-through [C] masks
  std::vector<const AdapterParams*> adapters;  // per block, nullptr = disabled
  std::vector<Tensor> adapter_mult;  // per block, [C] inverse-mask multiplier
};

struct ForwardOut {
  Tensor logits;                // [N,K]
  std::vector<Tensor> taps;     // BN-input features, per layer
  std::vector<Tensor> bn_outputs;    // post-BN (pre-mask) features, per layer
  std::vector<Tensor> block_inputs;  // per block
};

namespace detail {

inline Tensor conv_bn(ConvBn& cb, const Tensor& x, BnMode mode, double eps, double momentum,
                      const Tensor* mask, ForwardOut& out) {
  Tensor t = conv2d(x, cb.w, cb.stride, cb.pad);
  out.taps.push_back(t);
  Tensor y = batch_norm(t, cb.gamma, cb.beta, eps, mode, &cb.run_mean, &cb.run_var, momentum).y;
  out.bn_outputs.push_back(y);
  if (mask && mask->defined()) y = mul_cw(y, *mask);
  return y;
}

}  // namespace detail

// Runs the network, recording the exact tensor entering each BN layer.
// With buffers attached, each BN output is channel-masked and each block
// output receives the modulated adapter features.
inline ForwardOut forward_with_taps(ToyNet& net, const Tensor& batch, BnMode mode,
                                    const BufferAttach* buffers = nullptr) {
  if (batch.rank() != 4 || batch.shape()[0] == 0) {
    throw ShapeError("forward_with_taps: batch must be nonempty [N,C,H,W]");
  }
  const auto layers = net.bn_layers();
  if (buffers) {
    if (!buffers->bn_masks.empty() && buffers->bn_masks.size() != layers.size()) {
      throw ConfigError("forward_with_taps: mask count does not match BN layers");
    }
    const std::size_t nblocks = net.blocks().size();
    if (!buffers->adapters.empty() && buffers->adapters.size() != nblocks) {
      throw ConfigError("forward_with_taps: adapter count does not match blocks");
    }
  }
  ForwardOut out;
  const double eps = net.cfg.bn_eps, mom = net.cfg.bn_momentum;
  std::size_t li = 0;  // BN layer cursor
  std::size_t bi = 0;  // block cursor
  auto mask_at = [&](std::size_t idx) -> const Tensor* {
    if (!buffers || buffers->bn_masks.empty()) return nullptr;
    return &buffers->bn_masks[idx];
  };

  Tensor x = relu(detail::conv_bn(net.stem, batch, mode, eps, mom, mask_at(li), out));
  ++li;
  for (std::size_t s = 0; s < net.stages.size(); ++s) {
    if (s > 0) {
      x = relu(detail::conv_bn(net.transitions[s - 1], x, mode, eps, mom, mask_at(li), out));
      ++li;
    }
    for (auto& blk : net.stages[s]) {
      out.block_inputs.push_back(x);
      Tensor h = relu(detail::conv_bn(blk.a, x, mode, eps, mom, mask_at(li), out));
      ++li;
      h = detail::conv_bn(blk.b, h, mode, eps, mom, mask_at(li), out);
      ++li;
      Tensor block_out = relu(add(x, h));
      if (buffers && !buffers->adapters.empty() && buffers->adapters[bi]) {
        Tensor f_add = adapter_forward(x, *buffers->adapters[bi]);
        if (!buffers->adapter_mult.empty() && buffers->adapter_mult[bi].defined()) {
          f_add = apply_additive(f_add, buffers->adapter_mult[bi]);
        }
        block_out = add(block_out, f_add);
      }
      x = block_out;
      ++bi;
    }
  }
  Tensor gap = reduce_mean(x, {2, 3});
  out.logits = linear(gap, net.head_w, net.head_b);
  return out;
}

// ---------------------------------------------------------------------------
// RoI cropping
// ---------------------------------------------------------------------------

struct RoiCropOut {
  Tensor features;  // [M,C,out_h,out_w]
  int skipped = 0;  // degenerate (zero-area) boxes
};

// Bilinear crop-and-resize, one sample per output cell. The sampling grid
// spans the box inclusively (box (0,0,W-1,H-1) at out size WxH reproduces the
// feature map exactly); samples clamp at borders. Zero-area boxes are skipped
// and counted, never fatal.
inline RoiCropOut roi_crop(const Tensor& feature,
                           const std::vector<std::vector<Box>>& boxes_per_image, int out_h,
                           int out_w) {
  if (feature.rank() != 4) throw ShapeError("roi_crop: expects [N,C,H,W]");
  if (static_cast<int>(boxes_per_image.size()) != feature.shape()[0]) {
    throw ShapeError("roi_crop: box list count does not match batch");
  }
  NoGradGuard ng;  // statistics path only, no gradients
  const int c = feature.shape()[1], h = feature.shape()[2], w = feature.shape()[3];
  const int hw = h * w;
  RoiCropOut out;
  std::vector<double> crops;
  int m = 0;
  for (int n = 0; n < feature.shape()[0]; ++n) {
    for (const Box& box : boxes_per_image[static_cast<std::size_t>(n)]) {
      if (box.width() <= 0.0 || box.height() <= 0.0) {
        ++out.skipped;
        continue;
      }
      ++m;
      for (int ic = 0; ic < c; ++ic) {
        const std::size_t base = (static_cast<std::size_t>(n) * c + ic) * hw;
        for (int oy = 0; oy < out_h; ++oy) {
          const double sy = out_h == 1 ? (box.y0 + box.y1) * 0.5
                                       : box.y0 + (box.y1 - box.y0) * oy / (out_h - 1);
          for (int ox = 0; ox < out_w; ++ox) {
            const double sx = out_w == 1 ? (box.x0 + box.x1) * 0.5
                                         : box.x0 + (box.x1 - box.x0) * ox / (out_w - 1);
            const double cy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
            const double cx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
            const int y0 = static_cast<int>(std::floor(cy));
            const int x0 = static_cast<int>(std::floor(cx));
            const int y1 = std::min(y0 + 1, h - 1);
            const int x1 = std::min(x0 + 1, w - 1);
            const double fy = cy - y0, fx = cx - x0;
            const double v00 = feature[base + static_cast<std::size_t>(y0) * w + x0];
            const double v01 = feature[base + static_cast<std::size_t>(y0) * w + x1];
            const double v10 = feature[base + static_cast<std::size_t>(y1) * w + x0];
            const double v11 = feature[base + static_cast<std::size_t>(y1) * w + x1];
            crops.push_back((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                            fy * ((1 - fx) * v10 + fx * v11));
          }
        }
      }
    }
  }
  out.features = Tensor::from_data({m, c, out_h, out_w}, std::move(crops));
  return out;
}

// Scales pixel-coordinate boxes into a feature map's coordinate frame.
inline std::vector<std::vector<Box>> boxes_to_feature(const std::vector<std::vector<Box>>& boxes,
                                                      int image_hw, int feat_hw) {
  const double f = static_cast<double>(feat_hw) / image_hw;
  std::vector<std::vector<Box>> out(boxes.size());
  for (std::size_t i = 0; i < boxes.size(); ++i)
    for (const Box& b : boxes[i]) out[i].push_back({b.x0 * f, b.y0 * f, b.x1 * f, b.y1 * f});
  return out;
}

// ---------------------------------------------------------------------------
// Batching helpers
// ---------------------------------------------------------------------------

struct Batch {
  Tensor images;  // [N,1,H,W]
  std::vector<int> labels;
  std::vector<std::vector<Box>> boxes;
};

inline Batch make_batch(const ToyDataset& ds, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ConfigError("make_batch: empty index list");
  const auto& first = ds.images[indices[0]].pixels;
  const int h = first.shape()[1], w = first.shape()[2];
  Batch batch;
  std::vector<double> data;
  data.reserve(indices.size() * static_cast<std::size_t>(h) * w);
  for (std::size_t idx : indices) {
    const auto& img = ds.images[idx];
    data.insert(data.end(), img.pixels.data().begin(), img.pixels.data().end());
    batch.labels.push_back(img.label);
    batch.boxes.push_back(img.boxes);
  }
  batch.images = Tensor::from_data({static_cast<int>(indices.size()), 1, h, w}, std::move(data));
  return batch;
}

// ---------------------------------------------------------------------------
// Source training
// ---------------------------------------------------------------------------

// Plain gradient-descent cross-entropy training with train-mode BN. Fully
// deterministic under the seed; throws on divergence naming the step.
inline void train_source(ToyNet& net, const ToyDataset& train, int epochs, double lr,
                         int batch_size, std::uint64_t seed) {
  if (train.images.empty()) throw ConfigError("train_source: empty dataset");
  if (epochs == 0) return;
  auto params = net.all_params();
  Rng rng(mix_seed(seed, 0x5eed));
  std::vector<std::size_t> order(train.images.size());
  std::iota(order.begin(), order.end(), 0u);
  std::int64_t step = 0;
  for (int e = 0; e < epochs; ++e) {
    // Fisher-Yates with the library rng keeps the schedule platform-stable.
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      if (end - start < 2) continue;  // BN needs a real batch
      Batch batch = make_batch(train, {order.begin() + static_cast<std::ptrdiff_t>(start),
                                       order.begin() + static_cast<std::ptrdiff_t>(end)});
      ForwardOut fo = forward_with_taps(net, batch.images, BnMode::kTrain);
      Tensor loss = cross_entropy(fo.logits, batch.labels);
      if (!std::isfinite(loss.value())) {
        throw NumericError("train_source: loss diverged (non-finite) at step " +
                           std::to_string(step));
      }
      for (auto& p : params) p.zero_grad();
      backward(loss);
      for (auto& p : params) {
        auto d = p.mutable_data();
        auto g = p.grad();
        if (g.empty()) continue;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
      }
      ++step;
    }
  }
}

// Argmax classification accuracy with eval-mode BN; ties pick the lowest
// class index.
inline double classify_accuracy(ToyNet& net, const ToyDataset& ds,
                                const BufferAttach* buffers = nullptr, int batch_size = 64) {
  if (ds.images.empty()) throw ConfigError("classify_accuracy: empty dataset");
  NoGradGuard ng;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < ds.images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ds.images.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Batch batch = make_batch(ds, idx);
    ForwardOut fo = forward_with_taps(net, batch.images, BnMode::kEval, buffers);
    const int k = fo.logits.shape()[1];
    for (std::size_t n = 0; n < idx.size(); ++n) {
      int arg = 0;
      double best = fo.logits[n * static_cast<std::size_t>(k)];
      for (int j = 1; j < k; ++j) {
        const double v = fo.logits[n * static_cast<std::size_t>(k) + j];
        if (v > best) {
          best = v;
          arg = j;
        }
      }
      if (arg == batch.labels[n]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.images.size());
}

// ---------------------------------------------------------------------------
// Source statistics
// ---------------------------------------------------------------------------

struct LayerStats {
  std::string name;
  Tensor img_mean;   // [C,H,W] mean BN-input feature
  Tensor inst_mean;  // [C,h,w] mean RoI-cropped instance feature
  Tensor mu;         // [C] channel mean over (samples,H,W)
  Tensor sigma;      // [C] channel std (population)
};

struct SourceStats {
  std::vector<LayerStats> layers;
  std::uint64_t net_hash = 0;
  std::uint64_t dataset_seed = 0;
  std::int64_t n_images = 0;
  std::int64_t n_instances = 0;
  int roi_h = 4, roi_w = 4;
};

// One-pass streaming statistics of BN-input features over a dataset:
// mean feature map, mean instance crop, and per-channel mean/std via a
// Welford accumulator. The net runs in eval mode with no buffers attached.
inline SourceStats precompute_stats(ToyNet& net, const ToyDataset& ds, int roi_h = 4,
                                    int roi_w = 4, int batch_size = 32) {
  if (ds.images.empty()) throw ConfigError("precompute_stats: empty dataset");
  NoGradGuard ng;
  const auto layers = net.bn_layers();
  const std::size_t nl = layers.size();

  struct Acc {
    std::vector<double> img_sum;
    Shape img_shape;
    std::vector<double> inst_sum;
    std::int64_t inst_count = 0;
    std::vector<double> mean, m2;  // Welford per channel
    std::int64_t count = 0;       // values per channel
  };
  std::vector<Acc> acc(nl);

  std::int64_t n_images = 0;
  std::int64_t n_instances = 0;
  for (std::size_t start = 0; start < ds.images.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(ds.images.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    Batch batch = make_batch(ds, idx);
    ForwardOut fo = forward_with_taps(net, batch.images, BnMode::kEval);
    n_images += static_cast<std::int64_t>(idx.size());
    for (std::size_t l = 0; l < nl; ++l) {
      const Tensor& tap = fo.taps[l];
      const int n = tap.shape()[0], c = tap.shape()[1], h = tap.shape()[2], w = tap.shape()[3];
      const int hw = h * w;
      Acc& a = acc[l];
      if (a.img_sum.empty()) {
        a.img_shape = {c, h, w};
        a.img_sum.assign(static_cast<std::size_t>(c) * hw, 0.0);
        a.inst_sum.assign(static_cast<std::size_t>(c) * roi_h * roi_w, 0.0);
        a.mean.assign(static_cast<std::size_t>(c), 0.0);
        a.m2.assign(static_cast<std::size_t>(c), 0.0);
      }
      for (int in = 0; in < n; ++in) {
        for (int ic = 0; ic < c; ++ic) {
          const std::size_t base = (static_cast<std::size_t>(in) * c + ic) * hw;
          const std::size_t cc = static_cast<std::size_t>(ic);
          const double cnt0 = static_cast<double>(a.count);
          double mean = a.mean[cc], m2 = a.m2[cc];
          for (int i = 0; i < hw; ++i) {
            const double v = tap[base + i];
            a.img_sum[cc * hw + i] += v;
            const double cnt = cnt0 + i + 1;
            const double delta = v - mean;
            mean += delta / cnt;
            m2 += delta * (v - mean);
          }
          a.mean[cc] = mean;
          a.m2[cc] = m2;
        }
        a.count += hw;
      }
      // instance crops at this layer's scale
      auto fboxes = boxes_to_feature(batch.boxes, net.cfg.image_hw, h);
      RoiCropOut crops = roi_crop(tap, fboxes, roi_h, roi_w);
      const int m = crops.features.shape()[0];
      const int ihw = roi_h * roi_w;
      for (int im = 0; im < m; ++im)
        for (int ic = 0; ic < c; ++ic) {
          const std::size_t base = (static_cast<std::size_t>(im) * c + ic) * ihw;
          for (int i = 0; i < ihw; ++i)
            a.inst_sum[static_cast<std::size_t>(ic) * ihw + i] += crops.features[base + i];
        }
      a.inst_count += m;
      if (l == 0) n_instances += m;
    }
  }

  SourceStats out;
  out.net_hash = net.weights_hash();
  out.dataset_seed = ds.seed;
  out.n_images = n_images;
  out.n_instances = n_instances;
  out.roi_h = roi_h;
  out.roi_w = roi_w;
  for (std::size_t l = 0; l < nl; ++l) {
    Acc& a = acc[l];
    LayerStats ls;
    ls.name = layers[l]->name;
    std::vector<double> img(a.img_sum);
    for (auto& v : img) v /= static_cast<double>(n_images);
    ls.img_mean = Tensor::from_data(a.img_shape, std::move(img));
    std::vector<double> inst(a.inst_sum);
    for (auto& v : inst) v /= static_cast<double>(std::max<std::int64_t>(a.inst_count, 1));
    ls.inst_mean = Tensor::from_data({a.img_shape[0], roi_h, roi_w}, std::move(inst));
    ls.mu = Tensor::from_data({a.img_shape[0]}, a.mean);
    std::vector<double> sigma(a.m2);
    for (auto& v : sigma) v = std::sqrt(v / static_cast<double>(a.count));
    ls.sigma = Tensor::from_data({a.img_shape[0]}, std::move(sigma));
    out.layers.push_back(std::move(ls));
  }
  return out;
}

// SourceStats file format "cdstats-1": manifest with layer names, shapes,
// counts, and seeds, plus four arrays per layer.
inline void save_stats(const std::string& path, const SourceStats& st) {
  Archive ar;
  ar.meta["format"] = "cdstats-1";
  ar.meta["kind"] = "source_stats";
  ar.meta["net_hash"] = st.net_hash;
  ar.meta["dataset_seed"] = st.dataset_seed;
  ar.meta["n_images"] = st.n_images;
  ar.meta["n_instances"] = st.n_instances;
  ar.meta["roi"] = {st.roi_h, st.roi_w};
  nlohmann::ordered_json names = nlohmann::ordered_json::array();
  for (const auto& ls : st.layers) names.push_back(ls.name);
  ar.meta["layers"] = names;
  for (const auto& ls : st.layers) {
    auto push = [&](const std::string& what, const Tensor& t) {
      ar.arrays.push_back({ls.name + "/" + what, t.shape(), {t.data().begin(), t.data().end()}});
    };
    push("img_mean", ls.img_mean);
    push("inst_mean", ls.inst_mean);
    push("mu", ls.mu);
    push("sigma", ls.sigma);
  }
  write_archive(path, ar);
}

inline SourceStats load_stats(const std::string& path) {
  Archive ar = read_archive(path);
  if (ar.meta.value("format", "") != "cdstats-1" || ar.meta.value("kind", "") != "source_stats") {
    throw IoError("'" + path + "' is not a cdstats-1 source statistics file");
  }
  SourceStats st;
  st.net_hash = ar.meta.at("net_hash").get<std::uint64_t>();
  st.dataset_seed = ar.meta.at("dataset_seed").get<std::uint64_t>();
  st.n_images = ar.meta.at("n_images").get<std::int64_t>();
  st.n_instances = ar.meta.at("n_instances").get<std::int64_t>();
  st.roi_h = ar.meta.at("roi").at(0).get<int>();
  st.roi_w = ar.meta.at("roi").at(1).get<int>();
  for (const auto& name : ar.meta.at("layers")) {
    LayerStats ls;
    ls.name = name.get<std::string>();
    auto grab = [&](const std::string& what) {
      const ArchiveArray& a = ar.find(ls.name + "/" + what);
      return Tensor::from_data(a.shape, a.data);
    };
    ls.img_mean = grab("img_mean");
    ls.inst_mean = grab("inst_mean");
    ls.mu = grab("mu");
    ls.sigma = grab("sigma");
    st.layers.push_back(std::move(ls));
  }
  return st;
}

}  // namespace cdbuf
