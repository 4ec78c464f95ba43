#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numeric>

#include "cdbuf/engine.hpp"
#include "cdbuf/net.hpp"

using namespace cdbuf;

namespace {

NetConfig tiny_config() {
  NetConfig cfg;
  cfg.image_hw = 8;
  cfg.classes = 4;
  cfg.stage_widths = {4, 8};
  cfg.blocks_per_stage = 1;
  return cfg;
}

GenParams tiny_gen() {
  GenParams gp;
  gp.image_hw = 8;
  return gp;
}

void set_center_identity(Tensor w) {
  auto d = w.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
  // [O,C,3,3] with O==C: w[o][o][1][1] = 1
  const int o = w.shape()[0];
  for (int i = 0; i < o; ++i) d[(static_cast<std::size_t>(i) * o + i) * 9 + 4] = 1.0;
}

}  // namespace

TEST_CASE("forward_with_taps structure") {
  ToyNet net = make_toynet(NetConfig{}, 1);
  ToyDataset ds = gen_dataset(4, 2);
  Batch batch = make_batch(ds, {0, 1, 2, 3});
  ForwardOut fo = forward_with_taps(net, batch.images, BnMode::kEval);
  // 2 stages x 2 blocks x 2 BN + stem + transition = 10 BN layers
  CHECK(net.bn_layers().size() == 10);
  CHECK(fo.taps.size() == 10);
  CHECK(fo.bn_outputs.size() == 10);
  CHECK(fo.block_inputs.size() == 4);
  CHECK(fo.logits.shape() == (Shape{4, 4}));

  SECTION("tap fidelity: BN of the tap reproduces the layer's BN output") {
    const auto layers = net.bn_layers();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      ConvBn* cb = layers[l];
      auto redo = batch_norm(fo.taps[l], cb->gamma, cb->beta, net.cfg.bn_eps, BnMode::kEval,
                             &cb->run_mean, &cb->run_var);
      REQUIRE(redo.y.numel() == fo.bn_outputs[l].numel());
      for (std::size_t i = 0; i < static_cast<std::size_t>(redo.y.numel()); ++i)
        REQUIRE_THAT(redo.y[i], Catch::Matchers::WithinAbs(fo.bn_outputs[l][i], 1e-12));
    }
  }
}

TEST_CASE("neutral buffers leave the forward untouched") {
  ToyNet net = make_toynet(NetConfig{}, 3);
  ToyDataset ds = gen_dataset(8, 4);
  Batch batch = make_batch(ds, {0, 1, 2, 3, 4, 5, 6, 7});
  ForwardOut plain = forward_with_taps(net, batch.images, BnMode::kEval);

  // all-ones masks, adapters with alpha == 0
  BufferAttach attach;
  const auto layers = net.bn_layers();
  for (const ConvBn* cb : layers)
    attach.bn_masks.push_back(Tensor::full({cb->gamma.shape()[0]}, 1.0));
  Rng rng(9);
  std::vector<AdapterParams> adapters;
  for (Block* b : net.blocks()) {
    AdapterParams ap = init_adapter(b->a.gamma.shape()[0], rng);
    std::fill(ap.alpha.mutable_data().begin(), ap.alpha.mutable_data().end(), 0.0);
    adapters.push_back(std::move(ap));
  }
  for (const auto& ap : adapters) attach.adapters.push_back(&ap);
  attach.adapter_mult.resize(adapters.size());  // undefined = no modulation

  ForwardOut buffered = forward_with_taps(net, batch.images, BnMode::kEval, &attach);
  for (std::size_t i = 0; i < static_cast<std::size_t>(plain.logits.numel()); ++i)
    REQUIRE_THAT(buffered.logits[i], Catch::Matchers::WithinAbs(plain.logits[i], 1e-12));
}

TEST_CASE("hand-computed forward on a paper-sized example") {
  NetConfig cfg;
  cfg.image_hw = 2;
  cfg.in_channels = 1;
  cfg.classes = 2;
  cfg.stage_widths = {1};
  cfg.blocks_per_stage = 1;
  ToyNet net = make_toynet(cfg, 0);
  // identity kernels everywhere; BN eval with mean 0, var 1
  set_center_identity(net.stem.w);
  set_center_identity(net.stages[0][0].a.w);
  set_center_identity(net.stages[0][0].b.w);
  auto hw = net.head_w.mutable_data();
  hw[0] = 1.0;
  hw[1] = -1.0;
  auto hb = net.head_b.mutable_data();
  hb[0] = 0.1;
  hb[1] = -0.1;

  Tensor x = Tensor::from_data({1, 1, 2, 2}, {0.5, 1.0, 1.5, 2.0});
  ForwardOut fo = forward_with_taps(net, x, BnMode::kEval);

  // By hand: BN divides by s = sqrt(1 + eps) three times; all values stay
  // positive so relu is transparent; block output = x/s + x/s^3; GAP; head.
  const double s = std::sqrt(1.0 + cfg.bn_eps);
  const double mean_x = (0.5 + 1.0 + 1.5 + 2.0) / 4.0;
  const double gap = mean_x / s * (1.0 + 1.0 / (s * s));
  CHECK_THAT(fo.logits[0], Catch::Matchers::WithinAbs(gap + 0.1, 1e-12));
  CHECK_THAT(fo.logits[1], Catch::Matchers::WithinAbs(-gap - 0.1, 1e-12));
}

TEST_CASE("roi_crop") {
  SECTION("full-map box at native size is the identity") {
    Rng rng(5);
    std::vector<double> d(2 * 5 * 5);
    for (auto& v : d) v = rng.normal();
    Tensor feat = Tensor::from_data({1, 2, 5, 5}, d);
    auto out = roi_crop(feat, {{{0, 0, 4, 4}}}, 5, 5);
    REQUIRE(out.features.shape() == (Shape{1, 2, 5, 5}));
    for (std::size_t i = 0; i < d.size(); ++i)
      REQUIRE_THAT(out.features[i], Catch::Matchers::WithinAbs(d[i], 1e-12));
  }
  SECTION("constant features crop to the same constant") {
    Tensor feat = Tensor::full({1, 3, 6, 6}, 0.77);
    auto out = roi_crop(feat, {{{1.3, 2.1, 4.9, 5.0}}}, 4, 4);
    for (std::size_t i = 0; i < static_cast<std::size_t>(out.features.numel()); ++i)
      CHECK_THAT(out.features[i], Catch::Matchers::WithinAbs(0.77, 1e-12));
  }
  SECTION("linear ramp matches the bilinear formula") {
    // bilinear interpolation reproduces linear functions exactly
    const int h = 8, w = 8;
    std::vector<double> d(static_cast<std::size_t>(h) * w);
    auto f = [](double y, double x) { return 2.0 + 0.5 * y - 0.25 * x; };
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) d[static_cast<std::size_t>(y) * w + x] = f(y, x);
    Tensor feat = Tensor::from_data({1, 1, h, w}, d);
    Box box{1.0, 2.0, 4.0, 6.0};  // half-size box
    const int oh = 4, ow = 4;
    auto out = roi_crop(feat, {{box}}, oh, ow);
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const double sy = box.y0 + (box.y1 - box.y0) * oy / (oh - 1);
        const double sx = box.x0 + (box.x1 - box.x0) * ox / (ow - 1);
        CHECK_THAT(out.features[static_cast<std::size_t>(oy) * ow + ox],
                   Catch::Matchers::WithinAbs(f(sy, sx), 1e-12));
      }
  }
  SECTION("degenerate boxes are skipped with a counter") {
    Tensor feat = Tensor::full({1, 1, 4, 4}, 1.0);
    auto out = roi_crop(feat, {{{2, 2, 2, 3}, {1, 1, 3, 3}}}, 2, 2);
    CHECK(out.skipped == 1);
    CHECK(out.features.shape()[0] == 1);
  }
}

TEST_CASE("train_source") {
  NetConfig cfg = tiny_config();
  ToyDataset train = gen_dataset(64, 10, tiny_gen());

  SECTION("0 epochs leaves the net unchanged") {
    ToyNet net = make_toynet(cfg, 5);
    const std::uint64_t before = net.weights_hash();
    train_source(net, train, 0, 0.05, 16, 1);
    CHECK(net.weights_hash() == before);
  }
  SECTION("fixed seed is bit-deterministic") {
    ToyNet a = make_toynet(cfg, 5);
    ToyNet b = make_toynet(cfg, 5);
    train_source(a, train, 2, 0.05, 16, 1);
    train_source(b, train, 2, 0.05, 16, 1);
    CHECK(a.weights_hash() == b.weights_hash());
  }
  SECTION("training reduces loss and lifts accuracy above chance") {
    ToyNet net = make_toynet(cfg, 5);
    const double acc0 = classify_accuracy(net, train);
    train_source(net, train, 10, 0.05, 16, 1);
    const double acc1 = classify_accuracy(net, train);
    CHECK(acc1 > acc0);
    CHECK(acc1 > 0.5);
  }
}

TEST_CASE("precompute_stats") {
  NetConfig cfg = tiny_config();
  ToyNet net = make_toynet(cfg, 7);

  SECTION("single-image dataset: image mean equals that image's tap") {
    ToyDataset one = gen_dataset(1, 3, tiny_gen());
    SourceStats st = precompute_stats(net, one);
    Batch batch = make_batch(one, {0});
    ForwardOut fo = forward_with_taps(net, batch.images, BnMode::kEval);
    for (std::size_t l = 0; l < st.layers.size(); ++l) {
      REQUIRE(st.layers[l].img_mean.numel() == fo.taps[l].numel());
      for (std::size_t i = 0; i < static_cast<std::size_t>(fo.taps[l].numel()); ++i)
        REQUIRE(st.layers[l].img_mean[i] == fo.taps[l][i]);
    }
  }
  SECTION("duplicated images give the single-image stats") {
    ToyDataset one = gen_dataset(1, 3, tiny_gen());
    ToyDataset two = one;
    two.images.push_back(one.images[0]);
    SourceStats sa = precompute_stats(net, one);
    SourceStats sb = precompute_stats(net, two);
    for (std::size_t l = 0; l < sa.layers.size(); ++l) {
      for (std::size_t i = 0; i < static_cast<std::size_t>(sa.layers[l].img_mean.numel()); ++i)
        REQUIRE_THAT(sb.layers[l].img_mean[i],
                     Catch::Matchers::WithinAbs(sa.layers[l].img_mean[i], 1e-12));
      for (std::size_t c = 0; c < static_cast<std::size_t>(sa.layers[l].mu.numel()); ++c) {
        REQUIRE_THAT(sb.layers[l].mu[c], Catch::Matchers::WithinAbs(sa.layers[l].mu[c], 1e-12));
        REQUIRE_THAT(sb.layers[l].sigma[c],
                     Catch::Matchers::WithinAbs(sa.layers[l].sigma[c], 1e-12));
      }
    }
  }
  SECTION("streaming matches a two-pass store-all oracle") {
    ToyDataset ds = gen_dataset(10, 13, tiny_gen());
    SourceStats st = precompute_stats(net, ds, 4, 4, 3);  // odd batch to stress streaming

    // two-pass oracle: collect every tap value, then average
    const auto layers = net.bn_layers();
    std::vector<std::vector<std::vector<double>>> all(layers.size());  // layer -> taps
    for (std::size_t i = 0; i < ds.images.size(); ++i) {
      Batch b = make_batch(ds, {i});
      ForwardOut fo = forward_with_taps(net, b.images, BnMode::kEval);
      for (std::size_t l = 0; l < layers.size(); ++l)
        all[l].push_back({fo.taps[l].data().begin(), fo.taps[l].data().end()});
    }
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::size_t numel = all[l][0].size();
      const int c = st.layers[l].mu.shape()[0];
      const std::size_t hw = numel / static_cast<std::size_t>(c);
      // image mean
      for (std::size_t i = 0; i < numel; ++i) {
        double acc = 0.0;
        for (const auto& tap : all[l]) acc += tap[i];
        REQUIRE_THAT(st.layers[l].img_mean[i],
                     Catch::Matchers::WithinAbs(acc / 10.0, 1e-10));
      }
      // per-channel mean and std
      for (int ic = 0; ic < c; ++ic) {
        std::vector<double> vals;
        for (const auto& tap : all[l])
          for (std::size_t i = 0; i < hw; ++i)
            vals.push_back(tap[static_cast<std::size_t>(ic) * hw + i]);
        double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        var /= vals.size();
        REQUIRE_THAT(st.layers[l].mu[static_cast<std::size_t>(ic)],
                     Catch::Matchers::WithinAbs(mean, 1e-10));
        REQUIRE_THAT(st.layers[l].sigma[static_cast<std::size_t>(ic)],
                     Catch::Matchers::WithinAbs(std::sqrt(var), 1e-10));
      }
    }
  }
  SECTION("empty dataset rejected") {
    ToyDataset empty;
    CHECK_THROWS_AS(precompute_stats(net, empty), ConfigError);
  }
  SECTION("sigma is nonnegative and shapes match the live net") {
    ToyDataset ds = gen_dataset(8, 17, tiny_gen());
    SourceStats st = precompute_stats(net, ds);
    Batch b = make_batch(ds, {0, 1});
    ForwardOut fo = forward_with_taps(net, b.images, BnMode::kEval);
    for (std::size_t l = 0; l < st.layers.size(); ++l) {
      CHECK(st.layers[l].img_mean.shape() ==
            (Shape{fo.taps[l].shape()[1], fo.taps[l].shape()[2], fo.taps[l].shape()[3]}));
      for (double v : st.layers[l].sigma.data()) CHECK(v >= 0.0);
    }
  }
}

TEST_CASE("source stats round-trip bit-exactly") {
  NetConfig cfg = tiny_config();
  ToyNet net = make_toynet(cfg, 7);
  ToyDataset ds = gen_dataset(8, 17, tiny_gen());
  SourceStats st = precompute_stats(net, ds);
  const std::string path = "/tmp/cdbuf_test_stats.cdstats";
  save_stats(path, st);
  SourceStats back = load_stats(path);
  REQUIRE(back.layers.size() == st.layers.size());
  CHECK(back.net_hash == st.net_hash);
  CHECK(back.n_images == st.n_images);
  CHECK(back.n_instances == st.n_instances);
  for (std::size_t l = 0; l < st.layers.size(); ++l) {
    CHECK(back.layers[l].name == st.layers[l].name);
    for (std::size_t i = 0; i < static_cast<std::size_t>(st.layers[l].img_mean.numel()); ++i)
      REQUIRE(back.layers[l].img_mean[i] == st.layers[l].img_mean[i]);
    for (std::size_t i = 0; i < static_cast<std::size_t>(st.layers[l].sigma.numel()); ++i)
      REQUIRE(back.layers[l].sigma[i] == st.layers[l].sigma[i]);
  }
}
