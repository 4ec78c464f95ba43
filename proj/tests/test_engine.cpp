#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <numeric>

#include "cdbuf/engine.hpp"
#include "cdbuf/runner.hpp"

using namespace cdbuf;

namespace {

struct Fixture {
  ToyNet net;
  SourceStats stats;
  ToyDataset train;
  GenParams gp;
  NetConfig cfg;
};

// Small trained-ish source setup shared by the engine tests.
Fixture make_fixture(std::uint64_t seed, std::vector<int> widths = {4, 8}, int hw = 8,
                     int train_n = 48, int epochs = 3) {
  Fixture fx;
  fx.cfg.image_hw = hw;
  fx.cfg.classes = 4;
  fx.cfg.stage_widths = std::move(widths);
  fx.cfg.blocks_per_stage = 1;
  fx.gp.image_hw = hw;
  fx.train = gen_dataset(train_n, mix_seed(seed, 1), fx.gp);
  fx.net = make_toynet(fx.cfg, mix_seed(seed, 2));
  train_source(fx.net, fx.train, epochs, 0.05, 16, mix_seed(seed, 3));
  fx.stats = precompute_stats(fx.net, fx.train);
  return fx;
}

Hyper test_hyper() {
  Hyper h;
  h.lr = 0.005;
  h.batch = 8;
  return h;
}

Batch batch_of(const ToyDataset& ds, std::size_t start, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), start);
  return make_batch(ds, idx);
}

std::uint64_t state_hash(AdaptState& st) {
  std::uint64_t h = st.net.weights_hash();
  for (const auto& s : st.masks.scores) h = fnv1a_doubles(s.data(), h);
  for (const auto& a : st.adapters) {
    h = fnv1a_doubles(a.w1x1.data(), h);
    h = fnv1a_doubles(a.w3x3.data(), h);
    h = fnv1a_doubles(a.alpha.data(), h);
  }
  return h;
}

}  // namespace

TEST_CASE("align_loss") {
  Fixture fx = make_fixture(10);
  Batch batch = batch_of(fx.train, 0, fx.train.images.size());

  SECTION("batch matching the source statistics scores ~0") {
    // stats were computed over exactly these images
    ForwardOut fo = forward_with_taps(fx.net, batch.images, BnMode::kEval);
    CHECK_THAT(align_loss(fo.taps, fx.stats).value(), Catch::Matchers::WithinAbs(0.0, 1e-9));
  }
  SECTION("unit mean offset on one layer gives loss 1") {
    ForwardOut fo = forward_with_taps(fx.net, batch.images, BnMode::kEval);
    SourceStats one;
    LayerStats ls;
    Tensor mu = channel_mean(fo.taps[0]);
    Tensor centered = add_cw(fo.taps[0], scale(mu, -1.0));
    Tensor sigma = sqrt_t(channel_mean(mul(centered, centered)));
    ls.mu = add_scalar(stop_gradient(mu), -1.0);  // target mean sits 1 above source
    ls.sigma = stop_gradient(sigma);
    one.layers.push_back(std::move(ls));
    std::vector<Tensor> taps = {fo.taps[0]};
    CHECK_THAT(align_loss(taps, one).value(), Catch::Matchers::WithinAbs(1.0, 1e-9));
  }
  SECTION("layer count mismatch is a configuration error") {
    ForwardOut fo = forward_with_taps(fx.net, batch.images, BnMode::kEval);
    std::vector<Tensor> taps = {fo.taps[0]};
    CHECK_THROWS_AS(align_loss(taps, fx.stats), ConfigError);
  }
}

TEST_CASE("total_loss arithmetic") {
  CHECK_THAT(total_loss(Tensor::scalar(1.0), Tensor::scalar(2.0), 0.05).value(),
             Catch::Matchers::WithinAbs(1.1, 1e-15));
  CHECK(total_loss(Tensor::scalar(3.25), Tensor::scalar(9.0), 0.0).value() == 3.25);
}

TEST_CASE("scale_adapter_grads") {
  Fixture fx = make_fixture(11);
  AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 5);
  auto seed_grads = [&] {
    for (auto& a : st.adapters)
      for (auto& p : a.parameters()) {
        p.node()->grad.assign(p.node()->data.size(), 1.0);
      }
  };
  const auto nlayers = st.net.bn_layers().size();

  SECTION("uniform discrepancy leaves gradients unchanged") {
    seed_grads();
    StepContext ctx;
    ctx.d_layer.assign(nlayers, 0.7);
    auto g = scale_adapter_grads(st, ctx);
    for (double v : g) CHECK(v == 1.0);
    for (auto& a : st.adapters)
      for (double v : a.alpha.grad()) CHECK(v == 1.0);
  }
  SECTION("a block at twice the mean hits the clamp boundary") {
    seed_grads();
    StepContext ctx;
    ctx.d_layer.assign(nlayers, 0.0);
    auto block_bn = st.block_last_bn_index();
    // two blocks: block 0 layers at 2x, block 1 at 0 => ratios {2, 0.5 clamp}
    ctx.d_layer[block_bn[0] - 1] = 2.0;
    ctx.d_layer[block_bn[0]] = 2.0;
    auto g = scale_adapter_grads(st, ctx);
    CHECK(g[0] == 2.0);
    CHECK(g[1] == 0.5);
    for (double v : st.adapters[0].alpha.grad()) CHECK(v == 2.0);
    for (double v : st.adapters[1].alpha.grad()) CHECK(v == 0.5);
  }
  SECTION("all-zero discrepancy skips scaling") {
    seed_grads();
    StepContext ctx;
    ctx.d_layer.assign(nlayers, 0.0);
    auto g = scale_adapter_grads(st, ctx);
    for (double v : g) CHECK(v == 1.0);
  }
}

TEST_CASE("adapt_step basics") {
  Fixture fx = make_fixture(12);
  ToyDataset target = corrupt_dataset(fx.train, {CorruptionKind::kHazeMix, 0.6, 99});

  SECTION("frozen step: lr=0, lambda_reg=0, r=0 leaves parameters unchanged") {
    Hyper h = test_hyper();
    h.lr = 0.0;
    h.lambda_reg = 0.0;
    h.react_p = 0.0;
    AdaptState st = make_adapt_state(fx.net, h, Switches{}, {}, 7);
    const std::uint64_t before = state_hash(st);
    StepReport rep = adapt_step(st, batch_of(target, 0, 8), fx.stats);
    CHECK(state_hash(st) == before);
    CHECK(rep.loss_total > 0.0);
    CHECK(rep.loss_align > 0.0);
  }
  SECTION("loss composition is exact") {
    AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 7);
    for (int i = 0; i < 5; ++i) {
      StepReport rep = adapt_step(st, batch_of(target, static_cast<std::size_t>(i) * 8, 8),
                                  fx.stats);
      CHECK_THAT(rep.loss_total - (rep.loss_align + st.hyper.lambda_reg * rep.loss_mask),
                 Catch::Matchers::WithinAbs(0.0, 1e-12));
    }
  }
  SECTION("backbone conv weights and head stay bit-identical") {
    AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 7);
    std::vector<std::vector<double>> before;
    for (auto& p : st.net.backbone_params())
      before.emplace_back(p.data().begin(), p.data().end());
    for (int i = 0; i < 10; ++i)
      adapt_step(st, batch_of(target, static_cast<std::size_t>(i) * 4, 8), fx.stats);
    auto params = st.net.backbone_params();
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto now = params[i].data();
      REQUIRE(std::equal(now.begin(), now.end(), before[i].begin()));
    }
    // but the adaptive groups moved
    bool moved = false;
    for (const ConvBn* cb : st.net.bn_layers())
      for (double v : cb->beta.data()) moved = moved || v != 0.0;
    CHECK(moved);
  }
  SECTION("fixed seed gives a bit-identical report sequence") {
    auto run = [&] {
      AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 7);
      std::vector<StepReport> reps;
      for (int i = 0; i < 6; ++i)
        reps.push_back(adapt_step(st, batch_of(target, static_cast<std::size_t>(i) * 8, 8),
                                  fx.stats));
      return reps;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].loss_total == b[i].loss_total);
      CHECK(a[i].suppressed == b[i].suppressed);
      CHECK(a[i].reactivated == b[i].reactivated);
      CHECK(a[i].d_layer == b[i].d_layer);
    }
  }
  SECTION("reactivation happens strictly after the update") {
    // gradients come from the pre-reset scores, so the first step's losses
    // match an r=0 run exactly
    Hyper h1 = test_hyper();
    h1.react_p = 1.0;
    Hyper h0 = test_hyper();
    h0.react_p = 0.0;
    AdaptState s1 = make_adapt_state(fx.net, h1, Switches{}, {}, 7);
    AdaptState s0 = make_adapt_state(fx.net, h0, Switches{}, {}, 7);
    StepReport r1 = adapt_step(s1, batch_of(target, 0, 8), fx.stats);
    StepReport r0 = adapt_step(s0, batch_of(target, 0, 8), fx.stats);
    CHECK(r1.loss_total == r0.loss_total);
    CHECK(r1.suppressed == r0.suppressed);
    CHECK(r1.reactivated == r1.suppressed);  // r = 1 resets them all
    CHECK(r0.reactivated == 0);
  }
}

TEST_CASE("adapt_stream") {
  Fixture fx = make_fixture(13);
  SECTION("empty stream gives an empty report list") {
    AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 3);
    auto reps = adapt_stream(st, {}, nullptr, 0, fx.stats);
    CHECK(reps.empty());
  }
  SECTION("identical batches make the suppressed count stationary") {
    AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 3);
    ToyDataset target = corrupt_dataset(fx.train, {CorruptionKind::kGaussianNoise, 0.5, 5});
    Batch b = batch_of(target, 0, 8);
    std::vector<StreamItem> stream(60, StreamItem{b, 0});
    auto reps = adapt_stream(st, stream, nullptr, 0, fx.stats);
    for (std::size_t i = 51; i < reps.size(); ++i) {
      CHECK(std::abs(reps[i].suppressed - reps[i - 1].suppressed) <= 2);
    }
    // the pooled-percentile rule pins the count to floor(rho * total)
    int total_channels = 0;
    for (const ConvBn* cb : st.net.bn_layers()) total_channels += cb->gamma.shape()[0];
    const int expected = static_cast<int>(st.hyper.rho_target * total_channels);
    CHECK(reps.back().suppressed == expected);
  }
  SECTION("segments tag the reports in continual mode") {
    AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 3);
    ToyDataset t1 = corrupt_dataset(fx.train, {CorruptionKind::kHazeMix, 0.8, 5});
    ToyDataset t2 = corrupt_dataset(fx.train, {CorruptionKind::kHazeMix, 0.2, 6});
    std::vector<StreamItem> stream;
    stream.push_back({batch_of(t1, 0, 8), 0});
    stream.push_back({batch_of(t2, 0, 8), 1});
    stream.push_back({batch_of(t1, 8, 8), 2});
    auto reps = adapt_stream(st, stream, nullptr, 0, fx.stats);
    REQUIRE(reps.size() == 3);
    CHECK(reps[0].segment == 0);
    CHECK(reps[1].segment == 1);
    CHECK(reps[2].segment == 2);
  }
  SECTION("source stream does not run away") {
    // The quota keeps floor(rho*total) channels suppressed even in-domain,
    // so the loss fluctuates as the suppressed set rotates; small nets feel
    // each rotation strongly. This is a divergence smoke check here; the
    // tight 2x-of-initial bound runs at full network scale in the
    // acceptance suite.
    Fixture big = make_fixture(19, {4, 8}, 8, 128, 3);
    Hyper h = test_hyper();
    h.batch = 16;
    h.lr = 1e-3;
    AdaptState st = make_adapt_state(big.net, h, Switches{}, {}, 3);
    std::vector<StreamItem> stream;
    for (int i = 0; i < 100; ++i)
      stream.push_back({batch_of(big.train, (static_cast<std::size_t>(i) * 16) % 112, 16), 0});
    auto reps = adapt_stream(st, stream, nullptr, 0, big.stats);
    const double initial = reps.front().loss_align;
    for (const auto& r : reps) {
      REQUIRE(std::isfinite(r.loss_align));
      CHECK(r.loss_align <= 10.0 * initial + 1e-9);
    }
  }
}

TEST_CASE("gradient correctness of the full objective") {
  // Two-block net; masks and discrepancy frozen during the check so the loss
  // is a smooth deterministic function of the parameters. The straight-
  // through path is excluded (it is forward/backward inconsistent by design
  // and has its own analytic test); masks enter as constants.
  Fixture fx = make_fixture(15, {2, 4}, 8, 32, 2);
  AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 9);
  ToyDataset target = corrupt_dataset(fx.train, {CorruptionKind::kHazeMix, 0.7, 31});
  Batch batch = batch_of(target, 0, 4);

  StepContext frozen;
  prepare_masks(st, frozen);
  frozen.masks_const = true;
  {  // freeze the discrepancy measured on the initial forward
    StepContext probe = frozen;
    compute_adapt_loss(st, batch, fx.stats, probe, /*use_ctx_d=*/false);
    frozen.d = probe.d;
    frozen.d_layer = probe.d_layer;
  }
  // Precondition: the alignment residuals must sit away from their |.| kinks
  // at the finite-difference scale, or central differences measure the kink
  // instead of the slope. The fixture seed is chosen to satisfy this.
  {
    NoGradGuard ng;
    StepContext probe = frozen;
    LossOut lo = compute_adapt_loss(st, batch, fx.stats, probe, true);
    double min_resid = 1e9;
    for (std::size_t l = 0; l < lo.taps.size(); ++l) {
      Tensor mu = channel_mean(lo.taps[l]);
      Tensor c = add_cw(lo.taps[l], scale(mu, -1.0));
      Tensor sg = sqrt_t(channel_mean(mul(c, c)));
      for (int ch = 0; ch < mu.shape()[0]; ++ch) {
        min_resid = std::min(min_resid,
                             std::fabs(mu[static_cast<std::size_t>(ch)] -
                                       fx.stats.layers[l].mu[static_cast<std::size_t>(ch)]));
        min_resid = std::min(min_resid,
                             std::fabs(sg[static_cast<std::size_t>(ch)] -
                                       fx.stats.layers[l].sigma[static_cast<std::size_t>(ch)]));
      }
    }
    INFO("min alignment residual " << min_resid);
    REQUIRE(min_resid > 2e-5);
  }
  auto params = adapt_params(st);
  auto f = [&] {
    StepContext ctx = frozen;
    return compute_adapt_loss(st, batch, fx.stats, ctx, /*use_ctx_d=*/true).total;
  };
  const double err = grad_check(f, params, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("monotone suppression pressure on the max-discrepancy channel") {
  Fixture fx = make_fixture(15);
  Hyper h = test_hyper();
  h.react_p = 0.0;
  h.lr = 0.02;
  AdaptState st = make_adapt_state(fx.net, h, Switches{}, {}, 21);
  ToyDataset target = corrupt_dataset(fx.train, {CorruptionKind::kGaussianNoise, 0.6, 77});

  // inject synthetic discrepancy: channel 2 of layer 1 dominates by far
  const double kBigD = 500.0;
  const auto layers = st.net.bn_layers();
  std::vector<std::vector<double>> d(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l)
    d[l].assign(static_cast<std::size_t>(layers[l]->gamma.shape()[0]), 0.1);
  d[1][2] = kBigD;
  StepOverrides ov;
  ov.d_override = &d;

  const int total_channels = [&] {
    int t = 0;
    for (const ConvBn* cb : layers) t += cb->gamma.shape()[0];
    return t;
  }();
  const int quota = static_cast<int>(h.rho_target * total_channels);
  REQUIRE(quota >= 1);

  bool suppressed_seen = false;
  for (int step = 0; step < 150 && !suppressed_seen; ++step) {
    StepContext ctx;
    prepare_masks(st, ctx);
    LossOut lo = compute_adapt_loss(st, batch_of(target, 0, 8), fx.stats, ctx, false, &ov);
    auto params = adapt_params(st);
    for (auto& p : params) p.zero_grad();
    backward(lo.mask);
    const auto g = st.masks.scores[1].grad();
    REQUIRE(!g.empty());
    for (std::size_t c = 0; c < g.size(); ++c) {
      if (c == 2) continue;
      CHECK(std::fabs(g[2]) > std::fabs(g[c]));
    }
    // analytic oracle: D_c * sign(s_c) / C, averaged over L layers
    const double C = static_cast<double>(st.masks.scores[1].numel());
    const double L = static_cast<double>(layers.size());
    const double s2 = st.masks.scores[1][2];
    const double expect = kBigD * (s2 > 0 ? 1.0 : (s2 < 0 ? -1.0 : 0.0)) / C / L;
    CHECK_THAT(g[2], Catch::Matchers::WithinAbs(expect, 1e-12));
    // run the real step to move the scores
    adapt_step(st, batch_of(target, 0, 8), fx.stats, &ov);
    StepContext after;
    prepare_masks(st, after);
    if (!after.m_hard.empty() && after.m_hard[1][2] == 0.0) {
      suppressed_seen = true;
      CHECK(after.suppressed <= quota);
    }
  }
  CHECK(suppressed_seen);
}

TEST_CASE("evaluate is pure and deterministic") {
  Fixture fx = make_fixture(16);
  AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 2);
  ToyDataset target = corrupt_dataset(fx.train, {CorruptionKind::kBrightnessShift, 0.4, 3});
  const std::uint64_t before = state_hash(st);
  const double a1 = evaluate(st, target);
  const double a2 = evaluate(st, target);
  CHECK(a1 == a2);
  CHECK(state_hash(st) == before);
  CHECK(a1 >= 0.0);
  CHECK(a1 <= 1.0);
}

TEST_CASE("checkpoint round-trip") {
  Fixture fx = make_fixture(17);
  AdaptState st = make_adapt_state(fx.net, test_hyper(), Switches{}, {}, 4);
  ToyDataset target = corrupt_dataset(fx.train, {CorruptionKind::kHazeMix, 0.5, 9});
  for (int i = 0; i < 3; ++i)
    adapt_step(st, batch_of(target, static_cast<std::size_t>(i) * 8, 8), fx.stats);

  const std::string path = "/tmp/cdbuf_test.cdckpt";
  save_checkpoint(path, to_checkpoint(st));
  Checkpoint back = load_checkpoint(path);
  AdaptState resumed = resume_adapt_state(back, st.sw, st.stage_enable);

  CHECK(state_hash(resumed) == state_hash(st));
  CHECK(resumed.step_count == st.step_count);
  CHECK(resumed.rng.state() == st.rng.state());

  // byte-identical on re-save
  const std::string path2 = "/tmp/cdbuf_test2.cdckpt";
  save_checkpoint(path2, to_checkpoint(resumed));
  std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  // resumed state continues identically to the original
  StepReport ra = adapt_step(st, batch_of(target, 24, 8), fx.stats);
  StepReport rb = adapt_step(resumed, batch_of(target, 24, 8), fx.stats);
  CHECK(ra.loss_total == rb.loss_total);
  CHECK(ra.reactivated == rb.reactivated);
}

TEST_CASE("measure_discrepancy grows with severity") {
  Fixture fx = make_fixture(18);
  double prev = -1.0;
  for (double sev : {0.0, 0.5, 1.0}) {
    ToyDataset target = corrupt_dataset(fx.train, {CorruptionKind::kGaussianNoise, sev, 4});
    DiscrepancySummary d = measure_discrepancy(fx.net, fx.stats, target);
    REQUIRE(d.per_layer.size() == fx.net.bn_layers().size());
    CHECK(d.network_mean > prev);
    prev = d.network_mean;
  }
}
