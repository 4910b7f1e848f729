#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "panokit/loss.hpp"
#include "panokit/model.hpp"

using namespace panokit;

namespace {

ModelConfig small_config(HorizontalPad pad = HorizontalPad::Wrap) {
  ModelConfig c;
  c.decoder.d_feat = 16;
  c.decoder.d_p = 8;
  c.decoder.c_s = 8;
  c.decoder.c_d = 4;
  c.enc_c1 = 4;
  c.lsmm.d_m = 8;
  c.padding = pad;
  c.init_seed = 3;
  return c;
}

struct DecodeInputs {
  Tensord f_mem, prev, f_s, f_d;
};

DecodeInputs random_inputs(Rng& rng, const DecoderConfig& c, std::size_t h, std::size_t w) {
  return {oracle::random_tensor(rng, {c.d_feat, h, w}), oracle::random_tensor(rng, {16 * h, 16 * w}, 0.0, 1.0),
          oracle::random_tensor(rng, {c.c_s, 2 * h, 2 * w}), oracle::random_tensor(rng, {c.c_d, 4 * h, 4 * w})};
}

DecoderOutput<double> run(const DecodeInputs& in, const DecoderParams<double>& p) {
  return decode(constant(in.f_mem), constant(in.prev), constant(in.f_s), constant(in.f_d), p);
}

// Non-zero biases so that zero-input probes are not trivially zero.
void randomize_biases(ParamStore<double>& store, Rng& rng) {
  for (auto& [name, v] : store.items())
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0)
      for (auto& x : v.mutable_value().storage()) x = rng.uniform(-0.2, 0.2);
}

}  // namespace

TEST(PcBlock, ZeroInZeroOut) {
  Rng rng(1);
  ParamStore<double> store;
  const PcBlockParams<double> p(store, "pc", 6, rng);
  const Tensord y = pc_block(constant(Tensord({6, 4, 8})), p).value();
  for (double v : y.storage()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(pc_block(constant(Tensord({5, 4, 8})), p), DimensionError);
}

TEST(PcBlock, CyclicShiftEquivariance) {
  Rng rng(2);
  ParamStore<double> store;
  const PcBlockParams<double> p(store, "pc", 4, rng);
  randomize_biases(store, rng);
  const Tensord x = oracle::random_tensor(rng, {4, 6, 16});
  const Tensord y = pc_block(constant(x), p).value();
  for (int t = 0; t < 20; ++t) {
    const long s = 1 + static_cast<long>(rng.index(15));
    EXPECT_LE(max_abs_diff(pc_block(constant(roll_columns(x, s)), p).value(), roll_columns(y, s)), 1e-9);
  }
}

TEST(PcBlock, FirstColumnSeesLastColumnOnlyWhenWrapping) {
  Rng rng(3);
  ParamStore<double> store;
  const PcBlockParams<double> p(store, "pc", 3, rng);
  const Tensord x = oracle::random_tensor(rng, {3, 5, 12});
  Tensord x2 = x;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < 5; ++i) x2.at(c, i, 11) += 1.0;
  auto col0_change = [&](HorizontalPad mode) {
    const Tensord a = pc_block(constant(x), p, mode).value(), b = pc_block(constant(x2), p, mode).value();
    double d = 0.0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < 5; ++i) d = std::max(d, std::abs(a.at(c, i, 0) - b.at(c, i, 0)));
    return d;
  };
  EXPECT_GT(col0_change(HorizontalPad::Wrap), 1e-6);
  EXPECT_EQ(col0_change(HorizontalPad::Zero), 0.0);
}

TEST(DownsampleMask, ShapesAndZeroMask) {
  Rng rng(4);
  ParamStore<double> store;
  const MaskDownsampler<double> ds(store, "md", 12, rng);
  const Tensord z = downsample_mask(constant(Tensord({32, 64})), ds).value();
  EXPECT_EQ(z.shape(), (Shape{12, 2, 4}));
  for (double v : z.storage()) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(downsample_mask(constant(Tensord({24, 64})), ds), DimensionError);
  EXPECT_THROW(downsample_mask(constant(Tensord({32, 40})), ds), DimensionError);
}

TEST(DownsampleMask, OnesAndZerosDistinguishable) {
  Rng rng(5);
  ParamStore<double> store;
  const MaskDownsampler<double> ds(store, "md", 8, rng);
  randomize_biases(store, rng);
  const Tensord a = downsample_mask(constant(Tensord({32, 64}, 1.0)), ds).value();
  const Tensord b = downsample_mask(constant(Tensord({32, 64}, 0.0)), ds).value();
  double gap = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) gap += (a[k] - b[k]) * (a[k] - b[k]);
  EXPECT_GT(std::sqrt(gap), 1e-3);
}

TEST(FusePrevMask, NoMaskEmbeddingKeepsShape) {
  Model<double> m(small_config());
  Rng rng(6);
  const Tensord f = oracle::random_tensor(rng, {16, 2, 4});
  const Tensord a = fuse_prev_mask(constant(f), Var<double>(), m.decoder()).value();
  EXPECT_EQ(a.shape(), (Shape{16, 2, 4}));
  EXPECT_EQ(a, fuse_prev_mask(constant(f), Var<double>(), m.decoder()).value());
  const Tensord b = fuse_prev_mask(constant(f), constant(Tensord({32, 64}, 1.0)), m.decoder()).value();
  EXPECT_EQ(b.shape(), a.shape());
  EXPECT_GT(max_abs_diff(a, b), 0.0);
  EXPECT_THROW(fuse_prev_mask(constant(f), constant(Tensord({64, 128})), m.decoder()), DimensionError);
}

TEST(FusePrevMask, AblationIgnoresPreviousMask) {
  ModelConfig c = small_config();
  c.decoder.fuse_prev_mask = false;
  Model<double> m(c);
  Rng rng(7);
  const Tensord f = oracle::random_tensor(rng, {16, 2, 4});
  const Tensord a = fuse_prev_mask(constant(f), constant(Tensord({32, 64}, 1.0)), m.decoder()).value();
  EXPECT_EQ(a, fuse_prev_mask(constant(f), Var<double>(), m.decoder()).value());
  EXPECT_EQ(a, pc_block(constant(f), m.decoder().pc_mem).value());
}

TEST(Decode, OutputShapes) {
  Model<double> m(small_config());
  Rng rng(8);
  const DecoderOutput<double> out = run(random_inputs(rng, m.decoder().cfg, 2, 4), m.decoder());
  EXPECT_EQ(out.y_sam.shape(), (Shape{3, 32, 64}));
  EXPECT_EQ(out.u.shape(), (Shape{3}));
  EXPECT_EQ(out.o.shape(), (Shape{1}));
  EXPECT_EQ(out.p.shape(), (Shape{8}));
  for (std::size_t k = 0; k < 3; ++k) {
    EXPECT_GE(out.u.value()[k], 0.0);
    EXPECT_LE(out.u.value()[k], 1.0);
  }
  DecodeInputs bad = random_inputs(rng, m.decoder().cfg, 2, 4);
  bad.f_d = Tensord({4, 4, 16});
  EXPECT_THROW(run(bad, m.decoder()), DimensionError);
}

TEST(Decode, Deterministic) {
  Model<double> m(small_config());
  Rng rng(9);
  const DecodeInputs in = random_inputs(rng, m.decoder().cfg, 2, 4);
  const DecoderOutput<double> a = run(in, m.decoder()), b = run(in, m.decoder());
  EXPECT_EQ(a.y_sam.value(), b.y_sam.value());
  EXPECT_EQ(a.u.value(), b.u.value());
  EXPECT_EQ(a.o.value(), b.o.value());
  EXPECT_EQ(a.p.value(), b.p.value());
}

TEST(Decode, CyclicShiftEquivariance) {
  Model<double> m(small_config());
  Rng rng(11);
  randomize_biases(m.params(), rng);
  const std::size_t h = 2, w = 8;
  const DecodeInputs in = random_inputs(rng, m.decoder().cfg, h, w);
  const DecoderOutput<double> base = run(in, m.decoder());
  for (int t = 0; t < 20; ++t) {
    const long k = 1 + static_cast<long>(rng.index(w - 1));  // shift in stride-16 cells
    const DecodeInputs sh{roll_columns(in.f_mem, k), roll_columns(in.prev, 16 * k), roll_columns(in.f_s, 2 * k),
                          roll_columns(in.f_d, 4 * k)};
    const DecoderOutput<double> out = run(sh, m.decoder());
    EXPECT_LE(max_abs_diff(out.y_sam.value(), roll_columns(base.y_sam.value(), 16 * k)), 1e-6);
    EXPECT_LE(max_abs_diff(out.u.value(), base.u.value()), 1e-6);
    EXPECT_LE(max_abs_diff(out.o.value(), base.o.value()), 1e-6);
  }
}

TEST(Decode, ZeroPadBreaksShiftEquivariance) {
  Model<double> m(small_config(HorizontalPad::Zero));
  Rng rng(12);
  const DecodeInputs in = random_inputs(rng, m.decoder().cfg, 2, 8);
  const DecoderOutput<double> base = run(in, m.decoder());
  const DecodeInputs sh{roll_columns(in.f_mem, 3), roll_columns(in.prev, 48), roll_columns(in.f_s, 6),
                        roll_columns(in.f_d, 12)};
  EXPECT_GT(max_abs_diff(run(sh, m.decoder()).y_sam.value(), roll_columns(base.y_sam.value(), 48)), 1e-6);
}

TEST(SelectBestMask, ArgmaxAndTies) {
  auto u = [](double a, double b, double c) { return Tensord({3}, std::vector<double>{a, b, c}); };
  EXPECT_EQ(best_mask_index(u(0.1, 0.9, 0.3)), 1u);
  EXPECT_EQ(best_mask_index(u(0.5, 0.5, 0.2)), 0u);
  EXPECT_EQ(best_mask_index(u(0.2, 0.7, 0.7)), 1u);
  Rng rng(13);
  for (int t = 0; t < 50; ++t) {
    const Tensord v = oracle::random_tensor(rng, {3}, 0, 1);
    Tensord r = v;
    for (auto& x : r.storage()) x = std::exp(3.0 * x) - 7.0;
    EXPECT_EQ(best_mask_index(v), best_mask_index(r));
  }
  DecoderOutput<double> out;
  out.y_sam = constant(oracle::random_tensor(rng, {3, 4, 8}));
  out.u = constant(u(0.1, 0.2, 0.8));
  const auto [logits, k] = select_best_mask(out);
  EXPECT_EQ(k, 2u);
  for (std::size_t q = 0; q < 32; ++q) EXPECT_EQ(logits.value()[q], out.y_sam.value()[64 + q]);
}

TEST(Decode, LossGradientsReachEveryDecoderParameter) {
  Model<double> m(small_config());
  Rng rng(14);
  std::set<std::size_t> selected;
  m.params().zero_grad();
  // Accumulate over a few random frames until each mask token has been selected once.
  for (int t = 0; t < 60 && selected.size() < 3; ++t) {
    const DecodeInputs in = random_inputs(rng, m.decoder().cfg, 2, 4);
    const Var<double> f_mem(in.f_mem), prev(in.prev), f_s(in.f_s), f_d(in.f_d);
    const DecoderOutput<double> out = decode(f_mem, t % 2 ? prev : Var<double>(), f_s, f_d, m.decoder());
    const BinaryMask gt = oracle::random_mask(rng, 32, 64, 0.2);
    const auto r = total_loss(out, gt, rng.uniform() < 0.5, Tensord({32, 64}, 1.0), LossWeights{});
    backward(add(r.total, scale(sum(out.p), 1.0)));  // the pointer is consumed by memory downstream
    selected.insert(r.selected);
    // Steer the IoU head bias toward masks not chosen yet; gradients keep accumulating.
    Var<double> iou_bias = m.params().at("dec.iou_head.1.bias");
    for (std::size_t k = 0; k < 3; ++k) iou_bias.mutable_value()[k] = selected.count(k) ? -5.0 : 5.0;
  }
  ASSERT_EQ(selected.size(), 3u);
  for (const auto& [name, v] : m.params().items()) {
    if (name.rfind("dec.", 0) != 0 && name.rfind("mask_down.", 0) != 0) continue;
    double g = 0.0;
    if (v.has_grad())
      for (double x : v.grad().storage()) g += std::abs(x);
    EXPECT_GT(g, 0.0) << name;
  }
}
