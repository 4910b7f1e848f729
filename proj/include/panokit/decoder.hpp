#pragma once

// Pano-aware mask decoder.
//
// Memory-conditioned features pass through a seam-consistent PC block, are
// fused with the previous frame's mask, exchange information with five
// learned tokens over a few attention rounds, and are upsampled with
// PC-processed encoder skips. Three mask tokens produce mask logits by a dot
// product with the upsampled features; the IoU, occlusion and pointer heads
// read their own tokens.
//
// No positional encoding is applied to spatial features, so every stage is
// equivariant to horizontal cyclic shifts when padding wraps.

#include <string>

#include "panokit/decoder_output.hpp"
#include "panokit/nn.hpp"

namespace panokit {

struct DecoderConfig {
  std::size_t d_feat = 64;  ///< stride-16 feature channels
  std::size_t d_p = 64;     ///< object pointer size
  std::size_t c_s = 32;     ///< stride-8 skip channels
  std::size_t c_d = 16;     ///< stride-4 skip channels
  std::size_t attn_rounds = 2;
  HorizontalPad padding = HorizontalPad::Wrap;
  bool fuse_prev_mask = true;  ///< false reproduces the decoder without previous-mask cues

  static constexpr std::size_t kMaskTokens = 3;
  static constexpr std::size_t kTokens = kMaskTokens + 2;  // + IoU token + occlusion token

  void validate() const {
    if (d_feat == 0 || d_p == 0 || c_s == 0 || c_d == 0) throw ConfigError("decoder widths must be positive");
    if (attn_rounds < 1) throw ConfigError("attn_rounds must be >= 1");
  }
};

/// Three parallel convolutions (1x1, 3x3, 5x5) concatenated and fused by a 1x1 projection.
template <class T>
struct PcBlockParams {
  Conv<T> conv1, conv3, conv5, fuse;

  PcBlockParams() = default;
  PcBlockParams(ParamStore<T>& store, const std::string& name, std::size_t c, Rng& rng)
      : conv1(store, name + ".conv1", c, c, 1, rng),
        conv3(store, name + ".conv3", c, c, 3, rng),
        conv5(store, name + ".conv5", c, c, 5, rng),
        fuse(store, name + ".fuse", 3 * c, c, 1, rng, 1, 0.5) {}
};

/// out = fuse(relu(concat(conv1(f), conv3(f), conv5(f)))) + f
template <class T>
Var<T> pc_block(const Var<T>& f, const PcBlockParams<T>& p, HorizontalPad mode = HorizontalPad::Wrap) {
  require_rank(f.value(), 3, "pc_block");
  if (f.dim(0) != p.conv1.weight.dim(1)) throw DimensionError("pc_block: channel mismatch");
  const Var<T> branches = relu(concat<T>({p.conv1(f, mode), p.conv3(f, mode), p.conv5(f, mode)}, 0));
  return add(p.fuse(branches, mode), f);
}

/// Four stride-2 stages taking a [H,W] mask in [0,1] to [C_m, H/16, W/16].
template <class T>
struct MaskDownsampler {
  std::vector<Conv<T>> stages;

  MaskDownsampler() = default;
  MaskDownsampler(ParamStore<T>& store, const std::string& name, std::size_t out_channels, Rng& rng) {
    const std::size_t widths[5] = {1, 4, 8, 16, out_channels};
    for (std::size_t s = 0; s < 4; ++s)
      stages.emplace_back(store, name + "." + std::to_string(s), widths[s], widths[s + 1], 3, rng, 2,
                          s == 3 ? 1.0 : std::sqrt(2.0));
  }
  std::size_t out_channels() const { return stages.back().weight.dim(0); }
};

template <class T>
Var<T> downsample_mask(const Var<T>& mask, const MaskDownsampler<T>& ds, HorizontalPad mode = HorizontalPad::Wrap) {
  require_rank(mask.value(), 2, "downsample_mask");
  const std::size_t h = mask.dim(0), w = mask.dim(1);
  if (h % 16 || w % 16) throw DimensionError("downsample_mask: mask size must be divisible by 16");
  Var<T> x = reshape(mask, {1, h, w});
  for (std::size_t s = 0; s < ds.stages.size(); ++s) {
    x = ds.stages[s](x, mode);
    if (s + 1 < ds.stages.size()) x = relu(x);
  }
  return x;
}

template <class T>
struct DecoderParams {
  DecoderConfig cfg;
  PcBlockParams<T> pc_mem, pc_s, pc_d;
  MaskDownsampler<T> mask_down;  // handles shared with the memory encoder
  Var<T> no_mask_embed;                     // [d_feat]
  Conv<T> mask_fuse;
  Var<T> tokens;  // [kTokens, d_feat]
  struct Round {
    Attention<T> self_attn, token_to_image, image_to_token;
    Mlp<T> mlp;
  };
  std::vector<Round> rounds;
  Attention<T> final_token_to_image;
  Var<T> up1_w, up1_b, up2_w, up2_b;
  std::vector<Mlp<T>> hyper;
  Mlp<T> iou_head, ptr_head;
  Linear<T> occ_head;

  DecoderParams() = default;
  DecoderParams(ParamStore<T>& store, const DecoderConfig& c, const MaskDownsampler<T>& shared_down, Rng& rng)
      : cfg(c), mask_down(shared_down) {
    cfg.validate();
    const std::size_t d = cfg.d_feat;
    pc_mem = PcBlockParams<T>(store, "dec.pc_mem", d, rng);
    pc_s = PcBlockParams<T>(store, "dec.pc_s", cfg.c_s, rng);
    pc_d = PcBlockParams<T>(store, "dec.pc_d", cfg.c_d, rng);
    no_mask_embed = store.normal("dec.no_mask_embed", {d}, 0.02, rng);
    mask_fuse = Conv<T>(store, "dec.mask_fuse", 2 * d, d, 1, rng, 1, 1.0);
    tokens = store.normal("dec.tokens", {DecoderConfig::kTokens, d}, 1.0, rng);
    for (std::size_t r = 0; r < cfg.attn_rounds; ++r) {
      const std::string n = "dec.round" + std::to_string(r);
      rounds.push_back({Attention<T>(store, n + ".self", d, d, d, rng, 0.5),
                        Attention<T>(store, n + ".t2i", d, d, d, rng, 0.5),
                        Attention<T>(store, n + ".i2t", d, d, d, rng, 0.5),
                        Mlp<T>(store, n + ".mlp", d, 2 * d, d, rng, 0.5)});
    }
    final_token_to_image = Attention<T>(store, "dec.final_t2i", d, d, d, rng, 0.5);
    up1_w = store.normal("dec.up1.weight", {d, cfg.c_s, 2, 2}, 1.0 / std::sqrt(static_cast<double>(d)), rng);
    up1_b = store.filled("dec.up1.bias", {cfg.c_s}, 0.0);
    up2_w = store.normal("dec.up2.weight", {cfg.c_s, cfg.c_d, 2, 2}, 1.0 / std::sqrt(static_cast<double>(cfg.c_s)), rng);
    up2_b = store.filled("dec.up2.bias", {cfg.c_d}, 0.0);
    for (std::size_t k = 0; k < DecoderConfig::kMaskTokens; ++k)
      hyper.emplace_back(store, "dec.hyper" + std::to_string(k), d, d, cfg.c_d, rng);
    iou_head = Mlp<T>(store, "dec.iou_head", d, d, DecoderConfig::kMaskTokens, rng);
    ptr_head = Mlp<T>(store, "dec.ptr_head", d, d, cfg.d_p, rng);
    occ_head = Linear<T>(store, "dec.occ_head", d, 1, rng);
  }
};

/// concat(pc_block(f_mem), downsample_mask(prev or no-mask embedding)) -> 1x1 fuse.
/// `prev_mask` is a [H,W] mask in [0,1], or undefined on the first frame.
template <class T>
Var<T> fuse_prev_mask(const Var<T>& f_mem, const Var<T>& prev_mask, const DecoderParams<T>& p) {
  const HorizontalPad mode = p.cfg.padding;
  Var<T> x = pc_block(f_mem, p.pc_mem, mode);
  if (!p.cfg.fuse_prev_mask) return x;
  const std::size_t h = f_mem.dim(1), w = f_mem.dim(2);
  Var<T> m;
  if (prev_mask.defined()) {
    m = downsample_mask(prev_mask, p.mask_down, mode);
    if (m.dim(1) != h || m.dim(2) != w) throw DimensionError("fuse_prev_mask: downsampled mask does not match features");
  } else {
    m = tokens_to_map(broadcast_rows(p.no_mask_embed, h * w), h, w);
  }
  return p.mask_fuse(concat<T>({x, m}, 0), mode);
}

/// Decodes one frame. Feature strides: f_mem 16, f_s 8, f_d 4; output at full resolution.
template <class T>
DecoderOutput<T> decode(const Var<T>& f_mem, const Var<T>& prev_mask, const Var<T>& f_s, const Var<T>& f_d,
                        const DecoderParams<T>& p) {
  const auto& cfg = p.cfg;
  const HorizontalPad mode = cfg.padding;
  require_rank(f_mem.value(), 3, "decode f_mem");
  const std::size_t h = f_mem.dim(1), w = f_mem.dim(2);
  if (f_s.value().shape() != Shape{cfg.c_s, 2 * h, 2 * w} || f_d.value().shape() != Shape{cfg.c_d, 4 * h, 4 * w})
    throw DimensionError("decode: skip feature strides do not match f_mem");

  Var<T> img = map_to_tokens(fuse_prev_mask(f_mem, prev_mask, p));  // [hw, d]
  Var<T> tok = p.tokens;
  for (const auto& r : p.rounds) {
    tok = add(tok, r.self_attn(tok, tok));
    tok = add(tok, r.token_to_image(tok, img));
    tok = add(tok, r.mlp(tok));
    img = add(img, r.image_to_token(img, tok));
  }
  tok = add(tok, p.final_token_to_image(tok, img));

  Var<T> x = tokens_to_map(img, h, w);
  x = relu(add(conv_transpose2x2(x, p.up1_w, p.up1_b), pc_block(f_s, p.pc_s, mode)));
  x = relu(add(conv_transpose2x2(x, p.up2_w, p.up2_b), pc_block(f_d, p.pc_d, mode)));  // [c_d, 4h, 4w]

  std::vector<Var<T>> hyper_rows;
  for (std::size_t k = 0; k < DecoderConfig::kMaskTokens; ++k) hyper_rows.push_back(p.hyper[k](slice(tok, 0, k, k + 1)));
  const Var<T> hyper = concat(hyper_rows, 0);  // [3, c_d]
  const Var<T> flat = reshape(x, {cfg.c_d, 16 * h * w});
  // Dot-product heads commute with the (linear) x4 upsampling, so they run at stride 4.
  Var<T> low = reshape(matmul(hyper, flat), {DecoderConfig::kMaskTokens, 4 * h, 4 * w});

  DecoderOutput<T> out;
  out.y_sam = upsample_bilinear(low, 4, mode == HorizontalPad::Wrap);
  const std::size_t iou_tok = DecoderConfig::kMaskTokens, occ_tok = iou_tok + 1;
  out.u = reshape(sigmoid(p.iou_head(slice(tok, 0, iou_tok, iou_tok + 1))), {DecoderConfig::kMaskTokens});
  out.o = reshape(p.occ_head(slice(tok, 0, occ_tok, occ_tok + 1)), {1});
  out.p = reshape(p.ptr_head(slice(tok, 0, 0, 1)), {cfg.d_p});
  return out;
}

/// Logits [H,W] of the mask with the highest predicted IoU, and its index.
template <class T>
std::pair<Var<T>, std::size_t> select_best_mask(const DecoderOutput<T>& out) {
  const std::size_t k = best_mask_index(out.u.value());
  return {reshape(slice(out.y_sam, 0, k, k + 1), {out.y_sam.dim(1), out.y_sam.dim(2)}), k};
}

}  // namespace panokit
