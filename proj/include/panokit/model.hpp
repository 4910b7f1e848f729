#pragma once

// Toy tracker: a small strided-convolution encoder standing in for the image
// backbone, plus the decoder, memory encoder and memory module parameters.

#include <string>

#include "panokit/decoder.hpp"
#include "panokit/memory.hpp"

namespace panokit {

struct ModelConfig {
  DecoderConfig decoder;
  LsmmConfig lsmm;
  std::size_t enc_c1 = 16;  ///< first encoder stage width (stride 2)
  HorizontalPad padding = HorizontalPad::Wrap;  ///< applies to every convolution and upsampling in the model
  std::uint64_t init_seed = 1;

  void validate() const {
    decoder.validate();
    if (lsmm.d_m == 0) throw ConfigError("d_m must be positive");
    if (enc_c1 == 0) throw ConfigError("enc_c1 must be positive");
  }
};

template <class T>
struct EncoderFeatures {
  Var<T> feat;  ///< [d_feat, H/16, W/16]
  Var<T> f_s;   ///< [c_s, H/8, W/8]
  Var<T> f_d;   ///< [c_d, H/4, W/4]
};

template <class T>
struct EncoderParams {
  Conv<T> stem, down_d, down_s, down_f, out;

  EncoderParams() = default;
  EncoderParams(ParamStore<T>& store, const ModelConfig& c, Rng& rng)
      : stem(store, "enc.stem", 3, c.enc_c1, 3, rng, 2),
        down_d(store, "enc.down_d", c.enc_c1, c.decoder.c_d, 3, rng, 2),
        down_s(store, "enc.down_s", c.decoder.c_d, c.decoder.c_s, 3, rng, 2),
        down_f(store, "enc.down_f", c.decoder.c_s, c.decoder.d_feat, 3, rng, 2),
        out(store, "enc.out", c.decoder.d_feat, c.decoder.d_feat, 3, rng, 1, 1.0) {}
};

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    cfg_.decoder.padding = cfg_.padding;
    Rng rng(cfg_.init_seed);
    encoder_ = EncoderParams<T>(store_, cfg_, rng);
    mask_down_ = MaskDownsampler<T>(store_, "mask_down", cfg_.decoder.d_feat, rng);
    decoder_ = DecoderParams<T>(store_, cfg_.decoder, mask_down_, rng);
    memory_ = MemoryParams<T>(store_, cfg_.decoder.d_feat, cfg_.lsmm.d_m, cfg_.decoder.d_p, rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }
  const DecoderParams<T>& decoder() const { return decoder_; }
  const MemoryParams<T>& memory() const { return memory_; }
  const MaskDownsampler<T>& mask_downsampler() const { return mask_down_; }
  HorizontalPad padding() const { return cfg_.padding; }

  /// image [3,H,W] with H, W divisible by 16.
  EncoderFeatures<T> encode(const Var<T>& image) const {
    require_rank(image.value(), 3, "encode");
    if (image.dim(0) != 3 || image.dim(1) % 16 || image.dim(2) % 16)
      throw DimensionError("encode: expected [3,H,W] with H, W divisible by 16, got " + shape_str(image.shape()));
    const HorizontalPad m = cfg_.padding;
    EncoderFeatures<T> f;
    const Var<T> x = relu(encoder_.stem(image, m));
    f.f_d = relu(encoder_.down_d(x, m));
    f.f_s = relu(encoder_.down_s(f.f_d, m));
    f.feat = encoder_.out(relu(encoder_.down_f(f.f_s, m)), m);
    return f;
  }

  Var<T> encode_memory(const Var<T>& features, const Var<T>& mask) const {
    return memory_encode(features, mask, memory_, mask_down_, cfg_.padding);
  }

 private:
  ModelConfig cfg_;
  ParamStore<T> store_;
  EncoderParams<T> encoder_;
  MaskDownsampler<T> mask_down_;
  DecoderParams<T> decoder_;
  MemoryParams<T> memory_;
};

}  // namespace panokit
