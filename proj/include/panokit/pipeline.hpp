#pragma once

// Video object segmentation loop and toy training.
//
// Per frame: encode -> condition on memory (with long-term slots when the
// archive is populated) -> decode -> keep the mask with the highest predicted
// IoU -> encode it into memory -> insert into the bank. The prompt frame
// decodes with the prompt as its previous mask, and its memory is built
// from the prompt itself.

#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "panokit/config.hpp"
#include "panokit/loss.hpp"
#include "panokit/metrics.hpp"
#include "panokit/model.hpp"
#include "panokit/optim.hpp"
#include "panokit/scene.hpp"

namespace panokit {

template <class T>
struct StepResult {
  DecoderOutput<T> out;
  Var<T> logits;  ///< [H,W] logits of the selected mask
  std::size_t selected = 0;
  BinaryMask mask;
  std::vector<std::size_t> long_term_frames;
};

struct StepOptions {
  const BinaryMask* memory_mask = nullptr;  ///< encode this (e.g. ground truth) into memory instead of the prediction
  bool drop_prev_mask = false;              ///< decode with the no-mask embedding
};

template <class T>
class Tracker {
 public:
  Tracker(const Model<T>& model, std::size_t long_term, std::uint64_t seed)
      : model_(&model), long_term_(long_term), rng_(seed) {}

  std::size_t long_term() const { return long_term_; }
  void set_long_term(std::size_t L) { long_term_ = L; }
  const MemoryBank<T>& bank() const { return bank_; }
  MemoryBank<T>& bank() { return bank_; }
  Rng& rng() { return rng_; }
  const Rng& rng() const { return rng_; }
  std::size_t next_frame() const { return next_frame_; }
  const Var<T>& prev_mask() const { return prev_mask_; }

  /// Restores a paused run: bank and rng state, previous mask and next frame index.
  void resume(MemoryBank<T> bank, const Rng& rng, const Tensor<T>& prev_mask, std::size_t next_frame) {
    bank_ = std::move(bank);
    rng_ = rng;
    prev_mask_ = Var<T>(prev_mask);
    next_frame_ = next_frame;
  }

  StepResult<T> prompt(const Tensor<T>& image, const BinaryMask& mask) {
    if (!bank_.empty()) throw BankError("prompt: tracker already started");
    if (!mask.any()) throw EmptyMaskError("prompt: the first-frame mask is empty");
    check_grid(image, mask.height(), mask.width());
    const Var<T> m(mask.to_tensor<T>());
    const EncoderFeatures<T> f = model_->encode(Var<T>(image));
    const std::size_t h = f.feat.dim(1), w = f.feat.dim(2);
    const Var<T> f_mem = add(f.feat, tokens_to_map(broadcast_rows(model_->memory().no_mem_embed, h * w), h, w));
    StepResult<T> r;
    r.out = decode(f_mem, m, f.f_s, f.f_d, model_->decoder());
    std::tie(r.logits, r.selected) = select_best_mask(r.out);
    r.mask = mask;
    bank_insert(bank_, MemoryEntry<T>{next_frame_, model_->encode_memory(f.feat, m), r.out.p, obj_score(r.out)});
    prev_mask_ = m;
    ++next_frame_;
    return r;
  }

  StepResult<T> step(const Tensor<T>& image, const StepOptions& opt = {}) {
    if (bank_.empty()) throw BankError("step: call prompt first");
    const std::size_t H = prev_mask_.dim(0), W = prev_mask_.dim(1);
    check_grid(image, H, W);
    const EncoderFeatures<T> f = model_->encode(Var<T>(image));
    StepResult<T> r;
    auto lsmm = long_term_ > 0 ? lsmm_forward(bank_, long_term_, model_->memory().film, rng_) : std::nullopt;
    if (lsmm) r.long_term_frames = lsmm->frames;
    const ConditionedFeatures<T> c = condition_features(f.feat, bank_, lsmm, model_->memory());
    r.out = decode(c.f_mem, opt.drop_prev_mask ? Var<T>() : prev_mask_, f.f_s, f.f_d, model_->decoder());
    std::tie(r.logits, r.selected) = select_best_mask(r.out);
    r.mask = BinaryMask::threshold(r.logits.value(), T{0});
    const Var<T> probs = sigmoid(r.logits).detach();
    Var<T> mem_mask = probs;
    if (opt.memory_mask) {
      if (opt.memory_mask->height() != H || opt.memory_mask->width() != W)
        throw DimensionError("step: memory mask grid mismatch");
      mem_mask = Var<T>(opt.memory_mask->to_tensor<T>());
    }
    bank_insert(bank_, MemoryEntry<T>{next_frame_, model_->encode_memory(f.feat, mem_mask), r.out.p, obj_score(r.out)});
    prev_mask_ = probs;
    ++next_frame_;
    return r;
  }

 private:
  static double obj_score(const DecoderOutput<T>& out) { return static_cast<double>(out.o.value()[0]); }

  static void check_grid(const Tensor<T>& image, std::size_t h, std::size_t w) {
    if (image.rank() != 3 || image.dim(0) != 3 || image.dim(1) != h || image.dim(2) != w)
      throw DimensionError("frame " + shape_str(image.shape()) + " does not match the " + std::to_string(h) + "x" +
                           std::to_string(w) + " mask grid");
  }

  const Model<T>* model_;
  std::size_t long_term_;
  Rng rng_;
  MemoryBank<T> bank_;
  Var<T> prev_mask_;
  std::size_t next_frame_ = 0;
};

struct TrackOptions {
  std::size_t long_term = 2;
  std::uint64_t seed = 0;
};

/// Tracks the object given by `first_mask` through `frames`; one mask per frame,
/// the first being `first_mask` itself.
template <class T>
std::vector<BinaryMask> run_vos(const Model<T>& model, const std::vector<Tensor<double>>& frames,
                                const BinaryMask& first_mask, const TrackOptions& opt) {
  if (frames.empty()) throw DimensionError("run_vos: no frames");
  NoGradGuard no_grad;
  Tracker<T> tracker(model, opt.long_term, opt.seed);
  std::vector<BinaryMask> out;
  out.push_back(tracker.prompt(frames[0].template cast<T>(), first_mask).mask);
  for (std::size_t t = 1; t < frames.size(); ++t) out.push_back(tracker.step(frames[t].template cast<T>()).mask);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation suites

struct SceneSuite {
  std::vector<SceneConfig> configs;
  std::vector<VideoSequence<double>> videos;
};

inline SceneSuite make_suite(SceneKind kind, std::size_t count, std::size_t n_frames, const DataConfig& data,
                             std::uint64_t seed) {
  Rng rng(seed);
  SceneSuite s;
  const SceneSampling sampling = data.sampling(n_frames);
  for (std::size_t k = 0; k < count; ++k) {
    s.configs.push_back(sample_scene_config(kind, sampling, rng));
    s.videos.push_back(synth_scene(s.configs.back(), rng.fork_seed()));
  }
  return s;
}

/// Mean J over visible frames that follow an occluded frame; nullopt if there are none.
inline std::optional<double> recovery_j(const std::vector<BinaryMask>& pred, const VideoSequence<double>& video) {
  if (pred.size() != video.size()) throw DimensionError("recovery_j: length mismatch");
  bool seen_hidden = false;
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t t = 0; t < video.size(); ++t) {
    if (!video.occlusion_gt[t]) {
      seen_hidden = true;
    } else if (seen_hidden) {
      s += true_iou(pred[t], video.gt[t]);
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

struct SuiteScore {
  double jf = 0.0, j = 0.0, f = 0.0;
  double recovery = 0.0;  ///< mean recovery J over sequences that have an occlusion
  std::vector<double> per_sequence_jf;
};

template <class T>
SuiteScore score_suite(const Model<T>& model, const SceneSuite& suite, const TrackOptions& opt) {
  SuiteScore s;
  std::size_t n_rec = 0;
  for (const auto& v : suite.videos) {
    const auto pred = run_vos(model, v.frames, v.gt[0], opt);
    const MetricsReport r = evaluate(pred, v.gt);
    s.per_sequence_jf.push_back(r.jf);
    s.jf += r.jf;
    s.j += r.j_mean;
    s.f += r.f_mean;
    if (auto rec = recovery_j(pred, v)) {
      s.recovery += *rec;
      ++n_rec;
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, suite.videos.size()));
  s.jf /= n;
  s.j /= n;
  s.f /= n;
  if (n_rec) s.recovery /= static_cast<double>(n_rec);
  return s;
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  std::vector<double> epoch_loss;          ///< mean clip loss per epoch
  std::vector<double> smoothed;            ///< running minimum of epoch_loss
  std::vector<std::string> silent_params;  ///< tensors whose gradient stayed zero through epoch 1
  std::size_t steps = 0;
};

struct TrainProgress {
  std::size_t epoch = 0, clip = 0;
  double loss = 0.0;
};

namespace detail {

template <class T>
bool all_zero(const Tensor<T>& g) {
  for (T v : g.storage())
    if (v != T{0}) return false;
  return true;
}

}  // namespace detail

/// Mask loss of the masks that were not selected, scaled so that all of them
/// together weigh `unselected_mask_weight`. Without it the heads whose masks
/// never win the IoU ranking receive no gradient at all.
template <class T>
Var<T> unselected_mask_term(const DecoderOutput<T>& out, std::size_t selected, const BinaryMask& gt,
                            const Tensor<double>& weights, const RunConfig& cfg) {
  const std::size_t k_masks = out.y_sam.dim(0), h = out.y_sam.dim(1), w = out.y_sam.dim(2);
  const Tensor<T> gt_t = gt.to_tensor<T>();
  const Tensor<T> w_t = weights.cast<T>();
  Var<T> sum;
  for (std::size_t k = 0; k < k_masks; ++k) {
    if (k == selected) continue;
    const Var<T> logits = reshape(slice(out.y_sam, 0, k, k + 1), {h, w});
    const Var<T> l = add(scale(weighted_bce(logits, gt_t, w_t), static_cast<T>(cfg.lambdas.lambda_bce)),
                         scale(dice_loss(sigmoid(logits), gt_t), static_cast<T>(cfg.lambdas.lambda_dice)));
    sum = sum.defined() ? add(sum, l) : l;
  }
  return scale(sum, static_cast<T>(cfg.train.unselected_mask_weight / static_cast<double>(k_masks - 1)));
}

/// Loss of one clip: the prompt frame and every tracked frame, averaged.
/// Builds the graph across the clip so memory and pointer paths receive gradients.
template <class T>
LossBreakdown<T> clip_loss(const Model<T>& model, const VideoSequence<double>& clip, const RunConfig& cfg,
                           std::size_t long_term, bool gt_every_frame, Rng& rng) {
  Tracker<T> tracker(model, long_term, rng.fork_seed());
  LossBreakdown<T> acc;
  std::vector<Var<T>> terms;
  auto add_frame = [&](const StepResult<T>& r, std::size_t t) {
    const WeightMap wm = generate_weight_map(clip.gt[t], cfg.weights, cfg.window);
    auto lb = total_loss(r.out, clip.gt[t], static_cast<double>(clip.occlusion_gt[t]), wm.data, cfg.lambdas);
    if (!std::isfinite(lb.total.value()[0]))
      throw NumericError("loss is not finite at frame " + std::to_string(t) + " (bce " + std::to_string(lb.bce) +
                         ", dice " + std::to_string(lb.dice) + ", iou " + std::to_string(lb.iou) + ", occ " +
                         std::to_string(lb.occ) + ")");
    acc.bce += lb.bce;
    acc.dice += lb.dice;
    acc.iou += lb.iou;
    acc.occ += lb.occ;
    terms.push_back(lb.total);
    if (cfg.train.unselected_mask_weight > 0.0) terms.push_back(unselected_mask_term(r.out, lb.selected, clip.gt[t], wm.data, cfg));
  };
  add_frame(tracker.prompt(clip.frames[0].template cast<T>(), clip.gt[0]), 0);
  for (std::size_t t = 1; t < clip.size(); ++t) {
    StepOptions opt;
    if (gt_every_frame || t % cfg.train.gt_memory_period == 0) opt.memory_mask = &clip.gt[t];
    opt.drop_prev_mask = rng.uniform() < cfg.train.prev_mask_dropout;
    add_frame(tracker.step(clip.frames[t].template cast<T>(), opt), t);
  }
  const T inv = static_cast<T>(1.0 / static_cast<double>(clip.size()));
  Var<T> total = terms[0];
  for (std::size_t k = 1; k < terms.size(); ++k) total = add(total, terms[k]);
  acc.total = scale(total, inv);
  acc.bce *= inv;
  acc.dice *= inv;
  acc.iou *= inv;
  acc.occ *= inv;
  return acc;
}

template <class T>
TrainResult train_toy(Model<T>& model, const RunConfig& cfg,
                      const std::function<void(const TrainProgress&)>& progress = {}) {
  cfg.validate();
  const TrainConfig& tc = cfg.train;
  AdamW<T> opt(model.params());
  opt.lr = tc.learning_rate;
  opt.weight_decay = tc.weight_decay;
  Rng data_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 17);
  Rng train_rng(cfg.seed * 0xD1B54A32D192ED03ull + 29);
  const SceneSampling sampling = cfg.data.sampling(tc.clip_length);
  std::vector<bool> touched(model.params().items().size(), false);
  std::vector<Tensor<T>> ema;
  if (tc.ema_decay > 0.0)
    for (const auto& [name, v] : model.params().items()) ema.push_back(v.value());

  TrainResult res;
  for (std::size_t e = 0; e < tc.epochs; ++e) {
    const std::size_t L = e >= tc.lsmm_start_epoch ? model.config().lsmm.long_term : 0;
    const bool gt_every_frame = e < tc.warmup_epochs;
    double epoch_sum = 0.0;
    for (std::size_t c = 0; c < tc.clips_per_epoch; ++c) {
      const SceneConfig sc = sample_scene_config(SceneKind::Mixed, sampling, data_rng);
      const VideoSequence<double> clip = synth_scene(sc, data_rng.fork_seed());
      model.params().zero_grad();
      LossBreakdown<T> lb;
      try {
        lb = clip_loss(model, clip, cfg, L, gt_every_frame, train_rng);
      } catch (const NumericError& err) {
        throw NumericError("training diverged at epoch " + std::to_string(e + 1) + ", clip " + std::to_string(c + 1) +
                           ": " + err.what());
      }
      opt.lr = cosine_lr(tc.learning_rate, e * tc.clips_per_epoch + c, tc.epochs * tc.clips_per_epoch, tc.lr_floor);
      backward(lb.total);
      const double gn = clip_grad_norm(model.params(), tc.grad_clip);
      if (!std::isfinite(gn))
        throw NumericError("training diverged at epoch " + std::to_string(e + 1) + ", clip " + std::to_string(c + 1) +
                           ": gradient norm is not finite");
      if (e == 0) {
        auto& items = model.params().items();
        for (std::size_t k = 0; k < items.size(); ++k)
          if (items[k].second.has_grad() && !detail::all_zero(items[k].second.grad())) touched[k] = true;
      }
      opt.step();
      if (!ema.empty()) {
        const T d = static_cast<T>(tc.ema_decay);
        const auto& items = model.params().items();
        for (std::size_t k = 0; k < items.size(); ++k) {
          T* a = ema[k].data();
          const T* p = items[k].second.value().data();
          for (std::size_t i = 0; i < ema[k].size(); ++i) a[i] = d * a[i] + (T{1} - d) * p[i];
        }
      }
      const double loss = static_cast<double>(lb.total.value()[0]);
      epoch_sum += loss;
      if (progress) progress({e, c, loss});
    }
    if (e == 0) {
      const auto& items = model.params().items();
      for (std::size_t k = 0; k < items.size(); ++k)
        if (!touched[k]) res.silent_params.push_back(items[k].first);
    }
    res.epoch_loss.push_back(epoch_sum / static_cast<double>(tc.clips_per_epoch));
    res.smoothed.push_back(res.smoothed.empty() ? res.epoch_loss.back()
                                                : std::min(res.smoothed.back(), res.epoch_loss.back()));
  }
  if (!ema.empty()) {
    auto& items = model.params().items();
    for (std::size_t k = 0; k < items.size(); ++k) items[k].second.mutable_value() = ema[k];
  }
  model.params().zero_grad();
  res.steps = opt.steps();
  return res;
}

}  // namespace panokit
