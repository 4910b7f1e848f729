#pragma once

// Memory bank and the long-short memory module.
//
// The bank keeps the prompted frame and the six most recent frames as dense
// memories. Older frames are demoted to a pointer-only archive. Long-term
// slots are drawn from the archive by occlusion-score roulette, matched
// against the short-term pointers, and turned into pseudo long-term memories
// by FiLM-modulating an affinity-weighted mix of the short-term memories.

#include <algorithm>
#include <cmath>
#include <deque>
#include <optional>
#include <string>
#include <vector>

#include "panokit/decoder.hpp"
#include "panokit/nn.hpp"

namespace panokit {

inline constexpr std::size_t kShortTermSlots = 6;

struct LsmmConfig {
  std::size_t long_term = 2;  ///< L
  std::size_t d_m = 64;
  std::uint64_t rng_seed = 0;
};

/// Dense memory is channel-first: [d_m, h, w].
template <class T>
struct MemoryEntry {
  std::size_t frame_idx = 0;
  Var<T> mem;
  Var<T> pointer;  ///< [d_p]
  double obj_score = 0.0;
};

template <class T>
struct ArchiveEntry {
  std::size_t frame_idx = 0;
  Var<T> pointer;
  double obj_score = 0.0;
};

template <class T>
struct MemoryBank {
  std::optional<MemoryEntry<T>> prompted;
  std::deque<MemoryEntry<T>> recent;
  std::vector<ArchiveEntry<T>> archive;

  bool empty() const { return !prompted && recent.empty(); }

  std::size_t last_frame() const {
    std::size_t f = prompted ? prompted->frame_idx : 0;
    if (!recent.empty()) f = std::max(f, recent.back().frame_idx);
    for (const auto& a : archive) f = std::max(f, a.frame_idx);
    return f;
  }

  /// Bytes held in tensor payloads (dense memories and pointers).
  std::size_t payload_bytes() const {
    std::size_t b = 0;
    if (prompted) b += (prompted->mem.size() + prompted->pointer.size()) * sizeof(T);
    for (const auto& e : recent) b += (e.mem.size() + e.pointer.size()) * sizeof(T);
    for (const auto& a : archive) b += a.pointer.size() * sizeof(T);
    return b;
  }
};

/// The first insert becomes the prompted entry. Later inserts append to the
/// recent FIFO; overflow demotes the oldest recent entry to the archive.
template <class T>
void bank_insert(MemoryBank<T>& bank, MemoryEntry<T> entry) {
  if (!bank.empty() && entry.frame_idx <= bank.last_frame())
    throw BankError("bank_insert: frame " + std::to_string(entry.frame_idx) + " is not newer than frame " +
                    std::to_string(bank.last_frame()));
  if (!bank.prompted) {
    bank.prompted = std::move(entry);
    return;
  }
  bank.recent.push_back(std::move(entry));
  if (bank.recent.size() > kShortTermSlots) {
    auto& old = bank.recent.front();
    bank.archive.push_back({old.frame_idx, old.pointer, old.obj_score});
    bank.recent.pop_front();
  }
}

// ---------------------------------------------------------------------------
// Occlusion sample strategy

template <class T>
struct LongTermSelection {
  std::vector<std::size_t> frame_idx;
  std::vector<Var<T>> pointers;
};

/// Up to L rounds of roulette selection with weights exp(obj_score); each pick
/// is removed before the next round. Returns nullopt for an empty archive or L == 0.
template <class T>
std::optional<LongTermSelection<T>> occlusion_sample(const std::vector<ArchiveEntry<T>>& archive, std::size_t L,
                                                     Rng& rng) {
  if (archive.empty() || L == 0) return std::nullopt;
  std::vector<std::size_t> cand(archive.size());
  std::vector<double> scores(archive.size());
  // Shift by the max score before exponentiating; roulette only sees ratios.
  double mx = -std::numeric_limits<double>::infinity();
  for (const auto& a : archive) mx = std::max(mx, a.obj_score);
  for (std::size_t i = 0; i < archive.size(); ++i) {
    cand[i] = i;
    scores[i] = std::exp(archive[i].obj_score - mx);
  }
  LongTermSelection<T> sel;
  for (std::size_t k = 0; k < L && !cand.empty(); ++k) {
    double total = 0.0;
    for (double s : scores) total += s;
    const double r = rng.uniform() * total;
    double c = 0.0;
    std::size_t pick = cand.size() - 1;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      c += scores[i];
      if (c >= r) {
        pick = i;
        break;
      }
    }
    sel.frame_idx.push_back(archive[cand[pick]].frame_idx);
    sel.pointers.push_back(archive[cand[pick]].pointer);
    cand.erase(cand.begin() + static_cast<long>(pick));
    scores.erase(scores.begin() + static_cast<long>(pick));
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Affinity, aggregation, FiLM

/// a[l,s] = softmax_s(p_long[l] . p_short[s] / sqrt(d_p)); rows sum to 1.
template <class T>
Var<T> pointer_affinity(const Var<T>& p_long, const Var<T>& p_short) {
  require_rank(p_long.value(), 2, "pointer_affinity p_long");
  require_rank(p_short.value(), 2, "pointer_affinity p_short");
  if (p_long.dim(0) == 0 || p_short.dim(0) == 0) throw DimensionError("pointer_affinity: empty pointer set");
  if (p_long.dim(1) != p_short.dim(1)) throw DimensionError("pointer_affinity: pointer width mismatch");
  const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(p_long.dim(1))));
  return softmax(scale(matmul_nt(p_long, p_short), s), 1);
}

/// m_tilde[l] = sum_s a[l,s] * m_short[s]; m_short is [S, ...], result [L, ...].
template <class T>
Var<T> aggregate_short(const Var<T>& m_short, const Var<T>& a) {
  require_rank(a.value(), 2, "aggregate_short affinity");
  const std::size_t S = m_short.dim(0);
  if (a.dim(1) != S) throw DimensionError("aggregate_short: affinity columns do not match short-term slots");
  Shape out_shape = m_short.shape();
  out_shape[0] = a.dim(0);
  const Var<T> flat = reshape(m_short, {S, m_short.size() / S});
  return reshape(matmul(a, flat), out_shape);
}

template <class T>
struct FilmParams {
  Linear<T> hidden, out;  // d_p -> 2 d_m -> 2 d_m (gamma | beta)

  FilmParams() = default;
  FilmParams(ParamStore<T>& store, const std::string& name, std::size_t d_p, std::size_t d_m, Rng& rng) {
    hidden = Linear<T>(store, name + ".0", d_p, 2 * d_m, rng, std::sqrt(2.0));
    out = Linear<T>(store, name + ".1", 2 * d_m, 2 * d_m, rng, 0.1);
    // Start at identity modulation: gamma = 1, beta = 0.
    auto& b = out.bias.mutable_value();
    for (std::size_t c = 0; c < d_m; ++c) b[c] = T{1};
  }
};

/// (gamma_l, beta_l) = FFN(p_long[l]); m_long[l] = m_tilde[l] * gamma_l + beta_l per channel.
/// m_tilde is [L, d_m, h, w].
template <class T>
Var<T> film(const Var<T>& m_tilde, const Var<T>& p_long, const FilmParams<T>& ffn) {
  require_rank(m_tilde.value(), 4, "film m_tilde");
  const std::size_t L = m_tilde.dim(0), d_m = m_tilde.dim(1);
  if (p_long.dim(0) != L) throw DimensionError("film: pointer count does not match long-term slots");
  const Var<T> gb = ffn.out(relu(ffn.hidden(p_long)));  // [L, 2 d_m]
  if (gb.dim(1) != 2 * d_m) throw DimensionError("film: FFN width does not match memory channels");
  std::vector<Var<T>> slots;
  const Shape slot_shape{d_m, m_tilde.dim(2), m_tilde.dim(3)};
  for (std::size_t l = 0; l < L; ++l) {
    const Var<T> row = reshape(slice(gb, 0, l, l + 1), {2 * d_m});
    const Var<T> gamma = slice(row, 0, 0, d_m), beta = slice(row, 0, d_m, 2 * d_m);
    slots.push_back(reshape(channel_affine(reshape(slice(m_tilde, 0, l, l + 1), slot_shape), gamma, beta),
                            {1, d_m, slot_shape[1], slot_shape[2]}));
  }
  return concat(slots, 0);
}

template <class T>
struct LsmmOutput {
  std::vector<std::size_t> frames;  ///< archive frames chosen as long-term slots
  Var<T> p_long;                    ///< [L', d_p]
  Var<T> affinity;                  ///< [L', |recent|]
  Var<T> m_long;                    ///< [L', d_m, h, w]
};

/// Runs sampling, affinity, aggregation and FiLM; nullopt when the module is inactive.
template <class T>
std::optional<LsmmOutput<T>> lsmm_forward(const MemoryBank<T>& bank, std::size_t L, const FilmParams<T>& ffn, Rng& rng) {
  if (bank.recent.empty()) return std::nullopt;
  auto sel = occlusion_sample(bank.archive, L, rng);
  if (!sel) return std::nullopt;
  LsmmOutput<T> out;
  out.frames = sel->frame_idx;
  std::vector<Var<T>> pl, ps, ms;
  for (const auto& p : sel->pointers) pl.push_back(reshape(p, {1, p.size()}));
  for (const auto& e : bank.recent) {
    ps.push_back(reshape(e.pointer, {1, e.pointer.size()}));
    Shape s = e.mem.shape();
    s.insert(s.begin(), 1);
    ms.push_back(reshape(e.mem, s));
  }
  out.p_long = concat(pl, 0);
  out.affinity = pointer_affinity(out.p_long, concat(ps, 0));
  out.m_long = film(aggregate_short(concat(ms, 0), out.affinity), out.p_long, ffn);
  return out;
}

// ---------------------------------------------------------------------------
// Memory encoder and memory attention

template <class T>
struct MemoryParams {
  std::size_t d_feat = 0, d_m = 0, d_p = 0;
  Conv<T> pix_proj, fuser, out_proj;
  FilmParams<T> film;
  Linear<T> ptr_proj;
  Var<T> slot_embed;  // [5, d_m]: prompted, recent, long-term, short pointer, long pointer
  Attention<T> attn;
  Mlp<T> ffn;
  Var<T> no_mem_embed;  // [d_feat], added to prompt-frame features

  MemoryParams() = default;
  MemoryParams(ParamStore<T>& store, std::size_t d_feat_, std::size_t d_m_, std::size_t d_p_, Rng& rng)
      : d_feat(d_feat_), d_m(d_m_), d_p(d_p_) {
    pix_proj = Conv<T>(store, "mem.pix_proj", d_feat, d_feat, 1, rng, 1, 1.0);
    fuser = Conv<T>(store, "mem.fuser", d_feat, d_feat, 3, rng);
    out_proj = Conv<T>(store, "mem.out_proj", d_feat, d_m, 1, rng, 1, 1.0);
    film = FilmParams<T>(store, "mem.film", d_p, d_m, rng);
    ptr_proj = Linear<T>(store, "mem.ptr_proj", d_p, d_m, rng);
    slot_embed = store.normal("mem.slot_embed", {5, d_m}, 0.1, rng);
    attn = Attention<T>(store, "mem.attn", d_feat, d_m, d_feat, rng, 0.5);
    ffn = Mlp<T>(store, "mem.ffn", d_feat, 2 * d_feat, d_feat, rng, 0.5);
    no_mem_embed = store.normal("mem.no_mem_embed", {d_feat}, 0.02, rng);
  }
};

/// Encodes frame features [d_feat,h,w] with a [H,W] mask in [0,1] into a [d_m,h,w] memory.
template <class T>
Var<T> memory_encode(const Var<T>& features, const Var<T>& mask, const MemoryParams<T>& p,
                     const MaskDownsampler<T>& down, HorizontalPad mode) {
  require_rank(features.value(), 3, "memory_encode features");
  const Var<T> m = downsample_mask(mask, down, mode);
  if (m.dim(1) != features.dim(1) || m.dim(2) != features.dim(2))
    throw DimensionError("memory_encode: mask and feature grids disagree");
  const Var<T> x = add(m, p.pix_proj(features, mode));
  return p.out_proj(relu(p.fuser(x, mode)), mode);
}

template <class T>
struct ConditionedFeatures {
  Var<T> f_mem;        ///< [d_feat,h,w]
  Var<T> attention;    ///< [h*w, n_memory_tokens]
  std::size_t memory_tokens = 0;
};

namespace detail {
template <class T>
Var<T> with_slot(const Var<T>& tokens, const MemoryParams<T>& p, std::size_t slot) {
  const Var<T> e = reshape(slice(p.slot_embed, 0, slot, slot + 1), {p.d_m});
  return add(tokens, broadcast_rows(e, tokens.dim(0)));
}
}  // namespace detail

/// Cross-attends frame feature tokens to every memory token (prompted, recent,
/// long-term, and projected pointers), then residual + FFN.
template <class T>
ConditionedFeatures<T> condition_features(const Var<T>& frame_features, const MemoryBank<T>& bank,
                                          const std::optional<LsmmOutput<T>>& lsmm, const MemoryParams<T>& p) {
  if (bank.empty() || !bank.prompted) throw BankError("condition_features: bank has no prompted entry");
  require_rank(frame_features.value(), 3, "condition_features");
  const std::size_t h = frame_features.dim(1), w = frame_features.dim(2);
  std::vector<Var<T>> mem_tokens;
  auto dense_tokens = [&](const Var<T>& m, std::size_t slot) {
    if (m.dim(1) != h || m.dim(2) != w) throw DimensionError("condition_features: memory grid mismatch");
    mem_tokens.push_back(detail::with_slot(map_to_tokens(m), p, slot));
  };
  dense_tokens(bank.prompted->mem, 0);
  for (const auto& e : bank.recent) dense_tokens(e.mem, 1);
  if (lsmm)
    for (std::size_t l = 0; l < lsmm->m_long.dim(0); ++l)
      dense_tokens(reshape(slice(lsmm->m_long, 0, l, l + 1), {p.d_m, h, w}), 2);
  std::vector<Var<T>> ptrs;
  for (const auto& e : bank.recent) ptrs.push_back(reshape(e.pointer, {1, p.d_p}));
  if (!ptrs.empty()) mem_tokens.push_back(detail::with_slot(p.ptr_proj(concat(ptrs, 0)), p, 3));
  if (lsmm) mem_tokens.push_back(detail::with_slot(p.ptr_proj(lsmm->p_long), p, 4));

  const Var<T> memory = concat(mem_tokens, 0);
  const Var<T> q = map_to_tokens(frame_features);
  auto res = p.attn.run(q, memory, memory);
  Var<T> x = add(q, res.out);
  x = add(x, p.ffn(x));
  return {tokens_to_map(x, h, w), res.weights, memory.dim(0)};
}

}  // namespace panokit
