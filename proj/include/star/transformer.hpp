// Decoder-style transformer blocks: pre-norm RMS normalization, causal (or
// full) self-attention with rotary positions, and a SiLU-gated FFN. The same
// block type serves the base AR, the stacked AR, the codebook projector and
// the diffusion backbone; only masks, positions and parameter sets differ.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "star/ops.hpp"

namespace star {

struct VocabLayout {
  int text = 0;
  int control = 0;
  int visual = 0;

  int total() const { return text + control + visual; }
  int control_begin() const { return text; }
  int visual_begin() const { return text + control; }
  bool is_text(int id) const { return id >= 0 && id < text; }
  bool is_control(int id) const { return id >= text && id < text + control; }
  bool is_visual(int id) const { return id >= visual_begin() && id < total(); }
};

template <class S>
struct ModelConfigT {
  int depth = 4;
  int width = 128;
  int heads = 4;
  int ffn_hidden = 256;
  int max_seq = 512;
  S rotary_base = S(10000);
  VocabLayout vocab;

  void validate() const {
    if (width <= 0 || heads <= 0 || width % heads != 0)
      throw ConfigError("model config: width " + std::to_string(width) +
                        " not divisible by heads " + std::to_string(heads));
    if ((width / heads) % 2 != 0)
      throw ConfigError("model config: head width must be even");
  }
};

using ModelConfig = ModelConfigT<float>;

enum class AttnMask { causal, full };

template <class S>
struct BlockT {
  TensorT<S> wq, wk, wv, wo;
  TensorT<S> w_gate, w_up, w_down;
  TensorT<S> norm_attn, norm_ffn;

  static BlockT init(const ModelConfigT<S>& cfg, Rng& rng, bool trainable = true) {
    BlockT b;
    S std_in = S(0.02);
    auto mk = [&](int r, int c) { return TensorT<S>::randn({r, c}, rng, std_in, trainable); };
    b.wq = mk(cfg.width, cfg.width);
    b.wk = mk(cfg.width, cfg.width);
    b.wv = mk(cfg.width, cfg.width);
    b.wo = mk(cfg.width, cfg.width);
    b.w_gate = mk(cfg.width, cfg.ffn_hidden);
    b.w_up = mk(cfg.width, cfg.ffn_hidden);
    b.w_down = mk(cfg.ffn_hidden, cfg.width);
    b.norm_attn = TensorT<S>::full({cfg.width}, S(1), trainable);
    b.norm_ffn = TensorT<S>::full({cfg.width}, S(1), trainable);
    return b;
  }

  // Parameter-wise copy; the clone's trainability is chosen by the caller.
  static BlockT copy_of(const BlockT& src, bool trainable) {
    BlockT b;
    auto cp = [&](const TensorT<S>& t) { return TensorT<S>::from_data(t.shape(), t.data(), trainable); };
    b.wq = cp(src.wq);
    b.wk = cp(src.wk);
    b.wv = cp(src.wv);
    b.wo = cp(src.wo);
    b.w_gate = cp(src.w_gate);
    b.w_up = cp(src.w_up);
    b.w_down = cp(src.w_down);
    b.norm_attn = cp(src.norm_attn);
    b.norm_ffn = cp(src.norm_ffn);
    return b;
  }

  template <class F>
  void for_each_param(const std::string& prefix, F&& f) {
    f(prefix + ".wq", wq);
    f(prefix + ".wk", wk);
    f(prefix + ".wv", wv);
    f(prefix + ".wo", wo);
    f(prefix + ".w_gate", w_gate);
    f(prefix + ".w_up", w_up);
    f(prefix + ".w_down", w_down);
    f(prefix + ".norm_attn", norm_attn);
    f(prefix + ".norm_ffn", norm_ffn);
  }

  bool bit_equal(const BlockT& o) const {
    return wq.data() == o.wq.data() && wk.data() == o.wk.data() && wv.data() == o.wv.data() &&
           wo.data() == o.wo.data() && w_gate.data() == o.w_gate.data() &&
           w_up.data() == o.w_up.data() && w_down.data() == o.w_down.data() &&
           norm_attn.data() == o.norm_attn.data() && norm_ffn.data() == o.norm_ffn.data();
  }
};

using Block = BlockT<float>;

// Cached keys/values (post-rotary) for one block; inference only, no grads.
template <class S>
struct BlockCacheT {
  std::vector<S> k, v;  // [filled x width]
  int filled = 0;
};

template <class S>
struct KVCacheT {
  std::vector<BlockCacheT<S>> blocks;
  int filled = 0;

  explicit KVCacheT(size_t n_blocks = 0) : blocks(n_blocks) {}
};

using KVCache = KVCacheT<float>;

namespace detail {

template <class S>
TensorT<S> attention(const TensorT<S>& x_norm, const BlockT<S>& b, const ModelConfigT<S>& cfg,
                     AttnMask mask, const std::vector<int>& positions,
                     BlockCacheT<S>* cache) {
  const int t_new = x_norm.dim(0);
  const int width = cfg.width;
  const int hd = width / cfg.heads;
  auto q = matmul(x_norm, b.wq);
  auto k = matmul(x_norm, b.wk);
  auto v = matmul(x_norm, b.wv);
  if (!positions.empty()) {
    q = rotary(q, positions, cfg.heads, cfg.rotary_base);
    k = rotary(k, positions, cfg.heads, cfg.rotary_base);
  }

  int prefix = 0;
  TensorT<S> k_all = k, v_all = v;
  if (cache) {
    prefix = cache->filled;
    if (prefix > 0) {
      auto k_old = TensorT<S>::from_data({prefix, width},
                                         std::vector<S>(cache->k.begin(), cache->k.end()));
      auto v_old = TensorT<S>::from_data({prefix, width},
                                         std::vector<S>(cache->v.begin(), cache->v.end()));
      k_all = concat(0, std::vector<TensorT<S>>{k_old, k});
      v_all = concat(0, std::vector<TensorT<S>>{v_old, v});
    }
    cache->k.insert(cache->k.end(), k.data().begin(), k.data().end());
    cache->v.insert(cache->v.end(), v.data().begin(), v.data().end());
    cache->filled += t_new;
  }

  const long long t_total = k_all.dim(0);
  const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
  std::vector<TensorT<S>> head_outs;
  head_outs.reserve(cfg.heads);
  for (int h = 0; h < cfg.heads; ++h) {
    auto qh = slice(q, 1, h * hd, hd);
    auto kh = slice(k_all, 1, h * hd, hd);
    auto vh = slice(v_all, 1, h * hd, hd);
    auto scores = scale(matmul(qh, transpose2d(kh)), inv_sqrt);
    auto probs = mask == AttnMask::causal ? row_softmax_masked(scores, prefix)
                                          : row_softmax_masked(scores, t_total);
    head_outs.push_back(matmul(probs, vh));
  }
  auto merged = concat(1, head_outs);
  return matmul(merged, b.wo);
}

}  // namespace detail

// Pre-norm residual block: x + Attn(norm(x)), then + FFN(norm(.)).
template <class S>
TensorT<S> block_forward(const TensorT<S>& x, const BlockT<S>& b, const ModelConfigT<S>& cfg,
                         AttnMask mask, const std::vector<int>& positions = {},
                         BlockCacheT<S>* cache = nullptr) {
  if (x.rank() != 2 || x.dim(1) != cfg.width)
    throw DimensionError("block_forward: input " + shape_str(x.shape()) + " vs width " +
                         std::to_string(cfg.width));
  int total = x.dim(0) + (cache ? cache->filled : 0);
  if (total > cfg.max_seq)
    throw CapacityError("sequence length " + std::to_string(total) + " exceeds max " +
                        std::to_string(cfg.max_seq));
  auto h = add(x, detail::attention(rms_norm(x, b.norm_attn), b, cfg, mask, positions, cache));
  auto ffn_in = rms_norm(h, b.norm_ffn);
  auto ffn = matmul(mul(silu(matmul(ffn_in, b.w_gate)), matmul(ffn_in, b.w_up)), b.w_down);
  return add(h, ffn);
}

// Embedding (or raw features) -> all blocks in order -> final norm -> head.
template <class S>
TensorT<S> stack_forward(const TensorT<S>& embeddings, const std::vector<BlockT<S>>& blocks,
                         const ModelConfigT<S>& cfg, const TensorT<S>& final_norm,
                         const TensorT<S>& head, AttnMask mask,
                         const std::vector<int>& positions = {}, KVCacheT<S>* cache = nullptr) {
  if (cache && cache->blocks.size() != blocks.size())
    throw ContractError("kv cache block count mismatch");
  TensorT<S> h = embeddings;
  for (size_t i = 0; i < blocks.size(); ++i)
    h = block_forward(h, blocks[i], cfg, mask, positions, cache ? &cache->blocks[i] : nullptr);
  if (cache) cache->filled += embeddings.dim(0);
  return matmul(rms_norm(h, final_norm), head);
}

template <class S>
TensorT<S> stack_forward_ids(const std::vector<int>& ids, const TensorT<S>& embed_table,
                             const std::vector<BlockT<S>>& blocks, const ModelConfigT<S>& cfg,
                             const TensorT<S>& final_norm, const TensorT<S>& head, AttnMask mask,
                             const std::vector<int>& positions = {},
                             KVCacheT<S>* cache = nullptr) {
  return stack_forward(gather_rows(embed_table, ids), blocks, cfg, final_norm, head, mask,
                       positions, cache);
}

}  // namespace star
