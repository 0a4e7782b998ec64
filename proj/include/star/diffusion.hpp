// Rectified-flow transformer decoder over pixel-space latents.
//
// Training regresses the velocity (noise minus data) along the linear path
// x_t = (1-t) x0 + t eps; sampling is plain Euler from t=1 to 0. Conditioning
// enters three ways at once: text tokens, the AR's VQ embeddings (channel
// concat after bilinear resize by default, with sequence- and text-wise
// routings for the ablation), and a source latent appended along the
// sequence, with an all-zero placeholder when there is no source image.
#pragma once

#include "star/synthworld.hpp"
#include "star/transformer.hpp"

namespace star::diffusion {

enum class ConcatStrategy : int { text_wise = 0, sequence_wise, channel_wise };

inline const char* strategy_name(ConcatStrategy s) {
  static const char* n[] = {"text_wise", "sequence_wise", "channel_wise"};
  return n[static_cast<int>(s)];
}

inline ConcatStrategy strategy_from_name(const std::string& s) {
  for (int i = 0; i < 3; ++i)
    if (s == strategy_name(static_cast<ConcatStrategy>(i))) return static_cast<ConcatStrategy>(i);
  throw ConfigError("unknown conditioning strategy: " + s);
}

struct DiffusionConfig {
  int latent_size = 32;  // square latent, pixel space
  int channels = 3;
  int vq_dim = 32;
  int vq_grid = 4;  // AR token grid extent
  int patch = 4;
  int width = 96;
  int depth = 3;
  int heads = 4;
  int ffn_hidden = 192;
  int sampler_steps = 16;
  int upscale = 1;
  int max_text_len = 24;
  ConcatStrategy strategy = ConcatStrategy::channel_wise;

  int grid() const { return latent_size / patch; }
  int tokens() const { return grid() * grid(); }

  void validate() const {
    if (latent_size % patch != 0)
      throw ConfigError("diffusion: latent size not divisible by patch");
    if (upscale < 1) throw ConfigError("diffusion: upscale factor must be >= 1");
    if (width % heads != 0 || (width / heads) % 2 != 0)
      throw ConfigError("diffusion: width/heads layout invalid");
  }
};

struct ConditionBundle {
  std::vector<int> text;        // word ids
  Tensor vq_embeddings;         // [K_tokens x d], caller detaches when needed
  int vq_grid_h = 0, vq_grid_w = 0;
  Tensor source_latent;         // [h x w x c]; undefined => zero placeholder
};

// [K x d] token sequence -> [h x w x d] map: reshape to its grid, bilinear.
inline Tensor resize_vq_embeddings(const Tensor& zq, int grid_h, int grid_w, int out_h, int out_w) {
  if (zq.rank() != 2 || zq.dim(0) != grid_h * grid_w)
    throw ContractError("resize_vq_embeddings: " + std::to_string(zq.defined() ? zq.dim(0) : -1) +
                        " tokens do not form a " + std::to_string(grid_h) + "x" +
                        std::to_string(grid_w) + " grid");
  return bilinear_resize(reshape(zq, {grid_h, grid_w, zq.dim(1)}), out_h, out_w);
}

// Channel-wise conditioning: concat[x_t, E_vq] along channels.
inline Tensor condition_channel_concat(const Tensor& x_t, const Tensor& e_vq) {
  if (x_t.rank() != 3 || e_vq.rank() != 3 || x_t.dim(0) != e_vq.dim(0) || x_t.dim(1) != e_vq.dim(1))
    throw DimensionError("channel concat: spatial extents " + shape_str(x_t.shape()) + " vs " +
                         shape_str(e_vq.shape()));
  return concat(2, std::vector<Tensor>{x_t, e_vq});
}

// Sequence-wise conditioning: extra tokens after the denoised positions.
inline Tensor condition_sequence_concat(const Tensor& x_tokens, const Tensor& extra_tokens) {
  if (x_tokens.rank() != 2 || extra_tokens.rank() != 2 || x_tokens.dim(1) != extra_tokens.dim(1))
    throw DimensionError("sequence concat: widths " + shape_str(x_tokens.shape()) + " vs " +
                         shape_str(extra_tokens.shape()));
  return concat(0, std::vector<Tensor>{x_tokens, extra_tokens});
}

namespace detail {

// Fixed 2-D sin/cos features: half the width encodes the row, half the
// column. Non-integer coordinates are fine (used for VQ-grid alignment).
inline std::vector<float> pos2d_features(float row, float col, int width) {
  std::vector<float> f(static_cast<size_t>(width), 0.f);
  int quarter = width / 4;
  for (int k = 0; k < quarter; ++k) {
    float freq = std::pow(100.f, -static_cast<float>(k) / static_cast<float>(quarter));
    f[static_cast<size_t>(2 * k)] = std::sin(row * freq);
    f[static_cast<size_t>(2 * k + 1)] = std::cos(row * freq);
    f[static_cast<size_t>(2 * quarter + 2 * k)] = std::sin(col * freq);
    f[static_cast<size_t>(2 * quarter + 2 * k + 1)] = std::cos(col * freq);
  }
  return f;
}

inline std::vector<float> time_features(float t, int width) {
  std::vector<float> f(static_cast<size_t>(width), 0.f);
  for (int k = 0; k < width / 2; ++k) {
    float freq = std::pow(1000.f, -static_cast<float>(k) / static_cast<float>(width / 2));
    f[static_cast<size_t>(2 * k)] = std::sin(t * 1000.f * freq);
    f[static_cast<size_t>(2 * k + 1)] = std::cos(t * 1000.f * freq);
  }
  return f;
}

}  // namespace detail

struct DiffusionModel {
  DiffusionConfig cfg;
  Tensor patch_embed_xin;  // [(p^2 (c+d)) x width], channel strategy
  Tensor patch_embed_x;    // [(p^2 c) x width], other strategies + source stream
  Tensor vq_token_proj;    // [d x width]
  Tensor text_embed;       // [text vocab x width]
  Tensor segment_embed;    // [4 x width]: noisy / source / vq / text
  std::vector<Block> blocks;
  Tensor final_norm;
  Tensor out_head;  // [width x (p^2 c)]
  ModelConfig bcfg;

  static DiffusionModel init(const DiffusionConfig& cfg, Rng& rng, bool trainable = true) {
    cfg.validate();
    DiffusionModel m;
    m.cfg = cfg;
    m.bcfg.width = cfg.width;
    m.bcfg.heads = cfg.heads;
    m.bcfg.ffn_hidden = cfg.ffn_hidden;
    m.bcfg.max_seq = 4 * cfg.tokens() + cfg.max_text_len + 8;
    m.bcfg.validate();
    int p2c = cfg.patch * cfg.patch * cfg.channels;
    int p2cd = cfg.patch * cfg.patch * (cfg.channels + cfg.vq_dim);
    auto mk = [&](Shape s, float std) { return Tensor::randn(std::move(s), rng, std, trainable); };
    m.patch_embed_xin = mk({p2cd, cfg.width}, 0.4f / std::sqrt(static_cast<float>(p2cd)));
    m.patch_embed_x = mk({p2c, cfg.width}, 0.4f / std::sqrt(static_cast<float>(p2c)));
    m.vq_token_proj = mk({cfg.vq_dim, cfg.width}, 0.4f / std::sqrt(static_cast<float>(cfg.vq_dim)));
    m.text_embed = mk({world::Vocabulary::instance().size(), cfg.width}, 0.02f);
    m.segment_embed = mk({4, cfg.width}, 0.02f);
    for (int i = 0; i < cfg.depth; ++i) m.blocks.push_back(Block::init(m.bcfg, rng, trainable));
    m.final_norm = Tensor::full({cfg.width}, 1.f, trainable);
    m.out_head = mk({cfg.width, p2c}, 0.02f);
    return m;
  }

  // Spatial input to the patch embedding for a given strategy; channel-wise
  // is exactly condition_channel_concat of x_t with the resized embeddings.
  Tensor build_x_in(const Tensor& x_t, const ConditionBundle& cond, ConcatStrategy strategy) const {
    if (strategy != ConcatStrategy::channel_wise) return x_t;
    auto e_vq = resize_vq_embeddings(cond.vq_embeddings, cond.vq_grid_h, cond.vq_grid_w,
                                     cfg.latent_size, cfg.latent_size);
    return condition_channel_concat(x_t, e_vq);
  }

  // Velocity prediction. Token order: [text][text-wise vq][noisy][seq-wise
  // vq][source]; only the noisy positions feed the output head.
  Tensor forward(const Tensor& x_t, float t, const ConditionBundle& cond,
                 ConcatStrategy strategy) const {
    if (x_t.rank() != 3 || x_t.dim(0) != cfg.latent_size || x_t.dim(1) != cfg.latent_size ||
        x_t.dim(2) != cfg.channels)
      throw DimensionError("diffusion forward: latent " + shape_str(x_t.shape()));
    if (static_cast<int>(cond.text.size()) > cfg.max_text_len)
      throw CapacityError("diffusion forward: text condition too long");
    const int g = cfg.grid();

    auto seg_row = [&](int s) { return gather_rows(segment_embed, std::vector<int>{s}); };
    auto add_rowwise = [&](Tensor tokens, const Tensor& row) {
      // broadcast a [1 x width] row over all token rows
      auto ones = Tensor::full({tokens.dim(0), 1}, 1.f);
      return add(tokens, matmul(ones, row));
    };
    auto add_positions = [&](Tensor tokens, const std::vector<std::pair<float, float>>& coords) {
      std::vector<float> rows;
      rows.reserve(coords.size() * static_cast<size_t>(cfg.width));
      for (auto& [r, c] : coords) {
        auto f = detail::pos2d_features(r, c, cfg.width);
        rows.insert(rows.end(), f.begin(), f.end());
      }
      return add(tokens, Tensor::from_data({static_cast<int>(coords.size()), cfg.width},
                                           std::move(rows)));
    };

    std::vector<Tensor> groups;
    // Text stream.
    std::vector<std::pair<float, float>> text_coords;
    Tensor text_tokens;
    if (!cond.text.empty()) {
      text_tokens = gather_rows(text_embed, cond.text);
      for (size_t i = 0; i < cond.text.size(); ++i)
        text_coords.push_back({-2.f, static_cast<float>(i)});
      text_tokens = add_positions(add_rowwise(text_tokens, seg_row(3)), text_coords);
      groups.push_back(text_tokens);
    }
    if (strategy == ConcatStrategy::text_wise) {
      auto vq_tokens = matmul(cond.vq_embeddings, vq_token_proj);
      std::vector<std::pair<float, float>> coords;
      for (int i = 0; i < vq_tokens.dim(0); ++i)
        coords.push_back({-2.f, static_cast<float>(cfg.max_text_len + i)});
      groups.push_back(add_positions(add_rowwise(vq_tokens, seg_row(3)), coords));
    }

    // Noisy stream.
    auto x_in = build_x_in(x_t, cond, strategy);
    auto noisy = matmul(patchify(x_in, cfg.patch),
                        strategy == ConcatStrategy::channel_wise ? patch_embed_xin : patch_embed_x);
    std::vector<std::pair<float, float>> noisy_coords;
    for (int gy = 0; gy < g; ++gy)
      for (int gx = 0; gx < g; ++gx)
        noisy_coords.push_back({static_cast<float>(gy), static_cast<float>(gx)});
    noisy = add_positions(add_rowwise(noisy, seg_row(0)), noisy_coords);
    int noisy_begin = 0;
    for (const auto& grp : groups) noisy_begin += grp.dim(0);
    groups.push_back(noisy);

    if (strategy == ConcatStrategy::sequence_wise) {
      auto vq_tokens = matmul(cond.vq_embeddings, vq_token_proj);
      std::vector<std::pair<float, float>> coords;
      float sy = static_cast<float>(g) / static_cast<float>(cond.vq_grid_h);
      float sx = static_cast<float>(g) / static_cast<float>(cond.vq_grid_w);
      for (int gy = 0; gy < cond.vq_grid_h; ++gy)
        for (int gx = 0; gx < cond.vq_grid_w; ++gx)
          coords.push_back({(static_cast<float>(gy) + 0.5f) * sy - 0.5f,
                            (static_cast<float>(gx) + 0.5f) * sx - 0.5f});
      groups.push_back(add_positions(add_rowwise(vq_tokens, seg_row(2)), coords));
    }

    // Source stream (zero latent when absent).
    Tensor source = cond.source_latent.defined()
                        ? cond.source_latent
                        : Tensor::zeros({cfg.latent_size, cfg.latent_size, cfg.channels});
    if (source.shape() != Shape{cfg.latent_size, cfg.latent_size, cfg.channels})
      throw DimensionError("diffusion forward: source latent " + shape_str(source.shape()));
    auto src_tokens = matmul(patchify(source, cfg.patch), patch_embed_x);
    groups.push_back(add_positions(add_rowwise(src_tokens, seg_row(1)), noisy_coords));

    Tensor h = groups.size() == 1 ? groups[0] : concat(0, groups);
    // Time conditioning shifts every token equally.
    auto tf = detail::time_features(t, cfg.width);
    h = add(h, matmul(Tensor::full({h.dim(0), 1}, 1.f),
                      Tensor::from_data({1, cfg.width}, std::move(tf))));
    for (const auto& b : blocks) h = block_forward(h, b, bcfg, AttnMask::full);
    auto out = matmul(rms_norm(slice(h, 0, noisy_begin, cfg.tokens()), final_norm), out_head);
    return unpatchify(out, cfg.latent_size, cfg.latent_size, cfg.channels, cfg.patch);
  }

  template <class F>
  void for_each_param(F&& f) {
    f("diffusion.patch_embed_xin", patch_embed_xin);
    f("diffusion.patch_embed_x", patch_embed_x);
    f("diffusion.vq_token_proj", vq_token_proj);
    f("diffusion.text_embed", text_embed);
    f("diffusion.segment_embed", segment_embed);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each_param("diffusion.block" + std::to_string(i), f);
    f("diffusion.final_norm", final_norm);
    f("diffusion.out_head", out_head);
  }
};

inline Tensor noisy_latent(const Tensor& x0, const Tensor& eps, float t) {
  return add(scale(x0, 1.f - t), scale(eps, t));
}

inline Tensor flow_target(const Tensor& x0, const Tensor& eps) { return sub(eps, x0); }

// MSE between the predicted velocity and (eps - x0) at the interpolated point.
inline Tensor flow_loss(const DiffusionModel& m, const Tensor& x0, const ConditionBundle& cond,
                        float t, const Tensor& eps, ConcatStrategy strategy) {
  if (t <= 0.f || t >= 1.f) throw ContractError("flow_loss: t must lie in (0, 1)");
  auto x_t = detach(noisy_latent(x0, eps, t));
  return mse(m.forward(x_t, t, cond, strategy), detach(flow_target(x0, eps)));
}

// Euler integration under an arbitrary velocity field (the oracle tests
// exploit this); production sampling passes the model's forward.
template <class VelocityFn>
std::vector<float> sample_with(VelocityFn&& velocity, int size, int channels, int steps,
                               uint64_t seed, int upscale) {
  if (steps < 1) throw ContractError("sample: steps must be >= 1");
  Rng rng(seed, 0xd1ff);
  auto x = Tensor::randn({size, size, channels}, rng);
  for (int k = 0; k < steps; ++k) {
    float t = 1.f - static_cast<float>(k) / static_cast<float>(steps);
    auto v = velocity(x, t);
    x = detach(sub(x, scale(v, 1.f / static_cast<float>(steps))));
  }
  std::vector<float> out(x.data());
  for (auto& val : out) val = std::clamp(val, 0.f, 1.f);
  if (upscale > 1) {
    auto big = upsample_nearest(Tensor::from_data({size, size, channels}, std::move(out)), upscale);
    out = big.data();
  }
  return out;
}

// Deterministic (seeded) generation; output extents are upscale * latent.
inline world::Image sample(const DiffusionModel& m, const ConditionBundle& cond, int steps,
                           uint64_t seed, ConcatStrategy strategy) {
  auto rgb = sample_with(
      [&](const Tensor& x, float t) { return m.forward(x, t, cond, strategy); },
      m.cfg.latent_size, m.cfg.channels, steps, seed, m.cfg.upscale);
  world::Image img;
  img.size = m.cfg.latent_size * m.cfg.upscale;
  img.rgb = std::move(rgb);
  return img;
}

}  // namespace star::diffusion
