// Convolutional vector-quantizer with a projector-regularized codebook.
//
// The quantizer picks nearest codes from an *effective* codebook: during
// training that is the projector's reconstruction of the raw codebook (two
// full-attention blocks over the K code vectors at width d/4), which couples
// all codes through shared weights and counteracts collapse; at the end of
// training the projected codebook is frozen as the effective one.
#pragma once

#include <deque>

#include "star/optimizer.hpp"
#include "star/synthworld.hpp"
#include "star/transformer.hpp"

namespace star::vq {

struct VQConfig {
  int codebook_size = 512;
  int dim = 32;
  int downsample = 4;  // power of two
  int image_size = 16;
  int image_channels = 3;
  float beta = 0.25f;        // commitment
  float lambda_proj = 1.0f;  // projector reconstruction
  int usage_window = 64;     // quantize calls covered by collapse stats
  bool keep_projector_at_inference = false;

  int levels() const {
    int f = downsample, n = 0;
    while (f > 1) {
      f /= 2;
      ++n;
    }
    return n;
  }

  int grid() const { return image_size / downsample; }

  void validate() const {
    if (codebook_size < 2) throw ConfigError("vq: codebook size must be >= 2");
    if (dim < 1) throw ConfigError("vq: code dimension must be >= 1");
    if (dim % 4 != 0) throw ConfigError("vq: code dimension must be divisible by 4");
    int f = downsample;
    while (f > 1) {
      if (f % 2 != 0) throw ConfigError("vq: downsample factor must be a power of two");
      f /= 2;
    }
    if (image_size % downsample != 0)
      throw ConfigError("vq: image size " + std::to_string(image_size) +
                        " not divisible by downsample " + std::to_string(downsample));
  }
};

// Per-code usage counters over a sliding window of quantize calls.
class UsageWindow {
 public:
  UsageWindow(int codes, int window) : totals_(static_cast<size_t>(codes), 0), window_(window) {}

  void push(const std::vector<int>& ids) {
    std::vector<int> counts(totals_.size(), 0);
    for (int id : ids) {
      ++counts[static_cast<size_t>(id)];
      ++positions_;
    }
    for (size_t i = 0; i < totals_.size(); ++i) totals_[i] += counts[i];
    steps_.push_back(std::move(counts));
    if (static_cast<int>(steps_.size()) > window_) {
      for (size_t i = 0; i < totals_.size(); ++i) {
        totals_[i] -= steps_.front()[i];
        positions_ -= steps_.front()[i];
      }
      steps_.pop_front();
    }
  }

  bool empty() const { return steps_.empty(); }
  long long positions() const { return positions_; }
  const std::vector<long long>& totals() const { return totals_; }

 private:
  std::vector<long long> totals_;
  std::deque<std::vector<int>> steps_;
  long long positions_ = 0;
  int window_;
};

struct CodebookStats {
  double utilization = 0;  // fraction of codes used at least once
  double perplexity = 1;   // exp(entropy of the empirical code distribution)
};

inline CodebookStats codebook_stats(const UsageWindow& usage) {
  if (usage.empty()) throw StatError("codebook stats over an empty usage window");
  CodebookStats s;
  double total = static_cast<double>(usage.positions());
  int used = 0;
  double entropy = 0;
  for (long long c : usage.totals()) {
    if (c <= 0) continue;
    ++used;
    double p = static_cast<double>(c) / total;
    entropy -= p * std::log(p);
  }
  s.utilization = static_cast<double>(used) / static_cast<double>(usage.totals().size());
  s.perplexity = std::exp(entropy);
  return s;
}

// Two full-attention blocks over the K code vectors, bracketed by a down-
// projection to d/4 and an up-projection back to d.
struct Projector {
  Tensor w_down, w_up;
  std::vector<Block> blocks;
  ModelConfig pcfg;

  static Projector init(const VQConfig& cfg, Rng& rng) {
    Projector p;
    int inner = cfg.dim / 4;
    p.pcfg.width = inner;
    p.pcfg.heads = inner % 4 == 0 && inner >= 4 ? 2 : 1;
    if ((inner / p.pcfg.heads) % 2 != 0) p.pcfg.heads = 1;
    p.pcfg.ffn_hidden = 2 * inner;
    p.pcfg.max_seq = cfg.codebook_size;
    p.pcfg.validate();
    p.w_down = Tensor::randn({cfg.dim, inner}, rng, 0.08f, true);
    p.w_up = Tensor::randn({inner, cfg.dim}, rng, 0.08f, true);
    p.blocks.push_back(Block::init(p.pcfg, rng));
    p.blocks.push_back(Block::init(p.pcfg, rng));
    return p;
  }

  Tensor forward(const Tensor& codes) const {
    Tensor h = matmul(codes, w_down);
    for (const auto& b : blocks) h = block_forward(h, b, pcfg, AttnMask::full);
    return matmul(h, w_up);
  }

  template <class F>
  void for_each_param(F&& f) {
    f("projector.w_down", w_down);
    f("projector.w_up", w_up);
    for (size_t i = 0; i < blocks.size(); ++i)
      blocks[i].for_each_param("projector.block" + std::to_string(i), f);
  }
};

struct QuantizeResult {
  std::vector<int> ids;  // grid, row-major
  int h = 0, w = 0;
  Tensor z_q;     // selected code vectors [h*w x d], graph-connected to the codebook
  Tensor z_q_st;  // latent + detach(z_q - latent): decoder input, straight-through
};

// Nearest code by L2, ties to the lowest index. Plain left-to-right float
// accumulation; the brute-force oracle in the tests computes the identical
// expression.
inline int nearest_code(const float* v, const float* codes, int k, int d) {
  int best = 0;
  float best_dist = 0;
  for (int j = 0; j < d; ++j) {
    float diff = v[j] - codes[j];
    best_dist += diff * diff;
  }
  for (int i = 1; i < k; ++i) {
    float dist = 0;
    const float* row = codes + static_cast<size_t>(i) * d;
    for (int j = 0; j < d; ++j) {
      float diff = v[j] - row[j];
      dist += diff * diff;
    }
    if (dist < best_dist) {
      best_dist = dist;
      best = i;
    }
  }
  return best;
}

struct VQLosses {
  Tensor total, reconstruction, commitment, codebook, projector;
};

struct VQModel {
  VQConfig cfg;
  std::vector<Tensor> enc_kernels, enc_biases;
  std::vector<Tensor> dec_kernels, dec_biases;
  Tensor codebook;   // raw [K x d]
  Projector projector;
  Tensor effective;  // frozen projected codebook, set by finalize_effective
  bool effective_set = false;
  UsageWindow usage{0, 0};

  static VQModel init(const VQConfig& cfg, Rng& rng) {
    cfg.validate();
    VQModel m;
    m.cfg = cfg;
    m.usage = UsageWindow(cfg.codebook_size, cfg.usage_window);
    // Gain-scaled init: sqrt(2) for silu-followed convolutions, 1 for the
    // linear output convolutions, so activations keep their magnitude through
    // the stacks (a vanishing latent scale makes quantization degenerate).
    auto conv = [&](int cin, int cout, float gain) {
      float std = gain / std::sqrt(static_cast<float>(9 * cin));
      m.enc_kernels.push_back(Tensor::randn({3, 3, cin, cout}, rng, std, true));
      m.enc_biases.push_back(Tensor::zeros({cout}, true));
    };
    auto dconv = [&](int cin, int cout, float gain) {
      float std = gain / std::sqrt(static_cast<float>(9 * cin));
      m.dec_kernels.push_back(Tensor::randn({3, 3, cin, cout}, rng, std, true));
      m.dec_biases.push_back(Tensor::zeros({cout}, true));
    };
    const float kSilu = 1.414f, kLinear = 1.f;
    int levels = cfg.levels();
    auto width_at = [](int level) { return std::min(64, 32 << level); };
    conv(cfg.image_channels, 32, kSilu);
    for (int i = 0; i < levels; ++i) conv(width_at(i), width_at(i + 1), kSilu);
    conv(width_at(levels), cfg.dim, kLinear);
    dconv(cfg.dim, width_at(levels), kSilu);
    for (int i = levels; i > 0; --i) dconv(width_at(i), width_at(i - 1), kSilu);
    // The decoder classifies each pixel over the palette (plus background)
    // and emits the soft expectation; committing to a finite color basis
    // keeps reconstructions crisp where raw RGB regression stays soft.
    dconv(width_at(0), world::kColors + 1, kLinear);
    m.codebook = Tensor::randn({cfg.codebook_size, cfg.dim}, rng, 0.5f, true);
    m.projector = Projector::init(cfg, rng);
    m.effective = Tensor::zeros({cfg.codebook_size, cfg.dim});
    return m;
  }

  // [H x W x c] image -> [h x w x d] latent grid.
  Tensor encode(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != cfg.image_size || image.dim(1) != cfg.image_size ||
        image.dim(2) != cfg.image_channels)
      throw ConfigError("vq encode: image " + shape_str(image.shape()) + " does not match config " +
                        std::to_string(cfg.image_size));
    Tensor h = silu(bias_channels(conv2d(image, enc_kernels[0], 1), enc_biases[0]));
    int levels = cfg.levels();
    for (int i = 1; i <= levels; ++i)
      h = silu(bias_channels(conv2d(h, enc_kernels[static_cast<size_t>(i)], 2),
                             enc_biases[static_cast<size_t>(i)]));
    return bias_channels(conv2d(h, enc_kernels.back(), 1), enc_biases.back());
  }

  // Projector output during training; the frozen snapshot afterwards.
  Tensor effective_codebook() const {
    if (effective_set && !cfg.keep_projector_at_inference) return effective;
    return projector.forward(codebook);
  }

  QuantizeResult quantize(const Tensor& latent, const Tensor& codebook_eff, bool track_usage) {
    if (codebook_eff.dim(0) < 1) throw ConfigError("vq quantize: empty codebook");
    if (latent.rank() != 3 || latent.dim(2) != cfg.dim)
      throw DimensionError("vq quantize: latent " + shape_str(latent.shape()) +
                           " has wrong code dimension, want " + std::to_string(cfg.dim));
    QuantizeResult r;
    r.h = latent.dim(0);
    r.w = latent.dim(1);
    int n = r.h * r.w;
    r.ids.resize(static_cast<size_t>(n));
    const float* codes = codebook_eff.data().data();
    for (int i = 0; i < n; ++i)
      r.ids[static_cast<size_t>(i)] = nearest_code(latent.data().data() + static_cast<size_t>(i) * cfg.dim,
                                                   codes, codebook_eff.dim(0), cfg.dim);
    r.z_q = gather_rows(codebook_eff, r.ids);
    auto flat = reshape(latent, {n, cfg.dim});
    // Straight-through: the value is bit-for-bit the selected code vectors,
    // the gradient flows to the encoder latent unchanged.
    auto flat_node = flat.node();
    size_t len = r.z_q.data().size();
    r.z_q_st = make_op<float>("straight_through", r.z_q.shape(),
                              std::vector<float>(r.z_q.data()), {flat},
                              [flat_node, len](const float* g, GradientTape& t) {
                                t.accumulate(flat_node, g, len);
                              });
    if (track_usage) usage.push(r.ids);
    return r;
  }

  // [h*w x d] quantized rows -> image tensor [H x W x c]: per-pixel softmax
  // over the palette basis, then the expected color.
  Tensor decode_train(const Tensor& zq_rows) const {
    int g = cfg.grid();
    Tensor h = reshape(zq_rows, {g, g, cfg.dim});
    h = silu(bias_channels(conv2d(h, dec_kernels[0], 1), dec_biases[0]));
    int levels = cfg.levels();
    for (int i = 1; i <= levels; ++i) {
      h = upsample_nearest(h, 2);
      h = silu(bias_channels(conv2d(h, dec_kernels[static_cast<size_t>(i)], 1),
                             dec_biases[static_cast<size_t>(i)]));
    }
    auto logits = bias_channels(conv2d(h, dec_kernels.back(), 1), dec_biases.back());
    int n_colors = world::kColors + 1;
    auto probs = row_softmax_full(
        reshape(logits, {cfg.image_size * cfg.image_size, n_colors}));
    return reshape(matmul(probs, palette_basis()), {cfg.image_size, cfg.image_size, 3});
  }

  static Tensor palette_basis() {
    std::vector<float> rows;
    for (int c = 0; c < world::kColors; ++c)
      rows.insert(rows.end(), world::kPalette[c], world::kPalette[c] + 3);
    rows.insert(rows.end(), world::kBackground, world::kBackground + 3);
    return Tensor::from_data({world::kColors + 1, 3}, std::move(rows));
  }

  // Inference decode from ids, clamped to [0, 1].
  world::Image decode(const std::vector<int>& ids) {
    for (int id : ids)
      if (id < 0 || id >= cfg.codebook_size)
        throw IndexError("vq decode: id " + std::to_string(id) + " outside codebook");
    auto zq = gather_rows(detach(effective_codebook()), ids);
    auto img = decode_train(zq);
    world::Image out;
    out.size = cfg.image_size;
    out.rgb.resize(img.data().size());
    for (size_t i = 0; i < out.rgb.size(); ++i) out.rgb[i] = std::clamp(img.data()[i], 0.f, 1.f);
    return out;
  }

  // Encode + quantize against the frozen effective codebook.
  std::vector<int> tokenize(const world::Image& img) {
    auto t = Tensor::from_data({cfg.image_size, cfg.image_size, cfg.image_channels},
                               std::vector<float>(img.rgb.begin(), img.rgb.end()));
    auto latent = encode(t);
    auto eff = detach(effective_codebook());
    return quantize(latent, eff, false).ids;
  }

  void finalize_effective() {
    auto projected = projector.forward(codebook);
    effective = Tensor::from_data(projected.shape(), projected.data());
    effective_set = true;
  }

  template <class F>
  void for_each_vq_param(F&& f) {
    for (size_t i = 0; i < enc_kernels.size(); ++i) {
      f("vq.enc" + std::to_string(i) + ".kernel", enc_kernels[i]);
      f("vq.enc" + std::to_string(i) + ".bias", enc_biases[i]);
    }
    for (size_t i = 0; i < dec_kernels.size(); ++i) {
      f("vq.dec" + std::to_string(i) + ".kernel", dec_kernels[i]);
      f("vq.dec" + std::to_string(i) + ".bias", dec_biases[i]);
    }
    f("vq.codebook", codebook);
    f("vq.effective", effective);
  }
};

// total = MSE(image, recon) + beta * ||latent - sg(z_q)||^2
//       + ||sg(latent) - z_q||^2 + lambda * MSE(codebook, projected codebook).
// All terms are means over their elements.
inline VQLosses vq_losses(const VQConfig& cfg, const Tensor& image, const Tensor& reconstruction,
                          const Tensor& latent, const Tensor& z_q, const Tensor& codebook,
                          const Tensor& projected) {
  VQLosses l;
  int n = latent.dim(0) * latent.dim(1);
  auto flat = reshape(latent, {n, latent.dim(2)});
  l.reconstruction = mse(image, reconstruction);
  l.commitment = mse(flat, detach(z_q));
  l.codebook = mse(detach(flat), z_q);
  l.projector = mse(codebook, projected);
  l.total = add(add(l.reconstruction, scale(l.commitment, cfg.beta)),
                add(l.codebook, scale(l.projector, cfg.lambda_proj)));
  return l;
}

}  // namespace star::vq
