// Stacked autoregressive expansion over a frozen base transformer.
//
// The unified model is the base block stack followed by the stacked blocks
// (depth concatenation). The base owns the text embedding, text head, final
// norm and semantic adapter and is frozen after its own pretraining; the
// stack is copy-initialized from the final N base layers and trained with a
// single next-token objective over mixed text/visual sequences. Understanding
// runs through the base path only, which is what keeps its outputs
// bit-identical across generation training.
#pragma once

#include <set>

#include "star/synthworld.hpp"
#include "star/transformer.hpp"

namespace star::ar {

enum class Modality : int { text = 0, control, semantic, visual };
enum class TaskTag : int { understand = 0, generate, edit, reason };

struct SeqItem {
  Modality mod = Modality::text;
  int id = -1;                   // joint-vocab id (text/control/visual)
  std::vector<float> embedding;  // semantic items only
  float loss_weight = 0.f;
};

struct MixedSequence {
  TaskTag task = TaskTag::generate;
  std::vector<SeqItem> items;
  int grid_h = 0, grid_w = 0;  // target grid extents where applicable

  int length() const { return static_cast<int>(items.size()); }
};

struct StackedConfig {
  ModelConfig base;       // depth/width/heads/vocab of the base transformer
  int stack_layers = 2;   // N
  int code_dim = 32;      // VQ embedding dimension feeding the gen adapter
  int sem_patch = 4;      // semantic tokens are raw sem_patch^2*3 image patches
  int image_grid = 4;     // visual token grid extent

  int sem_dim() const { return sem_patch * sem_patch * 3; }

  void validate() const {
    base.validate();
    if (stack_layers < 0 || stack_layers > base.depth)
      throw ConfigError("stack layers " + std::to_string(stack_layers) + " outside [0, depth=" +
                        std::to_string(base.depth) + "]");
  }
};

struct SamplerConfig {
  float temperature = 1.0f;
  int top_k = 0;  // 0 or >=K means unrestricted
  float guidance_scale = 0.f;  // 0 = off
  uint64_t seed = 0;

  void validate(int k) const {
    if (temperature <= 0) throw ConfigError("sampler: temperature must be > 0");
    if (top_k < 0 || top_k > k) throw ConfigError("sampler: top_k outside [0, K]");
  }
  bool greedy() const { return temperature < 1e-6f || top_k == 1; }
};

struct UnifiedModel {
  StackedConfig cfg;
  // T_base
  std::vector<Block> base_blocks;
  Tensor text_embed;   // [(text+control) x width]
  Tensor base_norm;    // [width]
  Tensor text_head;    // [width x (text+control)]
  Tensor sem_adapter;  // [sem_dim x width]
  // T_stack and generation pieces
  std::vector<Block> stack_blocks;
  Tensor gen_adapter;  // [code_dim x width]
  Tensor gen_head;     // [width x (control + K)]
  Tensor gen_norm;     // [width]

  static UnifiedModel init_base(const StackedConfig& cfg, Rng& rng, bool trainable = true) {
    cfg.validate();
    UnifiedModel m;
    m.cfg = cfg;
    int w = cfg.base.width;
    int tc = cfg.base.vocab.text + cfg.base.vocab.control;
    for (int i = 0; i < cfg.base.depth; ++i) m.base_blocks.push_back(Block::init(cfg.base, rng, trainable));
    m.text_embed = Tensor::randn({tc, w}, rng, 0.02f, trainable);
    m.base_norm = Tensor::full({w}, 1.f, trainable);
    m.text_head = Tensor::randn({w, tc}, rng, 0.02f, trainable);
    m.sem_adapter = Tensor::randn({cfg.sem_dim(), w}, rng, 0.02f, trainable);
    // Generation pieces exist from the start but stay untrained until expand.
    m.gen_adapter = Tensor::zeros({cfg.code_dim, w});
    m.gen_head = Tensor::zeros({w, cfg.base.vocab.control + cfg.base.vocab.visual});
    m.gen_norm = Tensor::full({w}, 1.f);
    return m;
  }

  bool expanded() const { return !stack_blocks.empty() || cfg.stack_layers == 0; }
};

// Copies the final N base blocks into a trainable stack and freshly
// initializes the generation adapter and head. The base is untouched.
inline void stack_expand(UnifiedModel& m, int n, Rng& rng, bool copy_init = true) {
  if (n < 0 || n > static_cast<int>(m.base_blocks.size()))
    throw ConfigError("stack_expand: N=" + std::to_string(n) + " exceeds base depth " +
                      std::to_string(m.base_blocks.size()));
  m.cfg.stack_layers = n;
  m.stack_blocks.clear();
  for (int i = static_cast<int>(m.base_blocks.size()) - n; i < static_cast<int>(m.base_blocks.size()); ++i) {
    m.stack_blocks.push_back(copy_init ? Block::copy_of(m.base_blocks[static_cast<size_t>(i)], true)
                                       : Block::init(m.cfg.base, rng, true));
  }
  int w = m.cfg.base.width;
  m.gen_adapter = Tensor::randn({m.cfg.code_dim, w}, rng, 0.02f, true);
  m.gen_head = Tensor::randn({w, m.cfg.base.vocab.control + m.cfg.base.vocab.visual}, rng, 0.02f, true);
  m.gen_norm = Tensor::from_data({w}, m.base_norm.data(), true);
}

// ---------------------------------------------------------------------------
// Parameter bookkeeping / freeze masks
// ---------------------------------------------------------------------------

template <class F>
void for_each_base_param(UnifiedModel& m, F&& f) {
  for (size_t i = 0; i < m.base_blocks.size(); ++i)
    m.base_blocks[i].for_each_param("base.block" + std::to_string(i), f);
  f("base.text_embed", m.text_embed);
  f("base.norm", m.base_norm);
  f("base.text_head", m.text_head);
  f("base.sem_adapter", m.sem_adapter);
}

template <class F>
void for_each_stack_param(UnifiedModel& m, F&& f) {
  for (size_t i = 0; i < m.stack_blocks.size(); ++i)
    m.stack_blocks[i].for_each_param("stack.block" + std::to_string(i), f);
}

template <class F>
void for_each_generation_param(UnifiedModel& m, F&& f) {
  f("adapters.gen", m.gen_adapter);
  f("heads.gen", m.gen_head);
  f("heads.gen_norm", m.gen_norm);
}

// Trainable parameter names per training stage; everything else is frozen.
struct FreezeMask {
  std::set<std::string> trainable;

  static FreezeMask for_stage(int stage, UnifiedModel& m) {
    FreezeMask mask;
    auto take = [&](const std::string& n, Tensor&) { mask.trainable.insert(n); };
    switch (stage) {
      case 0:
        for_each_base_param(m, take);
        break;
      case 2:
      case 4:
        for_each_stack_param(m, take);
        for_each_generation_param(m, take);
        break;
      default:
        break;  // stages 1 and 3 train no AR parameters
    }
    return mask;
  }

  bool contains(const std::string& name) const { return trainable.count(name) > 0; }
};

// ---------------------------------------------------------------------------
// Sequence assembly
// ---------------------------------------------------------------------------

namespace detail {

inline SeqItem ctl_item(world::Ctl c, const VocabLayout& v, float weight = 0.f) {
  SeqItem it;
  it.mod = Modality::control;
  it.id = world::control_id(c, v);
  it.loss_weight = weight;
  return it;
}

inline SeqItem text_item(int id, float weight = 0.f) {
  SeqItem it;
  it.mod = Modality::text;
  it.id = id;
  it.loss_weight = weight;
  return it;
}

inline SeqItem visual_item(int code, const VocabLayout& v, float weight) {
  SeqItem it;
  it.mod = Modality::visual;
  it.id = world::visual_id(code, v);
  it.loss_weight = weight;
  return it;
}

}  // namespace detail

// Layout: [BOS][text][BOI_SRC sem* src*]? [REASON latent* EOR]? [BOI target* EOI].
// Loss weights sit on target visual tokens and the closing EOI for
// generation-family tasks, and on answer text plus EOS for understanding.
// When `target` is absent the sequence ends right after BOI (a decode prompt).
struct AssembleArgs {
  TaskTag task = TaskTag::generate;
  std::vector<int> text;                          // word ids (text segment)
  std::vector<std::vector<float>> semantic;       // raw semantic features
  const std::vector<int>* source_codes = nullptr; // visual codes [0,K)
  const std::vector<int>* target_codes = nullptr;
  const std::vector<int>* latent_text = nullptr;  // reasoning tokens (word ids)
  std::vector<int> answer;                        // understanding answer ids
  int grid_h = 0, grid_w = 0;
};

inline MixedSequence assemble_sequence(const VocabLayout& v, const AssembleArgs& a) {
  MixedSequence seq;
  seq.task = a.task;
  seq.grid_h = a.grid_h;
  seq.grid_w = a.grid_w;
  auto& items = seq.items;
  items.push_back(detail::ctl_item(world::Ctl::bos, v));

  if (a.task == TaskTag::understand) {
    items.push_back(detail::ctl_item(world::Ctl::boi_src, v));
    for (const auto& e : a.semantic) {
      SeqItem it;
      it.mod = Modality::semantic;
      it.embedding = e;
      items.push_back(it);
    }
    if (a.source_codes)
      for (int c : *a.source_codes) items.push_back(detail::visual_item(c, v, 0.f));
    for (int id : a.text) items.push_back(detail::text_item(id));
    items.push_back(detail::ctl_item(world::Ctl::boa, v));
    for (int id : a.answer) items.push_back(detail::text_item(id, 1.f));
    items.push_back(detail::ctl_item(world::Ctl::eos, v, 1.f));
    return seq;
  }

  for (int id : a.text) items.push_back(detail::text_item(id));
  if (a.task == TaskTag::edit) {
    if (!a.source_codes) throw ContractError("edit sequence requires source visual ids");
    items.push_back(detail::ctl_item(world::Ctl::boi_src, v));
    for (const auto& e : a.semantic) {
      SeqItem it;
      it.mod = Modality::semantic;
      it.embedding = e;
      items.push_back(it);
    }
    for (int c : *a.source_codes) items.push_back(detail::visual_item(c, v, 0.f));
  }
  if (a.task == TaskTag::reason && a.latent_text && !a.latent_text->empty()) {
    items.push_back(detail::ctl_item(world::Ctl::reason, v));
    for (int id : *a.latent_text) items.push_back(detail::text_item(id));
    items.push_back(detail::ctl_item(world::Ctl::eor, v));
  }
  items.push_back(detail::ctl_item(world::Ctl::boi, v));
  if (a.target_codes) {
    if (a.grid_h * a.grid_w != static_cast<int>(a.target_codes->size()))
      throw ContractError("target grid extents do not match code count");
    for (int c : *a.target_codes) items.push_back(detail::visual_item(c, v, 1.f));
    items.push_back(detail::ctl_item(world::Ctl::eoi, v, 1.f));
  }
  return seq;
}

struct Segments {
  std::vector<int> text;
  int semantic_count = 0;
  std::vector<int> source_codes;
  std::vector<int> latent_text;
  std::vector<int> target_codes;
  std::vector<int> answer;
};

// Exact inverse of assemble_sequence over the segment structure.
inline Segments disassemble(const VocabLayout& v, const MixedSequence& seq) {
  Segments s;
  enum class Zone { text, source, latent, target, answer } zone = Zone::text;
  for (const auto& it : seq.items) {
    if (it.mod == Modality::semantic) {
      ++s.semantic_count;
      continue;
    }
    if (it.mod == Modality::control) {
      int c = it.id - v.control_begin();
      switch (static_cast<world::Ctl>(c)) {
        case world::Ctl::boi_src: zone = Zone::source; break;
        case world::Ctl::reason: zone = Zone::latent; break;
        case world::Ctl::eor: zone = Zone::text; break;
        case world::Ctl::boi: zone = Zone::target; break;
        case world::Ctl::boa: zone = Zone::answer; break;
        default: break;
      }
      continue;
    }
    int code = it.id - v.visual_begin();
    switch (zone) {
      case Zone::text:
        if (it.mod == Modality::text) s.text.push_back(it.id);
        break;
      case Zone::source:
        if (it.mod == Modality::visual) s.source_codes.push_back(code);
        else if (it.mod == Modality::text) { zone = Zone::text; s.text.push_back(it.id); }
        break;
      case Zone::latent:
        s.latent_text.push_back(it.id);
        break;
      case Zone::target:
        s.target_codes.push_back(code);
        break;
      case Zone::answer:
        s.answer.push_back(it.id);
        break;
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Forward paths
// ---------------------------------------------------------------------------

namespace detail {

// Per-modality bulk embedding, reassembled into sequence order with one
// gather over the grouped rows.
inline Tensor embed_sequence(const UnifiedModel& m, const MixedSequence& seq,
                             const Tensor& codebook_eff) {
  const auto& v = m.cfg.base.vocab;
  std::vector<int> tc_ids, vis_codes, perm(seq.items.size());
  std::vector<float> sem_rows;
  int sem_count = 0;
  for (const auto& it : seq.items) {
    if (it.mod == Modality::semantic) {
      if (static_cast<int>(it.embedding.size()) != m.cfg.sem_dim())
        throw DimensionError("semantic item dimension mismatch");
      sem_rows.insert(sem_rows.end(), it.embedding.begin(), it.embedding.end());
      ++sem_count;
    } else if (it.mod == Modality::visual) {
      if (!v.is_visual(it.id)) throw IndexError("visual item id outside visual segment");
      vis_codes.push_back(it.id - v.visual_begin());
    } else {
      if (it.id < 0 || it.id >= v.visual_begin())
        throw IndexError("text/control id outside its segment: " + std::to_string(it.id));
      tc_ids.push_back(it.id);
    }
  }
  std::vector<Tensor> groups;
  int tc_at = 0, vis_at = 0, sem_at = 0;
  int tc_base = 0, vis_base = 0, sem_base = 0;
  if (!tc_ids.empty()) groups.push_back(gather_rows(m.text_embed, tc_ids));
  if (!vis_codes.empty())
    groups.push_back(matmul(gather_rows(codebook_eff, vis_codes), m.gen_adapter));
  if (sem_count > 0)
    groups.push_back(matmul(
        Tensor::from_data({sem_count, m.cfg.sem_dim()}, std::move(sem_rows)), m.sem_adapter));
  // Establish group base offsets in the concatenated matrix.
  int offset = 0;
  if (!tc_ids.empty()) { tc_base = offset; offset += static_cast<int>(tc_ids.size()); }
  if (!vis_codes.empty()) { vis_base = offset; offset += static_cast<int>(vis_codes.size()); }
  if (sem_count > 0) { sem_base = offset; }
  for (size_t i = 0; i < seq.items.size(); ++i) {
    const auto& it = seq.items[i];
    if (it.mod == Modality::semantic) perm[i] = sem_base + sem_at++;
    else if (it.mod == Modality::visual) perm[i] = vis_base + vis_at++;
    else perm[i] = tc_base + tc_at++;
  }
  Tensor all = groups.size() == 1 ? groups[0] : concat(0, groups);
  return gather_rows(all, perm);
}

inline std::vector<int> iota_positions(int n, int start = 0) {
  std::vector<int> p(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) p[static_cast<size_t>(i)] = start + i;
  return p;
}

}  // namespace detail

// Full path: base blocks, stacked blocks, gen norm, joint [text|control|K]
// logits (text slice from the frozen text head, the rest from the gen head).
inline Tensor unified_logits(const UnifiedModel& m, const Tensor& embedded,
                             const std::vector<int>& positions, KVCacheT<float>* cache = nullptr) {
  Tensor h = embedded;
  size_t ci = 0;
  for (const auto& b : m.base_blocks)
    h = block_forward(h, b, m.cfg.base, AttnMask::causal, positions,
                      cache ? &cache->blocks[ci++] : nullptr);
  for (const auto& b : m.stack_blocks)
    h = block_forward(h, b, m.cfg.base, AttnMask::causal, positions,
                      cache ? &cache->blocks[ci++] : nullptr);
  auto hn = rms_norm(h, m.gen_norm);
  auto text_logits = matmul(hn, m.text_head);
  auto gen_logits = matmul(hn, m.gen_head);
  return concat(1, std::vector<Tensor>{slice(text_logits, 1, 0, m.cfg.base.vocab.text), gen_logits});
}

// Base path: base blocks, base norm, text head. Serves understanding and the
// reasoning phase; never touches stacked parameters.
inline Tensor base_logits(const UnifiedModel& m, const Tensor& embedded,
                          const std::vector<int>& positions, KVCacheT<float>* cache = nullptr) {
  Tensor h = embedded;
  size_t ci = 0;
  for (const auto& b : m.base_blocks)
    h = block_forward(h, b, m.cfg.base, AttnMask::causal, positions,
                      cache ? &cache->blocks[ci++] : nullptr);
  return matmul(rms_norm(h, m.base_norm), m.text_head);
}

// Masked next-token loss over the joint vocabulary at weighted positions.
inline Tensor ntp_loss(const UnifiedModel& m, const MixedSequence& seq,
                       const Tensor& codebook_eff) {
  int t_len = seq.length();
  std::vector<int> rows, targets;
  std::vector<float> weights;
  for (int t = 1; t < t_len; ++t) {
    const auto& it = seq.items[static_cast<size_t>(t)];
    if (it.loss_weight <= 0) continue;
    if (it.mod == Modality::semantic) throw ContractError("semantic items cannot carry loss");
    rows.push_back(t - 1);
    targets.push_back(it.id);
    weights.push_back(it.loss_weight);
  }
  if (rows.empty()) throw ContractError("ntp_loss: sequence has no weighted positions");
  auto embedded = detail::embed_sequence(m, seq, codebook_eff);
  auto logits = unified_logits(m, embedded, detail::iota_positions(t_len));
  return softmax_cross_entropy(gather_rows(logits, rows), targets, weights);
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

struct GenerateResult {
  std::vector<int> codes;  // grid, row-major, in [0, K)
  bool truncated = false;  // a non-visual token surfaced mid-grid
};

namespace detail {

inline int sample_visual(const std::vector<float>& logits_row, int vis_begin, int k,
                         const SamplerConfig& s, Rng& rng) {
  // Constrained decoding: only the visual segment competes.
  std::vector<std::pair<float, int>> cand(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) cand[static_cast<size_t>(i)] = {logits_row[static_cast<size_t>(vis_begin + i)], i};
  if (s.greedy()) {
    int best = 0;
    for (int i = 1; i < k; ++i)
      if (cand[static_cast<size_t>(i)].first > cand[static_cast<size_t>(best)].first) best = i;
    return cand[static_cast<size_t>(best)].second;
  }
  int keep = (s.top_k == 0 || s.top_k >= k) ? k : s.top_k;
  std::partial_sort(cand.begin(), cand.begin() + keep, cand.end(),
                    [](auto& a, auto& b) { return a.first > b.first; });
  float mx = cand[0].first;
  double denom = 0;
  std::vector<double> p(static_cast<size_t>(keep));
  for (int i = 0; i < keep; ++i) {
    p[static_cast<size_t>(i)] = std::exp((cand[static_cast<size_t>(i)].first - mx) / s.temperature);
    denom += p[static_cast<size_t>(i)];
  }
  double u = rng.next_unit() * denom;
  for (int i = 0; i < keep; ++i) {
    u -= p[static_cast<size_t>(i)];
    if (u <= 0) return cand[static_cast<size_t>(i)].second;
  }
  return cand[static_cast<size_t>(keep - 1)].second;
}

}  // namespace detail

// Core decode loop: feeds the prompt, then draws grid_h*grid_w ids using
// next_fn (joint-vocab ids). A non-visual id mid-grid pads the remainder with
// the final visual id and records a truncation warning.
template <class NextFn>
GenerateResult decode_visual_grid(const UnifiedModel& m, const MixedSequence& prompt,
                                  const Tensor& codebook_eff, int grid_h, int grid_w,
                                  NextFn&& next_fn) {
  const auto& v = m.cfg.base.vocab;
  KVCacheT<float> cache(m.base_blocks.size() + m.stack_blocks.size());
  auto embedded = detail::embed_sequence(m, prompt, codebook_eff);
  auto logits = unified_logits(m, embedded, detail::iota_positions(prompt.length()), &cache);
  GenerateResult out;
  int total = grid_h * grid_w;
  int vocab = v.total();
  std::vector<float> last(logits.data().end() - vocab, logits.data().end());
  for (int step = 0; step < total; ++step) {
    int joint = next_fn(last, step);
    if (!v.is_visual(joint)) {
      out.truncated = true;
      int pad = out.codes.empty() ? 0 : out.codes.back();
      while (static_cast<int>(out.codes.size()) < total) out.codes.push_back(pad);
      break;
    }
    int code = joint - v.visual_begin();
    out.codes.push_back(code);
    if (static_cast<int>(out.codes.size()) == total) break;
    MixedSequence one;
    one.items.push_back(detail::visual_item(code, v, 0.f));
    auto e = detail::embed_sequence(m, one, codebook_eff);
    auto l = unified_logits(m, e, {prompt.length() + step}, &cache);
    last.assign(l.data().end() - vocab, l.data().end());
  }
  return out;
}

// Autoregressive raster-order generation, constrained to the visual segment.
inline GenerateResult generate(const UnifiedModel& m, const MixedSequence& prompt,
                               const Tensor& codebook_eff, int grid_h, int grid_w,
                               const SamplerConfig& sampler) {
  const auto& v = m.cfg.base.vocab;
  sampler.validate(v.visual);
  Rng rng(sampler.seed, 0x9e11);
  return decode_visual_grid(m, prompt, codebook_eff, grid_h, grid_w,
                            [&](const std::vector<float>& logits_row, int) {
                              int code = detail::sample_visual(logits_row, v.visual_begin(),
                                                               v.visual, sampler, rng);
                              return world::visual_id(code, v);
                            });
}

// Editing: generation conditioned on the source grid (semantic tokens plus
// visual ids) and the instruction text.
inline GenerateResult edit(const UnifiedModel& m, const std::vector<int>& source_codes,
                           const std::vector<std::vector<float>>& source_semantic,
                           const std::vector<int>& instruction, const Tensor& codebook_eff,
                           int grid_h, int grid_w, const SamplerConfig& sampler) {
  if (static_cast<int>(source_codes.size()) != grid_h * grid_w)
    throw ContractError("edit: source grid shape mismatch");
  AssembleArgs a;
  a.task = TaskTag::edit;
  a.text = instruction;
  a.semantic = source_semantic;
  a.source_codes = &source_codes;
  a.grid_h = grid_h;
  a.grid_w = grid_w;
  auto prompt = assemble_sequence(m.cfg.base.vocab, a);
  return generate(m, prompt, codebook_eff, grid_h, grid_w, sampler);
}

struct ReasoningResult {
  std::vector<int> latent_text;  // word ids emitted by the base model
  GenerateResult image;
  bool latent_truncated = false;
};

// Phase 1: the base path alone continues the prompt greedily, up to L tokens
// or EOS. Phase 2: the latent tokens condition full-path generation. L = 0
// degrades to direct generation exactly.
inline ReasoningResult implicit_reasoning(const UnifiedModel& m, const std::vector<int>& prompt_text,
                                          const Tensor& codebook_eff, int grid_h, int grid_w,
                                          const SamplerConfig& sampler, int max_latent = 32) {
  const auto& v = m.cfg.base.vocab;
  ReasoningResult out;
  if (max_latent > 0) {
    KVCacheT<float> cache(m.base_blocks.size());
    MixedSequence seed;
    seed.items.push_back(detail::ctl_item(world::Ctl::bos, v));
    for (int id : prompt_text) seed.items.push_back(detail::text_item(id));
    auto logits = base_logits(m, detail::embed_sequence(m, seed, codebook_eff),
                              detail::iota_positions(seed.length()), &cache);
    int tc = v.text + v.control;
    std::vector<float> last(logits.data().end() - tc, logits.data().end());
    int eos = world::control_id(world::Ctl::eos, v);
    for (int step = 0; step < max_latent; ++step) {
      int best = 0;
      for (int i = 1; i < tc; ++i)
        if (last[static_cast<size_t>(i)] > last[static_cast<size_t>(best)]) best = i;
      if (best == eos) break;
      if (best >= v.text) break;  // any other control token also terminates
      out.latent_text.push_back(best);
      if (step + 1 == max_latent) {
        out.latent_truncated = true;
        break;
      }
      MixedSequence one;
      one.items.push_back(detail::text_item(best));
      auto l = base_logits(m, detail::embed_sequence(m, one, codebook_eff),
                           {seed.length() + step}, &cache);
      last.assign(l.data().end() - tc, l.data().end());
    }
  }
  AssembleArgs a;
  a.task = TaskTag::reason;
  a.text = prompt_text;
  a.latent_text = &out.latent_text;
  a.grid_h = grid_h;
  a.grid_w = grid_w;
  auto prompt = assemble_sequence(v, a);
  out.image = generate(m, prompt, codebook_eff, grid_h, grid_w, sampler);
  return out;
}

// Raw sem_patch x sem_patch pixel patches as continuous semantic tokens.
inline std::vector<std::vector<float>> semantic_tokens(const world::Image& img, int sem_patch) {
  if (img.size % sem_patch != 0) throw ConfigError("semantic_tokens: patch does not tile image");
  int g = img.size / sem_patch;
  std::vector<std::vector<float>> out;
  for (int gy = 0; gy < g; ++gy)
    for (int gx = 0; gx < g; ++gx) {
      std::vector<float> feat;
      feat.reserve(static_cast<size_t>(sem_patch) * sem_patch * 3);
      for (int y = 0; y < sem_patch; ++y)
        for (int x = 0; x < sem_patch; ++x) {
          const float* px = img.px(gy * sem_patch + y, gx * sem_patch + x);
          feat.insert(feat.end(), px, px + 3);
        }
      out.push_back(std::move(feat));
    }
  return out;
}

}  // namespace star::ar
