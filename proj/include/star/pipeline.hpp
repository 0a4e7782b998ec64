// Task-progressive training pipeline.
//
// Stage 0 pretrains the text/understanding base (the artifact's stand-in for
// a pretrained backbone), stage 1 the vector quantizer, stage 2 the stacked
// AR on generation data, stage 3 the diffusion decoder against ground-truth
// VQ embeddings, stage 4 the stack and decoder jointly on generation plus
// editing. Every stage trains exactly its documented section set; everything
// else is frozen by construction.
#pragma once

#include <filesystem>
#include <optional>

#include "star/checkpoint.hpp"
#include "star/config.hpp"
#include "star/diffusion.hpp"
#include "star/metrics.hpp"
#include "star/optimizer.hpp"
#include "star/stacked_ar.hpp"
#include "star/synthworld.hpp"
#include "star/vq.hpp"

namespace star::pipeline {

enum class Schedule { constant, cosine };

inline Schedule schedule_from_name(const std::string& s) {
  if (s == "constant") return Schedule::constant;
  if (s == "cosine") return Schedule::cosine;
  throw ConfigError("unknown schedule: " + s);
}

inline float lr_at(Schedule sch, float lr, long long step, long long total) {
  if (sch == Schedule::constant) return lr;
  double x = static_cast<double>(step) / static_cast<double>(std::max<long long>(1, total));
  return static_cast<float>(lr * 0.5 * (1.0 + std::cos(3.141592653589793 * x)));
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct PipelineConfig {
  vq::VQConfig vqc;
  ar::StackedConfig arc;
  diffusion::DiffusionConfig dcfg;
  uint64_t corpus_seed = 1000;
  int train_size = 50000;
  int edit_size = 10000;
  uint64_t kb_seed = 42;

  static PipelineConfig defaults() {
    PipelineConfig pc;
    pc.vqc.codebook_size = 512;
    pc.vqc.dim = 32;
    pc.vqc.downsample = 4;
    pc.vqc.image_size = 16;
    pc.arc.base.depth = 4;
    pc.arc.base.width = 128;
    pc.arc.base.heads = 4;
    pc.arc.base.ffn_hidden = 256;
    pc.arc.base.max_seq = 512;
    pc.arc.stack_layers = 2;
    pc.dcfg.latent_size = 32;
    pc.dcfg.vq_dim = 32;
    pc.dcfg.vq_grid = 4;
    pc.dcfg.patch = 4;
    pc.dcfg.width = 96;
    pc.dcfg.depth = 3;
    pc.dcfg.heads = 4;
    pc.dcfg.ffn_hidden = 192;
    pc.finalize();
    return pc;
  }

  // A reduced geometry for ablation cells and smoke runs.
  static PipelineConfig small() {
    PipelineConfig pc = defaults();
    pc.arc.base.width = 64;
    pc.arc.base.ffn_hidden = 128;
    pc.arc.base.depth = 2;
    pc.arc.stack_layers = 1;
    pc.dcfg.width = 64;
    pc.dcfg.depth = 2;
    pc.dcfg.ffn_hidden = 128;
    pc.train_size = 20000;
    pc.edit_size = 5000;
    pc.finalize();
    return pc;
  }

  void finalize() {
    arc.base.vocab = world::make_vocab_layout(vqc.codebook_size);
    arc.code_dim = vqc.dim;
    arc.image_grid = vqc.grid();
    dcfg.vq_dim = vqc.dim;
    dcfg.vq_grid = vqc.grid();
    vqc.validate();
    arc.validate();
    dcfg.validate();
  }

  nlohmann::json to_json() const {
    return {
        {"vq",
         {{"codebook_size", vqc.codebook_size},
          {"dim", vqc.dim},
          {"downsample", vqc.downsample},
          {"image_size", vqc.image_size},
          {"beta", vqc.beta},
          {"lambda_proj", vqc.lambda_proj},
          {"usage_window", vqc.usage_window},
          {"keep_projector_at_inference", vqc.keep_projector_at_inference}}},
        {"model",
         {{"depth", arc.base.depth},
          {"width", arc.base.width},
          {"heads", arc.base.heads},
          {"ffn_hidden", arc.base.ffn_hidden},
          {"max_seq", arc.base.max_seq},
          {"rotary_base", arc.base.rotary_base},
          {"stack_layers", arc.stack_layers},
          {"sem_patch", arc.sem_patch}}},
        {"diffusion",
         {{"latent_size", dcfg.latent_size},
          {"patch", dcfg.patch},
          {"width", dcfg.width},
          {"depth", dcfg.depth},
          {"heads", dcfg.heads},
          {"ffn_hidden", dcfg.ffn_hidden},
          {"sampler_steps", dcfg.sampler_steps},
          {"upscale", dcfg.upscale},
          {"max_text_len", dcfg.max_text_len},
          {"strategy", diffusion::strategy_name(dcfg.strategy)}}},
        {"data",
         {{"corpus_seed", corpus_seed},
          {"train_size", train_size},
          {"edit_size", edit_size},
          {"kb_seed", kb_seed}}},
    };
  }

  static PipelineConfig from_json(const nlohmann::json& j) {
    PipelineConfig pc;
    const auto& v = j.at("vq");
    pc.vqc.codebook_size = v.at("codebook_size");
    pc.vqc.dim = v.at("dim");
    pc.vqc.downsample = v.at("downsample");
    pc.vqc.image_size = v.at("image_size");
    pc.vqc.beta = v.at("beta");
    pc.vqc.lambda_proj = v.at("lambda_proj");
    pc.vqc.usage_window = v.at("usage_window");
    pc.vqc.keep_projector_at_inference = v.at("keep_projector_at_inference");
    const auto& m = j.at("model");
    pc.arc.base.depth = m.at("depth");
    pc.arc.base.width = m.at("width");
    pc.arc.base.heads = m.at("heads");
    pc.arc.base.ffn_hidden = m.at("ffn_hidden");
    pc.arc.base.max_seq = m.at("max_seq");
    pc.arc.base.rotary_base = m.at("rotary_base");
    pc.arc.stack_layers = m.at("stack_layers");
    pc.arc.sem_patch = m.at("sem_patch");
    const auto& d = j.at("diffusion");
    pc.dcfg.latent_size = d.at("latent_size");
    pc.dcfg.patch = d.at("patch");
    pc.dcfg.width = d.at("width");
    pc.dcfg.depth = d.at("depth");
    pc.dcfg.heads = d.at("heads");
    pc.dcfg.ffn_hidden = d.at("ffn_hidden");
    pc.dcfg.sampler_steps = d.at("sampler_steps");
    pc.dcfg.upscale = d.at("upscale");
    pc.dcfg.max_text_len = d.at("max_text_len");
    pc.dcfg.strategy = diffusion::strategy_from_name(d.at("strategy"));
    const auto& dat = j.at("data");
    pc.corpus_seed = dat.at("corpus_seed");
    pc.train_size = dat.at("train_size");
    pc.edit_size = dat.at("edit_size");
    pc.kb_seed = dat.at("kb_seed");
    pc.finalize();
    return pc;
  }
};

struct StageOpts {
  int stage = 1;
  float lr = 3e-4f;
  Schedule schedule = Schedule::constant;
  int batch = 32;
  int steps = 1000;
  int log_interval = 50;
  float stage4_gen_fraction = 0.6f;  // generation share of the stage-4 mix
  float kb_fraction = 0.f;           // KB reason-format share of stage-2 data
  float ntp_weight = 1.f;            // stage-4 joint loss weights
  float diff_weight = 1.f;
  std::string metrics_path;
  bool include_wall_time = true;

  // Desk-scale budgets; stage 1 cosine and a 10x learning-rate step between
  // the quantizer/decoder stages and the AR stages.
  static StageOpts defaults_for(int stage) {
    StageOpts o;
    o.stage = stage;
    switch (stage) {
      case 0: o.lr = 1e-3f; o.schedule = Schedule::cosine; o.steps = 1500; break;
      case 1: o.lr = 4e-4f; o.schedule = Schedule::cosine; o.steps = 3000; break;
      case 2: o.lr = 4e-3f; o.schedule = Schedule::constant; o.steps = 5000; break;
      case 3: o.lr = 4e-4f; o.schedule = Schedule::constant; o.steps = 2000; break;
      case 4: o.lr = 4e-3f; o.schedule = Schedule::constant; o.steps = 3000; break;
      default: throw ConfigError("no such stage: " + std::to_string(stage));
    }
    return o;
  }

  void apply_tree(const io::ConfigTree& t) {
    lr = static_cast<float>(t.get_double("stage.lr", lr));
    schedule = schedule_from_name(t.get_string(
        "stage.schedule", schedule == Schedule::cosine ? "cosine" : "constant"));
    batch = static_cast<int>(t.get_int("stage.batch", batch));
    steps = static_cast<int>(t.get_int("stage.steps", steps));
    log_interval = static_cast<int>(t.get_int("stage.log_interval", log_interval));
    stage4_gen_fraction =
        static_cast<float>(t.get_double("stage.gen_fraction", stage4_gen_fraction));
    kb_fraction = static_cast<float>(t.get_double("stage.kb_fraction", kb_fraction));
    ntp_weight = static_cast<float>(t.get_double("stage.ntp_weight", ntp_weight));
    diff_weight = static_cast<float>(t.get_double("stage.diff_weight", diff_weight));
    metrics_path = t.get_string("metrics.path", metrics_path);
    include_wall_time = t.get_bool("metrics.include_wall_time", include_wall_time);
  }
};

inline PipelineConfig pipeline_config_from_tree(const io::ConfigTree& t) {
  PipelineConfig pc = PipelineConfig::defaults();
  pc.vqc.codebook_size = static_cast<int>(t.get_int("vq.codebook_size", pc.vqc.codebook_size));
  pc.vqc.dim = static_cast<int>(t.get_int("vq.dim", pc.vqc.dim));
  pc.vqc.downsample = static_cast<int>(t.get_int("vq.downsample", pc.vqc.downsample));
  pc.vqc.image_size = static_cast<int>(t.get_int("vq.image_size", pc.vqc.image_size));
  pc.vqc.beta = static_cast<float>(t.get_double("vq.beta", pc.vqc.beta));
  pc.vqc.lambda_proj = static_cast<float>(t.get_double("vq.lambda_proj", pc.vqc.lambda_proj));
  pc.vqc.usage_window = static_cast<int>(t.get_int("vq.usage_window", pc.vqc.usage_window));
  pc.vqc.keep_projector_at_inference =
      t.get_bool("vq.keep_projector_at_inference", pc.vqc.keep_projector_at_inference);
  pc.arc.base.depth = static_cast<int>(t.get_int("model.depth", pc.arc.base.depth));
  pc.arc.base.width = static_cast<int>(t.get_int("model.width", pc.arc.base.width));
  pc.arc.base.heads = static_cast<int>(t.get_int("model.heads", pc.arc.base.heads));
  pc.arc.base.ffn_hidden = static_cast<int>(t.get_int("model.ffn_hidden", pc.arc.base.ffn_hidden));
  pc.arc.base.max_seq = static_cast<int>(t.get_int("model.max_seq", pc.arc.base.max_seq));
  pc.arc.stack_layers = static_cast<int>(t.get_int("model.stack_layers", pc.arc.stack_layers));
  pc.dcfg.latent_size = static_cast<int>(t.get_int("diffusion.latent_size", pc.dcfg.latent_size));
  pc.dcfg.patch = static_cast<int>(t.get_int("diffusion.patch", pc.dcfg.patch));
  pc.dcfg.width = static_cast<int>(t.get_int("diffusion.width", pc.dcfg.width));
  pc.dcfg.depth = static_cast<int>(t.get_int("diffusion.depth", pc.dcfg.depth));
  pc.dcfg.heads = static_cast<int>(t.get_int("diffusion.heads", pc.dcfg.heads));
  pc.dcfg.ffn_hidden = static_cast<int>(t.get_int("diffusion.ffn_hidden", pc.dcfg.ffn_hidden));
  pc.dcfg.sampler_steps =
      static_cast<int>(t.get_int("diffusion.sampler_steps", pc.dcfg.sampler_steps));
  pc.dcfg.upscale = static_cast<int>(t.get_int("diffusion.upscale", pc.dcfg.upscale));
  pc.dcfg.strategy = diffusion::strategy_from_name(
      t.get_string("diffusion.strategy", diffusion::strategy_name(pc.dcfg.strategy)));
  pc.corpus_seed = static_cast<uint64_t>(t.get_int("data.corpus_seed", static_cast<long long>(pc.corpus_seed)));
  pc.train_size = static_cast<int>(t.get_int("data.train_size", pc.train_size));
  pc.edit_size = static_cast<int>(t.get_int("data.edit_size", pc.edit_size));
  pc.kb_seed = static_cast<uint64_t>(t.get_int("data.kb_seed", static_cast<long long>(pc.kb_seed)));
  pc.finalize();
  return pc;
}

// ---------------------------------------------------------------------------
// Checkpoint assembly
// ---------------------------------------------------------------------------

inline io::Checkpoint collect_checkpoint(const PipelineConfig& pc, ar::UnifiedModel* model,
                                         vq::VQModel* vq_model,
                                         diffusion::DiffusionModel* diff) {
  io::Checkpoint ck;
  ck.config["pipeline"] = pc.to_json();
  ck.config["versions"] = {{"checkpoint", 1}, {"vq", 1}, {"ar", 1}, {"diffusion", 1}};
  if (model) {
    ar::for_each_base_param(*model, [&](const std::string& n, Tensor& t) { io::collect_param(ck, n, t); });
    if (!model->stack_blocks.empty()) {
      ar::for_each_stack_param(*model,
                               [&](const std::string& n, Tensor& t) { io::collect_param(ck, n, t); });
      ar::for_each_generation_param(
          *model, [&](const std::string& n, Tensor& t) { io::collect_param(ck, n, t); });
    }
    ck.config["stack_expanded"] = !model->stack_blocks.empty();
  }
  if (vq_model) {
    vq_model->for_each_vq_param([&](const std::string& n, Tensor& t) { io::collect_param(ck, n, t); });
    vq_model->projector.for_each_param(
        [&](const std::string& n, Tensor& t) { io::collect_param(ck, n, t); });
    ck.config["vq_effective_set"] = vq_model->effective_set;
  }
  if (diff)
    diff->for_each_param([&](const std::string& n, Tensor& t) { io::collect_param(ck, n, t); });
  return ck;
}

inline PipelineConfig config_of(const io::Checkpoint& ck) {
  return PipelineConfig::from_json(ck.config.at("pipeline"));
}

inline ar::UnifiedModel load_unified(const io::Checkpoint& ck, const PipelineConfig& pc,
                                     bool base_trainable, bool stack_trainable) {
  Rng rng(0);
  auto m = ar::UnifiedModel::init_base(pc.arc, rng, base_trainable);
  ar::for_each_base_param(m, [&](const std::string& n, Tensor& t) { io::restore_param(ck, n, t); });
  if (ck.config.value("stack_expanded", false)) {
    ar::stack_expand(m, pc.arc.stack_layers, rng);
    ar::for_each_stack_param(m, [&](const std::string& n, Tensor& t) { io::restore_param(ck, n, t); });
    ar::for_each_generation_param(m,
                                  [&](const std::string& n, Tensor& t) { io::restore_param(ck, n, t); });
    if (!stack_trainable) {
      // Rebuild the stacked pieces frozen.
      std::vector<Block> frozen;
      for (auto& b : m.stack_blocks) frozen.push_back(Block::copy_of(b, false));
      m.stack_blocks = std::move(frozen);
      m.gen_adapter = Tensor::from_data(m.gen_adapter.shape(), m.gen_adapter.data(), false);
      m.gen_head = Tensor::from_data(m.gen_head.shape(), m.gen_head.data(), false);
      m.gen_norm = Tensor::from_data(m.gen_norm.shape(), m.gen_norm.data(), false);
    }
  }
  return m;
}

inline vq::VQModel load_vq(const io::Checkpoint& ck, const PipelineConfig& pc, bool trainable) {
  Rng rng(0);
  auto m = vq::VQModel::init(pc.vqc, rng);
  m.for_each_vq_param([&](const std::string& n, Tensor& t) { io::restore_param(ck, n, t); });
  m.projector.for_each_param([&](const std::string& n, Tensor& t) { io::restore_param(ck, n, t); });
  m.effective_set = ck.config.value("vq_effective_set", false);
  if (!trainable) {
    // Freeze by rebuilding leaves without gradient participation.
    auto freeze = [](Tensor& t) { t = Tensor::from_data(t.shape(), t.data(), false); };
    for (auto& t : m.enc_kernels) freeze(t);
    for (auto& t : m.enc_biases) freeze(t);
    for (auto& t : m.dec_kernels) freeze(t);
    for (auto& t : m.dec_biases) freeze(t);
    freeze(m.codebook);
    freeze(m.projector.w_down);
    freeze(m.projector.w_up);
    for (auto& b : m.projector.blocks) b = Block::copy_of(b, false);
  }
  return m;
}

inline diffusion::DiffusionModel load_diffusion(const io::Checkpoint& ck, const PipelineConfig& pc,
                                                bool trainable) {
  Rng rng(0);
  auto m = diffusion::DiffusionModel::init(pc.dcfg, rng, trainable);
  m.for_each_param([&](const std::string& n, Tensor& t) { io::restore_param(ck, n, t); });
  return m;
}

// ---------------------------------------------------------------------------
// Training support
// ---------------------------------------------------------------------------

struct StageResult {
  bool aborted = false;
  long long steps_done = 0;
};

namespace detail {

// Snapshot/rollback of the registered trainables for abort-on-NaN recovery.
class Snapshotter {
 public:
  void track(Tensor t) { params_.push_back(std::move(t)); }
  void snapshot() {
    saved_.clear();
    for (auto& p : params_) saved_.push_back(p.data());
  }
  void rollback() {
    if (saved_.empty()) return;
    for (size_t i = 0; i < params_.size(); ++i) params_[i].raw_data() = saved_[i];
  }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> saved_;
};

inline Tensor image_tensor(const world::Image& img) {
  return Tensor::from_data({img.size, img.size, 3},
                           std::vector<float>(img.rgb.begin(), img.rgb.end()));
}

inline std::vector<int> clip_text(std::vector<int> ids, int max_len) {
  if (static_cast<int>(ids.size()) > max_len) ids.resize(static_cast<size_t>(max_len));
  return ids;
}

// Cross-entropy over the base path (stage-0 pretraining and understanding).
inline Tensor base_ntp_loss(const ar::UnifiedModel& m, const ar::MixedSequence& seq,
                            const Tensor& codebook_eff) {
  std::vector<int> rows, targets;
  std::vector<float> weights;
  for (int t = 1; t < seq.length(); ++t) {
    const auto& it = seq.items[static_cast<size_t>(t)];
    if (it.loss_weight <= 0) continue;
    rows.push_back(t - 1);
    targets.push_back(it.id);
    weights.push_back(it.loss_weight);
  }
  if (rows.empty()) throw ContractError("base ntp_loss: no weighted positions");
  auto logits = ar::base_logits(m, ar::detail::embed_sequence(m, seq, codebook_eff),
                                ar::detail::iota_positions(seq.length()));
  return softmax_cross_entropy(gather_rows(logits, rows), targets, weights);
}

}  // namespace detail

// Memoized VQ ids for corpus scenes (the stage-2/4 target tokens).
class TokenCache {
 public:
  TokenCache(vq::VQModel& vq_model) : vq_(vq_model) {}

  const std::vector<int>& ids_for(const world::SceneSpec& scene) {
    std::string key = world::caption(scene);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    auto ids = vq_.tokenize(world::render(scene, vq_.cfg.image_size));
    return cache_.emplace(std::move(key), std::move(ids)).first->second;
  }

 private:
  vq::VQModel& vq_;
  std::unordered_map<std::string, std::vector<int>> cache_;
};

// ---------------------------------------------------------------------------
// Stage 0: base pretraining (captions, knowledge facts, understanding)
// ---------------------------------------------------------------------------

inline StageResult run_stage0(const PipelineConfig& pc, const StageOpts& so, uint64_t seed,
                              ar::UnifiedModel& model, io::MetricsWriter& metrics) {
  auto kb = world::KnowledgeBase::make(pc.kb_seed);
  const auto& vocab_words = world::Vocabulary::instance();
  const auto& layout = pc.arc.base.vocab;
  AdamWConfig ocfg;
  ocfg.lr = so.lr;
  AdamW opt(ocfg);
  detail::Snapshotter snap;
  ar::for_each_base_param(model, [&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
    snap.track(p);
  });
  snap.snapshot();
  auto codebook_stub = Tensor::zeros({layout.visual, pc.arc.code_dim});
  Rng data_rng(seed, 0x57a6e0);
  StageResult res;
  for (int step = 0; step < so.steps; ++step) {
    opt.set_lr(lr_at(so.schedule, so.lr, step, so.steps));
    GradientTape tape;
    Tensor total;
    for (int b = 0; b < so.batch; ++b) {
      Rng r = data_rng.split(static_cast<uint64_t>(step) * 1000 + static_cast<uint64_t>(b));
      double pick = r.next_unit();
      ar::MixedSequence seq;
      if (pick < 0.20) {
        // Understanding: describe a rendered scene from its semantic tokens.
        auto scene = world::sample_scene(r, 0, 3);
        ar::AssembleArgs a;
        a.task = ar::TaskTag::understand;
        a.text = vocab_words.encode("describe the image");
        a.semantic = ar::semantic_tokens(world::render(scene, pc.vqc.image_size), pc.arc.sem_patch);
        a.answer = vocab_words.encode(world::caption(scene));
        seq = ar::assemble_sequence(layout, a);
      } else {
        // Plain language modelling over captions or knowledge facts.
        std::string text;
        if (pick < 0.40) {
          const auto& e = kb.entries[r.next_below(kb.entries.size())];
          text = world::KnowledgeBase::fact_text(e);
        } else {
          text = world::caption(world::sample_scene(r, 0, 3));
        }
        seq.task = ar::TaskTag::understand;
        seq.items.push_back(ar::detail::ctl_item(world::Ctl::bos, layout));
        for (int id : vocab_words.encode(text)) seq.items.push_back(ar::detail::text_item(id, 1.f));
        seq.items.push_back(ar::detail::ctl_item(world::Ctl::eos, layout, 1.f));
      }
      auto loss = detail::base_ntp_loss(model, seq, codebook_stub);
      total = b == 0 ? loss : add(total, loss);
    }
    total = scale(total, 1.f / static_cast<float>(so.batch));
    tape.backward(total);
    try {
      opt.step(tape);
    } catch (const TrainingAbort&) {
      snap.rollback();
      res.aborted = true;
      return res;
    }
    ++res.steps_done;
    if (step % so.log_interval == 0 || step + 1 == so.steps) {
      snap.snapshot();
      metrics.record(0, step, {{"loss", total.item()}, {"lr", opt.lr()}});
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Stage 1: vector quantization pretraining
// ---------------------------------------------------------------------------

// Seeds the codebook from encoder latents of corpus images (small jitter to
// split duplicate rows). A codebook initialized at the wrong scale collapses
// onto a handful of codes before the commitment loss can spread it.
inline void data_init_codebook(vq::VQModel& model, const PipelineConfig& pc, uint64_t seed) {
  int k = model.cfg.codebook_size, d = model.cfg.dim;
  std::vector<float> rows;
  rows.reserve(static_cast<size_t>(k) * d);
  Rng r(seed, 0xc0deb001);
  int grid_n = model.cfg.grid() * model.cfg.grid();
  while (static_cast<int>(rows.size()) < k * d) {
    auto idx = r.next_below(static_cast<uint64_t>(pc.train_size));
    auto sample = world::gen_sample(pc.corpus_seed, idx);
    auto latent =
        model.encode(detail::image_tensor(world::render(sample.scene, model.cfg.image_size)));
    for (int i = 0; i < grid_n && static_cast<int>(rows.size()) < k * d; ++i) {
      if (r.next_unit() < 0.5) continue;  // decorrelate across images
      const float* p = latent.data().data() + static_cast<size_t>(i) * d;
      rows.insert(rows.end(), p, p + d);
    }
  }
  // Componentwise jitter proportional to the collected spread.
  double mean = 0, var = 0;
  for (float v : rows) mean += v;
  mean /= static_cast<double>(rows.size());
  for (float v : rows) var += (v - mean) * (v - mean);
  float jitter = static_cast<float>(0.05 * std::sqrt(var / static_cast<double>(rows.size()))) + 1e-3f;
  for (auto& v : rows) v += jitter * static_cast<float>(r.normal());
  model.codebook.raw_data() = std::move(rows);
}

// Fits the projector toward the identity on the current codebook so the
// effective codes start near the data-initialized ones.
inline void warmup_projector(vq::VQModel& model, int steps, float lr) {
  AdamWConfig ocfg;
  ocfg.lr = lr;
  ocfg.weight_decay = 0.f;
  AdamW opt(ocfg);
  model.projector.for_each_param(
      [&](const std::string& n, Tensor& p) { opt.register_param(n, p); });
  auto target = detach(model.codebook);
  for (int i = 0; i < steps; ++i) {
    GradientTape tape;
    tape.backward(mse(target, model.projector.forward(model.codebook)));
    opt.step(tape);
  }
}

inline StageResult run_stage1(const PipelineConfig& pc, const StageOpts& so, uint64_t seed,
                              vq::VQModel& model, io::MetricsWriter& metrics,
                              bool with_projector = true, bool data_init = true) {
  if (data_init) {
    data_init_codebook(model, pc, seed);
    if (with_projector) warmup_projector(model, 300, 2e-3f);
  }
  AdamWConfig ocfg;
  ocfg.lr = so.lr;
  AdamW opt(ocfg);
  detail::Snapshotter snap;
  model.for_each_vq_param([&](const std::string& n, Tensor& p) {
    if (n == "vq.effective") return;  // derived, not trained
    opt.register_param(n, p);
    snap.track(p);
  });
  if (with_projector)
    model.projector.for_each_param([&](const std::string& n, Tensor& p) {
      opt.register_param(n, p);
      snap.track(p);
    });
  snap.snapshot();
  Rng data_rng(seed, 0x57a6e1);
  StageResult res;
  for (int step = 0; step < so.steps; ++step) {
    opt.set_lr(lr_at(so.schedule, so.lr, step, so.steps));
    GradientTape tape;
    // The effective codebook for the step: projected when the projector is
    // active, the raw codebook otherwise (the ablation arm).
    Tensor eff = with_projector ? model.projector.forward(model.codebook) : model.codebook;
    Tensor total;
    Rng r = data_rng.split(static_cast<uint64_t>(step));
    for (int b = 0; b < so.batch; ++b) {
      auto idx = r.next_below(static_cast<uint64_t>(pc.train_size));
      auto sample = world::gen_sample(pc.corpus_seed, idx);
      auto img = detail::image_tensor(world::render(sample.scene, pc.vqc.image_size));
      auto latent = model.encode(img);
      auto q = model.quantize(latent, eff, true);
      auto rec = model.decode_train(q.z_q_st);
      auto l = vq::vq_losses(pc.vqc, img, rec, latent, q.z_q, model.codebook, eff);
      total = b == 0 ? l.total : add(total, l.total);
    }
    total = scale(total, 1.f / static_cast<float>(so.batch));
    tape.backward(total);
    try {
      opt.step(tape);
    } catch (const TrainingAbort&) {
      snap.rollback();
      res.aborted = true;
      return res;
    }
    ++res.steps_done;
    if (step % so.log_interval == 0 || step + 1 == so.steps) {
      snap.snapshot();
      auto stats = vq::codebook_stats(model.usage);
      metrics.record(1, step,
                     {{"loss", total.item()},
                      {"utilization", stats.utilization},
                      {"perplexity", stats.perplexity},
                      {"lr", opt.lr()}});
    }
  }
  if (with_projector) {
    model.finalize_effective();
  } else {
    model.effective = Tensor::from_data(model.codebook.shape(), model.codebook.data());
    model.effective_set = true;
  }
  return res;
}

// Held-out reconstruction error, mean squared per channel sample.
inline double eval_recon_mse(vq::VQModel& model, const PipelineConfig& pc, int count) {
  double total = 0;
  long long n = 0;
  for (int i = 0; i < count; ++i) {
    auto sample = world::gen_sample(pc.corpus_seed, static_cast<uint64_t>(pc.train_size + i));
    auto img = world::render(sample.scene, pc.vqc.image_size);
    auto rec = model.decode(model.tokenize(img));
    for (size_t j = 0; j < img.rgb.size(); ++j) {
      double d = img.rgb[j] - rec.rgb[j];
      total += d * d;
      ++n;
    }
  }
  return total / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Stage 2: stacked AR text-to-image pretraining
// ---------------------------------------------------------------------------

struct Stage2Data {
  ar::MixedSequence seq;
  world::SceneSpec scene;
};

inline Stage2Data make_stage2_sample(const PipelineConfig& pc, TokenCache& tokens,
                                     const world::KnowledgeBase& kb, float kb_fraction, Rng& r) {
  const auto& layout = pc.arc.base.vocab;
  const auto& vocab_words = world::Vocabulary::instance();
  Stage2Data out;
  int grid = pc.vqc.grid();
  if (kb_fraction > 0 && r.next_unit() < kb_fraction) {
    const auto& e = kb.entries[r.next_below(kb.entries.size())];
    out.scene = world::KnowledgeBase::target_scene(e);
    ar::AssembleArgs a;
    a.task = ar::TaskTag::reason;
    a.text = vocab_words.encode(world::KnowledgeBase::prompt_text(e));
    world::SceneObject obj{e.shape, e.color, e.cell, world::ObjSize::large};
    auto latent = vocab_words.encode("is " + world::object_phrase(obj));
    a.latent_text = &latent;
    auto ids = tokens.ids_for(out.scene);
    a.target_codes = &ids;
    a.grid_h = a.grid_w = grid;
    out.seq = ar::assemble_sequence(layout, a);
    return out;
  }
  auto sample = world::gen_sample(pc.corpus_seed, r.next_below(static_cast<uint64_t>(pc.train_size)));
  out.scene = sample.scene;
  ar::AssembleArgs a;
  a.task = ar::TaskTag::generate;
  a.text = vocab_words.encode(sample.prompt);
  auto ids = tokens.ids_for(out.scene);
  a.target_codes = &ids;
  a.grid_h = a.grid_w = grid;
  out.seq = ar::assemble_sequence(layout, a);
  return out;
}

inline StageResult run_stage2(const PipelineConfig& pc, const StageOpts& so, uint64_t seed,
                              ar::UnifiedModel& model, vq::VQModel& vq_model,
                              io::MetricsWriter& metrics) {
  if (model.stack_blocks.empty() && pc.arc.stack_layers > 0)
    throw ContractError("run_stage2: model has not been stack-expanded");
  TokenCache tokens(vq_model);
  auto kb = world::KnowledgeBase::make(pc.kb_seed);
  AdamWConfig ocfg;
  ocfg.lr = so.lr;
  AdamW opt(ocfg);
  detail::Snapshotter snap;
  ar::for_each_stack_param(model, [&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
    snap.track(p);
  });
  ar::for_each_generation_param(model, [&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
    snap.track(p);
  });
  snap.snapshot();
  auto eff = detach(vq_model.effective_codebook());
  Rng data_rng(seed, 0x57a6e2);
  StageResult res;
  for (int step = 0; step < so.steps; ++step) {
    opt.set_lr(lr_at(so.schedule, so.lr, step, so.steps));
    GradientTape tape;
    Tensor total;
    Rng r = data_rng.split(static_cast<uint64_t>(step));
    for (int b = 0; b < so.batch; ++b) {
      auto data = make_stage2_sample(pc, tokens, kb, so.kb_fraction, r);
      auto loss = ar::ntp_loss(model, data.seq, eff);
      total = b == 0 ? loss : add(total, loss);
    }
    total = scale(total, 1.f / static_cast<float>(so.batch));
    tape.backward(total);
    try {
      opt.step(tape);
    } catch (const TrainingAbort&) {
      snap.rollback();
      res.aborted = true;
      return res;
    }
    ++res.steps_done;
    if (step % so.log_interval == 0 || step + 1 == so.steps) {
      snap.snapshot();
      metrics.record(2, step, {{"loss", total.item()}, {"lr", opt.lr()}});
    }
  }
  return res;
}

// Validation NTP loss on held-out generation samples.
inline double eval_val_ntp(const PipelineConfig& pc, ar::UnifiedModel& model,
                           vq::VQModel& vq_model, int count) {
  TokenCache tokens(vq_model);
  auto eff = detach(vq_model.effective_codebook());
  const auto& vocab_words = world::Vocabulary::instance();
  double total = 0;
  for (int i = 0; i < count; ++i) {
    auto sample = world::gen_sample(pc.corpus_seed, static_cast<uint64_t>(pc.train_size + i));
    ar::AssembleArgs a;
    a.task = ar::TaskTag::generate;
    a.text = vocab_words.encode(sample.prompt);
    auto ids = tokens.ids_for(sample.scene);
    a.target_codes = &ids;
    a.grid_h = a.grid_w = pc.vqc.grid();
    total += ar::ntp_loss(model, ar::assemble_sequence(pc.arc.base.vocab, a), eff).item();
  }
  return total / count;
}

// ---------------------------------------------------------------------------
// Stage 3: diffusion decoder alignment on ground-truth VQ embeddings
// ---------------------------------------------------------------------------

inline StageResult run_stage3(const PipelineConfig& pc, const StageOpts& so, uint64_t seed,
                              diffusion::DiffusionModel& diff, vq::VQModel& vq_model,
                              io::MetricsWriter& metrics) {
  TokenCache tokens(vq_model);
  AdamWConfig ocfg;
  ocfg.lr = so.lr;
  AdamW opt(ocfg);
  detail::Snapshotter snap;
  diff.for_each_param([&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
    snap.track(p);
  });
  snap.snapshot();
  auto eff = detach(vq_model.effective_codebook());
  const auto& vocab_words = world::Vocabulary::instance();
  Rng data_rng(seed, 0x57a6e3);
  StageResult res;
  for (int step = 0; step < so.steps; ++step) {
    opt.set_lr(lr_at(so.schedule, so.lr, step, so.steps));
    GradientTape tape;
    Tensor total;
    Rng r = data_rng.split(static_cast<uint64_t>(step));
    for (int b = 0; b < so.batch; ++b) {
      auto sample = world::gen_sample(pc.corpus_seed, r.next_below(static_cast<uint64_t>(pc.train_size)));
      auto x0 = detail::image_tensor(world::render(sample.scene, pc.dcfg.latent_size));
      diffusion::ConditionBundle cond;
      cond.text = detail::clip_text(vocab_words.encode(sample.prompt), pc.dcfg.max_text_len);
      cond.vq_embeddings = detach(gather_rows(eff, tokens.ids_for(sample.scene)));
      cond.vq_grid_h = cond.vq_grid_w = pc.vqc.grid();
      // Zero latent placeholder for every t2i sample in this stage.
      float t = static_cast<float>(r.uniform(0.02, 0.98));
      auto eps = Tensor::randn({pc.dcfg.latent_size, pc.dcfg.latent_size, pc.dcfg.channels}, r);
      auto loss = diffusion::flow_loss(diff, x0, cond, t, eps, pc.dcfg.strategy);
      total = b == 0 ? loss : add(total, loss);
    }
    total = scale(total, 1.f / static_cast<float>(so.batch));
    tape.backward(total);
    try {
      opt.step(tape);
    } catch (const TrainingAbort&) {
      snap.rollback();
      res.aborted = true;
      return res;
    }
    ++res.steps_done;
    if (step % so.log_interval == 0 || step + 1 == so.steps) {
      snap.snapshot();
      metrics.record(3, step, {{"loss", total.item()}, {"lr", opt.lr()}});
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Stage 4: joint generation + editing tuning with stop-gradient
// ---------------------------------------------------------------------------

struct Stage4Batch {
  Tensor ntp;   // summed next-token loss over the batch
  Tensor diff;  // summed diffusion flow loss over the batch
};

// One joint batch: a teacher-forced AR pass provides both the NTP loss and
// the predicted VQ embeddings (expectation of the codebook under the
// visual-segment softmax), which are stop-gradient-detached before
// conditioning the diffusion loss.
inline Stage4Batch stage4_batch(const PipelineConfig& pc, const StageOpts& so,
                                ar::UnifiedModel& model, diffusion::DiffusionModel& diff,
                                const Tensor& eff, TokenCache& tokens, Rng& r) {
  const auto& layout = pc.arc.base.vocab;
  const auto& vocab_words = world::Vocabulary::instance();
  int grid = pc.vqc.grid();
  Stage4Batch out;
  for (int b = 0; b < so.batch; ++b) {
    bool gen_task = r.next_unit() < so.stage4_gen_fraction;
    ar::MixedSequence seq;
    world::SceneSpec target_scene;
    Tensor source_latent;  // undefined => zero placeholder
    if (gen_task) {
      auto sample =
          world::gen_sample(pc.corpus_seed, r.next_below(static_cast<uint64_t>(pc.train_size)));
      target_scene = sample.scene;
      ar::AssembleArgs a;
      a.task = ar::TaskTag::generate;
      a.text = vocab_words.encode(sample.prompt);
      auto ids = tokens.ids_for(target_scene);
      a.target_codes = &ids;
      a.grid_h = a.grid_w = grid;
      seq = ar::assemble_sequence(layout, a);
    } else {
      auto pair =
          world::edit_sample(pc.corpus_seed, r.next_below(static_cast<uint64_t>(pc.edit_size)));
      target_scene = pair.target;
      ar::AssembleArgs a;
      a.task = ar::TaskTag::edit;
      a.text = vocab_words.encode(pair.instruction);
      auto src16 = world::render(pair.source, pc.vqc.image_size);
      a.semantic = ar::semantic_tokens(src16, pc.arc.sem_patch);
      auto src_ids = tokens.ids_for(pair.source);
      a.source_codes = &src_ids;
      auto ids = tokens.ids_for(target_scene);
      a.target_codes = &ids;
      a.grid_h = a.grid_w = grid;
      seq = ar::assemble_sequence(layout, a);
      source_latent = detail::image_tensor(world::render(pair.source, pc.dcfg.latent_size));
    }

    std::vector<int> rows, targets;
    std::vector<float> weights;
    for (int t = 1; t < seq.length(); ++t) {
      const auto& it = seq.items[static_cast<size_t>(t)];
      if (it.loss_weight <= 0) continue;
      rows.push_back(t - 1);
      targets.push_back(it.id);
      weights.push_back(it.loss_weight);
    }
    auto logits = ar::unified_logits(model, ar::detail::embed_sequence(model, seq, eff),
                                     ar::detail::iota_positions(seq.length()));
    auto picked = gather_rows(logits, rows);
    auto ntp = softmax_cross_entropy(picked, targets, weights);
    out.ntp = b == 0 ? ntp : add(out.ntp, ntp);

    std::vector<int> grid_rows(rows.begin(), rows.begin() + grid * grid);
    auto vis_logits = slice(gather_rows(logits, grid_rows), 1, layout.visual_begin(), layout.visual);
    auto probs = row_softmax_full(vis_logits);
    auto predicted = detach(matmul(probs, eff));  // the stage-4 stop-gradient

    diffusion::ConditionBundle cond;
    for (const auto& it : seq.items)
      if (it.mod == ar::Modality::text &&
          cond.text.size() < static_cast<size_t>(pc.dcfg.max_text_len))
        cond.text.push_back(it.id);
    cond.vq_embeddings = predicted;
    cond.vq_grid_h = cond.vq_grid_w = grid;
    cond.source_latent = source_latent;
    auto x0 = detail::image_tensor(world::render(target_scene, pc.dcfg.latent_size));
    float t = static_cast<float>(r.uniform(0.02, 0.98));
    auto eps = Tensor::randn({pc.dcfg.latent_size, pc.dcfg.latent_size, pc.dcfg.channels}, r);
    auto dloss = diffusion::flow_loss(diff, x0, cond, t, eps, pc.dcfg.strategy);
    out.diff = b == 0 ? dloss : add(out.diff, dloss);
  }
  return out;
}

inline StageResult run_stage4(const PipelineConfig& pc, const StageOpts& so, uint64_t seed,
                              ar::UnifiedModel& model, vq::VQModel& vq_model,
                              diffusion::DiffusionModel& diff, io::MetricsWriter& metrics) {
  TokenCache tokens(vq_model);
  AdamWConfig ocfg;
  ocfg.lr = so.lr;
  AdamW opt(ocfg);
  detail::Snapshotter snap;
  ar::for_each_stack_param(model, [&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
    snap.track(p);
  });
  ar::for_each_generation_param(model, [&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
    snap.track(p);
  });
  diff.for_each_param([&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
    snap.track(p);
  });
  snap.snapshot();
  auto eff = detach(vq_model.effective_codebook());
  Rng data_rng(seed, 0x57a6e4);
  StageResult res;
  for (int step = 0; step < so.steps; ++step) {
    opt.set_lr(lr_at(so.schedule, so.lr, step, so.steps));
    GradientTape tape;
    Rng r = data_rng.split(static_cast<uint64_t>(step));
    auto batch = stage4_batch(pc, so, model, diff, eff, tokens, r);
    Tensor ntp_total = batch.ntp, diff_total = batch.diff;
    // A zeroed weight drops its term outright so the other loss's gradient
    // set stays exactly what reaches the optimizer.
    Tensor total;
    if (so.ntp_weight != 0)
      total = scale(ntp_total, so.ntp_weight / static_cast<float>(so.batch));
    if (so.diff_weight != 0) {
      auto d = scale(diff_total, so.diff_weight / static_cast<float>(so.batch));
      total = total.defined() ? add(total, d) : d;
    }
    if (!total.defined()) throw ConfigError("stage 4: both loss weights are zero");
    tape.backward(total);
    try {
      opt.step(tape);
    } catch (const TrainingAbort&) {
      snap.rollback();
      res.aborted = true;
      return res;
    }
    ++res.steps_done;
    if (step % so.log_interval == 0 || step + 1 == so.steps) {
      snap.snapshot();
      metrics.record(4, step,
                     {{"loss_ntp", ntp_total.item() / so.batch},
                      {"loss_diffusion", diff_total.item() / so.batch},
                      {"lr", opt.lr()}});
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation harnesses
// ---------------------------------------------------------------------------

inline world::GenevalScore eval_geneval(const PipelineConfig& pc, ar::UnifiedModel& model,
                                        vq::VQModel& vq_model, uint64_t suite_seed, int count) {
  const auto& vocab_words = world::Vocabulary::instance();
  auto eff = detach(vq_model.effective_codebook());
  int grid = pc.vqc.grid();
  ar::SamplerConfig greedy;
  greedy.temperature = 1e-7f;
  std::vector<world::PromptSpec> prompts;
  std::vector<world::Image> images;
  for (int i = 0; i < count; ++i) {
    auto p = world::suite_prompt(suite_seed, static_cast<uint64_t>(i));
    prompts.push_back(p);
    ar::AssembleArgs a;
    a.task = ar::TaskTag::generate;
    a.text = vocab_words.encode(world::prompt_text(p));
    auto out = ar::generate(model, ar::assemble_sequence(pc.arc.base.vocab, a), eff, grid, grid,
                            greedy);
    images.push_back(vq_model.decode(out.codes));
  }
  return world::score_geneval_mini(prompts, images);
}

struct EditEval {
  double unedited_l1 = 0;
  double correct_rate = 0;
  double identity_agreement = 0;
  int count = 0, identity_count = 0;
};

inline EditEval eval_edit(const PipelineConfig& pc, ar::UnifiedModel& model, vq::VQModel& vq_model,
                          int count) {
  TokenCache tokens(vq_model);
  const auto& vocab_words = world::Vocabulary::instance();
  auto eff = detach(vq_model.effective_codebook());
  int grid = pc.vqc.grid();
  ar::SamplerConfig greedy;
  greedy.temperature = 1e-7f;
  EditEval out;
  double l1 = 0, agree = 0;
  int correct = 0;
  for (int i = 0; i < count; ++i) {
    auto pair = world::edit_sample(pc.corpus_seed, static_cast<uint64_t>(pc.edit_size + i));
    auto src16 = world::render(pair.source, pc.vqc.image_size);
    auto src_ids = tokens.ids_for(pair.source);
    auto sem = ar::semantic_tokens(src16, pc.arc.sem_patch);
    auto result = ar::edit(model, src_ids, sem, vocab_words.encode(pair.instruction), eff, grid,
                           grid, greedy);
    auto img = vq_model.decode(result.codes);
    auto score = world::score_edit(pair, img);
    l1 += score.unedited_l1;
    correct += score.correct;
    ++out.count;
    if (pair.kind == world::EditKind::identity) {
      int match = 0;
      for (size_t j = 0; j < result.codes.size(); ++j) match += result.codes[j] == src_ids[j];
      agree += static_cast<double>(match) / static_cast<double>(result.codes.size());
      ++out.identity_count;
    }
  }
  out.unedited_l1 = l1 / std::max(1, out.count);
  out.correct_rate = static_cast<double>(correct) / std::max(1, out.count);
  out.identity_agreement = out.identity_count ? agree / out.identity_count : 0.0;
  return out;
}

struct KbEval {
  double direct_accuracy = 0;
  double reasoning_accuracy = 0;
};

inline KbEval eval_kb(const PipelineConfig& pc, ar::UnifiedModel& model, vq::VQModel& vq_model,
                      int max_latent = 32) {
  auto kb = world::KnowledgeBase::make(pc.kb_seed);
  const auto& vocab_words = world::Vocabulary::instance();
  auto eff = detach(vq_model.effective_codebook());
  int grid = pc.vqc.grid();
  ar::SamplerConfig greedy;
  greedy.temperature = 1e-7f;
  int direct_ok = 0, reason_ok = 0;
  for (const auto& e : kb.entries) {
    auto target = world::KnowledgeBase::target_scene(e);
    auto prompt = vocab_words.encode(world::KnowledgeBase::prompt_text(e));
    ar::AssembleArgs a;
    a.task = ar::TaskTag::generate;
    a.text = prompt;
    auto direct = ar::generate(model, ar::assemble_sequence(pc.arc.base.vocab, a), eff, grid, grid,
                               greedy);
    auto dp = world::parse_image(vq_model.decode(direct.codes));
    direct_ok += !dp.flagged && dp.scene == target;

    auto reasoned = ar::implicit_reasoning(model, prompt, eff, grid, grid, greedy, max_latent);
    auto rp = world::parse_image(vq_model.decode(reasoned.image.codes));
    reason_ok += !rp.flagged && rp.scene == target;
  }
  KbEval out;
  out.direct_accuracy = static_cast<double>(direct_ok) / kb.entries.size();
  out.reasoning_accuracy = static_cast<double>(reason_ok) / kb.entries.size();
  return out;
}

struct DecoderEval {
  double diffusion_mse_median = 0;
  double vq_mse_median = 0;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Decoder comparison on held-out token grids: the diffusion route decodes at
// 32px directly, the VQ route decodes at 16px and upsamples.
inline DecoderEval eval_decoder(const PipelineConfig& pc, vq::VQModel& vq_model,
                                diffusion::DiffusionModel& diff, int count,
                                diffusion::ConcatStrategy strategy) {
  TokenCache tokens(vq_model);
  const auto& vocab_words = world::Vocabulary::instance();
  auto eff = detach(vq_model.effective_codebook());
  std::vector<double> diff_mse, vq_mse;
  for (int i = 0; i < count; ++i) {
    auto sample = world::gen_sample(pc.corpus_seed, static_cast<uint64_t>(pc.train_size + i));
    auto truth = world::render(sample.scene, pc.dcfg.latent_size);
    auto ids = tokens.ids_for(sample.scene);
    diffusion::ConditionBundle cond;
    cond.text = detail::clip_text(vocab_words.encode(sample.prompt), pc.dcfg.max_text_len);
    cond.vq_embeddings = detach(gather_rows(eff, ids));
    cond.vq_grid_h = cond.vq_grid_w = pc.vqc.grid();
    auto dimg = diffusion::sample(diff, cond, pc.dcfg.sampler_steps,
                                  static_cast<uint64_t>(1000 + i), strategy);
    auto vimg = world::upsample2(vq_model.decode(ids));
    double dm = 0, vm = 0;
    for (size_t j = 0; j < truth.rgb.size(); ++j) {
      double a = dimg.rgb[j] - truth.rgb[j];
      double b = vimg.rgb[j] - truth.rgb[j];
      dm += a * a;
      vm += b * b;
    }
    diff_mse.push_back(dm / truth.rgb.size());
    vq_mse.push_back(vm / truth.rgb.size());
  }
  return {median_of(diff_mse), median_of(vq_mse)};
}

// Oracle reconstruction score for the conditioning ablation: full credit for
// an exact parse match, partial credit tied to pixel error otherwise.
inline double eval_oracle_reconstruction(const PipelineConfig& pc, vq::VQModel& vq_model,
                                         diffusion::DiffusionModel& diff, int count,
                                         diffusion::ConcatStrategy strategy) {
  TokenCache tokens(vq_model);
  const auto& vocab_words = world::Vocabulary::instance();
  auto eff = detach(vq_model.effective_codebook());
  double total = 0;
  for (int i = 0; i < count; ++i) {
    auto sample = world::gen_sample(pc.corpus_seed, static_cast<uint64_t>(pc.train_size + i));
    auto truth = world::render(sample.scene, pc.dcfg.latent_size);
    auto ids = tokens.ids_for(sample.scene);
    diffusion::ConditionBundle cond;
    cond.text = detail::clip_text(vocab_words.encode(sample.prompt), pc.dcfg.max_text_len);
    cond.vq_embeddings = detach(gather_rows(eff, ids));
    cond.vq_grid_h = cond.vq_grid_w = pc.vqc.grid();
    auto img = diffusion::sample(diff, cond, pc.dcfg.sampler_steps,
                                 static_cast<uint64_t>(2000 + i), strategy);
    auto parsed = world::parse_image(img);
    if (!parsed.flagged && parsed.scene == sample.scene) {
      total += 1.0;
    } else {
      double mse = 0;
      for (size_t j = 0; j < truth.rgb.size(); ++j) {
        double d = img.rgb[j] - truth.rgb[j];
        mse += d * d;
      }
      mse /= truth.rgb.size();
      total += std::max(0.0, 0.9 - 6.0 * mse);
    }
  }
  return total / count;
}

// Fixed understanding inputs for the base-preservation check: base-path text
// logits over semantic-token + question sequences.
inline std::vector<float> understanding_fingerprint(const PipelineConfig& pc,
                                                    const ar::UnifiedModel& model, int count) {
  const auto& vocab_words = world::Vocabulary::instance();
  auto stub = Tensor::zeros({pc.arc.base.vocab.visual, pc.arc.code_dim});
  std::vector<float> out;
  for (int i = 0; i < count; ++i) {
    Rng r(0xF17ED, static_cast<uint64_t>(i));
    auto scene = world::sample_scene(r, 0, 3);
    ar::AssembleArgs a;
    a.task = ar::TaskTag::understand;
    a.text = vocab_words.encode("describe the image");
    a.semantic = ar::semantic_tokens(world::render(scene, pc.vqc.image_size), pc.arc.sem_patch);
    auto seq = ar::assemble_sequence(pc.arc.base.vocab, a);
    auto logits = ar::base_logits(model, ar::detail::embed_sequence(model, seq, stub),
                                  ar::detail::iota_positions(seq.length()));
    const auto& d = logits.data();
    out.insert(out.end(), d.end() - pc.arc.base.vocab.text, d.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus materialization (`star data gen`)
// ---------------------------------------------------------------------------

inline void write_corpus(const PipelineConfig& pc, const std::string& dir, int gen_count,
                         int edit_count, bool images) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  std::ofstream manifest(fs::path(dir) / "manifest.jsonl");
  if (!manifest) throw IntegrityError("cannot write manifest in " + dir);
  char name[64];
  for (int i = 0; i < gen_count; ++i) {
    auto s = world::gen_sample(pc.corpus_seed, static_cast<uint64_t>(i));
    std::snprintf(name, sizeof name, "images/gen_%06d", i);
    nlohmann::json rec = {
        {"kind", "gen"},
        {"index", i},
        {"seed", pc.corpus_seed},
        {"scene", world::scene_to_json(s.scene)},
        {"caption", world::caption(s.scene)},
        {"prompt", s.prompt},
        {"category", s.is_caption ? "caption" : world::category_name(s.category)},
        {"image16", std::string(name) + "_16.ppm"},
        {"image32", std::string(name) + "_32.ppm"},
    };
    manifest << rec.dump() << "\n";
    if (images) {
      world::write_ppm((fs::path(dir) / (std::string(name) + "_16.ppm")).string(),
                       world::render(s.scene, 16));
      world::write_ppm((fs::path(dir) / (std::string(name) + "_32.ppm")).string(),
                       world::render(s.scene, 32));
    }
  }
  for (int i = 0; i < edit_count; ++i) {
    auto pair = world::edit_sample(pc.corpus_seed, static_cast<uint64_t>(i));
    std::snprintf(name, sizeof name, "images/edit_%06d", i);
    nlohmann::json rec = {
        {"kind", "edit"},
        {"index", i},
        {"seed", pc.corpus_seed},
        {"edit_kind", world::edit_kind_name(pair.kind)},
        {"instruction", pair.instruction},
        {"source", world::scene_to_json(pair.source)},
        {"target", world::scene_to_json(pair.target)},
        {"source16", std::string(name) + "_src16.ppm"},
        {"target16", std::string(name) + "_tgt16.ppm"},
        {"target32", std::string(name) + "_tgt32.ppm"},
    };
    manifest << rec.dump() << "\n";
    if (images) {
      world::write_ppm((fs::path(dir) / (std::string(name) + "_src16.ppm")).string(),
                       world::render(pair.source, 16));
      world::write_ppm((fs::path(dir) / (std::string(name) + "_tgt16.ppm")).string(),
                       world::render(pair.target, 16));
      world::write_ppm((fs::path(dir) / (std::string(name) + "_tgt32.ppm")).string(),
                       world::render(pair.target, 32));
    }
  }
}

}  // namespace star::pipeline
