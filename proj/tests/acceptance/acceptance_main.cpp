// Acceptance suite: one pass/fail line per criterion, exit code = number of
// failures. Trained prerequisites are cached under --cache DIR (default
// ./acceptance_cache) keyed by fixed seeds, so criteria can run individually
// without retraining shared stages; recorded build times are charged to the
// criteria that own them when runtime bounds apply.
//
// Usage: star_acceptance [--criterion N ...] [--cache DIR] [--fresh]

#include <star/ablate.hpp>
#include <star/pipeline.hpp>

#include "../support/gradcheck.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <iostream>

using namespace star;
using namespace star::pipeline;
namespace fs = std::filesystem;

namespace {

struct Ctx {
  fs::path cache = "acceptance_cache";
  bool fresh = false;
  nlohmann::json times = nlohmann::json::object();

  void load_times() {
    auto p = cache / "times.json";
    if (fs::exists(p)) times = nlohmann::json::parse(std::ifstream(p));
  }
  void save_times() {
    fs::create_directories(cache);
    std::ofstream(cache / "times.json") << times.dump(2);
  }
  double build_seconds(const std::string& name) const {
    return times.contains(name) ? times.at(name).get<double>() : 0.0;
  }
};

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Train-if-absent: returns the checkpoint, recording the build time once.
io::Checkpoint cached(Ctx& ctx, const std::string& name,
                      const std::function<io::Checkpoint()>& build) {
  auto path = ctx.cache / (name + ".ckpt");
  if (!ctx.fresh && fs::exists(path)) return io::Checkpoint::load(path.string());
  std::cout << "  [cache] building " << name << "...\n" << std::flush;
  double t0 = now_seconds();
  auto ck = build();
  double dt = now_seconds() - t0;
  fs::create_directories(ctx.cache);
  ck.save(path.string());
  ctx.times[name] = dt;
  ctx.save_times();
  std::cout << "  [cache] " << name << " built in " << static_cast<int>(dt) << "s\n";
  return ck;
}

PipelineConfig main_config() {
  auto pc = PipelineConfig::defaults();
  pc.finalize();
  return pc;
}

// ---------------------------------------------------------------------------
// Shared artifacts
// ---------------------------------------------------------------------------

io::Checkpoint base_ckpt(Ctx& ctx) {
  return cached(ctx, "base", [&] {
    auto pc = main_config();
    Rng rng(101);
    auto model = ar::UnifiedModel::init_base(pc.arc, rng, true);
    io::MetricsWriter none;
    auto so = StageOpts::defaults_for(0);
    run_stage0(pc, so, 101, model, none);
    return collect_checkpoint(pc, &model, nullptr, nullptr);
  });
}

io::Checkpoint vq_ckpt(Ctx& ctx) {
  return cached(ctx, "vq", [&] {
    auto pc = main_config();
    Rng rng(202);
    auto vq_model = vq::VQModel::init(pc.vqc, rng);
    io::MetricsWriter none;
    auto so = StageOpts::defaults_for(1);  // 3000 steps, cosine
    run_stage1(pc, so, 202, vq_model, none);
    return collect_checkpoint(pc, nullptr, &vq_model, nullptr);
  });
}

io::Checkpoint stage2_ckpt(Ctx& ctx) {
  return cached(ctx, "stage2", [&] {
    auto pc = main_config();
    auto base = base_ckpt(ctx);
    auto vqc = vq_ckpt(ctx);
    auto model = load_unified(base, pc, false, false);
    auto vq_model = load_vq(vqc, pc, false);
    Rng rng(303);
    ar::stack_expand(model, pc.arc.stack_layers, rng);
    io::MetricsWriter none;
    auto so = StageOpts::defaults_for(2);  // 5000 steps
    so.kb_fraction = 0.02f;  // a sliver of knowledge data in the main mix
    run_stage2(pc, so, 303, model, vq_model, none);
    return collect_checkpoint(pc, &model, &vq_model, nullptr);
  });
}

io::Checkpoint stage3_ckpt(Ctx& ctx) {
  return cached(ctx, "stage3", [&] {
    auto s2 = stage2_ckpt(ctx);
    auto pc = config_of(s2);
    auto model = load_unified(s2, pc, false, false);
    auto vq_model = load_vq(s2, pc, false);
    Rng rng(404);
    auto diff = diffusion::DiffusionModel::init(pc.dcfg, rng, true);
    io::MetricsWriter none;
    auto so = StageOpts::defaults_for(3);  // 2000 steps
    run_stage3(pc, so, 404, diff, vq_model, none);
    return collect_checkpoint(pc, &model, &vq_model, &diff);
  });
}

io::Checkpoint stage4_ckpt(Ctx& ctx) {
  return cached(ctx, "stage4", [&] {
    auto s3 = stage3_ckpt(ctx);
    auto pc = config_of(s3);
    auto model = load_unified(s3, pc, false, true);
    auto vq_model = load_vq(s3, pc, false);
    auto diff = load_diffusion(s3, pc, true);
    io::MetricsWriter none;
    auto so = StageOpts::defaults_for(4);  // 3000 steps, 60/40 mix
    run_stage4(pc, so, 505, model, vq_model, diff, none);
    return collect_checkpoint(pc, &model, &vq_model, &diff);
  });
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

struct Outcome {
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

using T64 = TensorT<double>;

// 1. Every differentiable op vs central finite differences, 64-bit.
Outcome criterion1(Ctx&) {
  Outcome out;
  double t0 = now_seconds();
  constexpr double kTol = 1e-4;
  constexpr int kInstances = 20;
  double worst = 0;
  std::string worst_op = "none";
  auto note = [&](const char* op, double err) {
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };
  Rng rng(9001);
  for (int it = 0; it < kInstances; ++it) {
    int m = 2 + static_cast<int>(rng.next_below(4));
    int n = 2 + static_cast<int>(rng.next_below(4));
    Shape s{m, n};
    std::vector<T64> in = {T64::uniform(s, rng, -1, 1, true), T64::uniform(s, rng, -1, 1, true)};
    Rng wrng = rng.split(static_cast<uint64_t>(it));
    auto weighted = [&](auto&& fn) {
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(fn(), w);
      };
      return gradcheck::max_grad_rel_err(loss, in);
    };
    note("add", weighted([&] { return add(in[0], in[1]); }));
    note("sub", weighted([&] { return sub(in[0], in[1]); }));
    note("mul", weighted([&] { return mul(in[0], in[1]); }));
    note("scale", weighted([&] { return scale(in[0], 1.7); }));
    note("silu", weighted([&] { return silu(in[0]); }));
    note("reshape", weighted([&] { return reshape(in[0], {n, m}); }));
    note("slice", weighted([&] { return slice(in[0], 1, 1, n - 1); }));
    note("concat", weighted([&] { return concat(0, std::vector<T64>{in[0], in[1]}); }));
    note("transpose", weighted([&] { return transpose2d(in[0]); }));
    {
      auto loss = [&] { return mse(in[0], in[1]); };
      note("mse", gradcheck::max_grad_rel_err(loss, in));
    }
    {
      std::vector<T64> l1in = {in[0], T64::zeros(s, true)};
      for (long long i = 0; i < l1in[1].numel(); ++i) {
        double a = in[0].data()[static_cast<size_t>(i)];
        double off = rng.uniform(0.1, 0.8);
        l1in[1].raw_data()[static_cast<size_t>(i)] = a >= 0 ? a - off : a + off;
      }
      auto loss = [&] { return l1(l1in[0], l1in[1]); };
      note("l1", gradcheck::max_grad_rel_err(loss, l1in));
    }
    {
      auto loss = [&] { return mean(in[0]); };
      note("mean", gradcheck::max_grad_rel_err(loss, in));
      auto loss2 = [&] { return sum(mul(in[0], in[1])); };
      note("sum", gradcheck::max_grad_rel_err(loss2, in));
    }
    {
      int k = 2 + static_cast<int>(rng.next_below(4));
      std::vector<T64> mm = {T64::uniform({m, k}, rng, -1, 1, true),
                             T64::uniform({k, n}, rng, -1, 1, true)};
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(matmul(mm[0], mm[1]), w);
      };
      note("matmul", gradcheck::max_grad_rel_err(loss, mm));
    }
    {
      int v = 4 + static_cast<int>(rng.next_below(5));
      std::vector<int> ids(static_cast<size_t>(m));
      for (auto& id : ids) id = static_cast<int>(rng.next_below(v));
      std::vector<T64> tb = {T64::uniform({v, n}, rng, -1, 1, true)};
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(gather_rows(tb[0], ids), w);
      };
      note("gather_rows", gradcheck::max_grad_rel_err(loss, tb));
    }
    {
      std::vector<int> targets(static_cast<size_t>(m));
      std::vector<double> weights(static_cast<size_t>(m), 1.0);
      for (auto& t : targets) t = static_cast<int>(rng.next_below(n));
      auto loss = [&] { return softmax_cross_entropy(in[0], targets, weights); };
      note("cross_entropy", gradcheck::max_grad_rel_err(loss, in));
      auto loss2 = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(row_softmax_masked(in[0], 0), w);
      };
      note("row_softmax", gradcheck::max_grad_rel_err(loss2, in));
    }
    {
      std::vector<T64> rn = {T64::zeros(s, true), T64::uniform({n}, rng, 0.5, 1.5, true)};
      for (long long i = 0; i < rn[0].numel(); ++i) {
        double mag = rng.uniform(0.4, 1.0);
        rn[0].raw_data()[static_cast<size_t>(i)] = rng.next_below(2) ? mag : -mag;
      }
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(rms_norm(rn[0], rn[1]), w);
      };
      note("rms_norm", gradcheck::max_grad_rel_err(loss, rn));
    }
    {
      int hd = 4;
      std::vector<int> pos(static_cast<size_t>(m));
      for (auto& p : pos) p = static_cast<int>(rng.next_below(40));
      std::vector<T64> rin = {T64::uniform({m, 2 * hd}, rng, -1, 1, true)};
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(rotary(rin[0], pos, 2, 10000.0), w);
      };
      note("rotary", gradcheck::max_grad_rel_err(loss, rin));
    }
    {
      int h = 4, w2 = 4, ci = 2, co = 2;
      int stride = 1 + static_cast<int>(rng.next_below(2));
      std::vector<T64> cin = {T64::uniform({h, w2, ci}, rng, -1, 1, true),
                              T64::uniform({3, 3, ci, co}, rng, -1, 1, true),
                              T64::uniform({co}, rng, -1, 1, true)};
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(bias_channels(conv2d(cin[0], cin[1], stride), cin[2]), w);
      };
      note("conv2d", gradcheck::max_grad_rel_err(loss, cin));
    }
    {
      std::vector<T64> xin = {T64::uniform({3, 3, 2}, rng, -1, 1, true)};
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(upsample_nearest(xin[0], 2), w);
      };
      note("upsample_nearest", gradcheck::max_grad_rel_err(loss, xin));
      auto loss2 = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(bilinear_resize(xin[0], 5, 4), w);
      };
      note("bilinear_resize", gradcheck::max_grad_rel_err(loss2, xin));
    }
    {
      std::vector<T64> pin = {T64::uniform({4, 4, 2}, rng, -1, 1, true)};
      auto loss = [&] {
        Rng w = wrng;
        return gradcheck::weighted_sum(unpatchify(patchify(pin[0], 2), 4, 4, 2, 2), w);
      };
      note("patchify", gradcheck::max_grad_rel_err(loss, pin));
    }
  }
  out.seconds = now_seconds() - t0;
  out.pass = worst < kTol && out.seconds < 120;
  out.detail = "max rel err " + std::to_string(worst) + " (" + worst_op + "), " +
               std::to_string(static_cast<int>(out.seconds)) + "s (bound 120s)";
  return out;
}

// 2. Copy-init + freeze contract over 1k stage-2 steps.
Outcome criterion2(Ctx& ctx) {
  Outcome out;
  auto base = base_ckpt(ctx);
  auto vqc = vq_ckpt(ctx);
  double t0 = now_seconds();
  auto pc = main_config();
  auto model = load_unified(base, pc, false, false);
  auto vq_model = load_vq(vqc, pc, false);
  Rng rng(777);
  ar::stack_expand(model, 2, rng);

  bool copy_ok = model.stack_blocks.size() == 2 &&
                 model.stack_blocks[0].bit_equal(model.base_blocks[pc.arc.base.depth - 2]) &&
                 model.stack_blocks[1].bit_equal(model.base_blocks[pc.arc.base.depth - 1]);

  auto pre_hash = collect_checkpoint(pc, &model, &vq_model, nullptr).section_hashes().at("base");
  auto pre_fp = understanding_fingerprint(pc, model, 100);

  io::MetricsWriter none;
  auto so = StageOpts::defaults_for(2);
  so.steps = 1000;
  run_stage2(pc, so, 888, model, vq_model, none);

  auto post_hash = collect_checkpoint(pc, &model, &vq_model, nullptr).section_hashes().at("base");
  auto post_fp = understanding_fingerprint(pc, model, 100);
  bool logits_ok = pre_fp.size() == post_fp.size();
  for (size_t i = 0; logits_ok && i < pre_fp.size(); ++i) logits_ok = pre_fp[i] == post_fp[i];

  out.seconds = now_seconds() - t0;
  bool time_ok = out.seconds < 600;
  out.pass = copy_ok && pre_hash == post_hash && logits_ok && time_ok;
  out.detail = std::string("copy-init ") + (copy_ok ? "bit-equal" : "MISMATCH") + ", base hash " +
               (pre_hash == post_hash ? "stable" : "CHANGED") + ", 100 understanding logits " +
               (logits_ok ? "bit-identical" : "CHANGED") + ", " +
               std::to_string(static_cast<int>(out.seconds)) + "s (bound 600s)";
  return out;
}

// 3. Stage-4 stop-gradient over 50 joint steps with zero NTP weight.
Outcome criterion3(Ctx& ctx) {
  Outcome out;
  auto s3 = stage3_ckpt(ctx);
  double t0 = now_seconds();
  auto pc = config_of(s3);
  auto model = load_unified(s3, pc, false, true);
  auto vq_model = load_vq(s3, pc, false);
  auto diff = load_diffusion(s3, pc, true);
  TokenCache tokens(vq_model);
  auto eff = detach(vq_model.effective_codebook());
  AdamWConfig ocfg;
  ocfg.lr = 4e-4f;
  AdamW opt(ocfg);
  diff.for_each_param([&](const std::string& n, Tensor& p) { opt.register_param(n, p); });
  auto so = StageOpts::defaults_for(4);
  so.batch = 8;
  int stack_grads = 0, diff_grad_steps = 0;
  for (int step = 0; step < 50; ++step) {
    Rng r(4000 + step);
    auto batch = stage4_batch(pc, so, model, diff, eff, tokens, r);
    GradientTape tape;
    tape.backward(scale(batch.diff, 1.f / so.batch));  // NTP weight zeroed
    ar::for_each_stack_param(model, [&](const std::string&, Tensor& p) {
      stack_grads += tape.grad(p) != nullptr;
    });
    ar::for_each_generation_param(model, [&](const std::string&, Tensor& p) {
      stack_grads += tape.grad(p) != nullptr;
    });
    bool any = false;
    diff.for_each_param([&](const std::string&, Tensor& p) { any = any || tape.grad(p); });
    diff_grad_steps += any;
    opt.step(tape);
  }
  out.seconds = now_seconds() - t0;
  out.pass = stack_grads == 0 && diff_grad_steps == 50 && out.seconds < 300;
  out.detail = std::to_string(stack_grads) + " stack gradients observed over 50 steps (want 0), " +
               "decoder gradients present in " + std::to_string(diff_grad_steps) + "/50, " +
               std::to_string(static_cast<int>(out.seconds)) + "s (bound 300s)";
  return out;
}

// 4. Quantizer oracle equality, held-out reconstruction, anti-collapse.
Outcome criterion4(Ctx& ctx) {
  Outcome out;
  double t0 = now_seconds();

  // (a) brute-force oracle agreement on 1e4 random instances
  Rng rng(4004);
  int mismatches = 0;
  for (int inst = 0; inst < 10000; ++inst) {
    int k = 2 + static_cast<int>(rng.next_below(63));
    int d = 1 + static_cast<int>(rng.next_below(8));
    std::vector<float> flat(static_cast<size_t>(k) * d);
    for (auto& x : flat) x = static_cast<float>(rng.uniform(-1, 1));
    std::vector<float> v(static_cast<size_t>(d));
    for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
    // independent scan
    int oracle = -1;
    float best = std::numeric_limits<float>::max();
    for (int i = 0; i < k; ++i) {
      float dist = 0;
      for (int j = 0; j < d; ++j) {
        float diff = v[static_cast<size_t>(j)] - flat[static_cast<size_t>(i) * d + j];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        oracle = i;
      }
    }
    mismatches += vq::nearest_code(v.data(), flat.data(), k, d) != oracle;
  }

  // (b) held-out reconstruction MSE after the cached 3k-step stage 1
  auto vqc = vq_ckpt(ctx);
  auto pc = main_config();
  auto vq_model = load_vq(vqc, pc, false);
  double mse = eval_recon_mse(vq_model, pc, 300);

  // (c) anti-collapse: median utilization with projector >= without, equal
  // steps, 3 seeds
  std::vector<double> with_util, without_util;
  for (uint64_t seed : {31ULL, 32ULL, 33ULL}) {
    for (bool with : {true, false}) {
      Rng r(seed);
      auto m = vq::VQModel::init(pc.vqc, r);
      io::MetricsWriter none;
      auto so = StageOpts::defaults_for(1);
      so.steps = 600;
      run_stage1(pc, so, seed, m, none, with);
      double u = vq::codebook_stats(m.usage).utilization;
      (with ? with_util : without_util).push_back(u);
    }
  }
  double med_with = median_of(with_util), med_without = median_of(without_util);

  out.seconds = now_seconds() - t0 + ctx.build_seconds("vq");
  bool time_ok = out.seconds < 1800;
  out.pass = mismatches == 0 && mse <= 0.01 && med_with >= med_without && time_ok;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "oracle mismatches %d/10000, heldout mse/channel %.5f (<=0.01), util median "
                "with %.3f vs without %.3f, %ds (bound 1800s)",
                mismatches, mse, med_with, med_without, static_cast<int>(out.seconds));
  out.detail = buf;
  return out;
}

// 5. Generation competence on 500 held-out prompts after stages 1-2.
Outcome criterion5(Ctx& ctx) {
  Outcome out;
  auto s2 = stage2_ckpt(ctx);
  double t0 = now_seconds();
  auto pc = config_of(s2);
  auto model = load_unified(s2, pc, false, false);
  auto vq_model = load_vq(s2, pc, false);
  auto score = eval_geneval(pc, model, vq_model, 0xe7a1, 500);
  out.seconds = now_seconds() - t0 + ctx.build_seconds("base") + ctx.build_seconds("vq") +
                ctx.build_seconds("stage2");
  double single = score.accuracy[world::PromptCategory::single];
  double two = score.accuracy[world::PromptCategory::two];
  bool time_ok = out.seconds < 3600;
  out.pass = single >= 0.90 && two >= 0.60 && time_ok;
  char buf[256];
  std::snprintf(buf, sizeof buf,
                "single %.3f (>=0.90), two %.3f (>=0.60), overall %.3f, pipeline %ds (bound 3600s)",
                single, two, score.overall, static_cast<int>(out.seconds));
  out.detail = buf;
  return out;
}

// 6. Diffusion decoder beats upsampled VQ decoding in median MSE, 3 seeds.
Outcome criterion6(Ctx& ctx) {
  Outcome out;
  double t0 = now_seconds();
  auto vqc = vq_ckpt(ctx);
  auto pc = main_config();
  std::vector<double> diff_medians, vq_medians;
  for (uint64_t seed : {60ULL, 61ULL, 62ULL}) {
    auto ck = cached(ctx, "c6_diff_s" + std::to_string(seed), [&] {
      auto vq_model = load_vq(vqc, pc, false);
      Rng rng(seed);
      auto diff = diffusion::DiffusionModel::init(pc.dcfg, rng, true);
      io::MetricsWriter none;
      auto so = StageOpts::defaults_for(3);
      so.steps = 800;
      run_stage3(pc, so, seed, diff, vq_model, none);
      return collect_checkpoint(pc, nullptr, &vq_model, &diff);
    });
    auto vq_model = load_vq(ck, pc, false);
    auto diff = load_diffusion(ck, pc, false);
    auto ev = eval_decoder(pc, vq_model, diff, 200, pc.dcfg.strategy);
    diff_medians.push_back(ev.diffusion_mse_median);
    vq_medians.push_back(ev.vq_mse_median);
  }
  double dm = median_of(diff_medians), vm = median_of(vq_medians);
  out.seconds = now_seconds() - t0;
  out.pass = dm < vm;
  char buf[256];
  std::snprintf(buf, sizeof buf, "median mse over 200 grids x 3 seeds: diffusion %.5f < vq %.5f %s",
                dm, vm, dm < vm ? "(strict)" : "(VIOLATED)");
  out.detail = buf;
  return out;
}

// 7. Conditioning ablation ordering text <= sequence <= channel, 3 seeds.
Outcome criterion7(Ctx&) {
  Outcome out;
  double t0 = now_seconds();
  AblateBudget budget;
  auto report = ablate("concat_strategy", 3, budget);
  double text = 0, seq = 0, chan = 0;
  bool complete = true;
  for (const auto& c : report.cells) {
    if (c.failed) complete = false;
    if (c.label == "text_wise") text = c.median;
    if (c.label == "sequence_wise") seq = c.median;
    if (c.label == "channel_wise") chan = c.median;
  }
  out.seconds = now_seconds() - t0;
  out.pass = complete && text <= seq && seq <= chan && text < chan;
  char buf[256];
  std::snprintf(buf, sizeof buf, "median oracle scores: text %.4f <= sequence %.4f <= channel %.4f%s",
                text, seq, chan, complete ? "" : " (cells FAILED)");
  out.detail = buf;
  return out;
}

// 8. Copy-from-base init beats random init in median val NTP at 2k steps.
Outcome criterion8(Ctx&) {
  Outcome out;
  double t0 = now_seconds();
  AblateBudget budget;
  budget.stage2_steps = 2000;
  auto report = ablate("init_strategy", 3, budget);
  double copy_loss = 0, random_loss = 0;
  bool complete = true;
  for (const auto& c : report.cells) {
    if (c.failed) complete = false;
    if (c.label == "copy") copy_loss = c.median;
    if (c.label == "random") random_loss = c.median;
  }
  out.seconds = now_seconds() - t0;
  out.pass = complete && copy_loss < random_loss;
  char buf[256];
  std::snprintf(buf, sizeof buf, "median val ntp at 2k steps: copy %.4f < random %.4f%s", copy_loss,
                random_loss, complete ? "" : " (cells FAILED)");
  out.detail = buf;
  return out;
}

// 9. Editing quality after stage 4 (plus the generation-maintenance check).
Outcome criterion9(Ctx& ctx) {
  Outcome out;
  auto s4 = stage4_ckpt(ctx);
  auto s2 = stage2_ckpt(ctx);
  double t0 = now_seconds();
  auto pc = config_of(s4);
  auto model = load_unified(s4, pc, false, false);
  auto vq_model = load_vq(s4, pc, false);
  auto ev = eval_edit(pc, model, vq_model, 300);

  auto model2 = load_unified(s2, pc, false, false);
  auto gen_before = eval_geneval(pc, model2, vq_model, 0xe7a2, 200).overall;
  auto gen_after = eval_geneval(pc, model, vq_model, 0xe7a2, 200).overall;

  out.seconds = now_seconds() - t0;
  bool maintain = gen_after >= gen_before - 0.05;
  out.pass = ev.correct_rate >= 0.60 && ev.unedited_l1 <= 0.08 &&
             ev.identity_agreement >= 0.90 && maintain;
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "edit-correct %.3f (>=0.60), unedited L1 %.4f (<=0.08), identity agreement %.3f "
                "(>=0.90), generation %.3f -> %.3f (drop <=0.05)",
                ev.correct_rate, ev.unedited_l1, ev.identity_agreement, gen_before, gen_after);
  out.detail = buf;
  return out;
}

// 10. Reasoning mode strictly beats direct mode on the knowledge suite.
Outcome criterion10(Ctx& ctx) {
  Outcome out;
  auto s2 = stage2_ckpt(ctx);
  double t0 = now_seconds();
  auto pc = config_of(s2);
  std::vector<double> direct, reasoning;
  for (uint64_t seed : {70ULL, 71ULL, 72ULL}) {
    auto ck = cached(ctx, "c10_kb_s" + std::to_string(seed), [&] {
      auto model = load_unified(s2, pc, false, true);
      auto vq_model = load_vq(s2, pc, false);
      io::MetricsWriter none;
      auto so = StageOpts::defaults_for(2);
      so.steps = 600;
      so.kb_fraction = 0.25f;  // KB-augmented fine-tune
      run_stage2(pc, so, seed, model, vq_model, none);
      return collect_checkpoint(pc, &model, &vq_model, nullptr);
    });
    auto model = load_unified(ck, pc, false, false);
    auto vq_model = load_vq(ck, pc, false);
    auto kb = eval_kb(pc, model, vq_model);
    direct.push_back(kb.direct_accuracy);
    reasoning.push_back(kb.reasoning_accuracy);
  }
  double dm = median_of(direct), rm = median_of(reasoning);
  out.seconds = now_seconds() - t0;
  out.pass = rm > dm;
  char buf[256];
  std::snprintf(buf, sizeof buf, "kb accuracy median over 3 seeds: reasoning %.3f > direct %.3f %s",
                rm, dm, rm > dm ? "(strict)" : "(VIOLATED)");
  out.detail = buf;
  return out;
}

// 11. Byte-identical checkpoints and metrics across two seeded pipelines.
Outcome criterion11(Ctx& ctx) {
  Outcome out;
  double t0 = now_seconds();
  auto run_once = [&](const fs::path& ck_path, const fs::path& metrics_path) {
    auto pc = PipelineConfig::small();
    pc.train_size = 1500;
    pc.edit_size = 400;
    pc.vqc.codebook_size = 128;
    pc.vqc.dim = 16;
    pc.dcfg.sampler_steps = 8;
    pc.finalize();
    fs::remove(metrics_path);
    io::MetricsWriter mw(metrics_path.string(), false);  // wall time excluded
    Rng rng(1111);
    auto base = ar::UnifiedModel::init_base(pc.arc, rng, true);
    auto so0 = StageOpts::defaults_for(0);
    so0.steps = 80;
    run_stage0(pc, so0, 1111, base, mw);
    auto vq_model = vq::VQModel::init(pc.vqc, rng);
    auto so1 = StageOpts::defaults_for(1);
    so1.steps = 120;
    run_stage1(pc, so1, 1111, vq_model, mw);
    auto ck = collect_checkpoint(pc, &base, nullptr, nullptr);
    auto model = load_unified(ck, pc, false, false);
    Rng r2(2222);
    ar::stack_expand(model, pc.arc.stack_layers, r2);
    auto so2 = StageOpts::defaults_for(2);
    so2.steps = 150;
    run_stage2(pc, so2, 1111, model, vq_model, mw);
    auto diff = diffusion::DiffusionModel::init(pc.dcfg, r2, true);
    auto so3 = StageOpts::defaults_for(3);
    so3.steps = 80;
    run_stage3(pc, so3, 1111, diff, vq_model, mw);
    auto so4 = StageOpts::defaults_for(4);
    so4.steps = 60;
    run_stage4(pc, so4, 1111, model, vq_model, diff, mw);
    collect_checkpoint(pc, &model, &vq_model, &diff).save(ck_path.string());
  };
  fs::create_directories(ctx.cache);
  auto a_ck = ctx.cache / "repro_a.ckpt", b_ck = ctx.cache / "repro_b.ckpt";
  auto a_m = ctx.cache / "repro_a.jsonl", b_m = ctx.cache / "repro_b.jsonl";
  run_once(a_ck, a_m);
  run_once(b_ck, b_m);
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  bool ck_same = slurp(a_ck) == slurp(b_ck);
  bool m_same = slurp(a_m) == slurp(b_m);
  out.seconds = now_seconds() - t0;
  out.pass = ck_same && m_same;
  out.detail = std::string("checkpoints ") + (ck_same ? "byte-identical" : "DIFFER") +
               ", metrics " + (m_same ? "byte-identical" : "DIFFER");
  for (auto& p : {a_ck, b_ck, a_m, b_m}) fs::remove(p);
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  Ctx ctx;
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--criterion" && i + 1 < argc) selected.push_back(std::atoi(argv[++i]));
    else if (a == "--cache" && i + 1 < argc) ctx.cache = argv[++i];
    else if (a == "--fresh") ctx.fresh = true;
    else {
      std::cerr << "usage: star_acceptance [--criterion N ...] [--cache DIR] [--fresh]\n";
      return 64;
    }
  }
  ctx.load_times();
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11};

  using Fn = Outcome (*)(Ctx&);
  struct Entry {
    int id;
    const char* name;
    Fn fn;
  };
  const Entry entries[] = {
      {1, "gradient correctness vs central finite differences", criterion1},
      {2, "copy-init and freeze contract over 1k stage-2 steps", criterion2},
      {3, "stage-4 stop-gradient with zeroed NTP weight", criterion3},
      {4, "vq oracle equality, reconstruction, anti-collapse", criterion4},
      {5, "generation competence on 500 held-out prompts", criterion5},
      {6, "diffusion decoder gain over upsampled vq decoding", criterion6},
      {7, "conditioning ablation ordering (text <= sequence <= channel)", criterion7},
      {8, "copy-init beats random init at 2k steps", criterion8},
      {9, "editing quality after stage 4", criterion9},
      {10, "implicit reasoning beats direct generation on the kb suite", criterion10},
      {11, "byte-identical seeded pipeline reruns", criterion11},
  };

  int failures = 0;
  for (int id : selected) {
    const Entry* entry = nullptr;
    for (const auto& e : entries)
      if (e.id == id) entry = &e;
    if (!entry) {
      std::cerr << "unknown criterion " << id << "\n";
      return 64;
    }
    std::cout << "criterion " << id << ": " << entry->name << "...\n" << std::flush;
    Outcome out;
    try {
      out = entry->fn(ctx);
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    std::cout << (out.pass ? "[PASS]" : "[FAIL]") << " criterion " << id << ": " << entry->name
              << " - " << out.detail << "\n"
              << std::flush;
    failures += !out.pass;
  }
  return failures;
}
