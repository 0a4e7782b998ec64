// star: command-line surface for the training pipeline, inference and
// evaluation. Exit codes: 0 success, 2 config error, 3 training abort,
// 4 integrity error.
#include <CLI11.hpp>

#include <star/ablate.hpp>
#include <star/pipeline.hpp>

#include <cstdio>
#include <iostream>

using namespace star;
using namespace star::pipeline;

namespace {

struct TrainArgs {
  int stage = 1;
  std::string config_path;
  uint64_t seed = 0;
  std::string resume;
  std::string out;
  std::string metrics;
};

io::ConfigTree load_tree(const std::string& path) {
  if (path.empty()) return io::ConfigTree::parse("");
  return io::ConfigTree::parse_file(path);
}

int run_train(const TrainArgs& args) {
  auto tree = load_tree(args.config_path);
  auto so = StageOpts::defaults_for(args.stage);
  so.apply_tree(tree);
  if (!args.metrics.empty()) so.metrics_path = args.metrics;
  io::MetricsWriter metrics(so.metrics_path, so.include_wall_time);
  std::string out = args.out.empty() ? "stage" + std::to_string(args.stage) + ".ckpt" : args.out;

  auto input_ckpt = [&](const char* key) {
    std::string path = tree.get_string(key, "");
    if (path.empty())
      throw ConfigError(std::string("stage ") + std::to_string(args.stage) +
                        " requires config key '" + key + "'");
    return io::Checkpoint::load(path);
  };

  StageResult res;
  io::Checkpoint out_ck;
  switch (args.stage) {
    case 0: {
      auto pc = pipeline_config_from_tree(tree);
      Rng rng(args.seed);
      auto model = ar::UnifiedModel::init_base(pc.arc, rng, true);
      if (!args.resume.empty()) {
        auto prev = io::Checkpoint::load(args.resume);
        ar::for_each_base_param(model,
                                [&](const std::string& n, Tensor& t) { io::restore_param(prev, n, t); });
      }
      res = run_stage0(pc, so, args.seed, model, metrics);
      out_ck = collect_checkpoint(pc, &model, nullptr, nullptr);
      break;
    }
    case 1: {
      auto pc = pipeline_config_from_tree(tree);
      Rng rng(args.seed);
      auto vq_model = vq::VQModel::init(pc.vqc, rng);
      if (!args.resume.empty()) {
        auto prev = io::Checkpoint::load(args.resume);
        vq_model.for_each_vq_param(
            [&](const std::string& n, Tensor& t) { io::restore_param(prev, n, t); });
        vq_model.projector.for_each_param(
            [&](const std::string& n, Tensor& t) { io::restore_param(prev, n, t); });
      }
      res = run_stage1(pc, so, args.seed, vq_model, metrics,
                       tree.get_bool("stage.with_projector", true), args.resume.empty());
      out_ck = collect_checkpoint(pc, nullptr, &vq_model, nullptr);
      break;
    }
    case 2: {
      auto base_ck = input_ckpt("inputs.base");
      auto vq_ck = input_ckpt("inputs.vq");
      auto pc = config_of(vq_ck);
      // Model geometry travels with the base checkpoint.
      auto base_pc = config_of(base_ck);
      pc.arc = base_pc.arc;
      int n = static_cast<int>(tree.get_int("model.stack_layers", pc.arc.stack_layers));
      pc.arc.stack_layers = n;
      pc.finalize();
      auto model = load_unified(base_ck, pc, false, false);
      auto vq_model = load_vq(vq_ck, pc, false);
      Rng rng(args.seed, 0xe8c9a2d);
      if (!args.resume.empty()) {
        auto prev = io::Checkpoint::load(args.resume);
        model = load_unified(prev, pc, false, true);
      } else {
        ar::stack_expand(model, n, rng, tree.get_bool("stage.copy_init", true));
      }
      res = run_stage2(pc, so, args.seed, model, vq_model, metrics);
      out_ck = collect_checkpoint(pc, &model, &vq_model, nullptr);
      break;
    }
    case 3: {
      auto prev = input_ckpt("inputs.stage2");
      auto pc = config_of(prev);
      auto model = load_unified(prev, pc, false, false);
      auto vq_model = load_vq(prev, pc, false);
      Rng rng(args.seed, 0xd1f);
      auto diff = args.resume.empty()
                      ? diffusion::DiffusionModel::init(pc.dcfg, rng, true)
                      : load_diffusion(io::Checkpoint::load(args.resume), pc, true);
      res = run_stage3(pc, so, args.seed, diff, vq_model, metrics);
      out_ck = collect_checkpoint(pc, &model, &vq_model, &diff);
      break;
    }
    case 4: {
      auto prev = input_ckpt("inputs.stage3");
      auto pc = config_of(prev);
      auto model = load_unified(prev, pc, false, true);
      auto vq_model = load_vq(prev, pc, false);
      auto diff = load_diffusion(prev, pc, true);
      res = run_stage4(pc, so, args.seed, model, vq_model, diff, metrics);
      out_ck = collect_checkpoint(pc, &model, &vq_model, &diff);
      break;
    }
    default:
      throw ConfigError("train: stage must be 0..4");
  }

  if (res.aborted) {
    out_ck.save(out + ".lastgood");
    std::cerr << "training aborted on non-finite loss after " << res.steps_done
              << " steps; last-good checkpoint written to " << out << ".lastgood\n";
    return 3;
  }
  out_ck.save(out);
  std::cout << "stage " << args.stage << " complete (" << res.steps_done
            << " steps); checkpoint written to " << out << "\n";
  return 0;
}

struct LoadedArtifacts {
  PipelineConfig pc;
  ar::UnifiedModel model;
  vq::VQModel vq;
  std::optional<diffusion::DiffusionModel> diff;
};

LoadedArtifacts load_artifacts(const std::string& ckpt_path, bool need_stack = true) {
  auto ck = io::Checkpoint::load(ckpt_path);
  auto pc = config_of(ck);
  LoadedArtifacts a{pc, load_unified(ck, pc, false, false), load_vq(ck, pc, false), std::nullopt};
  if (need_stack && a.model.stack_blocks.empty() && pc.arc.stack_layers > 0)
    throw ConfigError("checkpoint has no stacked layers; train stage 2 first");
  if (ck.sections.count("diffusion")) a.diff = load_diffusion(ck, pc, false);
  return a;
}

world::Image decode_codes(LoadedArtifacts& a, const std::vector<int>& codes,
                          const std::string& decoder, const std::vector<int>& text,
                          const world::Image* source16) {
  if (decoder == "vq") return a.vq.decode(codes);
  if (decoder != "diffusion") throw ConfigError("decoder must be vq or diffusion");
  if (!a.diff) throw ConfigError("checkpoint has no diffusion section; train stage 3 first");
  diffusion::ConditionBundle cond;
  cond.text = pipeline::detail::clip_text(text, a.pc.dcfg.max_text_len);
  auto eff = detach(a.vq.effective_codebook());
  cond.vq_embeddings = detach(gather_rows(eff, codes));
  cond.vq_grid_h = cond.vq_grid_w = a.pc.vqc.grid();
  if (source16) {
    auto up = world::upsample2(*source16);
    cond.source_latent =
        Tensor::from_data({up.size, up.size, 3}, std::vector<float>(up.rgb.begin(), up.rgb.end()));
  }
  return diffusion::sample(*a.diff, cond, a.pc.dcfg.sampler_steps, 0xdec0de, a.pc.dcfg.strategy);
}

int run_generate(const std::string& ckpt, const std::string& prompt, const std::string& mode,
                 const std::string& decoder, const std::string& out, uint64_t seed,
                 float temperature, int top_k) {
  auto a = load_artifacts(ckpt);
  auto text = world::Vocabulary::instance().encode(prompt);
  auto eff = detach(a.vq.effective_codebook());
  int grid = a.pc.vqc.grid();
  ar::SamplerConfig sampler;
  sampler.temperature = temperature;
  sampler.top_k = top_k;
  sampler.seed = seed;
  std::vector<int> codes;
  if (mode == "reasoning") {
    auto r = ar::implicit_reasoning(a.model, text, eff, grid, grid, sampler);
    std::cout << "latent tokens: " << world::Vocabulary::instance().decode(r.latent_text) << "\n";
    codes = r.image.codes;
  } else if (mode == "direct") {
    ar::AssembleArgs args;
    args.task = ar::TaskTag::generate;
    args.text = text;
    codes = ar::generate(a.model, ar::assemble_sequence(a.pc.arc.base.vocab, args), eff, grid,
                         grid, sampler)
                .codes;
  } else {
    throw ConfigError("mode must be direct or reasoning");
  }
  world::write_ppm(out, decode_codes(a, codes, decoder, text, nullptr));
  std::cout << "wrote " << out << "\n";
  return 0;
}

int run_edit(const std::string& ckpt, const std::string& image_path,
             const std::string& instruction, const std::string& decoder, const std::string& out,
             uint64_t seed) {
  auto a = load_artifacts(ckpt);
  auto img = world::read_ppm(image_path);
  if (img.size != a.pc.vqc.image_size)
    throw ConfigError("edit: input image must be " + std::to_string(a.pc.vqc.image_size) + "px");
  auto text = world::Vocabulary::instance().encode(instruction);
  auto eff = detach(a.vq.effective_codebook());
  int grid = a.pc.vqc.grid();
  ar::SamplerConfig sampler;
  sampler.temperature = 1e-7f;
  sampler.seed = seed;
  auto src_ids = a.vq.tokenize(img);
  auto sem = ar::semantic_tokens(img, a.pc.arc.sem_patch);
  auto result = ar::edit(a.model, src_ids, sem, text, eff, grid, grid, sampler);
  world::write_ppm(out, decode_codes(a, result.codes, decoder, text, &img));
  std::cout << "wrote " << out << (result.truncated ? " (truncated decode)" : "") << "\n";
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& suite, int count, uint64_t seed) {
  auto a = load_artifacts(ckpt);
  nlohmann::json report;
  if (suite == "geneval-mini") {
    auto score = eval_geneval(a.pc, a.model, a.vq, seed ? seed : 0xe7a1, count ? count : 500);
    for (auto& [cat, acc] : score.accuracy) report[world::category_name(cat)] = acc;
    report["overall"] = score.overall;
  } else if (suite == "edit") {
    auto score = eval_edit(a.pc, a.model, a.vq, count ? count : 200);
    report = {{"unedited_l1", score.unedited_l1},
              {"edit_correct", score.correct_rate},
              {"identity_agreement", score.identity_agreement},
              {"pairs", score.count}};
  } else if (suite == "knowledge") {
    auto score = eval_kb(a.pc, a.model, a.vq);
    report = {{"direct_accuracy", score.direct_accuracy},
              {"reasoning_accuracy", score.reasoning_accuracy}};
  } else {
    throw ConfigError("suite must be geneval-mini, edit or knowledge");
  }
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_ablate(const std::string& axis, int seeds) {
  AblateBudget budget;
  auto report = ablate(axis, seeds, budget);
  std::printf("axis: %s   metric: %s (%s is better)\n", report.axis.c_str(),
              report.metric.c_str(), report.higher_better ? "higher" : "lower");
  for (const auto& c : report.cells) {
    if (c.failed) {
      std::printf("  %-22s FAILED\n", c.label.c_str());
      continue;
    }
    std::printf("  %-22s median %.4f  (", c.label.c_str(), c.median);
    for (size_t i = 0; i < c.per_seed.size(); ++i)
      std::printf("%s%.4f", i ? ", " : "", c.per_seed[i]);
    std::printf(")\n");
  }
  std::printf("ordering (worst to best): ");
  for (size_t i = 0; i < report.ordering.size(); ++i)
    std::printf("%s%s", i ? " <= " : "", report.ordering[i].c_str());
  std::printf("\n%s\n", report.to_json().dump().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale unified multimodal model: stacked AR over a frozen base, "
               "projector-regularized VQ tokenizer, rectified-flow decoder"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", train_args.stage, "training stage (0..4)")->required();
  train->add_option("--config", train_args.config_path, "TOML-style config file");
  train->add_option("--seed", train_args.seed, "run seed")->required();
  train->add_option("--resume", train_args.resume, "checkpoint to resume parameters from");
  train->add_option("--out", train_args.out, "output checkpoint path");
  train->add_option("--metrics", train_args.metrics, "metrics JSONL path");

  std::string g_ckpt, g_prompt, g_mode = "direct", g_decoder = "vq", g_out = "out.ppm";
  uint64_t g_seed = 0;
  float g_temp = 1e-7f;
  int g_topk = 0;
  auto* gen = app.add_subcommand("generate", "text-to-image generation");
  gen->add_option("--ckpt", g_ckpt)->required();
  gen->add_option("--prompt", g_prompt)->required();
  gen->add_option("--mode", g_mode, "direct|reasoning");
  gen->add_option("--decoder", g_decoder, "vq|diffusion");
  gen->add_option("--out", g_out)->required();
  gen->add_option("--seed", g_seed);
  gen->add_option("--temperature", g_temp);
  gen->add_option("--top-k", g_topk);

  std::string e_ckpt, e_image, e_instruction, e_decoder = "vq", e_out = "edited.ppm";
  uint64_t e_seed = 0;
  auto* edit = app.add_subcommand("edit", "instruction-based image editing");
  edit->add_option("--ckpt", e_ckpt)->required();
  edit->add_option("--image", e_image)->required();
  edit->add_option("--instruction", e_instruction)->required();
  edit->add_option("--decoder", e_decoder, "vq|diffusion");
  edit->add_option("--out", e_out)->required();
  edit->add_option("--seed", e_seed);

  std::string v_ckpt, v_suite;
  int v_count = 0;
  uint64_t v_seed = 0;
  auto* eval = app.add_subcommand("eval", "run an evaluation suite");
  eval->add_option("--ckpt", v_ckpt)->required();
  eval->add_option("--suite", v_suite, "geneval-mini|edit|knowledge")->required();
  eval->add_option("--count", v_count);
  eval->add_option("--seed", v_seed);

  std::string a_axis;
  int a_seeds = 3;
  auto* abl = app.add_subcommand("ablate", "directional ablation over one axis");
  abl->add_option("--axis", a_axis, "vq_type|stack_depth|init_strategy|concat_strategy")
      ->required();
  abl->add_option("--seeds", a_seeds);

  auto* data = app.add_subcommand("data", "corpus tooling");
  uint64_t d_seed = 1000;
  std::string d_out = "corpus";
  int d_gen = -1, d_edit = -1;
  bool d_noimg = false;
  auto* datagen = data->add_subcommand("gen", "materialize the synthetic corpus");
  datagen->add_option("--seed", d_seed)->required();
  datagen->add_option("--out", d_out)->required();
  datagen->add_option("--gen-count", d_gen);
  datagen->add_option("--edit-count", d_edit);
  datagen->add_flag("--no-images", d_noimg);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) return run_train(train_args);
    if (*gen) return run_generate(g_ckpt, g_prompt, g_mode, g_decoder, g_out, g_seed, g_temp, g_topk);
    if (*edit) return run_edit(e_ckpt, e_image, e_instruction, e_decoder, e_out, e_seed);
    if (*eval) return run_eval(v_ckpt, v_suite, v_count, v_seed);
    if (*abl) return run_ablate(a_axis, a_seeds);
    if (*datagen) {
      auto pc = PipelineConfig::defaults();
      pc.corpus_seed = d_seed;
      pc.finalize();
      write_corpus(pc, d_out, d_gen < 0 ? pc.train_size : d_gen,
                   d_edit < 0 ? pc.edit_size : d_edit, !d_noimg);
      std::cout << "corpus written to " << d_out << "\n";
      return 0;
    }
    if (*data) {
      std::cerr << "data: specify a subcommand (gen)\n";
      return 2;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const TrainingAbort& e) {
    std::cerr << "training abort: " << e.what() << "\n";
    return 3;
  } catch (const IntegrityError& e) {
    std::cerr << "integrity error: " << e.what() << "\n";
    return 4;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
