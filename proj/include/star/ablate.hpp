// Reduced-scale ablation harness: runs the matching slice of the pipeline
// per cell and seed, reports per-cell medians and the observed ordering.
#pragma once

#include "star/pipeline.hpp"

namespace star::pipeline {

struct AblateBudget {
  int stage0_steps = 300;
  int stage1_steps = 600;
  int stage2_steps = 800;
  int stage3_steps = 400;
  int batch = 16;
  int eval_count = 64;
};

struct AblateCell {
  std::string label;
  std::vector<double> per_seed;
  double median = 0;
  bool failed = false;
};

struct AblateReport {
  std::string axis;
  std::string metric;
  bool higher_better = true;
  std::vector<AblateCell> cells;
  std::vector<std::string> ordering;  // worst to best over completed cells

  nlohmann::json to_json() const {
    nlohmann::json cells_json = nlohmann::json::array();
    for (const auto& c : cells)
      cells_json.push_back({{"label", c.label},
                            {"median", c.median},
                            {"per_seed", c.per_seed},
                            {"failed", c.failed}});
    return {{"axis", axis},
            {"metric", metric},
            {"higher_better", higher_better},
            {"cells", cells_json},
            {"ordering", ordering}};
  }
};

namespace detail {

inline void finish_report(AblateReport& r) {
  for (auto& c : r.cells)
    if (!c.failed) c.median = median_of(c.per_seed);
  std::vector<const AblateCell*> done;
  for (const auto& c : r.cells)
    if (!c.failed) done.push_back(&c);
  std::sort(done.begin(), done.end(), [&](const AblateCell* a, const AblateCell* b) {
    return r.higher_better ? a->median < b->median : a->median > b->median;
  });
  for (const auto* c : done) r.ordering.push_back(c->label);
}

struct SeedPrep {
  PipelineConfig pc;
  ar::UnifiedModel base;
  vq::VQModel vq;
};

// Shared per-seed groundwork: a small pretrained base and quantizer.
inline SeedPrep prep_base_and_vq(const PipelineConfig& pc, const AblateBudget& b, uint64_t seed) {
  Rng rng(seed, 0xab1a7e);
  SeedPrep prep{pc, ar::UnifiedModel::init_base(pc.arc, rng, true), vq::VQModel::init(pc.vqc, rng)};
  io::MetricsWriter none;
  auto so0 = StageOpts::defaults_for(0);
  so0.steps = b.stage0_steps;
  so0.batch = b.batch;
  run_stage0(pc, so0, seed, prep.base, none);
  auto so1 = StageOpts::defaults_for(1);
  so1.steps = b.stage1_steps;
  so1.batch = b.batch;
  run_stage1(pc, so1, seed, prep.vq, none);
  // Freeze the base for the stage-2 cells.
  auto ck = collect_checkpoint(pc, &prep.base, nullptr, nullptr);
  prep.base = load_unified(ck, pc, false, false);
  return prep;
}

}  // namespace detail

inline AblateReport ablate(const std::string& axis, int seeds, const AblateBudget& b) {
  if (seeds < 1) throw ConfigError("ablate: need at least one seed");
  AblateReport report;
  report.axis = axis;

  auto for_seeds = [&](auto&& cell_fn, AblateCell& cell) {
    for (int s = 0; s < seeds; ++s) {
      try {
        cell.per_seed.push_back(cell_fn(static_cast<uint64_t>(9000 + s)));
      } catch (const Error&) {
        cell.failed = true;
        return;
      }
    }
  };

  if (axis == "init_strategy") {
    report.metric = "validation ntp loss";
    report.higher_better = false;
    PipelineConfig pc = PipelineConfig::small();
    for (bool copy_init : {false, true}) {
      AblateCell cell;
      cell.label = copy_init ? "copy" : "random";
      for_seeds(
          [&](uint64_t seed) {
            auto prep = detail::prep_base_and_vq(pc, b, seed);
            Rng rng(seed, 0x171a7e);
            ar::stack_expand(prep.base, pc.arc.stack_layers, rng, copy_init);
            auto so2 = StageOpts::defaults_for(2);
            so2.steps = b.stage2_steps;
            so2.batch = b.batch;
            io::MetricsWriter none;
            run_stage2(pc, so2, seed, prep.base, prep.vq, none);
            return eval_val_ntp(pc, prep.base, prep.vq, b.eval_count);
          },
          cell);
      report.cells.push_back(std::move(cell));
    }
  } else if (axis == "stack_depth") {
    report.metric = "validation ntp loss";
    report.higher_better = false;
    PipelineConfig pc = PipelineConfig::small();
    pc.arc.base.depth = 4;
    pc.finalize();
    for (int n : {1, 2, 4}) {
      AblateCell cell;
      cell.label = "N=" + std::to_string(n);
      for_seeds(
          [&](uint64_t seed) {
            auto prep = detail::prep_base_and_vq(pc, b, seed);
            prep.pc.arc.stack_layers = n;
            Rng rng(seed, 0x171a7e);
            ar::stack_expand(prep.base, n, rng, true);
            auto so2 = StageOpts::defaults_for(2);
            so2.steps = b.stage2_steps;
            so2.batch = b.batch;
            io::MetricsWriter none;
            run_stage2(prep.pc, so2, seed, prep.base, prep.vq, none);
            return eval_val_ntp(prep.pc, prep.base, prep.vq, b.eval_count);
          },
          cell);
      report.cells.push_back(std::move(cell));
    }
  } else if (axis == "vq_type") {
    report.metric = "geneval-mini overall";
    report.higher_better = true;
    for (bool large : {false, true}) {
      AblateCell cell;
      cell.label = large ? "large(K=512,d=32)" : "small(K=64,d=8)";
      for_seeds(
          [&](uint64_t seed) {
            PipelineConfig pc = PipelineConfig::small();
            if (!large) {
              pc.vqc.codebook_size = 64;
              pc.vqc.dim = 8;
            }
            pc.finalize();
            auto prep = detail::prep_base_and_vq(pc, b, seed);
            Rng rng(seed, 0x171a7e);
            ar::stack_expand(prep.base, pc.arc.stack_layers, rng, true);
            auto so2 = StageOpts::defaults_for(2);
            so2.steps = b.stage2_steps;
            so2.batch = b.batch;
            io::MetricsWriter none;
            run_stage2(pc, so2, seed, prep.base, prep.vq, none);
            return eval_geneval(pc, prep.base, prep.vq, 0xe7a1 + seed, b.eval_count).overall;
          },
          cell);
      report.cells.push_back(std::move(cell));
    }
  } else if (axis == "concat_strategy") {
    report.metric = "oracle reconstruction score";
    report.higher_better = true;
    for (auto strategy : {diffusion::ConcatStrategy::text_wise,
                          diffusion::ConcatStrategy::sequence_wise,
                          diffusion::ConcatStrategy::channel_wise}) {
      AblateCell cell;
      cell.label = diffusion::strategy_name(strategy);
      for_seeds(
          [&](uint64_t seed) {
            PipelineConfig pc = PipelineConfig::small();
            pc.dcfg.strategy = strategy;
            pc.finalize();
            Rng rng(seed, 0xab1a7e);
            auto vq_model = vq::VQModel::init(pc.vqc, rng);
            io::MetricsWriter none;
            auto so1 = StageOpts::defaults_for(1);
            so1.steps = b.stage1_steps;
            so1.batch = b.batch;
            run_stage1(pc, so1, seed, vq_model, none);
            auto diff = diffusion::DiffusionModel::init(pc.dcfg, rng, true);
            auto so3 = StageOpts::defaults_for(3);
            so3.steps = b.stage3_steps;
            so3.batch = b.batch;
            run_stage3(pc, so3, seed, diff, vq_model, none);
            return eval_oracle_reconstruction(pc, vq_model, diff, b.eval_count, strategy);
          },
          cell);
      report.cells.push_back(std::move(cell));
    }
  } else {
    throw ConfigError("unknown ablation axis: " + axis);
  }

  detail::finish_report(report);
  return report;
}

}  // namespace star::pipeline
