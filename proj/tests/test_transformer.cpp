#include <catch2/catch_amalgamated.hpp>

#include <star/optimizer.hpp>
#include <star/transformer.hpp>

using namespace star;

namespace {

ModelConfig tiny_cfg(int depth = 2, int width = 16, int heads = 2) {
  ModelConfig cfg;
  cfg.depth = depth;
  cfg.width = width;
  cfg.heads = heads;
  cfg.ffn_hidden = 2 * width;
  cfg.max_seq = 64;
  cfg.vocab = {4, 2, 6};
  cfg.validate();
  return cfg;
}

std::vector<int> seq_positions(int t) {
  std::vector<int> p(t);
  for (int i = 0; i < t; ++i) p[i] = i;
  return p;
}

}  // namespace

TEST_CASE("causal invariance: later tokens never leak backward") {
  auto cfg = tiny_cfg();
  Rng rng(55);
  for (int depth : {1, 2, 3}) {
    std::vector<Block> blocks;
    for (int i = 0; i < depth; ++i) blocks.push_back(Block::init(cfg, rng));
    auto x = Tensor::randn({8, cfg.width}, rng);
    auto pos = seq_positions(8);

    Tensor h1 = x;
    for (auto& b : blocks) h1 = block_forward(h1, b, cfg, AttnMask::causal, pos);

    for (int t = 0; t < 7; ++t) {
      auto perturbed = x.data();
      for (int j = 0; j < cfg.width; ++j) perturbed[(t + 1) * cfg.width + j] += 1.f;
      Tensor h2 = Tensor::from_data(x.shape(), perturbed);
      for (auto& b : blocks) h2 = block_forward(h2, b, cfg, AttnMask::causal, pos);
      for (int i = 0; i <= t; ++i)
        for (int j = 0; j < cfg.width; ++j)
          REQUIRE(h1.data()[i * cfg.width + j] == h2.data()[i * cfg.width + j]);
    }
  }
}

TEST_CASE("identical keys reduce single-head attention to the mean of values") {
  ModelConfig cfg = tiny_cfg(1, 2, 1);
  Block b;
  b.wq = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  b.wk = Tensor::from_data({2, 2}, {0, 0, 1, 1});  // key depends only on column 1
  b.wv = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  b.wo = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  // Rows share the second coordinate, so every key is identical while the
  // values all differ.
  auto x = Tensor::from_data({3, 2}, {1.f, 0.5f, -2.f, 0.5f, 4.f, 0.5f});
  auto out = detail::attention(x, b, cfg, AttnMask::full, std::vector<int>{},
                               static_cast<BlockCacheT<float>*>(nullptr));
  float mean0 = (1.f - 2.f + 4.f) / 3.f;
  for (int i = 0; i < 3; ++i) {
    CHECK(out.data()[i * 2 + 0] == Catch::Approx(mean0).margin(1e-6));
    CHECK(out.data()[i * 2 + 1] == Catch::Approx(0.5f).margin(1e-6));
  }
}

TEST_CASE("incremental decode with kv cache matches full recompute") {
  auto cfg = tiny_cfg(3);
  Rng rng(66);
  std::vector<Block> blocks;
  for (int i = 0; i < 3; ++i) blocks.push_back(Block::init(cfg, rng));
  auto final_norm = Tensor::full({cfg.width}, 1.f);
  auto head = Tensor::randn({cfg.width, cfg.vocab.total()}, rng, 0.05f);
  int t = 23;
  auto x = Tensor::randn({t, cfg.width}, rng);
  auto pos = seq_positions(t);

  auto full = stack_forward(x, blocks, cfg, final_norm, head, AttnMask::causal, pos);

  KVCache cache(blocks.size());
  std::vector<float> incr;
  int at = 0;
  // Prefill 5, then decode one token at a time.
  for (int chunk : std::vector<int>{5}) {
    auto part = slice(x, 0, at, chunk);
    std::vector<int> p(pos.begin() + at, pos.begin() + at + chunk);
    auto logits = stack_forward(part, blocks, cfg, final_norm, head, AttnMask::causal, p, &cache);
    incr.insert(incr.end(), logits.data().begin(), logits.data().end());
    at += chunk;
  }
  while (at < t) {
    auto part = slice(x, 0, at, 1);
    std::vector<int> p = {pos[at]};
    auto logits = stack_forward(part, blocks, cfg, final_norm, head, AttnMask::causal, p, &cache);
    incr.insert(incr.end(), logits.data().begin(), logits.data().end());
    ++at;
  }
  REQUIRE(incr.size() == full.data().size());
  for (size_t i = 0; i < incr.size(); ++i)
    CHECK(std::abs(incr[i] - full.data()[i]) < 1e-5f);
}

TEST_CASE("copied blocks compare parameter-wise bit-identical") {
  auto cfg = tiny_cfg();
  Rng rng(77);
  auto a = Block::init(cfg, rng);
  auto b = Block::copy_of(a, false);
  CHECK(a.bit_equal(b));
  CHECK_FALSE(b.wq.grad_enabled());
  b.wq.raw_data()[0] += 1.f;
  CHECK_FALSE(a.bit_equal(b));
}

TEST_CASE("zero blocks degenerate to head(norm(embed(ids)))") {
  auto cfg = tiny_cfg();
  Rng rng(88);
  auto table = Tensor::randn({cfg.vocab.total(), cfg.width}, rng);
  auto final_norm = Tensor::full({cfg.width}, 1.f);
  auto head = Tensor::randn({cfg.width, cfg.vocab.total()}, rng, 0.1f);
  std::vector<int> ids = {0, 3, 5};
  auto logits = stack_forward_ids(ids, table, std::vector<Block>{}, cfg, final_norm, head,
                                  AttnMask::causal, seq_positions(3));
  CHECK(logits.shape() == Shape{3, cfg.vocab.total()});
  auto expect = matmul(rms_norm(gather_rows(table, ids), final_norm), head);
  for (size_t i = 0; i < expect.data().size(); ++i) CHECK(logits.data()[i] == expect.data()[i]);
}

TEST_CASE("logits cover the joint vocab and ids outside it fail") {
  auto cfg = tiny_cfg();
  Rng rng(99);
  auto table = Tensor::randn({cfg.vocab.total(), cfg.width}, rng);
  CHECK_THROWS_AS(gather_rows(table, std::vector<int>{cfg.vocab.total()}), IndexError);
}

TEST_CASE("overlong sequences raise a capacity error") {
  auto cfg = tiny_cfg();
  Rng rng(111);
  auto b = Block::init(cfg, rng);
  auto x = Tensor::randn({cfg.max_seq + 1, cfg.width}, rng);
  CHECK_THROWS_AS(block_forward(x, b, cfg, AttnMask::causal, seq_positions(cfg.max_seq + 1)),
                  CapacityError);
}

TEST_CASE("greedy decode reproduces an overfit 2-token loop") {
  // 16-token corpus alternating 0/1; 200 training steps must overfit it.
  ModelConfig cfg = tiny_cfg(1, 16, 2);
  Rng rng(123);
  auto table = Tensor::randn({cfg.vocab.total(), cfg.width}, rng, 0.02f, true);
  auto final_norm = Tensor::full({cfg.width}, 1.f, true);
  auto head = Tensor::randn({cfg.width, cfg.vocab.total()}, rng, 0.02f, true);
  std::vector<Block> blocks = {Block::init(cfg, rng)};

  AdamWConfig ocfg;
  ocfg.lr = 1e-2f;
  AdamW opt(ocfg);
  opt.register_param("embed", table);
  opt.register_param("head", head);
  opt.register_param("norm", final_norm);
  blocks[0].for_each_param("block0", [&](const std::string& n, Tensor& p) {
    opt.register_param(n, p);
  });

  std::vector<int> corpus(16);
  for (int i = 0; i < 16; ++i) corpus[i] = i % 2;
  std::vector<int> inputs(corpus.begin(), corpus.end() - 1);
  std::vector<int> targets(corpus.begin() + 1, corpus.end());
  std::vector<float> weights(targets.size(), 1.f);
  auto pos = seq_positions(static_cast<int>(inputs.size()));

  for (int step = 0; step < 200; ++step) {
    GradientTape tape;
    auto logits =
        stack_forward_ids(inputs, table, blocks, cfg, final_norm, head, AttnMask::causal, pos);
    tape.backward(softmax_cross_entropy(logits, targets, weights));
    opt.step(tape);
  }

  std::vector<int> decoded = {0};
  for (int i = 0; i < 8; ++i) {
    auto logits = stack_forward_ids(decoded, table, blocks, cfg, final_norm, head,
                                    AttnMask::causal, seq_positions(static_cast<int>(decoded.size())));
    const float* last = logits.data().data() + (decoded.size() - 1) * cfg.vocab.total();
    int best = 0;
    for (int v = 1; v < cfg.vocab.total(); ++v)
      if (last[v] > last[best]) best = v;
    decoded.push_back(best);
  }
  for (size_t i = 0; i < decoded.size(); ++i) CHECK(decoded[i] == static_cast<int>(i % 2));
}
