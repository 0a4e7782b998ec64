#include <catch2/catch_amalgamated.hpp>

#include <star/checkpoint.hpp>
#include <star/config.hpp>
#include <star/metrics.hpp>

#include <filesystem>

using namespace star;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

io::Checkpoint sample_checkpoint() {
  io::Checkpoint ck;
  ck.config = {{"pipeline", {{"note", "sample"}}}, {"versions", {{"checkpoint", 1}}}};
  Rng rng(71);
  auto a = Tensor::randn({3, 4}, rng);
  auto b = Tensor::randn({8}, rng);
  io::collect_param(ck, "base.block0.wq", a);
  io::collect_param(ck, "base.norm", b);
  io::collect_param(ck, "vq.codebook", a);
  return ck;
}

}  // namespace

TEST_CASE("checkpoint save/load/save is byte-exact") {
  auto dir = fs::temp_directory_path();
  auto p1 = dir / "star_ck_a.bin";
  auto p2 = dir / "star_ck_b.bin";
  auto ck = sample_checkpoint();
  ck.save(p1.string());
  auto loaded = io::Checkpoint::load(p1.string());
  loaded.save(p2.string());
  CHECK(slurp(p1) == slurp(p2));
  CHECK(loaded.sections.count("base") == 1);
  CHECK(loaded.sections.count("vq") == 1);
  CHECK(loaded.config.at("versions").at("checkpoint") == 1);
  fs::remove(p1);
  fs::remove(p2);
}

TEST_CASE("checkpoint integrity failures name the section") {
  auto dir = fs::temp_directory_path();
  auto p = dir / "star_ck_c.bin";
  sample_checkpoint().save(p.string());

  SECTION("truncation") {
    auto bytes = slurp(p);
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 10));
    f.close();
    CHECK_THROWS_AS(io::Checkpoint::load(p.string()), IntegrityError);
  }
  SECTION("bit flip fails the hash check") {
    auto bytes = slurp(p);
    bytes[bytes.size() - 3] ^= 0x40;
    std::ofstream f(p, std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.close();
    try {
      io::Checkpoint::load(p.string());
      FAIL("expected IntegrityError");
    } catch (const IntegrityError& e) {
      CHECK(std::string(e.what()).find("hash") != std::string::npos);
    }
  }
  fs::remove(p);
}

TEST_CASE("restore_param round trips and shape-checks") {
  auto ck = sample_checkpoint();
  auto t = Tensor::zeros({3, 4}, true);
  io::restore_param(ck, "base.block0.wq", t);
  CHECK(t.data() == ck.sections.at("base").tensors[0].data);
  auto wrong = Tensor::zeros({4, 4});
  CHECK_THROWS_AS(io::restore_param(ck, "base.block0.wq", wrong), IntegrityError);
  CHECK_THROWS_AS(io::restore_param(ck, "base.missing", t), IntegrityError);
  CHECK_THROWS_AS(io::restore_param(ck, "nosuch.x", t), IntegrityError);
}

TEST_CASE("config tree parses the documented key styles") {
  auto t = io::ConfigTree::parse(R"(
# pipeline settings
[stage]
lr = 0.004           # learning rate
schedule = "cosine"
batch = 32
resume = false

[vq]
codebook_size = 512
channels = [32, 64]

[metrics]
path = "runs/m.jsonl"
)");
  CHECK(t.get_double("stage.lr", 0) == Catch::Approx(0.004));
  CHECK(t.get_string("stage.schedule", "") == "cosine");
  CHECK(t.get_int("stage.batch", 0) == 32);
  CHECK(t.get_bool("stage.resume", true) == false);
  CHECK(t.get_int("vq.codebook_size", 0) == 512);
  auto arr = t.get_array("vq.channels");
  REQUIRE(arr.size() == 2);
  CHECK(arr[1] == 64);
  CHECK(t.get_string("metrics.path", "") == "runs/m.jsonl");
  CHECK(t.get_int("missing.key", 7) == 7);

  CHECK_THROWS_AS(io::ConfigTree::parse("key value-without-equals"), ConfigError);
  CHECK_THROWS_AS(io::ConfigTree::parse("[unterminated"), ConfigError);
  auto bad = io::ConfigTree::parse("x = notanumber");
  CHECK_THROWS_AS(bad.get_int("x", 0), ConfigError);
}

TEST_CASE("metrics stream appends parseable lines with monotone steps") {
  auto p = fs::temp_directory_path() / "star_metrics.jsonl";
  fs::remove(p);
  {
    io::MetricsWriter w(p.string(), false);
    w.record(1, 0, {{"loss", 1.5}});
    w.record(1, 50, {{"loss", 0.7}});
  }
  {
    io::MetricsWriter w(p.string(), false);  // append-only reopen
    w.record(2, 0, {{"loss", 3.0}});
  }
  auto rows = io::read_metrics(p.string());
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].at("stage") == 1);
  CHECK(rows[1].at("step") == 50);
  CHECK(rows[2].at("stage") == 2);
  for (const auto& r : rows) CHECK_FALSE(r.contains("wall_time_ms"));
  {
    io::MetricsWriter w(p.string(), true);
    w.record(3, 1, {{"loss", 0.1}});
  }
  auto rows2 = io::read_metrics(p.string());
  CHECK(rows2.back().contains("wall_time_ms"));
  fs::remove(p);
}
