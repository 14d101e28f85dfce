#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>

#include "xfer/bench/run.hpp"
#include "xfer/synthgen.hpp"
#include "xfer/version.hpp"

using namespace xfer;

namespace {

// Deliberately tiny setup so end-to-end runs take seconds.
BenchmarkConfig small_cfg() {
  BenchmarkConfig cfg;
  cfg.profile = "desk";
  cfg.model.n_layers = 1;
  cfg.model.n_heads = 2;
  cfg.model.hidden = 16;
  cfg.model.context_len = 16;
  cfg.model.vocab_size = 32;
  cfg.pretrain_budget = 2000;
  cfg.tune_budget = 800;
  cfg.test_budget = 200;
  cfg.pretrain_cfg.lr = 1e-3;
  cfg.pretrain_cfg.batch_size = 4;
  cfg.pretrain_cfg.epochs = 1;
  cfg.tune_cfg.lr = 1e-3;
  cfg.tune_cfg.batch_size = 4;
  cfg.tune_cfg.epochs = 1;
  cfg.seed = 1;
  cfg.jobs = 1;
  return cfg;
}

TargetSpec mem_target(const std::string& name, std::uint64_t seed) {
  TargetSpec t;
  t.name = name;
  t.corpus = gen_random_corpus(31, 1200, 20, seed);
  return t;
}

}  // namespace

TEST_CASE("profile presets") {
  auto paper = BenchmarkConfig::paper();
  CHECK(paper.profile == "paper");
  CHECK(paper.model.n_layers == 6);
  CHECK(paper.model.hidden == 768);
  CHECK(paper.model.context_len == 256);
  CHECK(paper.model.vocab_size == 30000);
  CHECK(paper.pretrain_budget == 15'000'000u);
  CHECK(paper.tune_budget == 2'000'000u);
  CHECK(paper.pretrain_cfg.lr == 1e-4);
  CHECK(paper.pretrain_cfg.epochs == 5);
  CHECK(paper.tune_cfg.epochs == 10);
  CHECK(paper.pretrain_cfg.batch_size == 32);

  auto desk = BenchmarkConfig::desk();
  CHECK(desk.profile == "desk");
  CHECK(desk.model.hidden == 64);
  CHECK(desk.pretrain_budget == 200'000u);
}

TEST_CASE("config hash is stable and config-sensitive") {
  auto a = small_cfg();
  a.targets = {mem_target("t1", 1)};
  auto b = small_cfg();
  b.targets = {mem_target("t1", 1)};
  CHECK(config_hash(a) == config_hash(b));
  b.seed = 2;
  CHECK(config_hash(a) != config_hash(b));
  b = a;
  b.tune_cfg.lr = 2e-3;
  CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("score report JSON round trip") {
  ScoreReport r;
  r.source = "zm";
  r.profile = "desk";
  r.per_target = {{"a", 3.5}, {"b", 4.25}};
  r.score = 3.875;
  r.ci = {{3.4, 4.3}};
  r.seed = 9;
  r.config_hash = "abc123";
  r.engine_version = std::string(kEngineVersion);
  auto j = r.to_json();
  auto back = ScoreReport::from_json(j);
  CHECK(back.source == r.source);
  CHECK(back.per_target == r.per_target);
  CHECK(back.score == r.score);
  CHECK(back.ci == r.ci);
  CHECK(back.seed == r.seed);
  CHECK(back.config_hash == r.config_hash);
  CHECK(back.engine_version == r.engine_version);
  CHECK(back.complete);

  ScoreReport partial;
  partial.source = "s";
  partial.profile = "desk";
  partial.complete = false;
  partial.error = "tune phase failed";
  auto jp = partial.to_json();
  CHECK(jp["ci"].is_null());
  auto bp = ScoreReport::from_json(jp);
  CHECK_FALSE(bp.complete);
  CHECK(bp.error == "tune phase failed");
  CHECK_FALSE(bp.ci.has_value());
}

TEST_CASE("prepare_target splits tune and test disjointly") {
  auto cfg = small_cfg();
  TargetSpec t = mem_target("t", 3);
  cfg.targets = {t};
  PreparedTarget p = prepare_target(t, cfg);
  CHECK(p.name == "t");
  CHECK(p.tune.block_len == 16);
  CHECK(p.tune.eos_id == 31);
  CHECK(p.tune.n_blocks() >= 800 / 16);
  CHECK(p.test.n_blocks() >= 200 / 16 - 1);
  // Tune covers stream positions [0, 800), test [800, 1000): the first
  // test token is the corpus token at position 800.
  const Corpus& c = *t.corpus;
  CHECK(p.test.data[0] == c.sequences[40][0]);  // 800 / 20 = row 40
}

TEST_CASE("prepare_target validation") {
  auto cfg = small_cfg();

  TargetSpec big;
  big.name = "big";
  big.corpus = gen_random_corpus(64, 1200, 20, 1);  // ids collide with eos
  CHECK_THROWS_AS(prepare_target(big, cfg), ValidationError);

  TargetSpec tiny;
  tiny.name = "tiny";
  tiny.corpus = gen_random_corpus(31, 500, 20, 1);  // nothing past the budget
  CHECK_THROWS_AS(prepare_target(tiny, cfg), ValidationError);

  TargetSpec missing;
  missing.name = "missing";
  missing.path = "/nonexistent/data.jsonl";
  CHECK_THROWS_AS(prepare_target(missing, cfg), ValidationError);
}

TEST_CASE("prepare_target tokenizes plain text") {
  auto cfg = small_cfg();
  cfg.model.vocab_size = 270;
  cfg.tune_budget = 300;
  cfg.test_budget = 60;
  auto dir = std::filesystem::temp_directory_path() / "xfer_tgt_txt";
  std::filesystem::create_directories(dir);
  {
    std::ofstream a(dir / "a.txt");
    for (int i = 0; i < 40; ++i) a << "alpha beta gamma delta\n";
    std::ofstream b(dir / "b.txt");
    for (int i = 0; i < 40; ++i) b << "beta beta alpha gamma\n";
  }
  TargetSpec t;
  t.name = "text";
  t.path = dir;
  PreparedTarget p = prepare_target(t, cfg);
  CHECK(p.tune.n_blocks() > 0);
  CHECK(p.test.n_blocks() > 0);
  CHECK(p.tune.eos_id == 269);
}

TEST_CASE("run_xferbench end to end, deterministic") {
  auto cfg = small_cfg();
  cfg.targets = {mem_target("t1", 10), mem_target("t2", 11)};
  Corpus source = gen_random_corpus(31, 3000, 20, 99);

  ScoreReport r1 = run_xferbench(source, cfg, "rand");
  CHECK(r1.complete);
  CHECK(r1.source == "rand");
  CHECK(r1.profile == "desk");
  CHECK(r1.per_target.size() == 2u);
  const double mean =
      (r1.per_target.at("t1") + r1.per_target.at("t2")) / 2.0;
  CHECK(r1.score == doctest::Approx(mean).epsilon(1e-12));
  // Cross-entropies on IID-uniform data stay near ln(31).
  CHECK(r1.per_target.at("t1") > 2.0);
  CHECK(r1.per_target.at("t1") < 4.5);
  CHECK(r1.engine_version == std::string(kEngineVersion));
  CHECK(r1.config_hash == config_hash(cfg));

  ScoreReport r2 = run_xferbench(source, cfg, "rand");
  CHECK(r2.per_target == r1.per_target);
  CHECK(r2.score == r1.score);

  auto other = cfg;
  other.seed = 2;
  ScoreReport r3 = run_xferbench(source, other, "rand");
  CHECK(r3.per_target != r1.per_target);
}

TEST_CASE("parallel and sequential runs give identical per-target results") {
  auto cfg = small_cfg();
  cfg.targets = {mem_target("a", 20), mem_target("b", 21), mem_target("c", 22)};
  Corpus source = gen_random_corpus(31, 3000, 20, 7);

  cfg.jobs = 1;
  ScoreReport seq = run_xferbench(source, cfg, "src");
  cfg.jobs = 3;
  ScoreReport par = run_xferbench(source, cfg, "src");
  REQUIRE(par.per_target.size() == seq.per_target.size());
  for (const auto& [name, ce] : seq.per_target) {
    CHECK(par.per_target.at(name) == ce);
  }
  CHECK(par.score == seq.score);
}

TEST_CASE("no-pretrain equals pretraining for zero steps") {
  auto cfg = small_cfg();
  cfg.targets = {mem_target("t1", 30)};

  // A source so small it yields fewer blocks than one batch: the pretrain
  // loop runs zero steps.
  Corpus scrap = gen_random_corpus(31, 40, 20, 1);
  auto zero_cfg = cfg;
  zero_cfg.pretrain_budget = 40;
  zero_cfg.pretrain_cfg.batch_size = 32;
  ScoreReport with_scrap = run_xferbench(scrap, zero_cfg, "scrap");

  auto np_cfg = cfg;
  np_cfg.mode = BenchMode::no_pretrain;
  ScoreReport without = run_xferbench(std::nullopt, np_cfg, "none");

  CHECK(without.per_target.at("t1") == with_scrap.per_target.at("t1"));
}

TEST_CASE("pretrain mode requires a source") {
  auto cfg = small_cfg();
  cfg.targets = {mem_target("t1", 1)};
  CHECK_THROWS_AS(run_xferbench(std::nullopt, cfg, "x"), ValidationError);
  CHECK_THROWS_AS(run_xferbench(Corpus{}, cfg, "x"), ValidationError);
  cfg.targets.clear();
  CHECK_THROWS_AS(run_xferbench(std::nullopt, cfg, "x"), ValidationError);
}

TEST_CASE("a failing target yields a PhaseError with partial results") {
  auto cfg = small_cfg();
  TargetSpec broken;
  broken.name = "zz-broken";
  broken.path = "/nonexistent/data.jsonl";
  cfg.targets = {mem_target("aa-good", 5), broken};
  cfg.mode = BenchMode::no_pretrain;

  try {
    run_xferbench(std::nullopt, cfg, "src");
    FAIL("expected PhaseError");
  } catch (const PhaseError& e) {
    CHECK_FALSE(e.partial.complete);
    CHECK(e.partial.error.find("zz-broken") != std::string::npos);
    CHECK(e.partial.per_target.count("aa-good") == 1u);
    CHECK(e.partial.per_target.count("zz-broken") == 0u);
  }
}
