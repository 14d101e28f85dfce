#include "xfer/bench/run.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "xfer/engine/checkpoint.hpp"
#include "xfer/tokenizer.hpp"
#include "xfer/version.hpp"

namespace xfer {

namespace {

// Phase artifacts: loss trace CSV plus a parameter checkpoint, both named
// after the phase.  No-op when no artifact directory is configured.
void write_phase_artifacts(const BenchmarkConfig& cfg, CausalLm<Real>& model,
                           const std::vector<TracePoint>& trace,
                           const std::string& phase) {
  if (cfg.artifact_dir.empty()) return;
  std::filesystem::create_directories(cfg.artifact_dir);
  write_loss_trace(trace, cfg.artifact_dir / (phase + "_trace.csv"));
  auto params = model.params();
  save_checkpoint(params, cfg.artifact_dir / phase,
                  {{"phase", phase}, {"config_hash", config_hash(cfg)}});
}

}  // namespace

BenchmarkConfig BenchmarkConfig::paper() {
  BenchmarkConfig cfg;
  cfg.profile = "paper";
  cfg.model = ModelConfig::paper(30000);
  cfg.pretrain_budget = 15'000'000;
  cfg.tune_budget = 2'000'000;
  cfg.test_budget = 200'000;
  cfg.pretrain_cfg.lr = 1e-4;
  cfg.pretrain_cfg.epochs = 5;
  cfg.tune_cfg.lr = 1e-4;
  cfg.tune_cfg.epochs = 10;
  return cfg;
}

BenchmarkConfig BenchmarkConfig::desk() {
  BenchmarkConfig cfg;
  cfg.profile = "desk";
  cfg.model = ModelConfig::desk(512);
  cfg.pretrain_budget = 200'000;
  cfg.tune_budget = 50'000;
  cfg.test_budget = 10'000;
  // Fewer steps than the paper profile, so a higher rate is needed for the
  // loss to move at all within the budget.
  cfg.pretrain_cfg.lr = 1e-3;
  cfg.pretrain_cfg.epochs = 5;
  cfg.tune_cfg.lr = 1e-3;
  cfg.tune_cfg.epochs = 10;
  return cfg;
}

void BenchmarkConfig::validate() const {
  model.validate();
  pretrain_cfg.validate();
  tune_cfg.validate();
  if (targets.empty()) {
    throw ValidationError("BenchmarkConfig: no targets configured");
  }
  if (pretrain_budget < 1 || tune_budget < 1 || test_budget < 1) {
    throw ValidationError("BenchmarkConfig: budgets must be >= 1");
  }
}

nlohmann::json bench_config_json(const BenchmarkConfig& cfg) {
  nlohmann::json j;
  j["profile"] = cfg.profile;
  j["mode"] = cfg.mode == BenchMode::pretrain ? "pretrain" : "no-pretrain";
  j["seed"] = cfg.seed;
  j["jobs"] = cfg.jobs;
  j["budgets"] = {{"pretrain", cfg.pretrain_budget},
                  {"tune", cfg.tune_budget},
                  {"test", cfg.test_budget}};
  j["model"] = {{"n_layers", cfg.model.n_layers},
                {"n_heads", cfg.model.n_heads},
                {"hidden", cfg.model.hidden},
                {"context_len", cfg.model.context_len},
                {"vocab_size", cfg.model.vocab_size},
                {"tie_embeddings", cfg.model.tie_embeddings},
                {"init_std", cfg.model.init_std},
                {"dropout", cfg.model.dropout}};
  auto train_json = [](const TrainConfig& t) {
    return nlohmann::json{{"lr", t.lr},
                          {"weight_decay", t.weight_decay},
                          {"betas", {t.beta1, t.beta2}},
                          {"eps", t.eps},
                          {"batch_size", t.batch_size},
                          {"epochs", t.epochs},
                          {"grad_clip", t.grad_clip ? nlohmann::json(*t.grad_clip)
                                                    : nlohmann::json()}};
  };
  j["pretrain"] = train_json(cfg.pretrain_cfg);
  j["tune"] = train_json(cfg.tune_cfg);
  auto& targets = j["targets"] = nlohmann::json::array();
  for (const auto& t : cfg.targets) {
    targets.push_back({{"name", t.name}, {"path", t.path.string()}});
  }
  return j;
}

std::string config_hash(const BenchmarkConfig& cfg) {
  const std::uint64_t h = fnv1a(bench_config_json(cfg).dump());
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

nlohmann::json ScoreReport::to_json() const {
  nlohmann::json j;
  j["source"] = source;
  j["profile"] = profile;
  j["per_target"] = per_target;
  j["score"] = score;
  j["ci"] = ci ? nlohmann::json{ci->first, ci->second} : nlohmann::json();
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["engine_version"] = engine_version;
  j["complete"] = complete;
  if (!complete) j["error"] = error;
  return j;
}

ScoreReport ScoreReport::from_json(const nlohmann::json& j) {
  ScoreReport r;
  r.source = j.at("source").get<std::string>();
  r.profile = j.at("profile").get<std::string>();
  r.per_target = j.at("per_target").get<std::map<std::string, double>>();
  r.score = j.at("score").get<double>();
  if (j.contains("ci") && !j["ci"].is_null()) {
    r.ci = {j["ci"][0].get<double>(), j["ci"][1].get<double>()};
  }
  r.seed = j.value("seed", std::uint64_t{0});
  r.config_hash = j.value("config_hash", "");
  r.engine_version = j.value("engine_version", "");
  r.complete = j.value("complete", true);
  r.error = j.value("error", "");
  return r;
}

std::string read_target_text(const std::filesystem::path& path) {
  auto read_file = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw ValidationError("cannot open target text: " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
  };
  if (std::filesystem::is_directory(path)) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(path)) {
      if (e.is_regular_file() && e.path().extension() == ".txt") {
        files.push_back(e.path());
      }
    }
    if (files.empty()) {
      throw ValidationError("no .txt files under " + path.string());
    }
    std::sort(files.begin(), files.end(),
              [](const auto& a, const auto& b) {
                return a.filename().string() < b.filename().string();
              });
    std::string text;
    for (const auto& f : files) {
      text += read_file(f);
      if (!text.empty() && text.back() != '\n') text += '\n';
    }
    return text;
  }
  return read_file(path);
}

PreparedTarget prepare_target(const TargetSpec& spec,
                              const BenchmarkConfig& cfg) {
  const TokenId eos = cfg.model.vocab_size - 1;
  Corpus corpus;
  if (spec.corpus) {
    corpus = *spec.corpus;
  } else if (spec.path.extension() == ".jsonl") {
    corpus = read_jsonl(spec.path);
  } else {
    const std::string text = read_target_text(spec.path);
    corpus = tokenize_target(text, cfg.model.vocab_size).second;
  }
  if (corpus.sequences.empty()) {
    throw ValidationError("target " + spec.name + ": empty corpus");
  }
  // Data ids only; the eos slot is the model's, not the corpus's.
  corpus.vocab_size = infer_vocab(corpus);
  if (corpus.vocab_size > eos) {
    throw ValidationError("target " + spec.name + ": token ids exceed " +
                          std::to_string(eos - 1) +
                          " (model vocab " +
                          std::to_string(cfg.model.vocab_size) +
                          " reserves the top id for <eos>)");
  }

  // Tune tokens come first, test tokens directly after; the ranges are
  // disjoint by construction.
  Corpus tune_raw = slice_token_range(corpus, 0, cfg.tune_budget);
  Corpus test_raw = slice_token_range(corpus, cfg.tune_budget,
                                      cfg.tune_budget + cfg.test_budget);
  if (test_raw.sequences.empty()) {
    throw ValidationError(
        "target " + spec.name + ": not enough tokens for a held-out test "
        "split after the tune budget (" +
        std::to_string(corpus.total_tokens()) + " total)");
  }
  tune_raw.vocab_size = corpus.vocab_size;
  test_raw.vocab_size = corpus.vocab_size;

  const std::uint64_t fit_seed =
      splitmix64(cfg.seed ^ fnv1a(spec.name) ^ fnv1a("tune-fit"));
  Corpus tune = fit_to_token_budget(tune_raw, cfg.tune_budget, fit_seed);

  PreparedTarget out;
  out.name = spec.name;
  out.tune = pack_into_blocks(tune, cfg.model.context_len, eos);
  out.test = pack_into_blocks(test_raw, cfg.model.context_len, eos);
  if (out.tune.n_blocks() == 0 || out.test.n_blocks() == 0) {
    throw ValidationError("target " + spec.name +
                          ": splits too small to fill one context block");
  }
  return out;
}

ScoreReport run_xferbench(const std::optional<Corpus>& source,
                          const BenchmarkConfig& cfg,
                          const std::string& source_name, bool verbose) {
  cfg.validate();
  if (cfg.mode == BenchMode::pretrain &&
      (!source || source->sequences.empty())) {
    throw ValidationError("run_xferbench: pretrain mode requires a source corpus");
  }

  ScoreReport report;
  report.source = source_name;
  report.profile = cfg.profile;
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg);
  report.engine_version = std::string(kEngineVersion);

  auto log = [&](const std::string& msg) {
    if (verbose) std::fprintf(stderr, "[xfer-eval] %s\n", msg.c_str());
  };

  // Step 1: initialize.  The pretrain-phase vocabulary is the source
  // vocabulary plus the reserved <eos>; without a source it is a
  // placeholder, since the embeddings are redrawn at step 3 either way.
  const std::uint64_t init_seed = splitmix64(cfg.seed ^ fnv1a("init"));
  ModelConfig init_cfg = cfg.model;
  init_cfg.vocab_size =
      cfg.mode == BenchMode::pretrain ? source->vocab_size + 1 : 2;
  CausalLm<Real> model = init_model<Real>(init_cfg, init_seed);

  // Step 2: pretrain on the source corpus.
  if (cfg.mode == BenchMode::pretrain) {
    try {
      log("pretraining on " + source_name);
      const std::uint64_t fit_seed = splitmix64(cfg.seed ^ fnv1a("source-fit"));
      Corpus fitted = fit_to_token_budget(*source, cfg.pretrain_budget, fit_seed);
      BlockSet blocks = pack_into_blocks(fitted, cfg.model.context_len,
                                         source->vocab_size);
      TrainConfig pre = cfg.pretrain_cfg;
      pre.seed = splitmix64(cfg.seed ^ fnv1a("pretrain"));
      auto trace = train(model, blocks, pre);
      write_phase_artifacts(cfg, model, trace, "pretrain");
    } catch (const std::exception& e) {
      report.complete = false;
      report.error = std::string("pretrain phase: ") + e.what();
      throw PhaseError(report.error, report);
    }
  }

  // Step 3: re-initialize embeddings at the target vocabulary; this is the
  // base model shared by every target.
  const std::uint64_t reinit_seed = splitmix64(cfg.seed ^ fnv1a("reinit"));
  resize_vocab(model, cfg.model.vocab_size, reinit_seed);

  // Step 4: per-target fine-tune and evaluation over independent clones.
  const std::size_t n = cfg.targets.size();
  std::vector<std::optional<double>> ces(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n) return;
      try {
        PreparedTarget tgt = prepare_target(cfg.targets[i], cfg);
        log("tuning on target " + tgt.name);
        CausalLm<Real> tuned = clone_model(model);
        TrainConfig tune_cfg = cfg.tune_cfg;
        tune_cfg.seed = splitmix64(cfg.seed ^ fnv1a(tgt.name) ^ fnv1a("tune"));
        auto trace = train(tuned, tgt.tune, tune_cfg);
        write_phase_artifacts(cfg, tuned, trace, "tune_" + tgt.name);
        ces[i] = evaluate(tuned, tgt.test);
        log("target " + tgt.name + ": h = " + std::to_string(*ces[i]));
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };

  unsigned jobs = cfg.jobs > 0 ? static_cast<unsigned>(cfg.jobs)
                               : static_cast<unsigned>(n);
  jobs = std::min(jobs, std::max(1u, std::thread::hardware_concurrency()));
  jobs = std::min<unsigned>(jobs, n);
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (ces[i]) report.per_target[cfg.targets[i].name] = *ces[i];
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!ces[i]) {
      report.complete = false;
      report.error = "tune phase, target " + cfg.targets[i].name + ": " +
                     errors[i];
      throw PhaseError(report.error, report);
    }
  }

  // Step 5: aggregate.
  report.score = aggregate_score(report.per_target);
  return report;
}

}  // namespace xfer
