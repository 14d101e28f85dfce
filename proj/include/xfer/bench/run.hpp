#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "xfer/bench/stats.hpp"
#include "xfer/corpus.hpp"
#include "xfer/model.hpp"
#include "xfer/trainer.hpp"

namespace xfer {

// Benchmark arithmetic runs in 32-bit floats.
using Real = float;

enum class BenchMode { pretrain, no_pretrain };

// A transfer target: either plain text (tokenized with BPE) or an already
// tokenized corpus.  Exactly one of `corpus` / `path` is used; a .jsonl
// path is read as a pre-tokenized corpus, a .txt file or a directory of
// .txt files (concatenated in lexicographic filename order) as text.
struct TargetSpec {
  std::string name;
  std::filesystem::path path;
  std::optional<Corpus> corpus;
};

struct BenchmarkConfig {
  std::vector<TargetSpec> targets;
  std::size_t pretrain_budget = 15'000'000;
  std::size_t tune_budget = 2'000'000;
  std::size_t test_budget = 200'000;
  ModelConfig model;  // vocab_size is the shared target vocabulary
  TrainConfig pretrain_cfg;
  TrainConfig tune_cfg;
  BenchMode mode = BenchMode::pretrain;
  std::uint64_t seed = 0;
  int jobs = 0;  // 0 = one per target, capped at hardware threads
  std::string profile = "desk";
  // When set, per-phase loss traces (CSV) and checkpoints land here.
  std::filesystem::path artifact_dir;

  static BenchmarkConfig paper();
  static BenchmarkConfig desk();
  void validate() const;
};

struct ScoreReport {
  std::string source;
  std::string profile;
  std::map<std::string, double> per_target;
  double score = 0.0;
  std::optional<std::pair<double, double>> ci;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string engine_version;
  bool complete = true;
  std::string error;

  nlohmann::json to_json() const;
  static ScoreReport from_json(const nlohmann::json& j);
};

// Thrown when a benchmark phase fails; carries whatever per-target results
// were already computed.
struct PhaseError : std::runtime_error {
  PhaseError(const std::string& msg, ScoreReport partial_report)
      : std::runtime_error(msg), partial(std::move(partial_report)) {}
  ScoreReport partial;
};

// Tokenized and packed tune/test splits for one target.
struct PreparedTarget {
  std::string name;
  BlockSet tune;
  BlockSet test;
};

PreparedTarget prepare_target(const TargetSpec& spec,
                              const BenchmarkConfig& cfg);

// The five-step procedure: init, pretrain on the source (skipped in
// no_pretrain mode), re-initialize embeddings at the target vocabulary,
// fine-tune + evaluate per target (independently, optionally in parallel),
// aggregate.
ScoreReport run_xferbench(const std::optional<Corpus>& source,
                          const BenchmarkConfig& cfg,
                          const std::string& source_name = "source",
                          bool verbose = false);

nlohmann::json bench_config_json(const BenchmarkConfig& cfg);
std::string config_hash(const BenchmarkConfig& cfg);

// Reads one target's text: a .txt file, or every *.txt under a directory
// concatenated in lexicographic filename order.
std::string read_target_text(const std::filesystem::path& path);

}  // namespace xfer
