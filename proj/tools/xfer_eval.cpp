// xfer-eval: corpus evaluation by transfer learning, plus the synthetic
// corpus generators and report tooling.  Exit codes: 0 success, 1 invalid
// input, 2 runtime failure.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "xfer/bench/run.hpp"
#include "xfer/bench/stats.hpp"
#include "xfer/synthgen.hpp"
#include "xfer/tokenizer.hpp"
#include "xfer/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string iso_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_json_file(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw xfer::ValidationError("cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw xfer::ValidationError(path.string() + ": " + e.what());
  }
  return j;
}

// ---------------------------------------------------------------------------
// run

struct RunArgs {
  std::string corpus_path;
  std::string config_path;
  std::string profile = "desk";
  std::string mode = "pretrain";
  std::string targets_dir;
  std::string out_dir = ".";
  std::string source_name;
  std::uint64_t seed = 0;
  int jobs = 0;
  bool verbose = false;
  // Track which flags the user actually set, so they override the file.
  CLI::App* cmd = nullptr;
};

void apply_config_file(xfer::BenchmarkConfig& cfg, const json& j) {
  if (j.contains("profile")) cfg.profile = j["profile"].get<std::string>();
  if (j.contains("seed")) cfg.seed = j["seed"].get<std::uint64_t>();
  if (j.contains("jobs")) cfg.jobs = j["jobs"].get<int>();
  if (j.contains("budgets")) {
    const auto& b = j["budgets"];
    if (b.contains("pretrain")) cfg.pretrain_budget = b["pretrain"];
    if (b.contains("tune")) cfg.tune_budget = b["tune"];
    if (b.contains("test")) cfg.test_budget = b["test"];
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    if (m.contains("n_layers")) cfg.model.n_layers = m["n_layers"];
    if (m.contains("n_heads")) cfg.model.n_heads = m["n_heads"];
    if (m.contains("hidden")) cfg.model.hidden = m["hidden"];
    if (m.contains("context_len")) cfg.model.context_len = m["context_len"];
    if (m.contains("vocab_size")) cfg.model.vocab_size = m["vocab_size"];
    if (m.contains("tie_embeddings"))
      cfg.model.tie_embeddings = m["tie_embeddings"];
    if (m.contains("init_std")) cfg.model.init_std = m["init_std"];
    if (m.contains("dropout")) cfg.model.dropout = m["dropout"];
  }
  auto apply_train = [](xfer::TrainConfig& t, const json& tj) {
    if (tj.contains("lr")) t.lr = tj["lr"];
    if (tj.contains("weight_decay")) t.weight_decay = tj["weight_decay"];
    if (tj.contains("betas")) {
      t.beta1 = tj["betas"][0];
      t.beta2 = tj["betas"][1];
    }
    if (tj.contains("eps")) t.eps = tj["eps"];
    if (tj.contains("batch_size")) t.batch_size = tj["batch_size"];
    if (tj.contains("epochs")) t.epochs = tj["epochs"];
    if (tj.contains("grad_clip")) {
      t.grad_clip = tj["grad_clip"].is_null()
                        ? std::nullopt
                        : std::optional<double>(tj["grad_clip"].get<double>());
    }
  };
  if (j.contains("pretrain")) apply_train(cfg.pretrain_cfg, j["pretrain"]);
  if (j.contains("tune")) apply_train(cfg.tune_cfg, j["tune"]);
}

std::vector<xfer::TargetSpec> discover_targets(const fs::path& dir) {
  if (!fs::is_directory(dir)) {
    throw xfer::ValidationError("targets directory not found: " + dir.string());
  }
  std::vector<xfer::TargetSpec> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto ext = e.path().extension();
    if (e.is_directory() || ext == ".jsonl" || ext == ".txt") {
      out.push_back({e.path().stem().string(), e.path(), std::nullopt});
    }
  }
  if (out.empty()) {
    throw xfer::ValidationError("no targets (.jsonl, .txt, or directories) in " +
                                dir.string());
  }
  std::sort(out.begin(), out.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  return out;
}

int cmd_run(const RunArgs& args) {
  const std::string started = iso_now();
  xfer::BenchmarkConfig cfg = args.profile == "paper"
                                  ? xfer::BenchmarkConfig::paper()
                                  : xfer::BenchmarkConfig::desk();
  json config_file_contents;
  if (!args.config_path.empty()) {
    config_file_contents = read_json_file(args.config_path);
    apply_config_file(cfg, config_file_contents);
  }
  // Explicit flags win over the config file.
  auto set = [&](const std::string& flag) {
    return args.cmd->count(flag) > 0;
  };
  cfg.profile = args.profile;
  if (set("--seed") || cfg.seed == 0) cfg.seed = args.seed;
  if (set("--jobs")) cfg.jobs = args.jobs;
  cfg.mode = args.mode == "no-pretrain" ? xfer::BenchMode::no_pretrain
                                        : xfer::BenchMode::pretrain;

  if (args.targets_dir.empty()) {
    throw xfer::ValidationError("no targets configured; pass --targets DIR");
  }
  cfg.targets = discover_targets(args.targets_dir);

  std::optional<xfer::Corpus> source;
  std::string source_name = args.source_name;
  if (cfg.mode == xfer::BenchMode::pretrain) {
    if (args.corpus_path.empty()) {
      throw xfer::ValidationError(
          "pretrain mode needs a source corpus: xfer-eval run CORPUS.jsonl");
    }
    source = xfer::read_jsonl(args.corpus_path);
    if (source_name.empty()) {
      source_name = fs::path(args.corpus_path).stem().string();
    }
  } else if (source_name.empty()) {
    source_name = "no-pretrain";
  }

  const fs::path out_dir = args.out_dir;
  fs::create_directories(out_dir);
  cfg.artifact_dir = out_dir / "artifacts";

  auto finish = [&](const xfer::ScoreReport& report, int code) {
    const fs::path report_path = out_dir / "report.json";
    write_json_file(report.to_json(), report_path);

    json manifest;
    manifest["engine_version"] = std::string(xfer::kEngineVersion);
    manifest["command"] = "run";
    manifest["profile"] = cfg.profile;
    manifest["seed"] = cfg.seed;
    manifest["config"] = xfer::bench_config_json(cfg);
    manifest["config_file"] = config_file_contents;
    manifest["started"] = started;
    manifest["finished"] = iso_now();
    auto& outputs = manifest["outputs"] = json::array();
    outputs.push_back(report_path.string());
    if (fs::exists(cfg.artifact_dir)) {
      std::vector<std::string> arts;
      for (const auto& e : fs::directory_iterator(cfg.artifact_dir)) {
        arts.push_back(e.path().string());
      }
      std::sort(arts.begin(), arts.end());
      for (auto& a : arts) outputs.push_back(a);
    }
    write_json_file(manifest, out_dir / "manifest.json");
    return code;
  };

  try {
    xfer::ScoreReport report =
        xfer::run_xferbench(source, cfg, source_name, args.verbose);
    std::printf("%.17g\n", report.score);
    return finish(report, 0);
  } catch (const xfer::PhaseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return finish(e.partial, 2);
  }
}

// ---------------------------------------------------------------------------
// gen

void emit_corpus(const xfer::Corpus& corpus, const std::string& generator,
                 const json& params, std::uint64_t seed,
                 const std::string& out) {
  xfer::write_jsonl(corpus, out);
  xfer::write_generator_metadata(out + ".meta.json", generator, params.dump(),
                                 seed, corpus.total_tokens());
  std::fprintf(stderr, "wrote %s (%zu tokens, vocab %d)\n", out.c_str(),
               corpus.total_tokens(), corpus.vocab_size);
}

// ---------------------------------------------------------------------------
// tokenize

int cmd_tokenize(const std::string& text_path, xfer::TokenId vocab,
                 const std::string& out, std::string model_out) {
  std::ifstream in(text_path, std::ios::binary);
  if (!in) {
    throw xfer::ValidationError("cannot open input text: " + text_path);
  }
  std::ostringstream os;
  os << in.rdbuf();
  const std::string text = os.str();
  if (text.empty()) {
    throw xfer::ValidationError("input text is empty: " + text_path);
  }
  auto [model, corpus] = xfer::tokenize_target(text, vocab);
  if (corpus.sequences.empty()) {
    throw xfer::ValidationError("input has no non-empty lines: " + text_path);
  }
  xfer::write_jsonl(corpus, out);
  if (model_out.empty()) model_out = out + ".bpe.json";
  xfer::save_bpe(model, model_out);
  std::fprintf(stderr, "wrote %s (%zu sequences, vocab %d) and %s\n",
               out.c_str(), corpus.sequences.size(), model.vocab_size(),
               model_out.c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// report

void write_scores_csv(const xfer::ScoreMatrix& m,
                      const std::vector<double>& means,
                      const std::vector<std::optional<std::pair<double, double>>>& cis,
                      const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "source";
  for (const auto& t : m.targets) out << "," << t;
  out << ",mean,ci_lo,ci_hi\n";
  out.precision(17);
  for (std::size_t s = 0; s < m.n_sources(); ++s) {
    out << m.sources[s];
    for (double h : m.h[s]) out << "," << h;
    out << "," << means[s];
    if (cis[s]) {
      out << "," << cis[s]->first << "," << cis[s]->second;
    } else {
      out << ",,";
    }
    out << "\n";
  }
}

void write_scores_svg(const xfer::ScoreMatrix& m,
                      const std::vector<double>& means,
                      const std::vector<std::optional<std::pair<double, double>>>& cis,
                      const fs::path& path) {
  const int bar_w = 60, gap = 30, height = 320, margin = 50;
  const int width = margin * 2 + static_cast<int>(m.n_sources()) * (bar_w + gap);
  double top = 0.0;
  for (std::size_t s = 0; s < means.size(); ++s) {
    top = std::max(top, cis[s] ? cis[s]->second : means[s]);
  }
  if (top <= 0.0) top = 1.0;
  const double scale = (height - 2 * margin) / top;
  auto y_of = [&](double v) { return height - margin - v * scale; };

  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
      << "\" height=\"" << height << "\" data-schema=\"xfer-eval-scores-1\">\n";
  out << "  <line x1=\"" << margin << "\" y1=\"" << y_of(0) << "\" x2=\""
      << width - margin << "\" y2=\"" << y_of(0)
      << "\" stroke=\"black\"/>\n";
  for (std::size_t s = 0; s < m.n_sources(); ++s) {
    const int x = margin + static_cast<int>(s) * (bar_w + gap);
    out << "  <rect x=\"" << x << "\" y=\"" << y_of(means[s]) << "\" width=\""
        << bar_w << "\" height=\"" << means[s] * scale
        << "\" fill=\"#4878a8\"/>\n";
    if (cis[s]) {
      const int cx = x + bar_w / 2;
      out << "  <line x1=\"" << cx << "\" y1=\"" << y_of(cis[s]->first)
          << "\" x2=\"" << cx << "\" y2=\"" << y_of(cis[s]->second)
          << "\" stroke=\"black\" stroke-width=\"2\"/>\n";
      for (double v : {cis[s]->first, cis[s]->second}) {
        out << "  <line x1=\"" << cx - 8 << "\" y1=\"" << y_of(v) << "\" x2=\""
            << cx + 8 << "\" y2=\"" << y_of(v) << "\" stroke=\"black\"/>\n";
      }
    }
    out << "  <text x=\"" << x + bar_w / 2 << "\" y=\"" << height - margin + 20
        << "\" text-anchor=\"middle\" font-size=\"12\">" << m.sources[s]
        << "</text>\n";
  }
  out << "</svg>\n";
}

int cmd_report(const std::vector<std::string>& paths, const std::string& csv,
               const std::string& svg, long resamples, double level,
               std::uint64_t seed) {
  std::vector<xfer::ScoreReport> reports;
  for (const auto& p : paths) {
    reports.push_back(xfer::ScoreReport::from_json(read_json_file(p)));
    if (!reports.back().complete) {
      throw xfer::ValidationError(p + ": incomplete report");
    }
  }
  const std::string profile = reports[0].profile;
  for (std::size_t i = 1; i < reports.size(); ++i) {
    if (reports[i].profile != profile) {
      throw xfer::ValidationError(
          "mixed profiles are not comparable: " + paths[0] + " is '" + profile +
          "', " + paths[i] + " is '" + reports[i].profile + "'");
    }
  }

  xfer::ScoreMatrix m;
  for (const auto& [name, _] : reports[0].per_target) m.targets.push_back(name);
  for (const auto& r : reports) {
    if (r.per_target.size() != m.targets.size()) {
      throw xfer::ValidationError("report for '" + r.source +
                                  "' covers a different target set");
    }
    std::vector<double> row;
    for (const auto& t : m.targets) {
      auto it = r.per_target.find(t);
      if (it == r.per_target.end()) {
        throw xfer::ValidationError("report for '" + r.source +
                                    "' is missing target " + t);
      }
      row.push_back(it->second);
    }
    m.sources.push_back(r.source);
    m.h.push_back(std::move(row));
  }

  std::vector<double> means;
  for (const auto& r : reports) means.push_back(r.score);

  std::vector<std::optional<std::pair<double, double>>> cis(m.n_sources());
  if (m.n_sources() < 2) {
    std::fprintf(stderr,
                 "warning: a single report cannot be normalized; CI omitted\n");
  } else if (m.n_targets() < 2) {
    std::fprintf(stderr,
                 "warning: need at least 2 targets to bootstrap; CI omitted\n");
  } else {
    const auto z = xfer::normalize_scores(m);
    for (std::size_t s = 0; s < m.n_sources(); ++s) {
      auto [lo, hi] = xfer::bootstrap_ci(z[s], resamples, level, seed);
      cis[s] = xfer::denormalize_ci(lo, hi, m);
    }
  }

  write_scores_csv(m, means, cis, csv);
  write_scores_svg(m, means, cis, svg);
  std::fprintf(stderr, "wrote %s and %s\n", csv.c_str(), svg.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Corpus evaluation by transfer learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(xfer::kEngineVersion));

  // run
  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Score a corpus end to end");
  run->add_option("corpus", run_args.corpus_path,
                  "Source corpus (JSONL), required unless --mode no-pretrain");
  run->add_option("--config", run_args.config_path,
                  "JSON config file (flags override it)");
  run->add_option("--profile", run_args.profile, "Scale preset")
      ->check(CLI::IsMember({"paper", "desk"}))
      ->capture_default_str();
  run->add_option("--mode", run_args.mode, "Benchmark mode")
      ->check(CLI::IsMember({"pretrain", "no-pretrain"}))
      ->capture_default_str();
  run->add_option("--targets", run_args.targets_dir,
                  "Directory of targets (.jsonl, .txt, or subdirectories)");
  run->add_option("--seed", run_args.seed, "Master seed")->capture_default_str();
  run->add_option("--jobs", run_args.jobs,
                  "Concurrent targets (0 = one thread per target)")
      ->capture_default_str();
  run->add_option("--out", run_args.out_dir, "Output directory")
      ->capture_default_str();
  run->add_option("--source-name", run_args.source_name,
                  "Source label in the report (default: corpus file stem)");
  run->add_flag("--verbose", run_args.verbose, "Log phase progress to stderr");
  run_args.cmd = run;

  // gen
  auto* gen = app.add_subcommand("gen", "Generate a synthetic corpus");
  gen->require_subcommand(1);

  struct {
    xfer::TokenId vocab = 1000;
    std::size_t tokens = 0;
    std::uint64_t seed = 0;
    std::string out;
    double alpha = 1.0, beta = 2.7, open_prob = 0.4;
    int max_depth = 16;
    long min_len = 64, max_len = 512;
    std::string from_text;
    long seq_len = 256;
  } g;
  auto add_paren_opts = [&](CLI::App* c) {
    c->add_option("--open-prob", g.open_prob)->capture_default_str();
    c->add_option("--max-depth", g.max_depth)->capture_default_str();
    c->add_option("--min-len", g.min_len)->capture_default_str();
    c->add_option("--max-len", g.max_len)->capture_default_str();
  };
  auto* zm = gen->add_subcommand(
      "paren-zm", "Balanced brackets over a Zipf-Mandelbrot word distribution");
  zm->add_option("--vocab", g.vocab, "Word vocabulary (corpus vocab is 2x)")
      ->capture_default_str();
  zm->add_option("--tokens", g.tokens, "Total token budget")->required();
  zm->add_option("--seed", g.seed)->capture_default_str();
  zm->add_option("--out", g.out, "Output corpus path")->required();
  zm->add_option("--alpha", g.alpha)->capture_default_str();
  zm->add_option("--beta", g.beta)->capture_default_str();
  add_paren_opts(zm);

  auto* pr = gen->add_subcommand(
      "paren-real",
      "Balanced brackets over a word distribution estimated from text");
  pr->add_option("--from-text", g.from_text, "Text file to estimate from")
      ->required();
  pr->add_option("--vocab", g.vocab, "BPE vocabulary for the estimate")
      ->capture_default_str();
  pr->add_option("--tokens", g.tokens, "Total token budget")->required();
  pr->add_option("--seed", g.seed)->capture_default_str();
  pr->add_option("--out", g.out, "Output corpus path")->required();
  add_paren_opts(pr);

  auto* rnd = gen->add_subcommand("random", "IID uniform tokens");
  rnd->add_option("--vocab", g.vocab, "Vocabulary size")->required();
  rnd->add_option("--tokens", g.tokens, "Total token budget")->required();
  rnd->add_option("--seq-len", g.seq_len)->capture_default_str();
  rnd->add_option("--seed", g.seed)->capture_default_str();
  rnd->add_option("--out", g.out, "Output corpus path")->required();

  // tokenize
  struct {
    std::string text;
    xfer::TokenId vocab = 30000;
    std::string out;
    std::string model_out;
  } tk;
  auto* tok = app.add_subcommand("tokenize", "BPE-tokenize a text file");
  tok->add_option("text", tk.text, "Input text file")->required();
  tok->add_option("--vocab", tk.vocab, "BPE vocabulary size")
      ->capture_default_str();
  tok->add_option("--out", tk.out, "Output corpus path")->required();
  tok->add_option("--model", tk.model_out,
                  "BPE model path (default: OUT.bpe.json)");

  // report
  struct {
    std::vector<std::string> paths;
    std::string csv = "scores.csv";
    std::string svg = "scores.svg";
    long resamples = 10000;
    double level = 0.95;
    std::uint64_t seed = 0;
  } rp;
  auto* rep = app.add_subcommand("report", "Tabulate and plot stored reports");
  rep->add_option("reports", rp.paths, "Report JSON files")->required();
  rep->add_option("--out-csv", rp.csv)->capture_default_str();
  rep->add_option("--out-svg", rp.svg)->capture_default_str();
  rep->add_option("--resamples", rp.resamples)->capture_default_str();
  rep->add_option("--level", rp.level)->capture_default_str();
  rep->add_option("--seed", rp.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (*run) return cmd_run(run_args);
    if (*zm) {
      xfer::ParenSpec spec;
      spec.dist = xfer::zm_dist({g.alpha, g.beta, g.vocab});
      spec.open_prob = g.open_prob;
      spec.max_depth = g.max_depth;
      spec.min_len = g.min_len;
      spec.max_len = g.max_len;
      auto corpus = xfer::gen_paren_corpus(spec, g.tokens, g.seed);
      emit_corpus(corpus, "paren-zm",
                  {{"vocab", g.vocab}, {"alpha", g.alpha}, {"beta", g.beta},
                   {"open_prob", g.open_prob}, {"max_depth", g.max_depth},
                   {"min_len", g.min_len}, {"max_len", g.max_len}},
                  g.seed, g.out);
      return 0;
    }
    if (*pr) {
      std::ifstream in(g.from_text, std::ios::binary);
      if (!in) {
        throw xfer::ValidationError("cannot open text: " + g.from_text);
      }
      std::ostringstream os;
      os << in.rdbuf();
      if (os.str().empty()) {
        throw xfer::ValidationError("input text is empty: " + g.from_text);
      }
      auto [bpe, tokenized] = xfer::tokenize_target(os.str(), g.vocab);
      xfer::ParenSpec spec;
      spec.dist = xfer::unigram_from_corpus(tokenized);
      spec.open_prob = g.open_prob;
      spec.max_depth = g.max_depth;
      spec.min_len = g.min_len;
      spec.max_len = g.max_len;
      auto corpus = xfer::gen_paren_corpus(spec, g.tokens, g.seed);
      emit_corpus(corpus, "paren-real",
                  {{"from_text", g.from_text}, {"vocab", g.vocab},
                   {"open_prob", g.open_prob}, {"max_depth", g.max_depth},
                   {"min_len", g.min_len}, {"max_len", g.max_len}},
                  g.seed, g.out);
      return 0;
    }
    if (*rnd) {
      auto corpus = xfer::gen_random_corpus(g.vocab, g.tokens, g.seq_len, g.seed);
      emit_corpus(corpus, "random",
                  {{"vocab", g.vocab}, {"seq_len", g.seq_len}}, g.seed, g.out);
      return 0;
    }
    if (*tok) return cmd_tokenize(tk.text, tk.vocab, tk.out, tk.model_out);
    if (*rep) {
      return cmd_report(rp.paths, rp.csv, rp.svg, rp.resamples, rp.level,
                        rp.seed);
    }
  } catch (const xfer::ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 1;
}
