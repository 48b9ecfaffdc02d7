// smlm: command-line front end for the style-masking transfer pipeline.
//
//   smlm gen-toy --spec configs/toy_spec.json --out data/toy
//   smlm pipeline --config configs/toy_pipeline.json
//   smlm transfer --run runs/toy --input in.tsv --dst positive
//
// Exit status: 0 on success, 1 for usage or configuration errors, 2 when a
// stage fails at run time.

#include "smlm/error.hpp"
#include "smlm/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <fstream>
#include <iostream>
#include <sstream>

namespace {

namespace fs = std::filesystem;
namespace pl = smlm::pipeline;

constexpr int kUsageError = 1;
constexpr int kRuntimeError = 2;

struct RunOptions {
  std::string config;
  std::vector<std::string> sets;
  bool force = false;
};

void add_run_options(CLI::App* cmd, RunOptions& opts) {
  cmd->add_option("-c,--config", opts.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", opts.sets, "Override a config key, e.g. --set smlm.embedding_dim=64");
  cmd->add_flag("--force", opts.force, "Rerun stages even when their checksums match");
}

pl::RunConfig load(const RunOptions& opts) {
  auto overrides = pl::environment_overrides();
  for (const auto& s : opts.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw smlm::ConfigError("--set expects key=value, got '" + s + "'");
    overrides[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return pl::load_run_config(opts.config, overrides);
}

void print_summary(const pl::Pipeline& p) {
  for (const auto& s : p.executed_stages()) spdlog::info("ran {}", s);
  for (const auto& s : p.skipped_stages()) spdlog::info("skipped {} (checksums match)", s);
}

int parse_label(const std::string& text, const fs::path& run_dir) {
  try {
    std::size_t used = 0;
    const int id = std::stoi(text, &used);
    if (used == text.size()) return id;
  } catch (const std::exception&) {
  }
  const auto manifest = pl::RunManifest::load_or_empty(run_dir / "manifest.json");
  const auto config = pl::RunConfig::from_json(manifest.config, run_dir);
  const auto names = config.corpus.toy_spec ? smlm::ToyCorpusSpec::load(*config.corpus.toy_spec).labels
                                            : config.corpus.labels;
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (names[i] == text) return static_cast<int>(i);
  }
  throw smlm::ConfigError("unknown style label '" + text + "'");
}

int run_transfer(const std::string& run, const std::string& input, const std::string& dst_text,
                 const std::string& output, bool bootstrap_only) {
  const fs::path run_dir(run);
  const int dst = parse_label(dst_text, run_dir);
  const auto manifest = pl::RunManifest::load_or_empty(run_dir / "manifest.json");
  const auto config = pl::RunConfig::from_json(manifest.config, run_dir);
  const std::size_t styles = config.corpus.toy_spec
                                 ? smlm::ToyCorpusSpec::load(*config.corpus.toy_spec).labels.size()
                                 : config.corpus.labels.size();

  std::ifstream in(input);
  if (!in) throw smlm::ConfigError("cannot open input " + input);
  const auto examples = smlm::parse_examples(in, styles, input);
  const auto outputs = pl::transfer_with_run(run_dir, examples, dst, !bootstrap_only);

  std::ostringstream text;
  for (const auto& out : outputs) text << dst << '\t' << smlm::join_tokens(out) << '\n';
  if (output.empty()) {
    std::cout << text.str();
  } else {
    std::ofstream(output, std::ios::binary) << text.str();
  }
  spdlog::info("transferred {} sentences to style {}", outputs.size(), dst);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("smlm"));

  CLI::App app{"Style-masked language model text style transfer"};
  app.require_subcommand(1);
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  std::string spec_path, toy_out;
  auto* gen = app.add_subcommand("gen-toy", "Generate a planted-style toy corpus");
  gen->add_option("--spec", spec_path, "Toy corpus spec (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", toy_out, "Output directory")->required();

  RunOptions opts;
  struct StageCommand {
    const char* name;
    const char* help;
    pl::Stage last;
  };
  const StageCommand stage_commands[] = {
      {"train-attr", "Train the attribution classifier", pl::Stage::kAttribution},
      {"mask", "Style-mask every split", pl::Stage::kMask},
      {"train-smlm", "Bootstrap the style-masked language model", pl::Stage::kBootstrap},
      {"finetune", "Adversarially fine-tune the bootstrapped model", pl::Stage::kFinetune},
      {"eval", "Transfer the evaluation split and score it", pl::Stage::kEvaluate},
      {"pipeline", "Run every stage end to end", pl::Stage::kEvaluate},
  };
  std::vector<std::pair<CLI::App*, pl::Stage>> stage_apps;
  for (const auto& sc : stage_commands) {
    auto* cmd = app.add_subcommand(sc.name, sc.help);
    add_run_options(cmd, opts);
    stage_apps.emplace_back(cmd, sc.last);
  }

  auto* compare = app.add_subcommand("compare-attr", "Compare masking quality across attribution methods");
  add_run_options(compare, opts);

  std::vector<double> grid;
  auto* sweep = app.add_subcommand("sweep", "Sweep lambda_epsilon and report masking quality");
  add_run_options(sweep, opts);
  sweep->add_option("--grid", grid, "Comma-separated lambda_epsilon values")->delimiter(',');

  std::string run_dir, input, dst, output;
  bool bootstrap_only = false;
  auto* transfer = app.add_subcommand("transfer", "Transfer sentences with a trained run");
  transfer->add_option("--run", run_dir, "Run output directory")->required()->check(CLI::ExistingDirectory);
  transfer->add_option("--input", input, "Input TSV: label<TAB>tokens")->required()->check(CLI::ExistingFile);
  transfer->add_option("--dst", dst, "Destination style (id or name)")->required();
  transfer->add_option("-o,--output", output, "Output file (default: stdout)");
  transfer->add_flag("--bootstrap", bootstrap_only, "Use the bootstrapped model instead of the fine-tuned one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kUsageError;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (gen->parsed()) {
      const auto rec = pl::gen_toy(spec_path, toy_out);
      std::cout << rec.metrics.dump(2) << '\n';
      return 0;
    }
    if (transfer->parsed()) return run_transfer(run_dir, input, dst, output, bootstrap_only);

    pl::Pipeline p(load(opts), opts.force);
    if (compare->parsed()) {
      std::cout << smlm::eval::format_table(p.compare_attr());
    } else if (sweep->parsed()) {
      const auto curve = p.sweep(grid.empty() ? p.config().eval.sweep_grid : grid);
      std::cout << smlm::eval::format_table(curve);
      spdlog::info("wrote {}", p.path("reports/sweep.csv").string());
    } else {
      for (const auto& [cmd, last] : stage_apps) {
        if (!cmd->parsed()) continue;
        p.run_until(last);
        if (last == pl::Stage::kEvaluate) std::cout << smlm::eval::format_table(*p.eval_report());
      }
    }
    print_summary(p);
    return 0;
  } catch (const smlm::ConfigError& e) {
    spdlog::error("{}", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kRuntimeError;
  }
}
