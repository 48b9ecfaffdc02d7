#pragma once

// Resumable experiment pipeline: typed run configuration, a checksummed
// run manifest, and the stage graph
//   corpus -> attribution -> eval-classifier -> mask -> bootstrap
//          -> finetune -> transfer -> evaluate
// plus the side stages used by compare-attr and sweep.

#include "smlm/attribution.hpp"
#include "smlm/corpus.hpp"
#include "smlm/eval.hpp"
#include "smlm/masking.hpp"
#include "smlm/style_mlm.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace smlm::pipeline {

namespace fs = std::filesystem;

// Environment variables with this prefix override config keys:
// SMLM__SMLM__EMBEDDING_DIM=64 sets smlm.embedding_dim, SMLM__SEED=3 sets seed.
inline constexpr std::string_view kEnvPrefix = "SMLM__";

struct CorpusSource {
  std::optional<fs::path> toy_spec;
  std::optional<fs::path> dir;
  std::vector<std::string> labels;
  int min_freq = 1;
};

struct AttributionSettings {
  attribution::AttributionMethod method;
  attribution::DiversityLstmConfig model;
};

struct EvalSettings {
  eval::EvalClassifierConfig classifier;
  std::vector<double> sweep_grid{0.0, 0.15, 0.3, 0.5, 1.0};
  Split split = Split::kTest;
};

struct RunConfig {
  fs::path output_dir;
  std::uint64_t seed = 1;
  CorpusSource corpus;
  AttributionSettings attribution;
  masking::MaskPolicyConfig masking;
  mlm::SmlmConfig smlm;
  EvalSettings eval;
  // The effective document after overrides, with paths made absolute.
  nlohmann::json snapshot;

  // Relative paths resolve against base_dir. Throws ConfigError on unknown
  // keys, bad values or missing input paths.
  static RunConfig from_json(const nlohmann::json& doc, const fs::path& base_dir);
};

std::map<std::string, std::string> environment_overrides();
void apply_overrides(nlohmann::json& doc, const std::map<std::string, std::string>& overrides);
RunConfig load_run_config(const fs::path& path, const std::map<std::string, std::string>& overrides);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const fs::path& path);

// Stage bookkeeping persisted as manifest.json in the output directory. The
// event list only grows; stage records are replaced when a stage reruns.
struct StageRecord {
  std::string status;  // "ok" or "failed"
  std::string config_hash;
  std::map<std::string, std::string> inputs;   // relative path -> sha256
  std::map<std::string, std::string> outputs;  // relative path -> sha256
  double seconds = 0.0;
  nlohmann::json metrics = nlohmann::json::object();
  std::string error;
};

struct RunManifest {
  nlohmann::json config;
  std::map<std::string, StageRecord> stages;
  nlohmann::json events = nlohmann::json::array();

  nlohmann::json to_json() const;
  static RunManifest from_json(const nlohmann::json& doc);
  static RunManifest load_or_empty(const fs::path& path);
  void save(const fs::path& path) const;
};

// Exclusive ownership of an output directory for one run.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  fs::path path_;
};

enum class Stage { kCorpus, kAttribution, kEvalClassifier, kMask, kBootstrap, kFinetune, kTransfer, kEvaluate };
std::string_view stage_name(Stage s);

class Pipeline {
 public:
  explicit Pipeline(RunConfig config, bool force = false);

  // Runs (or verifies and skips) every stage up to and including `last`.
  void run_until(Stage last);
  eval::EvalReport run_all();

  // Masking quality for all five methods plus the unmasked control.
  eval::MaskQualityReport compare_attr();
  eval::SweepCurve sweep(std::vector<double> grid);

  const RunConfig& config() const { return config_; }
  const RunManifest& manifest() const { return manifest_; }
  std::vector<std::string> executed_stages() const { return executed_; }
  std::vector<std::string> skipped_stages() const { return skipped_; }

  const Corpus& corpus();
  const Vocabulary& vocab();
  std::optional<PlantedPositions> planted(Split split);
  const attribution::DiversityLstm& attribution_model();
  const eval::EvalClassifier& eval_classifier();
  std::vector<masking::StyleMaskedSentence> masked(Split split);
  std::optional<eval::EvalReport> eval_report();

  fs::path path(const std::string& relative) const { return config_.output_dir / relative; }

 private:
  struct StageSpec {
    std::string name;
    nlohmann::json config;
    std::vector<std::string> inputs;
    std::vector<std::string> outputs;
  };
  // Returns false (and skips) when the stage completed before with the same config, inputs and
  // outputs; throws ChecksumError on a modified output.
  // The body returns the stage metrics. Outputs that do not exist after the
  // body ran are treated as optional and left out of the record.
  template <typename Body>
  bool stage(const StageSpec& spec, Body&& body);
  std::map<std::string, std::string> checksums(const std::vector<std::string>& files) const;
  void record_event(const std::string& stage, const std::string& status);

  void stage_corpus();
  void stage_attribution();
  void stage_attribution_va();
  void stage_eval_classifier();
  void stage_mask();
  void stage_bootstrap();
  void stage_finetune();
  void stage_transfer();
  void stage_evaluate();
  void ensure(Stage last);
  fs::path attribution_model_path() const;
  std::vector<std::string> corpus_files() const;
  std::vector<std::string> labels() const;

  nlohmann::json attribution_config(double lambda_con) const;
  masking::Attributor attributor();
  std::vector<int> transfer_targets(std::span<const LabeledExample> examples) const;

  RunConfig config_;
  bool force_;
  DirectoryLock lock_;
  RunManifest manifest_;
  std::vector<std::string> executed_, skipped_;

  std::optional<Corpus> corpus_;
  std::optional<Vocabulary> vocab_;
  std::optional<attribution::DiversityLstm> attribution_model_;
  std::optional<attribution::DiversityLstm> va_model_;
  std::optional<eval::EvalClassifier> eval_classifier_;
};

// Writes "label<TAB>tokens" lines for transfer outputs.
void save_outputs(const fs::path& path, std::span<const Tokens> outputs, std::span<const int> labels);

// Generates a toy corpus into out_dir (split files, test.ref, planted.tsv)
// and records it in out_dir/manifest.json.
StageRecord gen_toy(const fs::path& spec_path, const fs::path& out_dir);

// Masks and transfers `inputs` to style `dst` with the models of a finished
// run directory. `finetuned` selects smlm/finetune over smlm/bootstrap.
std::vector<Tokens> transfer_with_run(const fs::path& run_dir, std::span<const LabeledExample> inputs, int dst,
                                      bool finetuned = true);

}  // namespace smlm::pipeline
