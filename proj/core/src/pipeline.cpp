#include "smlm/pipeline.hpp"

#include "smlm/checkpoint.hpp"
#include "smlm/error.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <memory>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

extern char** environ;

namespace smlm::pipeline {

using json = nlohmann::json;

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : fs::absolute(base) / path).lexically_normal();
}

void check_keys(const json& doc, const std::set<std::string>& allowed, const std::string& where) {
  if (!doc.is_object()) throw ConfigError("'" + where + "' must be an object");
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (!allowed.count(it.key())) {
      throw ConfigError("unknown config key '" + (where.empty() ? "" : where + ".") + it.key() + "'");
    }
  }
}

template <typename T>
T get_or(const json& doc, const std::string& key, T fallback, const std::string& where) {
  if (!doc.contains(key)) return fallback;
  try {
    return doc.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("bad value for '" + where + "." + key + "': " + doc.at(key).dump());
  }
}

json section(const json& doc, const std::string& key) {
  if (!doc.contains(key)) return json::object();
  if (!doc.at(key).is_object()) throw ConfigError("'" + key + "' must be an object");
  return doc.at(key);
}

Split parse_split(const std::string& name) {
  for (Split s : kAllSplits) {
    if (split_name(s) == name) return s;
  }
  throw ConfigError("unknown split '" + name + "'");
}

std::string_view baseline_name(attribution::IgBaseline b) {
  return b == attribution::IgBaseline::kZero ? "zero" : "unk";
}

attribution::IgBaseline parse_baseline(const std::string& name) {
  if (name == "zero") return attribution::IgBaseline::kZero;
  if (name == "unk") return attribution::IgBaseline::kUnkEmbedding;
  throw ConfigError("attribution.ig_baseline must be \"zero\" or \"unk\", got \"" + name + "\"");
}

json method_json(const AttributionSettings& a) {
  return {{"method", std::string(attribution::method_tag(a.method.method))},
          {"ig_steps", a.method.ig_steps},
          {"ig_baseline", std::string(baseline_name(a.method.ig_baseline))}};
}

json classifier_json(const eval::EvalClassifierConfig& c) {
  return {{"embedding_dim", c.embedding_dim},
          {"hidden_dim", c.hidden_dim},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size}};
}

const std::set<std::string> kFinetuneOnlyKeys{"finetune_epochs",      "lambda_sta",          "clip_threshold",
                                              "finetune_learning_rate", "finetune_batch_size", "adversarial_ratio",
                                              "head_learning_rate"};

std::string hex(const unsigned char* data, unsigned len) {
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  for (unsigned i = 0; i < len; ++i) out << std::setw(2) << static_cast<int>(data[i]);
  return out.str();
}

std::string now_iso() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double mask_rate(std::span<const masking::StyleMaskedSentence> masked) {
  std::size_t tokens = 0, hits = 0;
  for (const auto& m : masked) {
    tokens += m.tokens.size();
    hits += m.mask_positions.size();
  }
  return tokens == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(tokens);
}

std::vector<LabeledExample> read_outputs(const fs::path& path, std::size_t num_labels) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return parse_examples(in, num_labels, path.string());
}

mlm::SmlmModel load_weights(const mlm::SmlmConfig& config, const Vocabulary& vocab, const fs::path& dir) {
  auto model = mlm::build_smlm(config, vocab);
  load_checkpoint(dir / "weights.bin", model.params());
  return model;
}

std::vector<std::string> smlm_files(const std::string& dir, bool with_head) {
  std::vector<std::string> files{dir + "/weights.bin", dir + "/weights.bin.json", dir + "/config.json",
                                 dir + "/vocab.txt", dir + "/train_log.jsonl"};
  if (with_head) {
    files.push_back(dir + "/head.bin");
    files.push_back(dir + "/head.bin.json");
  }
  return files;
}

}  // namespace

// ------------------------------------------------------------------- config

RunConfig RunConfig::from_json(const json& doc, const fs::path& base_dir) {
  check_keys(doc, {"output_dir", "seed", "corpus", "attribution", "masking", "smlm", "eval"}, "");
  RunConfig c;
  if (!doc.contains("output_dir") || !doc.at("output_dir").is_string()) {
    throw ConfigError("'output_dir' is required and must be a string");
  }
  c.output_dir = resolve(base_dir, doc.at("output_dir").get<std::string>());
  c.seed = get_or<std::uint64_t>(doc, "seed", c.seed, "");

  const json corpus = section(doc, "corpus");
  check_keys(corpus, {"toy_spec", "dir", "labels", "min_freq"}, "corpus");
  if (corpus.contains("toy_spec") == corpus.contains("dir")) {
    throw ConfigError("corpus needs exactly one of 'toy_spec' or 'dir'");
  }
  if (corpus.contains("toy_spec")) {
    c.corpus.toy_spec = resolve(base_dir, get_or<std::string>(corpus, "toy_spec", "", "corpus"));
    if (!fs::is_regular_file(*c.corpus.toy_spec)) {
      throw ConfigError("corpus.toy_spec: no such file " + c.corpus.toy_spec->string());
    }
    if (corpus.contains("labels")) throw ConfigError("corpus.labels come from the toy spec; remove the key");
  } else {
    c.corpus.dir = resolve(base_dir, get_or<std::string>(corpus, "dir", "", "corpus"));
    if (!fs::is_directory(*c.corpus.dir)) throw ConfigError("corpus.dir: no such directory " + c.corpus.dir->string());
    c.corpus.labels = get_or<std::vector<std::string>>(corpus, "labels", {}, "corpus");
    if (c.corpus.labels.size() < 2) throw ConfigError("corpus.labels must name at least two styles");
  }
  c.corpus.min_freq = get_or(corpus, "min_freq", 2, "corpus");
  if (c.corpus.min_freq < 1) throw ConfigError("corpus.min_freq must be >= 1");

  const json attr = section(doc, "attribution");
  check_keys(attr,
             {"method", "ig_steps", "ig_baseline", "embedding_dim", "hidden_dim", "lambda_con", "epochs",
              "learning_rate", "batch_size"},
             "attribution");
  c.attribution.method.method = attribution::parse_method(get_or<std::string>(attr, "method", "EA", "attribution"));
  c.attribution.method.ig_steps = get_or(attr, "ig_steps", c.attribution.method.ig_steps, "attribution");
  c.attribution.method.ig_baseline = parse_baseline(get_or<std::string>(attr, "ig_baseline", "zero", "attribution"));
  c.attribution.method.validate();
  auto& m = c.attribution.model;
  m.embedding_dim = get_or(attr, "embedding_dim", m.embedding_dim, "attribution");
  m.hidden_dim = get_or(attr, "hidden_dim", m.hidden_dim, "attribution");
  m.lambda_con = get_or(attr, "lambda_con", m.lambda_con, "attribution");
  m.epochs = get_or(attr, "epochs", m.epochs, "attribution");
  m.learning_rate = get_or(attr, "learning_rate", m.learning_rate, "attribution");
  m.batch_size = get_or(attr, "batch_size", m.batch_size, "attribution");
  m.seed = c.seed;
  if (m.embedding_dim < 1 || m.hidden_dim < 1 || m.epochs < 0 || m.batch_size < 1 || !(m.learning_rate > 0.0) ||
      m.lambda_con < 0.0) {
    throw ConfigError("attribution: dimensions and batch size must be positive, epochs and lambda_con >= 0");
  }
  if (c.attribution.method.method == attribution::Method::kExplainableAttention && !(m.lambda_con > 0.0)) {
    throw ConfigError("attribution: EA needs lambda_con > 0 (use method VA for the plain attention model)");
  }

  const json mask = section(doc, "masking");
  check_keys(mask, {"lambda_epsilon"}, "masking");
  c.masking.lambda_epsilon = get_or(mask, "lambda_epsilon", c.masking.lambda_epsilon, "masking");
  c.masking.validate();

  json smlm = section(doc, "smlm");
  std::set<std::string> smlm_keys;
  const json smlm_defaults = mlm::SmlmConfig{}.to_json();
  for (const auto& [key, value] : smlm_defaults.items()) {
    if (key != "seed") smlm_keys.insert(key);
  }
  check_keys(smlm, smlm_keys, "smlm");
  smlm["seed"] = c.seed;
  try {
    c.smlm = mlm::SmlmConfig::from_json(smlm);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("smlm: ") + e.what());
  }

  const json ev = section(doc, "eval");
  check_keys(ev, {"classifier", "sweep_grid", "split"}, "eval");
  const json clf = section(ev, "classifier");
  check_keys(clf, {"embedding_dim", "hidden_dim", "epochs", "learning_rate", "batch_size"}, "eval.classifier");
  auto& k = c.eval.classifier;
  k.embedding_dim = get_or(clf, "embedding_dim", k.embedding_dim, "eval.classifier");
  k.hidden_dim = get_or(clf, "hidden_dim", k.hidden_dim, "eval.classifier");
  k.epochs = get_or(clf, "epochs", k.epochs, "eval.classifier");
  k.learning_rate = get_or(clf, "learning_rate", k.learning_rate, "eval.classifier");
  k.batch_size = get_or(clf, "batch_size", k.batch_size, "eval.classifier");
  k.seed = c.seed;
  if (k.embedding_dim < 1 || k.hidden_dim < 1 || k.epochs < 0 || k.batch_size < 1 || !(k.learning_rate > 0.0)) {
    throw ConfigError("eval.classifier: dimensions, batch size and learning rate must be positive");
  }
  c.eval.sweep_grid = get_or(ev, "sweep_grid", c.eval.sweep_grid, "eval");
  for (std::size_t i = 0; i < c.eval.sweep_grid.size(); ++i) {
    const double g = c.eval.sweep_grid[i];
    if (g < 0.0 || g > 1.0 || (i > 0 && g <= c.eval.sweep_grid[i - 1])) {
      throw ConfigError("eval.sweep_grid must be strictly increasing within [0, 1]");
    }
  }
  c.eval.split = parse_split(get_or<std::string>(ev, "split", "test", "eval"));

  json corpus_snap = {{"min_freq", c.corpus.min_freq}};
  if (c.corpus.toy_spec) {
    corpus_snap["toy_spec"] = c.corpus.toy_spec->string();
  } else {
    corpus_snap["dir"] = c.corpus.dir->string();
    corpus_snap["labels"] = c.corpus.labels;
  }
  json attr_snap = method_json(c.attribution);
  attr_snap.update({{"embedding_dim", m.embedding_dim},
                    {"hidden_dim", m.hidden_dim},
                    {"lambda_con", m.lambda_con},
                    {"epochs", m.epochs},
                    {"learning_rate", m.learning_rate},
                    {"batch_size", m.batch_size}});
  json smlm_snap = c.smlm.to_json();
  smlm_snap.erase("seed");
  c.snapshot = {{"output_dir", c.output_dir.string()},
                {"seed", c.seed},
                {"corpus", corpus_snap},
                {"attribution", attr_snap},
                {"masking", {{"lambda_epsilon", c.masking.lambda_epsilon}}},
                {"smlm", smlm_snap},
                {"eval",
                 {{"classifier", classifier_json(k)},
                  {"sweep_grid", c.eval.sweep_grid},
                  {"split", std::string(split_name(c.eval.split))}}}};
  return c;
}

std::map<std::string, std::string> environment_overrides() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e != nullptr && *e != nullptr; ++e) {
    const std::string_view kv(*e);
    const auto eq = kv.find('=');
    if (eq == std::string_view::npos || !kv.starts_with(kEnvPrefix)) continue;
    std::string key(kv.substr(kEnvPrefix.size(), eq - kEnvPrefix.size()));
    std::string path;
    for (std::size_t i = 0; i < key.size(); ++i) {
      if (key.compare(i, 2, "__") == 0) {
        path += '.';
        ++i;
      } else {
        path += static_cast<char>(std::tolower(static_cast<unsigned char>(key[i])));
      }
    }
    if (!path.empty()) out[path] = std::string(kv.substr(eq + 1));
  }
  return out;
}

void apply_overrides(json& doc, const std::map<std::string, std::string>& overrides) {
  for (const auto& [path, raw] : overrides) {
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
      const auto dot = path.find('.', start);
      const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
      if (key.empty()) throw ConfigError("malformed override key '" + path + "'");
      if (!node->is_object()) throw ConfigError("override '" + path + "' descends into a non-object value");
      if (dot == std::string::npos) {
        json value = json::parse(raw, nullptr, false);
        (*node)[key] = value.is_discarded() ? json(raw) : value;
        break;
      }
      if (!node->contains(key)) (*node)[key] = json::object();
      node = &(*node)[key];
      start = dot + 1;
    }
  }
}

RunConfig load_run_config(const fs::path& path, const std::map<std::string, std::string>& overrides) {
  if (!fs::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  json doc;
  try {
    doc = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  apply_overrides(doc, overrides);
  return RunConfig::from_json(doc, fs::absolute(path).parent_path());
}

// ---------------------------------------------------------------- checksums

std::string sha256_hex(std::string_view data) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (EVP_Digest(data.data(), data.size(), out, &len, EVP_sha256(), nullptr) != 1) throw Error("sha256 failed");
  return hex(out, len);
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw Error("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx.get(), out, &len);
  return hex(out, len);
}

// ----------------------------------------------------------------- manifest

namespace {

json record_json(const StageRecord& r) {
  return {{"status", r.status}, {"config_hash", r.config_hash}, {"inputs", r.inputs}, {"outputs", r.outputs},
          {"seconds", r.seconds}, {"metrics", r.metrics},         {"error", r.error}};
}

StageRecord record_from_json(const json& doc) {
  StageRecord r;
  r.status = doc.at("status");
  r.config_hash = doc.at("config_hash");
  r.inputs = doc.at("inputs").get<std::map<std::string, std::string>>();
  r.outputs = doc.at("outputs").get<std::map<std::string, std::string>>();
  r.seconds = doc.value("seconds", 0.0);
  r.metrics = doc.value("metrics", json::object());
  r.error = doc.value("error", "");
  return r;
}

}  // namespace

json RunManifest::to_json() const {
  json stage_doc = json::object();
  for (const auto& [name, rec] : stages) stage_doc[name] = record_json(rec);
  return {{"config", config}, {"stages", stage_doc}, {"events", events}};
}

RunManifest RunManifest::from_json(const json& doc) {
  RunManifest m;
  try {
    m.config = doc.value("config", json::object());
    for (const auto& [name, rec] : doc.at("stages").items()) m.stages[name] = record_from_json(rec);
    m.events = doc.value("events", json::array());
  } catch (const json::exception& e) {
    throw ParseError(std::string("manifest: ") + e.what());
  }
  return m;
}

RunManifest RunManifest::load_or_empty(const fs::path& path) {
  if (!fs::exists(path)) return {};
  return from_json(read_json(path));
}

void RunManifest::save(const fs::path& path) const { atomic_write(path, to_json().dump(2) + "\n"); }

DirectoryLock::DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
  fs::create_directories(dir);
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
      ::close(fd);
      if (!ok) throw Error("cannot write lock file " + path_.string());
      return;
    }
    if (errno != EEXIST) throw Error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    long pid = 0;
    std::ifstream(path_) >> pid;
    if (pid > 0 && (::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM)) {
      throw Error(dir.string() + " is in use by process " + std::to_string(pid));
    }
    spdlog::warn("removing stale lock {} (pid {})", path_.string(), pid);
    fs::remove(path_);
  }
  throw Error("cannot acquire lock " + path_.string());
}

DirectoryLock::~DirectoryLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::string_view stage_name(Stage s) {
  switch (s) {
    case Stage::kCorpus: return "corpus";
    case Stage::kAttribution: return "attribution";
    case Stage::kEvalClassifier: return "eval_classifier";
    case Stage::kMask: return "mask";
    case Stage::kBootstrap: return "bootstrap";
    case Stage::kFinetune: return "finetune";
    case Stage::kTransfer: return "transfer";
    case Stage::kEvaluate: return "evaluate";
  }
  return "unknown";
}

void save_outputs(const fs::path& path, std::span<const Tokens> outputs, std::span<const int> labels) {
  if (outputs.size() != labels.size()) throw std::invalid_argument("save_outputs: one label per output");
  std::ostringstream out;
  for (std::size_t i = 0; i < outputs.size(); ++i) out << labels[i] << '\t' << join_tokens(outputs[i]) << '\n';
  fs::create_directories(path.parent_path());
  atomic_write(path, out.str());
}

// ----------------------------------------------------------------- pipeline

Pipeline::Pipeline(RunConfig config, bool force)
    : config_(std::move(config)),
      force_(force),
      lock_(config_.output_dir),
      manifest_(RunManifest::load_or_empty(config_.output_dir / "manifest.json")) {
  manifest_.config = config_.snapshot;
  manifest_.save(path("manifest.json"));
}

std::map<std::string, std::string> Pipeline::checksums(const std::vector<std::string>& files) const {
  std::map<std::string, std::string> out;
  for (const auto& f : files) {
    const fs::path p = fs::path(f).is_absolute() ? fs::path(f) : path(f);
    if (!fs::is_regular_file(p)) throw Error("missing input artifact: " + f);
    out[f] = sha256_file(p);
  }
  return out;
}

void Pipeline::record_event(const std::string& stage, const std::string& status) {
  manifest_.events.push_back({{"stage", stage}, {"status", status}, {"time", now_iso()}});
  manifest_.save(path("manifest.json"));
}

template <typename Body>
bool Pipeline::stage(const StageSpec& spec, Body&& body) {
  const std::string hash = sha256_hex(spec.config.dump());
  const auto inputs = checksums(spec.inputs);
  const auto it = manifest_.stages.find(spec.name);
  if (!force_ && it != manifest_.stages.end() && it->second.status == "ok" && it->second.config_hash == hash &&
      it->second.inputs == inputs) {
    bool complete = true;
    for (const auto& [rel, sum] : it->second.outputs) {
      if (!fs::is_regular_file(path(rel))) {
        complete = false;
        break;
      }
      if (sha256_file(path(rel)) != sum) {
        throw ChecksumError("artifact " + rel + " does not match the checksum recorded by stage '" + spec.name +
                            "'; delete it or rerun with --force");
      }
    }
    if (complete) {
      spdlog::info("stage {}: up to date", spec.name);
      skipped_.push_back(spec.name);
      record_event(spec.name, "skipped");
      return false;
    }
  }

  spdlog::info("stage {}: running", spec.name);
  for (const auto& rel : spec.outputs) fs::remove(path(rel));
  StageRecord rec;
  rec.config_hash = hash;
  rec.inputs = inputs;
  const auto start = std::chrono::steady_clock::now();
  try {
    rec.metrics = body();
    for (const auto& rel : spec.outputs) {
      if (fs::is_regular_file(path(rel))) rec.outputs[rel] = sha256_file(path(rel));
    }
    rec.status = "ok";
  } catch (const std::exception& e) {
    rec.status = "failed";
    rec.error = e.what();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    manifest_.stages[spec.name] = rec;
    record_event(spec.name, "failed");
    throw;
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  manifest_.stages[spec.name] = rec;
  executed_.push_back(spec.name);
  record_event(spec.name, "ok");
  return true;
}

std::vector<std::string> Pipeline::labels() const {
  if (config_.corpus.toy_spec) return ToyCorpusSpec::load(*config_.corpus.toy_spec).labels;
  return config_.corpus.labels;
}

std::vector<std::string> Pipeline::corpus_files() const {
  std::vector<std::string> files;
  for (const char* f : {"corpus/train.tsv", "corpus/dev.tsv", "corpus/test.tsv", "corpus/test.ref", "corpus/vocab.txt"}) {
    if (fs::is_regular_file(path(f))) files.emplace_back(f);
  }
  return files;
}

fs::path Pipeline::attribution_model_path() const {
  return path(config_.attribution.method.method == attribution::Method::kVanillaAttention ? "attr/va_model.bin"
                                                                                          : "attr/model.bin");
}

json Pipeline::attribution_config(double lambda_con) const {
  const auto& m = config_.attribution.model;
  return {{"embedding_dim", m.embedding_dim}, {"hidden_dim", m.hidden_dim}, {"lambda_con", lambda_con},
          {"epochs", m.epochs},               {"learning_rate", m.learning_rate}, {"batch_size", m.batch_size},
          {"seed", config_.seed}};
}

std::vector<int> Pipeline::transfer_targets(std::span<const LabeledExample> examples) const {
  const int styles = static_cast<int>(labels().size());
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) out.push_back((ex.label + 1) % styles);
  return out;
}

masking::Attributor Pipeline::attributor() {
  return masking::make_attributor(attribution_model(), config_.attribution.method);
}

const Corpus& Pipeline::corpus() {
  if (!corpus_) corpus_ = load_corpus(path("corpus"), labels());
  return *corpus_;
}

const Vocabulary& Pipeline::vocab() {
  if (!vocab_) vocab_ = Vocabulary::load(path("corpus/vocab.txt"));
  return *vocab_;
}

std::optional<PlantedPositions> Pipeline::planted(Split split) {
  if (!fs::is_regular_file(path("corpus/planted.tsv"))) return std::nullopt;
  return load_planted(path("corpus/planted.tsv")).at(split);
}

const attribution::DiversityLstm& Pipeline::attribution_model() {
  if (!attribution_model_) attribution_model_.emplace(attribution::DiversityLstm::load(attribution_model_path()));
  return *attribution_model_;
}

const eval::EvalClassifier& Pipeline::eval_classifier() {
  if (!eval_classifier_) eval_classifier_.emplace(eval::EvalClassifier::load(path("eval/classifier.bin")));
  return *eval_classifier_;
}

std::vector<masking::StyleMaskedSentence> Pipeline::masked(Split split) {
  return masking::load_masked(path("masked/" + std::string(split_name(split)) + ".tsv"), corpus().split(split));
}

std::optional<eval::EvalReport> Pipeline::eval_report() {
  if (!fs::is_regular_file(path("reports/eval.json"))) return std::nullopt;
  return eval::eval_report_from_json(read_json(path("reports/eval.json")));
}

void Pipeline::stage_corpus() {
  StageSpec spec{"corpus",
                 {{"seed", config_.seed}, {"min_freq", config_.corpus.min_freq}},
                 {},
                 {"corpus/train.tsv", "corpus/dev.tsv", "corpus/test.tsv", "corpus/test.ref", "corpus/planted.tsv",
                  "corpus/vocab.txt"}};
  if (config_.corpus.toy_spec) {
    spec.inputs.push_back(config_.corpus.toy_spec->string());
  } else {
    spec.config["labels"] = config_.corpus.labels;
    for (const char* f : {"train.tsv", "dev.tsv", "test.tsv", "test.ref"}) {
      if (fs::is_regular_file(*config_.corpus.dir / f)) spec.inputs.push_back((*config_.corpus.dir / f).string());
    }
  }
  stage(spec, [&] {
    corpus_.reset();
    vocab_.reset();
    fs::create_directories(path("corpus"));
    Corpus corpus;
    if (config_.corpus.toy_spec) {
      auto toy_spec = ToyCorpusSpec::load(*config_.corpus.toy_spec);
      toy_spec.seed = config_.seed;
      auto toy = generate_toy_corpus(toy_spec);
      save_planted(toy, path("corpus/planted.tsv"));
      corpus = std::move(toy.corpus);
    } else {
      corpus = load_corpus(*config_.corpus.dir, config_.corpus.labels);
    }
    save_corpus(corpus, path("corpus"));
    const auto vocab = Vocabulary::build(corpus, config_.corpus.min_freq);
    vocab.save(path("corpus/vocab.txt"));
    return json{{"train", corpus.split(Split::kTrain).size()},
                {"dev", corpus.split(Split::kDev).size()},
                {"test", corpus.split(Split::kTest).size()},
                {"vocab_size", vocab.size()}};
  });
}

namespace {

json train_attribution(const Corpus& corpus, const Vocabulary& vocab, attribution::DiversityLstmConfig config,
                       const fs::path& out) {
  fs::create_directories(out.parent_path());
  const auto model = attribution::train_diversity_lstm(corpus, vocab, config);
  model.save(out);
  json history = json::array();
  for (const auto& h : model.history) {
    history.push_back({{"epoch", h.epoch},
                       {"classification_loss", h.classification_loss},
                       {"conicity", h.conicity},
                       {"dev_accuracy", h.dev_accuracy}});
  }
  return {{"dev_accuracy", attribution::accuracy(model, corpus, vocab, Split::kDev)},
          {"dev_conicity", attribution::mean_hidden_conicity(model, corpus, vocab, Split::kDev)},
          {"history", history}};
}

}  // namespace

void Pipeline::stage_attribution() {
  const double lambda_con = config_.attribution.model.lambda_con;
  stage(StageSpec{"attribution", attribution_config(lambda_con), corpus_files(), {"attr/model.bin", "attr/model.bin.json"}},
        [&] {
          attribution_model_.reset();
          auto cfg = config_.attribution.model;
          cfg.seed = config_.seed;
          return train_attribution(corpus(), vocab(), cfg, path("attr/model.bin"));
        });
}

void Pipeline::stage_attribution_va() {
  stage(StageSpec{"attribution_va", attribution_config(0.0), corpus_files(),
                  {"attr/va_model.bin", "attr/va_model.bin.json"}},
        [&] {
          if (config_.attribution.method.method == attribution::Method::kVanillaAttention) attribution_model_.reset();
          va_model_.reset();
          auto cfg = config_.attribution.model;
          cfg.seed = config_.seed;
          cfg.lambda_con = 0.0;
          return train_attribution(corpus(), vocab(), cfg, path("attr/va_model.bin"));
        });
}

void Pipeline::stage_eval_classifier() {
  json cfg = classifier_json(config_.eval.classifier);
  cfg["seed"] = config_.seed;
  stage(StageSpec{"eval_classifier", cfg, corpus_files(), {"eval/classifier.bin", "eval/classifier.bin.json"}}, [&] {
    eval_classifier_.reset();
    fs::create_directories(path("eval"));
    auto c = config_.eval.classifier;
    c.seed = config_.seed;
    const auto clf = eval::train_eval_classifier(corpus(), vocab(), c);
    clf.save(path("eval/classifier.bin"));
    return json{{"dev_accuracy", clf.dev_accuracy},
                {"test_accuracy", attribution::accuracy(clf, corpus(), vocab(), Split::kTest)}};
  });
}

void Pipeline::stage_mask() {
  json cfg = method_json(config_.attribution);
  cfg["lambda_epsilon"] = config_.masking.lambda_epsilon;
  auto inputs = corpus_files();
  inputs.push_back(fs::relative(attribution_model_path(), config_.output_dir).string());
  stage(StageSpec{"mask", cfg, inputs, {"masked/train.tsv", "masked/dev.tsv", "masked/test.tsv"}}, [&] {
    fs::create_directories(path("masked"));
    const auto attr = attributor();
    json metrics = json::object();
    const auto planted_all = fs::is_regular_file(path("corpus/planted.tsv"))
                                 ? std::optional(load_planted(path("corpus/planted.tsv")))
                                 : std::nullopt;
    for (Split s : kAllSplits) {
      const auto masked =
          masking::mask_corpus(corpus(), s, vocab(), attr, config_.masking.lambda_epsilon);
      masking::save_masked(masked, path("masked/" + std::string(split_name(s)) + ".tsv"));
      json m = {{"mask_rate", mask_rate(masked)}};
      if (planted_all) m["planted"] = eval::to_json(eval::masking_f1(masked, planted_all->at(s)));
      metrics[std::string(split_name(s))] = m;
    }
    return metrics;
  });
}

void Pipeline::stage_bootstrap() {
  json cfg = config_.smlm.to_json();
  for (const auto& k : kFinetuneOnlyKeys) cfg.erase(k);
  auto inputs = corpus_files();
  inputs.push_back("masked/train.tsv");
  inputs.push_back("masked/" + std::string(split_name(config_.eval.split)) + ".tsv");
  stage(StageSpec{"bootstrap", cfg, inputs, smlm_files("smlm/bootstrap", false)}, [&] {
    auto model = mlm::build_smlm(config_.smlm, vocab());
    const auto log = mlm::bootstrap_train(model, masked(Split::kTrain), vocab());
    mlm::save_smlm(path("smlm/bootstrap"), model, vocab(), log);
    const auto held_out = mlm::reconstruction_accuracy(model, masked(config_.eval.split), vocab());
    return json{{"final_loss", log.empty() ? 0.0 : log.back().loss},
                {"heldout_masked_accuracy", held_out.masked_accuracy},
                {"heldout_unmasked_accuracy", held_out.unmasked_accuracy}};
  });
}

void Pipeline::stage_finetune() {
  auto inputs = corpus_files();
  inputs.push_back("masked/train.tsv");
  inputs.push_back("masked/" + std::string(split_name(config_.eval.split)) + ".tsv");
  inputs.push_back("smlm/bootstrap/weights.bin");
  stage(StageSpec{"finetune", config_.smlm.to_json(), inputs, smlm_files("smlm/finetune", true)}, [&] {
    auto model = load_weights(config_.smlm, vocab(), path("smlm/bootstrap"));
    mlm::StyleClassifierHead head(config_.smlm.embedding_dim, static_cast<int>(vocab().num_styles()), config_.seed);
    const auto log = mlm::finetune(model, head, masked(Split::kTrain), vocab());
    mlm::save_smlm(path("smlm/finetune"), model, vocab(), log, &head);
    const auto held_out = mlm::reconstruction_accuracy(model, masked(config_.eval.split), vocab());
    double max_norm = 0.0;
    for (const auto& rec : log) max_norm = std::max(max_norm, rec.max_clipped_grad_norm);
    return json{{"heldout_masked_accuracy", held_out.masked_accuracy},
                {"heldout_unmasked_accuracy", held_out.unmasked_accuracy},
                {"max_clipped_grad_norm", max_norm},
                {"parameters_finite", model.params().all_finite()}};
  });
}

void Pipeline::stage_transfer() {
  const std::string split(split_name(config_.eval.split));
  auto inputs = corpus_files();
  inputs.push_back("masked/" + split + ".tsv");
  inputs.push_back("smlm/bootstrap/weights.bin");
  inputs.push_back("smlm/finetune/weights.bin");
  stage(StageSpec{"transfer",
                  {{"split", split}, {"hard_copy_through", config_.smlm.hard_copy_through}},
                  inputs,
                  {"outputs/" + split + ".transfer.tsv", "outputs/" + split + ".bootstrap.tsv"}},
        [&] {
          const auto pairs = masked(config_.eval.split);
          const auto targets = transfer_targets(corpus().split(config_.eval.split));
          const std::pair<const char*, const char*> variants[] = {{"smlm/finetune", ".transfer.tsv"},
                                                                  {"smlm/bootstrap", ".bootstrap.tsv"}};
          for (const auto& [dir, file] : variants) {
            const auto model = load_weights(config_.smlm, vocab(), path(dir));
            std::vector<Tokens> outputs;
            outputs.reserve(pairs.size());
            for (std::size_t i = 0; i < pairs.size(); ++i) {
              outputs.push_back(mlm::decode_transfer(model, pairs[i], targets[i], vocab()));
            }
            save_outputs(path("outputs/" + split + file), outputs, targets);
          }
          return json{{"n_outputs", pairs.size()}};
        });
}

void Pipeline::stage_evaluate() {
  const std::string split(split_name(config_.eval.split));
  auto inputs = corpus_files();
  inputs.push_back("eval/classifier.bin");
  inputs.push_back("outputs/" + split + ".transfer.tsv");
  inputs.push_back("outputs/" + split + ".bootstrap.tsv");
  stage(StageSpec{"evaluate", {{"split", split}}, inputs,
                  {"reports/eval.json", "reports/eval.txt", "reports/eval_bootstrap.json"}},
        [&] {
          fs::create_directories(path("reports"));
          const auto& sources = corpus().split(config_.eval.split);
          auto report_for = [&](const std::string& file) {
            const auto rows = read_outputs(path("outputs/" + split + file), labels().size());
            if (rows.size() != sources.size()) throw Error("outputs/" + split + file + ": line count mismatch");
            std::vector<Tokens> outputs;
            std::vector<int> targets;
            for (const auto& r : rows) {
              outputs.push_back(r.tokens);
              targets.push_back(r.label);
            }
            return eval::evaluate_transfer(eval_classifier(), outputs, sources, targets, vocab());
          };
          const auto ft = report_for(".transfer.tsv");
          const auto boot = report_for(".bootstrap.tsv");
          atomic_write(path("reports/eval.json"), eval::to_json(ft).dump(2) + "\n");
          atomic_write(path("reports/eval_bootstrap.json"), eval::to_json(boot).dump(2) + "\n");
          atomic_write(path("reports/eval.txt"), "SMLM (bootstrap)\n" + eval::format_table(boot) +
                                                     "\nSMLM (fine-tuned)\n" + eval::format_table(ft));
          return json{{"finetune", eval::to_json(ft)}, {"bootstrap", eval::to_json(boot)}};
        });
}

void Pipeline::ensure(Stage last) {
  const auto upto = [&](Stage s) { return static_cast<int>(s) <= static_cast<int>(last); };
  if (upto(Stage::kCorpus)) stage_corpus();
  if (upto(Stage::kAttribution)) {
    if (config_.attribution.method.method == attribution::Method::kVanillaAttention) {
      stage_attribution_va();
    } else {
      stage_attribution();
    }
  }
  if (upto(Stage::kEvalClassifier)) stage_eval_classifier();
  if (upto(Stage::kMask)) stage_mask();
  if (upto(Stage::kBootstrap)) stage_bootstrap();
  if (upto(Stage::kFinetune)) stage_finetune();
  if (upto(Stage::kTransfer)) stage_transfer();
  if (upto(Stage::kEvaluate)) stage_evaluate();
}

void Pipeline::run_until(Stage last) { ensure(last); }

eval::EvalReport Pipeline::run_all() {
  run_until(Stage::kEvaluate);
  return *eval_report();
}

eval::MaskQualityReport Pipeline::compare_attr() {
  ensure(Stage::kEvalClassifier);
  if (config_.attribution.method.method == attribution::Method::kVanillaAttention) {
    if (!(config_.attribution.model.lambda_con > 0.0)) {
      throw ConfigError("compare-attr needs attribution.lambda_con > 0 for the EA model");
    }
    stage_attribution();
  } else {
    stage_attribution_va();
  }
  const std::string split(split_name(config_.eval.split));
  json cfg = method_json(config_.attribution);
  cfg.erase("method");
  cfg["lambda_epsilon"] = config_.masking.lambda_epsilon;
  cfg["split"] = split;
  auto inputs = corpus_files();
  for (const char* f : {"attr/model.bin", "attr/va_model.bin", "eval/classifier.bin"}) inputs.emplace_back(f);
  stage(StageSpec{"compare_attr", cfg, inputs, {"reports/compare_attr.json", "reports/compare_attr.txt"}}, [&] {
    fs::create_directories(path("reports"));
    const auto ea = attribution::DiversityLstm::load(path("attr/model.bin"));
    const auto va = attribution::DiversityLstm::load(path("attr/va_model.bin"));
    const auto& sources = corpus().split(config_.eval.split);
    eval::MaskQualityReport report;
    for (auto method : attribution::kAllMethods) {
      auto settings = config_.attribution.method;
      settings.method = method;
      const auto& model = method == attribution::Method::kVanillaAttention ? va : ea;
      const auto masked =
          masking::mask_examples(sources, vocab(), masking::make_attributor(model, settings), config_.masking.lambda_epsilon);
      report.rows.push_back(
          eval::mask_quality(eval_classifier(), masked, sources, std::string(attribution::method_tag(method)), vocab()));
    }
    report.rows.push_back(eval::no_masking_row(eval_classifier(), sources, vocab()));
    report.baseline_acc_percent = report.rows.back().acc_percent;
    atomic_write(path("reports/compare_attr.json"), eval::to_json(report).dump(2) + "\n");
    atomic_write(path("reports/compare_attr.txt"), eval::format_table(report));
    return eval::to_json(report);
  });
  return eval::mask_quality_from_json(read_json(path("reports/compare_attr.json")));
}

eval::SweepCurve Pipeline::sweep(std::vector<double> grid) {
  ensure(Stage::kEvalClassifier);
  const std::string split(split_name(config_.eval.split));
  json cfg = method_json(config_.attribution);
  cfg["grid"] = grid;
  cfg["split"] = split;
  auto inputs = corpus_files();
  inputs.push_back(fs::relative(attribution_model_path(), config_.output_dir).string());
  inputs.emplace_back("eval/classifier.bin");
  stage(StageSpec{"sweep", cfg, inputs, {"reports/sweep.csv", "reports/sweep.json", "reports/sweep.txt"}}, [&] {
    fs::create_directories(path("reports"));
    const auto curve = eval::lambda_sweep(eval_classifier(), corpus().split(config_.eval.split), vocab(), attributor(),
                                          grid, std::string(attribution::method_tag(config_.attribution.method.method)));
    atomic_write(path("reports/sweep.csv"), eval::sweep_csv(curve));
    atomic_write(path("reports/sweep.json"), eval::to_json(curve).dump(2) + "\n");
    atomic_write(path("reports/sweep.txt"), eval::format_table(curve));
    return eval::to_json(curve);
  });
  return eval::sweep_curve_from_json(read_json(path("reports/sweep.json")));
}

// -------------------------------------------------------------- standalone

StageRecord gen_toy(const fs::path& spec_path, const fs::path& out_dir) {
  const auto spec = ToyCorpusSpec::load(spec_path);
  DirectoryLock lock(out_dir);
  const auto start = std::chrono::steady_clock::now();
  const auto toy = generate_toy_corpus(spec);
  save_corpus(toy.corpus, out_dir);
  save_planted(toy, out_dir / "planted.tsv");

  StageRecord rec;
  rec.status = "ok";
  rec.config_hash = sha256_hex(read_text(spec_path));
  rec.inputs[fs::absolute(spec_path).lexically_normal().string()] = sha256_file(spec_path);
  for (const char* f : {"train.tsv", "dev.tsv", "test.tsv", "test.ref", "planted.tsv"}) {
    if (fs::is_regular_file(out_dir / f)) rec.outputs[f] = sha256_file(out_dir / f);
  }
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rec.metrics = {{"train", toy.corpus.split(Split::kTrain).size()},
                 {"dev", toy.corpus.split(Split::kDev).size()},
                 {"test", toy.corpus.split(Split::kTest).size()},
                 {"labels", spec.labels}};

  auto manifest = RunManifest::load_or_empty(out_dir / "manifest.json");
  manifest.stages["gen_toy"] = rec;
  manifest.events.push_back({{"stage", "gen_toy"}, {"status", "ok"}, {"time", now_iso()}});
  manifest.save(out_dir / "manifest.json");
  return rec;
}

std::vector<Tokens> transfer_with_run(const fs::path& run_dir, std::span<const LabeledExample> inputs, int dst,
                                      bool finetuned) {
  const auto manifest = RunManifest::load_or_empty(run_dir / "manifest.json");
  if (manifest.config.is_null() || manifest.config.empty()) {
    throw ConfigError(run_dir.string() + " has no run manifest");
  }
  const auto config = RunConfig::from_json(manifest.config, run_dir);
  const auto vocab = Vocabulary::load(run_dir / "corpus/vocab.txt");
  if (dst < 0 || dst >= static_cast<int>(vocab.num_styles())) {
    throw ConfigError("destination style " + std::to_string(dst) + " out of range");
  }
  const fs::path attr_path = run_dir / (config.attribution.method.method == attribution::Method::kVanillaAttention
                                            ? "attr/va_model.bin"
                                            : "attr/model.bin");
  const auto attr_model = attribution::DiversityLstm::load(attr_path);
  const auto model = load_weights(config.smlm, vocab, run_dir / (finetuned ? "smlm/finetune" : "smlm/bootstrap"));
  const std::vector<int> targets(inputs.size(), dst);
  return mlm::transfer_batch(model, inputs, masking::make_attributor(attr_model, config.attribution.method),
                             config.masking.lambda_epsilon, targets, vocab);
}

}  // namespace smlm::pipeline
