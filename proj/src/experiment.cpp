#include "forge/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "forge/error.hpp"
#include "forge/plot.hpp"
#include "forge/rng.hpp"

namespace forge {

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidConfig:
    case ErrorKind::kInvalidParameter:
    case ErrorKind::kLookup:
      return kExitConfig;
    case ErrorKind::kInvalidInput:
    case ErrorKind::kEmptyDomain:
    case ErrorKind::kImbalance:
    case ErrorKind::kIo:
      return kExitData;
    case ErrorKind::kTrainingFailure:
      return kExitTraining;
    case ErrorKind::kDependency:
      return kExitDependency;
    case ErrorKind::kInsufficientMargins:
    case ErrorKind::kDegenerateScale:
    case ErrorKind::kUndefinedCorrelation:
    case ErrorKind::kComputation:
      return kExitAnalysis;
    case ErrorKind::kBusy:
      return kExitBusy;
  }
  return kExitUnexpected;
}

std::vector<PipelineParams> TargetSpec::pipelines() const {
  if (!explicit_pipelines.empty()) return explicit_pipelines;
  return make_target_grid(denoise_levels, sharpen_levels, jpeg_quality, levels);
}

// ---------------------------------------------------------------- config

namespace {

void check_keys(const Json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) fail(ErrorKind::kInvalidConfig, where + " must be an object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) fail(ErrorKind::kInvalidConfig, "unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

SynthConfig parse_synth(const Json& j) {
  check_keys(j, "synth",
             {"image_size", "patch_size", "splice_prob", "donors_min", "donors_max", "donor_area_min",
              "donor_area_max", "host_noise_min", "host_noise_max", "donor_noise_ratio_min",
              "donor_noise_ratio_max", "donor_sharpen"});
  SynthConfig c;
  read(j, "image_size", c.image_size);
  read(j, "patch_size", c.patch_size);
  read(j, "splice_prob", c.splice_prob);
  read(j, "donors_min", c.donors_min);
  read(j, "donors_max", c.donors_max);
  read(j, "donor_area_min", c.donor_area_min);
  read(j, "donor_area_max", c.donor_area_max);
  read(j, "host_noise_min", c.host_noise_min);
  read(j, "host_noise_max", c.host_noise_max);
  read(j, "donor_noise_ratio_min", c.donor_noise_ratio_min);
  read(j, "donor_noise_ratio_max", c.donor_noise_ratio_max);
  read(j, "donor_sharpen", c.donor_sharpen);
  return c;
}

Json synth_json(const SynthConfig& c) {
  return Json{{"image_size", c.image_size},
              {"patch_size", c.patch_size},
              {"splice_prob", c.splice_prob},
              {"donors_min", c.donors_min},
              {"donors_max", c.donors_max},
              {"donor_area_min", c.donor_area_min},
              {"donor_area_max", c.donor_area_max},
              {"host_noise_min", c.host_noise_min},
              {"host_noise_max", c.host_noise_max},
              {"donor_noise_ratio_min", c.donor_noise_ratio_min},
              {"donor_noise_ratio_max", c.donor_noise_ratio_max},
              {"donor_sharpen", c.donor_sharpen}};
}

PatchConfig parse_patches(const Json& j, int patch_size) {
  check_keys(j, "patches", {"stride", "coverage_min", "coverage_max", "fractions", "scene_level_split"});
  PatchConfig c;
  c.patch_size = patch_size;
  c.stride = patch_size;
  read(j, "stride", c.stride);
  read(j, "coverage_min", c.bounds.min);
  read(j, "coverage_max", c.bounds.max);
  read(j, "fractions", c.fractions);
  read(j, "scene_level_split", c.scene_level_split);
  return c;
}

Json patches_json(const PatchConfig& c) {
  return Json{{"stride", c.stride},
              {"coverage_min", c.bounds.min},
              {"coverage_max", c.bounds.max},
              {"fractions", c.fractions},
              {"scene_level_split", c.scene_level_split}};
}

TargetSpec parse_targets(const Json& j) {
  check_keys(j, "targets",
             {"denoise_levels", "sharpen_levels", "jpeg_quality", "denoise_min", "denoise_max", "sharpen_min",
              "sharpen_max", "sharpen_radius", "pipelines"});
  TargetSpec t;
  read(j, "denoise_levels", t.denoise_levels);
  read(j, "sharpen_levels", t.sharpen_levels);
  read(j, "jpeg_quality", t.jpeg_quality);
  read(j, "denoise_min", t.levels.denoise_min);
  read(j, "denoise_max", t.levels.denoise_max);
  read(j, "sharpen_min", t.levels.sharpen_min);
  read(j, "sharpen_max", t.levels.sharpen_max);
  read(j, "sharpen_radius", t.levels.sharpen_radius);
  if (j.contains("pipelines")) t.explicit_pipelines = j.at("pipelines").get<std::vector<PipelineParams>>();
  return t;
}

Json targets_json(const TargetSpec& t) {
  if (!t.explicit_pipelines.empty()) return Json{{"pipelines", t.explicit_pipelines}};
  return Json{{"denoise_levels", t.denoise_levels}, {"sharpen_levels", t.sharpen_levels},
              {"jpeg_quality", t.jpeg_quality},     {"denoise_min", t.levels.denoise_min},
              {"denoise_max", t.levels.denoise_max}, {"sharpen_min", t.levels.sharpen_min},
              {"sharpen_max", t.levels.sharpen_max}, {"sharpen_radius", t.levels.sharpen_radius}};
}

SweepGrid parse_sweep(const Json& j, std::uint64_t seed, bool seed_overridden) {
  check_keys(j, "sweep", {"batch_sizes", "poolings", "normalizations", "dropout_rates", "replicate_seeds"});
  SweepGrid g;
  read(j, "batch_sizes", g.batch_sizes);
  if (j.contains("poolings")) {
    g.poolings.clear();
    for (const auto& s : j.at("poolings")) g.poolings.push_back(parse_pooling(s.get<std::string>()));
  }
  if (j.contains("normalizations")) {
    g.normalizations.clear();
    for (const auto& s : j.at("normalizations")) g.normalizations.push_back(parse_normalization(s.get<std::string>()));
  }
  read(j, "dropout_rates", g.dropout_rates);
  g.replicate_seeds = {seed};
  if (j.contains("replicate_seeds")) {
    g.replicate_seeds = j.at("replicate_seeds").get<std::vector<std::uint64_t>>();
    // An explicit --seed shifts the whole replicate list so runs stay distinct.
    if (seed_overridden)
      for (std::size_t i = 0; i < g.replicate_seeds.size(); ++i) g.replicate_seeds[i] = seed + i;
  }
  return g;
}

Json sweep_json(const SweepGrid& g) {
  Json pools = Json::array(), norms = Json::array();
  for (auto p : g.poolings) pools.push_back(to_string(p));
  for (auto n : g.normalizations) norms.push_back(to_string(n));
  return Json{{"batch_sizes", g.batch_sizes},     {"poolings", pools},
              {"normalizations", norms},          {"dropout_rates", g.dropout_rates},
              {"replicate_seeds", g.replicate_seeds}};
}

std::vector<MetricConfig> parse_metrics(const Json& j) {
  check_keys(j, "metrics", {"alphas", "layer_sets"});
  std::vector<double> alphas{1.0, 2.0};
  read(j, "alphas", alphas);
  std::vector<std::pair<std::string, std::vector<std::string>>> sets{{"all", {}}};
  if (j.contains("layer_sets")) {
    sets.clear();
    for (const auto& [name, layers] : j.at("layer_sets").items()) {
      if (layers.is_string() && layers.get<std::string>() == "all")
        sets.emplace_back(name, std::vector<std::string>{});
      else
        sets.emplace_back(name, layers.get<std::vector<std::string>>());
    }
  }
  std::vector<MetricConfig> out;
  for (const auto& [name, layers] : sets)
    for (double a : alphas) {
      MetricConfig m{a, name, layers};
      m.validate();
      out.push_back(m);
    }
  if (out.empty()) fail(ErrorKind::kInvalidConfig, "metrics: at least one alpha and layer set required");
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (scene_count < 1) fail(ErrorKind::kInvalidConfig, "scene_count must be positive");
  synth.validate();
  patches.validate();
  if (patches.patch_size != synth.patch_size) fail(ErrorKind::kInvalidConfig, "patch sizes disagree");
  if (detector.input_size != patches.patch_size)
    fail(ErrorKind::kInvalidConfig, "detector.input_size must equal synth.patch_size");
  detector.validate();
  train.validate();
  sweep.validate();
  margins.validate();
  for (const auto& m : metrics) m.validate();
  for (const auto& m : metrics)
    for (const auto& l : m.layers)
      if (std::find(margins.layers.begin(), margins.layers.end(), l) == margins.layers.end())
        fail(ErrorKind::kInvalidConfig, "layer set '" + m.layer_set + "' uses layer " + l + " which is not probed");
  const auto pipes = targets.pipelines();
  if (pipes.empty()) fail(ErrorKind::kInvalidConfig, "at least one target pipeline required");
  std::set<std::string> ids{"identity"};
  for (const auto& p : pipes) {
    p.validate();
    if (!ids.insert(p.pipeline_id).second)
      fail(ErrorKind::kInvalidConfig, "duplicate or reserved target id '" + p.pipeline_id + "'");
  }
  if (!(min_source_accuracy >= 0.0 && min_source_accuracy <= 1.0))
    fail(ErrorKind::kInvalidConfig, "min_source_accuracy must lie in [0, 1]");
  curve.validate();
  bool found = false;
  for (const auto& m : metrics) found = found || (m.alpha == headline.alpha && m.layer_set == headline.layer_set);
  if (!found) fail(ErrorKind::kInvalidConfig, "headline metric must be one of the configured metrics");
  if (jobs < 1) fail(ErrorKind::kInvalidConfig, "jobs must be positive");
}

Json ExperimentConfig::to_json() const {
  Json sets = Json::object();
  std::vector<double> alphas;
  for (const auto& m : metrics) {
    if (m.layers.empty())
      sets[m.layer_set] = "all";
    else
      sets[m.layer_set] = m.layers;
    if (std::find(alphas.begin(), alphas.end(), m.alpha) == alphas.end()) alphas.push_back(m.alpha);
  }
  Json det = detector, tr = train;
  det.erase("rng_seed");
  tr.erase("rng_seed");
  tr.erase("batch_size");
  det.erase("pooling");
  det.erase("normalization");
  det.erase("dropout_rate");
  det.erase("input_size");
  Json mar = margins;
  mar.erase("rng_seed");
  return Json{{"seed", seed},
              {"scene_count", scene_count},
              {"synth", synth_json(synth)},
              {"patches", patches_json(patches)},
              {"targets", targets_json(targets)},
              {"detector", det},
              {"train", tr},
              {"sweep", sweep_json(sweep)},
              {"margins", mar},
              {"metrics", {{"alphas", alphas}, {"layer_sets", sets}}},
              {"evaluation",
               {{"min_source_accuracy", min_source_accuracy},
                {"curve", curve},
                {"headline", {{"alpha", headline.alpha}, {"layer_set", headline.layer_set}}}}},
              {"jobs", jobs}};
}

std::string ExperimentConfig::hash() const {
  Json j = to_json();
  j.erase("jobs");
  return json_hash(j);
}

ExperimentConfig parse_experiment(const Json& j, std::optional<std::uint64_t> seed) {
  check_keys(j, "config",
             {"seed", "scene_count", "synth", "patches", "targets", "detector", "train", "sweep", "margins",
              "metrics", "evaluation", "jobs", "description"});
  ExperimentConfig c;
  c.seed = seed ? *seed : j.value("seed", std::uint64_t{22});
  read(j, "scene_count", c.scene_count);
  c.synth = parse_synth(j.value("synth", Json::object()));
  c.patches = parse_patches(j.value("patches", Json::object()), c.synth.patch_size);
  c.patches.seed = c.seed;
  c.targets = parse_targets(j.value("targets", Json::object()));

  Json det = j.value("detector", Json::object());
  check_keys(det, "detector", {"width_scale", "constrained_kernel", "constrained_filters", "input_scale"});
  det["input_size"] = c.synth.patch_size;
  c.detector = det.get<DetectorConfig>();
  Json tr = j.value("train", Json::object());
  check_keys(tr, "train",
             {"max_epochs", "lr_init", "lr_factor", "lr_patience_epochs", "early_stop_patience",
              "improvement_threshold", "momentum"});
  c.train = tr.get<TrainConfig>();
  c.detector.rng_seed = c.seed;
  c.train.rng_seed = c.seed;
  c.sweep = parse_sweep(j.value("sweep", Json::object()), c.seed, seed.has_value());

  Json mar = j.value("margins", Json::object());
  check_keys(mar, "margins", {"layers", "max_samples", "batch_size", "bounds"});
  c.margins = mar.get<MarginOptions>();
  c.margins.rng_seed = c.seed;
  c.metrics = parse_metrics(j.value("metrics", Json::object()));

  Json ev = j.value("evaluation", Json::object());
  check_keys(ev, "evaluation", {"min_source_accuracy", "curve", "headline"});
  read(ev, "min_source_accuracy", c.min_source_accuracy);
  if (ev.contains("curve")) c.curve = ev.at("curve").get<CurveOptions>();
  c.headline = MetricConfig{2.0, "all", {}};
  if (ev.contains("headline")) {
    c.headline.alpha = ev.at("headline").value("alpha", 2.0);
    c.headline.layer_set = ev.at("headline").value("layer_set", std::string("all"));
  }
  for (const auto& m : c.metrics)
    if (m.alpha == c.headline.alpha && m.layer_set == c.headline.layer_set) c.headline = m;
  read(j, "jobs", c.jobs);
  c.validate();
  return c;
}

ExperimentConfig load_experiment(const std::filesystem::path& path, std::optional<std::uint64_t> seed) {
  Json j;
  try {
    j = read_json_file(path);
  } catch (const Error& e) {
    fail(ErrorKind::kInvalidConfig, e.what());
  }
  try {
    return parse_experiment(j, seed);
  } catch (const Json::exception& e) {
    fail(ErrorKind::kInvalidConfig, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------- lock

namespace {

bool process_alive(long pid) { return pid > 0 && (::kill(static_cast<pid_t>(pid), 0) == 0 || errno == EPERM); }

}  // namespace

OutputLock::OutputLock(const std::filesystem::path& root) : path_(root / ".forge.lock") {
  std::filesystem::create_directories(root);
  for (int attempt = 0; attempt < 2; ++attempt) {
    if (std::FILE* f = std::fopen(path_.c_str(), "wx")) {
      std::fprintf(f, "%ld\n", static_cast<long>(::getpid()));
      std::fclose(f);
      return;
    }
    long pid = 0;
    if (std::ifstream in(path_); in) in >> pid;
    if (process_alive(pid))
      fail(ErrorKind::kBusy, "output root " + root.string() + " is locked by process " + std::to_string(pid));
    std::filesystem::remove(path_);
  }
  fail(ErrorKind::kBusy, "cannot acquire lock " + path_.string());
}

OutputLock::~OutputLock() {
  std::error_code ec;
  std::filesystem::remove(path_, ec);
}

// ---------------------------------------------------------------- stages

namespace {

template <typename F>
void parallel_for(std::size_t n, int jobs, F&& body) {
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        body(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(n)));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
}

std::string metric_key(const MetricConfig& m) { return "M" + format_double(m.alpha) + "_" + m.layer_set; }

void log(const std::string& stage, const std::string& message) { std::clog << "[" << stage << "] " << message << "\n"; }

}  // namespace

Experiment::Experiment(ExperimentConfig config, std::filesystem::path root, std::filesystem::path data_root)
    : config_(std::move(config)), root_(std::move(root)), data_root_(std::move(data_root)) {
  if (data_root_.empty()) data_root_ = root_ / "data";
  config_.validate();
}

std::string Experiment::data_hash() const {
  return json_hash(Json{{"seed", config_.seed},
                        {"scene_count", config_.scene_count},
                        {"synth", synth_json(config_.synth)},
                        {"patches", patches_json(config_.patches)},
                        {"targets", config_.targets.pipelines()}});
}

std::vector<SweepPoint> Experiment::sweep_points() const {
  return expand_grid(config_.sweep, config_.detector, config_.train, data_hash());
}

std::string Experiment::stage_hash(const std::string& stage) const {
  if (stage == "synth") return data_hash();
  if (stage == "sweep") {
    Json hashes = Json::array();
    for (const auto& p : sweep_points()) hashes.push_back(p.config_hash);
    return json_hash(Json{{"data", data_hash()}, {"points", hashes}});
  }
  if (stage == "margins")
    return json_hash(Json{{"sweep", stage_hash("sweep")}, {"options", config_.margins}, {"metrics", config_.metrics}});
  if (stage == "evaluate")
    return json_hash(Json{{"margins", stage_hash("margins")},
                          {"min_source_accuracy", config_.min_source_accuracy},
                          {"curve", config_.curve},
                          {"headline", config_.headline}});
  if (stage == "rank")
    return json_hash(Json{{"margins", stage_hash("margins")},
                          {"min_source_accuracy", config_.min_source_accuracy},
                          {"headline", config_.headline}});
  if (stage == "plot") return json_hash(Json{{"evaluate", stage_hash("evaluate")}});
  fail(ErrorKind::kLookup, "unknown stage " + stage);
}

std::filesystem::path Experiment::stamp_path(const std::string& stage) const {
  if (stage == "synth") return data_root_ / "stamp.json";
  if (stage == "sweep") return sweep_dir() / "stamp.json";
  if (stage == "margins") return margins_dir() / "stamp.json";
  if (stage == "evaluate") return eval_dir() / "stamp.json";
  if (stage == "rank") return rank_dir() / "stamp.json";
  return plots_dir() / "stamp.json";
}

bool Experiment::current(const std::string& stage) const {
  const auto path = stamp_path(stage);
  if (!std::filesystem::exists(path)) return false;
  try {
    return read_json_file(path).value("hash", "") == stage_hash(stage);
  } catch (const Error&) {
    return false;
  }
}

void Experiment::stamp(const std::string& stage) const {
  write_json_file(stamp_path(stage), Json{{"stage", stage}, {"hash", stage_hash(stage)}});
}

void Experiment::require(const std::string& stage, const std::string& command) const {
  if (!current(stage))
    fail(ErrorKind::kDependency, "outputs of `forge " + command + "` are missing or stale under " + root_.string() +
                                     "; run `forge " + command + "` first");
}

bool Experiment::synth() {
  if (current("synth")) {
    log("synth", "up to date");
    return false;
  }
  const auto targets = config_.targets.pipelines();
  std::vector<PipelineParams> pipes{PipelineParams{}};
  std::vector<std::array<bool, 3>> keep{{true, true, true}};
  for (const auto& t : targets) {
    pipes.push_back(t);
    keep.push_back({false, false, true});  // targets are only ever tested on
  }
  const auto synth_cfg = config_.synth;
  const auto seed = config_.seed;
  log("synth", std::to_string(config_.scene_count) + " scenes, " + std::to_string(targets.size()) + " targets");
  auto domains = build_domains(
      config_.scene_count, [&](int i) { return synthesize_scene(mix_seed(seed, static_cast<std::uint64_t>(i)), synth_cfg); },
      pipes, config_.patches, keep);
  const auto hash = data_hash();
  std::filesystem::remove_all(data_root_);
  write_domain(source_dir(), domains[0], hash);
  for (std::size_t t = 0; t < targets.size(); ++t) write_domain(target_dir(targets[t].pipeline_id), domains[t + 1], hash);
  const auto counts = domains[0].class_counts();
  log("synth", "source: " + std::to_string(domains[0].patches.size()) + " patches (" +
                   std::to_string(counts.at(Label::kAuthentic)) + " authentic, " +
                   std::to_string(counts.at(Label::kForged)) + " forged)");
  stamp("synth");
  return true;
}

bool Experiment::sweep() {
  require("synth", "synth");
  if (current("sweep")) {
    log("sweep", "up to date");
    return false;
  }
  const auto source = read_domain(source_dir());
  const auto result =
      run_sweep(config_.sweep, config_.detector, config_.train, source, sweep_dir(), config_.jobs, data_hash());
  log("sweep", std::to_string(result.trained) + " trained, " + std::to_string(result.reused) + " reused, " +
                   std::to_string(result.records.size() - result.variants.size()) + " failed");
  if (result.variants.empty()) fail(ErrorKind::kTrainingFailure, "every sweep variant failed to train");
  stamp("sweep");
  return true;
}

namespace {

// Loads the checkpoints that completed training, in grid order.
struct TrainedVariant {
  SweepPoint point;
  double source_accuracy = 0.0;
};

std::vector<TrainedVariant> trained_variants(const Experiment& e) {
  std::vector<TrainedVariant> out;
  for (const auto& p : e.sweep_points()) {
    const auto dir = e.sweep_dir() / p.variant_id;
    if (!std::filesystem::exists(dir / "config.json")) continue;
    const auto cfg = read_json_file(dir / "config.json");
    if (cfg.value("config_hash", "") != p.config_hash) continue;
    out.push_back({p, cfg.at("source_test_accuracy").get<double>()});
  }
  return out;
}

Json read_margins(const Experiment& e, const std::string& id) {
  return read_json_file(e.margins_dir() / id / "margins.json");
}

VariantEntry variant_entry(const Experiment& e, const TrainedVariant& t) {
  VariantEntry v;
  v.variant_id = t.point.variant_id;
  v.source_accuracy = t.source_accuracy;
  const Json m = read_margins(e, v.variant_id);
  if (m.value("status", "") != "ok") {
    v.margin_error = m.value("error", std::string("margin computation failed"));
    return v;
  }
  for (const auto& x : m.at("metrics")) v.metrics.emplace_back(x.get<MetricConfig>(), x.at("value").get<double>());
  return v;
}

}  // namespace

bool Experiment::margins() {
  require("sweep", "sweep");
  if (current("margins")) {
    log("margins", "up to date");
    return false;
  }
  const auto variants = trained_variants(*this);
  std::optional<DomainDataset> source;
  std::mutex source_mutex;
  std::atomic<int> computed{0};
  parallel_for(variants.size(), config_.jobs, [&](std::size_t i) {
    const auto& p = variants[i].point;
    const auto dir = margins_dir() / p.variant_id;
    const auto input_hash =
        json_hash(Json{{"checkpoint", p.config_hash}, {"options", config_.margins}, {"metrics", config_.metrics}});
    if (std::filesystem::exists(dir / "margins.json") &&
        read_json_file(dir / "margins.json").value("input_hash", "") == input_hash)
      return;
    {
      std::lock_guard lock(source_mutex);
      if (!source) source = read_domain(source_dir());
    }
    const auto v = load_checkpoint(sweep_dir() / p.variant_id);
    Json out;
    try {
      auto report = compute_margin_report(v.model, *source, config_.margins, config_.metrics);
      report.variant_id = p.variant_id;
      out = margin_report_to_json(report);
      out["status"] = "ok";
    } catch (const Error& err) {
      if (exit_code_for(err.kind()) != kExitAnalysis) throw;
      out = Json{{"variant_id", p.variant_id}, {"status", "failed"}, {"error", err.what()}};
      log("margins", p.variant_id + " excluded: " + err.what());
    }
    out["input_hash"] = input_hash;
    std::filesystem::create_directories(dir);
    write_json_file(dir / "margins.json", out);
    ++computed;
  });
  log("margins", std::to_string(computed.load()) + " computed, " + std::to_string(variants.size() - computed) +
                     " reused");
  stamp("margins");
  return true;
}

namespace {

std::string curve_table(const QuantileCurve& c) {
  std::ostringstream s;
  s << "  center   n";
  for (double l : c.levels) s << "  Q" << format_double(l * 100);
  s << "\n";
  for (std::size_t k = 0; k < c.centers.size(); ++k) {
    if (!c.values.front()[k]) continue;
    char buf[64];
    std::snprintf(buf, sizeof buf, "  %6.3f %3d", c.centers[k], c.counts[k]);
    s << buf;
    for (const auto& row : c.values) {
      std::snprintf(buf, sizeof buf, "  %7.4f", *row[k]);
      s << buf;
    }
    s << "\n";
  }
  return s.str();
}

std::string gaps_csv(std::span<const GapRecord> gaps) {
  std::ostringstream s;
  s << "variant_id,target_id,source_acc,target_acc,gap\n";
  for (const auto& g : gaps)
    s << g.variant_id << ',' << g.target_pipeline_id << ',' << format_double(g.source_accuracy) << ','
      << format_double(g.target_accuracy) << ',' << format_double(g.gap) << '\n';
  return s.str();
}

}  // namespace

bool Experiment::evaluate() {
  require("margins", "margins");
  if (current("evaluate")) {
    log("evaluate", "up to date");
    return false;
  }
  const auto trained = trained_variants(*this);
  const auto pipes = config_.targets.pipelines();
  std::vector<std::string> target_ids;
  std::vector<DomainDataset> targets;
  for (const auto& p : pipes) {
    target_ids.push_back(p.pipeline_id);
    targets.push_back(read_domain(target_dir(p.pipeline_id)));
  }

  std::vector<VariantEntry> entries(trained.size());
  parallel_for(trained.size(), config_.jobs, [&](std::size_t i) {
    entries[i] = variant_entry(*this, trained[i]);
    const auto v = load_checkpoint(sweep_dir() / trained[i].point.variant_id);
    for (std::size_t t = 0; t < targets.size(); ++t)
      entries[i].target_accuracy[target_ids[t]] = evaluate_accuracy(v.model, targets[t], Split::kTest);
  });

  std::vector<GapRecord> gaps;
  for (const auto& e : entries)
    for (const auto& t : target_ids) gaps.push_back(make_gap(e.variant_id, t, e.source_accuracy, e.target_accuracy.at(t)));
  const auto kept = filter_variants(entries, config_.min_source_accuracy);
  const auto pair_set = build_pairs(kept, target_ids, config_.metrics);
  for (const auto& x : pair_set.exclusions) log("evaluate", "excluded " + x);

  std::ostringstream report;
  report << "variants trained: " << entries.size() << ", kept at source accuracy >= "
         << format_double(config_.min_source_accuracy) << ": " << kept.size() << "\n";
  report << "targets: " << target_ids.size() << ", pairs: " << pair_set.pairs.size() << "\n";
  report << "expectation: larger latent margins go with smaller generalization gaps, so the Spearman correlation "
            "between the normalized metric and the mean gap is expected to be negative.\n\n";

  Json curves = Json::array();
  Json correlations = Json::array();
  for (const auto& m : config_.metrics) {
    const auto pairs = select_pairs(pair_set.pairs, m.alpha, m.layer_set);
    Json corr{{"alpha", m.alpha}, {"layer_set", m.layer_set}, {"pairs", pairs.size()}};
    std::string rho_text;
    for (const auto& [key, fn] :
         std::vector<std::pair<std::string, std::function<double()>>>{
             {"spearman_pairs", [&] { return rank_correlation(pairs); }},
             {"spearman_mean_gap", [&] { return mean_gap_correlation(pairs, m.alpha, m.layer_set); }}}) {
      try {
        const double rho = fn();
        corr[key] = rho;
        if (key == "spearman_mean_gap")
          rho_text = format_double(rho) + (rho < 0 ? " (negative)" : rho > 0 ? " (positive)" : " (zero)");
      } catch (const Error& err) {
        corr[key] = nullptr;
        corr[key + "_error"] = err.what();
        if (key == "spearman_mean_gap") rho_text = std::string("undefined: ") + err.what();
      }
    }
    correlations.push_back(corr);
    report << metric_key(m) << ": Spearman(normalized metric, mean gap) = " << rho_text << "\n";
    if (!pairs.empty()) {
      const auto c = quantile_curve(pairs, config_.curve);
      curves.push_back(Json{{"alpha", m.alpha}, {"layer_set", m.layer_set}, {"curve", curve_to_json(c)}});
      if (m.alpha == config_.headline.alpha && m.layer_set == config_.headline.layer_set)
        report << "quantile curve of the gap over normalized " << metric_key(m) << ":\n" << curve_table(c);
    }
  }
  const auto over = overfitting_curve(gaps, config_.curve);
  report << "\nquantile curve of the gap over source accuracy (all variants):\n" << curve_table(over);

  std::filesystem::create_directories(eval_dir());
  write_text_atomic(eval_dir() / "gaps.csv", gaps_csv(gaps));
  write_text_atomic(eval_dir() / "pairs.csv", pairs_csv(pair_set.pairs));
  write_json_file(eval_dir() / "curves.json", Json{{"metric_curves", curves},
                                                   {"overfitting_curve", curve_to_json(over)},
                                                   {"correlations", correlations},
                                                   {"exclusions", pair_set.exclusions}});
  write_text_atomic(eval_dir() / "report.txt", report.str());
  std::cout << report.str();
  stamp("evaluate");
  return true;
}

bool Experiment::rank() {
  require("margins", "margins");
  if (current("rank")) {
    log("rank", "up to date");
    return false;
  }
  std::vector<VariantEntry> entries;
  for (const auto& t : trained_variants(*this)) entries.push_back(variant_entry(*this, t));
  const auto kept = filter_variants(entries, config_.min_source_accuracy);
  if (kept.empty())
    fail(ErrorKind::kEmptyDomain, "no variant reaches source accuracy " + format_double(config_.min_source_accuracy));
  const auto ranked = rank_variants(kept, config_.headline);

  Json list = Json::array();
  std::ostringstream report;
  report << "ranking by " << metric_key(config_.headline) << " over " << ranked.size() << " variants with source accuracy >= "
         << format_double(config_.min_source_accuracy) << "\n";
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    list.push_back({{"rank", i + 1},
                    {"variant_id", ranked[i].variant_id},
                    {"metric", ranked[i].metric},
                    {"source_accuracy", ranked[i].source_accuracy}});
    char buf[160];
    std::snprintf(buf, sizeof buf, "%3zu  %-36s  metric %12.6g  source acc %.4f\n", i + 1, ranked[i].variant_id.c_str(),
                  ranked[i].metric, ranked[i].source_accuracy);
    report << buf;
  }
  report << "selected detector: " << ranked.front().variant_id << "\n";
  std::filesystem::create_directories(rank_dir());
  write_json_file(rank_dir() / "ranking.json", Json{{"metric", {{"alpha", config_.headline.alpha},
                                                                {"layer_set", config_.headline.layer_set}}},
                                                    {"min_source_accuracy", config_.min_source_accuracy},
                                                    {"selected", ranked.front().variant_id},
                                                    {"ranking", list}});
  write_text_atomic(rank_dir() / "report.txt", report.str());
  std::cout << report.str();
  stamp("rank");
  return true;
}

bool Experiment::plot() {
  require("evaluate", "evaluate");
  if (current("plot")) {
    log("plot", "up to date");
    return false;
  }
  const auto curves = read_json_file(eval_dir() / "curves.json");
  std::filesystem::create_directories(plots_dir());
  for (const auto& c : curves.at("metric_curves")) {
    MetricConfig m{c.at("alpha").get<double>(), c.at("layer_set").get<std::string>(), {}};
    const auto svg = render_curve_svg(curve_from_json(c.at("curve")),
                                      {"Generalization gap vs normalized " + metric_key(m),
                                       "normalized " + metric_key(m), "generalization gap"});
    write_text_atomic(plots_dir() / (metric_key(m) + ".svg"), svg);
  }
  write_text_atomic(plots_dir() / "overfitting.svg",
                    render_curve_svg(curve_from_json(curves.at("overfitting_curve")),
                                     {"Generalization gap vs source accuracy", "source test accuracy",
                                      "generalization gap"}));
  stamp("plot");
  return true;
}

void Experiment::run_all() {
  synth();
  sweep();
  margins();
  evaluate();
  rank();
  plot();
}

}  // namespace forge
