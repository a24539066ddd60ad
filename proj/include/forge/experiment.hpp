#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "forge/data.hpp"
#include "forge/evaluation.hpp"
#include "forge/json_io.hpp"
#include "forge/margins.hpp"
#include "forge/pipelines.hpp"
#include "forge/training.hpp"

namespace forge {

enum ExitCode : int {
  kExitOk = 0,
  kExitUnexpected = 1,
  kExitConfig = 2,
  kExitData = 3,
  kExitTraining = 4,
  kExitDependency = 5,
  kExitAnalysis = 6,
  kExitBusy = 7,
};

int exit_code_for(ErrorKind kind);

struct TargetSpec {
  int denoise_levels = 2;
  int sharpen_levels = 2;
  int jpeg_quality = 70;
  GridLevels levels;
  // Used instead of the grid when non-empty.
  std::vector<PipelineParams> explicit_pipelines;

  std::vector<PipelineParams> pipelines() const;
};

struct ExperimentConfig {
  std::uint64_t seed = 22;
  int scene_count = 400;
  SynthConfig synth;
  PatchConfig patches;
  TargetSpec targets;
  DetectorConfig detector;
  TrainConfig train;
  SweepGrid sweep;
  MarginOptions margins;
  std::vector<MetricConfig> metrics;
  double min_source_accuracy = 0.75;
  CurveOptions curve;
  MetricConfig headline;  // metric used for ranking and the headline correlation
  int jobs = 1;

  void validate() const;
  Json to_json() const;
  std::string hash() const;
};

/// Parses and validates a config. `seed` overrides the global seed and every
/// seed derived from it (scene synthesis, splits, replicate seeds, margin
/// subsampling).
ExperimentConfig parse_experiment(const Json& j, std::optional<std::uint64_t> seed = std::nullopt);
ExperimentConfig load_experiment(const std::filesystem::path& path, std::optional<std::uint64_t> seed = std::nullopt);

// Output tree rooted at one directory; one command at a time per root.
class Experiment {
 public:
  // `data_root` defaults to <root>/data.
  Experiment(ExperimentConfig config, std::filesystem::path root, std::filesystem::path data_root = {});

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& root() const { return root_; }

  const std::filesystem::path& data_root() const { return data_root_; }
  std::filesystem::path source_dir() const { return data_root_ / "source"; }
  std::filesystem::path target_dir(const std::string& id) const { return data_root_ / "targets" / id; }
  std::filesystem::path sweep_dir() const { return root_ / "sweep"; }
  std::filesystem::path margins_dir() const { return root_ / "margins"; }
  std::filesystem::path eval_dir() const { return root_ / "eval"; }
  std::filesystem::path rank_dir() const { return root_ / "rank"; }
  std::filesystem::path plots_dir() const { return root_ / "plots"; }

  std::string data_hash() const;
  std::vector<SweepPoint> sweep_points() const;

  // Each returns true when work was done, false when outputs were current.
  bool synth();
  bool sweep();
  bool margins();
  bool evaluate();
  bool rank();
  bool plot();
  void run_all();

 private:
  std::string stage_hash(const std::string& stage) const;
  void require(const std::string& stage, const std::string& command) const;
  bool current(const std::string& stage) const;
  void stamp(const std::string& stage) const;
  std::filesystem::path stamp_path(const std::string& stage) const;

  ExperimentConfig config_;
  std::filesystem::path root_;
  std::filesystem::path data_root_;
};

// Exclusive lock file <root>/.forge.lock, released on destruction. A lock
// left by a dead process is taken over.
class OutputLock {
 public:
  explicit OutputLock(const std::filesystem::path& root);
  ~OutputLock();
  OutputLock(const OutputLock&) = delete;
  OutputLock& operator=(const OutputLock&) = delete;

 private:
  std::filesystem::path path_;
};

}  // namespace forge
