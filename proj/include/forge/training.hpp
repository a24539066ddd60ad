#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forge/data.hpp"
#include "forge/detector.hpp"
#include "forge/json_io.hpp"

namespace forge {

struct TrainConfig {
  int max_epochs = 115;
  int batch_size = 128;
  double lr_init = 1e-3;
  double lr_factor = 0.1;
  int lr_patience_epochs = 4;
  int early_stop_patience = 10;
  // Minimum val-accuracy gain that counts as an improvement.
  double improvement_threshold = 1e-4;
  double momentum = 0.0;
  std::uint64_t rng_seed = 22;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;  // rate used during this epoch
};

struct DetectorVariant {
  std::string variant_id;
  DetectorConfig detector_config;
  TrainConfig train_config;
  DetectorModel model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double source_test_accuracy = 0.0;
};

// Reduce-on-plateau learning-rate schedule plus early-stopping counter,
// both driven by validation accuracy.
class PlateauSchedule {
 public:
  explicit PlateauSchedule(const TrainConfig& config);

  // Registers one finished epoch. Returns true when it counts as an improvement.
  bool observe(double val_accuracy);

  double lr() const { return lr_; }
  bool should_stop() const { return stale_epochs_ >= early_stop_patience_; }

 private:
  double lr_;
  double factor_;
  int lr_patience_;
  int early_stop_patience_;
  double threshold_;
  double best_ = -std::numeric_limits<double>::infinity();
  int lr_stale_ = 0;
  int stale_epochs_ = 0;
};

struct TrainHooks {
  // Replaces the measured validation accuracy (scripted schedules in tests).
  std::function<double(int epoch, double measured)> val_override;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Plain (or momentum) SGD on two-logit cross-entropy with ConvRes
/// projection after every step, plateau LR schedule, early stopping on
/// validation accuracy and restoration of the best-validation weights.
DetectorVariant train_detector(const DetectorConfig& detector_config, const TrainConfig& train_config,
                               const DomainDataset& source, const TrainHooks& hooks = {});

std::vector<Label> predict(const DetectorModel& model, std::span<const LabeledPatch> patches,
                           std::span<const std::size_t> indices);

double evaluate_accuracy(const DetectorModel& model, std::span<const LabeledPatch> patches,
                         std::span<const std::size_t> indices);
double evaluate_accuracy(const DetectorModel& model, const DomainDataset& dataset, Split split);

struct SweepGrid {
  std::vector<int> batch_sizes{128};
  std::vector<Pooling> poolings{Pooling::kMax};
  std::vector<Normalization> normalizations{Normalization::kNone};
  std::vector<double> dropout_rates{0.0};
  std::vector<std::uint64_t> replicate_seeds{22};

  std::size_t size() const;
  void validate() const;
};

struct SweepPoint {
  std::string variant_id;
  std::string config_hash;
  DetectorConfig detector_config;
  TrainConfig train_config;
};

// `data_hash`, when given, is folded into every config hash so new data
// invalidates old checkpoints.
std::vector<SweepPoint> expand_grid(const SweepGrid& grid, const DetectorConfig& base_detector,
                                    const TrainConfig& base_train, const std::string& data_hash = "");

struct SweepRecord {
  std::string variant_id;
  std::string config_hash;
  std::string status;  // "ok" or "failed"
  std::string error;
  double source_accuracy = 0.0;
  std::string checkpoint;
};

struct SweepResult {
  std::vector<DetectorVariant> variants;
  std::vector<SweepRecord> records;
  int trained = 0;
  int reused = 0;
};

/// Trains every grid point into <out_dir>/<variant_id>/, skipping points whose
/// checkpoint already carries the same config hash. Failures are recorded and
/// the sweep continues. Appends to <out_dir>/sweep.jsonl.
SweepResult run_sweep(const SweepGrid& grid, const DetectorConfig& base_detector, const TrainConfig& base_train,
                      const DomainDataset& source, const std::filesystem::path& out_dir, int jobs = 1,
                      const std::string& data_hash = "");

/// Keeps variants whose source accuracy reaches the threshold, in order.
template <typename V>
std::vector<V> filter_variants(const std::vector<V>& variants, double min_source_accuracy) {
  std::vector<V> kept;
  for (const auto& v : variants) {
    double acc;
    if constexpr (requires { v.source_test_accuracy; })
      acc = v.source_test_accuracy;
    else
      acc = v.source_accuracy;
    if (acc >= min_source_accuracy) kept.push_back(v);
  }
  return kept;
}

// Checkpoint directory: config.json, weights.bin, history.csv.
void save_checkpoint(const std::filesystem::path& dir, const DetectorVariant& variant,
                     const std::string& config_hash);
DetectorVariant load_checkpoint(const std::filesystem::path& dir);
std::string checkpoint_hash(const std::filesystem::path& dir);

void write_weights(const std::filesystem::path& path, const DetectorModel& model);
void read_weights(const std::filesystem::path& path, DetectorModel& model);

void to_json(Json& j, const DetectorConfig& c);
void from_json(const Json& j, DetectorConfig& c);
void to_json(Json& j, const TrainConfig& c);
void from_json(const Json& j, TrainConfig& c);

}  // namespace forge
