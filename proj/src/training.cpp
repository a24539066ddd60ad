#include "forge/training.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "forge/error.hpp"
#include "forge/rng.hpp"

namespace forge {

void TrainConfig::validate() const {
  if (max_epochs < 1) fail(ErrorKind::kInvalidConfig, "train: max_epochs must be >= 1");
  if (batch_size < 1) fail(ErrorKind::kInvalidConfig, "train: batch_size must be >= 1");
  if (!(lr_init > 0.0)) fail(ErrorKind::kInvalidConfig, "train: lr_init must be > 0");
  if (!(lr_factor > 0.0 && lr_factor < 1.0)) fail(ErrorKind::kInvalidConfig, "train: lr_factor must lie in (0,1)");
  if (lr_patience_epochs < 1 || early_stop_patience < 1)
    fail(ErrorKind::kInvalidConfig, "train: patience values must be >= 1");
  if (!(momentum >= 0.0 && momentum < 1.0)) fail(ErrorKind::kInvalidConfig, "train: momentum must lie in [0,1)");
  if (!(improvement_threshold >= 0.0)) fail(ErrorKind::kInvalidConfig, "train: improvement_threshold must be >= 0");
}

PlateauSchedule::PlateauSchedule(const TrainConfig& config)
    : lr_(config.lr_init),
      factor_(config.lr_factor),
      lr_patience_(config.lr_patience_epochs),
      early_stop_patience_(config.early_stop_patience),
      threshold_(config.improvement_threshold) {}

bool PlateauSchedule::observe(double val_accuracy) {
  if (val_accuracy - best_ >= threshold_) {
    best_ = val_accuracy;
    lr_stale_ = 0;
    stale_epochs_ = 0;
    return true;
  }
  ++stale_epochs_;
  if (++lr_stale_ >= lr_patience_) {
    lr_ *= factor_;
    lr_stale_ = 0;
  }
  return false;
}

namespace {

constexpr int kEvalBatch = 64;

// Mean softmax cross-entropy; writes dL/dlogits into `grad`.
double cross_entropy(const nn::Tensor<float>& logits, std::span<const Label> labels, nn::Tensor<float>& grad,
                     int& correct) {
  grad = nn::Tensor<float>(logits.n, 2, 1, 1);
  double loss = 0.0;
  const double inv_n = 1.0 / logits.n;
  for (int i = 0; i < logits.n; ++i) {
    const double a = logits.data[2 * i], b = logits.data[2 * i + 1];
    const double m = std::max(a, b);
    const double ea = std::exp(a - m), eb = std::exp(b - m);
    const double z = ea + eb;
    const int y = static_cast<int>(labels[i]);
    const double p[2] = {ea / z, eb / z};
    loss -= std::log(std::max(p[y], 1e-300));
    for (int k = 0; k < 2; ++k) grad.data[2 * i + k] = static_cast<float>((p[k] - (k == y ? 1.0 : 0.0)) * inv_n);
    if (nn::predicted_label(logits, i) == labels[i]) ++correct;
  }
  return loss * inv_n;
}

void sgd_step(DetectorModel& model, const nn::Gradients<float>& grads, nn::Gradients<float>& velocity, double lr,
              double momentum) {
  for (std::size_t b = 0; b < model.blocks.size(); ++b)
    for (std::size_t l = 0; l < model.blocks[b].layers.size(); ++l) {
      auto params = nn::trainable(model.blocks[b].layers[l]);
      for (std::size_t p = 0; p < params.size(); ++p) {
        auto& w = *params[p];
        const auto& g = grads[b][l][p];
        auto& v = velocity[b][l][p];
        for (std::size_t i = 0; i < w.size(); ++i) {
          const float step = momentum > 0.0 ? (v[i] = static_cast<float>(momentum) * v[i] + g[i]) : g[i];
          w[i] -= static_cast<float>(lr) * step;
        }
      }
    }
}

void zero(nn::Gradients<float>& grads) {
  for (auto& block : grads)
    for (auto& layer : block)
      for (auto& p : layer) std::fill(p.begin(), p.end(), 0.0f);
}

std::string format_variant_id(const DetectorConfig& d, const TrainConfig& t) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "bs%d-%s-%s-do%g-s%llu", t.batch_size, d.pooling == Pooling::kMax ? "max" : "avg",
                d.normalization == Normalization::kBatchNorm ? "bn" : "nonorm", d.dropout_rate,
                static_cast<unsigned long long>(t.rng_seed));
  return buf;
}

}  // namespace

std::vector<Label> predict(const DetectorModel& model, std::span<const LabeledPatch> patches,
                           std::span<const std::size_t> indices) {
  std::vector<Label> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += kEvalBatch) {
    const auto chunk = indices.subspan(start, std::min<std::size_t>(kEvalBatch, indices.size() - start));
    const auto logits = nn::forward_logits(model, nn::make_batch<float>(patches, chunk));
    for (int i = 0; i < logits.n; ++i) out.push_back(nn::predicted_label(logits, i));
  }
  return out;
}

double evaluate_accuracy(const DetectorModel& model, std::span<const LabeledPatch> patches,
                         std::span<const std::size_t> indices) {
  if (indices.empty()) fail(ErrorKind::kInvalidInput, "evaluate_accuracy: empty set");
  const auto labels = predict(model, patches, indices);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < indices.size(); ++i) correct += labels[i] == patches[indices[i]].label;
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

double evaluate_accuracy(const DetectorModel& model, const DomainDataset& dataset, Split split) {
  return evaluate_accuracy(model, dataset.patches, dataset.split(split));
}

DetectorVariant train_detector(const DetectorConfig& detector_config, const TrainConfig& train_config,
                               const DomainDataset& source, const TrainHooks& hooks) {
  train_config.validate();
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
    if (source.split(s).empty())
      fail(ErrorKind::kInvalidInput, std::string("train_detector: empty ") + to_string(s) + " split");
  if (source.patches.front().size != detector_config.input_size)
    fail(ErrorKind::kInvalidConfig, "train_detector: patch size does not match detector input size");

  DetectorVariant variant;
  variant.detector_config = detector_config;
  variant.train_config = train_config;
  variant.variant_id = format_variant_id(detector_config, train_config);
  variant.model = nn::build_detector<float>(detector_config);

  DetectorModel& model = variant.model;
  DetectorModel best = model;
  double best_val = -1.0;
  PlateauSchedule schedule(train_config);
  auto grads = model.zero_gradients();
  auto velocity = model.zero_gradients();
  const auto& train_idx = source.split(Split::kTrain);
  nn::Trace<float> trace;
  nn::Tensor<float> dlogits;

  for (int epoch = 1; epoch <= train_config.max_epochs; ++epoch) {
    EpochRecord record;
    record.epoch = epoch;
    record.lr = schedule.lr();

    std::vector<std::size_t> order(train_idx.begin(), train_idx.end());
    Rng shuffle_rng(mix_seed(train_config.rng_seed, static_cast<std::uint64_t>(epoch)));
    shuffle_rng.shuffle(std::span(order));
    Rng dropout_rng(mix_seed(train_config.rng_seed, 0x10000u + static_cast<std::uint64_t>(epoch)));

    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(train_config.batch_size)) {
      const std::span<const std::size_t> batch_idx(
          order.data() + start, std::min<std::size_t>(train_config.batch_size, order.size() - start));
      const auto x = nn::make_batch<float>(source.patches, batch_idx);
      std::vector<Label> labels;
      for (std::size_t i : batch_idx) labels.push_back(source.patches[i].label);

      const auto logits = nn::forward(model, x, nn::Mode::kTrain, &trace, nullptr, &dropout_rng, &model);
      const double loss = cross_entropy(logits, labels, dlogits, correct);
      if (!std::isfinite(loss))
        fail(ErrorKind::kTrainingFailure, "training diverged (non-finite loss) at epoch " + std::to_string(epoch));
      loss_sum += loss * static_cast<double>(batch_idx.size());

      zero(grads);
      nn::backward(model, trace, dlogits, nn::Mode::kTrain, &grads);
      sgd_step(model, grads, velocity, schedule.lr(), train_config.momentum);
      nn::project_constrained(model);
    }
    record.train_loss = loss_sum / static_cast<double>(order.size());
    record.train_accuracy = static_cast<double>(correct) / static_cast<double>(order.size());

    double val = evaluate_accuracy(model, source, Split::kVal);
    if (hooks.val_override) val = hooks.val_override(epoch, val);
    record.val_accuracy = val;
    variant.history.push_back(record);
    if (hooks.on_epoch) hooks.on_epoch(record);

    if (val > best_val) {
      best_val = val;
      best = model;
      variant.best_epoch = epoch;
    }
    schedule.observe(val);
    if (schedule.should_stop()) break;
  }

  variant.model = std::move(best);
  variant.source_test_accuracy = evaluate_accuracy(variant.model, source, Split::kTest);
  return variant;
}

// ---------------------------------------------------------------------------
// Sweep

std::size_t SweepGrid::size() const {
  return batch_sizes.size() * poolings.size() * normalizations.size() * dropout_rates.size() *
         replicate_seeds.size();
}

void SweepGrid::validate() const {
  if (size() == 0) fail(ErrorKind::kInvalidConfig, "sweep: every grid axis needs at least one value");
  for (int b : batch_sizes)
    if (b < 1) fail(ErrorKind::kInvalidConfig, "sweep: batch sizes must be >= 1");
  for (double d : dropout_rates)
    if (!(d >= 0.0 && d < 1.0)) fail(ErrorKind::kInvalidConfig, "sweep: dropout rates must lie in [0,1)");
}

std::vector<SweepPoint> expand_grid(const SweepGrid& grid, const DetectorConfig& base_detector,
                                    const TrainConfig& base_train, const std::string& data_hash) {
  grid.validate();
  std::vector<SweepPoint> points;
  for (std::uint64_t seed : grid.replicate_seeds)
    for (int batch : grid.batch_sizes)
      for (Pooling pooling : grid.poolings)
        for (Normalization norm : grid.normalizations)
          for (double dropout : grid.dropout_rates) {
            SweepPoint p;
            p.detector_config = base_detector;
            p.detector_config.pooling = pooling;
            p.detector_config.normalization = norm;
            p.detector_config.dropout_rate = dropout;
            p.detector_config.rng_seed = seed;
            p.train_config = base_train;
            p.train_config.batch_size = batch;
            p.train_config.rng_seed = seed;
            p.detector_config.validate();
            p.train_config.validate();
            p.variant_id = format_variant_id(p.detector_config, p.train_config);
            Json key{{"detector", p.detector_config}, {"train", p.train_config}};
            if (!data_hash.empty()) key["data"] = data_hash;
            p.config_hash = json_hash(key);
            points.push_back(std::move(p));
          }
  return points;
}

namespace {

Json to_json_record(const SweepRecord& r) {
  Json j{{"variant_id", r.variant_id}, {"config_hash", r.config_hash}, {"status", r.status},
         {"source_accuracy", r.source_accuracy}, {"checkpoint", r.checkpoint}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

// Append-only index, rewritten through a temporary file and rename.
void append_index(const std::filesystem::path& index, const SweepRecord& record) {
  std::string text;
  if (std::ifstream in(index); in) text.assign(std::istreambuf_iterator<char>(in), {});
  text += to_json_record(record).dump() + "\n";
  write_text_atomic(index, text);
}

}  // namespace

SweepResult run_sweep(const SweepGrid& grid, const DetectorConfig& base_detector, const TrainConfig& base_train,
                      const DomainDataset& source, const std::filesystem::path& out_dir, int jobs,
                      const std::string& data_hash) {
  const auto points = expand_grid(grid, base_detector, base_train, data_hash);
  std::filesystem::create_directories(out_dir);
  const auto index = out_dir / "sweep.jsonl";

  std::vector<std::optional<DetectorVariant>> slots(points.size());
  std::vector<SweepRecord> records(points.size());
  std::atomic<std::size_t> next{0};
  std::atomic<int> trained{0}, reused{0};
  std::mutex index_mutex;

  auto worker = [&] {
    for (std::size_t i = next++; i < points.size(); i = next++) {
      const auto& p = points[i];
      const auto dir = out_dir / p.variant_id;
      SweepRecord rec{p.variant_id, p.config_hash, "ok", "", 0.0, dir.string()};
      try {
        if (std::filesystem::exists(dir / "config.json") && checkpoint_hash(dir) == p.config_hash) {
          slots[i] = load_checkpoint(dir);
          ++reused;
        } else {
          std::clog << "[sweep] training " << p.variant_id << "\n";
          auto v = train_detector(p.detector_config, p.train_config, source);
          v.variant_id = p.variant_id;
          save_checkpoint(dir, v, p.config_hash);
          slots[i] = std::move(v);
          ++trained;
          rec.source_accuracy = slots[i]->source_test_accuracy;
          std::lock_guard lock(index_mutex);
          append_index(index, rec);
        }
        rec.source_accuracy = slots[i]->source_test_accuracy;
      } catch (const Error& e) {
        rec.status = "failed";
        rec.error = e.what();
        std::clog << "[sweep] " << p.variant_id << " failed: " << e.what() << "\n";
        std::lock_guard lock(index_mutex);
        append_index(index, rec);
      }
      records[i] = rec;
    }
  };

  const int workers = std::max(1, std::min<int>(jobs, static_cast<int>(points.size())));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }

  SweepResult result;
  result.records = std::move(records);
  result.trained = trained;
  result.reused = reused;
  for (auto& s : slots)
    if (s) result.variants.push_back(std::move(*s));
  return result;
}

}  // namespace forge
