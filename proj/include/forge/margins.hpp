#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "forge/data.hpp"
#include "forge/detector.hpp"
#include "forge/json_io.hpp"

namespace forge {

struct MarginSample {
  std::string layer;
  double raw_margin = 0.0;
  double normalized_margin = 0.0;
  int sample_index = 0;
  bool infinite = false;  // zero gradient with nonzero logit difference
};

// Layers probed by default: every block output except fc2 (identical to the
// fc3 input in eval mode) and fc3 (the logits), plus the fc3 input.
const std::vector<std::string>& default_probed_layers();

// Orders names by their position in the network.
std::vector<std::string> network_order(std::vector<std::string> layers);

/// Signed first-order distance to the decision boundary in the latent space of
/// `layer`: (f_y - f_other) / max(||grad||, 1e-12), y the true label.
/// Normalized margins are left equal to the raw ones.
std::vector<MarginSample> first_order_margin(const nn::Model<double>& model, const nn::Tensor<double>& batch,
                                             std::span<const Label> labels, const std::string& layer);

// Same for several layers with one forward and one backward pass. When
// `activations` is given the captured latents are returned through it.
std::map<std::string, std::vector<MarginSample>> first_order_margins(
    const nn::Model<double>& model, const nn::Tensor<double>& batch, std::span<const Label> labels,
    const std::vector<std::string>& layers, std::map<std::string, nn::Tensor<double>>* activations = nullptr);

// Streaming per-feature variance; scale = sqrt(mean unbiased feature variance).
class ScaleAccumulator {
 public:
  void add(const nn::Tensor<double>& activations);
  std::size_t count() const { return count_; }
  // Throws kInvalidInput below 2 samples, kDegenerateScale for zero variance.
  double scale(const std::string& layer) const;

 private:
  std::size_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

double activation_scale(const nn::Tensor<double>& activations, const std::string& layer);

/// Divides every raw margin by the activation scale of its layer.
std::vector<MarginSample> normalize_margins(std::vector<MarginSample> samples,
                                            const nn::Tensor<double>& activations);
void apply_scale(std::vector<MarginSample>& samples, double scale);

enum class BoundMode { kMinMax, kWhisker };
const char* to_string(BoundMode m);
BoundMode parse_bound_mode(const std::string& s);

struct LayerSummary {
  std::array<double, 5> mu{};  // lower, Q1, median, Q3, upper
  int positive_count = 0;
  int excluded_negative = 0;  // margin <= 0
  int excluded_infinite = 0;
};

struct MarginSummary {
  std::vector<std::string> layers;  // network order
  std::map<std::string, LayerSummary> per_layer;

  std::vector<double> concatenated() const;
  std::vector<double> concatenated(const std::vector<std::string>& selected) const;
};

LayerSummary summarize_layer(std::span<const MarginSample> samples, BoundMode bounds = BoundMode::kMinMax);

/// Five-number summary of the positive finite normalized margins of each
/// layer. Throws kInsufficientMargins when a layer keeps fewer than 5.
MarginSummary summarize_margins(const std::map<std::string, std::vector<MarginSample>>& samples,
                                BoundMode bounds = BoundMode::kMinMax);

struct MetricConfig {
  double alpha = 2.0;
  std::string layer_set = "all";
  std::vector<std::string> layers;  // empty means every summarized layer

  void validate() const;
};

double margin_metric(std::span<const double> mu, double alpha);
double margin_metric(const MarginSummary& summary, const MetricConfig& config);

struct MarginOptions {
  std::vector<std::string> layers = default_probed_layers();
  int max_samples = 2000;
  int batch_size = 50;
  BoundMode bounds = BoundMode::kMinMax;
  std::uint64_t rng_seed = 22;

  void validate() const;
};

struct MarginReport {
  std::string variant_id;
  MarginOptions options;
  int evaluated = 0;
  std::map<std::string, double> scales;
  MarginSummary summary;
  std::vector<std::pair<MetricConfig, double>> metrics;
};

// Indices of the margin evaluation set: the training split, subsampled to
// max_samples with a seeded draw and returned in ascending order.
std::vector<std::size_t> margin_sample_indices(const DomainDataset& source, const MarginOptions& options);

/// Margins of a trained model over the source training split, computed in
/// double precision.
MarginReport compute_margin_report(const DetectorModel& model, const DomainDataset& source,
                                   const MarginOptions& options, const std::vector<MetricConfig>& metrics);

Json margin_report_to_json(const MarginReport& report);
MarginReport margin_report_from_json(const Json& j);

void to_json(Json& j, const MetricConfig& c);
void from_json(const Json& j, MetricConfig& c);
void to_json(Json& j, const MarginOptions& o);
void from_json(const Json& j, MarginOptions& o);

}  // namespace forge
