#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "forge/data.hpp"
#include "forge/json_io.hpp"
#include "forge/margins.hpp"
#include "forge/training.hpp"

namespace forge {

struct GapRecord {
  std::string variant_id;
  std::string target_pipeline_id;
  double source_accuracy = 0.0;
  double target_accuracy = 0.0;
  double gap = 0.0;
};

GapRecord make_gap(std::string variant_id, std::string target_id, double source_accuracy, double target_accuracy);

/// Source-test accuracy minus target-test accuracy, both in eval mode.
GapRecord generalization_gap(const DetectorModel& model, const std::string& variant_id,
                             const DomainDataset& source, const DomainDataset& target);

struct PairRecord {
  std::string variant_id;
  std::string target_id;
  double alpha = 0.0;
  std::string layer_set;
  double metric = 0.0;
  double metric_normalized = 0.0;
  double source_accuracy = 0.0;
  double target_accuracy = 0.0;
  double gap = 0.0;
};

// Everything known about one variant after margins and gap evaluation.
struct VariantEntry {
  std::string variant_id;
  double source_accuracy = 0.0;
  std::vector<std::pair<MetricConfig, double>> metrics;
  std::map<std::string, double> target_accuracy;  // by target id
  std::string margin_error;                        // non-empty when margins failed
};

std::optional<double> find_metric(const VariantEntry& v, double alpha, const std::string& layer_set);

struct PairSet {
  std::vector<PairRecord> pairs;
  std::vector<std::string> exclusions;  // "<variant_id>: <reason>"
};

/// One record per (metric config, variant, target), in that nesting order.
/// Metric values are min-max normalized across the variants of each metric
/// config; a constant metric normalizes to 0.5.
PairSet build_pairs(std::span<const VariantEntry> variants, std::span<const std::string> target_ids,
                    std::span<const MetricConfig> metrics);

struct CurveOptions {
  double step = 0.01;
  double window = 0.1;
  int min_count = 5;
  std::vector<double> levels{0.25, 0.5, 0.75, 0.9};

  void validate() const;
};

struct QuantileCurve {
  double step = 0.0;
  double window = 0.0;
  int min_count = 0;
  std::vector<double> levels;
  std::vector<double> centers;
  std::vector<int> counts;
  // values[level][center]; empty where the window holds fewer than min_count points.
  std::vector<std::vector<std::optional<double>>> values;
};

double curve_center(int k, double step);
int curve_center_count(double step);

/// Quantiles of y over points whose x lies in [c - window/2, c + window/2],
/// for c = 0, step, ..., 1.
QuantileCurve quantile_curve(std::span<const double> x, std::span<const double> y, const CurveOptions& options = {});
QuantileCurve quantile_curve(std::span<const PairRecord> pairs, const CurveOptions& options = {});

// Gap quantiles over source accuracy, from every variant.
QuantileCurve overfitting_curve(std::span<const GapRecord> gaps, const CurveOptions& options = {});

struct RankedVariant {
  std::string variant_id;
  double metric = 0.0;
  double source_accuracy = 0.0;
};

/// Sorted by metric descending, then source accuracy descending, then id.
std::vector<RankedVariant> rank_variants(std::span<const VariantEntry> variants, const MetricConfig& metric);

// Spearman correlation between metric and gap over the pairs.
double rank_correlation(std::span<const PairRecord> pairs);

// Spearman correlation between the normalized metric and each variant's mean
// gap over targets, for one (alpha, layer_set).
double mean_gap_correlation(std::span<const PairRecord> pairs, double alpha, const std::string& layer_set);

std::vector<PairRecord> select_pairs(std::span<const PairRecord> pairs, double alpha, const std::string& layer_set);

std::string pairs_csv(std::span<const PairRecord> pairs);
std::vector<PairRecord> parse_pairs_csv(const std::string& text);
Json curve_to_json(const QuantileCurve& curve);
QuantileCurve curve_from_json(const Json& j);

void to_json(Json& j, const CurveOptions& o);
void from_json(const Json& j, CurveOptions& o);

}  // namespace forge
