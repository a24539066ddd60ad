#include "forge/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "forge/error.hpp"
#include "forge/stats.hpp"

namespace forge {

GapRecord make_gap(std::string variant_id, std::string target_id, double source_accuracy, double target_accuracy) {
  return {std::move(variant_id), std::move(target_id), source_accuracy, target_accuracy,
          source_accuracy - target_accuracy};
}

GapRecord generalization_gap(const DetectorModel& model, const std::string& variant_id,
                             const DomainDataset& source, const DomainDataset& target) {
  const double s = evaluate_accuracy(model, source, Split::kTest);
  const double t = evaluate_accuracy(model, target, Split::kTest);
  return make_gap(variant_id, target.pipeline.pipeline_id, s, t);
}

std::optional<double> find_metric(const VariantEntry& v, double alpha, const std::string& layer_set) {
  for (const auto& [cfg, value] : v.metrics)
    if (cfg.alpha == alpha && cfg.layer_set == layer_set) return value;
  return std::nullopt;
}

PairSet build_pairs(std::span<const VariantEntry> variants, std::span<const std::string> target_ids,
                    std::span<const MetricConfig> metrics) {
  PairSet out;
  std::vector<const VariantEntry*> usable;
  for (const auto& v : variants) {
    if (!v.margin_error.empty()) {
      out.exclusions.push_back(v.variant_id + ": " + v.margin_error);
      continue;
    }
    bool complete = true;
    for (const auto& t : target_ids)
      if (!v.target_accuracy.count(t)) {
        out.exclusions.push_back(v.variant_id + ": no accuracy for target " + t);
        complete = false;
        break;
      }
    if (complete) usable.push_back(&v);
  }
  for (const auto& m : metrics) {
    std::vector<const VariantEntry*> kept;
    std::vector<double> values;
    for (const auto* v : usable) {
      const auto value = find_metric(*v, m.alpha, m.layer_set);
      if (!value) {
        out.exclusions.push_back(v->variant_id + ": no metric alpha=" + format_double(m.alpha) + " layers=" +
                                 m.layer_set);
        continue;
      }
      kept.push_back(v);
      values.push_back(*value);
    }
    if (kept.empty()) continue;
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    const double lo_v = *lo, range = *hi - *lo;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      const double norm = range > 0.0 ? (values[i] - lo_v) / range : 0.5;
      for (const auto& t : target_ids) {
        const auto g = make_gap(kept[i]->variant_id, t, kept[i]->source_accuracy, kept[i]->target_accuracy.at(t));
        out.pairs.push_back(PairRecord{g.variant_id, t, m.alpha, m.layer_set, values[i], norm, g.source_accuracy,
                                       g.target_accuracy, g.gap});
      }
    }
  }
  return out;
}

void CurveOptions::validate() const {
  if (!(step > 0.0 && step <= 1.0)) fail(ErrorKind::kInvalidConfig, "curve step must lie in (0, 1]");
  if (!(window > 0.0)) fail(ErrorKind::kInvalidConfig, "curve window must be positive");
  if (min_count < 1) fail(ErrorKind::kInvalidConfig, "curve min_count must be at least 1");
  if (levels.empty()) fail(ErrorKind::kInvalidConfig, "curve levels must not be empty");
  for (double l : levels)
    if (!(l >= 0.0 && l <= 1.0)) fail(ErrorKind::kInvalidConfig, "curve levels must lie in [0, 1]");
}

int curve_center_count(double step) { return static_cast<int>(std::lround(1.0 / step)) + 1; }

double curve_center(int k, double step) { return k * step; }

QuantileCurve quantile_curve(std::span<const double> x, std::span<const double> y, const CurveOptions& options) {
  options.validate();
  if (x.size() != y.size()) fail(ErrorKind::kInvalidInput, "quantile_curve: length mismatch");
  QuantileCurve c;
  c.step = options.step;
  c.window = options.window;
  c.min_count = options.min_count;
  c.levels = options.levels;
  const int n = curve_center_count(options.step);
  c.values.assign(c.levels.size(), {});
  const double half = options.window / 2.0;
  std::vector<double> in;
  for (int k = 0; k < n; ++k) {
    const double center = curve_center(k, options.step);
    in.clear();
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] >= center - half && x[i] <= center + half) in.push_back(y[i]);
    c.centers.push_back(center);
    c.counts.push_back(static_cast<int>(in.size()));
    const bool populated = static_cast<int>(in.size()) >= options.min_count;
    if (populated) std::sort(in.begin(), in.end());
    for (std::size_t l = 0; l < c.levels.size(); ++l)
      c.values[l].push_back(populated ? std::optional<double>(quantile_sorted(in, c.levels[l])) : std::nullopt);
  }
  return c;
}

QuantileCurve quantile_curve(std::span<const PairRecord> pairs, const CurveOptions& options) {
  std::vector<double> x, y;
  for (const auto& p : pairs) {
    x.push_back(p.metric_normalized);
    y.push_back(p.gap);
  }
  return quantile_curve(x, y, options);
}

QuantileCurve overfitting_curve(std::span<const GapRecord> gaps, const CurveOptions& options) {
  std::vector<double> x, y;
  for (const auto& g : gaps) {
    x.push_back(g.source_accuracy);
    y.push_back(g.gap);
  }
  return quantile_curve(x, y, options);
}

std::vector<RankedVariant> rank_variants(std::span<const VariantEntry> variants, const MetricConfig& metric) {
  std::vector<RankedVariant> out;
  for (const auto& v : variants) {
    if (!v.margin_error.empty()) continue;
    const auto value = find_metric(v, metric.alpha, metric.layer_set);
    if (value) out.push_back({v.variant_id, *value, v.source_accuracy});
  }
  if (out.empty()) fail(ErrorKind::kInvalidInput, "rank_variants: no variant carries the requested metric");
  std::sort(out.begin(), out.end(), [](const RankedVariant& a, const RankedVariant& b) {
    if (a.metric != b.metric) return a.metric > b.metric;
    if (a.source_accuracy != b.source_accuracy) return a.source_accuracy > b.source_accuracy;
    return a.variant_id < b.variant_id;
  });
  return out;
}

double rank_correlation(std::span<const PairRecord> pairs) {
  std::vector<double> m, g;
  for (const auto& p : pairs) {
    m.push_back(p.metric);
    g.push_back(p.gap);
  }
  return spearman(m, g);
}

std::vector<PairRecord> select_pairs(std::span<const PairRecord> pairs, double alpha, const std::string& layer_set) {
  std::vector<PairRecord> out;
  for (const auto& p : pairs)
    if (p.alpha == alpha && p.layer_set == layer_set) out.push_back(p);
  return out;
}

double mean_gap_correlation(std::span<const PairRecord> pairs, double alpha, const std::string& layer_set) {
  std::map<std::string, std::pair<double, std::vector<double>>> per_variant;
  for (const auto& p : select_pairs(pairs, alpha, layer_set)) {
    auto& e = per_variant[p.variant_id];
    e.first = p.metric_normalized;
    e.second.push_back(p.gap);
  }
  std::vector<double> m, g;
  for (const auto& [_, e] : per_variant) {
    m.push_back(e.first);
    double sum = 0.0;
    for (double v : e.second) sum += v;
    g.push_back(sum / static_cast<double>(e.second.size()));
  }
  return spearman(m, g);
}

namespace {
const char* kPairsHeader = "variant_id,target_id,alpha,layer_set,metric,metric_normalized,source_acc,target_acc,gap";
}

std::string pairs_csv(std::span<const PairRecord> pairs) {
  std::ostringstream out;
  out << kPairsHeader << '\n';
  for (const auto& p : pairs)
    out << p.variant_id << ',' << p.target_id << ',' << format_double(p.alpha) << ',' << p.layer_set << ','
        << format_double(p.metric) << ',' << format_double(p.metric_normalized) << ','
        << format_double(p.source_accuracy) << ',' << format_double(p.target_accuracy) << ','
        << format_double(p.gap) << '\n';
  return out.str();
}

std::vector<PairRecord> parse_pairs_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kPairsHeader) fail(ErrorKind::kIo, "pairs.csv: unexpected header");
  std::vector<PairRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 9) fail(ErrorKind::kIo, "pairs.csv: expected 9 fields in '" + line + "'");
    out.push_back(PairRecord{f[0], f[1], std::stod(f[2]), f[3], std::stod(f[4]), std::stod(f[5]), std::stod(f[6]),
                             std::stod(f[7]), std::stod(f[8])});
  }
  return out;
}

Json curve_to_json(const QuantileCurve& c) {
  Json values = Json::object();
  for (std::size_t l = 0; l < c.levels.size(); ++l) {
    Json row = Json::array();
    for (const auto& v : c.values[l]) row.push_back(v ? Json(*v) : Json(nullptr));
    values[format_double(c.levels[l])] = row;
  }
  return Json{{"step", c.step},     {"window", c.window},   {"min_count", c.min_count}, {"levels", c.levels},
              {"centers", c.centers}, {"counts", c.counts}, {"quantiles", values}};
}

QuantileCurve curve_from_json(const Json& j) {
  QuantileCurve c;
  c.step = j.at("step").get<double>();
  c.window = j.at("window").get<double>();
  c.min_count = j.at("min_count").get<int>();
  c.levels = j.at("levels").get<std::vector<double>>();
  c.centers = j.at("centers").get<std::vector<double>>();
  c.counts = j.at("counts").get<std::vector<int>>();
  for (double l : c.levels) {
    std::vector<std::optional<double>> row;
    for (const auto& v : j.at("quantiles").at(format_double(l)))
      row.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    c.values.push_back(std::move(row));
  }
  return c;
}

void to_json(Json& j, const CurveOptions& o) {
  j = Json{{"step", o.step}, {"window", o.window}, {"min_count", o.min_count}, {"levels", o.levels}};
}

void from_json(const Json& j, CurveOptions& o) {
  CurveOptions d;
  o.step = j.value("step", d.step);
  o.window = j.value("window", d.window);
  o.min_count = j.value("min_count", d.min_count);
  o.levels = j.value("levels", d.levels);
  o.validate();
}

}  // namespace forge
