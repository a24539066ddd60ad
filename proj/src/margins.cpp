#include "forge/margins.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "forge/error.hpp"
#include "forge/rng.hpp"
#include "forge/stats.hpp"

namespace forge {

namespace {

constexpr double kGradFloor = 1e-12;
constexpr double kScaleFloor = 1e-12;
constexpr int kMinPositive = 5;

const std::vector<std::string>& all_latents() {
  static const std::vector<std::string> names{kConvRes, "conv2", "conv3", "conv4", "fc1", "fc2", kFc3Input, kFc3};
  return names;
}

}  // namespace

const std::vector<std::string>& default_probed_layers() {
  static const std::vector<std::string> layers{kConvRes, "conv2", "conv3", "conv4", "fc1", kFc3Input};
  return layers;
}

std::vector<std::string> network_order(std::vector<std::string> layers) {
  const auto& order = all_latents();
  auto pos = [&](const std::string& name) {
    const auto it = std::find(order.begin(), order.end(), name);
    if (it == order.end()) fail(ErrorKind::kLookup, "unknown layer '" + name + "'");
    return it - order.begin();
  };
  std::sort(layers.begin(), layers.end(), [&](const auto& a, const auto& b) { return pos(a) < pos(b); });
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

std::map<std::string, std::vector<MarginSample>> first_order_margins(
    const nn::Model<double>& model, const nn::Tensor<double>& batch, std::span<const Label> labels,
    const std::vector<std::string>& layers, std::map<std::string, nn::Tensor<double>>* activations) {
  if (labels.size() != static_cast<std::size_t>(batch.n))
    fail(ErrorKind::kInvalidInput, "first_order_margin: label count does not match batch size");
  if (model.config.num_classes != 2) fail(ErrorKind::kInvalidInput, "first_order_margin: two-class model required");
  const std::set<std::string> wanted(layers.begin(), layers.end());

  nn::Trace<double> trace;
  const auto logits = nn::forward(model, batch, nn::Mode::kEval, &trace, &wanted);

  nn::Tensor<double> dlogits(batch.n, 2, 1, 1);
  std::vector<double> delta(batch.n);
  for (int i = 0; i < batch.n; ++i) {
    const int y = static_cast<int>(labels[i]);
    dlogits.data[2 * i + y] = 1.0;
    dlogits.data[2 * i + 1 - y] = -1.0;
    delta[i] = logits.data[2 * i + y] - logits.data[2 * i + 1 - y];
  }
  std::map<std::string, nn::Tensor<double>> grads;
  nn::backward<double>(model, trace, dlogits, nn::Mode::kEval, nullptr, &grads, &wanted);

  std::map<std::string, std::vector<MarginSample>> out;
  for (const auto& layer : layers) {
    const auto& g = grads.at(layer);
    auto& samples = out[layer];
    for (int i = 0; i < batch.n; ++i) {
      double sq = 0.0;
      for (double v : g.sample(i)) sq += v * v;
      const double norm = std::sqrt(sq);
      if (std::isnan(norm) || std::isnan(delta[i]))
        fail(ErrorKind::kComputation, "NaN in margin computation at layer " + layer);
      MarginSample s{layer, 0.0, 0.0, i, false};
      if (norm == 0.0 && delta[i] != 0.0) {
        s.raw_margin = std::numeric_limits<double>::infinity();
        s.infinite = true;
      } else {
        s.raw_margin = delta[i] / std::max(norm, kGradFloor);
      }
      s.normalized_margin = s.raw_margin;
      samples.push_back(s);
    }
  }
  if (activations) *activations = std::move(trace.captured);
  return out;
}

std::vector<MarginSample> first_order_margin(const nn::Model<double>& model, const nn::Tensor<double>& batch,
                                             std::span<const Label> labels, const std::string& layer) {
  return std::move(first_order_margins(model, batch, labels, {layer}).at(layer));
}

void ScaleAccumulator::add(const nn::Tensor<double>& activations) {
  const std::size_t features = activations.sample_size();
  if (mean_.empty()) {
    mean_.assign(features, 0.0);
    m2_.assign(features, 0.0);
  } else if (mean_.size() != features) {
    fail(ErrorKind::kInvalidInput, "activation feature count changed between batches");
  }
  for (int i = 0; i < activations.n; ++i) {
    ++count_;
    const auto x = activations.sample(i);
    const double inv = 1.0 / static_cast<double>(count_);
    for (std::size_t f = 0; f < features; ++f) {
      const double d = x[f] - mean_[f];
      mean_[f] += d * inv;
      m2_[f] += d * (x[f] - mean_[f]);
    }
  }
}

double ScaleAccumulator::scale(const std::string& layer) const {
  if (count_ < 2)
    fail(ErrorKind::kInvalidInput, "normalizing margins of " + layer + " needs at least 2 samples");
  double total = 0.0;
  for (double m : m2_) total += m;
  const double mean_var = total / static_cast<double>(count_ - 1) / static_cast<double>(m2_.size());
  if (!(mean_var > 0.0)) fail(ErrorKind::kDegenerateScale, "constant activations at layer " + layer);
  return std::max(std::sqrt(mean_var), kScaleFloor);
}

double activation_scale(const nn::Tensor<double>& activations, const std::string& layer) {
  ScaleAccumulator acc;
  acc.add(activations);
  return acc.scale(layer);
}

void apply_scale(std::vector<MarginSample>& samples, double scale) {
  for (auto& s : samples) s.normalized_margin = s.raw_margin / scale;
}

std::vector<MarginSample> normalize_margins(std::vector<MarginSample> samples,
                                            const nn::Tensor<double>& activations) {
  const std::string layer = samples.empty() ? std::string("?") : samples.front().layer;
  apply_scale(samples, activation_scale(activations, layer));
  return samples;
}

const char* to_string(BoundMode m) { return m == BoundMode::kMinMax ? "minmax" : "whisker"; }

BoundMode parse_bound_mode(const std::string& s) {
  if (s == "minmax") return BoundMode::kMinMax;
  if (s == "whisker") return BoundMode::kWhisker;
  fail(ErrorKind::kInvalidConfig, "bounds must be 'minmax' or 'whisker', got '" + s + "'");
}

LayerSummary summarize_layer(std::span<const MarginSample> samples, BoundMode bounds) {
  LayerSummary out;
  std::vector<double> kept;
  for (const auto& s : samples) {
    if (std::isnan(s.normalized_margin)) fail(ErrorKind::kComputation, "NaN margin at layer " + s.layer);
    if (s.infinite || std::isinf(s.normalized_margin))
      ++out.excluded_infinite;
    else if (s.normalized_margin <= 0.0)
      ++out.excluded_negative;
    else
      kept.push_back(s.normalized_margin);
  }
  out.positive_count = static_cast<int>(kept.size());
  if (out.positive_count < kMinPositive) {
    const std::string layer = samples.empty() ? std::string("?") : samples.front().layer;
    fail(ErrorKind::kInsufficientMargins, "layer " + layer + " has " + std::to_string(out.positive_count) +
                                              " positive margins, at least 5 required");
  }
  std::sort(kept.begin(), kept.end());
  const double q1 = quantile_sorted(kept, 0.25);
  const double q3 = quantile_sorted(kept, 0.75);
  double lower = kept.front(), upper = kept.back();
  if (bounds == BoundMode::kWhisker) {
    const double iqr = q3 - q1;
    lower = *std::lower_bound(kept.begin(), kept.end(), q1 - 1.5 * iqr);
    upper = *(std::upper_bound(kept.begin(), kept.end(), q3 + 1.5 * iqr) - 1);
  }
  out.mu = {lower, q1, quantile_sorted(kept, 0.5), q3, upper};
  return out;
}

MarginSummary summarize_margins(const std::map<std::string, std::vector<MarginSample>>& samples, BoundMode bounds) {
  MarginSummary out;
  std::vector<std::string> names;
  for (const auto& [name, _] : samples) names.push_back(name);
  out.layers = network_order(names);
  for (const auto& name : out.layers) out.per_layer[name] = summarize_layer(samples.at(name), bounds);
  return out;
}

std::vector<double> MarginSummary::concatenated() const { return concatenated(layers); }

std::vector<double> MarginSummary::concatenated(const std::vector<std::string>& selected) const {
  std::vector<double> mu;
  for (const auto& name : network_order(selected)) {
    const auto it = per_layer.find(name);
    if (it == per_layer.end()) {
      std::string have;
      for (const auto& l : layers) have += (have.empty() ? "" : ", ") + l;
      fail(ErrorKind::kLookup, "layer '" + name + "' is not in the margin summary (have: " + have + ")");
    }
    mu.insert(mu.end(), it->second.mu.begin(), it->second.mu.end());
  }
  return mu;
}

void MetricConfig::validate() const {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) fail(ErrorKind::kInvalidConfig, "alpha must be positive");
  if (layer_set.empty()) fail(ErrorKind::kInvalidConfig, "layer_set name must not be empty");
}

double margin_metric(std::span<const double> mu, double alpha) {
  if (!(alpha > 0.0)) fail(ErrorKind::kInvalidParameter, "alpha must be positive");
  double m = 0.0;
  for (double v : mu) m += alpha == 1.0 ? v : alpha == 2.0 ? v * v : std::pow(v, alpha);
  return m;
}

double margin_metric(const MarginSummary& summary, const MetricConfig& config) {
  config.validate();
  const auto mu = config.layers.empty() ? summary.concatenated() : summary.concatenated(config.layers);
  return margin_metric(mu, config.alpha);
}

void MarginOptions::validate() const {
  if (layers.empty()) fail(ErrorKind::kInvalidConfig, "margins.layers must not be empty");
  for (const auto& l : layers)
    if (l == kFc3) fail(ErrorKind::kInvalidConfig, "the logits are not a probed latent space");
  network_order(layers);
  if (max_samples < 2) fail(ErrorKind::kInvalidConfig, "margins.max_samples must be at least 2");
  if (batch_size < 1) fail(ErrorKind::kInvalidConfig, "margins.batch_size must be positive");
}

std::vector<std::size_t> margin_sample_indices(const DomainDataset& source, const MarginOptions& options) {
  std::vector<std::size_t> idx = source.split(Split::kTrain);
  if (idx.size() > static_cast<std::size_t>(options.max_samples)) {
    Rng rng(mix_seed(options.rng_seed, 0x3a6e1));
    rng.shuffle(std::span(idx));
    idx.resize(options.max_samples);
  }
  std::sort(idx.begin(), idx.end());
  return idx;
}

MarginReport compute_margin_report(const DetectorModel& model, const DomainDataset& source,
                                   const MarginOptions& options, const std::vector<MetricConfig>& metrics) {
  options.validate();
  const auto layers = network_order(options.layers);
  const auto idx = margin_sample_indices(source, options);
  if (idx.size() < 2) fail(ErrorKind::kEmptyDomain, "source training split has fewer than 2 patches");
  const auto m64 = model.cast<double>();

  std::map<std::string, std::vector<MarginSample>> all;
  std::map<std::string, ScaleAccumulator> acc;
  for (std::size_t start = 0; start < idx.size(); start += options.batch_size) {
    const std::size_t end = std::min(idx.size(), start + options.batch_size);
    const std::span<const std::size_t> chunk(idx.data() + start, end - start);
    const auto batch = nn::make_batch<double>(source.patches, chunk);
    std::vector<Label> labels;
    for (auto i : chunk) labels.push_back(source.patches[i].label);
    std::map<std::string, nn::Tensor<double>> act;
    auto part = first_order_margins(m64, batch, labels, layers, &act);
    for (auto& [name, samples] : part) {
      acc[name].add(act.at(name));
      for (auto& s : samples) {
        s.sample_index = static_cast<int>(chunk[s.sample_index]);
        all[name].push_back(s);
      }
    }
  }

  MarginReport report;
  report.options = options;
  report.evaluated = static_cast<int>(idx.size());
  for (auto& [name, samples] : all) {
    const double scale = acc.at(name).scale(name);
    report.scales[name] = scale;
    apply_scale(samples, scale);
  }
  report.summary = summarize_margins(all, options.bounds);
  for (const auto& m : metrics) report.metrics.emplace_back(m, margin_metric(report.summary, m));
  return report;
}

void to_json(Json& j, const MetricConfig& c) {
  j = Json{{"alpha", c.alpha}, {"layer_set", c.layer_set}};
  if (c.layers.empty())
    j["layers"] = "all";
  else
    j["layers"] = c.layers;
}

void from_json(const Json& j, MetricConfig& c) {
  c.alpha = j.at("alpha").get<double>();
  c.layer_set = j.value("layer_set", std::string("all"));
  c.layers.clear();
  if (j.contains("layers") && !j.at("layers").is_string()) c.layers = j.at("layers").get<std::vector<std::string>>();
  c.validate();
}

void to_json(Json& j, const MarginOptions& o) {
  j = Json{{"layers", o.layers},
           {"max_samples", o.max_samples},
           {"batch_size", o.batch_size},
           {"bounds", to_string(o.bounds)},
           {"rng_seed", o.rng_seed}};
}

void from_json(const Json& j, MarginOptions& o) {
  MarginOptions d;
  o.layers = d.layers;
  if (j.contains("layers")) {
    if (j.at("layers").is_string() && j.at("layers").get<std::string>() == "all")
      o.layers = d.layers;
    else
      o.layers = j.at("layers").get<std::vector<std::string>>();
  }
  o.max_samples = j.value("max_samples", d.max_samples);
  o.batch_size = j.value("batch_size", d.batch_size);
  o.bounds = parse_bound_mode(j.value("bounds", std::string(to_string(d.bounds))));
  o.rng_seed = j.value("rng_seed", d.rng_seed);
  o.validate();
}

Json margin_report_to_json(const MarginReport& r) {
  Json layers = Json::array();
  for (const auto& name : r.summary.layers) {
    const auto& s = r.summary.per_layer.at(name);
    layers.push_back({{"name", name},
                      {"scale", r.scales.at(name)},
                      {"mu", s.mu},
                      {"positive_count", s.positive_count},
                      {"excluded_negative", s.excluded_negative},
                      {"excluded_infinite", s.excluded_infinite}});
  }
  Json metrics = Json::array();
  for (const auto& [cfg, value] : r.metrics) {
    Json m = cfg;
    m["value"] = value;
    metrics.push_back(m);
  }
  return Json{{"variant_id", r.variant_id}, {"options", r.options}, {"evaluated", r.evaluated},
              {"layers", layers},          {"metrics", metrics}};
}

MarginReport margin_report_from_json(const Json& j) {
  MarginReport r;
  r.variant_id = j.at("variant_id").get<std::string>();
  r.options = j.at("options").get<MarginOptions>();
  r.evaluated = j.at("evaluated").get<int>();
  for (const auto& l : j.at("layers")) {
    const auto name = l.at("name").get<std::string>();
    r.summary.layers.push_back(name);
    r.scales[name] = l.at("scale").get<double>();
    LayerSummary s;
    s.mu = l.at("mu").get<std::array<double, 5>>();
    s.positive_count = l.at("positive_count").get<int>();
    s.excluded_negative = l.at("excluded_negative").get<int>();
    s.excluded_infinite = l.at("excluded_infinite").get<int>();
    r.summary.per_layer[name] = s;
  }
  for (const auto& m : j.at("metrics")) r.metrics.emplace_back(m.get<MetricConfig>(), m.at("value").get<double>());
  return r;
}

}  // namespace forge
