#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "forge/data.hpp"
#include "forge/error.hpp"
#include "forge/nn/layers.hpp"
#include "forge/nn/tensor.hpp"
#include "forge/rng.hpp"

namespace forge {

enum class Pooling { kMax, kAverage };
enum class Normalization { kNone, kBatchNorm };

const char* to_string(Pooling p);
const char* to_string(Normalization n);
Pooling parse_pooling(const std::string& s);
Normalization parse_normalization(const std::string& s);

struct DetectorConfig {
  Pooling pooling = Pooling::kMax;
  Normalization normalization = Normalization::kNone;
  double dropout_rate = 0.0;
  double width_scale = 0.5;
  int constrained_kernel = 5;
  int constrained_filters = 3;
  int num_classes = 2;
  int input_size = 128;
  // Pixels in [0,1] are multiplied by this before ConvRes (8-bit intensity range).
  double input_scale = 255.0;
  std::uint64_t rng_seed = 22;

  void validate() const;

  friend bool operator==(const DetectorConfig&, const DetectorConfig&) = default;
};

// Channel / unit counts of the layers after ConvRes.
struct LayerDims {
  int conv2 = 16;
  int conv3 = 32;
  int conv4 = 32;
  int fc1 = 128;
  int fc2 = 128;
};

// Widths at width_scale = 1; each is scaled and rounded, minimum 1.
inline constexpr LayerDims kBaseDims{};

LayerDims layer_dims(const DetectorConfig& config);

inline const std::string kConvRes = "ConvRes";
inline const std::string kFc3 = "fc3";
inline const std::string kFc3Input = "fc3-input";

// Sets every kernel's center to -1 and rescales its off-center taps to sum
// to 1; near-zero off-center sums fall back to an additive shift. Kernels
// already within rounding of the constraint are left untouched so the
// projection is idempotent.
// Largest |sum - 1| left by rounding after a projection: one rounding of each
// stored tap plus the double accumulation of the sum.
template <typename T>
double constraint_tolerance(double off_count, double magnitude) {
  const double unit = std::numeric_limits<T>::epsilon() + off_count * std::numeric_limits<double>::epsilon();
  return unit * std::max(1.0, magnitude);
}

template <typename T>
void project_constrained_weights(std::span<T> weights, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) fail(ErrorKind::kInvalidParameter, "projection: kernel must be odd");
  const std::size_t taps = static_cast<std::size_t>(kernel) * kernel;
  const std::size_t center = taps / 2;
  const double off_count = static_cast<double>(taps - 1);
  for (std::size_t base = 0; base + taps <= weights.size(); base += taps) {
    std::span<T> filter = weights.subspan(base, taps);
    double sum = 0.0, magnitude = 0.0;
    for (std::size_t i = 0; i < taps; ++i)
      if (i != center) {
        sum += filter[i];
        magnitude += std::abs(static_cast<double>(filter[i]));
      }
    const double tol = constraint_tolerance<T>(off_count, magnitude);
    if (std::abs(sum - 1.0) > tol) {
      if (std::abs(sum) > 1e-12) {
        for (std::size_t i = 0; i < taps; ++i)
          if (i != center) filter[i] = static_cast<T>(filter[i] / sum);
      } else {
        const double shift = (1.0 - sum) / off_count;
        for (std::size_t i = 0; i < taps; ++i)
          if (i != center) filter[i] = static_cast<T>(filter[i] + shift);
      }
    }
    filter[center] = T(-1);
  }
}

namespace nn {

template <typename T>
struct Block {
  std::string name;
  std::vector<Layer<T>> layers;
};

template <typename T>
using LayerGrads = std::vector<std::vector<T>>;

// Parameter gradients indexed [block][layer][param], aligned with trainable().
template <typename T>
using Gradients = std::vector<std::vector<LayerGrads<T>>>;

template <typename T>
struct Trace {
  std::vector<std::vector<LayerCache<T>>> caches;
  std::map<std::string, Tensor<T>> captured;
};

template <typename T>
struct Model {
  DetectorConfig config;
  std::vector<Block<T>> blocks;

  const Block<T>& block(const std::string& name) const {
    for (const auto& b : blocks)
      if (b.name == name) return b;
    fail(ErrorKind::kLookup, "no block named '" + name + "'");
  }
  Block<T>& block(const std::string& name) {
    return const_cast<Block<T>&>(static_cast<const Model&>(*this).block(name));
  }

  Conv2d<T>& constrained_layer() { return std::get<Conv2d<T>>(blocks.front().layers.front()); }
  const Conv2d<T>& constrained_layer() const { return std::get<Conv2d<T>>(blocks.front().layers.front()); }

  Linear<T>& output_layer() { return std::get<Linear<T>>(blocks.back().layers.back()); }
  const Linear<T>& output_layer() const { return std::get<Linear<T>>(blocks.back().layers.back()); }

  // Every capturable representation in network order.
  std::vector<std::string> latent_names() const {
    std::vector<std::string> names;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (b + 1 == blocks.size()) names.push_back(kFc3Input);
      names.push_back(blocks[b].name);
    }
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t count = 0;
    for (const auto& b : blocks)
      for (const auto& l : b.layers)
        for (const auto* p : trainable(l)) count += p->size();
    return count;
  }

  Gradients<T> zero_gradients() const {
    Gradients<T> g(blocks.size());
    for (std::size_t b = 0; b < blocks.size(); ++b)
      for (const auto& l : blocks[b].layers) {
        LayerGrads<T> lg;
        for (const auto* p : trainable(l)) lg.emplace_back(p->size(), T(0));
        g[b].push_back(std::move(lg));
      }
    return g;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out;
    out.config = config;
    auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
    for (const auto& b : blocks) {
      Block<U> nb{b.name, {}};
      for (const auto& l : b.layers) {
        std::visit(
            [&](const auto& layer) {
              using L = std::decay_t<decltype(layer)>;
              if constexpr (std::is_same_v<L, Conv2d<T>>) {
                nb.layers.push_back(Conv2d<U>{layer.in_channels, layer.out_channels, layer.kernel, layer.stride,
                                              layer.pad, layer.pad_mode, conv(layer.weight), conv(layer.bias)});
              } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
                nb.layers.push_back(BatchNorm<U>{layer.channels, conv(layer.gamma), conv(layer.beta),
                                                 conv(layer.running_mean), conv(layer.running_var), layer.eps,
                                                 layer.momentum});
              } else if constexpr (std::is_same_v<L, Linear<T>>) {
                nb.layers.push_back(
                    Linear<U>{layer.in_features, layer.out_features, conv(layer.weight), conv(layer.bias)});
              } else {
                nb.layers.push_back(layer);
              }
            },
            l);
      }
      out.blocks.push_back(std::move(nb));
    }
    return out;
  }
};

namespace detail {

inline void fill_uniform(std::vector<double>& v, Rng& rng, double bound) {
  for (double& x : v) x = rng.uniform(-bound, bound);
}

// Default fan-in initialization of common frameworks: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
// for weights and biases.
inline Conv2d<double> make_conv(Rng& rng, int in, int out, int k, int stride, int pad, PadMode mode, bool bias) {
  Conv2d<double> c{in, out, k, stride, pad, mode, std::vector<double>(static_cast<std::size_t>(out) * in * k * k), {}};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in * k * k));
  fill_uniform(c.weight, rng, bound);
  if (bias) {
    c.bias.resize(out);
    fill_uniform(c.bias, rng, bound);
  }
  return c;
}

inline Linear<double> make_linear(Rng& rng, int in, int out) {
  Linear<double> l{in, out, std::vector<double>(static_cast<std::size_t>(out) * in), std::vector<double>(out)};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  fill_uniform(l.weight, rng, bound);
  fill_uniform(l.bias, rng, bound);
  return l;
}

inline BatchNorm<double> make_bn(int channels) {
  return BatchNorm<double>{channels, std::vector<double>(channels, 1.0), std::vector<double>(channels, 0.0),
                           std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
}

}  // namespace detail

template <typename T = float>
Model<T> build_detector(const DetectorConfig& config) {
  config.validate();
  const LayerDims dims = layer_dims(config);
  Rng rng(mix_seed(config.rng_seed, 0xde7ec7));
  const PoolKind pool = config.pooling == Pooling::kMax ? PoolKind::kMax : PoolKind::kAverage;
  const bool bn = config.normalization == Normalization::kBatchNorm;
  const int k = config.constrained_kernel;

  Model<double> m;
  m.config = config;

  auto conv_res = detail::make_conv(rng, 1, config.constrained_filters, k, 1, k / 2, PadMode::kReplicate, false);
  project_constrained_weights(std::span(conv_res.weight), k);
  m.blocks.push_back({kConvRes, {conv_res}});

  auto conv_block = [&](const std::string& name, int in, int out, int kernel, int stride) {
    Block<double> b{name, {}};
    b.layers.push_back(detail::make_conv(rng, in, out, kernel, stride, kernel / 2, PadMode::kZero, true));
    if (bn) b.layers.push_back(detail::make_bn(out));
    b.layers.push_back(Relu{});
    b.layers.push_back(Pool{pool, 2});
    m.blocks.push_back(std::move(b));
  };
  conv_block("conv2", config.constrained_filters, dims.conv2, 5, 2);
  conv_block("conv3", dims.conv2, dims.conv3, 3, 1);
  conv_block("conv4", dims.conv3, dims.conv4, 1, 1);

  const int spatial = config.input_size / 16;
  auto fc_block = [&](const std::string& name, int in, int out, bool relu) {
    Block<double> b{name, {}};
    if (config.dropout_rate > 0.0) b.layers.push_back(Dropout{config.dropout_rate});
    b.layers.push_back(detail::make_linear(rng, in, out));
    if (relu) b.layers.push_back(Relu{});
    m.blocks.push_back(std::move(b));
  };
  fc_block("fc1", dims.conv4 * spatial * spatial, dims.fc1, true);
  fc_block("fc2", dims.fc1, dims.fc2, true);
  fc_block(kFc3, dims.fc2, config.num_classes, false);

  if constexpr (std::is_same_v<T, double>)
    return m;
  else
    return m.template cast<T>();
}

template <typename T>
void project_constrained(Model<T>& model) {
  auto& conv = model.constrained_layer();
  project_constrained_weights(std::span(conv.weight), conv.kernel);
}

template <typename T>
Tensor<T> make_batch(std::span<const LabeledPatch> patches, std::span<const std::size_t> indices) {
  if (indices.empty()) return Tensor<T>(0, 1, 0, 0);
  const int size = patches[indices.front()].size;
  Tensor<T> x(static_cast<int>(indices.size()), 1, size, size);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& p = patches[indices[i]].pixels;
    std::copy(p.begin(), p.end(), x.data.begin() + static_cast<long>(i * x.sample_size()));
  }
  return x;
}

/// Runs the network. In train mode BatchNorm uses batch statistics (and
/// updates `stats_sink`'s running statistics when given) and Dropout draws
/// from `rng`. Requested latent names are copied into trace->captured.
template <typename T>
Tensor<T> forward(const Model<T>& model, const Tensor<T>& x, Mode mode, Trace<T>* trace = nullptr,
                  const std::set<std::string>* capture = nullptr, Rng* rng = nullptr,
                  Model<T>* stats_sink = nullptr) {
  const int size = model.config.input_size;
  if (x.c != 1 || x.h != size || x.w != size)
    fail(ErrorKind::kInvalidInput, "forward: expected N x 1 x " + std::to_string(size) + " x " +
                                       std::to_string(size) + " input");
  if (capture) {
    const auto names = model.latent_names();
    for (const auto& name : *capture)
      if (std::find(names.begin(), names.end(), name) == names.end()) {
        std::string valid;
        for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
        fail(ErrorKind::kLookup, "unknown layer '" + name + "'; valid layers: " + valid);
      }
  }
  if (trace) {
    trace->caches.assign(model.blocks.size(), {});
    trace->captured.clear();
  }
  auto wants = [&](const std::string& name) { return capture && capture->count(name); };

  Tensor<T> h = x;
  if (model.config.input_scale != 1.0)
    for (T& v : h.data) v *= static_cast<T>(model.config.input_scale);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const auto& block = model.blocks[b];
    if (trace) trace->caches[b].resize(block.layers.size());
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      if (b + 1 == model.blocks.size() && l + 1 == block.layers.size() && wants(kFc3Input) && trace)
        trace->captured[kFc3Input] = h;
      LayerCache<T>* cache = trace ? &trace->caches[b][l] : nullptr;
      h = std::visit(
          [&](const auto& layer) -> Tensor<T> {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, BatchNorm<T>>) {
              BatchNorm<T>* sink = stats_sink ? &std::get<BatchNorm<T>>(stats_sink->blocks[b].layers[l]) : nullptr;
              return nn::forward(layer, h, mode, cache, sink);
            } else if constexpr (std::is_same_v<L, Dropout>) {
              return nn::forward(layer, h, mode, cache, rng);
            } else {
              return nn::forward(layer, h, cache);
            }
          },
          block.layers[l]);
    }
    if (wants(block.name) && trace) trace->captured[block.name] = h;
  }
  return h;
}

/// Backpropagates `dlogits` through a traced forward pass. Parameter
/// gradients are accumulated into `grads` when given. Gradients with respect
/// to the latent names in `wanted` are stored in `latent_grads`; without
/// `grads` the pass stops once all of them are collected.
template <typename T>
void backward(const Model<T>& model, const Trace<T>& trace, const Tensor<T>& dlogits, Mode mode,
              Gradients<T>* grads, std::map<std::string, Tensor<T>>* latent_grads = nullptr,
              const std::set<std::string>* wanted = nullptr) {
  std::size_t remaining = wanted ? wanted->size() : 0;
  auto record = [&](const std::string& name, const Tensor<T>& g) {
    if (wanted && latent_grads && wanted->count(name)) {
      (*latent_grads)[name] = g;
      --remaining;
    }
  };
  Tensor<T> g = dlogits;
  for (std::size_t bi = model.blocks.size(); bi-- > 0;) {
    const auto& block = model.blocks[bi];
    record(block.name, g);
    if (!grads && remaining == 0) return;
    for (std::size_t li = block.layers.size(); li-- > 0;) {
      const bool first_layer = bi == 0 && li == 0;
      const auto& cache = trace.caches[bi][li];
      LayerGrads<T>* lg = grads ? &(*grads)[bi][li] : nullptr;
      g = std::visit(
          [&](const auto& layer) -> Tensor<T> {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, Conv2d<T>> || std::is_same_v<L, Linear<T>>)
              return nn::backward(layer, g, cache, lg, !first_layer);
            else if constexpr (std::is_same_v<L, BatchNorm<T>>)
              return nn::backward(layer, g, cache, mode, lg);
            else
              return nn::backward(layer, g, cache);
          },
          block.layers[li]);
      if (bi + 1 == model.blocks.size() && li + 1 == block.layers.size()) {
        record(kFc3Input, g);
        if (!grads && remaining == 0) return;
      }
    }
  }
}

template <typename T>
Tensor<T> forward_logits(const Model<T>& model, const Tensor<T>& batch) {
  return forward(model, batch, Mode::kEval);
}

template <typename T>
std::map<std::string, Tensor<T>> latent_activations(const Model<T>& model, const Tensor<T>& batch,
                                                    const std::vector<std::string>& layer_names) {
  const std::set<std::string> wanted(layer_names.begin(), layer_names.end());
  Trace<T> trace;
  forward(model, batch, Mode::kEval, &trace, &wanted);
  return std::move(trace.captured);
}

template <typename T>
Label predicted_label(const Tensor<T>& logits, int i) {
  return logits.data[static_cast<std::size_t>(i) * 2 + 1] > logits.data[static_cast<std::size_t>(i) * 2]
             ? Label::kForged
             : Label::kAuthentic;
}

}  // namespace nn

using DetectorModel = nn::Model<float>;

}  // namespace forge
