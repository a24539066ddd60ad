#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "forge/error.hpp"
#include "forge/nn/tensor.hpp"
#include "forge/rng.hpp"

namespace forge::nn {

enum class Mode { kTrain, kEval };
enum class PadMode { kZero, kReplicate };
enum class PoolKind { kMax, kAverage };

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct Conv2d {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int stride = 1;
  int pad = 0;
  PadMode pad_mode = PadMode::kZero;
  std::vector<T> weight;  // out x in x k x k
  std::vector<T> bias;    // empty when the layer has no bias

  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }
  int patch_len() const { return in_channels * kernel * kernel; }
};

template <typename T>
struct BatchNorm {
  int channels = 0;
  std::vector<T> gamma, beta, running_mean, running_var;
  double eps = 1e-5;
  double momentum = 0.1;
};

struct Relu {};

struct Pool {
  PoolKind kind = PoolKind::kMax;
  int size = 2;
};

struct Dropout {
  double rate = 0.0;
};

template <typename T>
struct Linear {
  int in_features = 0;
  int out_features = 0;
  std::vector<T> weight;  // out x in, row-major
  std::vector<T> bias;
};

template <typename T>
using Layer = std::variant<Conv2d<T>, BatchNorm<T>, Relu, Pool, Dropout, Linear<T>>;

// Per-call state saved by forward for backward. Never stored in a model.
template <typename T>
struct LayerCache {
  Tensor<T> input;
  std::vector<int> argmax;
  std::vector<T> mask;
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

// Trainable parameter arrays in a fixed order per layer kind.
template <typename T>
std::vector<std::vector<T>*> trainable(Layer<T>& layer) {
  return std::visit(
      [](auto& l) -> std::vector<std::vector<T>*> {
        using L = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<L, Conv2d<T>> || std::is_same_v<L, Linear<T>>) {
          if (l.bias.empty()) return {&l.weight};
          return {&l.weight, &l.bias};
        } else if constexpr (std::is_same_v<L, BatchNorm<T>>) {
          return {&l.gamma, &l.beta};
        } else {
          return {};
        }
      },
      layer);
}

template <typename T>
std::vector<const std::vector<T>*> trainable(const Layer<T>& layer) {
  const auto params = trainable(const_cast<Layer<T>&>(layer));
  return {params.begin(), params.end()};
}

// ---------------------------------------------------------------------------
// Convolution

namespace detail {

template <typename T>
void im2col(const Conv2d<T>& conv, std::span<const T> x, int h, int w, int ho, int wo, std::vector<T>& col) {
  const int k = conv.kernel;
  const std::size_t cols = static_cast<std::size_t>(ho) * wo;
  col.assign(static_cast<std::size_t>(conv.patch_len()) * cols, T(0));
  for (int c = 0; c < conv.in_channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * cols;
        const T* plane = x.data() + static_cast<std::size_t>(c) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * conv.stride - conv.pad + ky;
          if (conv.pad_mode == PadMode::kReplicate) iy = std::clamp(iy, 0, h - 1);
          else if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * conv.stride - conv.pad + kx;
            if (conv.pad_mode == PadMode::kReplicate) ix = std::clamp(ix, 0, w - 1);
            else if (ix < 0 || ix >= w) continue;
            row[static_cast<std::size_t>(oy) * wo + ox] = plane[static_cast<std::size_t>(iy) * w + ix];
          }
        }
      }
}

template <typename T>
void col2im(const Conv2d<T>& conv, const std::vector<T>& col, int h, int w, int ho, int wo, std::span<T> dx) {
  const int k = conv.kernel;
  const std::size_t cols = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < conv.in_channels; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col.data() + ((static_cast<std::size_t>(c) * k + ky) * k + kx) * cols;
        T* plane = dx.data() + static_cast<std::size_t>(c) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * conv.stride - conv.pad + ky;
          if (conv.pad_mode == PadMode::kReplicate) iy = std::clamp(iy, 0, h - 1);
          else if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * conv.stride - conv.pad + kx;
            if (conv.pad_mode == PadMode::kReplicate) ix = std::clamp(ix, 0, w - 1);
            else if (ix < 0 || ix >= w) continue;
            plane[static_cast<std::size_t>(iy) * w + ix] += row[static_cast<std::size_t>(oy) * wo + ox];
          }
        }
      }
}

}  // namespace detail

template <typename T>
Tensor<T> forward(const Conv2d<T>& conv, const Tensor<T>& x, LayerCache<T>* cache) {
  if (x.c != conv.in_channels) fail(ErrorKind::kInvalidInput, "conv: channel mismatch");
  const int ho = conv.out_size(x.h), wo = conv.out_size(x.w);
  Tensor<T> y(x.n, conv.out_channels, ho, wo);
  const int cols = ho * wo;
  Eigen::Map<const RowMatrix<T>> wm(conv.weight.data(), conv.out_channels, conv.patch_len());
  std::vector<T> col;
  for (int i = 0; i < x.n; ++i) {
    detail::im2col(conv, x.sample(i), x.h, x.w, ho, wo, col);
    Eigen::Map<const RowMatrix<T>> cm(col.data(), conv.patch_len(), cols);
    Eigen::Map<RowMatrix<T>> ym(y.sample(i).data(), conv.out_channels, cols);
    ym.noalias() = wm * cm;
    if (!conv.bias.empty())
      for (int f = 0; f < conv.out_channels; ++f) ym.row(f).array() += conv.bias[f];
  }
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> backward(const Conv2d<T>& conv, const Tensor<T>& dy, const LayerCache<T>& cache,
                   std::vector<std::vector<T>>* grads, bool need_input_grad) {
  const Tensor<T>& x = cache.input;
  const int ho = dy.h, wo = dy.w, cols = ho * wo;
  Tensor<T> dx;
  if (need_input_grad) dx = Tensor<T>(x.n, x.c, x.h, x.w);
  Eigen::Map<const RowMatrix<T>> wm(conv.weight.data(), conv.out_channels, conv.patch_len());
  std::vector<T> col, dcol;
  for (int i = 0; i < x.n; ++i) {
    Eigen::Map<const RowMatrix<T>> dym(dy.sample(i).data(), conv.out_channels, cols);
    if (grads) {
      detail::im2col(conv, x.sample(i), x.h, x.w, ho, wo, col);
      Eigen::Map<const RowMatrix<T>> cm(col.data(), conv.patch_len(), cols);
      Eigen::Map<RowMatrix<T>> dw((*grads)[0].data(), conv.out_channels, conv.patch_len());
      dw.noalias() += dym * cm.transpose();
      if (!conv.bias.empty())
        for (int f = 0; f < conv.out_channels; ++f) (*grads)[1][f] += dym.row(f).sum();
    }
    if (need_input_grad) {
      dcol.resize(static_cast<std::size_t>(conv.patch_len()) * cols);
      Eigen::Map<RowMatrix<T>> dcm(dcol.data(), conv.patch_len(), cols);
      dcm.noalias() = wm.transpose() * dym;
      detail::col2im(conv, dcol, x.h, x.w, ho, wo, dx.sample(i));
    }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Batch normalization over (N, H, W) per channel.

template <typename T>
Tensor<T> forward(const BatchNorm<T>& bn, const Tensor<T>& x, Mode mode, LayerCache<T>* cache,
                  BatchNorm<T>* stats_sink) {
  Tensor<T> y(x.n, x.c, x.h, x.w);
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  const double count = static_cast<double>(x.n) * plane;
  if (cache) {
    cache->xhat.assign(x.size(), T(0));
    cache->inv_std.assign(x.c, T(0));
  }
  for (int c = 0; c < x.c; ++c) {
    double mean, var;
    if (mode == Mode::kTrain) {
      double s = 0.0;
      for (int i = 0; i < x.n; ++i)
        for (std::size_t p = 0; p < plane; ++p) s += x.data[(static_cast<std::size_t>(i) * x.c + c) * plane + p];
      mean = s / count;
      double ss = 0.0;
      for (int i = 0; i < x.n; ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = x.data[(static_cast<std::size_t>(i) * x.c + c) * plane + p] - mean;
          ss += d * d;
        }
      var = ss / count;
      if (stats_sink) {
        const double unbiased = count > 1 ? ss / (count - 1) : var;
        stats_sink->running_mean[c] = static_cast<T>((1 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean);
        stats_sink->running_var[c] = static_cast<T>((1 - bn.momentum) * bn.running_var[c] + bn.momentum * unbiased);
      }
    } else {
      mean = bn.running_mean[c];
      var = bn.running_var[c];
    }
    const T inv = static_cast<T>(1.0 / std::sqrt(var + bn.eps));
    const T m = static_cast<T>(mean);
    if (cache) cache->inv_std[c] = inv;
    for (int i = 0; i < x.n; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (static_cast<std::size_t>(i) * x.c + c) * plane + p;
        const T xh = (x.data[idx] - m) * inv;
        if (cache) cache->xhat[idx] = xh;
        y.data[idx] = bn.gamma[c] * xh + bn.beta[c];
      }
  }
  return y;
}

template <typename T>
Tensor<T> backward(const BatchNorm<T>& bn, const Tensor<T>& dy, const LayerCache<T>& cache, Mode mode,
                   std::vector<std::vector<T>>* grads) {
  Tensor<T> dx(dy.n, dy.c, dy.h, dy.w);
  const std::size_t plane = static_cast<std::size_t>(dy.h) * dy.w;
  const double count = static_cast<double>(dy.n) * plane;
  for (int c = 0; c < dy.c; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int i = 0; i < dy.n; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (static_cast<std::size_t>(i) * dy.c + c) * plane + p;
        sum_dy += dy.data[idx];
        sum_dy_xhat += static_cast<double>(dy.data[idx]) * cache.xhat[idx];
      }
    if (grads) {
      (*grads)[0][c] += static_cast<T>(sum_dy_xhat);
      (*grads)[1][c] += static_cast<T>(sum_dy);
    }
    const double scale = static_cast<double>(bn.gamma[c]) * cache.inv_std[c];
    for (int i = 0; i < dy.n; ++i)
      for (std::size_t p = 0; p < plane; ++p) {
        const std::size_t idx = (static_cast<std::size_t>(i) * dy.c + c) * plane + p;
        if (mode == Mode::kTrain)
          dx.data[idx] = static_cast<T>(scale * (dy.data[idx] - sum_dy / count - cache.xhat[idx] * sum_dy_xhat / count));
        else
          dx.data[idx] = static_cast<T>(scale * dy.data[idx]);
      }
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Elementwise and pooling

template <typename T>
Tensor<T> forward(const Relu&, const Tensor<T>& x, LayerCache<T>* cache) {
  Tensor<T> y = x;
  for (T& v : y.data) v = v > T(0) ? v : T(0);
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> backward(const Relu&, const Tensor<T>& dy, const LayerCache<T>& cache) {
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(cache.input.data[i] > T(0))) dx.data[i] = T(0);
  return dx;
}

template <typename T>
Tensor<T> forward(const Pool& pool, const Tensor<T>& x, LayerCache<T>* cache) {
  const int s = pool.size;
  const int ho = x.h / s, wo = x.w / s;
  Tensor<T> y(x.n, x.c, ho, wo);
  if (cache) {
    cache->input = Tensor<T>();  // shape only
    cache->input.n = x.n, cache->input.c = x.c, cache->input.h = x.h, cache->input.w = x.w;
    if (pool.kind == PoolKind::kMax) cache->argmax.assign(y.size(), 0);
  }
  const T inv_area = T(1) / static_cast<T>(s * s);
  std::size_t out = 0;
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c)
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++out) {
          if (pool.kind == PoolKind::kMax) {
            int best = -1;
            T best_v = T(0);
            for (int dy = 0; dy < s; ++dy)
              for (int dx = 0; dx < s; ++dx) {
                const int idx = ((n * x.c + c) * x.h + oy * s + dy) * x.w + ox * s + dx;
                if (best < 0 || x.data[idx] > best_v) {
                  best = idx;
                  best_v = x.data[idx];
                }
              }
            y.data[out] = best_v;
            if (cache) cache->argmax[out] = best;
          } else {
            T sum = T(0);
            for (int dy = 0; dy < s; ++dy)
              for (int dx = 0; dx < s; ++dx) sum += x.at(n, c, oy * s + dy, ox * s + dx);
            y.data[out] = sum * inv_area;
          }
        }
  return y;
}

template <typename T>
Tensor<T> backward(const Pool& pool, const Tensor<T>& dy, const LayerCache<T>& cache) {
  const Tensor<T>& shape = cache.input;
  Tensor<T> dx(shape.n, shape.c, shape.h, shape.w);
  const int s = pool.size;
  if (pool.kind == PoolKind::kMax) {
    for (std::size_t i = 0; i < dy.size(); ++i) dx.data[cache.argmax[i]] += dy.data[i];
    return dx;
  }
  const T inv_area = T(1) / static_cast<T>(s * s);
  std::size_t out = 0;
  for (int n = 0; n < dy.n; ++n)
    for (int c = 0; c < dy.c; ++c)
      for (int oy = 0; oy < dy.h; ++oy)
        for (int ox = 0; ox < dy.w; ++ox, ++out)
          for (int ddy = 0; ddy < s; ++ddy)
            for (int ddx = 0; ddx < s; ++ddx) dx.at(n, c, oy * s + ddy, ox * s + ddx) += dy.data[out] * inv_area;
  return dx;
}

template <typename T>
Tensor<T> forward(const Dropout& drop, const Tensor<T>& x, Mode mode, LayerCache<T>* cache, Rng* rng) {
  if (mode == Mode::kEval || drop.rate <= 0.0) {
    if (cache) cache->mask.clear();
    return x;
  }
  if (!rng) fail(ErrorKind::kInvalidInput, "dropout: training forward needs an rng");
  Tensor<T> y = x;
  std::vector<T> mask(x.size());
  const T keep_scale = static_cast<T>(1.0 / (1.0 - drop.rate));
  for (std::size_t i = 0; i < y.size(); ++i) {
    mask[i] = rng->uniform() < drop.rate ? T(0) : keep_scale;
    y.data[i] *= mask[i];
  }
  if (cache) cache->mask = std::move(mask);
  return y;
}

template <typename T>
Tensor<T> backward(const Dropout&, const Tensor<T>& dy, const LayerCache<T>& cache) {
  if (cache.mask.empty()) return dy;
  Tensor<T> dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i) dx.data[i] *= cache.mask[i];
  return dx;
}

// ---------------------------------------------------------------------------
// Fully connected; any input shape is flattened per sample.

template <typename T>
Tensor<T> forward(const Linear<T>& fc, const Tensor<T>& x, LayerCache<T>* cache) {
  if (static_cast<int>(x.sample_size()) != fc.in_features)
    fail(ErrorKind::kInvalidInput, "linear: expected " + std::to_string(fc.in_features) + " features, got " +
                                       std::to_string(x.sample_size()));
  Tensor<T> y(x.n, fc.out_features, 1, 1);
  Eigen::Map<const RowMatrix<T>> xm(x.data.data(), x.n, fc.in_features);
  Eigen::Map<const RowMatrix<T>> wm(fc.weight.data(), fc.out_features, fc.in_features);
  Eigen::Map<RowMatrix<T>> ym(y.data.data(), x.n, fc.out_features);
  ym.noalias() = xm * wm.transpose();
  for (int i = 0; i < x.n; ++i)
    for (int o = 0; o < fc.out_features; ++o) ym(i, o) += fc.bias[o];
  if (cache) cache->input = x;
  return y;
}

template <typename T>
Tensor<T> backward(const Linear<T>& fc, const Tensor<T>& dy, const LayerCache<T>& cache,
                   std::vector<std::vector<T>>* grads, bool need_input_grad) {
  const Tensor<T>& x = cache.input;
  Eigen::Map<const RowMatrix<T>> dym(dy.data.data(), dy.n, fc.out_features);
  if (grads) {
    Eigen::Map<const RowMatrix<T>> xm(x.data.data(), x.n, fc.in_features);
    Eigen::Map<RowMatrix<T>> dw((*grads)[0].data(), fc.out_features, fc.in_features);
    dw.noalias() += dym.transpose() * xm;
    for (int o = 0; o < fc.out_features; ++o) (*grads)[1][o] += dym.col(o).sum();
  }
  Tensor<T> dx;
  if (need_input_grad) {
    dx = Tensor<T>(x.n, x.c, x.h, x.w);
    Eigen::Map<const RowMatrix<T>> wm(fc.weight.data(), fc.out_features, fc.in_features);
    Eigen::Map<RowMatrix<T>> dxm(dx.data.data(), x.n, fc.in_features);
    dxm.noalias() = dym * wm;
  }
  return dx;
}

}  // namespace forge::nn
