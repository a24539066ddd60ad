#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace forge::nn {

// Dense NCHW tensor. Fully-connected activations use h = w = 1.
template <typename T>
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, T fill = T(0))
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t sample_size() const { return static_cast<std::size_t>(c) * h * w; }

  std::span<T> sample(int i) { return {data.data() + i * sample_size(), sample_size()}; }
  std::span<const T> sample(int i) const { return {data.data() + i * sample_size(), sample_size()}; }

  T& at(int in, int ic, int iy, int ix) {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  T at(int in, int ic, int iy, int ix) const {
    return data[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }

  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.n = n, out.c = c, out.h = h, out.w = w;
    out.data.assign(data.begin(), data.end());
    return out;
  }
};

}  // namespace forge::nn
