#include "forge/pipelines.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "forge/error.hpp"

namespace forge {
namespace {

double soft_threshold(double x, double t) {
  const double mag = std::abs(x) - t;
  if (mag <= 0.0) return 0.0;
  return x < 0.0 ? -mag : mag;
}

double round_half_away(double x) { return x < 0.0 ? -std::floor(-x + 0.5) : std::floor(x + 0.5); }

// Replicates the last row/column until both sides are multiples of `block`.
Image pad_replicate(const Image& image, int block) {
  const int h = (image.height + block - 1) / block * block;
  const int w = (image.width + block - 1) / block * block;
  Image out(h, w);
  for (int y = 0; y < h; ++y) {
    const int sy = std::min(y, image.height - 1);
    for (int x = 0; x < w; ++x) out.at(y, x) = image.at(sy, std::min(x, image.width - 1));
  }
  return out;
}

Image crop(const Image& image, int h, int w) {
  if (image.height == h && image.width == w) return image;
  Image out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = image.at(y, x);
  return out;
}

constexpr std::array<int, 64> kLuminanceTable = {
    16, 11, 10, 16, 24,  40,  51,  61,   //
    12, 12, 14, 19, 26,  58,  60,  55,   //
    14, 13, 16, 24, 40,  57,  69,  56,   //
    14, 17, 22, 29, 51,  87,  80,  62,   //
    18, 22, 37, 56, 68,  109, 103, 77,   //
    24, 35, 55, 64, 81,  104, 113, 92,   //
    49, 64, 78, 87, 103, 121, 120, 101,  //
    72, 92, 95, 98, 112, 100, 103, 99};

// basis[u][x] = C(u)/2 * cos((2x+1) u pi / 16)
const std::array<std::array<double, 8>, 8>& dct_basis() {
  static const auto basis = [] {
    std::array<std::array<double, 8>, 8> b{};
    for (int u = 0; u < 8; ++u) {
      const double cu = u == 0 ? std::numbers::sqrt2 / 2.0 : 1.0;
      for (int x = 0; x < 8; ++x)
        b[u][x] = 0.5 * cu * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
    }
    return b;
  }();
  return basis;
}

void block_round_trip(std::array<double, 64>& block, const std::vector<int>& table) {
  const auto& basis = dct_basis();
  std::array<double, 64> tmp{};
  std::array<double, 64> coef{};
  // rows
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int x = 0; x < 8; ++x) s += basis[u][x] * block[y * 8 + x];
      tmp[y * 8 + u] = s;
    }
  // columns
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int y = 0; y < 8; ++y) s += basis[v][y] * tmp[y * 8 + u];
      coef[v * 8 + u] = s;
    }
  for (int i = 0; i < 64; ++i) coef[i] = round_half_away(coef[i] / table[i]) * table[i];
  // inverse: columns then rows
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += basis[v][y] * coef[v * 8 + u];
      tmp[y * 8 + u] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += basis[u][x] * tmp[y * 8 + u];
      block[y * 8 + x] = s;
    }
}

}  // namespace

void PipelineParams::validate() const {
  if (!(denoise_strength >= 0.0) || !std::isfinite(denoise_strength))
    fail(ErrorKind::kInvalidParameter, "pipeline '" + pipeline_id + "': denoise_strength must be >= 0");
  if (!(sharpen_amount >= 0.0) || !std::isfinite(sharpen_amount))
    fail(ErrorKind::kInvalidParameter, "pipeline '" + pipeline_id + "': sharpen_amount must be >= 0");
  if (!(sharpen_radius > 0.0) || !std::isfinite(sharpen_radius))
    fail(ErrorKind::kInvalidParameter, "pipeline '" + pipeline_id + "': sharpen_radius must be > 0");
  if (jpeg_quality && (*jpeg_quality < 1 || *jpeg_quality > 100))
    fail(ErrorKind::kInvalidParameter, "pipeline '" + pipeline_id + "': jpeg_quality must lie in [1,100]");
}

Image wavelet_denoise(const Image& image, double strength) {
  require_finite(image, "wavelet_denoise");
  if (!(strength >= 0.0)) fail(ErrorKind::kInvalidParameter, "wavelet_denoise: strength must be >= 0");
  if (strength == 0.0 || image.empty()) return image;

  Image work = pad_replicate(image, 2);
  for (int y = 0; y < work.height; y += 2) {
    for (int x = 0; x < work.width; x += 2) {
      const double a = work.at(y, x), b = work.at(y, x + 1);
      const double c = work.at(y + 1, x), d = work.at(y + 1, x + 1);
      const double ll = (a + b + c + d) / 2.0;
      const double lh = soft_threshold((a - b + c - d) / 2.0, strength);
      const double hl = soft_threshold((a + b - c - d) / 2.0, strength);
      const double hh = soft_threshold((a - b - c + d) / 2.0, strength);
      work.at(y, x) = (ll + lh + hl + hh) / 2.0;
      work.at(y, x + 1) = (ll - lh + hl - hh) / 2.0;
      work.at(y + 1, x) = (ll + lh - hl - hh) / 2.0;
      work.at(y + 1, x + 1) = (ll - lh - hl + hh) / 2.0;
    }
  }
  Image out = crop(work, image.height, image.width);
  clip_unit(out);
  return out;
}

Image gaussian_blur(const Image& image, double radius) {
  if (!(radius > 0.0)) fail(ErrorKind::kInvalidParameter, "gaussian_blur: radius must be > 0");
  const int half = static_cast<int>(std::ceil(3.0 * radius));
  std::vector<double> kernel(2 * half + 1);
  double total = 0.0;
  for (int i = -half; i <= half; ++i) {
    kernel[i + half] = std::exp(-(i * i) / (2.0 * radius * radius));
    total += kernel[i + half];
  }
  for (double& k : kernel) k /= total;

  const int h = image.height, w = image.width;
  Image rows(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -half; i <= half; ++i) s += kernel[i + half] * image.at(y, std::clamp(x + i, 0, w - 1));
      rows.at(y, x) = s;
    }
  Image out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = -half; i <= half; ++i) s += kernel[i + half] * rows.at(std::clamp(y + i, 0, h - 1), x);
      out.at(y, x) = s;
    }
  return out;
}

Image unsharp_mask(const Image& image, double amount, double radius) {
  if (!(radius > 0.0)) fail(ErrorKind::kInvalidParameter, "unsharp_mask: radius must be > 0");
  if (!(amount >= 0.0)) fail(ErrorKind::kInvalidParameter, "unsharp_mask: amount must be >= 0");
  require_finite(image, "unsharp_mask");
  if (amount == 0.0) return image;
  const Image blurred = gaussian_blur(image, radius);
  Image out(image.height, image.width);
  for (std::size_t i = 0; i < image.size(); ++i)
    out.pixels[i] = image.pixels[i] + amount * (image.pixels[i] - blurred.pixels[i]);
  clip_unit(out);
  return out;
}

std::vector<int> jpeg_quant_table(int quality) {
  if (quality < 1 || quality > 100) fail(ErrorKind::kInvalidParameter, "jpeg: quality must lie in [1,100]");
  const int scale = quality < 50 ? 5000 / quality : 200 - 2 * quality;
  std::vector<int> table(64);
  for (int i = 0; i < 64; ++i) table[i] = std::clamp((kLuminanceTable[i] * scale + 50) / 100, 1, 255);
  return table;
}

Image jpeg_compress(const Image& image, int quality) {
  const std::vector<int> table = jpeg_quant_table(quality);
  require_finite(image, "jpeg_compress");
  if (image.empty()) return image;

  Image work = pad_replicate(image, 8);
  for (double& p : work.pixels) p = round_half_away(std::clamp(p, 0.0, 1.0) * 255.0);

  std::array<double, 64> block{};
  for (int by = 0; by < work.height; by += 8) {
    for (int bx = 0; bx < work.width; bx += 8) {
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) block[y * 8 + x] = work.at(by + y, bx + x) - 128.0;
      block_round_trip(block, table);
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          work.at(by + y, bx + x) = std::clamp(round_half_away(block[y * 8 + x] + 128.0), 0.0, 255.0) / 255.0;
    }
  }
  return crop(work, image.height, image.width);
}

Image apply_pipeline(const Image& image, const PipelineParams& params) {
  params.validate();
  Image out = image;
  if (params.denoise_strength > 0.0) out = wavelet_denoise(out, params.denoise_strength);
  if (params.sharpen_amount > 0.0) out = unsharp_mask(out, params.sharpen_amount, params.sharpen_radius);
  if (params.jpeg_quality) out = jpeg_compress(out, *params.jpeg_quality);
  return out;
}

std::vector<PipelineParams> make_target_grid(int n_denoise, int n_sharpen, int jpeg_quality,
                                             const GridLevels& levels) {
  if (n_denoise < 1 || n_sharpen < 1)
    fail(ErrorKind::kInvalidParameter, "make_target_grid: level counts must be >= 1");
  auto level = [](double lo, double hi, int i, int n) {
    return n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / (n - 1);
  };
  std::vector<PipelineParams> grid;
  grid.reserve(static_cast<std::size_t>(n_denoise) * n_sharpen);
  for (int i = 0; i < n_denoise; ++i) {
    for (int j = 0; j < n_sharpen; ++j) {
      PipelineParams p;
      p.denoise_strength = level(levels.denoise_min, levels.denoise_max, i, n_denoise);
      p.sharpen_amount = level(levels.sharpen_min, levels.sharpen_max, j, n_sharpen);
      p.sharpen_radius = levels.sharpen_radius;
      p.jpeg_quality = jpeg_quality;
      char id[64];
      std::snprintf(id, sizeof id, "d%02d_s%02d_q%d", i, j, jpeg_quality);
      p.pipeline_id = id;
      p.validate();
      grid.push_back(std::move(p));
    }
  }
  return grid;
}

}  // namespace forge
