#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "forge/error.hpp"
#include "forge/pipelines.hpp"
#include "support.hpp"

using namespace forge;

namespace {

// Independent one-level Haar round trip: 1D transform on rows, then columns,
// soft-threshold the three detail bands, invert columns, then rows.
Image haar_oracle(const Image& in, double t) {
  const int h = in.height, w = in.width;
  const double r = 1.0 / std::sqrt(2.0);
  std::vector<double> a(in.pixels);
  std::vector<double> tmp(a.size());
  // rows: low in [0, w/2), high in [w/2, w)
  for (int y = 0; y < h; ++y)
    for (int i = 0; i < w / 2; ++i) {
      tmp[y * w + i] = r * (a[y * w + 2 * i] + a[y * w + 2 * i + 1]);
      tmp[y * w + w / 2 + i] = r * (a[y * w + 2 * i] - a[y * w + 2 * i + 1]);
    }
  for (int x = 0; x < w; ++x)
    for (int j = 0; j < h / 2; ++j) {
      a[j * w + x] = r * (tmp[2 * j * w + x] + tmp[(2 * j + 1) * w + x]);
      a[(h / 2 + j) * w + x] = r * (tmp[2 * j * w + x] - tmp[(2 * j + 1) * w + x]);
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (y < h / 2 && x < w / 2) continue;
      double& c = a[y * w + x];
      c = std::copysign(std::max(std::abs(c) - t, 0.0), c);
    }
  for (int x = 0; x < w; ++x)
    for (int j = 0; j < h / 2; ++j) {
      tmp[2 * j * w + x] = r * (a[j * w + x] + a[(h / 2 + j) * w + x]);
      tmp[(2 * j + 1) * w + x] = r * (a[j * w + x] - a[(h / 2 + j) * w + x]);
    }
  Image out(h, w);
  for (int y = 0; y < h; ++y)
    for (int i = 0; i < w / 2; ++i) {
      out.at(y, 2 * i) = std::clamp(r * (tmp[y * w + i] + tmp[y * w + w / 2 + i]), 0.0, 1.0);
      out.at(y, 2 * i + 1) = std::clamp(r * (tmp[y * w + i] - tmp[y * w + w / 2 + i]), 0.0, 1.0);
    }
  return out;
}

Image blur_oracle(const Image& in, double sigma) {
  const int half = static_cast<int>(std::ceil(3.0 * sigma));
  double norm = 0.0;
  for (int dy = -half; dy <= half; ++dy)
    for (int dx = -half; dx <= half; ++dx) norm += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
  Image out(in.height, in.width);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x) {
      double acc = 0.0;
      for (int dy = -half; dy <= half; ++dy)
        for (int dx = -half; dx <= half; ++dx) {
          const int yy = std::clamp(y + dy, 0, in.height - 1), xx = std::clamp(x + dx, 0, in.width - 1);
          acc += std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma)) * in.at(yy, xx);
        }
      out.at(y, x) = acc / norm;
    }
  return out;
}

double max_abs_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

double rms_diff(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
  return std::sqrt(s / a.size());
}

}  // namespace

TEST(WaveletDenoise, ZeroStrengthIsExactIdentity) {
  const auto img = test::random_image(17, 23, 1);
  EXPECT_EQ(wavelet_denoise(img, 0.0), img);
}

TEST(WaveletDenoise, ConstantImageIsFixedPoint) {
  const Image img(16, 16, 0.5);
  const auto out = wavelet_denoise(img, 0.1);
  EXPECT_LT(max_abs_diff(out, img), 1e-15);
}

TEST(WaveletDenoise, ImpulseMatchesSeparableOracle) {
  Image img(8, 8, 0.0);
  img.at(2, 4) = 1.0;
  const auto out = wavelet_denoise(img, 0.2);
  EXPECT_LT(max_abs_diff(out, haar_oracle(img, 0.2)), 1e-12);
  // 2x2 block of the impulse: every band holds 0.5, details shrink to 0.3.
  EXPECT_NEAR(out.at(2, 4), 0.7, 1e-12);
  EXPECT_NEAR(out.at(2, 5), 0.1, 1e-12);
  EXPECT_NEAR(out.at(3, 4), 0.1, 1e-12);
  EXPECT_NEAR(out.at(3, 5), 0.1, 1e-12);
}

TEST(WaveletDenoise, RandomImagesMatchOracle) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto img = test::random_image(12, 20, 100 + s);
    EXPECT_LT(max_abs_diff(wavelet_denoise(img, 0.03 * (s + 1)), haar_oracle(img, 0.03 * (s + 1))), 1e-12);
  }
}

TEST(WaveletDenoise, OddSizeKeepsShape) {
  const auto img = test::random_image(9, 7, 3);
  const auto out = wavelet_denoise(img, 0.05);
  EXPECT_EQ(out.height, 9);
  EXPECT_EQ(out.width, 7);
  for (double p : out.pixels) EXPECT_TRUE(p >= 0.0 && p <= 1.0);
}

TEST(WaveletDenoise, NonFiniteInputRejected) {
  auto img = test::random_image(8, 8, 4);
  img.at(3, 3) = std::nan("");
  try {
    wavelet_denoise(img, 0.1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidInput);
  }
}

TEST(GaussianBlur, MatchesDirectConvolution) {
  const auto img = test::random_image(15, 18, 5);
  for (double sigma : {0.7, 1.0, 1.5}) EXPECT_LT(max_abs_diff(gaussian_blur(img, sigma), blur_oracle(img, sigma)), 1e-12);
}

TEST(UnsharpMask, ZeroAmountIsExactIdentity) {
  const auto img = test::random_image(10, 10, 6);
  EXPECT_EQ(unsharp_mask(img, 0.0, 1.5), img);
}

TEST(UnsharpMask, ConstantImageUnchanged) {
  const Image img(12, 12, 0.37);
  EXPECT_LT(max_abs_diff(unsharp_mask(img, 2.0, 1.0), img), 1e-14);
}

TEST(UnsharpMask, StepEdgeOvershootsBrightSide) {
  Image img(8, 16, 0.2);
  for (int y = 0; y < 8; ++y)
    for (int x = 8; x < 16; ++x) img.at(y, x) = 0.6;
  const auto out = unsharp_mask(img, 1.0, 1.0);
  const auto blur = blur_oracle(img, 1.0);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 16; ++x)
      EXPECT_NEAR(out.at(y, x), std::clamp(2 * img.at(y, x) - blur.at(y, x), 0.0, 1.0), 1e-12);
  EXPECT_GT(out.at(4, 8), 0.6);
  EXPECT_LT(out.at(4, 7), 0.2);
}

TEST(UnsharpMask, NonPositiveRadiusRejected) {
  const Image img(4, 4, 0.5);
  try {
    unsharp_mask(img, 1.0, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInvalidParameter);
  }
}

TEST(Jpeg, QuantTableScaling) {
  const auto q50 = jpeg_quant_table(50);
  EXPECT_EQ(q50[0], 16);
  EXPECT_EQ(q50[1], 11);
  EXPECT_EQ(q50[63], 99);
  for (int v : jpeg_quant_table(100)) EXPECT_EQ(v, 1);
  // quality 70: scale 60, (16 * 60 + 50) / 100 = 10
  EXPECT_EQ(jpeg_quant_table(70)[0], 10);
}

TEST(Jpeg, ConstantImageSurvives) {
  const Image img(20, 13, 0.5);
  const auto out = jpeg_compress(img, 70);
  EXPECT_LE(max_abs_diff(out, img), 1.0 / 255 + 1e-12);
}

TEST(Jpeg, Quality100IsNearLossless) {
  const auto img = test::random_image(32, 32, 7);
  EXPECT_LT(max_abs_diff(jpeg_compress(img, 100), img), 4.0 / 255);
}

TEST(Jpeg, LowQualityLosesMoreOnCheckerboard) {
  Image img(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) img.at(y, x) = (x + y) % 2 ? 0.8 : 0.2;
  EXPECT_GT(rms_diff(jpeg_compress(img, 10), img), rms_diff(jpeg_compress(img, 90), img));
}

TEST(Jpeg, DeterministicAndInRange) {
  const auto img = test::random_image(19, 21, 8);
  const auto a = jpeg_compress(img, 70), b = jpeg_compress(img, 70);
  EXPECT_EQ(a, b);
  for (double p : a.pixels) {
    EXPECT_TRUE(p >= 0.0 && p <= 1.0);
    // output sits on the 8-bit grid
    EXPECT_NEAR(p * 255, std::round(p * 255), 1e-9);
  }
}

TEST(Jpeg, QualityOutOfRangeRejected) {
  const Image img(8, 8, 0.5);
  for (int q : {0, 101}) {
    try {
      jpeg_compress(img, q);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kInvalidParameter);
    }
  }
}

TEST(ApplyPipeline, IdentityIsExact) {
  const auto img = test::random_image(16, 16, 9);
  PipelineParams p;
  p.sharpen_radius = 2.0;
  EXPECT_EQ(apply_pipeline(img, p), img);
}

TEST(ApplyPipeline, JpegOnlyEqualsCodec) {
  const auto img = test::random_image(16, 16, 10);
  PipelineParams p;
  p.jpeg_quality = 70;
  EXPECT_EQ(apply_pipeline(img, p), jpeg_compress(img, 70));
}

TEST(ApplyPipeline, ComposesInFixedOrder) {
  const auto img = test::random_image(24, 24, 11);
  PipelineParams p{0.05, 1.0, 1.5, 70, "chain"};
  const auto manual = jpeg_compress(unsharp_mask(wavelet_denoise(img, 0.05), 1.0, 1.5), 70);
  EXPECT_EQ(apply_pipeline(img, p), manual);
}

TEST(TargetGrid, PaperGridHasTwentyDistinctChains) {
  const auto grid = make_target_grid(4, 5, 70);
  ASSERT_EQ(grid.size(), 20u);
  std::set<std::string> ids;
  std::set<std::pair<double, double>> tuples;
  for (const auto& p : grid) {
    EXPECT_EQ(p.jpeg_quality, 70);
    ids.insert(p.pipeline_id);
    tuples.insert({p.denoise_strength, p.sharpen_amount});
  }
  EXPECT_EQ(ids.size(), 20u);
  EXPECT_EQ(tuples.size(), 20u);
}

TEST(TargetGrid, EnumeratesProductOnce) {
  GridLevels levels;
  const auto grid = make_target_grid(2, 3, 70, levels);
  ASSERT_EQ(grid.size(), 6u);
  std::set<std::pair<double, double>> seen;
  for (const auto& p : grid) seen.insert({p.denoise_strength, p.sharpen_amount});
  std::set<std::pair<double, double>> expected;
  for (double d : {levels.denoise_min, levels.denoise_max})
    for (double s : {levels.sharpen_min, 0.5 * (levels.sharpen_min + levels.sharpen_max), levels.sharpen_max})
      expected.insert({d, s});
  EXPECT_EQ(seen, expected);
  EXPECT_EQ(make_target_grid(1, 1, 70).size(), 1u);
}

TEST(PipelineParams, ValidationRejectsBadValues) {
  PipelineParams p;
  p.jpeg_quality = 0;
  EXPECT_THROW(p.validate(), Error);
  p = PipelineParams{};
  p.denoise_strength = -0.1;
  EXPECT_THROW(p.validate(), Error);
  p = PipelineParams{};
  p.sharpen_radius = 0.0;
  EXPECT_THROW(p.validate(), Error);
}
