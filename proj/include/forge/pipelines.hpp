#pragma once

#include <optional>
#include <string>
#include <vector>

#include "forge/image.hpp"

namespace forge {

// Parameters of one development chain. Operators always run in the order
// denoise -> sharpen -> JPEG; zero strengths and a missing quality skip
// the corresponding stage.
struct PipelineParams {
  double denoise_strength = 0.0;
  double sharpen_amount = 0.0;
  double sharpen_radius = 1.0;
  std::optional<int> jpeg_quality;
  std::string pipeline_id = "identity";

  bool is_identity() const {
    return denoise_strength == 0.0 && sharpen_amount == 0.0 && !jpeg_quality;
  }

  void validate() const;

  friend bool operator==(const PipelineParams&, const PipelineParams&) = default;
};

// Levels used by make_target_grid. Strengths are spaced linearly between
// the bounds (inclusive); a single level uses the lower bound.
struct GridLevels {
  double denoise_min = 0.01;
  double denoise_max = 0.04;
  double sharpen_min = 0.25;
  double sharpen_max = 1.25;
  double sharpen_radius = 1.0;
};

/// One-level orthonormal Haar transform with soft-thresholding of the three
/// detail subbands. Odd trailing rows/columns are handled by edge replication
/// and cropped back. Strength 0 returns the input unchanged.
Image wavelet_denoise(const Image& image, double strength);

/// Gaussian blur with sigma = radius, kernel truncated at ceil(3 sigma),
/// replicated borders.
Image gaussian_blur(const Image& image, double radius);

/// clip(image + amount * (image - blur(image, radius)), 0, 1).
Image unsharp_mask(const Image& image, double amount, double radius);

/// Baseline-JPEG lossy round trip on the 8-bit quantized image:
/// level shift, 8x8 DCT, IJG-scaled standard luminance table, quantize
/// (round half away from zero), dequantize, IDCT, clamp.
Image jpeg_compress(const Image& image, int quality);

/// IJG scaling of the Annex K luminance table, row-major (natural order).
std::vector<int> jpeg_quant_table(int quality);

Image apply_pipeline(const Image& image, const PipelineParams& params);

std::vector<PipelineParams> make_target_grid(int n_denoise, int n_sharpen,
                                             int jpeg_quality,
                                             const GridLevels& levels = {});

}  // namespace forge
