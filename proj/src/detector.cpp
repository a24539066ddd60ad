#include "forge/detector.hpp"

namespace forge {

const char* to_string(Pooling p) { return p == Pooling::kMax ? "max" : "average"; }
const char* to_string(Normalization n) { return n == Normalization::kNone ? "none" : "batch_norm"; }

Pooling parse_pooling(const std::string& s) {
  if (s == "max") return Pooling::kMax;
  if (s == "average" || s == "avg") return Pooling::kAverage;
  fail(ErrorKind::kInvalidConfig, "unknown pooling '" + s + "'");
}

Normalization parse_normalization(const std::string& s) {
  if (s == "none") return Normalization::kNone;
  if (s == "batch_norm" || s == "bn") return Normalization::kBatchNorm;
  fail(ErrorKind::kInvalidConfig, "unknown normalization '" + s + "'");
}

void DetectorConfig::validate() const {
  if (num_classes != 2) fail(ErrorKind::kInvalidConfig, "detector: num_classes must be 2");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail(ErrorKind::kInvalidConfig, "detector: dropout_rate must lie in [0,1)");
  if (!(width_scale > 0.0)) fail(ErrorKind::kInvalidConfig, "detector: width_scale must be > 0");
  if (constrained_kernel < 3 || constrained_kernel % 2 == 0)
    fail(ErrorKind::kInvalidConfig, "detector: constrained_kernel must be odd and >= 3");
  if (!(input_scale > 0.0) || !std::isfinite(input_scale))
    fail(ErrorKind::kInvalidConfig, "detector: input_scale must be positive");
  if (constrained_filters < 1) fail(ErrorKind::kInvalidConfig, "detector: constrained_filters must be >= 1");
  if (input_size < 16 || input_size % 16 != 0)
    fail(ErrorKind::kInvalidConfig, "detector: patch size " + std::to_string(input_size) +
                                        " is incompatible with the pooling depth (needs a multiple of 16)");
}

LayerDims layer_dims(const DetectorConfig& config) {
  auto scaled = [&](int base) { return std::max(1, static_cast<int>(std::lround(base * config.width_scale))); };
  return {scaled(kBaseDims.conv2), scaled(kBaseDims.conv3), scaled(kBaseDims.conv4), scaled(kBaseDims.fc1),
          scaled(kBaseDims.fc2)};
}

}  // namespace forge
