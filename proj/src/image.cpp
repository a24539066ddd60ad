#include "forge/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>

#include "forge/error.hpp"
#include "forge/hash.hpp"

namespace forge {

const char* to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kInvalidParameter: return "invalid-parameter";
    case ErrorKind::kInvalidConfig: return "invalid-config";
    case ErrorKind::kEmptyDomain: return "empty-domain";
    case ErrorKind::kImbalance: return "imbalance";
    case ErrorKind::kLookup: return "lookup";
    case ErrorKind::kTrainingFailure: return "training-failure";
    case ErrorKind::kInsufficientMargins: return "insufficient-margins";
    case ErrorKind::kDegenerateScale: return "degenerate-scale";
    case ErrorKind::kUndefinedCorrelation: return "undefined-correlation";
    case ErrorKind::kComputation: return "computation";
    case ErrorKind::kDependency: return "dependency";
    case ErrorKind::kIo: return "io";
    case ErrorKind::kBusy: return "busy";
  }
  return "unknown";
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

void clip_unit(Image& image) {
  for (double& p : image.pixels) p = std::clamp(p, 0.0, 1.0);
}

void require_finite(const Image& image, const char* op) {
  for (double p : image.pixels) {
    if (!std::isfinite(p)) fail(ErrorKind::kInvalidInput, std::string(op) + ": non-finite pixel");
  }
}

}  // namespace forge
