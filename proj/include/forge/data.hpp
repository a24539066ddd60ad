#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "forge/image.hpp"
#include "forge/pipelines.hpp"

namespace forge {

enum class Label : std::uint8_t { kAuthentic = 0, kForged = 1 };

const char* to_string(Label label);

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;  // 0 or 1, row-major

  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  double fraction() const;

  friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

// Parameters of the synthetic splicing corpus.
struct SynthConfig {
  int image_size = 512;
  int patch_size = 128;
  double splice_prob = 0.75;
  int donors_min = 1;
  int donors_max = 3;
  // Total spliced area as a fraction of the scene.
  double donor_area_min = 0.04;
  double donor_area_max = 0.12;
  double host_noise_min = 0.006;
  double host_noise_max = 0.012;
  // Donor noise sigma = host sigma * ratio.
  double donor_noise_ratio_min = 2.0;
  double donor_noise_ratio_max = 3.0;
  double donor_sharpen = 0.8;

  void validate() const;
};

struct SceneImage {
  Image pixels;
  BinaryMask tamper_mask;
  std::string scene_id;
  std::uint64_t rng_seed = 0;

  bool forged() const;
};

SceneImage synthesize_scene(std::uint64_t seed, const SynthConfig& config);

struct CoverageBounds {
  double min = 0.10;
  double max = 0.40;
};

struct LabeledPatch {
  int size = 0;
  std::vector<float> pixels;  // size x size, row-major
  Label label = Label::kAuthentic;
  double coverage = 0.0;
  std::string source_scene;
  int scene_index = 0;
  int y = 0;
  int x = 0;
};

enum class Split { kTrain = 0, kVal = 1, kTest = 2 };

const char* to_string(Split split);

using SplitFractions = std::array<double, 3>;

struct PatchConfig {
  int patch_size = 128;
  int stride = 128;
  CoverageBounds bounds;
  SplitFractions fractions = {0.6, 0.2, 0.2};
  std::uint64_t seed = 22;
  // Keep all patches of a scene in one split.
  bool scene_level_split = true;

  void validate() const;
};

struct DomainDataset {
  PipelineParams pipeline;
  std::vector<LabeledPatch> patches;
  std::array<std::vector<std::size_t>, 3> splits;

  const std::vector<std::size_t>& split(Split s) const { return splits[static_cast<int>(s)]; }
  std::map<Label, int> class_counts() const;
  std::map<Label, int> class_counts(Split s) const;
};

/// Windows at multiples of `stride`; coverage in [min,max] is forged, zero
/// coverage is authentic, everything else is discarded.
std::vector<LabeledPatch> extract_patches(const SceneImage& scene, int patch_size, int stride,
                                          CoverageBounds bounds = {}, int scene_index = 0);

/// Subsamples the majority class down to the minority count. Original
/// relative order is preserved.
std::vector<LabeledPatch> balance_classes(std::vector<LabeledPatch> patches, std::uint64_t seed);

/// Stratified split with exact largest-remainder split sizes.
DomainDataset split_dataset(DomainDataset dataset, SplitFractions fractions = {0.6, 0.2, 0.2},
                            std::uint64_t seed = 22);

// Patch geometry and labels shared by every domain built from the same
// scenes. Computed from masks only.
struct PatchSlot {
  int scene_index = 0;
  int y = 0;
  int x = 0;
  Label label = Label::kAuthentic;
  double coverage = 0.0;
};

struct DomainLayout {
  int patch_size = 0;
  std::vector<PatchSlot> slots;
  std::array<std::vector<std::size_t>, 3> splits;
  std::vector<std::string> scene_ids;
};

DomainLayout plan_layout(std::span<const BinaryMask> masks, std::span<const std::string> scene_ids,
                         const PatchConfig& config);

LabeledPatch cut_patch(const Image& processed, const PatchSlot& slot, int patch_size,
                       const std::string& scene_id);

DomainDataset build_domain(std::span<const SceneImage> scenes, const PipelineParams& pipeline,
                           const PatchConfig& config);

// Builds several domains over the same scenes without holding all scenes in
// memory: `scene_at(i)` is called twice per scene (mask pass, pixel pass).
// Only the splits flagged in `keep_splits[d]` are materialized for domain d.
std::vector<DomainDataset> build_domains(int scene_count,
                                         const std::function<SceneImage(int)>& scene_at,
                                         std::span<const PipelineParams> pipelines,
                                         const PatchConfig& config,
                                         std::span<const std::array<bool, 3>> keep_splits);

// Dataset container: <dir>/manifest.json plus <dir>/<split>.bin per stored split.
void write_domain(const std::filesystem::path& dir, const DomainDataset& dataset,
                  const std::string& config_hash);
DomainDataset read_domain(const std::filesystem::path& dir);

}  // namespace forge
