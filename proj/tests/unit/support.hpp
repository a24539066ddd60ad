#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "forge/data.hpp"
#include "forge/rng.hpp"

namespace forge::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("forge-" + tag + "-" + std::to_string(std::random_device{}()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

// Small source domain on 32x32 patches.
inline DomainDataset small_source(int scenes = 40, std::uint64_t seed = 22) {
  SynthConfig synth;
  synth.image_size = 128;
  synth.patch_size = 32;
  PatchConfig cfg;
  cfg.patch_size = 32;
  cfg.stride = 32;
  cfg.seed = seed;
  std::vector<PipelineParams> pipes(1);
  std::vector<std::array<bool, 3>> keep{{true, true, true}};
  return build_domains(
      scenes, [&](int i) { return synthesize_scene(mix_seed(seed, static_cast<std::uint64_t>(i)), synth); }, pipes,
      cfg, keep)[0];
}

inline Image random_image(int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Image img(h, w);
  for (auto& p : img.pixels) p = rng.uniform();
  return img;
}

}  // namespace forge::test
