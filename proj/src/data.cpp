#include "forge/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "forge/error.hpp"
#include "forge/rng.hpp"

namespace forge {

const char* to_string(Label label) { return label == Label::kForged ? "forged" : "authentic"; }

const char* to_string(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

double BinaryMask::fraction() const {
  if (bits.empty()) return 0.0;
  const auto on = std::count(bits.begin(), bits.end(), std::uint8_t{1});
  return static_cast<double>(on) / static_cast<double>(bits.size());
}

bool SceneImage::forged() const {
  return std::find(tamper_mask.bits.begin(), tamper_mask.bits.end(), std::uint8_t{1}) !=
         tamper_mask.bits.end();
}

void SynthConfig::validate() const {
  if (patch_size < 8) fail(ErrorKind::kInvalidConfig, "synth: patch_size must be >= 8");
  if (image_size < 2 * patch_size)
    fail(ErrorKind::kInvalidConfig, "synth: image_size must be at least twice the patch size");
  if (!(splice_prob >= 0.0 && splice_prob <= 1.0))
    fail(ErrorKind::kInvalidConfig, "synth: splice_prob must lie in [0,1]");
  if (donors_min < 1 || donors_max < donors_min)
    fail(ErrorKind::kInvalidConfig, "synth: need 1 <= donors_min <= donors_max");
  if (!(donor_area_min > 0.0 && donor_area_min <= donor_area_max && donor_area_max < 1.0))
    fail(ErrorKind::kInvalidConfig, "synth: need 0 < donor_area_min <= donor_area_max < 1");
  if (!(host_noise_min >= 0.0 && host_noise_min <= host_noise_max))
    fail(ErrorKind::kInvalidConfig, "synth: invalid host noise range");
  if (!(donor_noise_ratio_min > 0.0 && donor_noise_ratio_min <= donor_noise_ratio_max))
    fail(ErrorKind::kInvalidConfig, "synth: invalid donor noise ratio range");
  if (!(donor_sharpen >= 0.0)) fail(ErrorKind::kInvalidConfig, "synth: donor_sharpen must be >= 0");
}

void PatchConfig::validate() const {
  if (patch_size < 1 || stride < 1) fail(ErrorKind::kInvalidConfig, "patch: size and stride must be positive");
  if (!(bounds.min > 0.0 && bounds.min <= bounds.max && bounds.max <= 1.0))
    fail(ErrorKind::kInvalidConfig, "patch: coverage bounds must satisfy 0 < min <= max <= 1");
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) fail(ErrorKind::kInvalidConfig, "patch: split fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail(ErrorKind::kInvalidConfig, "patch: split fractions must sum to 1");
}

std::map<Label, int> DomainDataset::class_counts() const {
  std::map<Label, int> counts{{Label::kAuthentic, 0}, {Label::kForged, 0}};
  for (const auto& p : patches) ++counts[p.label];
  return counts;
}

std::map<Label, int> DomainDataset::class_counts(Split s) const {
  std::map<Label, int> counts{{Label::kAuthentic, 0}, {Label::kForged, 0}};
  for (std::size_t i : split(s)) ++counts[patches[i].label];
  return counts;
}

// ---------------------------------------------------------------------------
// Synthesis

namespace {

// Smooth random field in roughly [-1, 1]: bilinear upsampling of a coarse grid.
void add_smooth_field(Image& img, Rng& rng, int cells, double amplitude) {
  const int g = cells + 1;
  std::vector<double> grid(static_cast<std::size_t>(g) * g);
  for (double& v : grid) v = rng.uniform(-1.0, 1.0);
  const double step = static_cast<double>(img.width - 1) / cells;
  for (int y = 0; y < img.height; ++y) {
    const double gy = y / step;
    const int y0 = std::min(static_cast<int>(gy), cells - 1);
    const double ty = gy - y0;
    for (int x = 0; x < img.width; ++x) {
      const double gx = x / step;
      const int x0 = std::min(static_cast<int>(gx), cells - 1);
      const double tx = gx - x0;
      const double v00 = grid[y0 * g + x0], v01 = grid[y0 * g + x0 + 1];
      const double v10 = grid[(y0 + 1) * g + x0], v11 = grid[(y0 + 1) * g + x0 + 1];
      const double v = (1 - ty) * ((1 - tx) * v00 + tx * v01) + ty * ((1 - tx) * v10 + tx * v11);
      img.at(y, x) += amplitude * v;
    }
  }
}

Image procedural_content(Rng& rng, int size) {
  Image img(size, size, rng.uniform(0.35, 0.65));
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) img.at(y, x) += gx * (x / double(size) - 0.5) + gy * (y / double(size) - 0.5);
  add_smooth_field(img, rng, 4 + static_cast<int>(rng.below(4)), 0.10);
  add_smooth_field(img, rng, 12 + static_cast<int>(rng.below(8)), 0.04);

  const int shapes = 3 + static_cast<int>(rng.below(5));
  for (int s = 0; s < shapes; ++s) {
    const double offset = rng.uniform(-0.12, 0.12);
    const int cy = static_cast<int>(rng.below(size)), cx = static_cast<int>(rng.below(size));
    const int ry = 8 + static_cast<int>(rng.below(size / 6)), rx = 8 + static_cast<int>(rng.below(size / 6));
    const bool disc = rng.uniform() < 0.5;
    for (int y = std::max(0, cy - ry); y < std::min(size, cy + ry); ++y)
      for (int x = std::max(0, cx - rx); x < std::min(size, cx + rx); ++x) {
        if (disc) {
          const double dy = double(y - cy) / ry, dx = double(x - cx) / rx;
          if (dy * dy + dx * dx > 1.0) continue;
        }
        img.at(y, x) += offset;
      }
  }
  for (double& p : img.pixels) p = std::clamp(p, 0.1, 0.9);
  return img;
}

void add_noise(Image& img, Rng& rng, double sigma) {
  for (double& p : img.pixels) p += sigma * rng.normal();
}

BinaryMask donor_mask(Rng& rng, const SynthConfig& cfg) {
  const int n = cfg.image_size;
  BinaryMask mask{n, n, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n, 0)};
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::fill(mask.bits.begin(), mask.bits.end(), std::uint8_t{0});
    const double total = rng.uniform(cfg.donor_area_min, cfg.donor_area_max);
    const int donors = cfg.donors_min + static_cast<int>(rng.below(cfg.donors_max - cfg.donors_min + 1));
    for (int d = 0; d < donors; ++d) {
      const double area = total / donors * n * n;
      const double aspect = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
      const int h = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, n);
      const int w = std::clamp(static_cast<int>(std::lround(area / h)), 1, n);
      const int y0 = static_cast<int>(rng.below(n - h + 1));
      const int x0 = static_cast<int>(rng.below(n - w + 1));
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) mask.bits[static_cast<std::size_t>(y) * n + x] = 1;
    }
    const double f = mask.fraction();
    if (f >= cfg.donor_area_min && f <= cfg.donor_area_max) return mask;
  }
  fail(ErrorKind::kComputation, "synth: could not place donors within the configured area range");
}

}  // namespace

SceneImage synthesize_scene(std::uint64_t seed, const SynthConfig& config) {
  config.validate();
  const int n = config.image_size;
  Rng rng(mix_seed(seed, 0x5ce9e));

  SceneImage scene;
  scene.rng_seed = seed;
  char id[48];
  std::snprintf(id, sizeof id, "scene-%llu", static_cast<unsigned long long>(seed));
  scene.scene_id = id;

  const double host_sigma = rng.uniform(config.host_noise_min, config.host_noise_max);
  scene.pixels = procedural_content(rng, n);
  add_noise(scene.pixels, rng, host_sigma);

  const bool splice = config.splice_prob > 0.0 && rng.uniform() < config.splice_prob;
  if (!splice) {
    scene.tamper_mask = BinaryMask{n, n, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n, 0)};
    clip_unit(scene.pixels);
    return scene;
  }

  scene.tamper_mask = donor_mask(rng, config);
  Image donor = procedural_content(rng, n);
  add_noise(donor, rng, host_sigma * rng.uniform(config.donor_noise_ratio_min, config.donor_noise_ratio_max));
  clip_unit(donor);
  if (config.donor_sharpen > 0.0) donor = unsharp_mask(donor, config.donor_sharpen, 1.0);
  for (std::size_t i = 0; i < scene.pixels.size(); ++i)
    if (scene.tamper_mask.bits[i]) scene.pixels.pixels[i] = donor.pixels[i];
  clip_unit(scene.pixels);
  return scene;
}

// ---------------------------------------------------------------------------
// Patches

namespace {

struct WindowLabel {
  bool keep = false;
  Label label = Label::kAuthentic;
  double coverage = 0.0;
};

WindowLabel classify_window(const BinaryMask& mask, int y0, int x0, int size, CoverageBounds bounds) {
  std::size_t on = 0;
  for (int y = y0; y < y0 + size; ++y)
    for (int x = x0; x < x0 + size; ++x) on += mask.at(y, x);
  const double c = static_cast<double>(on) / (static_cast<double>(size) * size);
  if (on == 0) return {true, Label::kAuthentic, 0.0};
  if (c >= bounds.min && c <= bounds.max) return {true, Label::kForged, c};
  return {false, Label::kForged, c};
}

std::vector<PatchSlot> enumerate_slots(const BinaryMask& mask, int scene_index, int size, int stride,
                                       CoverageBounds bounds) {
  std::vector<PatchSlot> slots;
  for (int y = 0; y + size <= mask.height; y += stride)
    for (int x = 0; x + size <= mask.width; x += stride) {
      const WindowLabel w = classify_window(mask, y, x, size, bounds);
      if (w.keep) slots.push_back({scene_index, y, x, w.label, w.coverage});
    }
  return slots;
}

// Largest-remainder apportionment of n items over the fractions.
std::array<std::size_t, 3> apportion(std::size_t n, const SplitFractions& fractions) {
  std::array<std::size_t, 3> counts{};
  std::array<double, 3> rem{};
  std::size_t used = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = fractions[s] * static_cast<double>(n);
    counts[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    rem[s] = exact - static_cast<double>(counts[s]);
    used += counts[s];
  }
  while (used > n) {  // guards against fractions summing slightly above 1
    const int s = static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
    --counts[s];
    --used;
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; used < n; k = (k + 1) % 3) {
    if (fractions[order[k]] > 0.0) {
      ++counts[order[k]];
      ++used;
    }
  }
  return counts;
}

void require_fractions(const SplitFractions& fractions) {
  double sum = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0)) fail(ErrorKind::kInvalidConfig, "split: fractions must be >= 0");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) fail(ErrorKind::kInvalidConfig, "split: fractions must sum to 1 within 1e-9");
}

// Indices kept after subsampling the majority class, ascending.
std::vector<std::size_t> balanced_subset(std::span<const Label> labels, std::uint64_t seed) {
  std::vector<std::size_t> pools[2];
  for (std::size_t i = 0; i < labels.size(); ++i) pools[static_cast<int>(labels[i])].push_back(i);
  if (pools[0].empty()) fail(ErrorKind::kImbalance, "balance: no authentic patches");
  if (pools[1].empty()) fail(ErrorKind::kImbalance, "balance: no forged patches");
  const std::size_t m = std::min(pools[0].size(), pools[1].size());
  Rng rng(mix_seed(seed, 0xba1a));
  std::vector<std::size_t> kept;
  for (auto& pool : pools) {
    if (pool.size() > m) {
      rng.shuffle(std::span(pool));
      pool.resize(m);
    }
    kept.insert(kept.end(), pool.begin(), pool.end());
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

// Two-class controlled rounding: totals exact per split, each class's share
// within one element of its proportional target.
std::array<std::vector<std::size_t>, 3> stratified_split(std::span<const Label> labels,
                                                         const SplitFractions& fractions,
                                                         std::uint64_t seed) {
  require_fractions(fractions);
  const std::size_t n = labels.size();
  std::array<std::vector<std::size_t>, 3> splits;
  if (n == 0) return splits;
  const auto totals = apportion(n, fractions);

  std::vector<std::size_t> pools[2];
  for (std::size_t i = 0; i < n; ++i) pools[static_cast<int>(labels[i])].push_back(i);
  Rng rng(mix_seed(seed, 0x5b117));
  for (auto& pool : pools) rng.shuffle(std::span(pool));

  const std::size_t n_auth = pools[0].size();
  std::array<std::size_t, 3> auth{};
  std::array<std::size_t, 3> rem{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    auth[s] = totals[s] * n_auth / n;
    rem[s] = totals[s] * n_auth % n;
    assigned += auth[s];
  }
  std::array<int, 3> order{0, 1, 2};
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return rem[a] > rem[b]; });
  for (int k = 0; assigned < n_auth; ++k) {
    if (auth[order[k]] < totals[order[k]]) {
      ++auth[order[k]];
      ++assigned;
    }
  }

  std::size_t next[2] = {0, 0};
  for (int s = 0; s < 3; ++s) {
    const std::size_t take[2] = {auth[s], totals[s] - auth[s]};
    for (int c = 0; c < 2; ++c)
      for (std::size_t k = 0; k < take[c]; ++k) splits[s].push_back(pools[c][next[c]++]);
    std::sort(splits[s].begin(), splits[s].end());
  }
  return splits;
}

// Scene-grouped assignment followed by per-split balancing and a trim that
// brings split sizes back to the requested fractions.
std::array<std::vector<std::size_t>, 3> scene_level_split(std::span<const PatchSlot> slots, int scene_count,
                                                          const SplitFractions& fractions, std::uint64_t seed) {
  require_fractions(fractions);
  std::vector<std::array<std::size_t, 2>> per_scene(scene_count, {0, 0});
  std::array<std::size_t, 2> totals{0, 0};
  for (const auto& s : slots) {
    ++per_scene[s.scene_index][static_cast<int>(s.label)];
    ++totals[static_cast<int>(s.label)];
  }
  if (totals[0] == 0) fail(ErrorKind::kImbalance, "balance: no authentic patches");
  if (totals[1] == 0) fail(ErrorKind::kImbalance, "balance: no forged patches");

  std::vector<int> order(scene_count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x5ce5));
  rng.shuffle(std::span(order));

  std::vector<int> scene_split(scene_count, 0);
  std::array<std::array<std::size_t, 2>, 3> avail{};
  for (int scene : order) {
    const auto& c = per_scene[scene];
    if (c[0] + c[1] == 0) continue;
    const int cls = c[1] > 0 ? 1 : 0;
    int best = -1;
    double best_deficit = 0.0;
    for (int s = 0; s < 3; ++s) {
      if (fractions[s] <= 0.0) continue;
      const double deficit = fractions[s] * static_cast<double>(totals[cls]) - static_cast<double>(avail[s][cls]);
      if (best < 0 || deficit > best_deficit) {
        best = s;
        best_deficit = deficit;
      }
    }
    scene_split[scene] = best;
    avail[best][0] += c[0];
    avail[best][1] += c[1];
  }

  // Largest even total whose apportionment fits the available patches.
  std::array<std::array<std::size_t, 2>, 3> take{};
  bool found = false;
  for (std::size_t total = 2 * std::min(totals[0], totals[1]); total >= 2 && !found; total -= 2) {
    const auto sizes = apportion(total, fractions);
    std::vector<int> odd;
    bool ok = true;
    for (int s = 0; s < 3 && ok; ++s) {
      const std::size_t half = sizes[s] / 2;
      take[s] = {half, half};
      if (sizes[s] % 2) odd.push_back(s);
      ok = half <= avail[s][0] && half <= avail[s][1];
    }
    if (!ok) continue;
    std::stable_sort(odd.begin(), odd.end(), [&](int a, int b) {
      return static_cast<long>(avail[a][0]) - static_cast<long>(avail[a][1]) >
             static_cast<long>(avail[b][0]) - static_cast<long>(avail[b][1]);
    });
    for (std::size_t k = 0; k < odd.size(); ++k) ++take[odd[k]][k < odd.size() / 2 ? 0 : 1];
    for (int s = 0; s < 3 && ok; ++s) ok = take[s][0] <= avail[s][0] && take[s][1] <= avail[s][1];
    found = ok;
  }
  if (!found) fail(ErrorKind::kEmptyDomain, "split: no balanced scene-level split is possible");

  std::array<std::array<std::vector<std::size_t>, 2>, 3> pools;
  for (std::size_t i = 0; i < slots.size(); ++i)
    pools[scene_split[slots[i].scene_index]][static_cast<int>(slots[i].label)].push_back(i);
  std::array<std::vector<std::size_t>, 3> splits;
  for (int s = 0; s < 3; ++s) {
    for (int c = 0; c < 2; ++c) {
      auto& pool = pools[s][c];
      rng.shuffle(std::span(pool));
      splits[s].insert(splits[s].end(), pool.begin(), pool.begin() + static_cast<long>(take[s][c]));
    }
    std::sort(splits[s].begin(), splits[s].end());
  }
  return splits;
}

}  // namespace

std::vector<LabeledPatch> extract_patches(const SceneImage& scene, int patch_size, int stride,
                                          CoverageBounds bounds, int scene_index) {
  if (patch_size > std::min(scene.pixels.height, scene.pixels.width))
    fail(ErrorKind::kInvalidParameter, "extract_patches: patch larger than scene");
  std::vector<LabeledPatch> out;
  for (const auto& slot : enumerate_slots(scene.tamper_mask, scene_index, patch_size, stride, bounds))
    out.push_back(cut_patch(scene.pixels, slot, patch_size, scene.scene_id));
  return out;
}

std::vector<LabeledPatch> balance_classes(std::vector<LabeledPatch> patches, std::uint64_t seed) {
  std::vector<Label> labels;
  labels.reserve(patches.size());
  for (const auto& p : patches) labels.push_back(p.label);
  const auto kept = balanced_subset(labels, seed);
  std::vector<LabeledPatch> out;
  out.reserve(kept.size());
  for (std::size_t i : kept) out.push_back(std::move(patches[i]));
  return out;
}

DomainDataset split_dataset(DomainDataset dataset, SplitFractions fractions, std::uint64_t seed) {
  std::vector<Label> labels;
  labels.reserve(dataset.patches.size());
  for (const auto& p : dataset.patches) labels.push_back(p.label);
  dataset.splits = stratified_split(labels, fractions, seed);
  return dataset;
}

DomainLayout plan_layout(std::span<const BinaryMask> masks, std::span<const std::string> scene_ids,
                         const PatchConfig& config) {
  config.validate();
  if (masks.empty()) fail(ErrorKind::kEmptyDomain, "build_domain: no scenes");
  std::vector<PatchSlot> all;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (config.patch_size > std::min(masks[i].height, masks[i].width))
      fail(ErrorKind::kInvalidConfig, "build_domain: patch larger than scene");
    auto slots = enumerate_slots(masks[i], static_cast<int>(i), config.patch_size, config.stride, config.bounds);
    all.insert(all.end(), slots.begin(), slots.end());
  }
  if (all.empty()) fail(ErrorKind::kEmptyDomain, "build_domain: zero usable patches");

  DomainLayout layout;
  layout.patch_size = config.patch_size;
  layout.scene_ids.assign(scene_ids.begin(), scene_ids.end());
  if (config.scene_level_split) {
    const auto splits = scene_level_split(all, static_cast<int>(masks.size()), config.fractions, config.seed);
    std::vector<int> owner(all.size(), -1);
    for (int s = 0; s < 3; ++s)
      for (std::size_t i : splits[s]) owner[i] = s;
    for (std::size_t i = 0; i < all.size(); ++i) {
      if (owner[i] < 0) continue;
      layout.splits[owner[i]].push_back(layout.slots.size());
      layout.slots.push_back(all[i]);
    }
  } else {
    std::vector<Label> labels;
    for (const auto& s : all) labels.push_back(s.label);
    for (std::size_t i : balanced_subset(labels, config.seed)) layout.slots.push_back(all[i]);
    labels.clear();
    for (const auto& s : layout.slots) labels.push_back(s.label);
    layout.splits = stratified_split(labels, config.fractions, config.seed);
  }
  if (layout.slots.empty()) fail(ErrorKind::kEmptyDomain, "build_domain: zero usable patches");
  return layout;
}

LabeledPatch cut_patch(const Image& processed, const PatchSlot& slot, int patch_size, const std::string& scene_id) {
  LabeledPatch p;
  p.size = patch_size;
  p.pixels.resize(static_cast<std::size_t>(patch_size) * patch_size);
  for (int y = 0; y < patch_size; ++y)
    for (int x = 0; x < patch_size; ++x)
      p.pixels[static_cast<std::size_t>(y) * patch_size + x] = static_cast<float>(processed.at(slot.y + y, slot.x + x));
  p.label = slot.label;
  p.coverage = slot.coverage;
  p.source_scene = scene_id;
  p.scene_index = slot.scene_index;
  p.y = slot.y;
  p.x = slot.x;
  return p;
}

DomainDataset build_domain(std::span<const SceneImage> scenes, const PipelineParams& pipeline,
                           const PatchConfig& config) {
  const std::array<bool, 3> all_splits{true, true, true};
  auto domains = build_domains(
      static_cast<int>(scenes.size()), [&](int i) { return scenes[i]; }, std::span(&pipeline, 1), config,
      std::span(&all_splits, 1));
  return std::move(domains.front());
}

std::vector<DomainDataset> build_domains(int scene_count, const std::function<SceneImage(int)>& scene_at,
                                         std::span<const PipelineParams> pipelines, const PatchConfig& config,
                                         std::span<const std::array<bool, 3>> keep_splits) {
  if (scene_count <= 0) fail(ErrorKind::kEmptyDomain, "build_domain: no scenes");
  if (keep_splits.size() != pipelines.size())
    fail(ErrorKind::kInvalidParameter, "build_domains: keep_splits must match pipelines");
  for (const auto& p : pipelines) p.validate();

  std::vector<BinaryMask> masks;
  std::vector<std::string> ids;
  for (int i = 0; i < scene_count; ++i) {
    SceneImage scene = scene_at(i);
    masks.push_back(std::move(scene.tamper_mask));
    ids.push_back(scene.scene_id);
  }
  const DomainLayout layout = plan_layout(masks, ids, config);
  masks.clear();

  // Local index of each slot in each domain (-1 when its split is not kept).
  std::vector<DomainDataset> domains(pipelines.size());
  std::vector<std::vector<long>> local(pipelines.size(), std::vector<long>(layout.slots.size(), -1));
  for (std::size_t d = 0; d < pipelines.size(); ++d) {
    domains[d].pipeline = pipelines[d];
    long next = 0;
    std::vector<int> slot_split(layout.slots.size(), -1);
    for (int s = 0; s < 3; ++s)
      for (std::size_t i : layout.splits[s]) slot_split[i] = s;
    for (std::size_t i = 0; i < layout.slots.size(); ++i)
      if (slot_split[i] >= 0 && keep_splits[d][slot_split[i]]) local[d][i] = next++;
    domains[d].patches.resize(static_cast<std::size_t>(next));
    for (int s = 0; s < 3; ++s)
      for (std::size_t i : layout.splits[s])
        if (local[d][i] >= 0) domains[d].splits[s].push_back(static_cast<std::size_t>(local[d][i]));
  }

  std::vector<std::vector<std::size_t>> by_scene(scene_count);
  for (std::size_t i = 0; i < layout.slots.size(); ++i) by_scene[layout.slots[i].scene_index].push_back(i);
  for (int scene_index = 0; scene_index < scene_count; ++scene_index) {
    if (by_scene[scene_index].empty()) continue;
    const SceneImage scene = scene_at(scene_index);
    for (std::size_t d = 0; d < pipelines.size(); ++d) {
      const bool needed = std::any_of(by_scene[scene_index].begin(), by_scene[scene_index].end(),
                                      [&](std::size_t i) { return local[d][i] >= 0; });
      if (!needed) continue;
      // Full-scene processing before cutting keeps blur/JPEG context across patch borders.
      const Image processed = apply_pipeline(scene.pixels, pipelines[d]);
      for (std::size_t i : by_scene[scene_index])
        if (local[d][i] >= 0)
          domains[d].patches[static_cast<std::size_t>(local[d][i])] =
              cut_patch(processed, layout.slots[i], layout.patch_size, scene.scene_id);
    }
  }
  return domains;
}

}  // namespace forge
