#include <bit>
#include <cstring>
#include <fstream>

#include "forge/data.hpp"
#include "forge/error.hpp"
#include "forge/json_io.hpp"

namespace forge {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

namespace {

constexpr char kPatchMagic[4] = {'F', 'R', 'G', 'P'};
constexpr std::uint32_t kPatchVersion = 1;

template <typename T>
void put(std::ostream& out, const T& value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) fail(ErrorKind::kIo, "truncated patch file");
  return value;
}

void write_split(const std::filesystem::path& path, const DomainDataset& ds, const std::vector<std::size_t>& idx) {
  const int size = ds.patches.empty() ? 0 : ds.patches.front().size;
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(kPatchMagic, 4);
    put<std::uint32_t>(out, kPatchVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(idx.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(size));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(size));
    for (std::size_t i : idx)
      out.write(reinterpret_cast<const char*>(ds.patches[i].pixels.data()),
                static_cast<std::streamsize>(ds.patches[i].pixels.size() * sizeof(float)));
    for (std::size_t i : idx) put<std::uint8_t>(out, static_cast<std::uint8_t>(ds.patches[i].label));
    for (std::size_t i : idx) put<float>(out, static_cast<float>(ds.patches[i].coverage));
    for (std::size_t i : idx) {
      put<std::int32_t>(out, ds.patches[i].scene_index);
      put<std::int32_t>(out, ds.patches[i].y);
      put<std::int32_t>(out, ds.patches[i].x);
    }
    if (!out) fail(ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<LabeledPatch> read_split(const std::filesystem::path& path, const std::vector<std::string>& scene_ids) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kPatchMagic, 4) != 0) fail(ErrorKind::kIo, path.string() + ": bad magic");
  if (get<std::uint32_t>(in) != kPatchVersion) fail(ErrorKind::kIo, path.string() + ": unsupported version");
  const auto count = get<std::uint32_t>(in);
  const auto h = get<std::uint32_t>(in);
  const auto w = get<std::uint32_t>(in);
  if (h != w) fail(ErrorKind::kIo, path.string() + ": non-square patches");
  std::vector<LabeledPatch> patches(count);
  for (auto& p : patches) {
    p.size = static_cast<int>(h);
    p.pixels.resize(static_cast<std::size_t>(h) * w);
    in.read(reinterpret_cast<char*>(p.pixels.data()), static_cast<std::streamsize>(p.pixels.size() * sizeof(float)));
  }
  for (auto& p : patches) {
    const auto l = get<std::uint8_t>(in);
    if (l > 1) fail(ErrorKind::kIo, path.string() + ": bad label");
    p.label = static_cast<Label>(l);
  }
  for (auto& p : patches) p.coverage = get<float>(in);
  for (auto& p : patches) {
    p.scene_index = get<std::int32_t>(in);
    p.y = get<std::int32_t>(in);
    p.x = get<std::int32_t>(in);
    if (p.scene_index >= 0 && static_cast<std::size_t>(p.scene_index) < scene_ids.size())
      p.source_scene = scene_ids[static_cast<std::size_t>(p.scene_index)];
  }
  return patches;
}

}  // namespace

void write_domain(const std::filesystem::path& dir, const DomainDataset& dataset, const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> scene_ids;
  for (const auto& p : dataset.patches) {
    if (p.scene_index < 0) continue;
    if (static_cast<std::size_t>(p.scene_index) >= scene_ids.size()) scene_ids.resize(p.scene_index + 1);
    scene_ids[static_cast<std::size_t>(p.scene_index)] = p.source_scene;
  }
  Json manifest;
  manifest["format"] = "forge-domain/1";
  manifest["config_hash"] = config_hash;
  manifest["pipeline"] = dataset.pipeline;
  manifest["patch_size"] = dataset.patches.empty() ? 0 : dataset.patches.front().size;
  manifest["scene_ids"] = scene_ids;
  const auto counts = dataset.class_counts();
  manifest["class_counts"] = {{"authentic", counts.at(Label::kAuthentic)}, {"forged", counts.at(Label::kForged)}};
  Json splits = Json::object();
  for (int s = 0; s < 3; ++s) {
    const auto& idx = dataset.splits[s];
    if (idx.empty()) continue;
    const std::string name = to_string(static_cast<Split>(s));
    write_split(dir / (name + ".bin"), dataset, idx);
    splits[name] = {{"file", name + ".bin"}, {"count", idx.size()}};
  }
  manifest["splits"] = splits;
  write_json_file(dir / "manifest.json", manifest);
}

DomainDataset read_domain(const std::filesystem::path& dir) {
  const Json manifest = read_json_file(dir / "manifest.json");
  if (manifest.value("format", "") != "forge-domain/1")
    fail(ErrorKind::kIo, (dir / "manifest.json").string() + ": unknown format");
  DomainDataset ds;
  ds.pipeline = manifest.at("pipeline").get<PipelineParams>();
  const auto scene_ids = manifest.at("scene_ids").get<std::vector<std::string>>();
  for (int s = 0; s < 3; ++s) {
    const std::string name = to_string(static_cast<Split>(s));
    if (!manifest.at("splits").contains(name)) continue;
    auto patches = read_split(dir / manifest["splits"][name]["file"].get<std::string>(), scene_ids);
    for (auto& p : patches) {
      ds.splits[s].push_back(ds.patches.size());
      ds.patches.push_back(std::move(p));
    }
  }
  return ds;
}

}  // namespace forge
