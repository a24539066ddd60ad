#include "forge/json_io.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "forge/error.hpp"
#include "forge/hash.hpp"

namespace forge {

void to_json(Json& j, const PipelineParams& p) {
  j = Json{{"id", p.pipeline_id},
           {"denoise", p.denoise_strength},
           {"sharpen_amount", p.sharpen_amount},
           {"sharpen_radius", p.sharpen_radius}};
  if (p.jpeg_quality)
    j["jpeg_quality"] = *p.jpeg_quality;
  else
    j["jpeg_quality"] = "none";
}

void from_json(const Json& j, PipelineParams& p) {
  p.pipeline_id = j.at("id").get<std::string>();
  p.denoise_strength = j.value("denoise", 0.0);
  p.sharpen_amount = j.value("sharpen_amount", 0.0);
  p.sharpen_radius = j.value("sharpen_radius", 1.0);
  const Json& q = j.contains("jpeg_quality") ? j.at("jpeg_quality") : Json("none");
  if (q.is_string()) {
    if (q.get<std::string>() != "none")
      fail(ErrorKind::kInvalidConfig, "pipeline '" + p.pipeline_id + "': jpeg_quality must be an integer or \"none\"");
    p.jpeg_quality.reset();
  } else {
    p.jpeg_quality = q.get<int>();
  }
  p.validate();
}

Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    fail(ErrorKind::kInvalidConfig, path.string() + ": " + e.what());
  }
}

void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write " + tmp.string());
    out << text;
    if (!out) fail(ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_json_file(const std::filesystem::path& path, const Json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
}

std::string json_hash(const Json& j) { return hex64(fnv1a(j.dump())); }

std::string format_double(double value) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

}  // namespace forge
