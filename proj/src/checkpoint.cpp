#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "forge/error.hpp"
#include "forge/training.hpp"

namespace forge {

void to_json(Json& j, const DetectorConfig& c) {
  j = Json{{"pooling", to_string(c.pooling)},
           {"normalization", to_string(c.normalization)},
           {"dropout_rate", c.dropout_rate},
           {"width_scale", c.width_scale},
           {"constrained_kernel", c.constrained_kernel},
           {"constrained_filters", c.constrained_filters},
           {"num_classes", c.num_classes},
           {"input_size", c.input_size},
           {"input_scale", c.input_scale},
           {"rng_seed", c.rng_seed}};
}

void from_json(const Json& j, DetectorConfig& c) {
  DetectorConfig d;
  c.pooling = parse_pooling(j.value("pooling", std::string(to_string(d.pooling))));
  c.normalization = parse_normalization(j.value("normalization", std::string(to_string(d.normalization))));
  c.dropout_rate = j.value("dropout_rate", d.dropout_rate);
  c.width_scale = j.value("width_scale", d.width_scale);
  c.constrained_kernel = j.value("constrained_kernel", d.constrained_kernel);
  c.constrained_filters = j.value("constrained_filters", d.constrained_filters);
  c.num_classes = j.value("num_classes", d.num_classes);
  c.input_size = j.value("input_size", d.input_size);
  c.input_scale = j.value("input_scale", d.input_scale);
  c.rng_seed = j.value("rng_seed", d.rng_seed);
  c.validate();
}

void to_json(Json& j, const TrainConfig& c) {
  j = Json{{"max_epochs", c.max_epochs},
           {"batch_size", c.batch_size},
           {"lr_init", c.lr_init},
           {"lr_factor", c.lr_factor},
           {"lr_patience_epochs", c.lr_patience_epochs},
           {"early_stop_patience", c.early_stop_patience},
           {"improvement_threshold", c.improvement_threshold},
           {"momentum", c.momentum},
           {"rng_seed", c.rng_seed}};
}

void from_json(const Json& j, TrainConfig& c) {
  TrainConfig d;
  c.max_epochs = j.value("max_epochs", d.max_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr_init = j.value("lr_init", d.lr_init);
  c.lr_factor = j.value("lr_factor", d.lr_factor);
  c.lr_patience_epochs = j.value("lr_patience_epochs", d.lr_patience_epochs);
  c.early_stop_patience = j.value("early_stop_patience", d.early_stop_patience);
  c.improvement_threshold = j.value("improvement_threshold", d.improvement_threshold);
  c.momentum = j.value("momentum", d.momentum);
  c.rng_seed = j.value("rng_seed", d.rng_seed);
  c.validate();
}

namespace {

constexpr char kWeightsMagic[4] = {'F', 'R', 'G', 'W'};
constexpr std::uint32_t kWeightsVersion = 1;

struct NamedTensor {
  std::string name;
  std::vector<float>* values;
};

// Trainable parameters and BatchNorm running statistics, in network order.
std::vector<NamedTensor> named_tensors(DetectorModel& model) {
  std::vector<NamedTensor> out;
  for (auto& block : model.blocks)
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      const std::string prefix = block.name + "." + std::to_string(l) + ".";
      std::visit(
          [&](auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, nn::Conv2d<float>> || std::is_same_v<L, nn::Linear<float>>) {
              out.push_back({prefix + "weight", &layer.weight});
              if (!layer.bias.empty()) out.push_back({prefix + "bias", &layer.bias});
            } else if constexpr (std::is_same_v<L, nn::BatchNorm<float>>) {
              out.push_back({prefix + "gamma", &layer.gamma});
              out.push_back({prefix + "beta", &layer.beta});
              out.push_back({prefix + "running_mean", &layer.running_mean});
              out.push_back({prefix + "running_var", &layer.running_var});
            }
          },
          block.layers[l]);
    }
  return out;
}

template <typename T>
void put(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) fail(ErrorKind::kIo, what + ": truncated");
  return v;
}

void check_constraint(const DetectorModel& model, const std::string& where) {
  const auto& conv = model.constrained_layer();
  const std::size_t taps = static_cast<std::size_t>(conv.kernel) * conv.kernel;
  for (std::size_t base = 0; base < conv.weight.size(); base += taps) {
    double sum = 0.0, magnitude = 0.0;
    for (std::size_t i = 0; i < taps; ++i)
      if (i != taps / 2) {
        sum += conv.weight[base + i];
        magnitude += std::abs(static_cast<double>(conv.weight[base + i]));
      }
    const double tol = std::max(1e-5, 2.0 * constraint_tolerance<float>(static_cast<double>(taps - 1), magnitude));
    if (std::abs(conv.weight[base + taps / 2] + 1.0) >= 1e-5 || std::abs(sum - 1.0) >= tol)
      fail(ErrorKind::kIo, where + ": ConvRes weights violate the high-pass constraint");
  }
}

}  // namespace

void write_weights(const std::filesystem::path& path, const DetectorModel& model) {
  auto copy = model;
  const auto tensors = named_tensors(copy);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::kIo, "cannot write " + tmp.string());
    out.write(kWeightsMagic, 4);
    put<std::uint32_t>(out, kWeightsVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      put<std::uint32_t>(out, static_cast<std::uint32_t>(t.name.size()));
      out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
      put<std::uint64_t>(out, t.values->size());
      out.write(reinterpret_cast<const char*>(t.values->data()),
                static_cast<std::streamsize>(t.values->size() * sizeof(float)));
    }
    if (!out) fail(ErrorKind::kIo, "write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void read_weights(const std::filesystem::path& path, DetectorModel& model) {
  std::ifstream in(path, std::ios::binary);
  const std::string what = path.string();
  if (!in) fail(ErrorKind::kIo, "cannot open " + what);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kWeightsMagic, 4) != 0) fail(ErrorKind::kIo, what + ": bad magic");
  if (get<std::uint32_t>(in, what) != kWeightsVersion) fail(ErrorKind::kIo, what + ": unsupported version");
  auto tensors = named_tensors(model);
  if (get<std::uint32_t>(in, what) != tensors.size()) fail(ErrorKind::kIo, what + ": tensor count mismatch");
  for (auto& t : tensors) {
    std::string name(get<std::uint32_t>(in, what), '\0');
    in.read(name.data(), static_cast<std::streamsize>(name.size()));
    if (name != t.name) fail(ErrorKind::kIo, what + ": expected tensor " + t.name + ", found " + name);
    if (get<std::uint64_t>(in, what) != t.values->size()) fail(ErrorKind::kIo, what + ": size mismatch for " + name);
    in.read(reinterpret_cast<char*>(t.values->data()), static_cast<std::streamsize>(t.values->size() * sizeof(float)));
    if (!in) fail(ErrorKind::kIo, what + ": truncated");
  }
}

void save_checkpoint(const std::filesystem::path& dir, const DetectorVariant& v, const std::string& config_hash) {
  std::filesystem::create_directories(dir);
  write_weights(dir / "weights.bin", v.model);

  std::ostringstream csv;
  csv << "epoch,train_loss,train_accuracy,val_accuracy,lr\n";
  for (const auto& r : v.history)
    csv << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.train_accuracy) << ','
        << format_double(r.val_accuracy) << ',' << format_double(r.lr) << '\n';
  write_text_atomic(dir / "history.csv", csv.str());

  // config.json goes last: its presence marks a complete checkpoint.
  Json cfg{{"variant_id", v.variant_id},
           {"config_hash", config_hash},
           {"detector", v.detector_config},
           {"train", v.train_config},
           {"seeds", {{"detector", v.detector_config.rng_seed}, {"train", v.train_config.rng_seed}}},
           {"best_epoch", v.best_epoch},
           {"epochs_run", v.history.size()},
           {"source_test_accuracy", v.source_test_accuracy}};
  write_json_file(dir / "config.json", cfg);
}

std::string checkpoint_hash(const std::filesystem::path& dir) {
  return read_json_file(dir / "config.json").value("config_hash", "");
}

DetectorVariant load_checkpoint(const std::filesystem::path& dir) {
  const Json cfg = read_json_file(dir / "config.json");
  DetectorVariant v;
  v.variant_id = cfg.at("variant_id").get<std::string>();
  v.detector_config = cfg.at("detector").get<DetectorConfig>();
  v.train_config = cfg.at("train").get<TrainConfig>();
  v.best_epoch = cfg.value("best_epoch", 0);
  v.source_test_accuracy = cfg.at("source_test_accuracy").get<double>();
  v.model = nn::build_detector<float>(v.detector_config);
  read_weights(dir / "weights.bin", v.model);
  check_constraint(v.model, (dir / "weights.bin").string());

  std::ifstream in(dir / "history.csv");
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord r;
    char comma;
    std::istringstream ls(line);
    ls >> r.epoch >> comma >> r.train_loss >> comma >> r.train_accuracy >> comma >> r.val_accuracy >> comma >> r.lr;
    v.history.push_back(r);
  }
  return v;
}

}  // namespace forge
