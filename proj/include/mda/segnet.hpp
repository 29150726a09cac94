#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mda/attention.hpp"
#include "mda/compression.hpp"
#include "mda/ops.hpp"
#include "mda/params.hpp"
#include "mda/tensor.hpp"
#include "mda/volume.hpp"

// The four ablation networks as one configurable encoder-decoder: plain
// U-Net, cscSE-UNet (sigmoid-gated attention), MSE-UNet (softmax attention),
// and MDA-Net (MSE-UNet plus the compressed-residual input channel).
namespace mda {

enum class Variant { kPlain, kCscse, kMse, kMda };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kPlain: return "plain";
    case Variant::kCscse: return "cscse";
    case Variant::kMse: return "mse";
    case Variant::kMda: return "mda";
  }
  return "?";
}

inline Variant parse_variant(const std::string& name) {
  if (name == "plain") return Variant::kPlain;
  if (name == "cscse") return Variant::kCscse;
  if (name == "mse") return Variant::kMse;
  if (name == "mda") return Variant::kMda;
  throw UsageError("unknown variant \"" + name + "\" (plain|cscse|mse|mda)");
}

inline const char* attention_scale_name(AttentionScale s) {
  return s == AttentionScale::kNone ? "none" : "count";
}

inline AttentionScale parse_attention_scale(const std::string& name) {
  if (name == "none") return AttentionScale::kNone;
  if (name == "count") return AttentionScale::kCount;
  throw UsageError("unknown attention_scale \"" + name + "\" (none|count)");
}

struct ModelConfig {
  Variant variant = Variant::kPlain;
  int depth = 5;                    // encoder levels including the bottleneck
  std::int64_t base_channels = 32;  // channels double per level
  std::int64_t num_classes = 4;
  double dropout_rate = 0.3;
  AttentionScale attention_scale = AttentionScale::kNone;
  View view = View::kSagittal;
  std::int64_t input_height = 0, input_width = 0;  // bound in-plane dims
  CompressionConfig compression;                   // mda only

  std::int64_t in_channels() const { return variant == Variant::kMda ? 2 : 1; }

  std::int64_t divisor() const { return std::int64_t{1} << (depth - 1); }

  void validate() const {
    if (depth < 1 || depth > 10) {
      throw UsageError("model: depth must be in [1,10], got " + std::to_string(depth));
    }
    if (base_channels < 1) throw UsageError("model: base_channels must be >= 1");
    if (num_classes < 2) throw UsageError("model: num_classes must be >= 2");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
      throw UsageError("model: dropout_rate must be in [0,1)");
    }
    if (input_height <= 0 || input_width <= 0) {
      throw UsageError("model: input dims are unset");
    }
    if (input_height % divisor() != 0 || input_width % divisor() != 0) {
      throw UsageError("model: input dims " + std::to_string(input_height) + "x" +
                       std::to_string(input_width) + " must be divisible by " +
                       std::to_string(divisor()) +
                       " (the data layer pads slices before the network sees them)");
    }
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["variant"] = variant_name(c.variant);
  j["depth"] = c.depth;
  j["base_channels"] = c.base_channels;
  j["num_classes"] = c.num_classes;
  j["dropout_rate"] = c.dropout_rate;
  j["attention_scale"] = attention_scale_name(c.attention_scale);
  j["view"] = view_name(c.view);
  j["input_height"] = c.input_height;
  j["input_width"] = c.input_width;
  j["compression"] = {{"radius", c.compression.radius},
                      {"boundary", boundary_name(c.compression.boundary)},
                      {"ordering", c.compression.ordering == DiffOrdering::kDescending
                                       ? "descending"
                                       : "ascending"}};
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.depth = j.at("depth").get<int>();
  c.base_channels = j.at("base_channels").get<std::int64_t>();
  c.num_classes = j.at("num_classes").get<std::int64_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.attention_scale = parse_attention_scale(j.at("attention_scale").get<std::string>());
  c.view = parse_view(j.at("view").get<std::string>());
  c.input_height = j.at("input_height").get<std::int64_t>();
  c.input_width = j.at("input_width").get<std::int64_t>();
  const auto& jc = j.at("compression");
  c.compression.radius = jc.at("radius").get<int>();
  c.compression.boundary = parse_boundary(jc.at("boundary").get<std::string>());
  c.compression.ordering = jc.at("ordering").get<std::string>() == "ascending"
                               ? DiffOrdering::kAscending
                               : DiffOrdering::kDescending;
  return c;
}

struct ForwardOptions {
  bool train_mode = false;
  std::uint64_t dropout_seed = 0;   // derived per (run, epoch, batch) by the caller
  bool disable_attention = false;   // diagnostic hook: run the bare backbone
};

struct ParamCount {
  std::int64_t total = 0;
  std::int64_t backbone = 0;
  std::int64_t attention = 0;
  std::int64_t compression = 0;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed)
      : config_(config), registry_(seed) {
    config_.validate();
    build();
  }

  const ModelConfig& config() const { return config_; }
  ParamRegistry<T>& params() { return registry_; }
  const ParamRegistry<T>& params() const { return registry_; }
  std::uint64_t seed() const { return registry_.seed(); }

  const CompressionParams<T>& compression_params() const {
    if (!compression_) {
      throw UsageError("model: variant " + std::string(variant_name(config_.variant)) +
                       " has no compression module");
    }
    return *compression_;
  }

  // Class-probability map [B, H, W, num_classes]; each pixel's class
  // probabilities sum to 1.
  Tensor<T> forward(const Tensor<T>& input, const ForwardOptions& opts = {}) const {
    const Shape& s = input.shape();
    if (s.size() != 4 || s[1] != config_.input_height || s[2] != config_.input_width ||
        s[3] != config_.in_channels()) {
      throw ShapeError("forward: input " + shape_str(s) + " does not match bound [B," +
                       std::to_string(config_.input_height) + "," +
                       std::to_string(config_.input_width) + "," +
                       std::to_string(config_.in_channels()) + "]");
    }
    int dropout_site = 0;
    std::vector<Tensor<T>> skips;
    Tensor<T> x = input;
    for (int level = 0; level < config_.depth; ++level) {
      if (level > 0) x = maxpool2(x);
      x = conv_pair(x, enc_[static_cast<std::size_t>(level)], opts, &dropout_site);
      if (level < config_.depth - 1) skips.push_back(x);
    }
    for (int level = config_.depth - 2; level >= 0; --level) {
      const auto& blocks = dec_[static_cast<std::size_t>(level)];
      x = conv2d(upsample2(x), blocks.up_kernel, blocks.up_bias);
      x = concat<T>({skips[static_cast<std::size_t>(level)], x}, 3);
      x = conv_pair(x, blocks, opts, &dropout_site);
    }
    x = conv2d(x, head_kernel_, head_bias_);
    return softmax(x, {3});
  }

  ParamCount param_count() const {
    ParamCount c;
    c.total = registry_.total_count();
    c.backbone = registry_.count_prefixed("backbone/");
    c.attention = registry_.count_prefixed("attention/");
    c.compression = registry_.count_prefixed("compression/");
    return c;
  }

 private:
  struct LevelBlocks {
    Tensor<T> conv1_kernel, conv1_bias, conv2_kernel, conv2_bias;
    Tensor<T> up_kernel, up_bias;  // decoder levels only
    std::optional<MseBlockParams<T>> mse;
    std::optional<ScseBlockParams<T>> scse;
  };

  void build() {
    const std::int64_t base = config_.base_channels;
    auto channels_at = [&](int level) { return base << level; };
    auto res_h = [&](int level) { return config_.input_height >> level; };
    auto res_w = [&](int level) { return config_.input_width >> level; };

    for (int level = 0; level < config_.depth; ++level) {
      const std::int64_t cin = level == 0 ? config_.in_channels() : channels_at(level - 1);
      const std::int64_t c = channels_at(level);
      const std::string tag = "enc" + std::to_string(level);
      enc_.push_back(make_level(tag, cin, c, res_h(level), res_w(level)));
    }
    for (int level = 0; level < config_.depth - 1; ++level) {
      const std::int64_t c = channels_at(level);
      const std::int64_t c_below = channels_at(level + 1);
      const std::string tag = "dec" + std::to_string(level);
      LevelBlocks blocks = make_level(tag, 2 * c, c, res_h(level), res_w(level));
      blocks.up_kernel = registry_.create("backbone/" + tag + "/up/kernel",
                                          {2, 2, c_below, c}, 2 * 2 * c_below);
      blocks.up_bias = registry_.create_zeros("backbone/" + tag + "/up/bias", {c});
      dec_.push_back(std::move(blocks));
    }
    const std::int64_t c0 = channels_at(0);
    head_kernel_ = registry_.create("backbone/head/kernel",
                                    {1, 1, c0, config_.num_classes}, c0);
    head_bias_ = registry_.create_zeros("backbone/head/bias", {config_.num_classes});

    if (config_.variant == Variant::kMda) {
      compression_ = CompressionParams<T>::create(
          registry_, "compression", config_.input_height, config_.input_width,
          config_.compression.channels());
    }
  }

  LevelBlocks make_level(const std::string& tag, std::int64_t cin, std::int64_t c,
                         std::int64_t h, std::int64_t w) {
    LevelBlocks blocks;
    const std::string prefix = "backbone/" + tag;
    blocks.conv1_kernel = registry_.create(prefix + "/conv1/kernel", {3, 3, cin, c},
                                           9 * cin);
    blocks.conv1_bias = registry_.create_zeros(prefix + "/conv1/bias", {c});
    blocks.conv2_kernel = registry_.create(prefix + "/conv2/kernel", {3, 3, c, c}, 9 * c);
    blocks.conv2_bias = registry_.create_zeros(prefix + "/conv2/bias", {c});
    switch (config_.variant) {
      case Variant::kPlain:
        break;
      case Variant::kCscse:
        blocks.scse = ScseBlockParams<T>::create(registry_, "attention/" + tag, c);
        break;
      case Variant::kMse:
      case Variant::kMda:
        blocks.mse = MseBlockParams<T>::create(registry_, "attention/" + tag, h, w, c);
        break;
    }
    return blocks;
  }

  // conv-relu, conv-relu, attention, dropout.
  Tensor<T> conv_pair(Tensor<T> x, const LevelBlocks& blocks, const ForwardOptions& opts,
                      int* dropout_site) const {
    x = relu(conv2d(x, blocks.conv1_kernel, blocks.conv1_bias));
    x = relu(conv2d(x, blocks.conv2_kernel, blocks.conv2_bias));
    if (!opts.disable_attention) {
      if (blocks.mse) x = mse_block(x, *blocks.mse, config_.attention_scale);
      if (blocks.scse) x = scse_block_baseline(x, *blocks.scse);
    }
    const std::uint64_t seed =
        rng::derive_seed(opts.dropout_seed, {static_cast<std::uint64_t>(*dropout_site)});
    ++*dropout_site;
    return dropout(x, config_.dropout_rate, opts.train_mode, seed);
  }

  ModelConfig config_;
  ParamRegistry<T> registry_;
  std::vector<LevelBlocks> enc_, dec_;
  Tensor<T> head_kernel_, head_bias_;
  std::optional<CompressionParams<T>> compression_;
};

// --- checkpoints ---
//
// Layout: magic "MDA1", u64 little-endian manifest length, JSON manifest
// {dtype, seed, config, tensors:[{name, shape, dtype, offset}]}, then the raw
// little-endian parameter buffers at the given offsets (relative to the end
// of the manifest). Round-trips are bit-exact.

namespace detail {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "unsupported scalar type");
    return "f64";
  }
}

}  // namespace detail

template <typename T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path) {
  nlohmann::json manifest;
  manifest["dtype"] = detail::dtype_name<T>();
  manifest["seed"] = model.seed();
  manifest["config"] = model_config_to_json(model.config());
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : model.params().items()) {
    tensors.push_back({{"name", name},
                       {"shape", tensor.shape()},
                       {"dtype", detail::dtype_name<T>()},
                       {"offset", offset}});
    offset += static_cast<std::uint64_t>(tensor.numel()) * sizeof(T);
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint: " + path.string());
  out.write("MDA1", 4);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : model.params().items()) {
    out.write(reinterpret_cast<const char*>(tensor.values().data()),
              static_cast<std::streamsize>(tensor.numel() * sizeof(T)));
  }
  if (!out) throw DataError("short write on checkpoint: " + path.string());
}

inline nlohmann::json read_checkpoint_manifest(const std::filesystem::path& path,
                                               std::uint64_t* data_offset = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "MDA1") {
    throw DataError("checkpoint " + path.string() + ": bad magic (expected MDA1)");
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError("checkpoint " + path.string() + ": truncated manifest");
  if (data_offset) *data_offset = 4 + sizeof(len) + len;
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint " + path.string() + ": bad manifest: " + e.what());
  }
}

template <typename T>
Model<T> load_checkpoint(const std::filesystem::path& path) {
  std::uint64_t data_offset = 0;
  const nlohmann::json manifest = read_checkpoint_manifest(path, &data_offset);
  if (manifest.at("dtype").get<std::string>() != detail::dtype_name<T>()) {
    throw DataError("checkpoint " + path.string() + ": dtype " +
                    manifest.at("dtype").get<std::string>() + " does not match the run precision " +
                    detail::dtype_name<T>());
  }
  Model<T> model(model_config_from_json(manifest.at("config")),
                 manifest.at("seed").get<std::uint64_t>());

  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path.string());
  for (const auto& entry : manifest.at("tensors")) {
    const std::string name = entry.at("name").get<std::string>();
    if (!model.params().contains(name)) {
      throw DataError("checkpoint " + path.string() + ": manifest names tensor \"" + name +
                      "\" which variant " + variant_name(model.config().variant) +
                      " does not define");
    }
    const Tensor<T>& tensor = model.params().find(name);
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != tensor.shape()) {
      throw DataError("checkpoint " + path.string() + ": tensor \"" + name + "\" has shape " +
                      shape_str(shape) + ", model expects " + shape_str(tensor.shape()));
    }
    in.seekg(static_cast<std::streamoff>(data_offset + entry.at("offset").get<std::uint64_t>()));
    in.read(reinterpret_cast<char*>(tensor.mutable_values().data()),
            static_cast<std::streamsize>(tensor.numel() * sizeof(T)));
    if (!in) throw DataError("checkpoint " + path.string() + ": truncated data for \"" + name + "\"");
  }
  return model;
}

}  // namespace mda
