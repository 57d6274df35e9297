#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bissm/model.hpp"

namespace bissm {

// Model checkpoint container, little-endian throughout:
//   magic "FMBA" | u32 version | u32 config-json length + bytes |
//   u32 param count | per param: u16 name length + name, u8 ndim,
//   ndim x u32 dims, f32 data.
inline constexpr char kCheckpointMagic[4] = {'F', 'M', 'B', 'A'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename U>
void write_le(std::ostream& os, U v) {
  static_assert(std::is_trivially_copyable_v<U>);
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U read_le(std::istream& is) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw IoError("checkpoint: truncated file");
  return v;
}

inline nlohmann::json config_to_json(const ModelConfig& c, std::optional<TaskScheme> scheme) {
  nlohmann::json j;
  j["variant"] = to_string(c.variant);
  j["num_blocks"] = c.num_blocks;
  j["embed_dim"] = c.embed_dim;
  j["state_size"] = c.state_size;
  j["patch_c"] = c.patch_c;
  j["patch_t"] = c.patch_t;
  j["mask_ratio"] = c.mask_ratio;
  j["expansion"] = c.expansion;
  j["head"] = to_string(c.head);
  j["head_hidden"] = c.head_hidden;
  j["input_channels"] = c.input_channels;
  j["input_samples"] = c.input_samples;
  j["scheme"] = scheme ? to_string(*scheme) : "";
  return j;
}

inline std::pair<ModelConfig, std::optional<TaskScheme>> config_from_json(const nlohmann::json& j) {
  ModelConfig c = ModelConfig::preset(j.at("variant").get<std::string>());
  c.num_blocks = j.at("num_blocks").get<Dim>();
  c.embed_dim = j.at("embed_dim").get<Dim>();
  c.state_size = j.at("state_size").get<Dim>();
  c.patch_c = j.at("patch_c").get<Dim>();
  c.patch_t = j.at("patch_t").get<Dim>();
  c.mask_ratio = j.at("mask_ratio").get<double>();
  c.expansion = j.at("expansion").get<Dim>();
  c.head = j.at("head").get<std::string>() == "mamba_enhanced" ? HeadKind::mamba_enhanced
                                                               : HeadKind::linear;
  c.head_hidden = j.at("head_hidden").get<Dim>();
  c.input_channels = j.at("input_channels").get<Dim>();
  c.input_samples = j.at("input_samples").get<Dim>();
  const std::string s = j.at("scheme").get<std::string>();
  std::optional<TaskScheme> scheme;
  if (!s.empty()) scheme = scheme_from_string(s);
  return {c, scheme};
}

}  // namespace detail

template <typename T>
void save_checkpoint(Model<T>& model, const std::string& path,
                     std::optional<TaskScheme> scheme = std::nullopt) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("checkpoint: cannot open " + path + " for writing");
  os.write(kCheckpointMagic, 4);
  detail::write_le<std::uint32_t>(os, kCheckpointVersion);

  const std::string cfg_json = detail::config_to_json(model.cfg, scheme).dump();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(cfg_json.size()));
  os.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));

  auto params = model.named_parameters();
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  std::vector<float> buf;
  for (auto& [name, t] : params) {
    detail::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.shape().size()));
    for (Dim d : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    buf.resize(static_cast<std::size_t>(t.numel()));
    auto vals = t.values();
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>(vals[i]);
    os.write(reinterpret_cast<const char*>(buf.data()),
             static_cast<std::streamsize>(buf.size() * sizeof(float)));
  }
  if (!os) throw IoError("checkpoint: write failed for " + path);
}

template <typename T>
struct LoadedModel {
  Model<T> model;
  std::optional<TaskScheme> scheme;
};

template <typename T = float>
LoadedModel<T> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError("checkpoint: bad magic in " + path);
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw IoError("checkpoint: unsupported version " + std::to_string(version));

  const auto cfg_len = detail::read_le<std::uint32_t>(is);
  std::string cfg_json(cfg_len, '\0');
  if (!is.read(cfg_json.data(), cfg_len)) throw IoError("checkpoint: truncated config block");
  auto [cfg, scheme] = detail::config_from_json(nlohmann::json::parse(cfg_json));

  LoadedModel<T> out{Model<T>::init(cfg, 0, scheme), scheme};

  const auto count = detail::read_le<std::uint32_t>(is);
  std::vector<float> buf;
  std::size_t applied = 0;
  auto params = out.model.named_parameters();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = detail::read_le<std::uint16_t>(is);
    std::string name(name_len, '\0');
    if (!is.read(name.data(), name_len)) throw IoError("checkpoint: truncated name");
    const auto ndim = detail::read_le<std::uint8_t>(is);
    Shape shape(ndim);
    Dim numel = 1;
    for (auto& d : shape) {
      d = static_cast<Dim>(detail::read_le<std::uint32_t>(is));
      numel *= d;
    }
    buf.resize(static_cast<std::size_t>(numel));
    if (!is.read(reinterpret_cast<char*>(buf.data()),
                 static_cast<std::streamsize>(buf.size() * sizeof(float))))
      throw IoError("checkpoint: truncated data for " + name);

    auto it = std::find_if(params.begin(), params.end(),
                           [&](const auto& p) { return p.first == name; });
    if (it == params.end()) throw IoError("checkpoint: unknown parameter " + name);
    if (it->second.shape() != shape)
      throw IoError("checkpoint: shape mismatch for " + name + ": file " +
                    detail::shape_str(shape) + " vs model " + detail::shape_str(it->second.shape()));
    auto dst = it->second.values_mut();
    for (std::size_t k = 0; k < buf.size(); ++k) dst[k] = static_cast<T>(buf[k]);
    ++applied;
  }
  if (applied != params.size())
    throw IoError("checkpoint: file holds " + std::to_string(applied) + " of " +
                  std::to_string(params.size()) + " model parameters");
  return out;
}

}  // namespace bissm
