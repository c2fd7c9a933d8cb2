#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ct/model.hpp"

namespace ct {

// Parameter checkpoint: magic header, a JSON manifest describing the config
// and tensor layout, then one little-endian f64 blob in manifest order.
inline constexpr char kCheckpointMagic[8] = {'C', 'T', 'C', 'K',
                                             'P', 'T', '0', '1'};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return nlohmann::json{{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
                        {"d_model", c.d_model},     {"d_head", c.d_head},
                        {"d_mlp", c.d_mlp},         {"vocab_size", c.vocab_size},
                        {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_mlp = j.at("d_mlp").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  return c;
}

inline void save_checkpoint(const ModelParams& params, const std::string& path) {
  static_assert(sizeof(double) == 8);
  nlohmann::json manifest;
  manifest["version"] = 1;
  manifest["config"] = config_to_json(params.config);
  nlohmann::json plist = nlohmann::json::array();
  for (std::size_t i = 0; i < params.paths.size(); ++i)
    plist.push_back({{"path", params.paths[i]}, {"shape", params.tensors[i].shape}});
  manifest["params"] = plist;
  const std::string header = manifest.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for write: " + path);
  f.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  const std::uint64_t hlen = header.size();
  f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  f.write(header.data(), static_cast<std::streamsize>(header.size()));
  for (const auto& t : params.tensors)
    f.write(reinterpret_cast<const char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!f) throw IoError("write failed: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for read: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0)
    throw IoError("bad checkpoint magic in " + path);
  std::uint64_t hlen = 0;
  f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string header(hlen, '\0');
  f.read(header.data(), static_cast<std::streamsize>(hlen));
  if (!f) throw IoError("truncated checkpoint header in " + path);
  nlohmann::json manifest = nlohmann::json::parse(header);
  if (manifest.at("version").get<int>() != 1)
    throw IoError("unsupported checkpoint version in " + path);

  ModelParams out;
  out.config = config_from_json(manifest.at("config"));
  for (const auto& e : manifest.at("params")) {
    const std::string p = e.at("path").get<std::string>();
    const auto shape = e.at("shape").get<std::vector<std::size_t>>();
    Tensor t = Tensor::zeros(shape);
    f.read(reinterpret_cast<char*>(t.data.data()),
           static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!f) throw IoError("truncated checkpoint tensor '" + p + "' in " + path);
    out.index[p] = out.tensors.size();
    out.paths.push_back(p);
    out.tensors.push_back(std::move(t));
  }
  return out;
}

}  // namespace ct
