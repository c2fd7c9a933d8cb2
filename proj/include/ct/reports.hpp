#pragma once

#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "ct/influence.hpp"

namespace ct {

// ---- hashing ----

inline std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int dlen = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, data, len) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &dlen) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  out.reserve(dlen * 2);
  for (unsigned int i = 0; i < dlen; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

inline std::string sha256_hex(const std::string& s) {
  return sha256_hex(s.data(), s.size());
}

inline std::string sha256_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot hash missing file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string bytes = ss.str();
  return sha256_hex(bytes);
}

// ---- influence CSV ----

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

// Layout: header "token,L0,...,L{n-1}", one row per token occurrence in
// sequence order, values with three decimal places.
inline void export_influence_csv(const InfluenceTable& table,
                                 const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "token";
  for (int l = 0; l < table.n_layers; ++l) f << ",L" << l;
  f << "\n";
  for (std::size_t t = 0; t < table.tokens.size(); ++t) {
    f << table.tokens[t];
    for (int l = 0; l < table.n_layers; ++l)
      f << "," << format_fixed(table.values[t][static_cast<std::size_t>(l)], 3);
    f << "\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

inline InfluenceTable load_influence_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for read: " + path);
  InfluenceTable table;
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty influence csv: " + path);
  table.n_layers = static_cast<int>(std::count(line.begin(), line.end(), ','));
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    table.tokens.push_back(cell);
    std::vector<double> row;
    while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
    if (static_cast<int>(row.size()) != table.n_layers)
      throw IoError("ragged influence csv row in " + path);
    table.values.push_back(std::move(row));
  }
  table.layer_active.assign(static_cast<std::size_t>(table.n_layers), true);
  return table;
}

// ---- faithfulness CSV ----

struct FaithfulnessRow {
  std::string method;
  int n = 0;           // grid value
  int n_selected = 0;  // edges handed to selection (grid value clamped)
  int n_pruned = 0;    // edges surviving connectivity pruning
  double raw = 0.0;
  double normalized = 0.0;
};

inline void export_faithfulness_csv(const std::vector<FaithfulnessRow>& rows,
                                    const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "method,n,n_selected,n_pruned,faithfulness_raw,faithfulness_normalized\n";
  for (const auto& r : rows) {
    f << r.method << "," << r.n << "," << r.n_selected << "," << r.n_pruned
      << "," << format_fixed(r.raw, 6) << "," << format_fixed(r.normalized, 6)
      << "\n";
  }
  if (!f) throw IoError("write failed: " + path);
}

inline std::vector<FaithfulnessRow> load_faithfulness_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for read: " + path);
  std::vector<FaithfulnessRow> rows;
  std::string line;
  std::getline(f, line);  // header
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    FaithfulnessRow r;
    std::string cell;
    std::getline(ss, r.method, ',');
    std::getline(ss, cell, ',');
    r.n = std::stoi(cell);
    std::getline(ss, cell, ',');
    r.n_selected = std::stoi(cell);
    std::getline(ss, cell, ',');
    r.n_pruned = std::stoi(cell);
    std::getline(ss, cell, ',');
    r.raw = std::stod(cell);
    std::getline(ss, cell, ',');
    r.normalized = std::stod(cell);
    rows.push_back(std::move(r));
  }
  return rows;
}

// ---- thought-process trace ----

struct LayerTopToken {
  std::string token;
  double score = 0.0;
};

// One concrete reading of a reasoning trace: per layer, the top-k tokens by
// mean influence over the batch; per token, the layer where its mean
// influence peaks. Ties fall back to sequence (first-appearance) order.
struct ThoughtTrace {
  std::string method;
  int top_k = 3;
  int n_layers = 0;
  std::vector<std::vector<LayerTopToken>> per_layer_top;   // [layer][rank]
  std::vector<std::pair<std::string, int>> peak_layer;     // appearance order
};

inline ThoughtTrace infer_thought_process(const std::vector<InfluenceTable>& tables,
                                          int top_k = 3) {
  if (tables.empty())
    throw InputError("infer_thought_process: need at least one table");
  const int n_layers = tables[0].n_layers;
  for (const auto& t : tables)
    if (t.n_layers != n_layers)
      throw InputError("infer_thought_process: tables disagree on layer count");

  // Mean influence per distinct token word, tracked in appearance order.
  std::vector<std::string> order;
  std::map<std::string, std::vector<double>> sums;
  std::map<std::string, int> counts;
  for (const auto& table : tables) {
    for (std::size_t t = 0; t < table.tokens.size(); ++t) {
      const std::string& w = table.tokens[t];
      if (!counts.count(w)) {
        order.push_back(w);
        sums[w].assign(static_cast<std::size_t>(n_layers), 0.0);
        counts[w] = 0;
      }
      ++counts[w];
      for (int l = 0; l < n_layers; ++l)
        sums[w][static_cast<std::size_t>(l)] += table.values[t][static_cast<std::size_t>(l)];
    }
  }

  ThoughtTrace trace;
  trace.method = tables[0].method;
  trace.top_k = top_k;
  trace.n_layers = n_layers;
  trace.per_layer_top.resize(static_cast<std::size_t>(n_layers));
  for (int l = 0; l < n_layers; ++l) {
    std::vector<std::size_t> idx(order.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    auto mean_at = [&](std::size_t i) {
      return sums[order[i]][static_cast<std::size_t>(l)] / counts[order[i]];
    };
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return mean_at(a) > mean_at(b);
    });
    auto& top = trace.per_layer_top[static_cast<std::size_t>(l)];
    for (std::size_t r = 0; r < idx.size() && r < static_cast<std::size_t>(top_k); ++r)
      top.push_back({order[idx[r]], mean_at(idx[r])});
  }
  for (const std::string& w : order) {
    int best = 0;
    double best_v = sums[w][0] / counts[w];
    for (int l = 1; l < n_layers; ++l) {
      const double v = sums[w][static_cast<std::size_t>(l)] / counts[w];
      if (v > best_v) {
        best_v = v;
        best = l;
      }
    }
    trace.peak_layer.emplace_back(w, best);
  }
  return trace;
}

inline void save_thought_trace(const ThoughtTrace& trace, const std::string& path) {
  nlohmann::ordered_json j;
  j["report"] =
      "top-k tokens per layer by mean self-influence over the batch, plus the "
      "layer index of each token's peak mean influence";
  j["method"] = trace.method;
  j["top_k"] = trace.top_k;
  nlohmann::ordered_json layers = nlohmann::ordered_json::array();
  for (int l = 0; l < trace.n_layers; ++l) {
    nlohmann::ordered_json top = nlohmann::ordered_json::array();
    for (const auto& tt : trace.per_layer_top[static_cast<std::size_t>(l)])
      top.push_back({{"token", tt.token}, {"score", tt.score}});
    layers.push_back({{"layer", l}, {"top", std::move(top)}});
  }
  j["layers"] = std::move(layers);
  nlohmann::ordered_json traj = nlohmann::ordered_json::array();
  for (const auto& [token, layer] : trace.peak_layer)
    traj.push_back({{"token", token}, {"peak_layer", layer}});
  j["trajectory"] = std::move(traj);
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  f << j.dump(1) << "\n";
}

// ---- run manifest ----

struct FileRecord {
  std::string name;  // relative to the output directory
  std::string stage;
  std::string sha256;
};

struct StageRecord {
  std::string name;
  std::string status;  // done | skipped | failed
  std::string fingerprint;
  double seconds = 0.0;
  nlohmann::ordered_json info = nlohmann::ordered_json::object();
};

struct RunManifest {
  int version = 1;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
  std::vector<StageRecord> stages;
  std::vector<FileRecord> files;
  std::optional<std::string> failed_stage;

  const StageRecord* stage(const std::string& name) const {
    for (const auto& s : stages)
      if (s.name == name) return &s;
    return nullptr;
  }

  std::vector<FileRecord> files_of_stage(const std::string& name) const {
    std::vector<FileRecord> out;
    for (const auto& f : files)
      if (f.stage == name) out.push_back(f);
    return out;
  }
};

inline void save_manifest(const RunManifest& m, const std::string& path) {
  nlohmann::ordered_json j;
  j["version"] = m.version;
  j["config"] = m.config;
  nlohmann::ordered_json stages = nlohmann::ordered_json::array();
  for (const auto& s : m.stages)
    stages.push_back({{"name", s.name},
                      {"status", s.status},
                      {"fingerprint", s.fingerprint},
                      {"seconds", s.seconds},
                      {"info", s.info}});
  j["stages"] = std::move(stages);
  nlohmann::ordered_json files = nlohmann::ordered_json::array();
  for (const auto& f : m.files)
    files.push_back({{"name", f.name}, {"stage", f.stage}, {"sha256", f.sha256}});
  j["files"] = std::move(files);
  if (m.failed_stage)
    j["failed_stage"] = *m.failed_stage;
  else
    j["failed_stage"] = nullptr;
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  f << j.dump(1) << "\n";
}

inline std::optional<RunManifest> try_load_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) return std::nullopt;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (...) {
    return std::nullopt;
  }
  RunManifest m;
  m.version = j.value("version", 1);
  m.config = j.value("config", nlohmann::json::object());
  for (const auto& s : j.value("stages", nlohmann::json::array())) {
    StageRecord r;
    r.name = s.at("name").get<std::string>();
    r.status = s.at("status").get<std::string>();
    r.fingerprint = s.at("fingerprint").get<std::string>();
    r.seconds = s.value("seconds", 0.0);
    r.info = s.value("info", nlohmann::json::object());
    m.stages.push_back(std::move(r));
  }
  for (const auto& fr : j.value("files", nlohmann::json::array()))
    m.files.push_back({fr.at("name").get<std::string>(),
                       fr.at("stage").get<std::string>(),
                       fr.at("sha256").get<std::string>()});
  if (j.contains("failed_stage") && !j.at("failed_stage").is_null())
    m.failed_stage = j.at("failed_stage").get<std::string>();
  return m;
}

}  // namespace ct
