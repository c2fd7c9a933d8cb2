#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ct/reports.hpp"

using namespace ct;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

InfluenceTable sample_table(int tokens, int layers) {
  InfluenceTable t;
  t.n_layers = layers;
  for (int i = 0; i < tokens; ++i) {
    t.tokens.push_back("w" + std::to_string(i));
    std::vector<double> row;
    for (int l = 0; l < layers; ++l)
      row.push_back(0.001 * (i + 1) * (l + 1));
    t.values.push_back(std::move(row));
  }
  t.layer_active.assign(static_cast<std::size_t>(layers), true);
  t.layer_damping.assign(static_cast<std::size_t>(layers), 0.01);
  return t;
}

}  // namespace

TEST(Sha256, KnownVector) {
  EXPECT_EQ(sha256_hex(std::string("abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(sha256_hex(std::string("")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(InfluenceCsv, LayoutTwelveByTwelve) {
  // 12 tokens x 12 layers: header plus 12 rows, 13 columns each.
  InfluenceTable t = sample_table(12, 12);
  const std::string path = tmp_path("ct_influence_12.csv");
  export_influence_csv(t, path);
  std::ifstream f(path);
  std::string line;
  int lines = 0;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    EXPECT_EQ(std::count(line.begin(), line.end(), ','), 12) << line;
    if (lines == 0) EXPECT_EQ(line.rfind("token,L0,", 0), 0u);
    ++lines;
  }
  EXPECT_EQ(lines, 13);
  std::filesystem::remove(path);
}

TEST(InfluenceCsv, DuplicateTokenRowsAndZeroColumns) {
  InfluenceTable t;
  t.n_layers = 3;
  t.tokens = {"Amy", "went", "Amy"};
  t.values = {{1.5, 0.0, 0.25}, {0.75, 0.0, 0.5}, {1.5, 0.0, 0.25}};
  t.layer_active = {true, false, true};
  t.layer_damping = {0.01, 0.01, 0.01};
  const std::string path = tmp_path("ct_influence_dup.csv");
  export_influence_csv(t, path);
  const std::string body = read_file(path);
  EXPECT_EQ(body,
            "token,L0,L1,L2\n"
            "Amy,1.500,0.000,0.250\n"
            "went,0.750,0.000,0.500\n"
            "Amy,1.500,0.000,0.250\n");
  std::filesystem::remove(path);
}

TEST(InfluenceCsv, RoundTripAtEmittedPrecision) {
  InfluenceTable t = sample_table(7, 4);
  t.values[3][2] = 0.123456789;  // quantized to 0.123 on emit
  const std::string path = tmp_path("ct_influence_rt.csv");
  export_influence_csv(t, path);
  InfluenceTable loaded = load_influence_csv(path);
  EXPECT_EQ(loaded.tokens, t.tokens);
  EXPECT_EQ(loaded.n_layers, t.n_layers);
  for (std::size_t i = 0; i < t.tokens.size(); ++i)
    for (int l = 0; l < t.n_layers; ++l)
      EXPECT_NEAR(loaded.values[i][static_cast<std::size_t>(l)],
                  t.values[i][static_cast<std::size_t>(l)], 5e-4);
  // Emitting the loaded table reproduces the file byte for byte.
  const std::string path2 = tmp_path("ct_influence_rt2.csv");
  export_influence_csv(loaded, path2);
  EXPECT_EQ(read_file(path), read_file(path2));
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}

TEST(FaithfulnessCsv, RowsAndRoundTrip) {
  std::vector<FaithfulnessRow> rows = {
      {"eap", 30, 30, 24, 1.234567, 0.654321},
      {"eap-ig", 30, 30, 28, 2.0, 1.0},
      {"eap-ig-kl", 1000, 479, 479, 2.5, 1.0},
  };
  const std::string path = tmp_path("ct_faith.csv");
  export_faithfulness_csv(rows, path);
  auto loaded = load_faithfulness_csv(path);
  ASSERT_EQ(loaded.size(), rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(loaded[i].method, rows[i].method);
    EXPECT_EQ(loaded[i].n, rows[i].n);
    EXPECT_EQ(loaded[i].n_selected, rows[i].n_selected);
    EXPECT_EQ(loaded[i].n_pruned, rows[i].n_pruned);
    EXPECT_NEAR(loaded[i].raw, rows[i].raw, 1e-6);
    EXPECT_NEAR(loaded[i].normalized, rows[i].normalized, 1e-6);
  }
  std::filesystem::remove(path);
}

TEST(ThoughtTrace, MaxTokenLeadsLayerZero) {
  InfluenceTable t;
  t.n_layers = 2;
  t.tokens = {"Then", "Christina", "Amy"};
  t.values = {{0.5, 0.2}, {1.834, 0.3}, {0.9, 0.8}};
  t.layer_active = {true, true};
  t.layer_damping = {0.01, 0.01};
  ThoughtTrace trace = infer_thought_process({t}, 2);
  ASSERT_EQ(trace.per_layer_top.size(), 2u);
  EXPECT_EQ(trace.per_layer_top[0][0].token, "Christina");
  EXPECT_DOUBLE_EQ(trace.per_layer_top[0][0].score, 1.834);
  EXPECT_EQ(trace.per_layer_top[0][1].token, "Amy");
  // Peak layers: Christina peaks at layer 0, Amy at layer 0 as well.
  for (const auto& [token, layer] : trace.peak_layer)
    if (token == "Christina") EXPECT_EQ(layer, 0);
}

TEST(ThoughtTrace, AllEqualFallsBackToSequenceOrder) {
  InfluenceTable t = sample_table(4, 2);
  for (auto& row : t.values) row = {1.0, 1.0};
  ThoughtTrace trace = infer_thought_process({t}, 3);
  ASSERT_EQ(trace.per_layer_top[0].size(), 3u);
  EXPECT_EQ(trace.per_layer_top[0][0].token, "w0");
  EXPECT_EQ(trace.per_layer_top[0][1].token, "w1");
  EXPECT_EQ(trace.per_layer_top[0][2].token, "w2");
  // Tied peak resolves to the lowest layer.
  for (const auto& [token, layer] : trace.peak_layer) EXPECT_EQ(layer, 0);
}

TEST(ThoughtTrace, SingleLayerPeaksThere) {
  InfluenceTable t = sample_table(5, 1);
  ThoughtTrace trace = infer_thought_process({t});
  for (const auto& [token, layer] : trace.peak_layer) EXPECT_EQ(layer, 0);
}

TEST(ThoughtTrace, AveragesAcrossBatchByTokenWord) {
  InfluenceTable a = sample_table(2, 1);
  a.tokens = {"Amy", "went"};
  a.values = {{2.0}, {1.0}};
  InfluenceTable b = a;
  b.values = {{4.0}, {1.0}};
  ThoughtTrace trace = infer_thought_process({a, b}, 1);
  EXPECT_EQ(trace.per_layer_top[0][0].token, "Amy");
  EXPECT_DOUBLE_EQ(trace.per_layer_top[0][0].score, 3.0);  // mean of 2 and 4
}

TEST(ThoughtTrace, SerializationShape) {
  InfluenceTable t = sample_table(3, 2);
  ThoughtTrace trace = infer_thought_process({t}, 2);
  trace.method = "eap";
  const std::string path = tmp_path("ct_trace.json");
  save_thought_trace(trace, path);
  std::ifstream f(path);
  nlohmann::json j = nlohmann::json::parse(f);
  EXPECT_EQ(j.at("method"), "eap");
  EXPECT_EQ(j.at("layers").size(), 2u);
  EXPECT_EQ(j.at("layers")[0].at("top").size(), 2u);
  EXPECT_EQ(j.at("trajectory").size(), 3u);
  EXPECT_TRUE(j.contains("report"));
  std::filesystem::remove(path);
}

TEST(Manifest, SaveLoadRoundTrip) {
  RunManifest m;
  m.config = {{"seed", 7}};
  m.stages.push_back({"dataset", "done", "fp1", 0.5, {{"rows", 10}}});
  m.stages.push_back({"train", "failed", "fp2", 1.5, {}});
  m.files.push_back({"dataset.jsonl", "dataset", std::string(64, 'a')});
  m.failed_stage = "train";
  const std::string path = tmp_path("ct_manifest.json");
  save_manifest(m, path);
  auto loaded = try_load_manifest(path);
  ASSERT_TRUE(loaded.has_value());
  EXPECT_EQ(loaded->stages.size(), 2u);
  EXPECT_EQ(loaded->stage("dataset")->status, "done");
  EXPECT_EQ(loaded->stage("train")->status, "failed");
  EXPECT_EQ(loaded->files.size(), 1u);
  EXPECT_EQ(loaded->files[0].sha256, std::string(64, 'a'));
  ASSERT_TRUE(loaded->failed_stage.has_value());
  EXPECT_EQ(*loaded->failed_stage, "train");
  std::filesystem::remove(path);
  EXPECT_FALSE(try_load_manifest(tmp_path("ct_absent.json")).has_value());
}
