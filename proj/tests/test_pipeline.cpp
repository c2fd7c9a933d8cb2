#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "ct/pipeline.hpp"

using namespace ct;
namespace fs = std::filesystem;

namespace {

PipelineConfig mini_config(const std::string& out_dir) {
  PipelineConfig cfg;
  cfg.model = ModelConfig{2, 2, 16, 8, 32, 0, 32};
  cfg.dataset_n = 120;
  cfg.seed = 3;
  cfg.n_grid = {5, 10, 20};
  cfg.ig_steps = 3;
  cfg.train_steps = 120;
  cfg.train_batch = 8;
  cfg.lr = 5e-3;
  cfg.score_examples = 6;
  cfg.faithfulness_examples = 6;
  cfg.influence_examples = 1;
  cfg.influence_n = 10;
  cfg.neumann_k = 30;
  cfg.power_iters = 10;
  cfg.out_dir = out_dir;
  return cfg;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  return p.string();
}

}  // namespace

TEST(PipelineConfigTest, Validation) {
  PipelineConfig cfg = mini_config("x");
  cfg.n_grid = {10, 10};
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = mini_config("x");
  cfg.methods.clear();
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = mini_config("x");
  cfg.dataset_n = 0;
  EXPECT_THROW(cfg.validate(), InputError);
  cfg = mini_config("x");
  cfg.validate();
  EXPECT_EQ(cfg.model.vocab_size, ioi::vocabulary().size());
}

TEST(PipelineConfigTest, JsonRoundTrip) {
  PipelineConfig cfg = mini_config("some/dir");
  cfg.methods = {Method::EAP_IG};
  cfg.use_corrupted_hard = true;
  nlohmann::ordered_json j = pipeline_config_to_json(cfg);
  PipelineConfig back = pipeline_config_from_json(j);
  EXPECT_EQ(back.dataset_n, cfg.dataset_n);
  EXPECT_EQ(back.methods.size(), 1u);
  EXPECT_EQ(back.methods[0], Method::EAP_IG);
  EXPECT_EQ(back.n_grid, cfg.n_grid);
  EXPECT_EQ(back.out_dir, cfg.out_dir);
  EXPECT_EQ(back.use_corrupted_hard, true);
  EXPECT_EQ(back.train_steps, cfg.train_steps);
}

TEST(Pipeline, EndToEndArtifactsAndDeterminism) {
  const std::string dir = fresh_dir("ct_pipe_e2e");
  PipelineConfig cfg = mini_config(dir);
  ReportBundle bundle = run_pipeline(cfg);

  // Every promised artifact exists.
  EXPECT_TRUE(fs::exists(bundle.dataset_path));
  EXPECT_TRUE(fs::exists(bundle.model_path));
  for (const auto& p : bundle.score_paths) EXPECT_TRUE(fs::exists(p)) << p;
  for (const auto& p : bundle.circuit_paths) EXPECT_TRUE(fs::exists(p)) << p;
  for (const auto& p : bundle.influence_paths) EXPECT_TRUE(fs::exists(p)) << p;
  for (const auto& p : bundle.trace_paths) EXPECT_TRUE(fs::exists(p)) << p;
  EXPECT_TRUE(fs::exists(bundle.faithfulness_path));
  EXPECT_TRUE(fs::exists(bundle.manifest_path));

  // faithfulness.csv has one row per (method, n).
  auto rows = load_faithfulness_csv(bundle.faithfulness_path);
  EXPECT_EQ(rows.size(), cfg.methods.size() * cfg.n_grid.size());

  // The manifest lists every emitted file with its hash.
  auto manifest = try_load_manifest(bundle.manifest_path);
  ASSERT_TRUE(manifest.has_value());
  EXPECT_FALSE(manifest->failed_stage.has_value());
  for (const auto& fr : manifest->files) {
    const std::string full = dir + "/" + fr.name;
    ASSERT_TRUE(fs::exists(full)) << fr.name;
    EXPECT_EQ(sha256_file(full), fr.sha256) << fr.name;
  }

  // Circuit files round-trip with faithfulness attached.
  Circuit c = load_circuit(bundle.circuit_paths.front());
  ASSERT_TRUE(c.faithfulness_normalized.has_value());

  // Re-running with the identical config reproduces the CSVs byte for byte
  // and every artifact hash.
  const std::string csv_before = read_file(bundle.faithfulness_path);
  std::vector<std::string> influence_before;
  for (const auto& p : bundle.influence_paths)
    influence_before.push_back(read_file(p));
  const std::string dir2 = fresh_dir("ct_pipe_e2e_rerun");
  PipelineConfig cfg2 = mini_config(dir2);
  ReportBundle bundle2 = run_pipeline(cfg2);
  EXPECT_EQ(read_file(bundle2.faithfulness_path), csv_before);
  for (std::size_t i = 0; i < bundle2.influence_paths.size(); ++i)
    EXPECT_EQ(read_file(bundle2.influence_paths[i]), influence_before[i]);
  auto manifest2 = try_load_manifest(bundle2.manifest_path);
  ASSERT_EQ(manifest->files.size(), manifest2->files.size());
  for (std::size_t i = 0; i < manifest->files.size(); ++i)
    EXPECT_EQ(manifest->files[i].sha256, manifest2->files[i].sha256)
        << manifest->files[i].name;

  fs::remove_all(dir2);
  // dir retained for the resume test below via a fixed name.
}

TEST(Pipeline, ResumeSkipsUpToDateStages) {
  const std::string dir = fresh_dir("ct_pipe_resume");
  PipelineConfig cfg = mini_config(dir);
  run_pipeline(cfg);

  cfg.resume = true;
  ReportBundle again = run_pipeline(cfg);
  auto manifest = try_load_manifest(again.manifest_path);
  ASSERT_TRUE(manifest.has_value());
  for (const char* stage : {"dataset", "train", "score", "circuits", "influence"})
    EXPECT_EQ(manifest->stage(stage)->status, "skipped") << stage;

  // Changing a downstream knob re-runs only the affected stages.
  cfg.influence_n = 12;
  ReportBundle third = run_pipeline(cfg);
  auto manifest3 = try_load_manifest(third.manifest_path);
  EXPECT_EQ(manifest3->stage("dataset")->status, "skipped");
  EXPECT_EQ(manifest3->stage("train")->status, "skipped");
  EXPECT_EQ(manifest3->stage("score")->status, "skipped");
  EXPECT_EQ(manifest3->stage("circuits")->status, "skipped");
  EXPECT_EQ(manifest3->stage("influence")->status, "done");
  fs::remove_all(dir);
}

TEST(Pipeline, MissingUpstreamArtifactFails) {
  const std::string dir = fresh_dir("ct_pipe_missing");
  PipelineConfig cfg = mini_config(dir);
  cfg.stages = {"score"};  // needs dataset.jsonl and model.ckpt
  EXPECT_THROW(run_pipeline(cfg), Error);
  auto manifest = try_load_manifest(dir + "/run-manifest.json");
  ASSERT_TRUE(manifest.has_value());
  ASSERT_TRUE(manifest->failed_stage.has_value());
  fs::remove_all(dir);
}

TEST(Pipeline, StageSubsetsCompose) {
  const std::string dir = fresh_dir("ct_pipe_subset");
  PipelineConfig cfg = mini_config(dir);
  cfg.stages = {"dataset", "train"};
  run_pipeline(cfg);
  EXPECT_TRUE(fs::exists(dir + "/model.ckpt"));
  EXPECT_FALSE(fs::exists(dir + "/faithfulness.csv"));

  cfg.stages = {"score", "circuits", "influence"};
  ReportBundle bundle = run_pipeline(cfg);
  EXPECT_TRUE(fs::exists(bundle.faithfulness_path));
  auto manifest = try_load_manifest(bundle.manifest_path);
  EXPECT_EQ(manifest->stage("dataset")->status, "disabled");
  EXPECT_EQ(manifest->stage("score")->status, "done");
  fs::remove_all(dir);
}

// ---- command line ----

namespace {

struct CliRunner {
  std::string binary;
  std::string dir;

  int run(const std::string& args) const {
    const std::string cmd = binary + " " + args + " >> " + dir +
                            "/cli_log.txt 2>&1";
    return std::system(cmd.c_str());
  }
};

}  // namespace

TEST(Cli, SubcommandsEndToEnd) {
  const char* cli = std::getenv("CT_CLI");
  if (!cli || !fs::exists(cli))
    GTEST_SKIP() << "CT_CLI not set; run under ctest";
  const std::string dir = fresh_dir("ct_cli_e2e");
  fs::create_directories(dir);
  CliRunner r{cli, dir};

  EXPECT_EQ(r.run("--out " + dir + " generate --n 60 --dataset-out dataset.jsonl"), 0);
  EXPECT_TRUE(fs::exists(dir + "/dataset.jsonl"));
  // Library and CLI agree on the dataset bytes for the same seed.
  auto data = ioi::generate(60, 0);
  const std::string lib_path = dir + "/lib_dataset.jsonl";
  ioi::save_jsonl(data, lib_path);
  EXPECT_EQ(read_file(dir + "/dataset.jsonl"), read_file(lib_path));

  EXPECT_EQ(r.run("--out " + dir +
                  " train --layers 2 --heads 2 --d-model 16 --steps 40 --batch 8"),
            0);
  EXPECT_TRUE(fs::exists(dir + "/model.ckpt"));

  EXPECT_EQ(r.run("--out " + dir + " --methods eap score --examples 4"), 0);
  EXPECT_TRUE(fs::exists(dir + "/scores-eap.json"));

  EXPECT_EQ(r.run("--out " + dir + " select --scores scores-eap.json --n 8"), 0);
  EXPECT_TRUE(fs::exists(dir + "/circuit-eap-8.json"));

  EXPECT_EQ(r.run("--out " + dir +
                  " faithfulness --circuit circuit-eap-8.json --examples 4"),
            0);
  EXPECT_TRUE(fs::exists(dir + "/faithfulness.csv"));
  Circuit c = load_circuit(dir + "/circuit-eap-8.json");
  EXPECT_TRUE(c.faithfulness_normalized.has_value());

  EXPECT_EQ(r.run("--out " + dir + " --neumann-k 25 influence --circuit "
                  "circuit-eap-8.json --example-index 0"),
            0);
  EXPECT_TRUE(fs::exists(dir + "/influence-eap.csv"));

  // Unknown flags and absent inputs are reported as nonzero exits.
  EXPECT_NE(r.run("--out " + dir + " generate --bogus-flag 3"), 0);
  EXPECT_NE(r.run("--out " + dir + " select --scores missing.json --n 5"), 0);
  fs::remove_all(dir);
}

TEST(Cli, PipelineSubcommand) {
  const char* cli = std::getenv("CT_CLI");
  if (!cli || !fs::exists(cli))
    GTEST_SKIP() << "CT_CLI not set; run under ctest";
  const std::string dir = fresh_dir("ct_cli_pipe");
  fs::create_directories(dir);

  // Drive the pipeline from a config file plus flag overrides.
  PipelineConfig cfg = mini_config(dir);
  cfg.methods = {Method::EAP};
  {
    std::ofstream f(dir + "/config.json");
    f << pipeline_config_to_json(cfg).dump(1) << "\n";
  }
  CliRunner r{cli, dir};
  EXPECT_EQ(r.run("--out " + dir + " --config " + dir +
                  "/config.json --methods eap --n-grid 5,10 --seed 3 pipeline"),
            0);
  EXPECT_TRUE(fs::exists(dir + "/run-manifest.json"));
  EXPECT_TRUE(fs::exists(dir + "/faithfulness.csv"));
  auto rows = load_faithfulness_csv(dir + "/faithfulness.csv");
  EXPECT_EQ(rows.size(), 2u);
  fs::remove_all(dir);
}
