#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "ct/checkpoint.hpp"
#include "ct/circuit.hpp"
#include "ct/influence.hpp"
#include "ct/ioi.hpp"
#include "ct/reports.hpp"
#include "ct/scoring.hpp"
#include "ct/train.hpp"

namespace ct {

struct PipelineConfig {
  ModelConfig model{4, 4, 64, 16, 256, 0, 32};
  int dataset_n = 1000;
  std::uint64_t seed = 0;
  std::vector<Method> methods = {Method::EAP, Method::EAP_IG, Method::EAP_IG_KL};
  std::vector<int> n_grid = {30,  40,  50,  60,  70,  80,  90,  100, 200,
                             300, 400, 500, 600, 700, 800, 900, 1000};
  int ig_steps = 5;
  double damping = 0.01;
  int neumann_k = 100;
  int power_iters = 30;
  double lr = 3e-3;
  int train_steps = 800;
  int train_batch = 16;
  int score_examples = 64;
  int faithfulness_examples = 64;
  int influence_examples = 2;
  int influence_n = 100;
  int trace_top_k = 3;
  bool use_corrupted_hard = false;
  std::string out_dir = "out";
  bool resume = false;
  std::vector<std::string> stages;  // empty = all of dataset,train,score,circuits,influence

  void validate() {
    if (dataset_n <= 0) throw InputError("config: dataset_n must be positive");
    if (methods.empty()) throw InputError("config: methods must be nonempty");
    for (std::size_t i = 1; i < n_grid.size(); ++i)
      if (n_grid[i] <= n_grid[i - 1])
        throw InputError("config: n_grid must be strictly increasing");
    if (!n_grid.empty() && n_grid.front() < 1)
      throw InputError("config: n_grid entries must be >= 1");
    if (ig_steps < 1) throw InputError("config: ig_steps must be >= 1");
    if (influence_examples < 1 || score_examples < 1 || faithfulness_examples < 1)
      throw InputError("config: example counts must be >= 1");
    if (out_dir.empty()) throw InputError("config: out_dir must be set");
    // The word-level vocabulary is fixed by the task templates.
    const int vocab = ioi::vocabulary().size();
    if (model.vocab_size < vocab) model.vocab_size = vocab;
    model.validate();
  }
};

inline nlohmann::ordered_json pipeline_config_to_json(const PipelineConfig& c) {
  nlohmann::ordered_json j;
  j["model"] = config_to_json(c.model);
  j["dataset_n"] = c.dataset_n;
  j["seed"] = c.seed;
  std::vector<std::string> ms;
  for (Method m : c.methods) ms.push_back(method_name(m));
  j["methods"] = ms;
  j["n_grid"] = c.n_grid;
  j["ig_steps"] = c.ig_steps;
  j["damping"] = c.damping;
  j["neumann_k"] = c.neumann_k;
  j["power_iters"] = c.power_iters;
  j["lr"] = c.lr;
  j["train_steps"] = c.train_steps;
  j["train_batch"] = c.train_batch;
  j["score_examples"] = c.score_examples;
  j["faithfulness_examples"] = c.faithfulness_examples;
  j["influence_examples"] = c.influence_examples;
  j["influence_n"] = c.influence_n;
  j["trace_top_k"] = c.trace_top_k;
  j["use_corrupted_hard"] = c.use_corrupted_hard;
  j["out_dir"] = c.out_dir;
  j["resume"] = c.resume;
  j["stages"] = c.stages;
  return j;
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  if (j.contains("model")) c.model = config_from_json(j.at("model"));
  c.dataset_n = j.value("dataset_n", c.dataset_n);
  c.seed = j.value("seed", c.seed);
  if (j.contains("methods")) {
    c.methods.clear();
    for (const auto& m : j.at("methods"))
      c.methods.push_back(parse_method(m.get<std::string>()));
  }
  if (j.contains("n_grid")) c.n_grid = j.at("n_grid").get<std::vector<int>>();
  c.ig_steps = j.value("ig_steps", c.ig_steps);
  c.damping = j.value("damping", c.damping);
  c.neumann_k = j.value("neumann_k", c.neumann_k);
  c.power_iters = j.value("power_iters", c.power_iters);
  c.lr = j.value("lr", c.lr);
  c.train_steps = j.value("train_steps", c.train_steps);
  c.train_batch = j.value("train_batch", c.train_batch);
  c.score_examples = j.value("score_examples", c.score_examples);
  c.faithfulness_examples = j.value("faithfulness_examples", c.faithfulness_examples);
  c.influence_examples = j.value("influence_examples", c.influence_examples);
  c.influence_n = j.value("influence_n", c.influence_n);
  c.trace_top_k = j.value("trace_top_k", c.trace_top_k);
  c.use_corrupted_hard = j.value("use_corrupted_hard", c.use_corrupted_hard);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.resume = j.value("resume", c.resume);
  if (j.contains("stages"))
    c.stages = j.at("stages").get<std::vector<std::string>>();
  return c;
}

struct ReportBundle {
  std::string out_dir;
  std::string dataset_path;
  std::string model_path;
  std::vector<std::string> score_paths;
  std::vector<std::string> circuit_paths;
  std::string faithfulness_path;
  std::vector<std::string> influence_paths;
  std::vector<std::string> trace_paths;
  std::string manifest_path;
  RunManifest manifest;
};

namespace detail {

class StageRunner {
 public:
  StageRunner(RunManifest& manifest, const std::optional<RunManifest>& previous,
              const std::string& out_dir, bool resume,
              const std::vector<std::string>& enabled)
      : manifest_(manifest), previous_(previous), out_dir_(out_dir),
        resume_(resume), enabled_(enabled) {}

  std::string path(const std::string& name) const { return out_dir_ + "/" + name; }

  bool stage_enabled(const std::string& name) const {
    if (enabled_.empty()) return true;
    for (const auto& s : enabled_)
      if (s == name) return true;
    return false;
  }

  // Runs (or skips) one stage. body() must emit exactly the files it then
  // returns (names relative to out_dir). The fingerprint is only evaluated
  // for enabled stages, so disabled stages never touch upstream artifacts.
  bool run(const std::string& name,
           const std::function<std::string()>& fingerprint_fn,
           const std::function<std::vector<std::string>()>& body) {
    StageRecord rec;
    rec.name = name;
    if (!stage_enabled(name)) {
      rec.status = "disabled";
      manifest_.stages.push_back(rec);
      return false;
    }
    const std::string fingerprint = fingerprint_fn();
    rec.fingerprint = fingerprint;
    if (resume_ && can_skip(name, fingerprint)) {
      rec.status = "skipped";
      rec.info = previous_->stage(name)->info;
      for (const auto& f : previous_->files_of_stage(name))
        manifest_.files.push_back(f);
      manifest_.stages.push_back(rec);
      return false;
    }
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::string> outputs;
    try {
      outputs = body();
    } catch (...) {
      rec.status = "failed";
      manifest_.stages.push_back(rec);
      manifest_.failed_stage = name;
      save_manifest(manifest_, path("run-manifest.json"));
      throw;
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
                      .count();
    rec.status = "done";
    rec.info = std::move(info_);
    info_ = nlohmann::ordered_json::object();
    for (const auto& f : outputs)
      manifest_.files.push_back({f, name, sha256_file(path(f))});
    manifest_.stages.push_back(rec);
    save_manifest(manifest_, path("run-manifest.json"));
    return true;
  }

  // Stage bodies may attach extra metadata for the manifest.
  void note(const std::string& key, const nlohmann::json& value) {
    info_[key] = value;
  }

  std::string file_hash(const std::string& name) const {
    return sha256_file(path(name));
  }

 private:
  RunManifest& manifest_;
  const std::optional<RunManifest>& previous_;
  std::string out_dir_;
  bool resume_;
  std::vector<std::string> enabled_;
  nlohmann::ordered_json info_ = nlohmann::ordered_json::object();

  bool can_skip(const std::string& name, const std::string& fingerprint) const {
    if (!previous_) return false;
    const StageRecord* prev = previous_->stage(name);
    if (!prev || prev->fingerprint != fingerprint) return false;
    if (prev->status != "done" && prev->status != "skipped") return false;
    for (const auto& f : previous_->files_of_stage(name)) {
      const std::string p = out_dir_ + "/" + f.name;
      if (!std::filesystem::exists(p)) return false;
      if (sha256_file(p) != f.sha256) return false;
    }
    return true;
  }
};

inline std::string fingerprint(const nlohmann::ordered_json& j) {
  return sha256_hex(j.dump());
}

}  // namespace detail

// Executes the full flow: generate -> train -> score -> select+evaluate ->
// influence, emitting every artifact plus a hashed manifest. With resume set,
// stages whose fingerprints and output hashes match the previous run are
// skipped.
inline ReportBundle run_pipeline(PipelineConfig cfg) {
  cfg.validate();
  std::filesystem::create_directories(cfg.out_dir);

  ReportBundle bundle;
  bundle.out_dir = cfg.out_dir;
  bundle.manifest_path = cfg.out_dir + "/run-manifest.json";

  std::optional<RunManifest> previous;
  if (cfg.resume) previous = try_load_manifest(bundle.manifest_path);

  RunManifest& manifest = bundle.manifest;
  manifest.config = pipeline_config_to_json(cfg);

  detail::StageRunner runner(manifest, previous, cfg.out_dir, cfg.resume,
                             cfg.stages);

  // Names the phase for failures that happen between stage bodies (loading
  // a prior stage's artifacts, say).
  std::string phase = "dataset";
  try {

  const auto enabled = [&](const char* s) { return runner.stage_enabled(s); };
  const bool wants_dataset = enabled("train") || enabled("score") ||
                             enabled("circuits") || enabled("influence");
  const bool wants_model =
      enabled("score") || enabled("circuits") || enabled("influence");
  const bool wants_scores = enabled("circuits") || enabled("influence");

  // ---- dataset ----
  bundle.dataset_path = runner.path("dataset.jsonl");
  runner.run("dataset",
             [&] {
               return detail::fingerprint(
                   {{"n", cfg.dataset_n}, {"seed", cfg.seed}});
             },
             [&]() -> std::vector<std::string> {
               auto data = ioi::generate(cfg.dataset_n, cfg.seed);
               ioi::save_jsonl(data, bundle.dataset_path);
               return {"dataset.jsonl"};
             });

  phase = "train";
  std::vector<IOIExample> dataset;
  std::vector<IOIExample> train_split, eval_split;
  if (wants_dataset) {
    dataset = ioi::load_jsonl(bundle.dataset_path);
    const std::size_t train_count =
        std::max<std::size_t>(1, dataset.size() * 8 / 10);
    train_split.assign(dataset.begin(), dataset.begin() + train_count);
    eval_split.assign(dataset.begin() + train_count, dataset.end());
    if (eval_split.empty()) eval_split = train_split;
  }

  ComputationalGraph graph(cfg.model);
  const auto dataset_hash = [&] { return runner.file_hash("dataset.jsonl"); };

  // ---- train ----
  bundle.model_path = runner.path("model.ckpt");
  runner.run("train",
             [&] {
               return detail::fingerprint({{"model", config_to_json(cfg.model)},
                                           {"lr", cfg.lr},
                                           {"steps", cfg.train_steps},
                                           {"batch", cfg.train_batch},
                                           {"seed", cfg.seed},
                                           {"dataset", dataset_hash()}});
             },
             [&]() -> std::vector<std::string> {
               TrainHyper hyper;
               hyper.lr = cfg.lr;
               hyper.steps = cfg.train_steps;
               hyper.batch = cfg.train_batch;
               hyper.seed = cfg.seed;
               ModelParams params = train_toy_model(train_split, cfg.model, hyper);
               save_checkpoint(params, bundle.model_path);
               runner.note("heldout_clean_logit_diff",
                           mean_clean_logit_diff(graph, params, eval_split));
               return {"model.ckpt"};
             });

  phase = "score";
  ModelParams params;
  if (wants_model) params = load_checkpoint(bundle.model_path);
  const auto model_hash = [&] { return runner.file_hash("model.ckpt"); };

  std::vector<IOIExample> score_batch(
      eval_split.begin(),
      eval_split.begin() + std::min<std::size_t>(eval_split.size(),
                                                 cfg.score_examples));
  std::vector<IOIExample> faith_batch(
      eval_split.begin(),
      eval_split.begin() + std::min<std::size_t>(eval_split.size(),
                                                 cfg.faithfulness_examples));

  // ---- score ----
  std::vector<std::string> method_names;
  for (Method m : cfg.methods) method_names.push_back(method_name(m));
  runner.run("score",
             [&] {
               return detail::fingerprint({{"methods", method_names},
                                           {"ig_steps", cfg.ig_steps},
                                           {"examples", cfg.score_examples},
                                           {"model", model_hash()},
                                           {"dataset", dataset_hash()}});
             },
             [&]() -> std::vector<std::string> {
               std::vector<std::string> files;
               for (Method m : cfg.methods) {
                 EdgeScores s =
                     score_with_method(m, params, graph, score_batch, cfg.ig_steps);
                 const std::string name = "scores-" + method_name(m) + ".json";
                 save_scores(s, graph, runner.path(name));
                 files.push_back(name);
               }
               return files;
             });

  phase = "circuits";
  std::vector<std::string> score_hashes;
  for (Method m : cfg.methods) {
    const std::string name = "scores-" + method_name(m) + ".json";
    bundle.score_paths.push_back(runner.path(name));
    if (wants_scores) score_hashes.push_back(runner.file_hash(name));
  }

  // ---- circuits: greedy selection + faithfulness evaluation ----
  runner.run(
      "circuits",
      [&] {
        return detail::fingerprint(
            {{"n_grid", cfg.n_grid},
             {"examples", cfg.faithfulness_examples},
             {"use_corrupted_hard", cfg.use_corrupted_hard},
             {"scores", score_hashes},
             {"model", model_hash()},
             {"dataset", dataset_hash()}});
      },
      [&]() -> std::vector<std::string> {
        std::vector<std::string> files;
        std::vector<FaithfulnessRow> rows;
        FaithfulnessEvaluator evaluator(params, graph, faith_batch,
                                        cfg.use_corrupted_hard);
        for (Method m : cfg.methods) {
          EdgeScores scores = load_scores(
              graph, runner.path("scores-" + method_name(m) + ".json"));
          for (int n : cfg.n_grid) {
            // Grid values beyond the edge count select the whole graph.
            const int n_eff =
                std::min<int>(n, static_cast<int>(graph.n_edges()));
            Circuit c = select_circuit(scores, n_eff, graph);
            FaithfulnessResult fr = evaluator.evaluate(c);
            c.faithfulness_raw = fr.raw;
            c.faithfulness_normalized = fr.normalized;
            const std::string name =
                "circuit-" + method_name(m) + "-" + std::to_string(n) + ".json";
            save_circuit(c, runner.path(name));
            files.push_back(name);
            rows.push_back({method_name(m), n, n_eff,
                            static_cast<int>(c.edges.size()), fr.raw,
                            fr.normalized});
          }
        }
        export_faithfulness_csv(rows, runner.path("faithfulness.csv"));
        files.push_back("faithfulness.csv");
        return files;
      });

  phase = "influence";
  bundle.faithfulness_path = runner.path("faithfulness.csv");
  for (Method m : cfg.methods)
    for (int n : cfg.n_grid)
      bundle.circuit_paths.push_back(runner.path(
          "circuit-" + method_name(m) + "-" + std::to_string(n) + ".json"));

  // ---- influence ----
  runner.run(
      "influence",
      [&] {
        return detail::fingerprint({{"influence_n", cfg.influence_n},
                                    {"examples", cfg.influence_examples},
                                    {"damping", cfg.damping},
                                    {"neumann_k", cfg.neumann_k},
                                    {"power_iters", cfg.power_iters},
                                    {"trace_top_k", cfg.trace_top_k},
                                    {"scores", score_hashes},
                                    {"model", model_hash()},
                                    {"dataset", dataset_hash()}});
      },
      [&]() -> std::vector<std::string> {
        std::vector<std::string> files;
        const int n_inf =
            std::min<int>(cfg.influence_n, static_cast<int>(graph.n_edges()));
        const std::size_t n_ex = std::min<std::size_t>(
            eval_split.size(), static_cast<std::size_t>(cfg.influence_examples));
        InfluenceOptions opt{cfg.damping, cfg.neumann_k, cfg.power_iters};
        for (Method m : cfg.methods) {
          EdgeScores scores = load_scores(
              graph, runner.path("scores-" + method_name(m) + ".json"));
          Circuit c = select_circuit(scores, n_inf, graph);
          std::vector<InfluenceTable> tables;
          for (std::size_t i = 0; i < n_ex; ++i) {
            const IOIExample& ex = eval_split[i];
            tables.push_back(self_influence_table(params, graph, c, ex,
                                                  final_ce_loss(ex), opt));
            const std::string name =
                i == 0 ? "influence-" + method_name(m) + ".csv"
                       : "influence-" + method_name(m) + "-ex" +
                             std::to_string(i) + ".csv";
            export_influence_csv(tables.back(), runner.path(name));
            files.push_back(name);
          }
          ThoughtTrace trace = infer_thought_process(tables, cfg.trace_top_k);
          const std::string tname = "thought-process-" + method_name(m) + ".json";
          save_thought_trace(trace, runner.path(tname));
          files.push_back(tname);
        }
        return files;
      });

  for (Method m : cfg.methods) {
    bundle.influence_paths.push_back(
        runner.path("influence-" + method_name(m) + ".csv"));
    bundle.trace_paths.push_back(
        runner.path("thought-process-" + method_name(m) + ".json"));
  }

  } catch (...) {
    if (!manifest.failed_stage) {
      manifest.failed_stage = phase;
      save_manifest(manifest, bundle.manifest_path);
    }
    throw;
  }

  save_manifest(manifest, bundle.manifest_path);
  return bundle;
}

}  // namespace ct
