// circuit-trace: find task circuits in a toy decoder-only transformer via
// edge attribution patching, evaluate their faithfulness on the IOI task,
// and trace per-token self-influence across layers.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ct/checkpoint.hpp"
#include "ct/circuit.hpp"
#include "ct/influence.hpp"
#include "ct/ioi.hpp"
#include "ct/pipeline.hpp"
#include "ct/reports.hpp"
#include "ct/scoring.hpp"
#include "ct/train.hpp"

namespace {

struct GlobalOpts {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string config_path;
  std::string methods = "eap,eap-ig,eap-ig-kl";
  std::string n_grid;
  int ig_steps = 5;
  double damping = 0.01;
  int neumann_k = 100;
  bool resume = false;
};

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<ct::Method> parse_methods(const std::string& s) {
  std::vector<ct::Method> out;
  for (const auto& m : split_csv(s)) out.push_back(ct::parse_method(m));
  if (out.empty()) throw ct::InputError("no methods given");
  return out;
}

std::vector<int> parse_grid(const std::string& s) {
  std::vector<int> out;
  for (const auto& v : split_csv(s)) out.push_back(std::stoi(v));
  return out;
}

ct::PipelineConfig build_config(const GlobalOpts& g) {
  ct::PipelineConfig cfg;
  if (!g.config_path.empty()) {
    std::ifstream f(g.config_path);
    if (!f) throw ct::IoError("cannot open config: " + g.config_path);
    cfg = ct::pipeline_config_from_json(nlohmann::json::parse(f));
  }
  cfg.seed = g.seed;
  cfg.out_dir = g.out;
  cfg.methods = parse_methods(g.methods);
  if (!g.n_grid.empty()) cfg.n_grid = parse_grid(g.n_grid);
  cfg.ig_steps = g.ig_steps;
  cfg.damping = g.damping;
  cfg.neumann_k = g.neumann_k;
  cfg.resume = g.resume;
  return cfg;
}

ct::ModelConfig default_toy_config() {
  ct::ModelConfig c{4, 4, 64, 16, 256, 0, 32};
  c.vocab_size = ct::ioi::vocabulary().size();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"circuit finding and per-token influence tracing on the IOI task"};
  app.require_subcommand(1);

  GlobalOpts g;
  app.add_option("--seed", g.seed, "random seed");
  app.add_option("--out", g.out, "output directory");
  app.add_option("--config", g.config_path, "pipeline config JSON");
  app.add_option("--methods", g.methods, "comma list: eap,eap-ig,eap-ig-kl");
  app.add_option("--n-grid", g.n_grid, "comma list of circuit sizes");
  app.add_option("--ig-steps", g.ig_steps, "integrated-gradient steps m");
  app.add_option("--damping", g.damping, "curvature damping lambda");
  app.add_option("--neumann-k", g.neumann_k, "Neumann series depth K");
  app.add_flag("--resume", g.resume, "skip stages whose outputs are up to date");

  // generate
  auto* cmd_gen = app.add_subcommand("generate", "generate an IOI dataset");
  int gen_n = 1000;
  std::string dataset_out = "dataset.jsonl";
  cmd_gen->add_option("--n", gen_n, "number of examples");
  cmd_gen->add_option("--dataset-out", dataset_out, "output JSONL path");

  // train
  auto* cmd_train = app.add_subcommand("train", "train the toy transformer");
  std::string dataset_in = "dataset.jsonl", model_out = "model.ckpt";
  int layers = 4, heads = 4, d_model = 64, steps = 800, batch = 16;
  double lr = 3e-3;
  cmd_train->add_option("--dataset-in", dataset_in, "input JSONL dataset");
  cmd_train->add_option("--model-out", model_out, "checkpoint path");
  cmd_train->add_option("--layers", layers, "transformer layers");
  cmd_train->add_option("--heads", heads, "attention heads per layer");
  cmd_train->add_option("--d-model", d_model, "residual width");
  cmd_train->add_option("--steps", steps, "training steps");
  cmd_train->add_option("--batch", batch, "batch size");
  cmd_train->add_option("--lr", lr, "learning rate");

  // score
  auto* cmd_score = app.add_subcommand("score", "score every edge");
  std::string score_model = "model.ckpt", score_dataset = "dataset.jsonl";
  int score_examples = 64;
  cmd_score->add_option("--model", score_model, "checkpoint path");
  cmd_score->add_option("--dataset-in", score_dataset, "input JSONL dataset");
  cmd_score->add_option("--examples", score_examples, "examples to average over");

  // select
  auto* cmd_select = app.add_subcommand("select", "greedy circuit selection");
  std::string select_scores, select_model = "model.ckpt";
  int select_n = 100;
  cmd_select->add_option("--scores", select_scores, "scores JSON path")->required();
  cmd_select->add_option("--model", select_model, "checkpoint (for the graph shape)");
  cmd_select->add_option("--n", select_n, "edges to keep");

  // faithfulness
  auto* cmd_faith = app.add_subcommand("faithfulness", "evaluate circuits");
  std::string faith_model = "model.ckpt", faith_dataset = "dataset.jsonl";
  std::vector<std::string> faith_circuits;
  int faith_examples = 64;
  bool faith_hard = false;
  cmd_faith->add_option("--model", faith_model, "checkpoint path");
  cmd_faith->add_option("--dataset-in", faith_dataset, "input JSONL dataset");
  cmd_faith->add_option("--circuit", faith_circuits, "circuit JSON path (repeatable)")
      ->required();
  cmd_faith->add_option("--examples", faith_examples, "examples to average over");
  cmd_faith->add_flag("--use-corrupted-hard", faith_hard,
                      "corrupted-hard baseline instead of corrupted");

  // influence
  auto* cmd_infl = app.add_subcommand("influence", "per-token self-influence table");
  std::string infl_model = "model.ckpt", infl_dataset = "dataset.jsonl",
              infl_circuit;
  int infl_example = 0;
  cmd_infl->add_option("--model", infl_model, "checkpoint path");
  cmd_infl->add_option("--dataset-in", infl_dataset, "input JSONL dataset");
  cmd_infl->add_option("--circuit", infl_circuit, "circuit JSON path")->required();
  cmd_infl->add_option("--example-index", infl_example, "dataset example index");

  // pipeline
  auto* cmd_pipe = app.add_subcommand("pipeline", "run every stage end to end");
  std::vector<std::string> pipe_stages;
  int pipe_dataset_n = -1, pipe_steps = -1;
  cmd_pipe->add_option("--stages", pipe_stages,
                       "subset of dataset,train,score,circuits,influence");
  cmd_pipe->add_option("--dataset-n", pipe_dataset_n, "dataset size");
  cmd_pipe->add_option("--train-steps", pipe_steps, "training steps");

  CLI11_PARSE(app, argc, argv);

  try {
    std::filesystem::create_directories(g.out);
    auto in_out = [&](const std::string& p) {
      return p.find('/') == std::string::npos ? g.out + "/" + p : p;
    };

    if (*cmd_gen) {
      auto data = ct::ioi::generate(gen_n, g.seed);
      ct::ioi::save_jsonl(data, in_out(dataset_out));
      std::cout << "wrote " << data.size() << " examples to "
                << in_out(dataset_out) << "\n";
    } else if (*cmd_train) {
      auto data = ct::ioi::load_jsonl(in_out(dataset_in));
      ct::ModelConfig mc = default_toy_config();
      mc.n_layers = layers;
      mc.n_heads = heads;
      mc.d_model = d_model;
      mc.d_head = d_model / heads;
      mc.d_mlp = 4 * d_model;
      ct::TrainHyper hyper;
      hyper.lr = lr;
      hyper.steps = steps;
      hyper.batch = batch;
      hyper.seed = g.seed;
      ct::ModelParams params = ct::train_toy_model(data, mc, hyper);
      ct::save_checkpoint(params, in_out(model_out));
      ct::ComputationalGraph graph(mc);
      std::cout << "trained; mean clean logit-diff over dataset: "
                << ct::mean_clean_logit_diff(graph, params, data) << "\n"
                << "wrote " << in_out(model_out) << "\n";
    } else if (*cmd_score) {
      auto params = ct::load_checkpoint(in_out(score_model));
      auto data = ct::ioi::load_jsonl(in_out(score_dataset));
      if (static_cast<int>(data.size()) > score_examples)
        data.resize(static_cast<std::size_t>(score_examples));
      ct::ComputationalGraph graph(params.config);
      for (ct::Method m : parse_methods(g.methods)) {
        ct::EdgeScores s =
            ct::score_with_method(m, params, graph, data, g.ig_steps);
        const std::string path = g.out + "/scores-" + ct::method_name(m) + ".json";
        ct::save_scores(s, graph, path);
        std::cout << "wrote " << path << "\n";
      }
    } else if (*cmd_select) {
      auto params = ct::load_checkpoint(in_out(select_model));
      ct::ComputationalGraph graph(params.config);
      ct::EdgeScores s = ct::load_scores(graph, in_out(select_scores));
      ct::Circuit c = ct::select_circuit(s, select_n, graph);
      const std::string path = g.out + "/circuit-" + ct::method_name(c.method) +
                               "-" + std::to_string(select_n) + ".json";
      ct::save_circuit(c, path);
      std::cout << "wrote " << path << " (" << c.edges.size()
                << " edges after pruning)\n";
    } else if (*cmd_faith) {
      auto params = ct::load_checkpoint(in_out(faith_model));
      auto data = ct::ioi::load_jsonl(in_out(faith_dataset));
      if (static_cast<int>(data.size()) > faith_examples)
        data.resize(static_cast<std::size_t>(faith_examples));
      ct::ComputationalGraph graph(params.config);
      ct::FaithfulnessEvaluator evaluator(params, graph, data, faith_hard);
      std::vector<ct::FaithfulnessRow> rows;
      for (const auto& cpath : faith_circuits) {
        ct::Circuit c = ct::load_circuit(in_out(cpath));
        ct::FaithfulnessResult r = evaluator.evaluate(c);
        c.faithfulness_raw = r.raw;
        c.faithfulness_normalized = r.normalized;
        ct::save_circuit(c, in_out(cpath));
        rows.push_back({ct::method_name(c.method), c.n_requested, c.n_requested,
                        static_cast<int>(c.edges.size()), r.raw, r.normalized});
        std::cout << cpath << ": raw " << r.raw << ", normalized "
                  << r.normalized << "\n";
      }
      ct::export_faithfulness_csv(rows, g.out + "/faithfulness.csv");
      std::cout << "wrote " << g.out << "/faithfulness.csv\n";
    } else if (*cmd_infl) {
      auto params = ct::load_checkpoint(in_out(infl_model));
      auto data = ct::ioi::load_jsonl(in_out(infl_dataset));
      if (infl_example < 0 || infl_example >= static_cast<int>(data.size()))
        throw ct::InputError("example index out of range");
      ct::ComputationalGraph graph(params.config);
      ct::Circuit c = ct::load_circuit(in_out(infl_circuit));
      const ct::IOIExample& ex = data[static_cast<std::size_t>(infl_example)];
      ct::InfluenceOptions opt{g.damping, g.neumann_k, 30};
      ct::InfluenceTable table = ct::self_influence_table(
          params, graph, c, ex, ct::final_ce_loss(ex), opt);
      const std::string path = g.out + "/influence-" + table.method + ".csv";
      ct::export_influence_csv(table, path);
      std::cout << "wrote " << path << "\n";
    } else if (*cmd_pipe) {
      ct::PipelineConfig cfg = build_config(g);
      cfg.stages = pipe_stages;
      if (pipe_dataset_n > 0) cfg.dataset_n = pipe_dataset_n;
      if (pipe_steps >= 0) cfg.train_steps = pipe_steps;
      ct::ReportBundle bundle = ct::run_pipeline(cfg);
      std::cout << "pipeline complete; manifest: " << bundle.manifest_path << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
