#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ct/scoring.hpp"

namespace ct {

// Selected edge subset with its induced node set. edges is the pruned set
// actually evaluated; edges_raw the top-n set before connectivity pruning.
struct Circuit {
  Method method = Method::EAP;
  int n_requested = 0;
  std::vector<Edge> edges;
  std::vector<Edge> edges_raw;
  std::vector<NodeId> nodes;
  std::optional<double> faithfulness_raw;
  std::optional<double> faithfulness_normalized;

  std::vector<bool> live_mask(const ComputationalGraph& graph) const {
    std::vector<bool> live(graph.n_edges(), false);
    for (const Edge& e : edges) live[graph.edge_index(e)] = true;
    return live;
  }

  bool contains(const ComputationalGraph& graph, const Edge& e) const {
    for (const Edge& c : edges)
      if (c == e) return true;
    (void)graph;
    return false;
  }
};

namespace detail {

// Drop non-terminal nodes lacking an incoming or outgoing circuit edge,
// together with their edges, until a fixpoint.
inline std::vector<std::size_t> prune_edges(const ComputationalGraph& graph,
                                            std::vector<std::size_t> edge_ids) {
  bool changed = true;
  while (changed) {
    changed = false;
    std::vector<int> in_deg(graph.n_nodes(), 0), out_deg(graph.n_nodes(), 0);
    for (std::size_t id : edge_ids) {
      const Edge& e = graph.edges()[id];
      ++out_deg[graph.node_index(e.src)];
      ++in_deg[graph.node_index(e.dst.owner())];
    }
    std::vector<bool> dead(graph.n_nodes(), false);
    for (std::size_t n = 0; n < graph.n_nodes(); ++n) {
      const NodeId& node = graph.nodes()[n];
      if (node.kind == NodeId::Kind::Input || node.kind == NodeId::Kind::Logits)
        continue;
      if (in_deg[n] == 0 || out_deg[n] == 0) {
        if (in_deg[n] > 0 || out_deg[n] > 0) dead[n] = true;
      }
    }
    std::vector<std::size_t> kept;
    kept.reserve(edge_ids.size());
    for (std::size_t id : edge_ids) {
      const Edge& e = graph.edges()[id];
      if (dead[graph.node_index(e.src)] || dead[graph.node_index(e.dst.owner())]) {
        changed = true;
        continue;
      }
      kept.push_back(id);
    }
    edge_ids = std::move(kept);
  }
  return edge_ids;
}

}  // namespace detail

// Greedy selection: edges in descending |score| order (ties broken by graph
// edge order) until n are accepted, then connectivity pruning.
inline Circuit select_circuit(const EdgeScores& scores, int n,
                              const ComputationalGraph& graph) {
  if (scores.scores.size() != graph.n_edges())
    throw InputError("score map does not cover the graph");
  if (n < 1 || static_cast<std::size_t>(n) > graph.n_edges())
    throw InputError("circuit size n=" + std::to_string(n) +
                     " outside [1," + std::to_string(graph.n_edges()) + "]");

  std::vector<std::size_t> order(graph.n_edges());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const double sa = std::abs(scores.scores[a]), sb = std::abs(scores.scores[b]);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  std::vector<std::size_t> raw(order.begin(), order.begin() + n);
  std::sort(raw.begin(), raw.end());

  std::vector<std::size_t> pruned = detail::prune_edges(graph, raw);

  Circuit c;
  c.method = scores.method;
  c.n_requested = n;
  for (std::size_t id : raw) c.edges_raw.push_back(graph.edges()[id]);
  for (std::size_t id : pruned) c.edges.push_back(graph.edges()[id]);

  std::vector<bool> in_circuit(graph.n_nodes(), false);
  in_circuit[graph.node_index(NodeId::input())] = true;
  in_circuit[graph.node_index(NodeId::logits())] = true;
  for (std::size_t id : pruned) {
    in_circuit[graph.node_index(graph.edges()[id].src)] = true;
    in_circuit[graph.node_index(graph.edges()[id].dst.owner())] = true;
  }
  for (std::size_t i = 0; i < graph.n_nodes(); ++i)
    if (in_circuit[i]) c.nodes.push_back(graph.nodes()[i]);
  return c;
}

// Patched forward pass under a circuit: in-circuit edges carry this pass's
// recomputed contributions, all others the corrupted cached ones.
inline Tensor run_patched(const ComputationalGraph& graph,
                          const ModelParams& params,
                          const std::vector<int>& clean_tokens,
                          const ActivationCache& clean_cache,
                          const ActivationCache& corrupted_cache,
                          const Circuit& circuit) {
  if (clean_cache.seq_len != corrupted_cache.seq_len)
    throw PatchingError("clean/corrupted cache lengths differ: " +
                        std::to_string(clean_cache.seq_len) + " vs " +
                        std::to_string(corrupted_cache.seq_len));
  if (clean_cache.seq_len != clean_tokens.size())
    throw PatchingError("cache length does not match token sequence");
  return run_patched_edges(graph, params, clean_tokens, corrupted_cache,
                           circuit.live_mask(graph));
}

inline double normalize_faithfulness(double m, double b, double b_prime) {
  if (b == b_prime)
    throw DegenerateBaselineError(
        "clean and corrupted baselines coincide (b == b'); faithfulness "
        "normalization undefined");
  return (m - b_prime) / (b - b_prime);
}

struct FaithfulnessResult {
  double raw = 0.0;         // m: mean patched logit-diff
  double normalized = 0.0;  // (m - b') / (b - b')
  double clean_baseline = 0.0;
  double corrupted_baseline = 0.0;
};

// Holds the per-example baselines and corrupted caches so a grid of circuits
// can be evaluated with one patched forward pass per (circuit, example).
class FaithfulnessEvaluator {
 public:
  FaithfulnessEvaluator(const ModelParams& params,
                        const ComputationalGraph& graph,
                        const std::vector<IOIExample>& batch,
                        bool use_corrupted_hard = false)
      : params_(params), graph_(graph), batch_(batch) {
    if (batch.empty()) throw InputError("faithfulness: empty batch");
    double b = 0.0, bp = 0.0;
    corrupted_caches_.reserve(batch.size());
    for (const auto& ex : batch) {
      const auto& corr_tokens =
          use_corrupted_hard ? ex.corrupted_hard_tokens : ex.corrupted_tokens;
      b += logit_diff(run_plain(graph, params, ex.clean_tokens), ex);
      auto [corr_logits, corr_cache] = run_with_cache(graph, params, corr_tokens);
      bp += logit_diff(corr_logits, ex);
      corrupted_caches_.push_back(std::move(corr_cache));
    }
    clean_baseline_ = b / static_cast<double>(batch.size());
    corrupted_baseline_ = bp / static_cast<double>(batch.size());
  }

  FaithfulnessResult evaluate(const Circuit& circuit) const {
    const std::vector<bool> live = circuit.live_mask(graph_);
    double m = 0.0;
    for (std::size_t i = 0; i < batch_.size(); ++i)
      m += logit_diff(run_patched_edges(graph_, params_, batch_[i].clean_tokens,
                                        corrupted_caches_[i], live),
                      batch_[i]);
    m /= static_cast<double>(batch_.size());
    FaithfulnessResult r;
    r.raw = m;
    r.normalized = normalize_faithfulness(m, clean_baseline_, corrupted_baseline_);
    r.clean_baseline = clean_baseline_;
    r.corrupted_baseline = corrupted_baseline_;
    return r;
  }

  double clean_baseline() const { return clean_baseline_; }
  double corrupted_baseline() const { return corrupted_baseline_; }

 private:
  const ModelParams& params_;
  const ComputationalGraph& graph_;
  const std::vector<IOIExample>& batch_;
  std::vector<ActivationCache> corrupted_caches_;
  double clean_baseline_ = 0.0;
  double corrupted_baseline_ = 0.0;
};

inline FaithfulnessResult faithfulness(const ModelParams& params,
                                       const ComputationalGraph& graph,
                                       const Circuit& circuit,
                                       const std::vector<IOIExample>& batch,
                                       bool use_corrupted_hard = false) {
  return FaithfulnessEvaluator(params, graph, batch, use_corrupted_hard)
      .evaluate(circuit);
}

inline void save_circuit(const Circuit& c, const std::string& path) {
  nlohmann::ordered_json j;
  j["method"] = method_name(c.method);
  j["n_requested"] = c.n_requested;
  nlohmann::ordered_json edges = nlohmann::ordered_json::array();
  for (const Edge& e : c.edges) edges.push_back(e.str());
  j["edges"] = std::move(edges);
  nlohmann::ordered_json raw = nlohmann::ordered_json::array();
  for (const Edge& e : c.edges_raw) raw.push_back(e.str());
  j["edges_raw"] = std::move(raw);
  nlohmann::ordered_json nodes = nlohmann::ordered_json::array();
  for (const NodeId& n : c.nodes) nodes.push_back(n.str());
  j["nodes"] = std::move(nodes);
  if (c.faithfulness_raw)
    j["faithfulness_raw"] = *c.faithfulness_raw;
  else
    j["faithfulness_raw"] = nullptr;
  if (c.faithfulness_normalized)
    j["faithfulness_normalized"] = *c.faithfulness_normalized;
  else
    j["faithfulness_normalized"] = nullptr;
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  f << j.dump(1) << "\n";
}

inline Circuit load_circuit(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for read: " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  Circuit c;
  c.method = parse_method(j.at("method").get<std::string>());
  c.n_requested = j.at("n_requested").get<int>();
  for (const auto& e : j.at("edges")) c.edges.push_back(Edge::parse(e.get<std::string>()));
  for (const auto& e : j.at("edges_raw"))
    c.edges_raw.push_back(Edge::parse(e.get<std::string>()));
  for (const auto& n : j.at("nodes")) c.nodes.push_back(NodeId::parse(n.get<std::string>()));
  if (!j.at("faithfulness_raw").is_null())
    c.faithfulness_raw = j.at("faithfulness_raw").get<double>();
  if (!j.at("faithfulness_normalized").is_null())
    c.faithfulness_normalized = j.at("faithfulness_normalized").get<double>();
  return c;
}

}  // namespace ct
