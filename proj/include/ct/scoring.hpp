#pragma once

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ct/graph.hpp"
#include "ct/ioi.hpp"
#include "ct/model.hpp"

namespace ct {

enum class Method { EAP, EAP_IG, EAP_IG_KL };

inline std::string method_name(Method m) {
  switch (m) {
    case Method::EAP:
      return "eap";
    case Method::EAP_IG:
      return "eap-ig";
    case Method::EAP_IG_KL:
      return "eap-ig-kl";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "eap") return Method::EAP;
  if (s == "eap-ig") return Method::EAP_IG;
  if (s == "eap-ig-kl") return Method::EAP_IG_KL;
  throw InputError("unknown method: '" + s + "' (expected eap, eap-ig, eap-ig-kl)");
}

// One attribution score per graph edge, indexed by edge id.
struct EdgeScores {
  Method method = Method::EAP;
  std::vector<double> scores;
  int n_examples = 0;
  int ig_steps = 1;

  double at(const ComputationalGraph& graph, const Edge& e) const {
    return scores.at(graph.edge_index(e));
  }
};

// Per-example task loss; receives the example so target/distractor ids are
// available when the loss is built on a tape.
using TaskLoss = std::function<LossBuilder(const IOIExample&)>;

inline TaskLoss default_task_loss() {
  return [](const IOIExample& ex) { return neg_logit_diff_loss(ex); };
}

namespace detail {

inline Tensor final_row_probs(const Tensor& logits) {
  const std::size_t last = logits.rows() - 1, v = logits.cols();
  Tensor p = Tensor::zeros({v});
  double mx = logits(last, 0);
  for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, logits(last, c));
  double z = 0.0;
  for (std::size_t c = 0; c < v; ++c) {
    p.data[c] = std::exp(logits(last, c) - mx);
    z += p.data[c];
  }
  for (std::size_t c = 0; c < v; ++c) p.data[c] /= z;
  return p;
}

// Shared scorer. The per-edge quantity is the activation difference of the
// source node between corrupted and clean runs, dotted with the loss
// gradient at the destination slot, the gradient averaged over input-node
// outputs interpolated from corrupted (k=1) towards clean (k=m). k == m
// evaluates on the clean tokens verbatim, so m = 1 is plain EAP.
inline EdgeScores score_edges(const ComputationalGraph& graph,
                              const ModelParams& params,
                              const std::vector<IOIExample>& batch, int m,
                              bool kl_loss, const TaskLoss& loss,
                              Method method) {
  if (batch.empty()) throw InputError("edge scoring: empty batch");
  if (m < 1) throw InputError("edge scoring: ig steps must be >= 1");

  EdgeScores out;
  out.method = method;
  out.n_examples = static_cast<int>(batch.size());
  out.ig_steps = m;
  out.scores.assign(graph.n_edges(), 0.0);

  for (std::size_t bi = 0; bi < batch.size(); ++bi) {
    const IOIExample& ex = batch[bi];
    if (ex.clean_tokens.size() != ex.corrupted_tokens.size())
      throw InputError("example " + std::to_string(bi) +
                       ": clean/corrupted length mismatch");
    auto [clean_logits, clean_cache] = run_with_cache(graph, params, ex.clean_tokens);
    auto [corr_logits, corr_cache] =
        run_with_cache(graph, params, ex.corrupted_tokens);

    std::vector<Tensor> diff(graph.n_nodes());
    for (std::size_t n = 0; n < graph.n_nodes(); ++n)
      diff[n] = sub(corr_cache.node_out[n], clean_cache.node_out[n]);

    LossBuilder lb = kl_loss ? kl_from_reference_loss(final_row_probs(clean_logits))
                             : loss(ex);

    std::vector<Tensor> grad_acc;
    for (int k = 1; k <= m; ++k) {
      const double alpha = static_cast<double>(k) / static_cast<double>(m);
      SlotGradients sg = node_input_gradients(graph, params, ex.clean_tokens,
                                              ex.corrupted_tokens, lb, alpha);
      for (std::size_t s = 0; s < sg.by_slot.size(); ++s)
        if (!sg.by_slot[s].all_finite())
          throw NumericError("non-finite gradient at slot " +
                             graph.slots()[s].str() + " for example " +
                             std::to_string(bi));
      if (grad_acc.empty()) {
        grad_acc = std::move(sg.by_slot);
      } else {
        for (std::size_t s = 0; s < grad_acc.size(); ++s)
          for (std::size_t i = 0; i < grad_acc[s].size(); ++i)
            grad_acc[s].data[i] += sg.by_slot[s].data[i];
      }
    }

    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t s = 0; s < graph.slots().size(); ++s) {
      const auto& preds = graph.predecessors(s);
      const std::size_t base = graph.slot_edge_offset(s);
      for (std::size_t k = 0; k < preds.size(); ++k)
        out.scores[base + k] += dot(diff[preds[k]], grad_acc[s]) * inv_m;
    }
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  for (double& s : out.scores) s *= inv_b;
  return out;
}

}  // namespace detail

inline EdgeScores eap_scores(const ModelParams& params,
                             const ComputationalGraph& graph,
                             const std::vector<IOIExample>& batch,
                             const TaskLoss& loss = default_task_loss()) {
  return detail::score_edges(graph, params, batch, 1, false, loss, Method::EAP);
}

inline EdgeScores eap_ig_scores(const ModelParams& params,
                                const ComputationalGraph& graph,
                                const std::vector<IOIExample>& batch,
                                const TaskLoss& loss, int m) {
  return detail::score_edges(graph, params, batch, m, false, loss, Method::EAP_IG);
}

inline EdgeScores eap_ig_scores(const ModelParams& params,
                                const ComputationalGraph& graph,
                                const std::vector<IOIExample>& batch, int m) {
  return eap_ig_scores(params, graph, batch, default_task_loss(), m);
}

inline EdgeScores eap_ig_kl_scores(const ModelParams& params,
                                   const ComputationalGraph& graph,
                                   const std::vector<IOIExample>& batch, int m) {
  return detail::score_edges(graph, params, batch, m, true, default_task_loss(),
                             Method::EAP_IG_KL);
}

inline EdgeScores score_with_method(Method method, const ModelParams& params,
                                    const ComputationalGraph& graph,
                                    const std::vector<IOIExample>& batch, int m) {
  switch (method) {
    case Method::EAP:
      return eap_scores(params, graph, batch);
    case Method::EAP_IG:
      return eap_ig_scores(params, graph, batch, m);
    case Method::EAP_IG_KL:
      return eap_ig_kl_scores(params, graph, batch, m);
  }
  throw InputError("bad method");
}

inline void save_scores(const EdgeScores& s, const ComputationalGraph& graph,
                        const std::string& path) {
  nlohmann::ordered_json j;
  j["method"] = method_name(s.method);
  j["n_examples"] = s.n_examples;
  j["ig_steps"] = s.ig_steps;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (std::size_t e = 0; e < graph.n_edges(); ++e)
    m[graph.edges()[e].str()] = s.scores[e];
  j["scores"] = std::move(m);
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  f << j.dump(1) << "\n";
}

inline EdgeScores load_scores(const ComputationalGraph& graph,
                              const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for read: " + path);
  nlohmann::json j = nlohmann::json::parse(f);
  EdgeScores out;
  out.method = parse_method(j.at("method").get<std::string>());
  out.n_examples = j.at("n_examples").get<int>();
  out.ig_steps = j.at("ig_steps").get<int>();
  out.scores.assign(graph.n_edges(), 0.0);
  std::size_t seen = 0;
  for (const auto& [key, val] : j.at("scores").items()) {
    out.scores.at(graph.edge_index(Edge::parse(key))) = val.get<double>();
    ++seen;
  }
  if (seen != graph.n_edges())
    throw IoError("score file covers " + std::to_string(seen) + " of " +
                  std::to_string(graph.n_edges()) + " edges: " + path);
  return out;
}

}  // namespace ct
