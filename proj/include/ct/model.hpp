#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "ct/graph.hpp"
#include "ct/ioi.hpp"
#include "ct/tape.hpp"
#include "ct/tensor.hpp"

namespace ct {

// All weight tensors, addressable by stable path strings and iterable in a
// canonical order (the checkpoint and flattening order).
struct ModelParams {
  ModelConfig config;
  std::vector<std::string> paths;
  std::vector<Tensor> tensors;
  std::unordered_map<std::string, std::size_t> index;

  const Tensor& at(const std::string& path) const {
    auto it = index.find(path);
    if (it == index.end()) throw InputError("unknown parameter path: " + path);
    return tensors[it->second];
  }
  Tensor& at(const std::string& path) {
    auto it = index.find(path);
    if (it == index.end()) throw InputError("unknown parameter path: " + path);
    return tensors[it->second];
  }
  std::size_t param_index(const std::string& path) const {
    auto it = index.find(path);
    if (it == index.end()) throw InputError("unknown parameter path: " + path);
    return it->second;
  }

  std::size_t total_size() const {
    std::size_t n = 0;
    for (const auto& t : tensors) n += t.size();
    return n;
  }

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    Rng rng(seed);
    const auto D = static_cast<std::size_t>(cfg.d_model);
    const auto Dh = static_cast<std::size_t>(cfg.d_head);
    const auto Dm = static_cast<std::size_t>(cfg.d_mlp);
    const auto V = static_cast<std::size_t>(cfg.vocab_size);
    const auto S = static_cast<std::size_t>(cfg.max_seq_len);

    auto w = [&](const std::string& path, std::vector<std::size_t> shape,
                 double stddev) {
      p.add(path, Tensor::randn(std::move(shape), rng, stddev));
    };
    auto zeros = [&](const std::string& path, std::vector<std::size_t> shape) {
      p.add(path, Tensor::zeros(std::move(shape)));
    };
    auto ones = [&](const std::string& path, std::vector<std::size_t> shape) {
      p.add(path, Tensor::full(std::move(shape), 1.0));
    };

    w("embed.tok", {V, D}, 0.02);
    w("embed.pos", {S, D}, 0.01);
    for (int l = 0; l < cfg.n_layers; ++l) {
      const std::string L = std::to_string(l);
      ones("ln1." + L + ".g", {D});
      zeros("ln1." + L + ".b", {D});
      for (int h = 0; h < cfg.n_heads; ++h) {
        const std::string hp = "a" + L + ".h" + std::to_string(h) + ".";
        w(hp + "wq", {D, Dh}, 0.02);
        zeros(hp + "bq", {Dh});
        w(hp + "wk", {D, Dh}, 0.02);
        zeros(hp + "bk", {Dh});
        w(hp + "wv", {D, Dh}, 0.02);
        zeros(hp + "bv", {Dh});
        w(hp + "wo", {Dh, D}, 0.02);
      }
      ones("ln2." + L + ".g", {D});
      zeros("ln2." + L + ".b", {D});
      w("m" + L + ".w_in", {D, Dm}, 0.02);
      zeros("m" + L + ".b_in", {Dm});
      w("m" + L + ".w_out", {Dm, D}, 0.02);
      zeros("m" + L + ".b_out", {D});
    }
    ones("ln_f.g", {D});
    zeros("ln_f.b", {D});
    w("unembed.w", {D, V}, 0.02);
    zeros("unembed.b", {V});
    return p;
  }

  // Paths owned by a graph node (projections only; layernorms and embeddings
  // are reads of the residual stream, not node parameters).
  static std::vector<std::string> node_param_paths(const NodeId& n) {
    switch (n.kind) {
      case NodeId::Kind::Head: {
        const std::string hp = n.str() + ".";
        return {hp + "wq", hp + "bq", hp + "wk", hp + "bk",
                hp + "wv", hp + "bv", hp + "wo"};
      }
      case NodeId::Kind::Mlp: {
        const std::string mp = n.str() + ".";
        return {mp + "w_in", mp + "b_in", mp + "w_out", mp + "b_out"};
      }
      case NodeId::Kind::Input:
        return {"embed.tok", "embed.pos"};
      case NodeId::Kind::Logits:
        return {"unembed.w", "unembed.b"};
    }
    return {};
  }

 private:
  void add(const std::string& path, Tensor t) {
    index[path] = tensors.size();
    paths.push_back(path);
    tensors.push_back(std::move(t));
  }
};

// Per-node residual-stream contributions of one forward pass.
struct ActivationCache {
  std::size_t seq_len = 0;
  std::vector<Tensor> node_out;  // aligned with graph.nodes()
};

// Builds a scalar loss node from the logits node.
using LossBuilder = std::function<VarId(Tape&, VarId)>;

inline LossBuilder neg_logit_diff_loss(const IOIExample& ex) {
  return [target = ex.target_id, distractor = ex.distractor_id](Tape& t,
                                                                VarId logits) {
    const std::size_t last = t.value(logits).rows() - 1;
    VarId d = t.sub(t.pick(logits, last, static_cast<std::size_t>(target)),
                    t.pick(logits, last, static_cast<std::size_t>(distractor)));
    return t.scale(d, -1.0);
  };
}

inline LossBuilder final_ce_loss(const IOIExample& ex) {
  return [target = ex.target_id](Tape& t, VarId logits) {
    const std::size_t last = t.value(logits).rows() - 1;
    return t.cross_entropy(t.slice_rows(logits, last, 1), {target});
  };
}

// Next-token cross-entropy over every position; the final position predicts
// the indirect-object name. Dense supervision for training.
inline LossBuilder sequence_ce_loss(const IOIExample& ex) {
  std::vector<int> targets(ex.clean_tokens.begin() + 1, ex.clean_tokens.end());
  targets.push_back(ex.target_id);
  return [targets = std::move(targets)](Tape& t, VarId logits) {
    return t.cross_entropy(logits, targets);
  };
}

// Training objective: sequence CE plus an extra-weighted final-position term.
// The plain sequence loss dilutes the task signal to one position in ~17;
// the boost is what makes the indirect-object behaviour form.
inline LossBuilder training_loss(const IOIExample& ex, double final_weight = 4.0) {
  return [seq = sequence_ce_loss(ex), fin = final_ce_loss(ex), final_weight](
             Tape& t, VarId logits) {
    return t.add(seq(t, logits), t.scale(fin(t, logits), final_weight));
  };
}

// KL(P_ref || softmax(logits[last])) with P_ref held constant.
inline LossBuilder kl_from_reference_loss(Tensor reference_final_probs) {
  return [p = std::move(reference_final_probs)](Tape& t, VarId logits) {
    const std::size_t last = t.value(logits).rows() - 1;
    VarId q = t.softmax(t.slice_rows(logits, last, 1));
    Tensor ref = p;
    ref.shape = {1, ref.size()};
    VarId pv = t.leaf(std::move(ref), false);
    return t.kl_divergence(pv, q);
  };
}

namespace detail {

// Node input providers for one forward pass: which edges carry activations
// computed in this pass, and the cache supplying the remaining edges.
struct ForwardHooks {
  const Tensor* input_override = nullptr;
  const std::vector<bool>* live_edges = nullptr;
  const ActivationCache* patch_cache = nullptr;
  const std::map<std::size_t, Tensor>* slot_offsets = nullptr;
  bool params_require_grad = false;
  // When set, only these parameter indices require gradients (overrides
  // params_require_grad); backward then skips unrelated weight gradients.
  const std::vector<std::size_t>* grad_params = nullptr;
  bool slot_grads = false;
};

struct ForwardPass {
  Tape tape;
  VarId logits = 0;
  std::vector<VarId> node_out;    // by node index
  std::vector<VarId> slot_in;     // by slot index
  std::vector<VarId> param_vars;  // by params.tensors index
};

inline void check_tokens(const ModelConfig& cfg, const std::vector<int>& tokens) {
  if (tokens.empty()) throw InputError("empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg.max_seq_len)
    throw InputError("sequence length " + std::to_string(tokens.size()) +
                     " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg.vocab_size)
      throw InputError("token id " + std::to_string(t) + " outside vocab [0," +
                       std::to_string(cfg.vocab_size) + ")");
}

inline void run_forward(ForwardPass& fp, const ComputationalGraph& graph,
                        const ModelParams& params, const std::vector<int>& tokens,
                        const ForwardHooks& hooks) {
  const ModelConfig& cfg = params.config;
  check_tokens(cfg, tokens);
  const std::size_t seq = tokens.size();
  if (hooks.patch_cache && hooks.patch_cache->seq_len != seq)
    throw PatchingError("cache length " +
                        std::to_string(hooks.patch_cache->seq_len) +
                        " != sequence length " + std::to_string(seq));

  Tape& tape = fp.tape;
  std::vector<bool> wants_grad(params.tensors.size(), hooks.params_require_grad);
  if (hooks.grad_params) {
    wants_grad.assign(params.tensors.size(), false);
    for (std::size_t i : *hooks.grad_params) wants_grad.at(i) = true;
  }
  fp.param_vars.resize(params.tensors.size());
  for (std::size_t i = 0; i < params.tensors.size(); ++i)
    fp.param_vars[i] = tape.leaf(params.tensors[i], wants_grad[i]);
  auto pv = [&](const std::string& path) {
    return fp.param_vars[params.param_index(path)];
  };

  // Input node output: token embedding + learned absolute positions.
  VarId input_out;
  if (hooks.input_override) {
    if (hooks.input_override->shape !=
        std::vector<std::size_t>{seq, static_cast<std::size_t>(cfg.d_model)})
      throw ShapeError("input_override", hooks.input_override->shape_str());
    input_out = tape.leaf(*hooks.input_override, true);
  } else {
    std::vector<int> positions(seq);
    for (std::size_t t = 0; t < seq; ++t) positions[t] = static_cast<int>(t);
    input_out = tape.add(tape.embedding(pv("embed.tok"), tokens),
                         tape.embedding(pv("embed.pos"), positions));
  }

  fp.node_out.assign(graph.n_nodes(), 0);
  fp.slot_in.assign(graph.slots().size(), 0);
  fp.node_out[graph.node_index(NodeId::input())] = input_out;

  // Lazily created constants for patched-in cached contributions.
  std::vector<VarId> patch_leaf(graph.n_nodes(), static_cast<VarId>(-1));
  auto cached_contribution = [&](std::size_t node_idx) {
    if (patch_leaf[node_idx] == static_cast<VarId>(-1)) {
      const Tensor& t = hooks.patch_cache->node_out.at(node_idx);
      patch_leaf[node_idx] = tape.leaf(t, false);
    }
    return patch_leaf[node_idx];
  };

  // Residual stream entering a slot: sum over incoming edges of either the
  // current pass's source output or the cached one.
  auto slot_input = [&](const Slot& slot) {
    const std::size_t s = graph.slot_index(slot);
    const auto& preds = graph.predecessors(s);
    const std::size_t base = graph.slot_edge_offset(s);
    std::vector<VarId> terms;
    terms.reserve(preds.size());
    for (std::size_t k = 0; k < preds.size(); ++k) {
      const bool live = !hooks.live_edges || (*hooks.live_edges)[base + k];
      terms.push_back(live ? fp.node_out[preds[k]] : cached_contribution(preds[k]));
    }
    VarId sum = tape.add_n(terms);
    if (hooks.slot_offsets) {
      auto it = hooks.slot_offsets->find(s);
      if (it != hooks.slot_offsets->end())
        sum = tape.add(sum, tape.leaf(it->second, false));
    }
    VarId in = tape.identity(sum);
    if (hooks.slot_grads) tape.force_requires_grad(in);
    fp.slot_in[s] = in;
    return in;
  };

  // Additive causal mask shared by all heads of this pass.
  Tensor mask = Tensor::zeros({seq, seq});
  for (std::size_t i = 0; i < seq; ++i)
    for (std::size_t j = i + 1; j < seq; ++j) mask(i, j) = -1e30;
  const VarId mask_var = tape.leaf(std::move(mask), false);
  const double attn_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_head));

  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string L = std::to_string(l);
    const VarId ln1g = pv("ln1." + L + ".g"), ln1b = pv("ln1." + L + ".b");
    for (int h = 0; h < cfg.n_heads; ++h) {
      const std::string hp = "a" + L + ".h" + std::to_string(h) + ".";
      VarId xq = tape.layernorm(slot_input(Slot::head_q(l, h)), ln1g, ln1b);
      VarId xk = tape.layernorm(slot_input(Slot::head_k(l, h)), ln1g, ln1b);
      VarId xv = tape.layernorm(slot_input(Slot::head_v(l, h)), ln1g, ln1b);
      VarId q = tape.add_bias(tape.matmul(xq, pv(hp + "wq")), pv(hp + "bq"));
      VarId k = tape.add_bias(tape.matmul(xk, pv(hp + "wk")), pv(hp + "bk"));
      VarId v = tape.add_bias(tape.matmul(xv, pv(hp + "wv")), pv(hp + "bv"));
      VarId scores = tape.add(tape.scale(tape.matmul_bt(q, k), attn_scale), mask_var);
      VarId attn = tape.softmax(scores);
      VarId z = tape.matmul(attn, v);
      fp.node_out[graph.node_index(NodeId::attn_head(l, h))] =
          tape.matmul(z, pv(hp + "wo"));
    }
    VarId xm = tape.layernorm(slot_input(Slot::mlp_in(l)),
                              pv("ln2." + L + ".g"), pv("ln2." + L + ".b"));
    VarId hidden = tape.gelu(
        tape.add_bias(tape.matmul(xm, pv("m" + L + ".w_in")), pv("m" + L + ".b_in")));
    fp.node_out[graph.node_index(NodeId::mlp(l))] = tape.add_bias(
        tape.matmul(hidden, pv("m" + L + ".w_out")), pv("m" + L + ".b_out"));
  }

  VarId xf = tape.layernorm(slot_input(Slot::logits_in()), pv("ln_f.g"),
                            pv("ln_f.b"));
  fp.logits = tape.add_bias(tape.matmul(xf, pv("unembed.w")), pv("unembed.b"));
  fp.node_out[graph.node_index(NodeId::logits())] = fp.logits;
}

// Raw input-node output (embeddings + positions), off-tape.
inline Tensor embed_input(const ModelParams& params, const std::vector<int>& tokens) {
  check_tokens(params.config, tokens);
  const std::size_t seq = tokens.size();
  const std::size_t D = static_cast<std::size_t>(params.config.d_model);
  const Tensor& tok = params.at("embed.tok");
  const Tensor& pos = params.at("embed.pos");
  Tensor out = Tensor::zeros({seq, D});
  for (std::size_t t = 0; t < seq; ++t)
    for (std::size_t c = 0; c < D; ++c)
      out(t, c) = tok(static_cast<std::size_t>(tokens[t]), c) + pos(t, c);
  return out;
}

}  // namespace detail

inline std::pair<Tensor, ActivationCache> run_with_cache(
    const ComputationalGraph& graph, const ModelParams& params,
    const std::vector<int>& tokens) {
  detail::ForwardPass fp;
  detail::run_forward(fp, graph, params, tokens, {});
  ActivationCache cache;
  cache.seq_len = tokens.size();
  cache.node_out.reserve(graph.n_nodes());
  for (VarId id : fp.node_out) cache.node_out.push_back(fp.tape.value(id));
  return {fp.tape.value(fp.logits), std::move(cache)};
}

inline Tensor run_plain(const ComputationalGraph& graph, const ModelParams& params,
                        const std::vector<int>& tokens) {
  detail::ForwardPass fp;
  detail::run_forward(fp, graph, params, tokens, {});
  return fp.tape.value(fp.logits);
}

// Forward pass in which each slot input sums, per incoming edge, either the
// recomputed source contribution (edge in circuit) or the corrupted cached
// one (edge outside). live_edges is indexed by graph edge id.
inline Tensor run_patched_edges(const ComputationalGraph& graph,
                                const ModelParams& params,
                                const std::vector<int>& clean_tokens,
                                const ActivationCache& corrupted_cache,
                                const std::vector<bool>& live_edges) {
  if (live_edges.size() != graph.n_edges())
    throw PatchingError("live-edge mask size " + std::to_string(live_edges.size()) +
                        " != edge count " + std::to_string(graph.n_edges()));
  detail::ForwardHooks hooks;
  hooks.live_edges = &live_edges;
  hooks.patch_cache = &corrupted_cache;
  detail::ForwardPass fp;
  detail::run_forward(fp, graph, params, clean_tokens, hooks);
  return fp.tape.value(fp.logits);
}

// Gradients of a scalar loss with respect to every slot's residual-stream
// input, indexed by graph slot id.
struct SlotGradients {
  std::vector<Tensor> by_slot;
};

// Evaluation point: the input-node output is corrupted + alpha*(clean -
// corrupted). alpha == 1 runs on the clean tokens verbatim; alpha == 0 on
// the corrupted embedding.
inline SlotGradients node_input_gradients(const ComputationalGraph& graph,
                                          const ModelParams& params,
                                          const std::vector<int>& clean_tokens,
                                          const std::vector<int>& corrupted_tokens,
                                          const LossBuilder& loss_fn,
                                          double alpha = 1.0) {
  if (clean_tokens.size() != corrupted_tokens.size())
    throw InputError("clean/corrupted token sequences differ in length");
  detail::ForwardHooks hooks;
  hooks.slot_grads = true;
  Tensor interp;
  if (alpha != 1.0) {
    interp = lerp(detail::embed_input(params, corrupted_tokens),
                  detail::embed_input(params, clean_tokens), alpha);
    hooks.input_override = &interp;
  }
  detail::ForwardPass fp;
  detail::run_forward(fp, graph, params, clean_tokens, hooks);
  VarId loss = loss_fn(fp.tape, fp.logits);
  if (fp.tape.value(loss).size() != 1)
    throw UsageError("node_input_gradients: loss must be scalar");
  fp.tape.backward(loss);
  SlotGradients out;
  out.by_slot.reserve(graph.slots().size());
  for (VarId id : fp.slot_in) out.by_slot.push_back(fp.tape.grad(id));
  return out;
}

// Loss and parameter gradients of one example, aligned with params.tensors.
struct ParamGradients {
  double loss = 0.0;
  std::vector<Tensor> by_param;
};

inline ParamGradients param_gradients(const ComputationalGraph& graph,
                                      const ModelParams& params,
                                      const std::vector<int>& tokens,
                                      const LossBuilder& loss_fn,
                                      const std::vector<std::size_t>* only = nullptr) {
  detail::ForwardHooks hooks;
  hooks.params_require_grad = true;
  hooks.grad_params = only;
  detail::ForwardPass fp;
  detail::run_forward(fp, graph, params, tokens, hooks);
  VarId loss = loss_fn(fp.tape, fp.logits);
  if (fp.tape.value(loss).size() != 1)
    throw UsageError("param_gradients: loss must be scalar");
  fp.tape.backward(loss);
  ParamGradients out;
  out.loss = fp.tape.value(loss).data[0];
  out.by_param.reserve(params.tensors.size());
  for (VarId id : fp.param_vars) out.by_param.push_back(fp.tape.grad(id));
  return out;
}

inline double mean_clean_logit_diff(const ComputationalGraph& graph,
                                    const ModelParams& params,
                                    const std::vector<IOIExample>& batch) {
  double s = 0.0;
  for (const auto& ex : batch)
    s += logit_diff(run_plain(graph, params, ex.clean_tokens), ex);
  return s / static_cast<double>(batch.size());
}

}  // namespace ct
