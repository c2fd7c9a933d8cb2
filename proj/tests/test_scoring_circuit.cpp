#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "ct/circuit.hpp"
#include "ct/scoring.hpp"
#include "ct/stats.hpp"
#include "helpers.hpp"

using namespace ct;
using ct::testing::tiny_config;

namespace {

struct Fixture {
  ModelConfig cfg = tiny_config(2, 2, 16);
  ComputationalGraph graph{cfg};
  std::vector<IOIExample> data = ioi::generate(400, 11);
  std::vector<IOIExample> train{data.begin(), data.begin() + 320};
  ModelParams params = ct::testing::quick_trained(cfg, train, 400);
  std::vector<IOIExample> batch{data.begin() + 320, data.begin() + 336};
};

Fixture& fx() {
  static Fixture f;
  return f;
}

}  // namespace

TEST(Scoring, CleanEqualsCorruptedGivesZeroScores) {
  auto& f = fx();
  IOIExample ex = f.batch[0];
  ex.corrupted_tokens = ex.clean_tokens;
  ex.corrupted_words = ex.clean_words;
  EdgeScores s = eap_scores(f.params, f.graph, {ex});
  for (double v : s.scores) ASSERT_EQ(v, 0.0);
}

TEST(Scoring, DuplicateBatchLeavesMeanUnchanged) {
  auto& f = fx();
  std::vector<IOIExample> once(f.batch.begin(), f.batch.begin() + 4);
  std::vector<IOIExample> twice = once;
  twice.insert(twice.end(), once.begin(), once.end());
  EdgeScores a = eap_scores(f.params, f.graph, once);
  EdgeScores b = eap_scores(f.params, f.graph, twice);
  for (std::size_t e = 0; e < a.scores.size(); ++e)
    EXPECT_NEAR(a.scores[e], b.scores[e],
                1e-12 * (1.0 + std::abs(a.scores[e])));
}

TEST(Scoring, EapEqualsEapIgAtOneStep) {
  auto& f = fx();
  EdgeScores eap = eap_scores(f.params, f.graph, f.batch);
  EdgeScores ig1 = eap_ig_scores(f.params, f.graph, f.batch, 1);
  ASSERT_EQ(eap.scores.size(), ig1.scores.size());
  for (std::size_t e = 0; e < eap.scores.size(); ++e)
    ASSERT_EQ(eap.scores[e], ig1.scores[e]) << f.graph.edges()[e].str();
}

// Independent closed form for edges into the logits slot: the task loss is
// linear in the logits, so the slot gradient is the hand-derived layernorm
// backward of the unembedding pullback, nonzero only at the final position.
TEST(Scoring, LogitsEdgeScoresMatchSymbolicOracle) {
  auto& f = fx();
  const IOIExample& ex = f.batch[1];
  auto [clean_logits, clean_cache] = run_with_cache(f.graph, f.params, ex.clean_tokens);
  auto [corr_logits, corr_cache] =
      run_with_cache(f.graph, f.params, ex.corrupted_tokens);

  // Residual stream entering the logits slot on the clean run.
  const std::size_t seq = ex.clean_tokens.size();
  const std::size_t D = static_cast<std::size_t>(f.cfg.d_model);
  Tensor s = Tensor::zeros({seq, D});
  const std::size_t logits_slot = f.graph.slot_index(Slot::logits_in());
  for (std::size_t n : f.graph.predecessors(logits_slot))
    for (std::size_t i = 0; i < s.size(); ++i)
      s.data[i] += clean_cache.node_out[n].data[i];

  const Tensor& gamma = f.params.at("ln_f.g");
  const Tensor& wu = f.params.at("unembed.w");
  const std::size_t t = seq - 1;

  // dL/dy for L = -(logit[target] - logit[distractor]) at the last row.
  std::vector<double> dy(D);
  for (std::size_t c = 0; c < D; ++c)
    dy[c] = -(wu(c, static_cast<std::size_t>(ex.target_id)) -
              wu(c, static_cast<std::size_t>(ex.distractor_id)));

  // Hand-written layernorm backward at the last row.
  double mu = 0, var = 0;
  for (std::size_t c = 0; c < D; ++c) mu += s(t, c);
  mu /= static_cast<double>(D);
  for (std::size_t c = 0; c < D; ++c) var += (s(t, c) - mu) * (s(t, c) - mu);
  var /= static_cast<double>(D);
  const double inv_sigma = 1.0 / std::sqrt(var + 1e-5);
  std::vector<double> xhat(D), dxhat(D);
  double sum_dxhat = 0, sum_dxhat_xhat = 0;
  for (std::size_t c = 0; c < D; ++c) {
    xhat[c] = (s(t, c) - mu) * inv_sigma;
    dxhat[c] = dy[c] * gamma.data[c];
    sum_dxhat += dxhat[c];
    sum_dxhat_xhat += dxhat[c] * xhat[c];
  }
  Tensor grad_slot = Tensor::zeros({seq, D});
  for (std::size_t c = 0; c < D; ++c)
    grad_slot(t, c) = inv_sigma * (dxhat[c] - sum_dxhat / D -
                                   xhat[c] * sum_dxhat_xhat / D);

  EdgeScores scores = eap_scores(f.params, f.graph, {ex});
  for (std::size_t n : f.graph.predecessors(logits_slot)) {
    const Edge e{f.graph.nodes()[n], Slot::logits_in()};
    const double expect =
        dot(sub(corr_cache.node_out[n], clean_cache.node_out[n]), grad_slot);
    const double got = scores.at(f.graph, e);
    EXPECT_NEAR(got, expect, 1e-9 * (1.0 + std::abs(expect))) << e.str();
  }
}

TEST(Scoring, KlVariantStructure) {
  auto& f = fx();
  std::vector<IOIExample> small(f.batch.begin(), f.batch.begin() + 4);
  // KL(p || p) is exactly zero at the clean endpoint.
  Tensor clean_logits = run_plain(f.graph, f.params, small[0].clean_tokens);
  LossBuilder kl = kl_from_reference_loss(detail::final_row_probs(clean_logits));
  Tape t;
  VarId lv = t.leaf(clean_logits);
  EXPECT_EQ(t.value(kl(t, lv)).data[0], 0.0);

  // At m = 1 the only gradient sample sits at the clean endpoint, where the
  // KL gradient vanishes up to rounding; interior points carry the signal.
  EdgeScores kl1 = eap_ig_kl_scores(f.params, f.graph, small, 1);
  for (double v : kl1.scores) ASSERT_LT(std::abs(v), 1e-12);
  EdgeScores kl5 = eap_ig_kl_scores(f.params, f.graph, small, 5);
  bool any_nonzero = false;
  double max_abs = 0.0;
  for (double v : kl5.scores) {
    ASSERT_TRUE(std::isfinite(v));
    max_abs = std::max(max_abs, std::abs(v));
    if (v != 0.0) any_nonzero = true;
  }
  EXPECT_TRUE(any_nonzero);
  EXPECT_GT(max_abs, 1e-12);
}

TEST(Scoring, JsonRoundTripIsExact) {
  auto& f = fx();
  EdgeScores s = eap_ig_scores(f.params, f.graph, {f.batch[0], f.batch[1]}, 3);
  const std::string path =
      std::filesystem::temp_directory_path() / "ct_scores_roundtrip.json";
  save_scores(s, f.graph, path);
  EdgeScores loaded = load_scores(f.graph, path);
  EXPECT_EQ(loaded.method, s.method);
  EXPECT_EQ(loaded.n_examples, s.n_examples);
  EXPECT_EQ(loaded.ig_steps, s.ig_steps);
  for (std::size_t e = 0; e < s.scores.size(); ++e)
    ASSERT_EQ(loaded.scores[e], s.scores[e]);
  std::filesystem::remove(path);
}

TEST(Circuit, WholeGraphSelection) {
  auto& f = fx();
  EdgeScores s = eap_scores(f.params, f.graph, {f.batch[0]});
  Circuit c = select_circuit(s, static_cast<int>(f.graph.n_edges()), f.graph);
  EXPECT_EQ(c.edges.size(), f.graph.n_edges());
  EXPECT_EQ(c.edges_raw.size(), f.graph.n_edges());
  EXPECT_EQ(c.nodes.size(), f.graph.n_nodes());
}

TEST(Circuit, SelectionBoundsChecked) {
  auto& f = fx();
  EdgeScores s = eap_scores(f.params, f.graph, {f.batch[0]});
  EXPECT_THROW(select_circuit(s, 0, f.graph), InputError);
  EXPECT_THROW(select_circuit(s, static_cast<int>(f.graph.n_edges()) + 1, f.graph),
               InputError);
}

TEST(Circuit, PruningKeepsTerminalEdgeDropsInteriorOne) {
  auto& f = fx();
  EdgeScores s;
  s.method = Method::EAP;
  s.scores.assign(f.graph.n_edges(), 0.0);

  // Top edge input->logits: survives pruning on its own.
  s.scores[f.graph.edge_index(Edge{NodeId::input(), Slot::logits_in()})] = 5.0;
  Circuit keep = select_circuit(s, 1, f.graph);
  EXPECT_EQ(keep.edges.size(), 1u);
  ASSERT_EQ(keep.nodes.size(), 2u);
  EXPECT_EQ(keep.nodes[0].str(), "input");
  EXPECT_EQ(keep.nodes[1].str(), "logits");

  // Top edge head->mlp only: the head lacks an incoming edge and the mlp an
  // outgoing one, so everything is pruned away.
  EdgeScores s2;
  s2.method = Method::EAP;
  s2.scores.assign(f.graph.n_edges(), 0.0);
  s2.scores[f.graph.edge_index(Edge{NodeId::attn_head(0, 1), Slot::mlp_in(0)})] =
      -7.0;  // ranking uses |score|
  Circuit pruned = select_circuit(s2, 1, f.graph);
  EXPECT_TRUE(pruned.edges.empty());
  EXPECT_EQ(pruned.edges_raw.size(), 1u);
  ASSERT_EQ(pruned.nodes.size(), 2u);
  EXPECT_EQ(pruned.nodes[0].str(), "input");
  EXPECT_EQ(pruned.nodes[1].str(), "logits");
}

TEST(Circuit, TieBreakByGraphEdgeOrderIsDeterministic) {
  auto& f = fx();
  EdgeScores s;
  s.method = Method::EAP;
  s.scores.assign(f.graph.n_edges(), 1.0);  // all tied
  Circuit a = select_circuit(s, 10, f.graph);
  Circuit b = select_circuit(s, 10, f.graph);
  ASSERT_EQ(a.edges_raw.size(), 10u);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(a.edges_raw[i].str(), f.graph.edges()[i].str());
    EXPECT_EQ(a.edges_raw[i].str(), b.edges_raw[i].str());
  }
}

TEST(Circuit, NodesEmittedInGraphOrder) {
  auto& f = fx();
  EdgeScores s = eap_ig_scores(f.params, f.graph, f.batch, 3);
  Circuit c = select_circuit(s, 20, f.graph);
  std::size_t prev = 0;
  for (const NodeId& n : c.nodes) {
    const std::size_t idx = f.graph.node_index(n);
    EXPECT_GE(idx, prev);
    prev = idx;
  }
  EXPECT_EQ(c.nodes.front().str(), "input");
  EXPECT_EQ(c.nodes.back().str(), "logits");
}

TEST(Faithfulness, NormalizationArithmetic) {
  EXPECT_NEAR(normalize_faithfulness(1.7, 2.0, 0.5), 0.8, 1e-12);
  EXPECT_THROW(normalize_faithfulness(1.0, 0.7, 0.7), DegenerateBaselineError);
}

TEST(Faithfulness, AffineInvariance) {
  Rng rng(23);
  for (int i = 0; i < 50; ++i) {
    const double b = rng.normal() * 3, bp = b - (1.0 + rng.uniform());
    const double m = bp + rng.normal();
    const double a = 0.1 + rng.uniform() * 5, c = rng.normal();
    const double base = normalize_faithfulness(m, b, bp);
    const double mapped = normalize_faithfulness(a * m + c, a * b + c, a * bp + c);
    EXPECT_NEAR(base, mapped, 1e-9 * (1 + std::abs(base)));
  }
}

TEST(Faithfulness, EndpointsOnRealModel) {
  auto& f = fx();
  std::vector<IOIExample> batch(f.batch.begin(), f.batch.begin() + 8);

  Circuit all;
  all.edges = f.graph.edges();
  FaithfulnessResult r_full = faithfulness(f.params, f.graph, all, batch);
  EXPECT_NEAR(r_full.normalized, 1.0, 1e-6);

  Circuit none;
  FaithfulnessResult r_empty = faithfulness(f.params, f.graph, none, batch);
  EXPECT_NEAR(r_empty.normalized, 0.0, 1e-6);
}

TEST(Faithfulness, CorruptedHardVariantRuns) {
  auto& f = fx();
  std::vector<IOIExample> batch(f.batch.begin(), f.batch.begin() + 6);
  Circuit all;
  all.edges = f.graph.edges();
  FaithfulnessResult r = faithfulness(f.params, f.graph, all, batch, true);
  EXPECT_NEAR(r.normalized, 1.0, 1e-6);
  // On a trained model the hard baseline sits below the clean one.
  EXPECT_GT(r.clean_baseline, r.corrupted_baseline);
}

TEST(Circuit, JsonRoundTrip) {
  auto& f = fx();
  EdgeScores s = eap_ig_scores(f.params, f.graph, f.batch, 3);
  Circuit c = select_circuit(s, 15, f.graph);
  c.faithfulness_raw = 1.25;
  c.faithfulness_normalized = 0.75;
  const std::string path =
      std::filesystem::temp_directory_path() / "ct_circuit_roundtrip.json";
  save_circuit(c, path);
  Circuit loaded = load_circuit(path);
  EXPECT_EQ(loaded.method, c.method);
  EXPECT_EQ(loaded.n_requested, c.n_requested);
  ASSERT_EQ(loaded.edges.size(), c.edges.size());
  for (std::size_t i = 0; i < c.edges.size(); ++i)
    EXPECT_EQ(loaded.edges[i].str(), c.edges[i].str());
  ASSERT_EQ(loaded.edges_raw.size(), c.edges_raw.size());
  ASSERT_EQ(loaded.nodes.size(), c.nodes.size());
  for (std::size_t i = 0; i < c.nodes.size(); ++i)
    EXPECT_EQ(loaded.nodes[i].str(), c.nodes[i].str());
  EXPECT_EQ(*loaded.faithfulness_raw, 1.25);
  EXPECT_EQ(*loaded.faithfulness_normalized, 0.75);
  std::filesystem::remove(path);
}
