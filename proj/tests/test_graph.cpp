#include <gtest/gtest.h>

#include <set>

#include "ct/graph.hpp"

using namespace ct;

namespace {

// Closed-form edge count, independent of the enumeration in build_graph:
// sum_l 3H(1 + (H+1)l)  +  sum_l (1 + H(l+1) + l)  +  (1 + L(H+1)).
std::size_t closed_form_edges(int L, int H) {
  std::size_t total = 0;
  for (int l = 0; l < L; ++l) {
    total += 3u * H * (1 + (H + 1) * l);
    total += 1u + H * (l + 1) + l;
  }
  total += 1u + static_cast<std::size_t>(L) * (H + 1);
  return total;
}

ModelConfig tiny(int layers, int heads) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = 8 * heads;
  c.d_head = 8;
  c.d_mlp = 16;
  c.vocab_size = 11;
  c.max_seq_len = 12;
  return c;
}

}  // namespace

TEST(Graph, Gpt2SmallShape) {
  ComputationalGraph g = build_graph(ModelConfig::gpt2_small());
  EXPECT_EQ(g.n_nodes(), 158u);
  EXPECT_EQ(g.n_edges(), 32491u);
}

TEST(Graph, OneLayerOneHeadByHand) {
  ComputationalGraph g = build_graph(tiny(1, 1));
  EXPECT_EQ(g.n_nodes(), 4u);
  ASSERT_EQ(g.n_edges(), 8u);
  // input feeds q/k/v of the head, the mlp, and logits; the head feeds the
  // mlp and logits; the mlp feeds logits.
  std::set<std::string> expect = {
      "input->a0.h0.q", "input->a0.h0.k", "input->a0.h0.v", "input->m0",
      "a0.h0->m0",      "input->logits",  "a0.h0->logits",  "m0->logits"};
  std::set<std::string> got;
  for (const Edge& e : g.edges()) got.insert(e.str());
  EXPECT_EQ(got, expect);
}

TEST(Graph, NodeStringForms) {
  EXPECT_EQ(NodeId::attn_head(9, 3).str(), "a9.h3");
  EXPECT_EQ(NodeId::mlp(11).str(), "m11");
  EXPECT_EQ(NodeId::input().str(), "input");
  EXPECT_EQ(NodeId::logits().str(), "logits");
}

TEST(Graph, ClosedFormMatchesEnumeration) {
  for (int L = 1; L <= 4; ++L)
    for (int H = 1; H <= 4; ++H) {
      ComputationalGraph g = build_graph(tiny(L, H));
      EXPECT_EQ(g.n_edges(), closed_form_edges(L, H)) << "L=" << L << " H=" << H;
      EXPECT_EQ(g.n_nodes(), 2u + static_cast<std::size_t>(L) * (H + 1));
    }
}

TEST(Graph, EdgesDuplicateFreeAndTopological) {
  ComputationalGraph g = build_graph(tiny(3, 2));
  std::set<std::string> seen;
  for (const Edge& e : g.edges()) {
    EXPECT_TRUE(seen.insert(e.str()).second) << "duplicate edge " << e.str();
    EXPECT_TRUE(g.precedes(e.src, e.dst)) << e.str();
  }
  // Destination slots appear in non-decreasing topological order.
  std::size_t prev_slot = 0;
  for (const Edge& e : g.edges()) {
    const std::size_t s = g.slot_index(e.dst);
    EXPECT_GE(s, prev_slot);
    prev_slot = s;
  }
}

TEST(Graph, EdgeIndexRoundTrip) {
  ComputationalGraph g = build_graph(tiny(2, 3));
  for (std::size_t i = 0; i < g.n_edges(); ++i) {
    const Edge& e = g.edges()[i];
    EXPECT_EQ(g.edge_index(e), i);
    EXPECT_EQ(Edge::parse(e.str()).str(), e.str());
  }
}

TEST(Graph, NodeAndSlotParse) {
  EXPECT_EQ(NodeId::parse("a9.h3"), NodeId::attn_head(9, 3));
  EXPECT_EQ(NodeId::parse("m11"), NodeId::mlp(11));
  EXPECT_EQ(NodeId::parse("input"), NodeId::input());
  EXPECT_EQ(Slot::parse("a2.h1.k"), Slot::head_k(2, 1));
  EXPECT_EQ(Slot::parse("m4"), Slot::mlp_in(4));
  EXPECT_EQ(Slot::parse("logits"), Slot::logits_in());
  EXPECT_THROW(NodeId::parse("bogus"), InputError);
  EXPECT_THROW(Slot::parse("a2.h1.x"), InputError);
}

TEST(Graph, ConfigValidation) {
  ModelConfig bad = tiny(1, 2);
  bad.d_model = 13;  // not d_head * n_heads
  EXPECT_THROW(build_graph(bad), InputError);
  ModelConfig neg = tiny(1, 1);
  neg.d_mlp = 0;
  EXPECT_THROW(build_graph(neg), InputError);
}

TEST(Graph, EdgeNotInGraph) {
  ComputationalGraph g = build_graph(tiny(2, 2));
  // mlp of layer 1 cannot feed a head of layer 0
  Edge bogus{NodeId::mlp(1), Slot::head_q(0, 0)};
  EXPECT_THROW(g.edge_index(bogus), InputError);
}
