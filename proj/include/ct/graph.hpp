#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ct/errors.hpp"

namespace ct {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 64;
  int d_head = 16;
  int d_mlp = 256;
  int vocab_size = 64;
  int max_seq_len = 32;

  void validate() const {
    if (n_layers <= 0 || n_heads <= 0 || d_model <= 0 || d_head <= 0 ||
        d_mlp <= 0 || vocab_size <= 0 || max_seq_len <= 0)
      throw InputError("model config: all dimensions must be positive");
    if (d_head * n_heads != d_model)
      throw InputError("model config: d_head * n_heads must equal d_model");
  }

  static ModelConfig gpt2_small() {
    return ModelConfig{12, 12, 768, 64, 3072, 50257, 1024};
  }
};

// Graph node: the input embedding, one attention head, one MLP, or the
// logits readout. String forms are "input", "a{L}.h{H}", "m{L}", "logits".
struct NodeId {
  enum class Kind { Input, Head, Mlp, Logits };
  Kind kind = Kind::Input;
  int layer = -1;
  int head = -1;

  static NodeId input() { return {Kind::Input, -1, -1}; }
  static NodeId attn_head(int layer, int head) { return {Kind::Head, layer, head}; }
  static NodeId mlp(int layer) { return {Kind::Mlp, layer, -1}; }
  static NodeId logits() { return {Kind::Logits, -1, -1}; }

  bool operator==(const NodeId&) const = default;

  std::string str() const {
    switch (kind) {
      case Kind::Input:
        return "input";
      case Kind::Head:
        return "a" + std::to_string(layer) + ".h" + std::to_string(head);
      case Kind::Mlp:
        return "m" + std::to_string(layer);
      case Kind::Logits:
        return "logits";
    }
    return "?";
  }

  static NodeId parse(const std::string& s) {
    if (s == "input") return input();
    if (s == "logits") return logits();
    if (s.size() >= 2 && s[0] == 'm') return mlp(std::stoi(s.substr(1)));
    if (s.size() >= 4 && s[0] == 'a') {
      const auto dot = s.find(".h");
      if (dot != std::string::npos)
        return attn_head(std::stoi(s.substr(1, dot - 1)),
                         std::stoi(s.substr(dot + 2)));
    }
    throw InputError("unparseable node id: '" + s + "'");
  }
};

// Destination slot an edge writes into. Heads expose three distinct read
// slots (query, key, value); MLPs and logits one each.
struct Slot {
  enum class Kind { HeadQ, HeadK, HeadV, MlpIn, LogitsIn };
  Kind kind = Kind::LogitsIn;
  int layer = -1;
  int head = -1;

  static Slot head_q(int layer, int head) { return {Kind::HeadQ, layer, head}; }
  static Slot head_k(int layer, int head) { return {Kind::HeadK, layer, head}; }
  static Slot head_v(int layer, int head) { return {Kind::HeadV, layer, head}; }
  static Slot mlp_in(int layer) { return {Kind::MlpIn, layer, -1}; }
  static Slot logits_in() { return {Kind::LogitsIn, -1, -1}; }

  bool operator==(const Slot&) const = default;

  // The node this slot belongs to.
  NodeId owner() const {
    switch (kind) {
      case Kind::HeadQ:
      case Kind::HeadK:
      case Kind::HeadV:
        return NodeId::attn_head(layer, head);
      case Kind::MlpIn:
        return NodeId::mlp(layer);
      case Kind::LogitsIn:
        return NodeId::logits();
    }
    return NodeId::logits();
  }

  std::string str() const {
    switch (kind) {
      case Kind::HeadQ:
        return owner().str() + ".q";
      case Kind::HeadK:
        return owner().str() + ".k";
      case Kind::HeadV:
        return owner().str() + ".v";
      case Kind::MlpIn:
      case Kind::LogitsIn:
        return owner().str();
    }
    return "?";
  }

  static Slot parse(const std::string& s) {
    if (s == "logits") return logits_in();
    if (!s.empty() && s[0] == 'm') return mlp_in(std::stoi(s.substr(1)));
    if (!s.empty() && s[0] == 'a' && s.size() > 2) {
      const char suffix = s.back();
      if (s[s.size() - 2] == '.' &&
          (suffix == 'q' || suffix == 'k' || suffix == 'v')) {
        NodeId n = NodeId::parse(s.substr(0, s.size() - 2));
        if (suffix == 'q') return head_q(n.layer, n.head);
        if (suffix == 'k') return head_k(n.layer, n.head);
        return head_v(n.layer, n.head);
      }
    }
    throw InputError("unparseable slot: '" + s + "'");
  }
};

struct Edge {
  NodeId src;
  Slot dst;

  bool operator==(const Edge&) const = default;

  std::string str() const { return src.str() + "->" + dst.str(); }

  static Edge parse(const std::string& s) {
    const auto arrow = s.find("->");
    if (arrow == std::string::npos)
      throw InputError("unparseable edge: '" + s + "'");
    return Edge{NodeId::parse(s.substr(0, arrow)), Slot::parse(s.substr(arrow + 2))};
  }
};

// Full node/edge enumeration of the model architecture. Nodes, slots and
// edges are each stored in a fixed topological order; edges are grouped by
// destination slot, so each slot's incoming edges form a contiguous id range.
class ComputationalGraph {
 public:
  explicit ComputationalGraph(const ModelConfig& config) : config_(config) {
    config.validate();
    const int L = config.n_layers, H = config.n_heads;

    nodes_.push_back(NodeId::input());
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) nodes_.push_back(NodeId::attn_head(l, h));
      nodes_.push_back(NodeId::mlp(l));
    }
    nodes_.push_back(NodeId::logits());

    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        slots_.push_back(Slot::head_q(l, h));
        slots_.push_back(Slot::head_k(l, h));
        slots_.push_back(Slot::head_v(l, h));
      }
      slots_.push_back(Slot::mlp_in(l));
    }
    slots_.push_back(Slot::logits_in());

    slot_edge_offset_.resize(slots_.size());
    slot_preds_.resize(slots_.size());
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      slot_edge_offset_[s] = edges_.size();
      for (std::size_t n = 0; n < nodes_.size(); ++n) {
        if (!precedes(nodes_[n], slots_[s])) continue;
        slot_preds_[s].push_back(n);
        edges_.push_back(Edge{nodes_[n], slots_[s]});
      }
    }
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<NodeId>& nodes() const { return nodes_; }
  const std::vector<Slot>& slots() const { return slots_; }
  const std::vector<Edge>& edges() const { return edges_; }
  std::size_t n_nodes() const { return nodes_.size(); }
  std::size_t n_edges() const { return edges_.size(); }

  std::size_t node_index(const NodeId& n) const {
    const int L = config_.n_layers, H = config_.n_heads;
    switch (n.kind) {
      case NodeId::Kind::Input:
        return 0;
      case NodeId::Kind::Head:
        check_layer_head(n.layer, n.head);
        return 1 + static_cast<std::size_t>(n.layer) * (H + 1) + n.head;
      case NodeId::Kind::Mlp:
        check_layer_head(n.layer, 0);
        return 1 + static_cast<std::size_t>(n.layer) * (H + 1) + H;
      case NodeId::Kind::Logits:
        return 1 + static_cast<std::size_t>(L) * (H + 1);
    }
    throw InputError("bad node id");
  }

  std::size_t slot_index(const Slot& s) const {
    const int L = config_.n_layers, H = config_.n_heads;
    const std::size_t per_layer = 3 * static_cast<std::size_t>(H) + 1;
    switch (s.kind) {
      case Slot::Kind::HeadQ:
      case Slot::Kind::HeadK:
      case Slot::Kind::HeadV: {
        check_layer_head(s.layer, s.head);
        const std::size_t off =
            s.kind == Slot::Kind::HeadQ ? 0 : (s.kind == Slot::Kind::HeadK ? 1 : 2);
        return s.layer * per_layer + 3 * static_cast<std::size_t>(s.head) + off;
      }
      case Slot::Kind::MlpIn:
        check_layer_head(s.layer, 0);
        return s.layer * per_layer + 3 * static_cast<std::size_t>(H);
      case Slot::Kind::LogitsIn:
        return static_cast<std::size_t>(L) * per_layer;
    }
    throw InputError("bad slot");
  }

  // Incoming edges of slot s occupy edge ids
  // [slot_edge_offset(s), slot_edge_offset(s) + predecessors(s).size()).
  std::size_t slot_edge_offset(std::size_t slot_idx) const {
    return slot_edge_offset_.at(slot_idx);
  }
  const std::vector<std::size_t>& predecessors(std::size_t slot_idx) const {
    return slot_preds_.at(slot_idx);
  }

  std::size_t edge_index(const Edge& e) const {
    const std::size_t s = slot_index(e.dst);
    const auto& preds = slot_preds_[s];
    const std::size_t n = node_index(e.src);
    for (std::size_t k = 0; k < preds.size(); ++k)
      if (preds[k] == n) return slot_edge_offset_[s] + k;
    throw InputError("edge not in graph: " + e.str());
  }

  // Architectural order: does node n write before slot s reads? Attention
  // precedes the MLP within a layer; input precedes everything; logits
  // follow everything.
  bool precedes(const NodeId& n, const Slot& s) const {
    if (n.kind == NodeId::Kind::Logits) return false;
    if (n.kind == NodeId::Kind::Input) return true;
    switch (s.kind) {
      case Slot::Kind::HeadQ:
      case Slot::Kind::HeadK:
      case Slot::Kind::HeadV:
        return n.layer < s.layer;
      case Slot::Kind::MlpIn:
        return n.kind == NodeId::Kind::Head ? n.layer <= s.layer
                                            : n.layer < s.layer;
      case Slot::Kind::LogitsIn:
        return true;
    }
    return false;
  }

 private:
  ModelConfig config_;
  std::vector<NodeId> nodes_;
  std::vector<Slot> slots_;
  std::vector<Edge> edges_;
  std::vector<std::size_t> slot_edge_offset_;
  std::vector<std::vector<std::size_t>> slot_preds_;

  void check_layer_head(int layer, int head) const {
    if (layer < 0 || layer >= config_.n_layers || head < 0 ||
        head >= config_.n_heads)
      throw InputError("node/slot outside graph: layer " + std::to_string(layer) +
                       ", head " + std::to_string(head));
  }
};

inline ComputationalGraph build_graph(const ModelConfig& config) {
  return ComputationalGraph(config);
}

}  // namespace ct
