#pragma once

#include <vector>

#include "ct/circuit.hpp"
#include "ct/ioi.hpp"
#include "ct/model.hpp"
#include "ct/train.hpp"

namespace ct::testing {

// Small configs sized for unit tests; vocabulary comes from the task.
inline ModelConfig tiny_config(int layers = 2, int heads = 2, int d_model = 16) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_head = d_model / heads;
  c.d_mlp = 2 * d_model;
  c.vocab_size = ioi::vocabulary().size();
  c.max_seq_len = 32;
  return c;
}

// Loss of one forward pass with an additive perturbation on one slot input.
inline double loss_with_slot_offset(const ComputationalGraph& graph,
                                    const ModelParams& params,
                                    const std::vector<int>& tokens,
                                    const LossBuilder& loss_fn,
                                    std::size_t slot_idx, const Tensor& offset) {
  std::map<std::size_t, Tensor> offsets{{slot_idx, offset}};
  detail::ForwardHooks hooks;
  hooks.slot_offsets = &offsets;
  detail::ForwardPass fp;
  detail::run_forward(fp, graph, params, tokens, hooks);
  Tape& t = fp.tape;
  return t.value(loss_fn(t, fp.logits)).data[0];
}

// A quickly trained small model shared by scoring/influence tests.
inline ModelParams quick_trained(const ModelConfig& cfg,
                                 const std::vector<IOIExample>& data,
                                 int steps = 400, double lr = 5e-3) {
  TrainHyper hyper;
  hyper.lr = lr;
  hyper.steps = steps;
  hyper.batch = 16;
  hyper.seed = 1;
  return train_toy_model(data, cfg, hyper);
}

}  // namespace ct::testing
