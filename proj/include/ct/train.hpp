#pragma once

#include <cmath>
#include <vector>

#include "ct/model.hpp"

namespace ct {

struct TrainHyper {
  double lr = 3e-3;
  int steps = 400;
  int batch = 16;
  double final_loss_weight = 4.0;
  std::uint64_t seed = 0;
};

// Adam on next-token cross-entropy over the clean sequences, the final
// position supervised with the indirect-object name. Deterministic given the
// seed: initialization, batch sampling and gradient accumulation order are
// all fixed.
inline ModelParams train_toy_model(const std::vector<IOIExample>& dataset,
                                   const ModelConfig& config,
                                   const TrainHyper& hyper) {
  if (dataset.empty()) throw InputError("train_toy_model: empty dataset");
  ModelParams params = ModelParams::init(config, hyper.seed);
  if (hyper.steps <= 0) return params;

  ComputationalGraph graph(config);
  Rng rng(hyper.seed + 0x9e3779b97f4a7c15ULL);

  const std::size_t np = params.tensors.size();
  std::vector<Tensor> m(np), v(np);
  for (std::size_t i = 0; i < np; ++i) {
    m[i] = Tensor::zeros(params.tensors[i].shape);
    v[i] = Tensor::zeros(params.tensors[i].shape);
  }
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  for (int step = 1; step <= hyper.steps; ++step) {
    std::vector<Tensor> grad(np);
    for (std::size_t i = 0; i < np; ++i)
      grad[i] = Tensor::zeros(params.tensors[i].shape);
    double loss = 0.0;
    const int bsz = std::min<int>(hyper.batch, static_cast<int>(dataset.size()));
    for (int b = 0; b < bsz; ++b) {
      const IOIExample& ex =
          dataset[rng.uniform_int(dataset.size())];
      ParamGradients g = param_gradients(
          graph, params, ex.clean_tokens, training_loss(ex, hyper.final_loss_weight));
      loss += g.loss;
      for (std::size_t i = 0; i < np; ++i)
        for (std::size_t k = 0; k < grad[i].size(); ++k)
          grad[i].data[k] += g.by_param[i].data[k];
    }
    loss /= bsz;
    if (!std::isfinite(loss))
      throw TrainingError("training diverged: non-finite loss", step);

    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    for (std::size_t i = 0; i < np; ++i) {
      for (std::size_t k = 0; k < grad[i].size(); ++k) {
        const double gk = grad[i].data[k] / bsz;
        m[i].data[k] = beta1 * m[i].data[k] + (1.0 - beta1) * gk;
        v[i].data[k] = beta2 * v[i].data[k] + (1.0 - beta2) * gk * gk;
        const double mhat = m[i].data[k] / bc1;
        const double vhat = v[i].data[k] / bc2;
        params.tensors[i].data[k] -= hyper.lr * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
  return params;
}

}  // namespace ct
