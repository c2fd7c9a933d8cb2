#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ct/circuit.hpp"
#include "ct/model.hpp"

namespace ct {

// Flat view over the parameters of the circuit nodes in one layer.
struct ParamSlice {
  int layer = -1;
  std::vector<std::string> paths;
  std::vector<std::size_t> param_idx;  // into params.tensors
  std::vector<std::size_t> offsets;    // flat offset of each tensor
  std::size_t dim = 0;

  bool empty() const { return dim == 0; }
};

inline ParamSlice make_param_slice(const ModelParams& params,
                                   const Circuit& circuit, int layer) {
  ParamSlice s;
  s.layer = layer;
  for (const NodeId& n : circuit.nodes) {
    if (n.layer != layer) continue;
    if (n.kind != NodeId::Kind::Head && n.kind != NodeId::Kind::Mlp) continue;
    for (const std::string& p : ModelParams::node_param_paths(n)) {
      s.paths.push_back(p);
      s.param_idx.push_back(params.param_index(p));
      s.offsets.push_back(s.dim);
      s.dim += params.tensors[s.param_idx.back()].size();
    }
  }
  return s;
}

inline std::vector<double> flatten_slice(const ModelParams& params,
                                         const ParamSlice& slice) {
  std::vector<double> out(slice.dim);
  for (std::size_t i = 0; i < slice.param_idx.size(); ++i) {
    const Tensor& t = params.tensors[slice.param_idx[i]];
    std::copy(t.data.begin(), t.data.end(), out.begin() + slice.offsets[i]);
  }
  return out;
}

inline void unflatten_slice(ModelParams& params, const ParamSlice& slice,
                            const std::vector<double>& flat) {
  if (flat.size() != slice.dim)
    throw InputError("unflatten: dimension mismatch");
  for (std::size_t i = 0; i < slice.param_idx.size(); ++i) {
    Tensor& t = params.tensors[slice.param_idx[i]];
    std::copy(flat.begin() + slice.offsets[i],
              flat.begin() + slice.offsets[i] + t.size(), t.data.begin());
  }
}

// ---- flat-vector helpers ----

using FlatVec = std::vector<double>;
using GradFn = std::function<FlatVec(const FlatVec&)>;  // theta -> gradient
using HvpFn = std::function<FlatVec(const FlatVec&)>;   // v -> H v

inline double vec_norm(const FlatVec& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

inline double vec_dot(const FlatVec& a, const FlatVec& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double vec_inf_norm(const FlatVec& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Hv by central differences of first-order gradients:
// (g(theta + eps*vhat) - g(theta - eps*vhat)) * |v| / (2 eps),
// eps = 1e-3 * (1 + |theta|_inf). Returns zero for v = 0.
inline FlatVec hvp(const GradFn& loss_grad, const FlatVec& theta,
                   const FlatVec& v) {
  if (v.size() != theta.size())
    throw InputError("hvp: |v| != |theta|");
  const double vnorm = vec_norm(v);
  if (vnorm == 0.0) return FlatVec(v.size(), 0.0);
  const double eps = 1e-3 * (1.0 + vec_inf_norm(theta));
  FlatVec plus = theta, minus = theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double dv = eps * v[i] / vnorm;
    plus[i] += dv;
    minus[i] -= dv;
  }
  const FlatVec gp = loss_grad(plus);
  const FlatVec gm = loss_grad(minus);
  FlatVec out(theta.size());
  const double scale = vnorm / (2.0 * eps);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    out[i] = (gp[i] - gm[i]) * scale;
    if (!std::isfinite(out[i]))
      throw NumericError("hvp: non-finite gradient difference at coordinate " +
                         std::to_string(i));
  }
  return out;
}

inline HvpFn bind_hvp(GradFn loss_grad, FlatVec theta) {
  return [loss_grad = std::move(loss_grad), theta = std::move(theta)](
             const FlatVec& v) { return hvp(loss_grad, theta, v); };
}

struct ScaleEstimate {
  double lambda_max = 0.0;
  double c = 0.0;
};

// Power iteration on the operator's dominant eigenvalue magnitude; returns
// c = 0.9 / lambda_max so the scaled operator has norm below one.
inline ScaleEstimate estimate_scale(const HvpFn& op, std::size_t d, int iters) {
  if (iters < 1) throw InputError("estimate_scale: iters must be >= 1");
  if (d == 0) throw SpectralEstimateError("estimate_scale: empty operator");
  Rng rng(0x5ca1ab1eULL + d);
  FlatVec x(d);
  for (double& v : x) v = rng.normal();
  double nx = vec_norm(x);
  for (double& v : x) v /= nx;
  double lambda = 0.0;
  for (int it = 0; it < iters; ++it) {
    FlatVec y = op(x);
    const double ny = vec_norm(y);
    if (!std::isfinite(ny))
      throw SpectralEstimateError("power iteration produced non-finite iterate");
    if (ny == 0.0)
      throw SpectralEstimateError("power iteration hit the null space (H x = 0)");
    lambda = ny;
    for (std::size_t i = 0; i < d; ++i) x[i] = y[i] / ny;
  }
  if (!(lambda > 0.0) || !std::isfinite(lambda))
    throw SpectralEstimateError("dominant eigenvalue estimate not positive");
  return {lambda, 0.9 / lambda};
}

// Truncated Neumann series for (H + lambda I)^-1 v: with Ht = c (H + lambda I),
// returns c * sum_{i=0..K} (I - Ht)^i v via r_{i+1} = v + (I - Ht) r_i.
// Exits early once the iterate stops moving; errors out if the iterate norm
// grows for five consecutive steps (scaling precondition violated).
inline FlatVec inverse_hvp(const HvpFn& op, const FlatVec& v, double c,
                           double lambda, int K, double early_exit_tol = 1e-7) {
  if (K < 1) throw InputError("inverse_hvp: K must be >= 1");
  FlatVec r = v;
  // The partial sums r_i grow towards the limit even when the series
  // converges; divergence shows up in the increments (I - Ht)^i v instead.
  double prev_step = -1.0;
  int growth_streak = 0;
  for (int i = 0; i < K; ++i) {
    FlatVec hr = op(r);
    FlatVec next(v.size());
    double diff2 = 0.0;
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double ht_r = c * (hr[k] + lambda * r[k]);
      next[k] = v[k] + r[k] - ht_r;
      const double d = next[k] - r[k];
      diff2 += d * d;
    }
    const double rnorm = vec_norm(r);
    const double step_norm = std::sqrt(diff2);
    if (!std::isfinite(step_norm))
      throw DivergenceError("inverse_hvp: non-finite iterate at step " +
                            std::to_string(i + 1));
    growth_streak = (prev_step >= 0.0 && step_norm > prev_step)
                        ? growth_streak + 1
                        : 0;
    if (growth_streak >= 5)
      throw DivergenceError(
          "inverse_hvp: iterate norm grew for 5 consecutive steps; "
          "spectral scaling violated");
    prev_step = step_norm;
    r = std::move(next);
    if (rnorm > 0.0 && step_norm / rnorm < early_exit_tol) break;
  }
  for (double& x : r) x *= c;
  return r;
}

// ---- model-bound machinery ----

// Gradient of loss_fn over the slice as a function of the slice parameters.
// Holds one mutable working copy of the model internally.
inline GradFn make_slice_grad_fn(const ModelParams& params,
                                 const ComputationalGraph& graph,
                                 std::vector<int> tokens, LossBuilder loss_fn,
                                 ParamSlice slice) {
  auto work = std::make_shared<ModelParams>(params);
  return [work, &graph, tokens = std::move(tokens), loss_fn = std::move(loss_fn),
          slice = std::move(slice)](const FlatVec& theta) {
    unflatten_slice(*work, slice, theta);
    ParamGradients g =
        param_gradients(graph, *work, tokens, loss_fn, &slice.param_idx);
    FlatVec out(slice.dim);
    for (std::size_t i = 0; i < slice.param_idx.size(); ++i) {
      const Tensor& gt = g.by_param[slice.param_idx[i]];
      std::copy(gt.data.begin(), gt.data.end(), out.begin() + slice.offsets[i]);
    }
    return out;
  };
}

// Per-token decomposition of the slice gradient: for a weight consumed as
// x @ W the position-t term is outer(x_t, outgrad_t); for a bias, outgrad_t.
// The terms sum to the full slice gradient exactly.
struct PerTokenGrads {
  ParamSlice slice;
  std::vector<FlatVec> by_token;  // empty when the slice is empty
  FlatVec full_gradient;
};

inline PerTokenGrads per_token_gradients(const ModelParams& params,
                                         const ComputationalGraph& graph,
                                         const Circuit& circuit, int layer,
                                         const IOIExample& example,
                                         const LossBuilder& loss_fn) {
  PerTokenGrads out;
  out.slice = make_param_slice(params, circuit, layer);
  if (out.slice.empty()) return out;  // empty-slice signal, not an error

  detail::ForwardHooks hooks;
  hooks.params_require_grad = true;
  hooks.grad_params = &out.slice.param_idx;
  detail::ForwardPass fp;
  detail::run_forward(fp, graph, params, example.clean_tokens, hooks);
  VarId loss = loss_fn(fp.tape, fp.logits);
  if (fp.tape.value(loss).size() != 1)
    throw UsageError("per_token_gradients: loss must be scalar");
  fp.tape.backward(loss);

  const std::size_t seq = example.clean_tokens.size();
  out.by_token.assign(seq, FlatVec(out.slice.dim, 0.0));
  out.full_gradient.assign(out.slice.dim, 0.0);

  for (std::size_t pi = 0; pi < out.slice.param_idx.size(); ++pi) {
    const VarId pvar = fp.param_vars[out.slice.param_idx[pi]];
    const std::size_t off = out.slice.offsets[pi];
    const Tensor pg = fp.tape.grad(pvar);
    std::copy(pg.data.begin(), pg.data.end(), out.full_gradient.begin() + off);

    // Locate the op consuming this parameter; head/MLP projections are each
    // used exactly once per forward pass.
    bool found = false;
    for (std::size_t nid = 0; nid < fp.tape.size() && !found; ++nid) {
      const OpKind kind = fp.tape.kind(nid);
      if (kind != OpKind::Matmul && kind != OpKind::AddBias) continue;
      const auto& par = fp.tape.parents(nid);
      if (par.size() != 2 || par[1] != pvar) continue;
      found = true;
      const Tensor gout = fp.tape.grad(nid);
      if (kind == OpKind::AddBias) {
        for (std::size_t t = 0; t < seq; ++t)
          for (std::size_t c = 0; c < gout.cols(); ++c)
            out.by_token[t][off + c] = gout(t, c);
      } else {
        const Tensor& x = fp.tape.value(par[0]);
        const std::size_t in = x.cols(), cols = gout.cols();
        for (std::size_t t = 0; t < seq; ++t) {
          FlatVec& gt = out.by_token[t];
          for (std::size_t i = 0; i < in; ++i) {
            const double xv = x(t, i);
            if (xv == 0.0) continue;
            const std::size_t row = off + i * cols;
            for (std::size_t c = 0; c < cols; ++c)
              gt[row + c] = xv * gout(t, c);
          }
        }
      }
    }
    if (!found)
      throw UsageError("per_token_gradients: parameter " + out.slice.paths[pi] +
                       " is not consumed by a matmul/bias op");
  }
  return out;
}

// Token-position x layer matrix of self-influence scores for one example.
// Layers without circuit nodes are zero-filled and flagged inactive.
struct InfluenceTable {
  std::vector<std::string> tokens;
  int n_layers = 0;
  std::vector<std::vector<double>> values;  // [token][layer]
  std::vector<bool> layer_active;
  std::vector<double> layer_damping;  // effective lambda per layer
  std::string method;
};

// Smallest eigenvalue of a symmetric operator with spectrum below sigma,
// via power iteration on (sigma I - op).
inline double estimate_min_eigenvalue(const HvpFn& op, std::size_t d,
                                      double sigma, int iters) {
  HvpFn shifted = [&op, sigma](const FlatVec& v) {
    FlatVec y = op(v);
    for (std::size_t i = 0; i < v.size(); ++i) y[i] = sigma * v[i] - y[i];
    return y;
  };
  try {
    return sigma - estimate_scale(shifted, d, iters).lambda_max;
  } catch (const SpectralEstimateError&) {
    return sigma;  // op == sigma I on the probed subspace
  }
}

// Shared cell evaluator: g^T (H + lambda I)^-1 g per gradient, with the
// Neumann scaling estimated once from the damped operator. With
// adaptive_damping set, lambda is lifted per call so the damped spectrum
// stays positive even when H has negative eigenvalues beyond -lambda;
// the lambda actually used is written back if a pointer is given.
inline std::vector<double> self_influence_cells(const HvpFn& op,
                                                const std::vector<FlatVec>& gs,
                                                std::size_t dim, double lambda,
                                                int K, int power_iters = 30,
                                                bool adaptive_damping = false,
                                                double* lambda_used = nullptr) {
  std::vector<double> out(gs.size(), 0.0);
  if (lambda_used) *lambda_used = lambda;
  if (gs.empty()) return out;
  auto damp = [&op](double lam) {
    return [&op, lam](const FlatVec& v) {
      FlatVec y = op(v);
      for (std::size_t i = 0; i < v.size(); ++i) y[i] += lam * v[i];
      return y;
    };
  };
  HvpFn damped = damp(lambda);
  ScaleEstimate sc = estimate_scale(damped, dim, power_iters);
  if (adaptive_damping) {
    // Power iteration under-converges on clustered spectra, so pad the
    // estimated edge; the retry loop below backstops any remainder.
    const double min_eig =
        estimate_min_eigenvalue(damped, dim, sc.lambda_max, 2 * power_iters);
    const double margin = 1e-2 * sc.lambda_max;
    if (min_eig < margin) {
      const double lift = margin + 1.5 * std::max(0.0, -min_eig);
      lambda += lift;
      // A scalar shift moves the whole spectrum; no re-estimation needed.
      sc.lambda_max += lift;
      sc.c = 0.9 / sc.lambda_max;
    }
  }
  const int max_attempts = adaptive_damping ? 6 : 1;
  for (int attempt = 0;; ++attempt) {
    try {
      for (std::size_t t = 0; t < gs.size(); ++t) {
        if (vec_norm(gs[t]) == 0.0) continue;
        // inverse_hvp applies its own damping, so pass the raw operator.
        FlatVec x = inverse_hvp(op, gs[t], sc.c, lambda, K);
        out[t] = vec_dot(gs[t], x);
      }
      break;
    } catch (const DivergenceError&) {
      if (attempt + 1 >= max_attempts) throw;
      const double extra = std::max(lambda, 0.1 * sc.lambda_max);
      lambda += extra;
      sc.lambda_max += extra;
      sc.c = 0.9 / sc.lambda_max;
    }
  }
  if (lambda_used) *lambda_used = lambda;
  return out;
}

struct InfluenceOptions {
  double damping = 0.01;
  int neumann_k = 100;
  int power_iters = 30;
  // Lift the damping past the negative spectral edge when a layer's
  // single-example Hessian is indefinite beyond -damping.
  bool adaptive_damping = true;
};

inline InfluenceTable self_influence_table(const ModelParams& params,
                                           const ComputationalGraph& graph,
                                           const Circuit& circuit,
                                           const IOIExample& example,
                                           const LossBuilder& loss_fn,
                                           const InfluenceOptions& opt = {}) {
  if (circuit.edges.empty() && circuit.edges_raw.empty())
    throw InputError("self_influence_table: empty circuit");
  InfluenceTable table;
  table.tokens = example.clean_words;
  table.n_layers = params.config.n_layers;
  table.method = method_name(circuit.method);
  const std::size_t seq = example.clean_tokens.size();
  table.values.assign(seq, std::vector<double>(table.n_layers, 0.0));
  table.layer_active.assign(table.n_layers, false);
  table.layer_damping.assign(table.n_layers, opt.damping);

  for (int l = 0; l < table.n_layers; ++l) {
    PerTokenGrads ptg =
        per_token_gradients(params, graph, circuit, l, example, loss_fn);
    if (ptg.slice.empty()) continue;
    table.layer_active[l] = true;

    GradFn grad_fn = make_slice_grad_fn(params, graph, example.clean_tokens,
                                        loss_fn, ptg.slice);
    HvpFn op = bind_hvp(grad_fn, flatten_slice(params, ptg.slice));
    std::vector<double> cells;
    double lambda_used = opt.damping;
    try {
      cells = self_influence_cells(op, ptg.by_token, ptg.slice.dim, opt.damping,
                                   opt.neumann_k, opt.power_iters,
                                   opt.adaptive_damping, &lambda_used);
    } catch (const DivergenceError& e) {
      throw DivergenceError(std::string(e.what()) + " (layer " +
                            std::to_string(l) + ")");
    }
    table.layer_damping[l] = lambda_used;
    for (std::size_t t = 0; t < seq; ++t) table.values[t][l] = cells[t];
  }
  return table;
}

// Influence of one sample's gradient on another through the damped inverse
// curvature: -g_test^T (H + lambda I)^-1 g_train.
inline double cross_influence(const HvpFn& op, const FlatVec& z_train_grad,
                              const FlatVec& z_test_grad, double lambda, int K,
                              int power_iters = 30) {
  if (z_train_grad.size() != z_test_grad.size())
    throw InputError("cross_influence: gradient dimensions differ");
  HvpFn damped = [&op, lambda](const FlatVec& v) {
    FlatVec y = op(v);
    for (std::size_t i = 0; i < v.size(); ++i) y[i] += lambda * v[i];
    return y;
  };
  const ScaleEstimate sc = estimate_scale(damped, z_train_grad.size(), power_iters);
  FlatVec x = inverse_hvp(op, z_train_grad, sc.c, lambda, K);
  return -vec_dot(z_test_grad, x);
}

}  // namespace ct
