#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "ct/tensor.hpp"

namespace ct {

using VarId = std::size_t;

enum class OpKind {
  Leaf,
  Identity,
  Add,
  AddN,
  Sub,
  Mul,
  Scale,
  AddBias,
  Matmul,
  MatmulBT,
  LayerNorm,
  Gelu,
  Softmax,
  Embedding,
  SliceRows,
  ConcatRows,
  Pick,
  SumAll,
  CrossEntropy,
  KlDivergence,
};

// Reverse-mode tape over a fixed primitive set. Recording order is a valid
// topological order by construction; backward walks it once in reverse.
// Single-owner, not shareable across threads.
class Tape {
 public:
  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- recording ----

  VarId leaf(Tensor value, bool requires_grad = false) {
    return push(OpKind::Leaf, std::move(value), {}, requires_grad, nullptr);
  }

  VarId identity(VarId a) {
    Tensor out = value(a);
    return push(OpKind::Identity, std::move(out), {a}, needs(a),
                [](Tape& t, std::size_t i) {
                  t.accumulate(t.nodes_[i].parents[0], t.nodes_[i].grad);
                });
  }

  VarId add(VarId a, VarId b) {
    check_same("add", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
    return push(OpKind::Add, std::move(out), {a, b}, needs(a) || needs(b),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  t.accumulate(t.nodes_[i].parents[0], g);
                  t.accumulate(t.nodes_[i].parents[1], g);
                });
  }

  VarId add_n(const std::vector<VarId>& terms) {
    if (terms.empty()) throw UsageError("add_n: empty term list");
    Tensor out = value(terms[0]);
    bool rg = needs(terms[0]);
    for (std::size_t k = 1; k < terms.size(); ++k) {
      check_same("add_n", terms[0], terms[k]);
      const Tensor& v = value(terms[k]);
      for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += v.data[i];
      rg = rg || needs(terms[k]);
    }
    return push(OpKind::AddN, std::move(out), terms, rg,
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  for (VarId p : t.nodes_[i].parents) t.accumulate(p, g);
                });
  }

  VarId sub(VarId a, VarId b) {
    check_same("sub", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= vb.data[i];
    return push(OpKind::Sub, std::move(out), {a, b}, needs(a) || needs(b),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  t.accumulate(t.nodes_[i].parents[0], g);
                  t.accumulate_scaled(t.nodes_[i].parents[1], g, -1.0);
                });
  }

  VarId mul(VarId a, VarId b) {
    check_same("mul", a, b);
    Tensor out = value(a);
    const Tensor& vb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
    return push(OpKind::Mul, std::move(out), {a, b}, needs(a) || needs(b),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  const Tensor& va = t.value(t.nodes_[i].parents[0]);
                  const Tensor& vb2 = t.value(t.nodes_[i].parents[1]);
                  Tensor ga = g, gb = g;
                  for (std::size_t k = 0; k < g.size(); ++k) {
                    ga.data[k] *= vb2.data[k];
                    gb.data[k] *= va.data[k];
                  }
                  t.accumulate(t.nodes_[i].parents[0], ga);
                  t.accumulate(t.nodes_[i].parents[1], gb);
                });
  }

  VarId scale(VarId a, double c) {
    Tensor out = value(a);
    for (double& x : out.data) x *= c;
    return push(OpKind::Scale, std::move(out), {a}, needs(a),
                [c](Tape& t, std::size_t i) {
                  t.accumulate_scaled(t.nodes_[i].parents[0], t.nodes_[i].grad, c);
                });
  }

  // x: (n x m), b: (m). Row-broadcast bias add.
  VarId add_bias(VarId x, VarId b) {
    const Tensor& vx = value(x);
    const Tensor& vb = value(b);
    if (vx.ndim() != 2 || vb.ndim() != 1 || vx.cols() != vb.shape[0])
      throw ShapeError("add_bias", vx.shape_str() + " + " + vb.shape_str());
    Tensor out = vx;
    for (std::size_t r = 0; r < vx.rows(); ++r)
      for (std::size_t c = 0; c < vx.cols(); ++c)
        out.data[r * vx.cols() + c] += vb.data[c];
    return push(OpKind::AddBias, std::move(out), {x, b}, needs(x) || needs(b),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  t.accumulate(t.nodes_[i].parents[0], g);
                  Tensor gb = Tensor::zeros({g.cols()});
                  for (std::size_t r = 0; r < g.rows(); ++r)
                    for (std::size_t c = 0; c < g.cols(); ++c)
                      gb.data[c] += g(r, c);
                  t.accumulate(t.nodes_[i].parents[1], gb);
                });
  }

  // (n x k) * (k x m) -> (n x m)
  VarId matmul(VarId a, VarId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.rows())
      throw ShapeError("matmul", va.shape_str() + " * " + vb.shape_str());
    Tensor out = mm(va, vb);
    return push(OpKind::Matmul, std::move(out), {a, b}, needs(a) || needs(b),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  const Tensor& va2 = t.value(t.nodes_[i].parents[0]);
                  const Tensor& vb2 = t.value(t.nodes_[i].parents[1]);
                  if (t.needs(t.nodes_[i].parents[0]))
                    t.accumulate(t.nodes_[i].parents[0], mm_bt(g, vb2));
                  if (t.needs(t.nodes_[i].parents[1]))
                    t.accumulate(t.nodes_[i].parents[1], mm_at(va2, g));
                });
  }

  // (n x k) * (m x k)^T -> (n x m)
  VarId matmul_bt(VarId a, VarId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.cols())
      throw ShapeError("matmul_bt", va.shape_str() + " * " + vb.shape_str() + "^T");
    Tensor out = mm_bt(va, vb);
    return push(OpKind::MatmulBT, std::move(out), {a, b}, needs(a) || needs(b),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  const Tensor& va2 = t.value(t.nodes_[i].parents[0]);
                  const Tensor& vb2 = t.value(t.nodes_[i].parents[1]);
                  if (t.needs(t.nodes_[i].parents[0]))
                    t.accumulate(t.nodes_[i].parents[0], mm(g, vb2));
                  if (t.needs(t.nodes_[i].parents[1]))
                    t.accumulate(t.nodes_[i].parents[1], mm_at(g, va2));
                });
  }

  static constexpr double kLayernormEps = 1e-5;

  // Row-wise layernorm with affine params gamma (m), beta (m).
  VarId layernorm(VarId x, VarId gamma, VarId beta) {
    const Tensor& vx = value(x);
    const Tensor& vg = value(gamma);
    const Tensor& vb = value(beta);
    if (vx.ndim() != 2 || vg.ndim() != 1 || vb.ndim() != 1 ||
        vg.shape[0] != vx.cols() || vb.shape[0] != vx.cols())
      throw ShapeError("layernorm", vx.shape_str() + ", gamma " + vg.shape_str() +
                                        ", beta " + vb.shape_str());
    const std::size_t n = vx.rows(), m = vx.cols();
    Tensor out = Tensor::zeros({n, m});
    Tensor xhat = Tensor::zeros({n, m});
    std::vector<double> inv_sigma(n);
    for (std::size_t r = 0; r < n; ++r) {
      double mu = 0.0;
      for (std::size_t c = 0; c < m; ++c) mu += vx(r, c);
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        const double d = vx(r, c) - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + kLayernormEps);
      inv_sigma[r] = is;
      for (std::size_t c = 0; c < m; ++c) {
        const double xh = (vx(r, c) - mu) * is;
        xhat(r, c) = xh;
        out(r, c) = vg.data[c] * xh + vb.data[c];
      }
    }
    auto pull = [xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](
                    Tape& t, std::size_t i) {
      const Tensor& g = t.nodes_[i].grad;
      const std::size_t n2 = g.rows(), m2 = g.cols();
      const Tensor& vg2 = t.value(t.nodes_[i].parents[1]);
      Tensor gx = Tensor::zeros({n2, m2});
      Tensor gg = Tensor::zeros({m2});
      Tensor gb = Tensor::zeros({m2});
      for (std::size_t r = 0; r < n2; ++r) {
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < m2; ++c) {
          const double dxhat = g(r, c) * vg2.data[c];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat(r, c);
          gg.data[c] += g(r, c) * xhat(r, c);
          gb.data[c] += g(r, c);
        }
        const double inv_m = 1.0 / static_cast<double>(m2);
        for (std::size_t c = 0; c < m2; ++c) {
          const double dxhat = g(r, c) * vg2.data[c];
          gx(r, c) = inv_sigma[r] *
                     (dxhat - inv_m * sum_dxhat - xhat(r, c) * inv_m * sum_dxhat_xhat);
        }
      }
      t.accumulate(t.nodes_[i].parents[0], gx);
      t.accumulate(t.nodes_[i].parents[1], gg);
      t.accumulate(t.nodes_[i].parents[2], gb);
    };
    return push(OpKind::LayerNorm, std::move(out), {x, gamma, beta},
                needs(x) || needs(gamma) || needs(beta), std::move(pull));
  }

  // tanh-approximation GELU with fixed constants.
  VarId gelu(VarId x) {
    static constexpr double kSqrt2OverPi = 0.7978845608028654;
    static constexpr double kCubic = 0.044715;
    Tensor out = value(x);
    for (double& v : out.data) {
      const double u = kSqrt2OverPi * (v + kCubic * v * v * v);
      v = 0.5 * v * (1.0 + std::tanh(u));
    }
    return push(OpKind::Gelu, std::move(out), {x}, needs(x),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  const Tensor& vx = t.value(t.nodes_[i].parents[0]);
                  Tensor gx = g;
                  for (std::size_t k = 0; k < gx.size(); ++k) {
                    const double v = vx.data[k];
                    const double u = kSqrt2OverPi * (v + kCubic * v * v * v);
                    const double th = std::tanh(u);
                    const double sech2 = 1.0 - th * th;
                    const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * v * v);
                    gx.data[k] *= 0.5 * (1.0 + th) + 0.5 * v * sech2 * du;
                  }
                  t.accumulate(t.nodes_[i].parents[0], gx);
                });
  }

  // Softmax over the last axis of a 1-D or 2-D tensor.
  VarId softmax(VarId x) {
    const Tensor& vx = value(x);
    if (!vx.all_finite()) throw DomainError("softmax: non-finite input");
    Tensor out = vx;
    const std::size_t m = vx.shape.back();
    const std::size_t n = vx.size() / m;
    for (std::size_t r = 0; r < n; ++r) {
      double* row = out.data.data() + r * m;
      double mx = row[0];
      for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, row[c]);
      double z = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        row[c] = std::exp(row[c] - mx);
        z += row[c];
      }
      for (std::size_t c = 0; c < m; ++c) row[c] /= z;
    }
    return push(OpKind::Softmax, std::move(out), {x}, needs(x),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  const Tensor& s = t.nodes_[i].value;
                  const std::size_t m2 = s.shape.back();
                  const std::size_t n2 = s.size() / m2;
                  Tensor gx = g;
                  for (std::size_t r = 0; r < n2; ++r) {
                    const double* srow = s.data.data() + r * m2;
                    double* grow = gx.data.data() + r * m2;
                    double inner = 0.0;
                    for (std::size_t c = 0; c < m2; ++c) inner += grow[c] * srow[c];
                    for (std::size_t c = 0; c < m2; ++c)
                      grow[c] = srow[c] * (grow[c] - inner);
                  }
                  t.accumulate(t.nodes_[i].parents[0], gx);
                });
  }

  // Row gather: out[t] = table[ids[t]]. ids are held as aux data.
  VarId embedding(VarId table, std::vector<int> ids) {
    const Tensor& vt = value(table);
    if (vt.ndim() != 2) throw ShapeError("embedding", "table " + vt.shape_str());
    const std::size_t m = vt.cols();
    Tensor out = Tensor::zeros({ids.size(), m});
    for (std::size_t t = 0; t < ids.size(); ++t) {
      if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= vt.rows())
        throw InputError("embedding: id " + std::to_string(ids[t]) +
                         " out of range [0," + std::to_string(vt.rows()) + ")");
      for (std::size_t c = 0; c < m; ++c) out(t, c) = vt(ids[t], c);
    }
    auto pull = [ids = std::move(ids)](Tape& t, std::size_t i) {
      const Tensor& g = t.nodes_[i].grad;
      const Tensor& vt2 = t.value(t.nodes_[i].parents[0]);
      Tensor gt = Tensor::zeros(vt2.shape);
      for (std::size_t r = 0; r < ids.size(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c)
          gt(static_cast<std::size_t>(ids[r]), c) += g(r, c);
      t.accumulate(t.nodes_[i].parents[0], gt);
    };
    return push(OpKind::Embedding, std::move(out), {table}, needs(table),
                std::move(pull));
  }

  VarId slice_rows(VarId x, std::size_t start, std::size_t len) {
    const Tensor& vx = value(x);
    if (vx.ndim() != 2 || start + len > vx.rows())
      throw ShapeError("slice_rows", vx.shape_str() + " rows [" +
                                         std::to_string(start) + "," +
                                         std::to_string(start + len) + ")");
    const std::size_t m = vx.cols();
    Tensor out = Tensor::zeros({len, m});
    std::copy(vx.data.begin() + start * m, vx.data.begin() + (start + len) * m,
              out.data.begin());
    auto pull = [start, len](Tape& t, std::size_t i) {
      const Tensor& g = t.nodes_[i].grad;
      const Tensor& vx2 = t.value(t.nodes_[i].parents[0]);
      Tensor gx = Tensor::zeros(vx2.shape);
      const std::size_t m2 = vx2.cols();
      for (std::size_t r = 0; r < len; ++r)
        for (std::size_t c = 0; c < m2; ++c) gx(start + r, c) += g(r, c);
      t.accumulate(t.nodes_[i].parents[0], gx);
    };
    return push(OpKind::SliceRows, std::move(out), {x}, needs(x), std::move(pull));
  }

  VarId concat_rows(VarId a, VarId b) {
    const Tensor& va = value(a);
    const Tensor& vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.cols())
      throw ShapeError("concat_rows", va.shape_str() + " ++ " + vb.shape_str());
    Tensor out = Tensor::zeros({va.rows() + vb.rows(), va.cols()});
    std::copy(va.data.begin(), va.data.end(), out.data.begin());
    std::copy(vb.data.begin(), vb.data.end(), out.data.begin() + va.size());
    return push(OpKind::ConcatRows, std::move(out), {a, b}, needs(a) || needs(b),
                [](Tape& t, std::size_t i) {
                  const Tensor& g = t.nodes_[i].grad;
                  const Tensor& va2 = t.value(t.nodes_[i].parents[0]);
                  const Tensor& vb2 = t.value(t.nodes_[i].parents[1]);
                  Tensor ga = Tensor::zeros(va2.shape);
                  Tensor gb = Tensor::zeros(vb2.shape);
                  std::copy(g.data.begin(), g.data.begin() + va2.size(),
                            ga.data.begin());
                  std::copy(g.data.begin() + va2.size(), g.data.end(),
                            gb.data.begin());
                  t.accumulate(t.nodes_[i].parents[0], ga);
                  t.accumulate(t.nodes_[i].parents[1], gb);
                });
  }

  // Single element of a 2-D tensor, as a scalar node.
  VarId pick(VarId x, std::size_t row, std::size_t col) {
    const Tensor& vx = value(x);
    if (vx.ndim() != 2 || row >= vx.rows() || col >= vx.cols())
      throw ShapeError("pick", vx.shape_str() + " at (" + std::to_string(row) +
                                   "," + std::to_string(col) + ")");
    Tensor out = Tensor::scalar(vx(row, col));
    auto pull = [row, col](Tape& t, std::size_t i) {
      const double g = t.nodes_[i].grad.data[0];
      const Tensor& vx2 = t.value(t.nodes_[i].parents[0]);
      Tensor gx = Tensor::zeros(vx2.shape);
      gx(row, col) = g;
      t.accumulate(t.nodes_[i].parents[0], gx);
    };
    return push(OpKind::Pick, std::move(out), {x}, needs(x), std::move(pull));
  }

  VarId sum_all(VarId x) {
    const Tensor& vx = value(x);
    double s = 0.0;
    for (double v : vx.data) s += v;
    return push(OpKind::SumAll, Tensor::scalar(s), {x}, needs(x),
                [](Tape& t, std::size_t i) {
                  const double g = t.nodes_[i].grad.data[0];
                  const Tensor& vx2 = t.value(t.nodes_[i].parents[0]);
                  t.accumulate(t.nodes_[i].parents[0],
                               Tensor::full(vx2.shape, g));
                });
  }

  // Mean negative log-likelihood of targets under row-wise softmax(logits).
  VarId cross_entropy(VarId logits, std::vector<int> targets) {
    const Tensor& vz = value(logits);
    if (vz.ndim() != 2 || vz.rows() != targets.size())
      throw ShapeError("cross_entropy", vz.shape_str() + " with " +
                                            std::to_string(targets.size()) +
                                            " targets");
    const std::size_t n = vz.rows(), m = vz.cols();
    Tensor probs = Tensor::zeros({n, m});
    double loss = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= m)
        throw InputError("cross_entropy: target " + std::to_string(targets[r]) +
                         " out of range");
      double mx = vz(r, 0);
      for (std::size_t c = 1; c < m; ++c) mx = std::max(mx, vz(r, c));
      double z = 0.0;
      for (std::size_t c = 0; c < m; ++c) {
        probs(r, c) = std::exp(vz(r, c) - mx);
        z += probs(r, c);
      }
      for (std::size_t c = 0; c < m; ++c) probs(r, c) /= z;
      loss -= std::log(probs(r, static_cast<std::size_t>(targets[r])));
    }
    loss /= static_cast<double>(n);
    auto pull = [probs = std::move(probs), targets = std::move(targets)](
                    Tape& t, std::size_t i) {
      const double g = t.nodes_[i].grad.data[0];
      const std::size_t n2 = probs.rows(), m2 = probs.cols();
      Tensor gz = probs;
      for (std::size_t r = 0; r < n2; ++r)
        gz(r, static_cast<std::size_t>(targets[r])) -= 1.0;
      const double s = g / static_cast<double>(n2);
      for (double& v : gz.data) v *= s;
      t.accumulate(t.nodes_[i].parents[0], gz);
    };
    return push(OpKind::CrossEntropy, Tensor::scalar(loss), {logits},
                needs(logits), std::move(pull));
  }

  // KL(p || q) = sum_i p_i (log p_i - log q_i) over the last axis, summed
  // across rows. p is detached: gradient flows only into q. Terms with
  // p_i == 0 contribute zero.
  VarId kl_divergence(VarId p, VarId q) {
    check_same("kl_divergence", p, q);
    const Tensor& vp = value(p);
    const Tensor& vq = value(q);
    double kl = 0.0;
    for (std::size_t i = 0; i < vp.size(); ++i) {
      if (vp.data[i] < 0.0)
        throw DomainError("kl_divergence: negative probability p=" +
                          std::to_string(vp.data[i]));
      if (vp.data[i] == 0.0) continue;
      if (vq.data[i] <= 0.0)
        throw DomainError("kl_divergence: log of nonpositive probability q=" +
                          std::to_string(vq.data[i]));
      kl += vp.data[i] * (std::log(vp.data[i]) - std::log(vq.data[i]));
    }
    return push(OpKind::KlDivergence, Tensor::scalar(kl), {p, q}, needs(q),
                [](Tape& t, std::size_t i) {
                  const double g = t.nodes_[i].grad.data[0];
                  const Tensor& vp2 = t.value(t.nodes_[i].parents[0]);
                  const Tensor& vq2 = t.value(t.nodes_[i].parents[1]);
                  Tensor gq = Tensor::zeros(vq2.shape);
                  for (std::size_t k = 0; k < gq.size(); ++k)
                    if (vp2.data[k] != 0.0)
                      gq.data[k] = -g * vp2.data[k] / vq2.data[k];
                  t.accumulate(t.nodes_[i].parents[1], gq);
                });
  }

  // ---- inspection ----

  const Tensor& value(VarId id) const { return nodes_.at(id).value; }
  OpKind kind(VarId id) const { return nodes_.at(id).kind; }
  const std::vector<VarId>& parents(VarId id) const { return nodes_.at(id).parents; }
  std::size_t size() const { return nodes_.size(); }
  bool needs(VarId id) const { return nodes_.at(id).requires_grad; }

  // Marks a node as a gradient accumulation point even if no grad-requiring
  // leaf feeds it; consumers recorded afterwards inherit the flag.
  void force_requires_grad(VarId id) { nodes_.at(id).requires_grad = true; }

  // ---- backward ----

  // Accumulates d(seed . output)/dx into every node with requires_grad set.
  // With no explicit seed the output must be scalar (seed 1).
  void backward(VarId output, const Tensor* seed = nullptr) {
    if (consumed_) throw UsageError("tape already consumed by backward");
    consumed_ = true;
    Node& out = nodes_.at(output);
    if (seed) {
      if (seed->shape != out.value.shape)
        throw ShapeError("backward", "seed " + seed->shape_str() +
                                         " vs output " + out.value.shape_str());
      accumulate(output, *seed);
    } else {
      if (out.value.size() != 1)
        throw UsageError("backward: output is not scalar and no seed given");
      accumulate(output, Tensor::scalar(1.0));
    }
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.pull || n.grad.data.empty() || !n.requires_grad) continue;
      n.pull(*this, i);
    }
  }

  // Gradient of a node after backward; zeros if nothing reached it.
  Tensor grad(VarId id) const {
    const Node& n = nodes_.at(id);
    if (n.grad.data.empty()) return Tensor::zeros(n.value.shape);
    return n.grad;
  }

  bool grad_touched(VarId id) const { return !nodes_.at(id).grad.data.empty(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // empty until touched by backward
    OpKind kind = OpKind::Leaf;
    bool requires_grad = false;
    std::vector<VarId> parents;
    std::function<void(Tape&, std::size_t)> pull;
  };

  std::vector<Node> nodes_;
  bool consumed_ = false;

  VarId push(OpKind kind, Tensor value, std::vector<VarId> parents,
             bool requires_grad, std::function<void(Tape&, std::size_t)> pull) {
    Node n;
    n.value = std::move(value);
    n.kind = kind;
    n.requires_grad = requires_grad;
    n.parents = std::move(parents);
    n.pull = std::move(pull);
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  void check_same(const char* op, VarId a, VarId b) const {
    if (!value(a).same_shape(value(b)))
      throw ShapeError(op, value(a).shape_str() + " vs " + value(b).shape_str());
  }

  void accumulate(VarId id, const Tensor& g) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += g.data[i];
  }

  void accumulate_scaled(VarId id, const Tensor& g, double c) {
    Node& n = nodes_.at(id);
    if (!n.requires_grad) return;
    if (n.grad.data.empty()) n.grad = Tensor::zeros(n.value.shape);
    for (std::size_t i = 0; i < g.size(); ++i) n.grad.data[i] += c * g.data[i];
  }

  // Raw matrix kernels shared by forward and backward.
  static Tensor mm(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i) {
      const double* arow = a.data.data() + i * k;
      double* orow = out.data.data() + i * m;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = arow[p];
        const double* brow = b.data.data() + p * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
      }
    }
    return out;
  }

  // a * b^T, with b stored (m x k)
  static Tensor mm_bt(const Tensor& a, const Tensor& b) {
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t i = 0; i < n; ++i) {
      const double* arow = a.data.data() + i * k;
      double* orow = out.data.data() + i * m;
      for (std::size_t j = 0; j < m; ++j) {
        const double* brow = b.data.data() + j * k;
        double s = 0.0;
        for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        orow[j] = s;
      }
    }
    return out;
  }

  // a^T * b, with a stored (k x n)
  static Tensor mm_at(const Tensor& a, const Tensor& b) {
    const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
    Tensor out = Tensor::zeros({n, m});
    for (std::size_t p = 0; p < k; ++p) {
      const double* arow = a.data.data() + p * n;
      const double* brow = b.data.data() + p * m;
      for (std::size_t i = 0; i < n; ++i) {
        const double av = arow[i];
        double* orow = out.data.data() + i * m;
        for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
      }
    }
    return out;
  }
};

// Max relative error between the tape gradient of f at x and central finite
// differences with the given step. f builds a scalar output on the tape.
template <typename F>
double grad_check(F&& f, const Tensor& x, double step) {
  Tape tape;
  VarId xv = tape.leaf(x, true);
  VarId out = f(tape, xv);
  if (tape.value(out).size() != 1)
    throw UsageError("grad_check: f must produce a scalar");
  tape.backward(out);
  Tensor analytic = tape.grad(xv);

  auto eval = [&](const Tensor& xt) {
    Tape t;
    VarId v = t.leaf(xt, false);
    VarId o = f(t, v);
    return t.value(o).data[0];
  };

  double worst = 0.0;
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp.data[i];
    xp.data[i] = orig + step;
    const double fp = eval(xp);
    xp.data[i] = orig - step;
    const double fm = eval(xp);
    xp.data[i] = orig;
    const double numeric = (fp - fm) / (2.0 * step);
    const double a = analytic.data[i];
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace ct
