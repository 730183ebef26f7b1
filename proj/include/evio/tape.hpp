#pragma once

#include <Eigen/Dense>
#include <functional>
#include <unordered_map>

#include "evio/tensor.hpp"

namespace evio {

using Var = int;

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

// Reverse-mode tape. Nodes are created in topological order by construction;
// backward() walks them once in reverse. Parameters are memoized per tape so a
// tensor reused by several ops accumulates a single gradient buffer.
class Tape {
 public:
  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  Var leaf(Tensor value, bool needs_grad = false) {
    nodes_.push_back(Node{std::move(value), Tensor(), nullptr, needs_grad && grad_enabled_});
    return Var(nodes_.size()) - 1;
  }

  // Leaf for a persistent parameter tensor; one node per tensor per tape.
  Var param(const Tensor& t) {
    auto it = param_cache_.find(&t);
    if (it != param_cache_.end()) return it->second;
    Var v = leaf(t, true);
    param_cache_.emplace(&t, v);
    return v;
  }

  const Tensor& value(Var v) const { return nodes_[std::size_t(v)].value; }
  Tensor& value(Var v) { return nodes_[std::size_t(v)].value; }

  // Gradient of a node after backward(); zero tensor if the node was unused.
  Tensor grad_of(Var v) const {
    const Node& n = nodes_[std::size_t(v)];
    if (n.grad.size() == n.value.size()) return n.grad;
    return Tensor::zeros(n.value.shape());
  }
  bool has_param(const Tensor& t) const { return param_cache_.count(&t) > 0; }
  Tensor param_grad(const Tensor& t) const {
    auto it = param_cache_.find(&t);
    if (it == param_cache_.end()) return Tensor::zeros(t.shape());
    return grad_of(it->second);
  }

  void backward(Var root) {
    require(value(root).size() == 1, "backward root must be scalar");
    Tensor seed = Tensor::scalar(1.0);
    backward_with(root, seed);
  }

  void backward_with(Var root, const Tensor& seed) {
    require(grad_enabled_, "backward on a no-grad tape");
    require(seed.size() == value(root).size(), "seed shape mismatch");
    grad(root) = seed;
    for (int i = root; i >= 0; --i) {
      Node& n = nodes_[std::size_t(i)];
      if (n.backward && n.grad.size() == n.value.size()) n.backward(*this);
    }
  }

  // ---- elementwise / structural ops ----

  Var add(Var a, Var b) {
    require(value(a).same_shape(value(b)), "add: shape mismatch");
    Tensor out = value(a);
    const Tensor& tb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += tb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, Var) {
      t.accumulate(a, g);
      t.accumulate(b, g);
    });
  }

  Var sub(Var a, Var b) {
    require(value(a).same_shape(value(b)), "sub: shape mismatch");
    Tensor out = value(a);
    const Tensor& tb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= tb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, Var) {
      t.accumulate(a, g);
      Tensor gn = g;
      for (auto& x : gn.vec()) x = -x;
      t.accumulate(b, gn);
    });
  }

  Var mul(Var a, Var b) {
    require(value(a).same_shape(value(b)), "mul: shape mismatch");
    Tensor out = value(a);
    const Tensor& tb = value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= tb[i];
    return make(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g, Var) {
      Tensor ga = g, gb = g;
      const Tensor &ta = t.value(a), &tb2 = t.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga[i] *= tb2[i];
        gb[i] *= ta[i];
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (auto& x : out.vec()) x *= c;
    return make(std::move(out), {a}, [a, c](Tape& t, const Tensor& g, Var) {
      Tensor ga = g;
      for (auto& x : ga.vec()) x *= c;
      t.accumulate(a, ga);
    });
  }

  Var add_const(Var a, double c) {
    Tensor out = value(a);
    for (auto& x : out.vec()) x += c;
    return make(std::move(out), {a},
                [a](Tape& t, const Tensor& g, Var) { t.accumulate(a, g); });
  }

  Var exp(Var a) {
    Tensor out = value(a);
    for (auto& x : out.vec()) x = std::exp(x);
    return make(std::move(out), {a}, [a](Tape& t, const Tensor& g, Var self) {
      Tensor ga = g;
      const Tensor& y = t.value(self);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= y[i];
      t.accumulate(a, ga);
    });
  }

  Var relu(Var a) {
    Tensor out = value(a);
    for (auto& x : out.vec()) x = x > 0.0 ? x : 0.0;
    return make(std::move(out), {a}, [a](Tape& t, const Tensor& g, Var) {
      Tensor ga = g;
      const Tensor& x = t.value(a);
      for (std::size_t i = 0; i < ga.size(); ++i)
        if (x[i] <= 0.0) ga[i] = 0.0;
      t.accumulate(a, ga);
    });
  }

  Var reshape(Var a, std::vector<int> shape) {
    Tensor out = value(a).reshaped(shape);
    std::vector<int> in_shape = value(a).shape();
    return make(std::move(out), {a}, [a, in_shape](Tape& t, const Tensor& g, Var) {
      t.accumulate(a, g.reshaped(in_shape));
    });
  }

  Var transpose2d(Var a) {
    const Tensor& x = value(a);
    require(x.rank() == 2, "transpose2d: rank-2 required");
    const int r = x.dim(0), c = x.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j) out.at(j, i) = x.at(i, j);
    return make(std::move(out), {a}, [a, r, c](Tape& t, const Tensor& g, Var) {
      Tensor ga({r, c});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga.at(i, j) = g.at(j, i);
      t.accumulate(a, ga);
    });
  }

  Var slice_cols(Var a, int c0, int c1) {
    const Tensor& x = value(a);
    require(x.rank() == 2 && c0 >= 0 && c1 <= x.dim(1) && c0 < c1, "slice_cols: bad range");
    const int r = x.dim(0), c = x.dim(1), w = c1 - c0;
    Tensor out({r, w});
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < w; ++j) out.at(i, j) = x.at(i, c0 + j);
    return make(std::move(out), {a}, [a, r, c, c0, w](Tape& t, const Tensor& g, Var) {
      Tensor ga({r, c});
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) ga.at(i, c0 + j) = g.at(i, j);
      t.accumulate(a, ga);
    });
  }

  Var concat_rows(Var a, Var b) {
    const Tensor &x = value(a), &y = value(b);
    require(x.rank() == 2 && y.rank() == 2 && x.dim(1) == y.dim(1), "concat_rows: shape mismatch");
    const int ra = x.dim(0), rb = y.dim(0), c = x.dim(1);
    Tensor out({ra + rb, c});
    std::copy(x.vec().begin(), x.vec().end(), out.vec().begin());
    std::copy(y.vec().begin(), y.vec().end(), out.vec().begin() + ra * c);
    return make(std::move(out), {a, b}, [a, b, ra, rb, c](Tape& t, const Tensor& g, Var) {
      Tensor ga({ra, c}), gb({rb, c});
      std::copy(g.vec().begin(), g.vec().begin() + ra * c, ga.vec().begin());
      std::copy(g.vec().begin() + ra * c, g.vec().end(), gb.vec().begin());
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  // Broadcast a scalar node to a full shape; backward sums the incoming grads.
  Var broadcast_scalar(Var a, std::vector<int> shape) {
    require(value(a).size() == 1, "broadcast_scalar: source must be scalar");
    Tensor out = Tensor::full(shape, value(a)[0]);
    return make(std::move(out), {a}, [a](Tape& t, const Tensor& g, Var) {
      double s = 0.0;
      for (double v : g.vec()) s += v;
      t.accumulate(a, Tensor::scalar(s));
    });
  }

  // Log-domain Sinkhorn on a dustbin-extended score matrix (R+1)x(C+1) with
  // target marginals a = (1,...,1, C) over rows and b = (1,...,1, R) over
  // columns. Returns log P. Differentiable through all iterations; the
  // backward pass recomputes the per-iteration softmax weights from the saved
  // scaling vectors instead of storing per-iteration matrices.
  Var sinkhorn_dustbin_log(Var scores, int iters, double temperature) {
    const Tensor& s = value(scores);
    require(s.rank() == 2 && s.dim(0) >= 2 && s.dim(1) >= 2, "sinkhorn: extended matrix required");
    require(iters >= 1, "sinkhorn: iters must be >= 1");
    require(temperature > 0.0, "sinkhorn: temperature must be positive");
    for (double v : s.vec()) require(std::isfinite(v), "sinkhorn: non-finite score");
    const int rows = s.dim(0), cols = s.dim(1);
    const int r = rows - 1, c = cols - 1;

    Tensor k({rows, cols});
    for (std::size_t i = 0; i < k.size(); ++i) k[i] = s[i] / temperature;
    auto log_a = std::make_shared<std::vector<double>>(std::size_t(rows), 0.0);
    auto log_b = std::make_shared<std::vector<double>>(std::size_t(cols), 0.0);
    (*log_a)[std::size_t(r)] = std::log(double(c));
    (*log_b)[std::size_t(c)] = std::log(double(r));

    auto us = std::make_shared<std::vector<std::vector<double>>>();
    auto vs = std::make_shared<std::vector<std::vector<double>>>();
    std::vector<double> u(std::size_t(rows), 0.0), v(std::size_t(cols), 0.0);
    auto lse_row = [&](const Tensor& m, int i, const std::vector<double>& add) {
      double hi = -1e300;
      for (int j = 0; j < cols; ++j) hi = std::max(hi, m.at(i, j) + add[std::size_t(j)]);
      double acc = 0.0;
      for (int j = 0; j < cols; ++j) acc += std::exp(m.at(i, j) + add[std::size_t(j)] - hi);
      return hi + std::log(acc);
    };
    auto lse_col = [&](const Tensor& m, int j, const std::vector<double>& add) {
      double hi = -1e300;
      for (int i = 0; i < rows; ++i) hi = std::max(hi, m.at(i, j) + add[std::size_t(i)]);
      double acc = 0.0;
      for (int i = 0; i < rows; ++i) acc += std::exp(m.at(i, j) + add[std::size_t(i)] - hi);
      return hi + std::log(acc);
    };
    for (int it = 0; it < iters; ++it) {
      for (int i = 0; i < rows; ++i) u[std::size_t(i)] = (*log_a)[std::size_t(i)] - lse_row(k, i, v);
      us->push_back(u);
      for (int j = 0; j < cols; ++j) v[std::size_t(j)] = (*log_b)[std::size_t(j)] - lse_col(k, j, u);
      vs->push_back(v);
    }
    Tensor log_p({rows, cols});
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < cols; ++j)
        log_p.at(i, j) = k.at(i, j) + u[std::size_t(i)] + v[std::size_t(j)];

    auto kcopy = std::make_shared<Tensor>(std::move(k));
    return make(std::move(log_p), {scores},
                [scores, kcopy, us, vs, log_a, log_b, rows, cols, iters, temperature](
                    Tape& t, const Tensor& g, Var) {
      Tensor gk = g;  // direct K term of logP
      std::vector<double> gu(std::size_t(rows), 0.0), gv(std::size_t(cols), 0.0);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) {
          gu[std::size_t(i)] += g.at(i, j);
          gv[std::size_t(j)] += g.at(i, j);
        }
      const Tensor& k2 = *kcopy;
      for (int it = iters - 1; it >= 0; --it) {
        const auto& ut = (*us)[std::size_t(it)];
        const auto& vt = (*vs)[std::size_t(it)];
        // v^t = log_b - LSE_i(K + u^t): B_ij = exp(K_ij + u^t_i + v^t_j - log_b_j)
        std::vector<double> gu_add(std::size_t(rows), 0.0);
        for (int j = 0; j < cols; ++j) {
          const double gvj = gv[std::size_t(j)];
          if (gvj == 0.0) continue;
          for (int i = 0; i < rows; ++i) {
            const double b = std::exp(k2.at(i, j) + ut[std::size_t(i)] + vt[std::size_t(j)] -
                                      (*log_b)[std::size_t(j)]);
            gk.at(i, j) -= gvj * b;
            gu_add[std::size_t(i)] -= gvj * b;
          }
        }
        for (int i = 0; i < rows; ++i) gu[std::size_t(i)] += gu_add[std::size_t(i)];
        // u^t = log_a - LSE_j(K + v^{t-1}): A_ij = exp(K_ij + v^{t-1}_j + u^t_i - log_a_i)
        const std::vector<double> vprev =
            it > 0 ? (*vs)[std::size_t(it - 1)] : std::vector<double>(std::size_t(cols), 0.0);
        std::fill(gv.begin(), gv.end(), 0.0);
        for (int i = 0; i < rows; ++i) {
          const double gui = gu[std::size_t(i)];
          if (gui == 0.0) continue;
          for (int j = 0; j < cols; ++j) {
            const double a = std::exp(k2.at(i, j) + vprev[std::size_t(j)] + ut[std::size_t(i)] -
                                      (*log_a)[std::size_t(i)]);
            gk.at(i, j) -= gui * a;
            gv[std::size_t(j)] -= gui * a;
          }
        }
        std::fill(gu.begin(), gu.end(), 0.0);
      }
      for (auto& x : gk.vec()) x /= temperature;
      t.accumulate(scores, gk);
    });
  }

  Var concat_cols(Var a, Var b) {
    const Tensor &x = value(a), &y = value(b);
    require(x.rank() == 2 && y.rank() == 2 && x.dim(0) == y.dim(0), "concat_cols: shape mismatch");
    const int r = x.dim(0), ca = x.dim(1), cb = y.dim(1);
    Tensor out({r, ca + cb});
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < ca; ++j) out.at(i, j) = x.at(i, j);
      for (int j = 0; j < cb; ++j) out.at(i, ca + j) = y.at(i, j);
    }
    return make(std::move(out), {a, b}, [a, b, r, ca, cb](Tape& t, const Tensor& g, Var) {
      Tensor ga({r, ca}), gb({r, cb});
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < ca; ++j) ga.at(i, j) = g.at(i, j);
        for (int j = 0; j < cb; ++j) gb.at(i, j) = g.at(i, ca + j);
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  Var reduce_sum(Var a) {
    double s = 0.0;
    for (double x : value(a).vec()) s += x;
    return make(Tensor::scalar(s), {a}, [a](Tape& t, const Tensor& g, Var) {
      Tensor ga(t.value(a).shape());
      ga.fill(g[0]);
      t.accumulate(a, ga);
    });
  }

  Var reduce_mean(Var a) {
    const double n = double(value(a).size());
    return scale(reduce_sum(a), 1.0 / n);
  }

  // ---- linear algebra ----

  // c = op(a) * op(b) on rank-2 tensors.
  Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
    const Tensor &x = value(a), &y = value(b);
    require(x.rank() == 2 && y.rank() == 2, "matmul: rank-2 required");
    const int ar = x.dim(0), ac = x.dim(1), br = y.dim(0), bc = y.dim(1);
    const int m = trans_a ? ac : ar, k = trans_a ? ar : ac;
    const int k2 = trans_b ? bc : br, n = trans_b ? br : bc;
    require(k == k2, "matmul: inner dim mismatch");
    Tensor out({m, n});
    CMapM A(x.data(), ar, ac), B(y.data(), br, bc);
    MapM C(out.data(), m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
    return make(std::move(out), {a, b},
                [a, b, trans_a, trans_b, m, n](Tape& t, const Tensor& g, Var) {
      const Tensor &x2 = t.value(a), &y2 = t.value(b);
      CMapM A(x2.data(), x2.dim(0), x2.dim(1)), B(y2.data(), y2.dim(0), y2.dim(1));
      CMapM G(g.data(), m, n);
      Tensor ga({x2.dim(0), x2.dim(1)}), gb({y2.dim(0), y2.dim(1)});
      MapM GA(ga.data(), ga.dim(0), ga.dim(1)), GB(gb.data(), gb.dim(0), gb.dim(1));
      if (!trans_a && !trans_b) {
        GA.noalias() = G * B.transpose();
        GB.noalias() = A.transpose() * G;
      } else if (trans_a && !trans_b) {
        GA.noalias() = B * G.transpose();
        GB.noalias() = A * G;
      } else if (!trans_a && trans_b) {
        GA.noalias() = G * B;
        GB.noalias() = G.transpose() * A;
      } else {
        GA.noalias() = B.transpose() * G.transpose();
        GB.noalias() = G.transpose() * A.transpose();
      }
      t.accumulate(a, ga);
      t.accumulate(b, gb);
    });
  }

  // y = x * W^T + b, rows of x are items. W: [out, in], b: [out].
  Var linear(Var x, Var w, Var b) {
    {
      const Tensor &tx = value(x), &tw = value(w), &tb = value(b);
      require(tx.rank() == 2 && tw.rank() == 2 && tx.dim(1) == tw.dim(1), "linear: shape mismatch");
      require(tb.rank() == 1 && tb.dim(0) == tw.dim(0), "linear: bias mismatch");
    }
    Var y = matmul(x, w, false, true);  // node creation may reallocate the pool
    const Tensor& tb = value(b);
    const int n = value(y).dim(0), d = value(y).dim(1);
    Tensor out = value(y);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.at(i, j) += tb[std::size_t(j)];
    return make(std::move(out), {y, b}, [y, b, n, d](Tape& t, const Tensor& g, Var) {
      t.accumulate(y, g);
      Tensor gb({d});
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) gb[std::size_t(j)] += g.at(i, j);
      t.accumulate(b, gb);
    });
  }

  // ---- normalizations ----

  Var softmax_rows(Var a) {
    const Tensor& x = value(a);
    require(x.rank() == 2, "softmax_rows: rank-2 required");
    const int r = x.dim(0), c = x.dim(1);
    Tensor out({r, c});
    for (int i = 0; i < r; ++i) {
      double m = -1e300;
      for (int j = 0; j < c; ++j) m = std::max(m, x.at(i, j));
      double s = 0.0;
      for (int j = 0; j < c; ++j) s += std::exp(x.at(i, j) - m);
      for (int j = 0; j < c; ++j) out.at(i, j) = std::exp(x.at(i, j) - m) / s;
    }
    return make(std::move(out), {a}, [a, r, c](Tape& t, const Tensor& g, Var self) {
      const Tensor& y = t.value(self);
      Tensor ga({r, c});
      for (int i = 0; i < r; ++i) {
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
        for (int j = 0; j < c; ++j) ga.at(i, j) = (g.at(i, j) - dot) * y.at(i, j);
      }
      t.accumulate(a, ga);
    });
  }

  // Normalize each column of [D, N] to unit L2 norm.
  Var l2norm_cols(Var a, double eps = 1e-12) {
    const Tensor& x = value(a);
    require(x.rank() == 2, "l2norm_cols: rank-2 required");
    const int d = x.dim(0), n = x.dim(1);
    Tensor out({d, n});
    std::vector<double> inv(static_cast<std::size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
      double s = eps;
      for (int i = 0; i < d; ++i) s += x.at(i, j) * x.at(i, j);
      inv[std::size_t(j)] = 1.0 / std::sqrt(s);
      for (int i = 0; i < d; ++i) out.at(i, j) = x.at(i, j) * inv[std::size_t(j)];
    }
    return make(std::move(out), {a}, [a, d, n, inv](Tape& t, const Tensor& g, Var self) {
      const Tensor& y = t.value(self);
      Tensor ga({d, n});
      for (int j = 0; j < n; ++j) {
        double dot = 0.0;
        for (int i = 0; i < d; ++i) dot += g.at(i, j) * y.at(i, j);
        for (int i = 0; i < d; ++i)
          ga.at(i, j) = (g.at(i, j) - dot * y.at(i, j)) * inv[std::size_t(j)];
      }
      t.accumulate(a, ga);
    });
  }

  // ---- convolutional stack ----

  // x: [Cin, H, W]; w: [Cout, Cin, k, k]; b: [Cout]. Cross-correlation.
  Var conv2d(Var x, Var w, Var b, int stride = 1, int pad = -1) {
    const Tensor &tx = value(x), &tw = value(w), &tb = value(b);
    require(tx.rank() == 3 && tw.rank() == 4, "conv2d: bad ranks");
    const int cin = tx.dim(0), h = tx.dim(1), wd = tx.dim(2);
    const int cout = tw.dim(0), k = tw.dim(2);
    require(tw.dim(1) == cin && tw.dim(3) == k, "conv2d: kernel shape mismatch");
    require(k % 2 == 1, "conv2d: odd kernel required");
    require(tb.rank() == 1 && tb.dim(0) == cout, "conv2d: bias mismatch");
    if (pad < 0) pad = k / 2;
    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (wd + 2 * pad - k) / stride + 1;
    require(ho >= 1 && wo >= 1, "conv2d: empty output");

    Tensor col = im2col(tx, k, stride, pad, ho, wo);
    Tensor out({cout, ho, wo});
    CMapM W(tw.data(), cout, cin * k * k), Col(col.data(), cin * k * k, ho * wo);
    MapM O(out.data(), cout, ho * wo);
    O.noalias() = W * Col;
    for (int c = 0; c < cout; ++c)
      for (int i = 0; i < ho * wo; ++i) out.vec()[std::size_t(c) * ho * wo + i] += tb[std::size_t(c)];

    return make(std::move(out), {x, w, b},
                [x, w, b, k, stride, pad, ho, wo](Tape& t, const Tensor& g, Var) {
      const Tensor &tx2 = t.value(x), &tw2 = t.value(w);
      const int cin = tx2.dim(0), h = tx2.dim(1), wd = tx2.dim(2), cout = tw2.dim(0);
      Tensor col = im2col(tx2, k, stride, pad, ho, wo);
      CMapM G(g.data(), cout, ho * wo), W(tw2.data(), cout, cin * k * k),
          Col(col.data(), cin * k * k, ho * wo);
      Tensor gw({cout, cin, k, k});
      MapM GW(gw.data(), cout, cin * k * k);
      GW.noalias() = G * Col.transpose();
      Tensor gb({cout});
      for (int c = 0; c < cout; ++c) {
        double s = 0.0;
        for (int i = 0; i < ho * wo; ++i) s += g.vec()[std::size_t(c) * ho * wo + i];
        gb[std::size_t(c)] = s;
      }
      Tensor gcol({cin * k * k, ho * wo});
      MapM GCol(gcol.data(), cin * k * k, ho * wo);
      GCol.noalias() = W.transpose() * G;
      Tensor gx({cin, h, wd});
      col2im(gcol, gx, k, stride, pad, ho, wo);
      t.accumulate(x, gx);
      t.accumulate(w, gw);
      t.accumulate(b, gb);
    });
  }

  // 2x2 max pooling, stride 2. Odd trailing row/col is dropped.
  Var maxpool2x2(Var x) {
    const Tensor& tx = value(x);
    require(tx.rank() == 3, "maxpool2x2: rank-3 required");
    const int c = tx.dim(0), h = tx.dim(1), w = tx.dim(2);
    const int ho = h / 2, wo = w / 2;
    require(ho >= 1 && wo >= 1, "maxpool2x2: input too small");
    Tensor out({c, ho, wo});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(out.size());
    for (int cc = 0; cc < c; ++cc)
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double best = -1e300;
          std::uint32_t bi = 0;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj) {
              const std::size_t idx =
                  (std::size_t(cc) * h + (2 * i + di)) * w + (2 * j + dj);
              if (tx[idx] > best) {
                best = tx[idx];
                bi = std::uint32_t(idx);
              }
            }
          const std::size_t o = (std::size_t(cc) * ho + i) * wo + j;
          out[o] = best;
          (*argmax)[o] = bi;
        }
    return make(std::move(out), {x}, [x, argmax](Tape& t, const Tensor& g, Var) {
      Tensor gx(t.value(x).shape());
      for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
      t.accumulate(x, gx);
    });
  }

  // Spatial batch norm over H*W per channel. Running stats owned by the caller.
  Var batchnorm2d(Var x, Var gamma, Var beta, Tensor& run_mean, Tensor& run_var,
                  bool training, double momentum = 0.9, double eps = 1e-5) {
    const Tensor& tx = value(x);
    require(tx.rank() == 3, "batchnorm2d: rank-3 required");
    const int c = tx.dim(0), n = tx.dim(1) * tx.dim(2);
    require(value(gamma).size() == std::size_t(c) && value(beta).size() == std::size_t(c),
            "batchnorm2d: affine shape mismatch");
    Tensor out(tx.shape());
    auto xhat = std::make_shared<Tensor>(tx.shape());
    auto invstd = std::make_shared<std::vector<double>>(std::size_t(c));
    const Tensor &tg = value(gamma), &tbeta = value(beta);
    for (int cc = 0; cc < c; ++cc) {
      const double* xp = tx.data() + std::size_t(cc) * n;
      double mean, var;
      if (training) {
        double s = 0.0;
        for (int i = 0; i < n; ++i) s += xp[i];
        mean = s / n;
        double v = 0.0;
        for (int i = 0; i < n; ++i) v += (xp[i] - mean) * (xp[i] - mean);
        var = v / n;
        run_mean[std::size_t(cc)] = momentum * run_mean[std::size_t(cc)] + (1 - momentum) * mean;
        run_var[std::size_t(cc)] = momentum * run_var[std::size_t(cc)] + (1 - momentum) * var;
      } else {
        mean = run_mean[std::size_t(cc)];
        var = run_var[std::size_t(cc)];
      }
      const double is = 1.0 / std::sqrt(var + eps);
      (*invstd)[std::size_t(cc)] = is;
      double* hp = xhat->data() + std::size_t(cc) * n;
      double* op = out.data() + std::size_t(cc) * n;
      for (int i = 0; i < n; ++i) {
        hp[i] = (xp[i] - mean) * is;
        op[i] = tg[std::size_t(cc)] * hp[i] + tbeta[std::size_t(cc)];
      }
    }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat, invstd, c, n, training](Tape& t, const Tensor& g, Var) {
      Tensor gx(t.value(x).shape()), gg({c}), gb({c});
      const Tensor& tg = t.value(gamma);
      for (int cc = 0; cc < c; ++cc) {
        const double* gp = g.data() + std::size_t(cc) * n;
        const double* hp = xhat->data() + std::size_t(cc) * n;
        double sg = 0.0, sgh = 0.0;
        for (int i = 0; i < n; ++i) {
          sg += gp[i];
          sgh += gp[i] * hp[i];
        }
        gb[std::size_t(cc)] = sg;
        gg[std::size_t(cc)] = sgh;
        const double k = tg[std::size_t(cc)] * (*invstd)[std::size_t(cc)];
        double* xg = gx.data() + std::size_t(cc) * n;
        if (training) {
          for (int i = 0; i < n; ++i)
            xg[i] = k * (gp[i] - sg / n - hp[i] * sgh / n);
        } else {
          for (int i = 0; i < n; ++i) xg[i] = k * gp[i];
        }
      }
      t.accumulate(x, gx);
      t.accumulate(gamma, gg);
      t.accumulate(beta, gb);
    });
  }

  // ---- loss building blocks ----

  // logits: [C, P]; labels: one class per column. Mean over columns of
  // -log softmax(target).
  Var cross_entropy_cols(Var logits, const std::vector<int>& labels) {
    const Tensor& x = value(logits);
    require(x.rank() == 2 && int(labels.size()) == x.dim(1), "cross_entropy_cols: shape mismatch");
    const int c = x.dim(0), p = x.dim(1);
    auto probs = std::make_shared<Tensor>(std::vector<int>{c, p});
    double loss = 0.0;
    for (int j = 0; j < p; ++j) {
      require(labels[std::size_t(j)] >= 0 && labels[std::size_t(j)] < c,
              "cross_entropy_cols: label out of range");
      double m = -1e300;
      for (int i = 0; i < c; ++i) m = std::max(m, x.at(i, j));
      double s = 0.0;
      for (int i = 0; i < c; ++i) s += std::exp(x.at(i, j) - m);
      const double logz = m + std::log(s);
      for (int i = 0; i < c; ++i) probs->at(i, j) = std::exp(x.at(i, j) - logz);
      loss -= x.at(labels[std::size_t(j)], j) - logz;
    }
    loss /= p;
    return make(Tensor::scalar(loss), {logits},
                [logits, probs, labels, c, p](Tape& t, const Tensor& g, Var) {
      Tensor ga({c, p});
      const double s = g[0] / p;
      for (int j = 0; j < p; ++j) {
        for (int i = 0; i < c; ++i) ga.at(i, j) = s * probs->at(i, j);
        ga.at(labels[std::size_t(j)], j) -= s;
      }
      t.accumulate(logits, ga);
    });
  }

  // Elementwise hinge used by the descriptor loss. mask selects the positive
  // branch lambda_pos*max(0, mu_pos - s); negatives use max(0, s - mu_neg).
  Var hinge_masked(Var s, const Tensor& mask, double lambda_pos, double mu_pos, double mu_neg) {
    const Tensor& x = value(s);
    require(mask.same_shape(x), "hinge_masked: mask shape mismatch");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      out[i] = mask[i] > 0.5 ? lambda_pos * std::max(0.0, mu_pos - x[i])
                             : std::max(0.0, x[i] - mu_neg);
    }
    return make(std::move(out), {s},
                [s, &mask, lambda_pos, mu_pos, mu_neg](Tape& t, const Tensor& g, Var) {
      const Tensor& x = t.value(s);
      Tensor ga(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) {
        if (mask[i] > 0.5)
          ga[i] = x[i] < mu_pos ? -lambda_pos * g[i] : 0.0;
        else
          ga[i] = x[i] > mu_neg ? g[i] : 0.0;
      }
      t.accumulate(s, ga);
    });
  }

  // -sum over selected flat entries of max(value, clamp). Used for the match NLL.
  Var gather_neg_sum(Var a, const std::vector<std::size_t>& indices, double clamp) {
    const Tensor& x = value(a);
    double loss = 0.0;
    for (std::size_t idx : indices) {
      require(idx < x.size(), "gather_neg_sum: index out of range");
      loss -= std::max(x[idx], clamp);
    }
    return make(Tensor::scalar(loss), {a},
                [a, indices, clamp](Tape& t, const Tensor& g, Var) {
      Tensor ga(t.value(a).shape());
      const Tensor& x = t.value(a);
      for (std::size_t idx : indices)
        if (x[idx] > clamp) ga[idx] -= g[0];
      t.accumulate(a, ga);
    });
  }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&)> backward;
    bool needs_grad = false;
  };

  Tensor& grad(Var v) {
    Node& n = nodes_[std::size_t(v)];
    if (n.grad.size() != n.value.size()) n.grad = Tensor::zeros(n.value.shape());
    return n.grad;
  }

  void accumulate(Var v, const Tensor& g) {
    Node& n = nodes_[std::size_t(v)];
    if (!n.needs_grad) return;
    Tensor& gt = grad(v);
    for (std::size_t i = 0; i < gt.size(); ++i) gt[i] += g[i];
  }

  template <typename Fn>
  Var make(Tensor out, std::initializer_list<Var> parents, Fn&& fn) {
    bool needs = false;
    if (grad_enabled_)
      for (Var p : parents) needs = needs || nodes_[std::size_t(p)].needs_grad;
    Node node{std::move(out), Tensor(), nullptr, needs};
    Var self = Var(nodes_.size());
    if (needs) {
      node.backward = [self, fn = std::forward<Fn>(fn)](Tape& t) {
        fn(t, t.nodes_[std::size_t(self)].grad, self);
      };
    }
    nodes_.push_back(std::move(node));
    return self;
  }

  static Tensor im2col(const Tensor& x, int k, int stride, int pad, int ho, int wo) {
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor col({cin * k * k, ho * wo});
    for (int c = 0; c < cin; ++c)
      for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
          double* dst = col.data() + (std::size_t(c) * k * k + ki * k + kj) * ho * wo;
          for (int i = 0; i < ho; ++i) {
            const int si = i * stride + ki - pad;
            if (si < 0 || si >= h) {
              dst += wo;
              continue;
            }
            const double* src = x.data() + (std::size_t(c) * h + si) * w;
            for (int j = 0; j < wo; ++j, ++dst) {
              const int sj = j * stride + kj - pad;
              if (sj >= 0 && sj < w) *dst = src[sj];
            }
          }
        }
    return col;
  }

  static void col2im(const Tensor& col, Tensor& x, int k, int stride, int pad, int ho, int wo) {
    const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    for (int c = 0; c < cin; ++c)
      for (int ki = 0; ki < k; ++ki)
        for (int kj = 0; kj < k; ++kj) {
          const double* src = col.data() + (std::size_t(c) * k * k + ki * k + kj) * ho * wo;
          for (int i = 0; i < ho; ++i) {
            const int si = i * stride + ki - pad;
            if (si < 0 || si >= h) {
              src += wo;
              continue;
            }
            double* dst = x.data() + (std::size_t(c) * h + si) * w;
            for (int j = 0; j < wo; ++j, ++src) {
              const int sj = j * stride + kj - pad;
              if (sj >= 0 && sj < w) dst[sj] += *src;
            }
          }
        }
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, Var> param_cache_;
  bool grad_enabled_;
};

// Multi-head scaled dot-product attention. query: [N, D]; key/value: [M, D].
// Heads are column slices; per head alpha = softmax(q k^T / sqrt(D/heads)).
inline Var attention(Tape& t, Var query, Var key, Var value, int heads) {
  const Tensor &q = t.value(query), &k = t.value(key), &v = t.value(value);
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: rank-2 required");
  const int d = q.dim(1);
  require(k.dim(1) == d && v.dim(1) == d && k.dim(0) == v.dim(0), "attention: shape mismatch");
  require(heads >= 1 && d % heads == 0, "attention: D must divide by heads");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(double(dh));
  Var out = -1;
  for (int h = 0; h < heads; ++h) {
    Var qh = t.slice_cols(query, h * dh, (h + 1) * dh);
    Var kh = t.slice_cols(key, h * dh, (h + 1) * dh);
    Var vh = t.slice_cols(value, h * dh, (h + 1) * dh);
    Var scores = t.scale(t.matmul(qh, kh, false, true), inv_sqrt);
    Var alpha = t.softmax_rows(scores);
    Var oh = t.matmul(alpha, vh);
    out = h == 0 ? oh : t.concat_cols(out, oh);
  }
  return out;
}

// Finite-difference gradient check. f builds a scalar graph from the leaf var.
// Relative error uses max(1, |analytic|, |numeric|) as denominator.
struct GradCheckReport {
  double max_rel_err = 0.0;
  bool finite = true;
};

template <typename F>
GradCheckReport grad_check(F&& f, const Tensor& x, double eps = 1e-4,
                           int max_coords = -1, std::uint64_t sample_seed = 0) {
  require(eps >= 1e-6 && eps <= 1e-3, "grad_check: eps out of [1e-6, 1e-3]");
  Tensor analytic;
  {
    Tape tape(true);
    Var xv = tape.leaf(x, true);
    Var root = f(tape, xv);
    require(tape.value(root).size() == 1, "grad_check: f must be scalar-valued");
    tape.backward(root);
    analytic = tape.grad_of(xv);
  }
  auto eval = [&](const Tensor& xt) {
    Tape tape(false);
    Var xv = tape.leaf(xt, false);
    Var root = f(tape, xv);
    return tape.value(root)[0];
  };
  std::vector<std::size_t> coords(x.size());
  for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
  if (max_coords > 0 && std::size_t(max_coords) < coords.size()) {
    Rng rng(sample_seed);
    rng.shuffle(coords);
    coords.resize(std::size_t(max_coords));
  }
  GradCheckReport rep;
  Tensor xt = x;
  for (std::size_t i : coords) {
    const double x0 = xt[i];
    xt[i] = x0 + eps;
    const double fp = eval(xt);
    xt[i] = x0 - eps;
    const double fm = eval(xt);
    xt[i] = x0;
    const double num = (fp - fm) / (2.0 * eps);
    const double ana = analytic[i];
    if (!std::isfinite(num) || !std::isfinite(ana)) {
      rep.finite = false;
      rep.max_rel_err = 1e300;
      return rep;
    }
    const double rel = std::abs(num - ana) / std::max({1.0, std::abs(num), std::abs(ana)});
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
  }
  return rep;
}

}  // namespace evio
