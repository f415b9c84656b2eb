#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "tpir/tape.hpp"

// Differentiable free functions over Tape vars. Features follow the project
// convention d x L (tokens are columns, class token at column 0); attention
// weight matrices are L_q x L_k with queries as rows.

namespace tpir {

namespace detail {

template <typename S>
Tape<S>& same_tape(Var<S> a, Var<S> b) {
  require(a.valid() && b.valid() && a.tape == b.tape, "ops: vars from different tapes");
  return *a.tape;
}

template <typename S>
void same_shape(Var<S> a, Var<S> b, const char* who) {
  require(a.rows() == b.rows() && a.cols() == b.cols(),
          std::string(who) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
              std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
              std::to_string(b.cols()));
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.op(t.value(a) + t.value(b), ng, [ai = a.id, bi = b.id, out = t.size()](Tape<S>& tp) {
    const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
    tp.add_grad(ai, g);
    tp.add_grad(bi, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.op(t.value(a) - t.value(b), ng, [ai = a.id, bi = b.id, out = t.size()](Tape<S>& tp) {
    const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
    tp.add_grad(ai, g);
    tp.add_grad(bi, -g);
  });
}

// alpha * x + beta (elementwise affine with constants).
template <typename S>
Var<S> affine(Var<S> x, S alpha, S beta) {
  Tape<S>& t = *x.tape;
  Mat<S> v = (alpha * t.value(x).array() + beta).matrix();
  return t.op(std::move(v), t.needs_grad(x), [xi = x.id, alpha, out = t.size()](Tape<S>& tp) {
    tp.add_grad(xi, (alpha * tp.grad_ref(static_cast<std::int32_t>(out)).array()).matrix());
  });
}

template <typename S>
Var<S> scale(Var<S> x, S alpha) {
  return affine(x, alpha, S(0));
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  require(a.cols() == b.rows(), "matmul: inner dims " + std::to_string(a.cols()) + " vs " +
                                    std::to_string(b.rows()));
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.op(t.value(a) * t.value(b), ng, [ai = a.id, bi = b.id, out = t.size()](Tape<S>& tp) {
    const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
    tp.add_grad(ai, g * tp.value(Var<S>{&tp, bi}).transpose());
    tp.add_grad(bi, tp.value(Var<S>{&tp, ai}).transpose() * g);
  });
}

template <typename S>
Var<S> transpose(Var<S> x) {
  Tape<S>& t = *x.tape;
  return t.op(t.value(x).transpose(), t.needs_grad(x), [xi = x.id, out = t.size()](Tape<S>& tp) {
    tp.add_grad(xi, tp.grad_ref(static_cast<std::int32_t>(out)).transpose());
  });
}

template <typename S>
Var<S> hadamard(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::same_shape(a, b, "hadamard");
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.op((t.value(a).array() * t.value(b).array()).matrix(), ng,
              [ai = a.id, bi = b.id, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                tp.add_grad(ai, (g.array() * tp.value(Var<S>{&tp, bi}).array()).matrix());
                tp.add_grad(bi, (g.array() * tp.value(Var<S>{&tp, ai}).array()).matrix());
              });
}

template <typename S>
Var<S> hadamard_const(Var<S> x, const Mat<S>& c) {
  Tape<S>& t = *x.tape;
  require(x.rows() == c.rows() && x.cols() == c.cols(), "hadamard_const: shape mismatch");
  return t.op((t.value(x).array() * c.array()).matrix(), t.needs_grad(x),
              [xi = x.id, c, out = t.size()](Tape<S>& tp) {
                tp.add_grad(xi, (tp.grad_ref(static_cast<std::int32_t>(out)).array() * c.array()).matrix());
              });
}

// x (d x L) + column vector b (d x 1) broadcast over columns.
template <typename S>
Var<S> add_col_broadcast(Var<S> x, Var<S> b) {
  Tape<S>& t = detail::same_tape(x, b);
  require(b.cols() == 1 && b.rows() == x.rows(), "add_col_broadcast: b must be d x 1");
  bool ng = t.needs_grad(x) || t.needs_grad(b);
  return t.op((t.value(x).colwise() + Vec<S>(t.value(b).col(0))).eval(), ng,
              [xi = x.id, bi = b.id, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                tp.add_grad(xi, g);
                tp.add_grad(bi, g.rowwise().sum());
              });
}

// Row-wise softmax; optional additive key mask (1 x cols) applied to every row.
template <typename S>
Var<S> softmax_rows(Var<S> x, const RowVec<S>* key_mask = nullptr) {
  Tape<S>& t = *x.tape;
  Mat<S> logits = t.value(x);
  if (key_mask != nullptr) {
    require(key_mask->cols() == logits.cols(), "softmax_rows: mask width mismatch");
    logits.rowwise() += *key_mask;
  }
  Mat<S> sm(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    S m = logits.row(i).maxCoeff();
    RowVec<S> e = (logits.row(i).array() - m).exp();
    sm.row(i) = e / e.sum();
  }
  return t.op(sm, t.needs_grad(x), [xi = x.id, out = t.size()](Tape<S>& tp) {
    std::int32_t oid = static_cast<std::int32_t>(out);
    const auto& g = tp.grad_ref(oid);
    const auto& s = tp.value(Var<S>{&tp, oid});
    Mat<S> dx(s.rows(), s.cols());
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
      S dot = g.row(i).dot(s.row(i));
      dx.row(i) = (s.row(i).array() * (g.row(i).array() - dot)).matrix();
    }
    tp.add_grad(xi, dx);
  });
}

template <typename S>
Var<S> row_block(Var<S> x, Eigen::Index r0, Eigen::Index nr) {
  Tape<S>& t = *x.tape;
  require(r0 >= 0 && nr > 0 && r0 + nr <= x.rows(), "row_block: out of range");
  return t.op(t.value(x).middleRows(r0, nr).eval(), t.needs_grad(x),
              [xi = x.id, r0, nr, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                const auto& xv = tp.value(Var<S>{&tp, xi});
                Mat<S> dx = Mat<S>::Zero(xv.rows(), xv.cols());
                dx.middleRows(r0, nr) = g;
                tp.add_grad(xi, dx);
              });
}

template <typename S>
Var<S> col(Var<S> x, Eigen::Index j) {
  Tape<S>& t = *x.tape;
  require(j >= 0 && j < x.cols(), "col: index out of range");
  return t.op(t.value(x).col(j).eval(), t.needs_grad(x),
              [xi = x.id, j, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                const auto& xv = tp.value(Var<S>{&tp, xi});
                Mat<S> dx = Mat<S>::Zero(xv.rows(), xv.cols());
                dx.col(j) = g;
                tp.add_grad(xi, dx);
              });
}

template <typename S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "concat_cols: empty");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool ng = false;
  for (const auto& p : parts) {
    require(p.tape == &t, "concat_cols: mixed tapes");
    require(p.rows() == rows, "concat_cols: row mismatch");
    cols += p.cols();
    ng = ng || t.needs_grad(p);
  }
  Mat<S> v(rows, cols);
  Eigen::Index c = 0;
  std::vector<std::int32_t> ids;
  std::vector<Eigen::Index> widths;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = t.value(p);
    ids.push_back(p.id);
    widths.push_back(p.cols());
    c += p.cols();
  }
  return t.op(std::move(v), ng, [ids, widths, out = t.size()](Tape<S>& tp) {
    const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
    Eigen::Index c = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      tp.add_grad(ids[k], g.middleCols(c, widths[k]));
      c += widths[k];
    }
  });
}

template <typename S>
Var<S> concat_rows(const std::vector<Var<S>>& parts) {
  require(!parts.empty(), "concat_rows: empty");
  Tape<S>& t = *parts[0].tape;
  Eigen::Index cols = parts[0].cols();
  Eigen::Index rows = 0;
  bool ng = false;
  for (const auto& p : parts) {
    require(p.tape == &t, "concat_rows: mixed tapes");
    require(p.cols() == cols, "concat_rows: col mismatch");
    rows += p.rows();
    ng = ng || t.needs_grad(p);
  }
  Mat<S> v(rows, cols);
  Eigen::Index r = 0;
  std::vector<std::int32_t> ids;
  std::vector<Eigen::Index> heights;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = t.value(p);
    ids.push_back(p.id);
    heights.push_back(p.rows());
    r += p.rows();
  }
  return t.op(std::move(v), ng, [ids, heights, out = t.size()](Tape<S>& tp) {
    const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
    Eigen::Index r = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      tp.add_grad(ids[k], g.middleRows(r, heights[k]));
      r += heights[k];
    }
  });
}

template <typename S>
Var<S> mean_cols(Var<S> x) {
  Tape<S>& t = *x.tape;
  Eigen::Index L = x.cols();
  return t.op(t.value(x).rowwise().mean().eval(), t.needs_grad(x),
              [xi = x.id, L, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                tp.add_grad(xi, (g / S(L)).replicate(1, L));
              });
}

template <typename S>
Var<S> sum_all(Var<S> x) {
  Tape<S>& t = *x.tape;
  Mat<S> v(1, 1);
  v(0, 0) = t.value(x).sum();
  return t.op(std::move(v), t.needs_grad(x), [xi = x.id, out = t.size()](Tape<S>& tp) {
    S g = tp.grad_ref(static_cast<std::int32_t>(out))(0, 0);
    const auto& xv = tp.value(Var<S>{&tp, xi});
    tp.add_grad(xi, Mat<S>::Constant(xv.rows(), xv.cols(), g));
  });
}

// Per-column layer normalization with learned gain/bias (both d x 1).
template <typename S>
Var<S> layer_norm_cols(Var<S> x, Var<S> gamma, Var<S> beta, S eps = S(1e-5)) {
  Tape<S>& t = *x.tape;
  require(gamma.cols() == 1 && beta.cols() == 1 && gamma.rows() == x.rows() &&
              beta.rows() == x.rows(),
          "layer_norm_cols: gamma/beta must be d x 1");
  const Mat<S>& xv = t.value(x);
  Eigen::Index d = xv.rows(), L = xv.cols();
  Mat<S> xhat(d, L);
  Vec<S> inv_std(L);
  for (Eigen::Index j = 0; j < L; ++j) {
    S mu = xv.col(j).mean();
    Vec<S> c = xv.col(j).array() - mu;
    S var = c.squaredNorm() / S(d);
    S inv = S(1) / std::sqrt(var + eps);
    xhat.col(j) = c * inv;
    inv_std(j) = inv;
  }
  Mat<S> y = (xhat.array().colwise() * Vec<S>(t.value(gamma).col(0)).array()).matrix();
  y.colwise() += Vec<S>(t.value(beta).col(0));
  bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.op(std::move(y), ng,
              [xi = x.id, gi = gamma.id, bi = beta.id, xhat, inv_std, d, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                tp.add_grad(bi, g.rowwise().sum());
                tp.add_grad(gi, (g.array() * xhat.array()).rowwise().sum().matrix());
                if (tp.needs_grad(Var<S>{&tp, xi})) {
                  const Vec<S> gm = tp.value(Var<S>{&tp, gi}).col(0);
                  Mat<S> dxhat = (g.array().colwise() * gm.array()).matrix();
                  Mat<S> dx(dxhat.rows(), dxhat.cols());
                  for (Eigen::Index j = 0; j < dxhat.cols(); ++j) {
                    S m1 = dxhat.col(j).mean();
                    S m2 = (dxhat.col(j).array() * xhat.col(j).array()).mean();
                    dx.col(j) =
                        inv_std(j) * (dxhat.col(j).array() - m1 - xhat.col(j).array() * m2).matrix();
                  }
                  tp.add_grad(xi, dx);
                }
              });
}

// GELU, tanh approximation (smooth; exact finite-difference friendly).
template <typename S>
Var<S> gelu(Var<S> x) {
  Tape<S>& t = *x.tape;
  const S k = S(0.7978845608028654);  // sqrt(2/pi)
  const S a = S(0.044715);
  const Mat<S>& xv = t.value(x);
  Mat<S> u = (k * (xv.array() + a * xv.array().cube())).matrix();
  Mat<S> th = u.array().tanh().matrix();
  Mat<S> y = (S(0.5) * xv.array() * (S(1) + th.array())).matrix();
  return t.op(std::move(y), t.needs_grad(x),
              [xi = x.id, th, k, a, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                const auto& xv2 = tp.value(Var<S>{&tp, xi});
                auto sech2 = (S(1) - th.array().square());
                auto du = k * (S(1) + S(3) * a * xv2.array().square());
                auto dy = S(0.5) * (S(1) + th.array()) + S(0.5) * xv2.array() * sech2 * du;
                tp.add_grad(xi, (g.array() * dy).matrix());
              });
}

// Unit-normalizes every column; throws on a zero-norm column.
template <typename S>
Var<S> normalize_cols(Var<S> x) {
  Tape<S>& t = *x.tape;
  const Mat<S>& xv = t.value(x);
  Mat<S> y(xv.rows(), xv.cols());
  Vec<S> norms(xv.cols());
  for (Eigen::Index j = 0; j < xv.cols(); ++j) {
    S n = xv.col(j).norm();
    if (n == S(0)) throw DegenerateInputError("normalize_cols: zero-norm column");
    y.col(j) = xv.col(j) / n;
    norms(j) = n;
  }
  return t.op(std::move(y), t.needs_grad(x),
              [xi = x.id, norms, out = t.size()](Tape<S>& tp) {
                std::int32_t oid = static_cast<std::int32_t>(out);
                const auto& g = tp.grad_ref(oid);
                const auto& yv = tp.value(Var<S>{&tp, oid});
                Mat<S> dx(yv.rows(), yv.cols());
                for (Eigen::Index j = 0; j < yv.cols(); ++j) {
                  S dot = g.col(j).dot(yv.col(j));
                  dx.col(j) = (g.col(j) - dot * yv.col(j)) / norms(j);
                }
                tp.add_grad(xi, dx);
              });
}

template <typename S>
Var<S> normalize_rows(Var<S> x) {
  return transpose(normalize_cols(transpose(x)));
}

// Per-column dot products of two d x L matrices -> 1 x L.
template <typename S>
Var<S> colwise_dot(Var<S> a, Var<S> b) {
  Tape<S>& t = detail::same_tape(a, b);
  detail::same_shape(a, b, "colwise_dot");
  Mat<S> v = (t.value(a).array() * t.value(b).array()).colwise().sum().matrix();
  bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.op(std::move(v), ng, [ai = a.id, bi = b.id, out = t.size()](Tape<S>& tp) {
    const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
    const auto& av = tp.value(Var<S>{&tp, ai});
    const auto& bv = tp.value(Var<S>{&tp, bi});
    tp.add_grad(ai, (bv.array().rowwise() * g.row(0).array()).matrix());
    tp.add_grad(bi, (av.array().rowwise() * g.row(0).array()).matrix());
  });
}

// Scales column j of x by s(0, j); s is 1 x L.
template <typename S>
Var<S> scale_cols(Var<S> x, Var<S> s) {
  Tape<S>& t = detail::same_tape(x, s);
  require(s.rows() == 1 && s.cols() == x.cols(), "scale_cols: s must be 1 x L");
  Mat<S> v = (t.value(x).array().rowwise() * t.value(s).row(0).array()).matrix();
  bool ng = t.needs_grad(x) || t.needs_grad(s);
  return t.op(std::move(v), ng, [xi = x.id, si = s.id, out = t.size()](Tape<S>& tp) {
    const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
    const auto& xv = tp.value(Var<S>{&tp, xi});
    const auto& sv = tp.value(Var<S>{&tp, si});
    tp.add_grad(xi, (g.array().rowwise() * sv.row(0).array()).matrix());
    tp.add_grad(si, (g.array() * xv.array()).colwise().sum().matrix());
  });
}

// Euclidean norm of a d x 1 vector -> 1 x 1.
template <typename S>
Var<S> vec_norm(Var<S> x) {
  Tape<S>& t = *x.tape;
  require(x.cols() == 1, "vec_norm: expects a column vector");
  S n = t.value(x).norm();
  Mat<S> v(1, 1);
  v(0, 0) = n;
  return t.op(std::move(v), t.needs_grad(x), [xi = x.id, n, out = t.size()](Tape<S>& tp) {
    if (n == S(0)) return;  // subgradient 0 at the kink
    S g = tp.grad_ref(static_cast<std::int32_t>(out))(0, 0);
    tp.add_grad(xi, (g / n) * tp.value(Var<S>{&tp, xi}));
  });
}

// Gathers columns of a d x V table -> d x L. Duplicate ids accumulate grads.
template <typename S>
Var<S> embedding_cols(Var<S> table, const std::vector<int>& ids) {
  Tape<S>& t = *table.tape;
  const Mat<S>& tv = t.value(table);
  Mat<S> v(tv.rows(), static_cast<Eigen::Index>(ids.size()));
  for (std::size_t j = 0; j < ids.size(); ++j) {
    require(ids[j] >= 0 && ids[j] < tv.cols(), "embedding_cols: id out of range");
    v.col(static_cast<Eigen::Index>(j)) = tv.col(ids[j]);
  }
  return t.op(std::move(v), t.needs_grad(table),
              [ti = table.id, ids, out = t.size()](Tape<S>& tp) {
                const auto& g = tp.grad_ref(static_cast<std::int32_t>(out));
                const auto& tv2 = tp.value(Var<S>{&tp, ti});
                Mat<S> dt = Mat<S>::Zero(tv2.rows(), tv2.cols());
                for (std::size_t j = 0; j < ids.size(); ++j)
                  dt.col(ids[j]) += g.col(static_cast<Eigen::Index>(j));
                tp.add_grad(ti, dt);
              });
}

enum class Reduction { Sum, Mean };

// Softmax cross-entropy over columns of logits (C x N) against integer labels.
template <typename S>
Var<S> softmax_ce(Var<S> logits, const std::vector<int>& labels, Reduction red) {
  Tape<S>& t = *logits.tape;
  const Mat<S>& z = t.value(logits);
  require(static_cast<Eigen::Index>(labels.size()) == z.cols(),
          "softmax_ce: labels size mismatch");
  S total = S(0);
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    int y = labels[static_cast<std::size_t>(j)];
    require(y >= 0 && y < z.rows(), "softmax_ce: label out of range");
    S m = z.col(j).maxCoeff();
    S lse = m + std::log((z.col(j).array() - m).exp().sum());
    total += lse - z(y, j);
  }
  S w = red == Reduction::Mean ? S(1) / S(z.cols()) : S(1);
  Mat<S> v(1, 1);
  v(0, 0) = total * w;
  return t.op(std::move(v), t.needs_grad(logits),
              [li = logits.id, labels, w, out = t.size()](Tape<S>& tp) {
                S g = tp.grad_ref(static_cast<std::int32_t>(out))(0, 0);
                const auto& z2 = tp.value(Var<S>{&tp, li});
                Mat<S> dz(z2.rows(), z2.cols());
                for (Eigen::Index j = 0; j < z2.cols(); ++j) {
                  S m = z2.col(j).maxCoeff();
                  Vec<S> e = (z2.col(j).array() - m).exp();
                  dz.col(j) = e / e.sum();
                  dz(labels[static_cast<std::size_t>(j)], j) -= S(1);
                }
                tp.add_grad(li, dz * (g * w));
              });
}

// Mean over rows of KL(softmax(logits_row) || q_row + eps). q is a constant
// target whose rows are match distributions.
template <typename S>
Var<S> kl_matching(Var<S> logits, const Mat<S>& q, S eps) {
  Tape<S>& t = *logits.tape;
  const Mat<S>& z = t.value(logits);
  require(z.rows() == q.rows() && z.cols() == q.cols(), "kl_matching: q shape mismatch");
  Mat<S> logq = (q.array() + eps).log().matrix();
  Mat<S> p(z.rows(), z.cols());
  Mat<S> logp(z.rows(), z.cols());
  Vec<S> row_kl(z.rows());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    S m = z.row(i).maxCoeff();
    RowVec<S> e = (z.row(i).array() - m).exp();
    S sum = e.sum();
    p.row(i) = e / sum;
    logp.row(i) = (z.row(i).array() - m - std::log(sum)).matrix();
    row_kl(i) = (p.row(i).array() * (logp.row(i) - logq.row(i)).array()).sum();
  }
  Mat<S> v(1, 1);
  v(0, 0) = row_kl.mean();
  return t.op(std::move(v), t.needs_grad(logits),
              [li = logits.id, p, logp, logq, row_kl, out = t.size()](Tape<S>& tp) {
                S g = tp.grad_ref(static_cast<std::int32_t>(out))(0, 0);
                S inv_n = S(1) / S(p.rows());
                Mat<S> dz(p.rows(), p.cols());
                for (Eigen::Index i = 0; i < p.rows(); ++i) {
                  dz.row(i) = (p.row(i).array() *
                               ((logp.row(i) - logq.row(i)).array() - row_kl(i)))
                                  .matrix();
                }
                tp.add_grad(li, dz * (g * inv_n));
              });
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) {
  return add(a, b);
}
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) {
  return sub(a, b);
}
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) {
  return matmul(a, b);
}
template <typename S>
Var<S> operator*(S c, Var<S> x) {
  return scale(x, c);
}

}  // namespace tpir
