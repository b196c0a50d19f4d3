#pragma once

#include <cassert>
#include <cmath>
#include <functional>
#include <numbers>
#include <vector>

#include "mil/rng.hpp"
#include "mil/types.hpp"

namespace mil {

/// Define-by-run reverse-mode tape over dense Eigen matrices.
///
/// Every value on the tape is a matrix; scalars are 1x1. Ops append a node
/// holding the result and a pull closure that routes the node's gradient to
/// its parents. backward() seeds a 1x1 loss with 1 and walks the tape in
/// reverse. One tape per forward pass; cleared by destruction.
template <typename S>
class Tape {
 public:
  class Var {
   public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}
    const MatX<S>& value() const { return tape_->nodes_[id_].value; }
    const MatX<S>& grad() const { return tape_->nodes_[id_].grad; }
    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

   private:
    Tape* tape_ = nullptr;
    int id_ = -1;
  };

  using Pull = std::function<void(Tape&)>;

  /// Leaf node (input, parameter, or constant).
  Var leaf(MatX<S> value) { return make(std::move(value), Pull{}); }

  Var make(MatX<S> value, Pull pull) {
    nodes_.push_back(Node{std::move(value), MatX<S>{}, std::move(pull)});
    return Var(this, static_cast<int>(nodes_.size()) - 1);
  }

  /// Gradient accumulation target for node `id`, zero-initialized on demand.
  MatX<S>& grad_of(int id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) n.grad = MatX<S>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const MatX<S>& value_of(int id) const { return nodes_[id].value; }

  /// Reverse sweep from a 1x1 loss node.
  void backward(Var loss) {
    assert(loss.tape() == this);
    assert(loss.value().rows() == 1 && loss.value().cols() == 1);
    grad_of(loss.id())(0, 0) = S(1);
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (n.grad.size() != 0 && n.pull) n.pull(*this);
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    MatX<S> value;
    MatX<S> grad;
    Pull pull;
  };
  std::vector<Node> nodes_;
};

template <typename S>
using TapeVar = typename Tape<S>::Var;

namespace detail {

template <typename S>
Tape<S>& tape_of(TapeVar<S> a) {
  assert(a.valid());
  return *a.tape();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and linear ops
// ---------------------------------------------------------------------------

template <typename S>
TapeVar<S> add(TapeVar<S> a, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value() + b.value(), [ia = a.id(), ib = b.id(), self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    t.grad_of(ia) += g;
    t.grad_of(ib) += g;
  });
}

template <typename S>
TapeVar<S> sub(TapeVar<S> a, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value() - b.value(), [ia = a.id(), ib = b.id(), self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    t.grad_of(ia) += g;
    t.grad_of(ib) -= g;
  });
}

template <typename S>
TapeVar<S> neg(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(-a.value(), [ia = a.id(), self = t.size()](Tape<S>& t) { t.grad_of(ia) -= t.grad_of(self); });
}

template <typename S>
TapeVar<S> scale(TapeVar<S> a, S k) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value() * k, [ia = a.id(), k, self = t.size()](Tape<S>& t) { t.grad_of(ia) += t.grad_of(self) * k; });
}

template <typename S>
TapeVar<S> cwise_mul(TapeVar<S> a, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value().cwiseProduct(b.value()),
                [ia = a.id(), ib = b.id(), self = t.size()](Tape<S>& t) {
                  const MatX<S>& g = t.grad_of(self);
                  t.grad_of(ia) += g.cwiseProduct(t.value_of(ib));
                  t.grad_of(ib) += g.cwiseProduct(t.value_of(ia));
                });
}

template <typename S>
TapeVar<S> cwise_div(TapeVar<S> a, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value().cwiseQuotient(b.value()),
                [ia = a.id(), ib = b.id(), self = t.size()](Tape<S>& t) {
                  const MatX<S>& g = t.grad_of(self);
                  const MatX<S>& bv = t.value_of(ib);
                  t.grad_of(ia) += g.cwiseQuotient(bv);
                  t.grad_of(ib) -= g.cwiseProduct(t.value_of(self)).cwiseQuotient(bv);
                });
}

template <typename S>
TapeVar<S> matmul(TapeVar<S> a, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value() * b.value(), [ia = a.id(), ib = b.id(), self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    t.grad_of(ia).noalias() += g * t.value_of(ib).transpose();
    t.grad_of(ib).noalias() += t.value_of(ia).transpose() * g;
  });
}

template <typename S>
TapeVar<S> transpose(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value().transpose(), [ia = a.id(), self = t.size()](Tape<S>& t) {
    t.grad_of(ia) += t.grad_of(self).transpose();
  });
}

/// y = x W + 1 b with b a 1xD row broadcast over rows.
template <typename S>
TapeVar<S> affine(TapeVar<S> x, TapeVar<S> w, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(x);
  MatX<S> y = x.value() * w.value();
  y.rowwise() += b.value().row(0);
  return t.make(std::move(y), [ix = x.id(), iw = w.id(), ib = b.id(), self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    t.grad_of(ix).noalias() += g * t.value_of(iw).transpose();
    t.grad_of(iw).noalias() += t.value_of(ix).transpose() * g;
    t.grad_of(ib) += g.colwise().sum();
  });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <typename S>
TapeVar<S> concat_rows(TapeVar<S> a, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(a);
  MatX<S> y(a.value().rows() + b.value().rows(), a.value().cols());
  y.topRows(a.value().rows()) = a.value();
  y.bottomRows(b.value().rows()) = b.value();
  const Eigen::Index na = a.value().rows();
  return t.make(std::move(y), [ia = a.id(), ib = b.id(), na, self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    t.grad_of(ia) += g.topRows(na);
    t.grad_of(ib) += g.bottomRows(g.rows() - na);
  });
}

template <typename S>
TapeVar<S> slice_rows(TapeVar<S> a, Eigen::Index r0, Eigen::Index n) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value().middleRows(r0, n), [ia = a.id(), r0, n, self = t.size()](Tape<S>& t) {
    t.grad_of(ia).middleRows(r0, n) += t.grad_of(self);
  });
}

template <typename S>
TapeVar<S> slice_cols(TapeVar<S> a, Eigen::Index c0, Eigen::Index n) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value().middleCols(c0, n), [ia = a.id(), c0, n, self = t.size()](Tape<S>& t) {
    t.grad_of(ia).middleCols(c0, n) += t.grad_of(self);
  });
}

template <typename S>
TapeVar<S> concat_cols(const std::vector<TapeVar<S>>& parts) {
  assert(!parts.empty());
  Tape<S>& t = detail::tape_of(parts[0]);
  Eigen::Index cols = 0;
  for (const auto& p : parts) cols += p.value().cols();
  MatX<S> y(parts[0].value().rows(), cols);
  std::vector<int> ids;
  std::vector<Eigen::Index> widths;
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p.value().cols()) = p.value();
    ids.push_back(p.id());
    widths.push_back(p.value().cols());
    at += p.value().cols();
  }
  return t.make(std::move(y), [ids, widths, self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    Eigen::Index at = 0;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      t.grad_of(ids[i]) += g.middleCols(at, widths[i]);
      at += widths[i];
    }
  });
}

/// Appends zero rows until the row count reaches `total`.
template <typename S>
TapeVar<S> pad_rows(TapeVar<S> a, Eigen::Index total) {
  Tape<S>& t = detail::tape_of(a);
  const Eigen::Index na = a.value().rows();
  assert(total >= na);
  if (total == na) return a;
  MatX<S> y = MatX<S>::Zero(total, a.value().cols());
  y.topRows(na) = a.value();
  return t.make(std::move(y), [ia = a.id(), na, self = t.size()](Tape<S>& t) {
    t.grad_of(ia) += t.grad_of(self).topRows(na);
  });
}

/// Means over `segments` contiguous equal row chunks; rows must divide evenly.
template <typename S>
TapeVar<S> segment_mean_rows(TapeVar<S> a, Eigen::Index segments) {
  Tape<S>& t = detail::tape_of(a);
  const Eigen::Index rows = a.value().rows();
  assert(rows % segments == 0);
  const Eigen::Index g = rows / segments;
  MatX<S> y(segments, a.value().cols());
  for (Eigen::Index s = 0; s < segments; ++s) y.row(s) = a.value().middleRows(s * g, g).colwise().mean();
  return t.make(std::move(y), [ia = a.id(), segments, g, self = t.size()](Tape<S>& t) {
    const MatX<S>& gr = t.grad_of(self);
    MatX<S>& ga = t.grad_of(ia);
    const S inv = S(1) / static_cast<S>(g);
    for (Eigen::Index s = 0; s < segments; ++s) ga.middleRows(s * g, g).rowwise() += gr.row(s) * inv;
  });
}

template <typename S>
TapeVar<S> mean_rows(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  MatX<S> y = a.value().colwise().mean();
  const Eigen::Index n = a.value().rows();
  return t.make(std::move(y), [ia = a.id(), n, self = t.size()](Tape<S>& t) {
    t.grad_of(ia).rowwise() += t.grad_of(self).row(0) / static_cast<S>(n);
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <typename S>
TapeVar<S> softmax_rows(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  MatX<S> y = a.value();
  for (Eigen::Index r = 0; r < y.rows(); ++r) {
    const S m = y.row(r).maxCoeff();
    y.row(r) = (y.row(r).array() - m).exp();
    y.row(r) /= y.row(r).sum();
  }
  return t.make(std::move(y), [ia = a.id(), self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    const MatX<S>& s = t.value_of(self);
    MatX<S>& ga = t.grad_of(ia);
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      const S dot = g.row(r).cwiseProduct(s.row(r)).sum();
      ga.row(r) += s.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
    }
  });
}

template <typename S>
TapeVar<S> gelu(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  const S inv_sqrt2 = S(1) / std::sqrt(S(2));
  MatX<S> y = a.value().unaryExpr([inv_sqrt2](S x) { return S(0.5) * x * (S(1) + std::erf(x * inv_sqrt2)); });
  return t.make(std::move(y), [ia = a.id(), inv_sqrt2, self = t.size()](Tape<S>& t) {
    const MatX<S>& x = t.value_of(ia);
    const S c = S(1) / std::sqrt(S(2) * std::numbers::pi_v<S>);
    t.grad_of(ia) += t.grad_of(self).cwiseProduct(x.unaryExpr([inv_sqrt2, c](S v) {
      return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) + v * c * std::exp(S(-0.5) * v * v);
    }));
  });
}

/// Per-row layer normalization with learned 1xD gain and bias.
template <typename S>
TapeVar<S> layer_norm_rows(TapeVar<S> x, TapeVar<S> gain, TapeVar<S> bias, S eps = S(1e-5)) {
  Tape<S>& t = detail::tape_of(x);
  const MatX<S>& xv = x.value();
  const Eigen::Index d = xv.cols();
  MatX<S> xhat(xv.rows(), d);
  VecX<S> inv_std(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const S mu = xv.row(r).mean();
    const S var = (xv.row(r).array() - mu).square().sum() / static_cast<S>(d);
    inv_std(r) = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv_std(r);
  }
  MatX<S> y = xhat;
  y.array().rowwise() *= gain.value().row(0).array();
  y.rowwise() += bias.value().row(0);
  // Keep xhat/inv_std for the pull closure.
  return t.make(std::move(y), [ix = x.id(), ig = gain.id(), ib = bias.id(), xhat = std::move(xhat),
                               inv_std = std::move(inv_std), d, self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    const auto gamma = t.value_of(ig).row(0);
    t.grad_of(ib) += g.colwise().sum();
    MatX<S>& ggain = t.grad_of(ig);
    MatX<S>& gx = t.grad_of(ix);
    for (Eigen::Index r = 0; r < g.rows(); ++r) {
      ggain.row(0) += g.row(r).cwiseProduct(xhat.row(r));
      const RowX<S> gy = g.row(r).cwiseProduct(gamma);
      const S mean_gy = gy.mean();
      const S mean_gy_xhat = gy.cwiseProduct(xhat.row(r)).sum() / static_cast<S>(d);
      gx.row(r) += ((gy.array() - mean_gy) - xhat.row(r).array() * mean_gy_xhat).matrix() * inv_std(r);
    }
  });
}

/// Inverted dropout with Bernoulli(1-p) keep mask sampled at op creation.
template <typename S>
TapeVar<S> dropout(TapeVar<S> a, double p, Rng& rng) {
  Tape<S>& t = detail::tape_of(a);
  const S keep_scale = S(1) / static_cast<S>(1.0 - p);
  MatX<S> mask(a.value().rows(), a.value().cols());
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c) mask(r, c) = rng.bernoulli(p) ? S(0) : keep_scale;
  return t.make(a.value().cwiseProduct(mask), [ia = a.id(), mask = std::move(mask), self = t.size()](Tape<S>& t) {
    t.grad_of(ia) += t.grad_of(self).cwiseProduct(mask);
  });
}

// ---------------------------------------------------------------------------
// Reductions and scalar (1x1) helpers
// ---------------------------------------------------------------------------

/// Frobenius inner product; matches the vector dot product for 1xD rows.
template <typename S>
TapeVar<S> dot(TapeVar<S> a, TapeVar<S> b) {
  Tape<S>& t = detail::tape_of(a);
  MatX<S> y(1, 1);
  y(0, 0) = a.value().cwiseProduct(b.value()).sum();
  return t.make(std::move(y), [ia = a.id(), ib = b.id(), self = t.size()](Tape<S>& t) {
    const S g = t.grad_of(self)(0, 0);
    t.grad_of(ia) += g * t.value_of(ib);
    t.grad_of(ib) += g * t.value_of(ia);
  });
}

template <typename S>
TapeVar<S> l2_norm(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  MatX<S> y(1, 1);
  y(0, 0) = a.value().norm();
  return t.make(std::move(y), [ia = a.id(), self = t.size()](Tape<S>& t) {
    const S n = t.value_of(self)(0, 0);
    if (n > S(0)) t.grad_of(ia) += (t.grad_of(self)(0, 0) / n) * t.value_of(ia);
  });
}

/// max(a, k) elementwise against a constant; subgradient 0 at the kink.
template <typename S>
TapeVar<S> max_with(TapeVar<S> a, S k) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value().cwiseMax(k), [ia = a.id(), k, self = t.size()](Tape<S>& t) {
    const MatX<S>& av = t.value_of(ia);
    t.grad_of(ia) += t.grad_of(self).cwiseProduct((av.array() > k).template cast<S>().matrix());
  });
}

/// Largest entry as a 1x1; gradient routed to the first maximizer.
template <typename S>
TapeVar<S> max_entry(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  Eigen::Index r, c;
  const S m = a.value().maxCoeff(&r, &c);
  MatX<S> y(1, 1);
  y(0, 0) = m;
  return t.make(std::move(y), [ia = a.id(), r, c, self = t.size()](Tape<S>& t) {
    t.grad_of(ia)(r, c) += t.grad_of(self)(0, 0);
  });
}

template <typename S>
TapeVar<S> cwise_abs(TapeVar<S> a) {
  Tape<S>& t = detail::tape_of(a);
  return t.make(a.value().cwiseAbs(), [ia = a.id(), self = t.size()](Tape<S>& t) {
    t.grad_of(ia) += t.grad_of(self).cwiseProduct(t.value_of(ia).unaryExpr([](S x) {
      return x > S(0) ? S(1) : (x < S(0) ? S(-1) : S(0));
    }));
  });
}

/// Broadcast-multiply a matrix by a 1x1 scalar node.
template <typename S>
TapeVar<S> mul_scalar(TapeVar<S> a, TapeVar<S> s) {
  Tape<S>& t = detail::tape_of(a);
  assert(s.value().size() == 1);
  return t.make(a.value() * s.value()(0, 0), [ia = a.id(), is = s.id(), self = t.size()](Tape<S>& t) {
    const MatX<S>& g = t.grad_of(self);
    t.grad_of(ia) += g * t.value_of(is)(0, 0);
    t.grad_of(is)(0, 0) += g.cwiseProduct(t.value_of(ia)).sum();
  });
}

template <typename S>
TapeVar<S> constant(Tape<S>& t, S v) {
  MatX<S> m(1, 1);
  m(0, 0) = v;
  return t.leaf(std::move(m));
}

/// Stable -log softmax(logits)[label] for a 1xC logit row.
template <typename S>
TapeVar<S> cross_entropy_from_logits(TapeVar<S> logits, int label) {
  Tape<S>& t = detail::tape_of(logits);
  const auto& l = logits.value();
  assert(l.rows() == 1 && label >= 0 && label < l.cols());
  const S m = l.row(0).maxCoeff();
  const S lse = m + std::log((l.row(0).array() - m).exp().sum());
  MatX<S> y(1, 1);
  y(0, 0) = lse - l(0, label);
  return t.make(std::move(y), [il = logits.id(), label, lse, self = t.size()](Tape<S>& t) {
    const S g = t.grad_of(self)(0, 0);
    const MatX<S>& l = t.value_of(il);
    MatX<S>& gl = t.grad_of(il);
    for (Eigen::Index c = 0; c < l.cols(); ++c) {
      const S p = std::exp(l(0, c) - lse);
      gl(0, c) += g * (p - (c == label ? S(1) : S(0)));
    }
  });
}

}  // namespace mil
