#pragma once

#include <cmath>
#include <vector>

#include "mil/error.hpp"
#include "mil/tape.hpp"
#include "mil/types.hpp"

namespace mil {

struct LossConfig {
  double margin = 0.25;        // m, cross-class similarity above which the hinge fires
  double update_ratio = 0.996; // lambda, prototype EMA retention
  double epsilon = 1e-8;       // cosine stability floor

  void validate() const {
    if (margin < 0.0 || margin >= 1.0) throw ValidationError("loss config: margin must be in [0, 1)");
    if (update_ratio < 0.0 || update_ratio >= 1.0)
      throw ValidationError("loss config: update_ratio must be in [0, 1)");
    if (epsilon <= 0.0) throw ValidationError("loss config: epsilon must be > 0");
  }
};

/// Per-class EMA prototypes of bag embeddings. A slot is seeded with the
/// first embedding of its class and EMA-updated afterwards.
template <typename S>
class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(int class_count, int width)
      : slots_(MatX<S>::Zero(class_count, width)), present_(class_count, false) {}

  int capacity() const { return static_cast<int>(present_.size()); }
  int filled() const {
    int n = 0;
    for (bool p : present_) n += p;
    return n;
  }
  bool complete() const { return filled() == capacity(); }
  bool has(int cls) const { return present_.at(cls); }
  RowX<S> prototype(int cls) const {
    if (!has(cls)) throw ValidationError("prototype bank: class " + std::to_string(cls) + " not seeded");
    return slots_.row(cls);
  }
  const MatX<S>& slots() const { return slots_; }
  const std::vector<bool>& present() const { return present_; }

  /// Warm-up branch seeds an absent slot; otherwise the EMA
  /// slot <- lambda * slot + (1 - lambda) * b_new is applied in place.
  void update(int cls, const RowX<S>& b_new, S lambda) {
    if (!b_new.allFinite()) throw ValidationError("prototype bank: non-finite embedding");
    if (!present_.at(cls)) {
      slots_.row(cls) = b_new;
      present_[cls] = true;
    } else {
      slots_.row(cls) = lambda * slots_.row(cls) + (S(1) - lambda) * b_new;
    }
  }

  void restore(MatX<S> slots, std::vector<bool> present) {
    slots_ = std::move(slots);
    present_ = std::move(present);
  }

 private:
  MatX<S> slots_;
  std::vector<bool> present_;
};

/// u . v / max(||u|| ||v||, eps); the floor makes zero vectors similarity 0.
template <typename S>
S cosine_similarity(const RowX<S>& u, const RowX<S>& v, S eps) {
  if (u.cols() != v.cols()) throw ValidationError("cosine_similarity: width mismatch");
  const S denom = std::max(u.norm() * v.norm(), eps);
  return (u * v.transpose())(0, 0) / denom;
}

/// Bag embedding loss against a complete prototype bank:
///   1/2 (1 - S(b, proto_c)) + 1/(2(|C|-1)) sum_{c' != c} max(0, S(b, proto_c') - m)
template <typename S>
S bag_embedding_loss(const RowX<S>& b_new, int cls, const PrototypeBank<S>& bank, const LossConfig& cfg) {
  cfg.validate();
  if (!bank.complete())
    throw ValidationError("bag_embedding_loss: bank incomplete (" + std::to_string(bank.filled()) + "/" +
                          std::to_string(bank.capacity()) + "); warm up first");
  if (!b_new.allFinite()) throw ValidationError("bag_embedding_loss: non-finite embedding");
  const S eps = static_cast<S>(cfg.epsilon);
  const S m = static_cast<S>(cfg.margin);
  S pull = S(0.5) * (S(1) - cosine_similarity<S>(b_new, bank.prototype(cls), eps));
  S push = S(0);
  for (int c = 0; c < bank.capacity(); ++c) {
    if (c == cls) continue;
    push += std::max(S(0), cosine_similarity<S>(b_new, bank.prototype(c), eps) - m);
  }
  return pull + push / (S(2) * static_cast<S>(bank.capacity() - 1));
}

/// Categorical cross entropy -log p_c for a strictly positive probability row.
template <typename S>
S cross_entropy(const VecX<S>& p, int cls) {
  if (cls < 0 || cls >= p.size()) throw ValidationError("cross_entropy: label out of range");
  return -std::log(p(cls));
}

template <typename S>
struct LossBreakdown {
  S total;
  S ce;
  S bel;
  bool bel_active;
};

/// Total loss CE + BEL with equal weighting; BEL contributes 0 until the
/// bank has seen every class once.
template <typename S>
LossBreakdown<S> total_loss(const VecX<S>& p, int cls, const RowX<S>& b, const PrototypeBank<S>& bank,
                            const LossConfig& cfg) {
  LossBreakdown<S> out{};
  out.ce = cross_entropy(p, cls);
  out.bel_active = bank.complete();
  out.bel = out.bel_active ? bag_embedding_loss(b, cls, bank, cfg) : S(0);
  out.total = out.ce + out.bel;
  return out;
}

// ---------------------------------------------------------------------------
// Tape version (gradient flows through b_new only; prototypes are constants)
// ---------------------------------------------------------------------------

template <typename S>
TapeVar<S> cosine_similarity_on_tape(TapeVar<S> b, const RowX<S>& proto, S eps) {
  Tape<S>& t = *b.tape();
  auto p = t.leaf(proto);
  auto num = dot(b, p);
  auto denom = max_with(cwise_mul(l2_norm(b), constant(t, proto.norm())), eps);
  return cwise_div(num, denom);
}

template <typename S>
TapeVar<S> bag_embedding_loss_on_tape(TapeVar<S> b_new, int cls, const PrototypeBank<S>& bank,
                                      const LossConfig& cfg) {
  if (!bank.complete()) throw ValidationError("bag_embedding_loss_on_tape: bank incomplete");
  Tape<S>& t = *b_new.tape();
  const S eps = static_cast<S>(cfg.epsilon);
  const S m = static_cast<S>(cfg.margin);
  auto pull = scale(sub(constant(t, S(1)), cosine_similarity_on_tape(b_new, RowX<S>(bank.prototype(cls)), eps)),
                    S(0.5));
  TapeVar<S> loss = pull;
  const S push_scale = S(1) / (S(2) * static_cast<S>(bank.capacity() - 1));
  for (int c = 0; c < bank.capacity(); ++c) {
    if (c == cls) continue;
    auto sim = cosine_similarity_on_tape(b_new, RowX<S>(bank.prototype(c)), eps);
    loss = add(loss, scale(max_with(sub(sim, constant(t, m)), S(0)), push_scale));
  }
  return loss;
}

}  // namespace mil
