#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mil/attention.hpp"
#include "mil/error.hpp"
#include "mil/rng.hpp"
#include "mil/tape.hpp"
#include "mil/types.hpp"

namespace mil {

enum class AttentionMode { kExact, kNystrom };

inline const char* to_string(AttentionMode m) { return m == AttentionMode::kExact ? "exact" : "nystrom"; }

inline AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "exact") return AttentionMode::kExact;
  if (s == "nystrom") return AttentionMode::kNystrom;
  throw ValidationError("unknown attention mode '" + s + "'");
}

struct EncoderConfig {
  int input_width = 0;       // H
  int model_width = 512;     // D
  int block_count = 2;
  int head_count = 8;
  int landmark_count = 64;   // m_L
  double attn_dropout = 0.2;
  AttentionMode mode = AttentionMode::kNystrom;
  int pinv_iters = kDefaultPinvIters;

  int head_width() const { return model_width / head_count; }

  void validate() const {
    if (input_width < 1) throw ValidationError("encoder config: input_width must be >= 1");
    if (block_count < 1) throw ValidationError("encoder config: block_count must be >= 1");
    if (head_count < 1 || model_width % head_count != 0)
      throw ValidationError("encoder config: model_width must be divisible by head_count");
    if (landmark_count < 1) throw ValidationError("encoder config: landmark_count must be >= 1");
    if (attn_dropout < 0.0 || attn_dropout >= 1.0) throw ValidationError("encoder config: attn_dropout must be in [0, 1)");
    if (pinv_iters < 1) throw ValidationError("encoder config: pinv_iters must be >= 1");
  }
};

template <typename S>
struct BlockParams {
  MatX<S> norm1_gain, norm1_bias;
  MatX<S> wq, bq, wk, bk, wv, bv, wo, bo;
  MatX<S> norm2_gain, norm2_bias;
  MatX<S> ff1_w, ff1_b, ff2_w, ff2_b;
};

/// All learnable state: input projection, class token, encoder blocks, final
/// norm, and the classifier head. visit() fixes the declaration order used by
/// the optimizer and the checkpoint format.
template <typename S>
struct ModelParams {
  MatX<S> input_w, input_b;          // H x D, 1 x D
  MatX<S> class_token;               // 1 x D
  std::vector<BlockParams<S>> blocks;
  MatX<S> final_norm_gain, final_norm_bias;  // 1 x D
  MatX<S> head_w, head_b;            // D x C, 1 x C

  int class_count() const { return static_cast<int>(head_w.cols()); }
  int model_width() const { return static_cast<int>(class_token.cols()); }

  template <typename F>
  void visit(F&& f) {
    visit_impl(*this, f);
  }
  template <typename F>
  void visit(F&& f) const {
    visit_impl(*this, f);
  }

  std::size_t tensor_count() const {
    std::size_t n = 0;
    visit([&n](const std::string&, const MatX<S>&) { ++n; });
    return n;
  }

  bool all_finite() const {
    bool ok = true;
    visit([&ok](const std::string&, const MatX<S>& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  template <typename T>
  ModelParams<T> cast() const {
    ModelParams<T> out;
    out.input_w = input_w.template cast<T>();
    out.input_b = input_b.template cast<T>();
    out.class_token = class_token.template cast<T>();
    for (const auto& b : blocks) {
      BlockParams<T> ob;
      ob.norm1_gain = b.norm1_gain.template cast<T>();
      ob.norm1_bias = b.norm1_bias.template cast<T>();
      ob.wq = b.wq.template cast<T>();
      ob.bq = b.bq.template cast<T>();
      ob.wk = b.wk.template cast<T>();
      ob.bk = b.bk.template cast<T>();
      ob.wv = b.wv.template cast<T>();
      ob.bv = b.bv.template cast<T>();
      ob.wo = b.wo.template cast<T>();
      ob.bo = b.bo.template cast<T>();
      ob.norm2_gain = b.norm2_gain.template cast<T>();
      ob.norm2_bias = b.norm2_bias.template cast<T>();
      ob.ff1_w = b.ff1_w.template cast<T>();
      ob.ff1_b = b.ff1_b.template cast<T>();
      ob.ff2_w = b.ff2_w.template cast<T>();
      ob.ff2_b = b.ff2_b.template cast<T>();
      out.blocks.push_back(std::move(ob));
    }
    out.final_norm_gain = final_norm_gain.template cast<T>();
    out.final_norm_bias = final_norm_bias.template cast<T>();
    out.head_w = head_w.template cast<T>();
    out.head_b = head_b.template cast<T>();
    return out;
  }

 private:
  template <typename Self, typename F>
  static void visit_impl(Self& self, F& f) {
    f("input.w", self.input_w);
    f("input.b", self.input_b);
    f("class_token", self.class_token);
    for (std::size_t i = 0; i < self.blocks.size(); ++i) {
      const std::string p = "block" + std::to_string(i) + ".";
      auto& b = self.blocks[i];
      f(p + "norm1.gain", b.norm1_gain);
      f(p + "norm1.bias", b.norm1_bias);
      f(p + "attn.wq", b.wq);
      f(p + "attn.bq", b.bq);
      f(p + "attn.wk", b.wk);
      f(p + "attn.bk", b.bk);
      f(p + "attn.wv", b.wv);
      f(p + "attn.bv", b.bv);
      f(p + "attn.wo", b.wo);
      f(p + "attn.bo", b.bo);
      f(p + "norm2.gain", b.norm2_gain);
      f(p + "norm2.bias", b.norm2_bias);
      f(p + "ff.w1", b.ff1_w);
      f(p + "ff.b1", b.ff1_b);
      f(p + "ff.w2", b.ff2_w);
      f(p + "ff.b2", b.ff2_b);
    }
    f("final_norm.gain", self.final_norm_gain);
    f("final_norm.bias", self.final_norm_bias);
    f("head.w", self.head_w);
    f("head.b", self.head_b);
  }
};

namespace detail {

template <typename S>
MatX<S> gaussian(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
  MatX<S> m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = static_cast<S>(std * rng.normal());
  return m;
}

}  // namespace detail

/// Fan-in Gaussian projections, zero biases, unit norm gains; the class token
/// and classifier head use a small 0.02 Gaussian so that fresh models emit
/// near-uniform probabilities.
template <typename S>
ModelParams<S> init_params(const EncoderConfig& cfg, int class_count, Rng& rng) {
  cfg.validate();
  if (class_count < 2) throw ValidationError("init_params: class_count must be >= 2");
  const int d = cfg.model_width;
  const int ff = 2 * d;
  ModelParams<S> p;
  p.input_w = detail::gaussian<S>(cfg.input_width, d, 1.0 / std::sqrt(double(cfg.input_width)), rng);
  p.input_b = MatX<S>::Zero(1, d);
  p.class_token = detail::gaussian<S>(1, d, 0.02, rng);
  for (int i = 0; i < cfg.block_count; ++i) {
    BlockParams<S> b;
    b.norm1_gain = MatX<S>::Ones(1, d);
    b.norm1_bias = MatX<S>::Zero(1, d);
    const double proj_std = 1.0 / std::sqrt(double(d));
    b.wq = detail::gaussian<S>(d, d, proj_std, rng);
    b.bq = MatX<S>::Zero(1, d);
    b.wk = detail::gaussian<S>(d, d, proj_std, rng);
    b.bk = MatX<S>::Zero(1, d);
    b.wv = detail::gaussian<S>(d, d, proj_std, rng);
    b.bv = MatX<S>::Zero(1, d);
    b.wo = detail::gaussian<S>(d, d, proj_std, rng);
    b.bo = MatX<S>::Zero(1, d);
    b.norm2_gain = MatX<S>::Ones(1, d);
    b.norm2_bias = MatX<S>::Zero(1, d);
    b.ff1_w = detail::gaussian<S>(d, ff, proj_std, rng);
    b.ff1_b = MatX<S>::Zero(1, ff);
    b.ff2_w = detail::gaussian<S>(ff, d, 1.0 / std::sqrt(double(ff)), rng);
    b.ff2_b = MatX<S>::Zero(1, d);
    p.blocks.push_back(std::move(b));
  }
  p.final_norm_gain = MatX<S>::Ones(1, d);
  p.final_norm_bias = MatX<S>::Zero(1, d);
  p.head_w = detail::gaussian<S>(d, class_count, 0.02, rng);
  p.head_b = MatX<S>::Zero(1, class_count);
  return p;
}

/// Head-averaged class-token attention over instances: entry 0 (the token's
/// self-attention) is removed, negatives are clamped (possible only in
/// Nystrom mode), and the rest renormalized to sum 1. Falls back to uniform
/// if the clamped row has no mass.
template <typename S>
VecX<S> normalize_attention_row(RowX<S> row) {
  VecX<S> alpha = row.segment(1, row.cols() - 1).transpose().cwiseMax(S(0));
  const S mass = alpha.sum();
  if (mass > S(0))
    alpha /= mass;
  else
    alpha.setConstant(S(1) / static_cast<S>(alpha.size()));
  return alpha;
}

template <typename S>
VecX<S> extract_attention(const std::vector<MatX<S>>& head_attention) {
  RowX<S> row = RowX<S>::Zero(head_attention[0].cols());
  for (const auto& attn : head_attention) row += attn.row(0);
  row /= static_cast<S>(head_attention.size());
  return normalize_attention_row<S>(std::move(row));
}

template <typename S>
VecX<S> extract_attention(const std::vector<NystromFactors<S>>& head_factors) {
  RowX<S> row = RowX<S>::Zero(head_factors[0].key_kernel.cols());
  for (const auto& f : head_factors) row += f.row(0);
  row /= static_cast<S>(head_factors.size());
  return normalize_attention_row<S>(std::move(row));
}

// ---------------------------------------------------------------------------
// Tape forward pass
// ---------------------------------------------------------------------------

template <typename S>
struct ParamVars {
  std::vector<TapeVar<S>> flat;  // visit order
};

template <typename S>
ParamVars<S> push_params(Tape<S>& tape, const ModelParams<S>& params) {
  ParamVars<S> pv;
  params.visit([&](const std::string&, const MatX<S>& m) { pv.flat.push_back(tape.leaf(m)); });
  return pv;
}

/// One differentiable forward evaluation of a bag. Owns the tape on the heap
/// so the pass can be moved while Vars keep pointing at it; gradient
/// extraction walks param_vars in ModelParams::visit order.
template <typename S>
struct ForwardPass {
  std::unique_ptr<Tape<S>> tape = std::make_unique<Tape<S>>();
  std::vector<TapeVar<S>> param_vars;
  TapeVar<S> cls_state;        // 1 x D
  TapeVar<S> instance_states;  // N x D
  TapeVar<S> logits;           // 1 x C
  TapeVar<S> bag_embedding;    // 1 x D
  VecX<S> attention;           // alpha over instances, sums to 1

  Tape<S>& graph() { return *tape; }
};

namespace detail {

template <typename S>
TapeVar<S> newton_schulz_pinv_on_tape(TapeVar<S> a, int iters) {
  Tape<S>& t = *a.tape();
  const Eigen::Index m = a.value().rows();
  auto ones_row = t.leaf(MatX<S>::Ones(1, m));
  auto ones_col = t.leaf(MatX<S>::Ones(m, 1));
  auto abs_a = cwise_abs(a);
  auto n1 = max_entry(matmul(ones_row, abs_a));
  auto ninf = max_entry(matmul(abs_a, ones_col));
  auto denom = cwise_mul(n1, ninf);
  auto init_scale = cwise_div(constant(t, S(1)), denom);
  auto z = mul_scalar(transpose(a), init_scale);
  auto eye7 = t.leaf(MatX<S>(S(7) * MatX<S>::Identity(m, m)));
  auto eye13 = t.leaf(MatX<S>(S(13) * MatX<S>::Identity(m, m)));
  auto eye15 = t.leaf(MatX<S>(S(15) * MatX<S>::Identity(m, m)));
  for (int i = 0; i < iters; ++i) {
    auto az = matmul(a, z);
    auto inner = sub(eye7, az);
    auto mid = sub(eye15, matmul(az, inner));
    auto outer = sub(eye13, matmul(az, mid));
    z = scale(matmul(z, outer), S(0.25));
  }
  return z;
}

template <typename S>
struct HeadAttention {
  TapeVar<S> out;  // S x dh
  // Values recorded for alpha extraction (pre-dropout).
  MatX<S> exact_attn;
  NystromFactors<S> factors;
};

template <typename S>
HeadAttention<S> attention_head(TapeVar<S> q, TapeVar<S> k, TapeVar<S> v, const EncoderConfig& cfg, S att_scale,
                                Rng* dropout_rng) {
  Tape<S>& t = *q.tape();
  const Eigen::Index s = q.value().rows();
  HeadAttention<S> h;
  if (cfg.mode == AttentionMode::kExact) {
    auto attn = softmax_rows(scale(matmul(q, transpose(k)), att_scale));
    h.exact_attn = attn.value();
    if (dropout_rng && cfg.attn_dropout > 0.0) attn = dropout(attn, cfg.attn_dropout, *dropout_rng);
    h.out = matmul(attn, v);
    return h;
  }
  const Eigen::Index m = std::min<Eigen::Index>(cfg.landmark_count, s);
  const Eigen::Index seg = (s + m - 1) / m;
  const Eigen::Index padded = m * seg;
  auto q_land = segment_mean_rows(pad_rows(q, padded), m);
  auto k_land = segment_mean_rows(pad_rows(k, padded), m);
  auto f1 = softmax_rows(scale(matmul(q, transpose(k_land)), att_scale));
  auto f2 = softmax_rows(scale(matmul(q_land, transpose(k_land)), att_scale));
  auto f3 = softmax_rows(scale(matmul(q_land, transpose(k)), att_scale));
  auto pinv = newton_schulz_pinv_on_tape(f2, cfg.pinv_iters);
  h.factors = NystromFactors<S>{f1.value(), pinv.value(), f3.value()};
  if (dropout_rng && cfg.attn_dropout > 0.0) f1 = dropout(f1, cfg.attn_dropout, *dropout_rng);
  h.out = matmul(f1, matmul(pinv, matmul(f3, v)));
  return h;
}

}  // namespace detail

/// Builds the full differentiable graph: input projection, class token,
/// pre-norm attention/feed-forward blocks, final norm, classifier logits and
/// mean-pooled bag embedding. Dropout is active only when a dropout rng is
/// supplied (training mode).
template <typename S>
ForwardPass<S> forward_pass(const MatX<S>& x, const ModelParams<S>& params, const EncoderConfig& cfg,
                            Rng* dropout_rng = nullptr) {
  cfg.validate();
  if (x.rows() < 1) throw ValidationError("forward_pass: bag must contain at least one instance");
  if (x.cols() != cfg.input_width)
    throw ValidationError("forward_pass: feature width " + std::to_string(x.cols()) + " != configured " +
                          std::to_string(cfg.input_width));
  if (params.model_width() != cfg.model_width || params.class_count() < 2)
    throw ValidationError("forward_pass: params inconsistent with config");

  ForwardPass<S> f;
  Tape<S>& t = f.graph();
  ParamVars<S> pv = push_params(t, params);
  f.param_vars = pv.flat;

  // Indices into visit order; must mirror ModelParams::visit.
  std::size_t at = 0;
  auto next = [&]() { return pv.flat[at++]; };
  auto input_w = next(), input_b = next(), class_token = next();

  const Eigen::Index n = x.rows();
  auto instances = affine(t.leaf(x), input_w, input_b);
  auto seq = concat_rows(class_token, instances);
  const S att_scale = S(1) / std::sqrt(static_cast<S>(cfg.head_width()));

  std::vector<MatX<S>> last_exact;
  std::vector<NystromFactors<S>> last_factors;
  for (int blk = 0; blk < cfg.block_count; ++blk) {
    auto n1g = next(), n1b = next();
    auto wq = next(), bq = next(), wk = next(), bk = next(), wv = next(), bv = next(), wo = next(), bo = next();
    auto n2g = next(), n2b = next();
    auto f1w = next(), f1b = next(), f2w = next(), f2b = next();

    auto normed = layer_norm_rows(seq, n1g, n1b);
    auto q = affine(normed, wq, bq);
    auto k = affine(normed, wk, bk);
    auto v = affine(normed, wv, bv);
    const int dh = cfg.head_width();
    std::vector<TapeVar<S>> head_outs;
    const bool last_block = blk == cfg.block_count - 1;
    if (last_block) {
      last_exact.clear();
      last_factors.clear();
    }
    for (int hd = 0; hd < cfg.head_count; ++hd) {
      auto qh = slice_cols(q, hd * dh, dh);
      auto kh = slice_cols(k, hd * dh, dh);
      auto vh = slice_cols(v, hd * dh, dh);
      auto head = detail::attention_head(qh, kh, vh, cfg, att_scale, dropout_rng);
      head_outs.push_back(head.out);
      if (last_block) {
        if (cfg.mode == AttentionMode::kExact)
          last_exact.push_back(std::move(head.exact_attn));
        else
          last_factors.push_back(std::move(head.factors));
      }
    }
    auto merged = affine(concat_cols(head_outs), wo, bo);
    seq = add(seq, merged);

    auto normed2 = layer_norm_rows(seq, n2g, n2b);
    auto ff = affine(gelu(affine(normed2, f1w, f1b)), f2w, f2b);
    seq = add(seq, ff);
  }

  auto final_g = next(), final_b = next();
  auto head_w = next(), head_b = next();
  seq = layer_norm_rows(seq, final_g, final_b);

  f.cls_state = slice_rows(seq, 0, 1);
  f.instance_states = slice_rows(seq, 1, n);
  f.logits = affine(f.cls_state, head_w, head_b);
  f.bag_embedding = mean_rows(f.instance_states);
  f.attention = cfg.mode == AttentionMode::kExact ? extract_attention<S>(last_exact) : extract_attention<S>(last_factors);

  if (!f.logits.value().allFinite() || !f.bag_embedding.value().allFinite())
    throw ValidationError("forward_pass: non-finite activations");
  return f;
}

// ---------------------------------------------------------------------------
// Evaluation API
// ---------------------------------------------------------------------------

template <typename S>
struct EncoderOutput {
  RowX<S> cls_state;        // z_cls, 1 x D
  MatX<S> instance_states;  // N x D
  VecX<S> attention;        // alpha, length N
};

template <typename S>
EncoderOutput<S> encode(const MatX<S>& x, const ModelParams<S>& params, const EncoderConfig& cfg,
                        Rng* dropout_rng = nullptr) {
  ForwardPass<S> f = forward_pass(x, params, cfg, dropout_rng);
  return {f.cls_state.value().row(0), f.instance_states.value(), f.attention};
}

/// Softmax of the affine head: p = softmax(z W + b).
template <typename S>
VecX<S> classify(const RowX<S>& cls_state, const MatX<S>& head_w, const MatX<S>& head_b) {
  RowX<S> logits = cls_state * head_w + head_b.row(0);
  const S m = logits.maxCoeff();
  VecX<S> p = (logits.array() - m).exp().transpose();
  p /= p.sum();
  return p;
}

/// Mean over encoder instance outputs: b = (1/N) sum z_i.
template <typename S>
RowX<S> pool_bag_embedding(const MatX<S>& instance_states) {
  if (instance_states.rows() < 1) throw ValidationError("pool_bag_embedding: empty bag");
  return instance_states.colwise().mean();
}

template <typename S>
struct BagOutputs {
  VecX<S> probabilities;   // p, sums to 1
  RowX<S> bag_embedding;   // b, 1 x D
  VecX<S> attention;       // alpha, length N
};

/// p, b, alpha for one bag: encode, classify the class-token state, and
/// mean-pool the instance states.
template <typename S>
BagOutputs<S> forward(const MatX<S>& x, const ModelParams<S>& params, const EncoderConfig& cfg,
                      Rng* dropout_rng = nullptr) {
  EncoderOutput<S> enc = encode(x, params, cfg, dropout_rng);
  return {classify<S>(enc.cls_state, params.head_w, params.head_b), pool_bag_embedding<S>(enc.instance_states),
          std::move(enc.attention)};
}

}  // namespace mil
