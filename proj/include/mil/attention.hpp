#pragma once

#include <cmath>
#include <utility>

#include "mil/error.hpp"
#include "mil/types.hpp"

namespace mil {

namespace detail {

template <typename S>
MatX<S> softmax_rows_plain(MatX<S> x) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S m = x.row(r).maxCoeff();
    x.row(r) = (x.row(r).array() - m).exp();
    x.row(r) /= x.row(r).sum();
  }
  return x;
}

}  // namespace detail

/// Row-softmax attention: softmax(Q K^T * scale) V. Returns outputs and the
/// post-softmax attention matrix, whose rows sum to one.
template <typename S>
std::pair<MatX<S>, MatX<S>> exact_attention(const MatX<S>& q, const MatX<S>& k, const MatX<S>& v, S scale) {
  MatX<S> attn = detail::softmax_rows_plain<S>(q * k.transpose() * scale);
  return {attn * v, std::move(attn)};
}

/// Newton-Schulz pseudo-inverse with a fixed iteration count, seeded with
/// A^T / (||A||_1 ||A||_inf). The count is a spectral cutoff: low counts skip
/// near-null directions of ill-conditioned kernels, high counts converge to
/// the true pseudo-inverse.
template <typename S>
MatX<S> newton_schulz_pinv(const MatX<S>& a, int iters) {
  const S n1 = a.cwiseAbs().colwise().sum().maxCoeff();
  const S ninf = a.cwiseAbs().rowwise().sum().maxCoeff();
  MatX<S> z = a.transpose() / (n1 * ninf);
  const MatX<S> eye = MatX<S>::Identity(a.rows(), a.cols());
  for (int i = 0; i < iters; ++i) {
    const MatX<S> az = a * z;
    z = S(0.25) * z * (S(13) * eye - az * (S(15) * eye - az * (S(7) * eye - az)));
  }
  return z;
}

inline constexpr int kDefaultPinvIters = 6;

/// The three Nystrom kernel factors and the pinv of the middle one.
template <typename S>
struct NystromFactors {
  MatX<S> query_kernel;      // S x m, softmax(Q Kt^T * scale)
  MatX<S> landmark_pinv;     // m x m
  MatX<S> key_kernel;        // m x S, softmax(Qt K^T * scale)

  /// Class-token attention row reconstructed from the factor product.
  RowX<S> row(Eigen::Index i) const { return query_kernel.row(i) * landmark_pinv * key_kernel; }
};

/// Nystrom-approximated attention. Landmarks are contiguous segment means of
/// Q and K zero-padded to a multiple of the landmark count; the padding only
/// enters the landmark means, so output rows need no stripping. The landmark
/// count is clamped to the sequence length, making m_L >= S exact up to the
/// pseudo-inverse.
template <typename S>
std::pair<MatX<S>, NystromFactors<S>> nystrom_attention(const MatX<S>& q, const MatX<S>& k, const MatX<S>& v,
                                                        int landmark_count, S scale,
                                                        int pinv_iters = kDefaultPinvIters) {
  const Eigen::Index s = q.rows();
  if (s < 1 || landmark_count < 1) throw ValidationError("nystrom_attention: empty sequence or landmarks");
  const Eigen::Index m = std::min<Eigen::Index>(landmark_count, s);
  const Eigen::Index seg = (s + m - 1) / m;
  const Eigen::Index padded = m * seg;

  MatX<S> q_land = MatX<S>::Zero(m, q.cols());
  MatX<S> k_land = MatX<S>::Zero(m, k.cols());
  for (Eigen::Index i = 0; i < padded; ++i) {
    if (i < s) {
      q_land.row(i / seg) += q.row(i);
      k_land.row(i / seg) += k.row(i);
    }
  }
  q_land /= static_cast<S>(seg);
  k_land /= static_cast<S>(seg);

  NystromFactors<S> f;
  f.query_kernel = detail::softmax_rows_plain<S>(q * k_land.transpose() * scale);
  MatX<S> mid = detail::softmax_rows_plain<S>(q_land * k_land.transpose() * scale);
  f.key_kernel = detail::softmax_rows_plain<S>(q_land * k.transpose() * scale);
  f.landmark_pinv = newton_schulz_pinv(mid, pinv_iters);

  MatX<S> out = f.query_kernel * (f.landmark_pinv * (f.key_kernel * v));
  if (!out.allFinite()) throw ValidationError("nystrom_attention: non-finite output (check scale)");
  return {std::move(out), std::move(f)};
}

}  // namespace mil
