#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <functional>

#include "mil/rng.hpp"
#include "mil/tape.hpp"

using namespace mil;

namespace {

// Central-difference gradient of a scalar-valued function of one matrix,
// compared against the tape gradient. The builder must route `x` through the
// op under test and reduce to 1x1.
void check_grad(const MatXd& x0, const std::function<TapeVar<double>(Tape<double>&, TapeVar<double>)>& build,
                double tol = 1e-7) {
  Tape<double> tape;
  auto x = tape.leaf(x0);
  auto loss = build(tape, x);
  REQUIRE(loss.value().size() == 1);
  tape.backward(loss);
  const MatXd analytic = x.grad();

  const double h = 1e-5;
  for (Eigen::Index r = 0; r < x0.rows(); ++r) {
    for (Eigen::Index c = 0; c < x0.cols(); ++c) {
      MatXd xp = x0, xm = x0;
      xp(r, c) += h;
      xm(r, c) -= h;
      Tape<double> tp, tm;
      const double fp = build(tp, tp.leaf(xp)).value()(0, 0);
      const double fm = build(tm, tm.leaf(xm)).value()(0, 0);
      const double fd = (fp - fm) / (2 * h);
      CHECK(analytic(r, c) == doctest::Approx(fd).epsilon(tol).scale(1.0));
    }
  }
}

MatXd random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  MatXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * rng.normal();
  return m;
}

// Reduce any matrix to 1x1 with a fixed weighting so every entry matters.
TapeVar<double> weighted_sum(Tape<double>& t, TapeVar<double> v) {
  MatXd w(v.value().rows(), v.value().cols());
  for (Eigen::Index i = 0; i < w.rows(); ++i)
    for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = 0.3 + 0.1 * static_cast<double>(i + 2 * j);
  return dot(v, t.leaf(w));
}

}  // namespace

TEST_CASE("forward values of basic ops") {
  Tape<double> t;
  MatXd a(2, 2), b(2, 2);
  a << 1, 2, 3, 4;
  b << 5, 6, 7, 8;
  auto va = t.leaf(a), vb = t.leaf(b);
  CHECK(add(va, vb).value()(1, 1) == 12);
  CHECK(sub(va, vb).value()(0, 0) == -4);
  CHECK(matmul(va, vb).value()(0, 0) == 19);
  CHECK(transpose(va).value()(0, 1) == 3);
  CHECK(mean_rows(va).value()(0, 0) == 2);
  CHECK(dot(va, vb).value()(0, 0) == 5 + 12 + 21 + 32);
}

TEST_CASE("softmax rows sum to one and match direct evaluation") {
  Rng rng(7);
  Tape<double> t;
  MatXd x = random_mat(3, 5, rng);
  auto s = softmax_rows(t.leaf(x));
  for (int r = 0; r < 3; ++r) {
    CHECK(s.value().row(r).sum() == doctest::Approx(1.0));
    const double denom = (x.row(r).array() - x.row(r).maxCoeff()).exp().sum();
    for (int c = 0; c < 5; ++c)
      CHECK(s.value()(r, c) ==
            doctest::Approx(std::exp(x(r, c) - x.row(r).maxCoeff()) / denom));
  }
}

TEST_CASE("gradients match central differences") {
  Rng rng(13);

  SUBCASE("matmul") {
    MatXd x = random_mat(3, 4, rng);
    MatXd other = random_mat(4, 2, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return weighted_sum(t, matmul(v, t.leaf(other))); });
  }
  SUBCASE("affine") {
    MatXd x = random_mat(3, 4, rng);
    MatXd w = random_mat(4, 2, rng), b = random_mat(1, 2, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) {
      return weighted_sum(t, affine(v, t.leaf(w), t.leaf(b)));
    });
    // also through the weight
    check_grad(w, [&](Tape<double>& t, TapeVar<double> v) {
      return weighted_sum(t, affine(t.leaf(x), v, t.leaf(b)));
    });
  }
  SUBCASE("softmax_rows") {
    MatXd x = random_mat(3, 5, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return weighted_sum(t, softmax_rows(v)); });
  }
  SUBCASE("layer_norm_rows") {
    MatXd x = random_mat(3, 6, rng);
    MatXd g = random_mat(1, 6, rng), b = random_mat(1, 6, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) {
      return weighted_sum(t, layer_norm_rows(v, t.leaf(g), t.leaf(b)));
    });
    check_grad(g, [&](Tape<double>& t, TapeVar<double> v) {
      return weighted_sum(t, layer_norm_rows(t.leaf(x), v, t.leaf(b)));
    });
  }
  SUBCASE("gelu") {
    MatXd x = random_mat(2, 4, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return weighted_sum(t, gelu(v)); });
  }
  SUBCASE("shape ops") {
    MatXd x = random_mat(4, 3, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) {
      auto top = slice_rows(v, 0, 2);
      auto rest = slice_rows(v, 2, 2);
      return weighted_sum(t, concat_rows(rest, top));
    });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) {
      std::vector<TapeVar<double>> parts{slice_cols(v, 0, 1), slice_cols(v, 1, 2)};
      return weighted_sum(t, concat_cols(parts));
    });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return weighted_sum(t, pad_rows(v, 6)); });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return weighted_sum(t, segment_mean_rows(v, 2)); });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return weighted_sum(t, mean_rows(v)); });
  }
  SUBCASE("scalar helpers") {
    MatXd x = random_mat(1, 5, rng);
    MatXd y = random_mat(1, 5, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return l2_norm(v); });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) {
      return cwise_div(dot(v, t.leaf(y)), max_with(l2_norm(v), 1e-8));
    });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return weighted_sum(t, cwise_abs(v)); });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) { return max_entry(v); });
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) {
      return mul_scalar(dot(v, v), constant(t, 0.7));
    });
  }
  SUBCASE("cross entropy from logits") {
    MatXd logits = random_mat(1, 4, rng);
    check_grad(logits, [&](Tape<double>& t, TapeVar<double> v) { return cross_entropy_from_logits(v, 2); });
  }
  SUBCASE("fanout accumulates") {
    MatXd x = random_mat(2, 3, rng);
    check_grad(x, [&](Tape<double>& t, TapeVar<double> v) {
      auto y = add(cwise_mul(v, v), scale(v, 0.5));
      return weighted_sum(t, y);
    });
  }
}

TEST_CASE("dropout scales kept entries and zeroes dropped ones") {
  Rng rng(3);
  Tape<double> t;
  MatXd x = MatXd::Ones(8, 8);
  auto d = dropout(t.leaf(x), 0.25, rng);
  int zeros = 0;
  for (Eigen::Index r = 0; r < 8; ++r)
    for (Eigen::Index c = 0; c < 8; ++c) {
      const double v = d.value()(r, c);
      CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
      zeros += v == 0.0;
    }
  CHECK(zeros > 0);
  CHECK(zeros < 64);
  auto loss = dot(d, t.leaf(MatXd::Ones(8, 8)));
  t.backward(loss);
  // Gradient pattern mirrors the mask.
  for (Eigen::Index r = 0; r < 8; ++r)
    for (Eigen::Index c = 0; c < 8; ++c)
      CHECK(t.value_of(d.id())(r, c) == doctest::Approx(x.coeff(r, c) == 0.0 ? 0.0 : d.value()(r, c)));
}

TEST_CASE("cross entropy from logits equals -log softmax") {
  Tape<double> t;
  MatXd logits(1, 3);
  logits << 1.0, 2.0, 3.0;
  auto ce = cross_entropy_from_logits(t.leaf(logits), 0);
  const double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(ce.value()(0, 0) == doctest::Approx(-std::log(std::exp(1.0) / denom)));
}
