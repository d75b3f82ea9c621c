#include "roaforge/lqr.hpp"

#include <cmath>
#include <limits>

namespace roaforge::lqr {

namespace {

/// Solves A^T P + P A = -Q for symmetric P via Kronecker vectorization;
/// fine for the n <= 4 plants handled here.
Mat solve_lyapunov(const Mat& A, const Mat& Q) {
  const Eigen::Index n = A.rows();
  Mat big = Mat::Zero(n * n, n * n);
  const Mat At = A.transpose();
  // vec(A^T P + P A) = (I (x) A^T + A^T (x) I) vec(P), column-major vec.
  for (Eigen::Index i = 0; i < n; ++i) {
    big.block(i * n, i * n, n, n) += At;
    for (Eigen::Index j = 0; j < n; ++j) {
      for (Eigen::Index k = 0; k < n; ++k) {
        big(j * n + k, i * n + k) += At(j, i);
      }
    }
  }
  Vec rhs(n * n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) rhs(j * n + i) = -Q(i, j);
  Vec sol = big.fullPivLu().solve(rhs);
  Mat P(n, n);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < n; ++i) P(i, j) = sol(j * n + i);
  return 0.5 * (P + P.transpose());
}

/// Ackermann's formula for single-input pole placement; places poles at
/// -1, -2, ..., -n. Used only to seed Newton-Kleinman with a stabilizing gain.
Mat stabilizing_gain(const Mat& A, const Mat& B) {
  const Eigen::Index n = A.rows();
  if (is_hurwitz(A)) return Mat::Zero(B.cols(), n);
  require(B.cols() == 1, "pole-placement seed requires a single-input system");

  Mat ctrb(n, n);
  Mat col = B;
  for (Eigen::Index i = 0; i < n; ++i) {
    ctrb.col(i) = col;
    col = A * col;
  }
  Eigen::FullPivLU<Mat> lu(ctrb);
  require(lu.isInvertible(), "system is not controllable; cannot seed a stabilizing gain");

  // Desired characteristic polynomial prod_k (s + k), coeffs(i) = coeff of s^i.
  Vec coeffs = Vec::Zero(n + 1);
  coeffs(0) = 1.0;
  for (Eigen::Index k = 1; k <= n; ++k) {
    Vec next = Vec::Zero(n + 1);
    for (Eigen::Index i = 0; i < k; ++i) {
      next(i) += coeffs(i) * static_cast<double>(k);
      next(i + 1) += coeffs(i);
    }
    coeffs = next;
  }
  Mat pA = Mat::Zero(n, n);
  Mat Apow = Mat::Identity(n, n);
  for (Eigen::Index i = 0; i <= n; ++i) {
    pA += coeffs(i) * Apow;
    Apow = A * Apow;
  }
  Mat en = Mat::Zero(1, n);
  en(0, n - 1) = 1.0;
  return en * lu.inverse() * pA;
}

}  // namespace

LinearModel linearize(const dynamics::SystemSpec& spec) {
  const double h = 1e-6;
  const Vec x0 = Vec::Zero(spec.n);
  const Vec u0 = spec.equilibrium_input;
  LinearModel lm;
  lm.A.resize(spec.n, spec.n);
  lm.B.resize(spec.n, spec.m);
  for (int i = 0; i < spec.n; ++i) {
    Vec xp = x0, xm = x0;
    xp(i) += h;
    xm(i) -= h;
    lm.A.col(i) = (dynamics::eval_field(spec, dynamics::Field::nominal, xp, u0) -
                   dynamics::eval_field(spec, dynamics::Field::nominal, xm, u0)) /
                  (2.0 * h);
  }
  for (int j = 0; j < spec.m; ++j) {
    Vec up = u0, um = u0;
    up(j) += h;
    um(j) -= h;
    lm.B.col(j) = (dynamics::eval_field(spec, dynamics::Field::nominal, x0, up) -
                   dynamics::eval_field(spec, dynamics::Field::nominal, x0, um)) /
                  (2.0 * h);
  }
  require(lm.A.allFinite() && lm.B.allFinite(), "non-finite Jacobian entries");
  return lm;
}

Vec characteristic_polynomial(const Mat& A) {
  // Faddeev-LeVerrier: returns monic coefficients [1, c_{n-1}, ..., c_0]
  // for s^n + c_{n-1} s^{n-1} + ... + c_0.
  const Eigen::Index n = A.rows();
  Vec coeffs(n + 1);
  coeffs(0) = 1.0;
  Mat Mk = Mat::Zero(n, n);
  double ck = 1.0;
  for (Eigen::Index k = 1; k <= n; ++k) {
    Mk = A * Mk + ck * Mat::Identity(n, n);
    ck = -(A * Mk).trace() / static_cast<double>(k);
    coeffs(k) = ck;
  }
  return coeffs;
}

bool routh_hurwitz_stable(const Vec& monic) {
  const int n = static_cast<int>(monic.size()) - 1;
  require(n >= 1 && n <= 4, "Routh test implemented for degree 1..4");
  for (int i = 0; i <= n; ++i) {
    if (!std::isfinite(monic(i))) return false;
  }
  // Necessary: all coefficients strictly positive (monic leading 1).
  for (int i = 1; i <= n; ++i) {
    if (monic(i) <= 0.0) return false;
  }
  if (n <= 2) return true;
  const double a1 = monic(1), a2 = monic(2), a3 = monic(3);
  if (n == 3) return a1 * a2 > a3;
  const double a4 = monic(4);
  // Degree 4 Routh conditions beyond positivity.
  const double b1 = a1 * a2 - a3;
  if (b1 <= 0.0) return false;
  return b1 * a3 > a1 * a1 * a4;
}

bool is_hurwitz(const Mat& A) { return routh_hurwitz_stable(characteristic_polynomial(A)); }

LqrSolution solve_care(const LinearModel& model, const Mat& Q, const Mat& R) {
  const Eigen::Index n = model.A.rows();
  require(model.B.rows() == n, "A/B row mismatch");
  require(Q.rows() == n && Q.cols() == n, "Q shape mismatch");
  require(R.rows() == model.B.cols() && R.cols() == model.B.cols(), "R shape mismatch");
  require((Q - Q.transpose()).lpNorm<Eigen::Infinity>() < 1e-12, "Q must be symmetric");
  require((R - R.transpose()).lpNorm<Eigen::Infinity>() < 1e-12, "R must be symmetric");

  const Mat Rinv = R.fullPivLu().inverse();
  auto residual = [&](const Mat& P) {
    return (model.A.transpose() * P + P * model.A -
            P * model.B * Rinv * model.B.transpose() * P + Q)
        .norm();
  };

  Mat K = stabilizing_gain(model.A, model.B);
  Mat P;
  double res = std::numeric_limits<double>::infinity();
  const int max_iterations = 100;
  for (int it = 0; it < max_iterations; ++it) {
    const Mat Acl = model.A - model.B * K;
    if (!is_hurwitz(Acl)) {
      throw std::runtime_error("solve_care: closed loop lost stability during iteration");
    }
    P = solve_lyapunov(Acl, Q + K.transpose() * R * K);
    K = Rinv * model.B.transpose() * P;
    res = residual(P);
    if (res <= 1e-10) break;
  }
  if (!(res <= 1e-8)) {
    throw std::runtime_error("solve_care: Newton-Kleinman failed to converge (residual " +
                             std::to_string(res) + "); (A,B) may not be stabilizable");
  }
  if (!is_hurwitz(model.A - model.B * K)) {
    throw std::runtime_error("solve_care: final closed loop is not Hurwitz");
  }
  LqrSolution sol;
  sol.P = 0.5 * (P + P.transpose());
  sol.K = K;
  sol.riccati_residual = res;
  return sol;
}

}  // namespace roaforge::lqr
