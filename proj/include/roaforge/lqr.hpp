#pragma once

#include "roaforge/common.hpp"
#include "roaforge/dynamics.hpp"

namespace roaforge::lqr {

struct LinearModel {
  Mat A;
  Mat B;
};

struct LqrSolution {
  Mat P;  // symmetric positive definite
  Mat K;  // R^-1 B^T P
  double riccati_residual = 0.0;
};

/// Jacobians of the nominal field at (0, u0) via central differences (h = 1e-6).
LinearModel linearize(const dynamics::SystemSpec& spec);

/// Newton-Kleinman iteration from a pole-placement stabilizing gain.
/// Throws std::runtime_error when no stabilizing solution is reached.
LqrSolution solve_care(const LinearModel& model, const Mat& Q, const Mat& R);

/// Characteristic polynomial coefficients of A (monic, degree n), via
/// Faddeev-LeVerrier.
Vec characteristic_polynomial(const Mat& A);

/// Routh array test: true iff all roots of the monic polynomial lie in the
/// open left half plane. Supports degree <= 4.
bool routh_hurwitz_stable(const Vec& monic_coeffs);

bool is_hurwitz(const Mat& A);

}  // namespace roaforge::lqr
