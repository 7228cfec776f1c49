#pragma once

#include <complex>

#include "cvsim/solvers.hpp"

namespace cvsim {

using Complex = std::complex<double>;
using Vector6c = Eigen::Matrix<Complex, 6, 1>;
using Matrix6c = Eigen::Matrix<Complex, 6, 6>;

// Dense nonsymmetric eigendecomposition of the 6x6 system matrix:
// balancing, Householder reduction to Hessenberg form, complex
// Wilkinson-shifted QR with deflation, then inverse iteration for the
// eigenvectors. Self-contained so results can be cross-checked against an
// independent characteristic-polynomial route in the tests.
struct EigenDecomposition {
  Vector6c values;    // sorted by descending |Re|
  Matrix6c vectors;   // unit columns; largest component rotated real-positive
  double max_residual = 0.0;  // max_i |A q_i - lambda_i q_i|_2
};

EigenDecomposition eigen6(const Matrix6& a);

// max |Re| over min |Re|. Eigenvalues with |Re| < tol are treated as
// numerically zero: the denominator falls back to the smallest live |Re|
// plus tol. When every eigenvalue sits below tol the ratio degenerates
// to 1.
struct StiffnessRatio {
  double value = 1.0;
  bool degenerate = false;
};

StiffnessRatio stiffness_ratio(const Vector6c& values, double tol = 1e-14);

double spectral_radius(const Vector6c& values);

// R C_j C_k / (C_j + C_k): relaxation constant of two capacitors coupled by
// a resistor, the analytic counterpart of the fast eigenvalues.
double rc_constant(double r, double c_j, double c_k);

struct StiffnessExtremum {
  double t = 0.0;
  double sr = 1.0;
  Vector6c values;
  Matrix6c vectors;
};

struct StiffnessScan {
  VectorXd t;
  MatrixXd re;            // n x 6, sorted per row by descending |Re|
  MatrixXd im;
  VectorXd sr;
  VectorXd rho;           // spectral radius
  bool any_degenerate = false;
  StiffnessExtremum sr_max;
  StiffnessExtremum sr_min;
  double tau1 = 0.0;      // 1/|Re| of the two fastest modes at the SR peak
  double tau2 = 0.0;
};

// Eigenstructure of A(t, P(t)) along the final `window_cycles` beats of a
// converged simulation.
StiffnessScan stiffness_scan(const ParameterVector& v, const SolverConfig& cfg,
                             int window_cycles = 2);

}  // namespace cvsim
