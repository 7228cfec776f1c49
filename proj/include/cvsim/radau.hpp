#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>

#include "cvsim/types.hpp"

namespace cvsim {

struct IntegrationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Radau IIA, 3 stages, order 5. Tableau entries and the error-estimate
// weights follow the classical implementation of the method.
namespace radau5 {

inline const double kSqrt6 = std::sqrt(6.0);

inline const double kC1 = (4.0 - kSqrt6) / 10.0;
inline const double kC2 = (4.0 + kSqrt6) / 10.0;
inline const double kC3 = 1.0;

inline const double kA[3][3] = {
    {(88.0 - 7.0 * kSqrt6) / 360.0, (296.0 - 169.0 * kSqrt6) / 1800.0,
     (-2.0 + 3.0 * kSqrt6) / 225.0},
    {(296.0 + 169.0 * kSqrt6) / 1800.0, (88.0 + 7.0 * kSqrt6) / 360.0,
     (-2.0 - 3.0 * kSqrt6) / 225.0},
    {(16.0 - kSqrt6) / 36.0, (16.0 + kSqrt6) / 36.0, 1.0 / 9.0}};

// real eigenvalue of A^{-1}; also scales the error-estimate solve
inline constexpr double kGamma = 3.637834252744496;

// weights of the embedded lower-order comparison
inline const double kD[3] = {-(13.0 + 7.0 * kSqrt6) / 3.0,
                             (-13.0 + 7.0 * kSqrt6) / 3.0, -1.0 / 3.0};

// Lagrange basis for the collocation polynomial on nodes {0, c1, c2, c3}
// expressed in the stage increments Z_i; theta in [0, 1].
inline void collocation_weights(double theta, double w[3]) {
  const double c1 = kC1, c2 = kC2, c3 = kC3;
  w[0] = theta * (theta - c2) * (theta - c3) / (c1 * (c1 - c2) * (c1 - c3));
  w[1] = theta * (theta - c1) * (theta - c3) / (c2 * (c2 - c1) * (c2 - c3));
  w[2] = theta * (theta - c1) * (theta - c2) / (c3 * (c3 - c1) * (c3 - c2));
}

}  // namespace radau5

struct RadauOptions {
  double rtol = 1e-7;
  double atol = 1e-9;
  double h_initial = 0.0;       // 0: (t1 - t0) / 1000
  double newton_tol = 1e-3;     // scaled increment threshold
  int max_newton_iters = 10;
  double fac_min = 0.2;         // step factor clamps
  double fac_max = 8.0;
  double safety = 0.9;
};

struct RadauStats {
  long accepted = 0;
  long rejected = 0;
  long newton_iterations = 0;
  long rhs_evaluations = 0;
};

namespace detail {

inline double scaled_rms(const VectorXd& e, const VectorXd& scale) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < e.size(); ++i) {
    const double q = e[i] / scale[i % scale.size()];
    s += q * q;
  }
  return std::sqrt(s / static_cast<double>(e.size()));
}

}  // namespace detail

// Integrates y' = f(y, t) from t0 to t1. System must provide
//   VectorXd f(const VectorXd& y, double t)
//   MatrixXd jacobian(const VectorXd& y, double t)
// emit(t, eval) is called once per accepted step with a dense-output
// evaluator valid on that step's interval.
template <class System, class Emit>
RadauStats radau_integrate(System&& sys, VectorXd y, double t0, double t1,
                           const RadauOptions& opt, Emit&& emit) {
  using namespace radau5;
  const Eigen::Index n = y.size();
  const double span = t1 - t0;
  if (span <= 0.0) throw IntegrationError("empty integration interval");

  RadauStats stats;
  double t = t0;
  double h = opt.h_initial > 0.0 ? opt.h_initial : span / 1000.0;
  const double h_min = 1e-13 * span;

  double h_acc = 0.0, err_acc = 1.0;  // Gustafsson memory
  bool have_acc = false;

  MatrixXd iteration_matrix(3 * n, 3 * n);
  VectorXd z(3 * n), dz(3 * n), g(3 * n);
  std::array<VectorXd, 3> f_stage;

  while (t < t1 - 1e-14 * span) {
    if (h < h_min)
      throw IntegrationError("step size underflow at t = " + std::to_string(t));
    if (t + h > t1) h = t1 - t;

    VectorXd scale(n);
    for (Eigen::Index i = 0; i < n; ++i)
      scale[i] = opt.atol + opt.rtol * std::abs(y[i]);

    const VectorXd f0 = sys.f(y, t);
    ++stats.rhs_evaluations;
    if (!f0.allFinite()) throw IntegrationError("rhs diverged at t = " + std::to_string(t));
    const MatrixXd jac = sys.jacobian(y, t);

    // M = I - h (A kron J)
    for (int bi = 0; bi < 3; ++bi)
      for (int bj = 0; bj < 3; ++bj)
        iteration_matrix.block(bi * n, bj * n, n, n) = -h * kA[bi][bj] * jac;
    iteration_matrix.diagonal().array() += 1.0;
    Eigen::PartialPivLU<MatrixXd> newton_lu(iteration_matrix);

    // simplified Newton on the stage increments
    z.setZero();
    bool converged = false;
    double eta_prev = -1.0;
    for (int it = 0; it < opt.max_newton_iters; ++it) {
      for (int i = 0; i < 3; ++i) {
        const double ci = (i == 0 ? kC1 : i == 1 ? kC2 : kC3);
        f_stage[i] = sys.f(y + z.segment(i * n, n), t + ci * h);
        ++stats.rhs_evaluations;
      }
      for (int i = 0; i < 3; ++i) {
        g.segment(i * n, n) = z.segment(i * n, n);
        for (int j = 0; j < 3; ++j)
          g.segment(i * n, n) -= h * kA[i][j] * f_stage[j];
      }
      dz = newton_lu.solve(-g);
      z += dz;
      ++stats.newton_iterations;
      const double eta = detail::scaled_rms(dz, scale);
      if (!std::isfinite(eta)) break;
      if (eta < opt.newton_tol) {
        converged = true;
        break;
      }
      if (eta_prev >= 0.0 && eta >= eta_prev && it >= 1) break;  // diverging
      eta_prev = eta;
    }

    if (!converged) {
      h *= 0.5;
      ++stats.rejected;
      continue;
    }

    // error estimate: solve (gamma/h I - J) e = f0 + (sum_i d_i Z_i) / h
    MatrixXd err_matrix = -jac;
    err_matrix.diagonal().array() += kGamma / h;
    Eigen::PartialPivLU<MatrixXd> err_lu(err_matrix);
    VectorXd dz_comb = (kD[0] * z.segment(0, n) + kD[1] * z.segment(n, n) +
                        kD[2] * z.segment(2 * n, n)) /
                       h;
    VectorXd err_vec = err_lu.solve(f0 + dz_comb);
    double err = detail::scaled_rms(err_vec, scale);
    if (err >= 1.0) {
      // refined estimate: run the rejected increment through f once
      const VectorXd f_ref = sys.f(y + err_vec, t);
      ++stats.rhs_evaluations;
      if (f_ref.allFinite()) {
        err_vec = err_lu.solve(f_ref + dz_comb);
        err = detail::scaled_rms(err_vec, scale);
      }
    }
    if (!std::isfinite(err)) err = 2.0;
    err = std::max(err, 1e-10);

    double fac = opt.safety * std::pow(err, -0.25);
    if (err < 1.0) {
      // accept
      const VectorXd y_new = y + z.segment(2 * n, n);  // stiffly accurate
      const double t_new = t + h;
      const double h_step = h;
      VectorXd z0 = z.segment(0, n), z1 = z.segment(n, n), z2 = z.segment(2 * n, n);
      auto eval = [&](double tq) {
        double w[3];
        radau5::collocation_weights((tq - t) / h_step, w);
        return VectorXd(y + w[0] * z0 + w[1] * z1 + w[2] * z2);
      };
      emit(t, t_new, eval);

      if (have_acc) {
        const double fac_gus = opt.safety * (h / h_acc) *
                               std::pow(err * err / err_acc, -0.25);
        fac = std::min(fac, fac_gus);
      }
      h_acc = h;
      err_acc = std::max(err, 1e-2);
      have_acc = true;

      y = y_new;
      t = t_new;
      ++stats.accepted;
      fac = std::min(opt.fac_max, std::max(opt.fac_min, fac));
      h *= fac;
    } else {
      ++stats.rejected;
      fac = std::min(1.0, std::max(opt.fac_min, fac));
      h *= fac;
    }
  }
  return stats;
}

}  // namespace cvsim
