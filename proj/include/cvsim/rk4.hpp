#pragma once

#include <algorithm>
#include <string>

#include "cvsim/radau.hpp"

namespace cvsim {

// Classical fixed-step RK4. emit(t_a, t_b, eval) mirrors the implicit
// integrator's contract; eval interpolates with a cubic Hermite built from
// the endpoint states and slopes.
template <class System, class Emit>
long rk4_integrate(System&& sys, VectorXd y, double t0, double t1, double dt,
                   Emit&& emit) {
  if (!(dt > 0.0)) throw IntegrationError("rk4 needs a positive step");
  const double span = t1 - t0;
  if (span <= 0.0) throw IntegrationError("empty integration interval");

  double t = t0;
  VectorXd f_left = sys.f(y, t);
  long steps = 0;
  while (t < t1 - 1e-14 * span) {
    const double h = std::min(dt, t1 - t);
    const VectorXd k1 = f_left;
    const VectorXd k2 = sys.f(y + 0.5 * h * k1, t + 0.5 * h);
    const VectorXd k3 = sys.f(y + 0.5 * h * k2, t + 0.5 * h);
    const VectorXd k4 = sys.f(y + h * k3, t + h);
    const VectorXd y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    if (!y_new.allFinite())
      throw IntegrationError("rk4 diverged at t = " + std::to_string(t));
    const double t_new = t + h;
    const VectorXd f_right = sys.f(y_new, t_new);

    auto eval = [&](double tq) {
      const double th = (tq - t) / h;
      const double h00 = (1.0 + 2.0 * th) * (1.0 - th) * (1.0 - th);
      const double h10 = th * (1.0 - th) * (1.0 - th);
      const double h01 = th * th * (3.0 - 2.0 * th);
      const double h11 = th * th * (th - 1.0);
      return VectorXd(h00 * y + h10 * h * f_left + h01 * y_new +
                      h11 * h * f_right);
    };
    emit(t, t_new, eval);

    y = y_new;
    t = t_new;
    f_left = f_right;
    ++steps;
  }
  return steps;
}

}  // namespace cvsim
