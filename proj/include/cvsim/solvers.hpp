#pragma once

#include <string>

#include "cvsim/model.hpp"
#include "cvsim/radau.hpp"

namespace cvsim {

enum class Method { kRk4, kRadau };

struct SolverConfig {
  Method method = Method::kRadau;
  double dt = 1e-3;        // RK4 step
  double rtol = 1e-7;      // Radau tolerances
  double atol = 1e-9;
  int n_cycles = 12;
  double output_dt = 1e-3;
};

// Uniform-grid samples of one simulation. Pressures in Barye, flows mL/s,
// volumes mL, compliances mL/Barye.
struct StateTrajectory {
  VectorXd t;
  MatrixXd p;           // n x 6
  MatrixXd q;           // n x 6, [l_in, l_out, a, r_in, r_out, pv]
  MatrixXd vol;         // n x 6
  VectorXd v_total;
  MatrixXd compliance;  // n x 2, left and right C(t)
  double t_cycle = 0.0;
  int n_cycles = 0;
  RadauStats stats;
  bool negative_volume_warning = false;
};

// Integrates from the periodic-steady-state initial conditions over
// cfg.n_cycles heart beats and samples every cfg.output_dt.
StateTrajectory simulate(const ParameterVector& v, const SolverConfig& cfg);

// RK4 with fixed step cfg.dt and cubic Hermite resampling onto the grid.
// Exposed separately for step-size studies.
StateTrajectory simulate_rk4(const ParameterVector& v, const SolverConfig& cfg);

}  // namespace cvsim
