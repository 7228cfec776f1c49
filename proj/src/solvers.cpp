#include "cvsim/solvers.hpp"

#include <cmath>

#include "cvsim/rk4.hpp"

namespace cvsim {

namespace {

struct CvsimSystem {
  const ParameterVector& v;

  VectorXd f(const VectorXd& y, double t) const {
    PressureState s;
    s.p = y;
    s.t = t;
    return rhs(s, v);
  }

  // exact within a valve configuration: the flow terms are linear in P and
  // the compliance terms enter linearly as well
  MatrixXd jacobian(const VectorXd& y, double t) const {
    PressureState s;
    s.p = y;
    s.t = t;
    return matrix_form(s, v).A;
  }
};

StateTrajectory make_trajectory(const ParameterVector& v, const SolverConfig& cfg) {
  const DerivedConstants d = derive_constants(v);
  const double t_end = cfg.n_cycles * d.t_tot;
  const auto n_out =
      static_cast<Eigen::Index>(std::floor(t_end / cfg.output_dt + 1e-9)) + 1;

  StateTrajectory traj;
  traj.t = VectorXd::LinSpaced(n_out, 0.0, (n_out - 1) * cfg.output_dt);
  traj.p.resize(n_out, 6);
  traj.q.resize(n_out, 6);
  traj.vol.resize(n_out, 6);
  traj.v_total.resize(n_out);
  traj.compliance.resize(n_out, 2);
  traj.t_cycle = d.t_tot;
  traj.n_cycles = cfg.n_cycles;
  return traj;
}

void fill_row(StateTrajectory& traj, Eigen::Index row, const VectorXd& y,
              const ParameterVector& v) {
  PressureState s;
  s.p = y;
  s.t = traj.t[row];
  const FlowVector q = flows(s, v);
  const VolumeVector vol = volumes(s, v);
  traj.p.row(row) = y.transpose();
  traj.q(row, 0) = q.l_in;
  traj.q(row, 1) = q.l_out;
  traj.q(row, 2) = q.a;
  traj.q(row, 3) = q.r_in;
  traj.q(row, 4) = q.r_out;
  traj.q(row, 5) = q.pv;
  traj.vol.row(row) = vol.v.transpose();
  traj.v_total[row] = vol.total;
  traj.compliance(row, 0) = ventricular_compliance(s.t, v, Side::kLeft).c;
  traj.compliance(row, 1) = ventricular_compliance(s.t, v, Side::kRight).c;
}

}  // namespace

StateTrajectory simulate(const ParameterVector& v, const SolverConfig& cfg) {
  if (cfg.method == Method::kRk4) return simulate_rk4(v, cfg);

  const DerivedConstants d = derive_constants(v);
  const InitialConditions ic = solve_initial_conditions(v);
  StateTrajectory traj = make_trajectory(v, cfg);
  traj.negative_volume_warning = ic.negative_volume_warning;

  const double t_end = cfg.n_cycles * d.t_tot;
  RadauOptions opt;
  opt.rtol = cfg.rtol;
  opt.atol = cfg.atol;
  opt.h_initial = d.t_tot / 1000.0;

  fill_row(traj, 0, ic.state.p, v);
  Eigen::Index next_row = 1;
  traj.stats = radau_integrate(
      CvsimSystem{v}, VectorXd(ic.state.p), 0.0, t_end, opt,
      [&](double, double t_b, auto&& eval) {
        while (next_row < traj.t.size() &&
               traj.t[next_row] <= t_b + 1e-14 * t_end) {
          fill_row(traj, next_row, eval(traj.t[next_row]), v);
          ++next_row;
        }
      });
  if (next_row < traj.t.size())
    throw IntegrationError("integration ended before the output grid");
  return traj;
}

StateTrajectory simulate_rk4(const ParameterVector& v, const SolverConfig& cfg) {
  const DerivedConstants d = derive_constants(v);
  const InitialConditions ic = solve_initial_conditions(v);
  StateTrajectory traj = make_trajectory(v, cfg);
  traj.negative_volume_warning = ic.negative_volume_warning;

  const double t_end = cfg.n_cycles * d.t_tot;

  fill_row(traj, 0, ic.state.p, v);
  Eigen::Index next_row = 1;
  traj.stats.accepted = rk4_integrate(
      CvsimSystem{v}, VectorXd(ic.state.p), 0.0, t_end, cfg.dt,
      [&](double, double t_b, auto&& eval) {
        while (next_row < traj.t.size() &&
               traj.t[next_row] <= t_b + 1e-14 * t_end) {
          fill_row(traj, next_row, eval(traj.t[next_row]), v);
          ++next_row;
        }
      });
  if (next_row < traj.t.size())
    throw IntegrationError("integration ended before the output grid");
  return traj;
}

}  // namespace cvsim
