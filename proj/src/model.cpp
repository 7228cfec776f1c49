#include "cvsim/model.hpp"

#include <cmath>
#include <stdexcept>

namespace cvsim {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

inline double cycle_phase(double t, double t_tot) {
  double phi = std::fmod(t, t_tot);
  if (phi < 0.0) phi += t_tot;
  return phi;
}

}  // namespace

ElastancePair ventricular_elastance(double t, const ParameterVector& v, Side side) {
  const DerivedConstants d = derive_constants(v);
  const double e_dia =
      1.0 / (side == Side::kLeft ? v.cl_dia() : v.cr_dia());
  const double e_sys =
      1.0 / (side == Side::kLeft ? v.cl_sys() : v.cr_sys());
  const double phi = cycle_phase(t, d.t_tot);
  const double amp = 0.5 * (e_sys - e_dia);

  ElastancePair out;
  if (phi > 0.0 && phi <= d.t_sys) {
    // contraction: raised cosine from E_dia up to E_sys
    out.e = amp * (1.0 - std::cos(kPi * phi / d.t_sys)) + e_dia;
    out.de_dt = amp * (kPi / d.t_sys) * std::sin(kPi * phi / d.t_sys);
  } else if (phi > d.t_sys && phi <= 1.5 * d.t_sys) {
    // relaxation: half-period cosine back down to E_dia
    const double psi = 2.0 * kPi * (phi - d.t_sys) / d.t_sys;
    out.e = amp * (1.0 + std::cos(psi)) + e_dia;
    out.de_dt = -amp * (2.0 * kPi / d.t_sys) * std::sin(psi);
  } else {
    // filling: constant diastolic elastance
    out.e = e_dia;
    out.de_dt = 0.0;
  }
  return out;
}

CompliancePair ventricular_compliance(double t, const ParameterVector& v, Side side) {
  const ElastancePair e = ventricular_elastance(t, v, side);
  CompliancePair out;
  out.c = 1.0 / e.e;
  out.dc_dt = -e.de_dt / (e.e * e.e);  // d(1/E)/dt
  return out;
}

FlowVector flows(const PressureState& s, const ParameterVector& v) {
  const double pl = s.p[kPl], pa = s.p[kPa], pv = s.p[kPv];
  const double pr = s.p[kPr], ppa = s.p[kPpa], ppv = s.p[kPpv];
  FlowVector q;
  q.l_in = ppv > pl ? (ppv - pl) / v.rl_in() : 0.0;
  q.l_out = pl > pa ? (pl - pa) / v.rl_out() : 0.0;
  q.a = (pa - pv) / v.ra();
  q.r_in = pv > pr ? (pv - pr) / v.rr_in() : 0.0;
  q.r_out = pr > ppa ? (pr - ppa) / v.rr_out() : 0.0;
  q.pv = (ppa - ppv) / v.rpv();
  return q;
}

Vector6 rhs(const PressureState& s, const ParameterVector& v) {
  const FlowVector q = flows(s, v);
  const CompliancePair cl = ventricular_compliance(s.t, v, Side::kLeft);
  const CompliancePair cr = ventricular_compliance(s.t, v, Side::kRight);
  const double pth = v.pth();

  Vector6 dp;
  dp[kPl] = (q.l_in - q.l_out - (s.p[kPl] - pth) * cl.dc_dt) / cl.c;
  dp[kPa] = (q.l_out - q.a) / v.ca();
  dp[kPv] = (q.a - q.r_in) / v.cv();
  dp[kPr] = (q.r_in - q.r_out - (s.p[kPr] - pth) * cr.dc_dt) / cr.c;
  dp[kPpa] = (q.r_out - q.pv) / v.cpa();
  dp[kPpv] = (q.pv - q.l_in) / v.cpv();
  return dp;
}

LinearSystemForm matrix_form(const PressureState& s, const ParameterVector& v) {
  const CompliancePair cl = ventricular_compliance(s.t, v, Side::kLeft);
  const CompliancePair cr = ventricular_compliance(s.t, v, Side::kRight);
  const double pth = v.pth();

  // valve conductances, zero when closed
  const double g_l_in = s.p[kPpv] > s.p[kPl] ? 1.0 / v.rl_in() : 0.0;
  const double g_l_out = s.p[kPl] > s.p[kPa] ? 1.0 / v.rl_out() : 0.0;
  const double g_r_in = s.p[kPv] > s.p[kPr] ? 1.0 / v.rr_in() : 0.0;
  const double g_r_out = s.p[kPr] > s.p[kPpa] ? 1.0 / v.rr_out() : 0.0;
  const double g_a = 1.0 / v.ra();
  const double g_pv = 1.0 / v.rpv();

  LinearSystemForm f;
  f.A.setZero();
  f.b.setZero();

  f.A(kPl, kPl) = -(g_l_in + g_l_out + cl.dc_dt) / cl.c;
  f.A(kPl, kPa) = g_l_out / cl.c;
  f.A(kPl, kPpv) = g_l_in / cl.c;
  f.b[kPl] = pth * cl.dc_dt / cl.c;

  f.A(kPa, kPl) = g_l_out / v.ca();
  f.A(kPa, kPa) = -(g_l_out + g_a) / v.ca();
  f.A(kPa, kPv) = g_a / v.ca();

  f.A(kPv, kPa) = g_a / v.cv();
  f.A(kPv, kPv) = -(g_a + g_r_in) / v.cv();
  f.A(kPv, kPr) = g_r_in / v.cv();

  f.A(kPr, kPv) = g_r_in / cr.c;
  f.A(kPr, kPr) = -(g_r_in + g_r_out + cr.dc_dt) / cr.c;
  f.A(kPr, kPpa) = g_r_out / cr.c;
  f.b[kPr] = pth * cr.dc_dt / cr.c;

  f.A(kPpa, kPr) = g_r_out / v.cpa();
  f.A(kPpa, kPpa) = -(g_r_out + g_pv) / v.cpa();
  f.A(kPpa, kPpv) = g_pv / v.cpa();

  f.A(kPpv, kPl) = g_l_in / v.cpv();
  f.A(kPpv, kPpa) = g_pv / v.cpv();
  f.A(kPpv, kPpv) = -(g_pv + g_l_in) / v.cpv();

  return f;
}

VolumeVector volumes(const PressureState& s, const ParameterVector& v) {
  const CompliancePair cl = ventricular_compliance(s.t, v, Side::kLeft);
  const CompliancePair cr = ventricular_compliance(s.t, v, Side::kRight);
  const double pth = v.pth();

  VolumeVector out;
  out.v[kPl] = v.vl0() + (s.p[kPl] - pth) * cl.c;
  // only about a third of the arterial bed sits inside the thorax
  out.v[kPa] = v.va0() + (s.p[kPa] - pth / 3.0) * v.ca();
  out.v[kPv] = v.vv0() + s.p[kPv] * v.cv();
  out.v[kPr] = v.vr0() + (s.p[kPr] - pth) * cr.c;
  out.v[kPpa] = v.vpa0() + (s.p[kPpa] - pth) * v.cpa();
  out.v[kPpv] = v.vpv0() + (s.p[kPpv] - pth) * v.cpv();
  out.total = out.v.sum();
  return out;
}

InitialConditions solve_initial_conditions(const ParameterVector& v) {
  const DerivedConstants d = derive_constants(v);
  const double pth = v.pth();

  // Unknowns x = [Pl_dia, Pl_sys, Pa, Pv, Pr_dia, Pr_sys, Ppa, Ppv].
  // Stroke volume through each segment over one beat is identical in the
  // periodic regime; the left-ventricular ejection
  //   SV = Cl_dia (Pl_dia - Pth) - Cl_sys (Pl_sys - Pth)
  // is equated with each segmental throughput, and total volume closes the
  // system.
  Matrix8 m = Matrix8::Zero();
  Vector8 r = Vector8::Zero();

  const double sv_rhs = pth * (v.cl_dia() - v.cl_sys());

  // equal ventricular stroke volumes
  m(0, 0) = v.cl_dia();
  m(0, 1) = -v.cl_sys();
  m(0, 4) = -v.cr_dia();
  m(0, 5) = v.cr_sys();
  r[0] = pth * (v.cl_dia() - v.cl_sys() - v.cr_dia() + v.cr_sys());

  // SV = Tsys (Pl_sys - Pa) / Rl_out
  m(1, 0) = v.cl_dia();
  m(1, 1) = -v.cl_sys() - d.t_sys / v.rl_out();
  m(1, 2) = d.t_sys / v.rl_out();
  r[1] = sv_rhs;

  // SV = Ttot (Pa - Pv) / Ra
  m(2, 0) = v.cl_dia();
  m(2, 1) = -v.cl_sys();
  m(2, 2) = -d.t_tot / v.ra();
  m(2, 3) = d.t_tot / v.ra();
  r[2] = sv_rhs;

  // SV = Tdia (Pv - Pr_dia) / Rr_in
  m(3, 0) = v.cl_dia();
  m(3, 1) = -v.cl_sys();
  m(3, 3) = -d.t_dia / v.rr_in();
  m(3, 4) = d.t_dia / v.rr_in();
  r[3] = sv_rhs;

  // SV = Tsys (Pr_sys - Ppa) / Rr_out
  m(4, 0) = v.cl_dia();
  m(4, 1) = -v.cl_sys();
  m(4, 5) = -d.t_sys / v.rr_out();
  m(4, 6) = d.t_sys / v.rr_out();
  r[4] = sv_rhs;

  // SV = Ttot (Ppa - Ppv) / Rpv
  m(5, 0) = v.cl_dia();
  m(5, 1) = -v.cl_sys();
  m(5, 6) = -d.t_tot / v.rpv();
  m(5, 7) = d.t_tot / v.rpv();
  r[5] = sv_rhs;

  // SV = Tdia (Ppv - Pl_dia) / Rl_in
  m(6, 0) = v.cl_dia() + d.t_dia / v.rl_in();
  m(6, 1) = -v.cl_sys();
  m(6, 7) = -d.t_dia / v.rl_in();
  r[6] = sv_rhs;

  // stressed volume bookkeeping at the diastolic reference
  m(7, 0) = v.cl_dia();
  m(7, 2) = v.ca();
  m(7, 3) = v.cv();
  m(7, 4) = v.cr_dia();
  m(7, 6) = v.cpa();
  m(7, 7) = v.cpv();
  r[7] = d.v_stressed +
         pth * (v.cl_dia() + v.ca() / 3.0 + v.cr_dia() + v.cpa() + v.cpv());

  Eigen::FullPivLU<Matrix8> lu(m);
  if (!lu.isInvertible()) {
    throw std::runtime_error(
        "initial-condition system is singular for this parameter set");
  }
  const Matrix8 inv = lu.inverse();
  const double cond = m.cwiseAbs().colwise().sum().maxCoeff() *
                      inv.cwiseAbs().colwise().sum().maxCoeff();

  InitialConditions ic;
  ic.solution = lu.solve(r);
  ic.condition_estimate = cond;
  ic.stroke_volume = v.cl_dia() * (ic.solution[0] - pth) -
                     v.cl_sys() * (ic.solution[1] - pth);

  ic.state.t = 0.0;
  ic.state.p[kPl] = ic.solution[0];
  ic.state.p[kPa] = ic.solution[2];
  ic.state.p[kPv] = ic.solution[3];
  ic.state.p[kPr] = ic.solution[4];
  ic.state.p[kPpa] = ic.solution[6];
  ic.state.p[kPpv] = ic.solution[7];

  const VolumeVector vol = volumes(ic.state, v);
  ic.negative_volume_warning = (vol.v.minCoeff() < 0.0);
  return ic;
}

}  // namespace cvsim
