#include "cvsim/parameters.hpp"

#include <cmath>

namespace cvsim {

ParameterVector default_parameters() {
  ParameterVector v;
  v.values[kParHr] = 72.0;
  v.values[kParPth] = -4.0;
  // one third of the cycle in systole; the usual tabulated 0.33 is this
  // value rounded for display
  v.values[kParRsys] = 1.0 / 3.0;
  v.values[kParClDia] = 7.5e-3;
  v.values[kParClSys] = 3.0e-4;
  v.values[kParCa] = 1.2e-3;
  v.values[kParCv] = 7.5e-2;
  v.values[kParCrDia] = 1.5e-2;
  v.values[kParCrSys] = 9.0e-4;
  v.values[kParCpa] = 3.23e-3;
  v.values[kParCpv] = 6.3e-3;
  v.values[kParRlIn] = 13.33;
  v.values[kParRlOut] = 8.0;
  v.values[kParRa] = 1333.22;
  v.values[kParRrIn] = 66.66;
  v.values[kParRrOut] = 4.0;
  v.values[kParRpv] = 106.66;
  v.values[kParVl0] = 15.0;
  v.values[kParVa0] = 715.0;
  v.values[kParVv0] = 2500.0;
  v.values[kParVr0] = 15.0;
  v.values[kParVpa0] = 90.0;
  v.values[kParVpv0] = 490.0;
  return v;
}

const std::array<std::string, kNumParams>& parameter_names() {
  static const std::array<std::string, kNumParams> names = {
      "Hr",     "Pth",    "rsys",   "Cl_dia", "Cl_sys", "Ca",
      "Cv",     "Cr_dia", "Cr_sys", "Cpa",    "Cpv",    "Rl_in",
      "Rl_out", "Ra",     "Rr_in",  "Rr_out", "Rpv",    "Vl0",
      "Va0",    "Vv0",    "Vr0",    "Vpa0",   "Vpv0"};
  return names;
}

int parameter_index(const std::string& name) {
  const auto& names = parameter_names();
  for (int i = 0; i < kNumParams; ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

DerivedConstants derive_constants(const ParameterVector& v) {
  DerivedConstants d;
  d.t_tot = 60.0 / v.hr();
  d.t_sys = d.t_tot * v.rsys();
  d.t_dia = d.t_tot - d.t_sys;
  d.v_total = kTotalBloodVolume;
  d.v_unstressed = v.vl0() + v.va0() + v.vv0() + v.vr0() + v.vpa0() + v.vpv0();
  d.v_stressed = d.v_total - d.v_unstressed;
  return d;
}

bool validate(const ParameterVector& v, std::string* why) {
  auto fail = [&](const std::string& msg) {
    if (why) *why = msg;
    return false;
  };
  const auto& names = parameter_names();
  for (int i = 0; i < kNumParams; ++i) {
    if (!std::isfinite(v[i])) return fail(names[i] + " is not finite");
  }
  if (v.hr() <= 0.0) return fail("Hr must be positive");
  if (v.pth_mmhg() >= 0.0) return fail("Pth must be negative");
  // above 2/3 the relaxation ramp is clipped by the cycle wrap, but the
  // elastance stays well defined so only the hard bounds are enforced
  if (v.rsys() <= 0.0 || v.rsys() >= 1.0)
    return fail("rsys must lie in (0, 1)");
  for (int i = kParClDia; i <= kParRpv; ++i) {
    if (v[i] <= 0.0) return fail(names[i] + " must be positive");
  }
  for (int i = kParVl0; i <= kParVpv0; ++i) {
    if (v[i] < 0.0) return fail(names[i] + " must be nonnegative");
  }
  if (v.cl_sys() >= v.cl_dia())
    return fail("left ventricle requires Cl_sys < Cl_dia");
  if (v.cr_sys() >= v.cr_dia())
    return fail("right ventricle requires Cr_sys < Cr_dia");
  DerivedConstants d = derive_constants(v);
  if (d.v_stressed <= 0.0)
    return fail("unstressed volume exceeds total blood volume");
  if (why) why->clear();
  return true;
}

}  // namespace cvsim
