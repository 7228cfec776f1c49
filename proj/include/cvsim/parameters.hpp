#pragma once

#include <array>
#include <string>

#include "cvsim/types.hpp"

namespace cvsim {

inline constexpr int kNumParams = 23;

// Canonical parameter ordering. Units follow the clinical convention the
// model is usually quoted in: Pth is stored in mmHg, compliances in mL/Barye,
// resistances in Barye*s/mL, volumes in mL, heart rate in bpm. Conversion to
// the internal CGS pressure unit happens at the point of use.
enum ParamIndex : int {
  kParHr = 0,      // bpm
  kParPth,         // mmHg
  kParRsys,        // systole fraction of the cycle, dimensionless
  kParClDia,       // mL/Barye
  kParClSys,
  kParCa,
  kParCv,
  kParCrDia,
  kParCrSys,
  kParCpa,
  kParCpv,
  kParRlIn,        // Barye*s/mL
  kParRlOut,
  kParRa,
  kParRrIn,
  kParRrOut,
  kParRpv,
  kParVl0,         // mL
  kParVa0,
  kParVv0,
  kParVr0,
  kParVpa0,
  kParVpv0,
};

struct ParameterVector {
  Eigen::Matrix<double, kNumParams, 1> values;

  double hr() const { return values[kParHr]; }
  double pth_mmhg() const { return values[kParPth]; }
  double pth() const { return values[kParPth] * kMmHgToBarye; }  // Barye
  double rsys() const { return values[kParRsys]; }
  double cl_dia() const { return values[kParClDia]; }
  double cl_sys() const { return values[kParClSys]; }
  double ca() const { return values[kParCa]; }
  double cv() const { return values[kParCv]; }
  double cr_dia() const { return values[kParCrDia]; }
  double cr_sys() const { return values[kParCrSys]; }
  double cpa() const { return values[kParCpa]; }
  double cpv() const { return values[kParCpv]; }
  double rl_in() const { return values[kParRlIn]; }
  double rl_out() const { return values[kParRlOut]; }
  double ra() const { return values[kParRa]; }
  double rr_in() const { return values[kParRrIn]; }
  double rr_out() const { return values[kParRrOut]; }
  double rpv() const { return values[kParRpv]; }
  double vl0() const { return values[kParVl0]; }
  double va0() const { return values[kParVa0]; }
  double vv0() const { return values[kParVv0]; }
  double vr0() const { return values[kParVr0]; }
  double vpa0() const { return values[kParVpa0]; }
  double vpv0() const { return values[kParVpv0]; }

  double operator[](int i) const { return values[i]; }
  double& operator[](int i) { return values[i]; }
};

// Reference parameter set for the healthy baseline.
ParameterVector default_parameters();

// Short machine names, in canonical order.
const std::array<std::string, kNumParams>& parameter_names();

int parameter_index(const std::string& name);  // -1 when unknown

// Quantities derived from the parameter vector. Total blood volume is a
// modeling constant, not a free parameter.
struct DerivedConstants {
  double t_tot;        // cycle length, s
  double t_sys;        // systole duration, s
  double t_dia;        // diastole duration, s
  double v_total;      // total blood volume, mL
  double v_unstressed; // sum of zero-pressure volumes, mL
  double v_stressed;   // v_total - v_unstressed, mL
};

inline constexpr double kTotalBloodVolume = 5000.0;  // mL

DerivedConstants derive_constants(const ParameterVector& v);

// Basic sanity: positive rates/compliances/resistances/volumes, rsys in
// (0, 2/3] so the relaxation ramp fits inside one cycle, negative Pth.
bool validate(const ParameterVector& v, std::string* why = nullptr);

}  // namespace cvsim
