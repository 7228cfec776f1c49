#pragma once

#include "cvsim/parameters.hpp"
#include "cvsim/types.hpp"

namespace cvsim {

enum class Side { kLeft, kRight };

// Time-varying ventricular compliance C(t) and its rate dC/dt. The driver is
// periodic with the heart cycle: a raised-cosine stiffening over systole, a
// half-cosine release over the first half of diastole, then constant at the
// diastolic compliance.
struct CompliancePair {
  double c;      // mL/Barye
  double dc_dt;  // (mL/Barye)/s
};

CompliancePair ventricular_compliance(double t, const ParameterVector& v, Side side);

// Elastance E = 1/C and dE/dt, the form the driver is usually written in.
struct ElastancePair {
  double e;
  double de_dt;
};

ElastancePair ventricular_elastance(double t, const ParameterVector& v, Side side);

// Instantaneous flows through the six resistive elements, mL/s.
// Valves (l_in, l_out, r_in, r_out) carry flow only for a strictly positive
// pressure drop; the two non-valved segments (a, pv) are bidirectional.
struct FlowVector {
  double l_in;   // pulmonary veins -> left ventricle
  double l_out;  // left ventricle -> systemic arteries
  double a;      // systemic arteries -> systemic veins
  double r_in;   // systemic veins -> right ventricle
  double r_out;  // right ventricle -> pulmonary arteries
  double pv;     // pulmonary arteries -> pulmonary veins
};

FlowVector flows(const PressureState& s, const ParameterVector& v);

// dP/dt in Barye/s.
Vector6 rhs(const PressureState& s, const ParameterVector& v);

// The same dynamics written as dP/dt = A(t, P) P + b(t, P). A depends on the
// state only through the valve indicator functions.
struct LinearSystemForm {
  Matrix6 A;
  Vector6 b;
};

LinearSystemForm matrix_form(const PressureState& s, const ParameterVector& v);

// Compartment volumes, mL. Arterial wall loading uses a reduced thoracic
// pressure Pth/3 because only part of the arterial tree is intrathoracic.
struct VolumeVector {
  Vector6 v;      // per compartment, same ordering as pressures
  double total;   // sum, mL
};

VolumeVector volumes(const PressureState& s, const ParameterVector& v);

// Steady-state initial conditions from the periodicity argument: equal
// per-beat stroke volumes through every segment plus total volume
// conservation give a linear 8x8 system in the diastolic/systolic ventricular
// pressures and the four steady compartment pressures.
struct InitialConditions {
  PressureState state;          // t = 0, ventricles at their diastolic values
  Vector8 solution;             // [Pl_dia, Pl_sys, Pa, Pv, Pr_dia, Pr_sys, Ppa, Ppv]
  double stroke_volume;         // mL per beat implied by the solution
  double condition_estimate;    // 1-norm condition estimate of the 8x8 system
  bool negative_volume_warning; // some compartment volume < 0 at t = 0
};

InitialConditions solve_initial_conditions(const ParameterVector& v);

}  // namespace cvsim
