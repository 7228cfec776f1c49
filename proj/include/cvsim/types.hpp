#pragma once

#include <Eigen/Dense>

namespace cvsim {

using Vector6 = Eigen::Matrix<double, 6, 1>;
using Matrix6 = Eigen::Matrix<double, 6, 6>;
using Vector8 = Eigen::Matrix<double, 8, 1>;
using Matrix8 = Eigen::Matrix<double, 8, 8>;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// Internal unit system is CGS: pressures in Barye, volumes in mL, time in s.
inline constexpr double kMmHgToBarye = 1333.22;
inline constexpr double kBaryeToMmHg = 1.0 / kMmHgToBarye;

// Pressure state ordering used everywhere:
// [P_left, P_arterial, P_venous, P_right, P_pulm_art, P_pulm_ven]
enum CompartmentIndex : int {
  kPl = 0,
  kPa = 1,
  kPv = 2,
  kPr = 3,
  kPpa = 4,
  kPpv = 5,
};

struct PressureState {
  Vector6 p = Vector6::Zero();  // Barye
  double t = 0.0;               // s
};

}  // namespace cvsim
