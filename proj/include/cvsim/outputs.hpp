#pragma once

#include <array>
#include <string>

#include "cvsim/rng.hpp"
#include "cvsim/solvers.hpp"

namespace cvsim {

inline constexpr int kNumOutputs = 16;

using OutputVector = Eigen::Matrix<double, kNumOutputs, 1>;

// Canonical output ordering. Pressures in mmHg, volumes in mL, CO in L/min,
// vascular resistances in dyn*s/cm^5 (numerically Barye*s/mL).
enum OutputIndex : int {
  kOutHr = 0,
  kOutPaSys,
  kOutPaDia,
  kOutPrSys,
  kOutPrDia,
  kOutPpaSys,
  kOutPpaDia,
  kOutPrEdp,
  kOutPw,
  kOutPcvp,
  kOutVlSys,
  kOutVlDia,
  kOutLvef,
  kOutCo,
  kOutSvr,
  kOutPvr,
};

const std::array<std::string, kNumOutputs>& output_names();
const std::array<std::string, kNumOutputs>& output_units();
int output_index(const std::string& name);  // -1 when unknown

// Reported measurement scales, one std per output, same ordering.
const OutputVector& output_noise_std();

struct OutputResult {
  OutputVector y;
  // averaging window drifted by more than 1% between its first and last
  // cycle; the run is probably not periodic yet
  bool periodicity_warning = false;
};

// Clinical summary over the final `window_cycles` heart beats of a
// trajectory. Extrema are taken on the sampling grid, means by trapezoid.
OutputResult extract_outputs(const StateTrajectory& traj,
                             const ParameterVector& v, int window_cycles = 3);

// y + delta * std (.) standard normal, applied in physical units.
OutputVector add_noise(const OutputVector& y, double delta, Rng& rng);

}  // namespace cvsim
