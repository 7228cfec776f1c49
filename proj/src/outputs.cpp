#include "cvsim/outputs.hpp"

#include <cmath>
#include <stdexcept>

namespace cvsim {

const std::array<std::string, kNumOutputs>& output_names() {
  static const std::array<std::string, kNumOutputs> names = {
      "Hr",      "Pa_sys",  "Pa_dia", "Pr_sys", "Pr_dia", "Ppa_sys",
      "Ppa_dia", "Pr_edp",  "Pw",     "Pcvp",   "Vl_sys", "Vl_dia",
      "LVEF",    "CO",      "SVR",    "PVR"};
  return names;
}

const std::array<std::string, kNumOutputs>& output_units() {
  static const std::array<std::string, kNumOutputs> units = {
      "bpm",  "mmHg", "mmHg", "mmHg", "mmHg", "mmHg", "mmHg", "mmHg",
      "mmHg", "mmHg", "mL",   "mL",   "-",    "L/min",
      "dyn*s/cm^5", "dyn*s/cm^5"};
  return units;
}

int output_index(const std::string& name) {
  const auto& names = output_names();
  for (int i = 0; i < kNumOutputs; ++i) {
    if (names[i] == name) return i;
  }
  return -1;
}

const OutputVector& output_noise_std() {
  static const OutputVector std = [] {
    OutputVector s;
    s << 3.0, 1.5, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 10.0, 20.0, 0.02,
        0.2, 50.0, 5.0;
    return s;
  }();
  return std;
}

namespace {

// trapezoid mean over rows [first, last] of a uniformly sampled column
double window_mean(const VectorXd& t, const VectorXd& f, Eigen::Index first,
                   Eigen::Index last) {
  double acc = 0.0;
  for (Eigen::Index i = first; i < last; ++i)
    acc += 0.5 * (f[i] + f[i + 1]) * (t[i + 1] - t[i]);
  return acc / (t[last] - t[first]);
}

}  // namespace

OutputResult extract_outputs(const StateTrajectory& traj,
                             const ParameterVector& v, int window_cycles) {
  if (traj.n_cycles < window_cycles)
    throw std::invalid_argument("trajectory shorter than the averaging window");
  const Eigen::Index n = traj.t.size();
  if (n < 2) throw std::invalid_argument("trajectory has no samples");
  if (!traj.p.allFinite() || !traj.vol.allFinite())
    throw std::invalid_argument("trajectory contains non-finite samples");

  const double t_end = traj.t[n - 1];
  const double t_lo = t_end - window_cycles * traj.t_cycle;
  Eigen::Index first = 0;
  while (first < n - 1 && traj.t[first] < t_lo - 1e-12) ++first;
  const Eigen::Index last = n - 1;

  const auto seg = [&](const MatrixXd& m, int col) {
    return m.col(col).segment(first, last - first + 1);
  };

  const double pa_mean = window_mean(traj.t, traj.p.col(kPa), first, last);
  const double pv_mean = window_mean(traj.t, traj.p.col(kPv), first, last);
  const double ppa_mean = window_mean(traj.t, traj.p.col(kPpa), first, last);
  const double ppv_mean = window_mean(traj.t, traj.p.col(kPpv), first, last);
  const double qa_mean = window_mean(traj.t, traj.q.col(2), first, last);

  OutputResult out;
  out.y[kOutHr] = v.hr();
  out.y[kOutPaSys] = seg(traj.p, kPa).maxCoeff() * kBaryeToMmHg;
  out.y[kOutPaDia] = seg(traj.p, kPa).minCoeff() * kBaryeToMmHg;
  out.y[kOutPrSys] = seg(traj.p, kPr).maxCoeff() * kBaryeToMmHg;
  out.y[kOutPrDia] = seg(traj.p, kPr).minCoeff() * kBaryeToMmHg;
  out.y[kOutPpaSys] = seg(traj.p, kPpa).maxCoeff() * kBaryeToMmHg;
  out.y[kOutPpaDia] = seg(traj.p, kPpa).minCoeff() * kBaryeToMmHg;
  // the run ends on a cycle boundary, so the final sample is end-diastole
  out.y[kOutPrEdp] = traj.p(n - 1, kPr) * kBaryeToMmHg;
  out.y[kOutPw] = ppv_mean * kBaryeToMmHg;
  out.y[kOutPcvp] = pv_mean * kBaryeToMmHg;
  out.y[kOutVlSys] = seg(traj.vol, kPl).minCoeff();
  out.y[kOutVlDia] = seg(traj.vol, kPl).maxCoeff();
  if (out.y[kOutVlDia] <= 0.0)
    throw std::invalid_argument("nonpositive end-diastolic volume");
  out.y[kOutLvef] = (out.y[kOutVlDia] - out.y[kOutVlSys]) / out.y[kOutVlDia];
  out.y[kOutCo] = qa_mean * 0.06;  // mL/s -> L/min
  if (qa_mean <= 0.0) throw std::invalid_argument("nonpositive systemic flow");
  out.y[kOutSvr] = (pa_mean - pv_mean) / qa_mean;
  out.y[kOutPvr] = (ppa_mean - ppv_mean) / qa_mean;

  // drift check: compare the window's first and last whole cycle
  const auto cyc = static_cast<Eigen::Index>(
      std::round(traj.t_cycle / (traj.t[1] - traj.t[0])));
  if (last - first >= 2 * cyc && cyc >= 2) {
    const double m0 = window_mean(traj.t, traj.p.col(kPa), first, first + cyc);
    const double m1 = window_mean(traj.t, traj.p.col(kPa), last - cyc, last);
    if (std::abs(m1 - m0) > 0.01 * std::abs(m1)) out.periodicity_warning = true;
  }
  return out;
}

OutputVector add_noise(const OutputVector& y, double delta, Rng& rng) {
  const OutputVector& s = output_noise_std();
  OutputVector out;
  for (int i = 0; i < kNumOutputs; ++i)
    out[i] = y[i] + delta * s[i] * rng.normal();
  return out;
}

}  // namespace cvsim
