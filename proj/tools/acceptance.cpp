// Acceptance gate: nine numbered criteria, one PASS/FAIL line each, exit 0
// only if every criterion passes. Heavy artifacts (datasets, trained
// bundles, the synthetic cohort) are cached under --out-dir so reruns and
// partial investigations are cheap; --fresh rebuilds everything.

#include <CLI11.hpp>

#include <Eigen/SVD>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "cvsim/dataset.hpp"
#include "cvsim/inference.hpp"
#include "cvsim/io.hpp"
#include "cvsim/model.hpp"
#include "cvsim/outputs.hpp"
#include "cvsim/parameters.hpp"
#include "cvsim/solvers.hpp"
#include "cvsim/stiffness.hpp"
#include "cvsim/training.hpp"

using namespace cvsim;
namespace fs = std::filesystem;
using clk = std::chrono::steady_clock;

namespace {

// ----------------------------------------------------------------- settings

constexpr Eigen::Index kSynDatasetSize = 10000;
constexpr std::uint64_t kSynDataSeed = 101;
constexpr std::uint64_t kSynTrainSeed = 401;

constexpr Eigen::Index kEhrDatasetSize = 2500;
constexpr std::uint64_t kEhrDataSeed = 202;
constexpr std::uint64_t kEhrTrainSeed = 501;
// noise-ordering bundles are deliberately small; triple the size-scaled
// budgets so the flow still learns each noise level
constexpr double kEhrBudgetMultiplier = 3.0;

constexpr int kCohortSize = 46;
constexpr double kCohortNoise = 0.5;
constexpr std::uint64_t kCohortSeed = 303;
constexpr std::uint64_t kReportSeed = 404;

// reference values for the benchmarks below

// eigenvalues of the fast modes at the stiffness-ratio peak, their time
// constants, and the peak/trough instants (seconds, modulo one cycle)
constexpr double kRefLambda1 = -520.95;
constexpr double kRefLambda2 = -355.93;
constexpr double kRefTau1 = 0.0019;
constexpr double kRefTau2 = 0.0028;
constexpr double kRefSrMaxT = 9.444;
constexpr double kRefSrMinT = 8.618;

// clinical target vector for the inversion benchmarks
const double kRefTarget[16] = {72.91, 142.78, 111.55, 22.78,   -1.51, 22.37,
                               13.13, 1.61,   12.56,  7.27,    76.81, 153.61,
                               0.50,  5.60,   1725.48, 74.53};

// reference per-component mean absolute reconstruction errors at full
// training scale; criterion 5 allows five times these
const double kRefMeanAbsErr[16] = {4.62e-2, 3.37e-1, 2.50e-1, 8.16e-2,
                                   1.12e-2, 8.06e-2, 5.12e-2, 1.82e-2,
                                   4.89e-2, 2.72e-2, 1.49e-1, 3.29e-1,
                                   5.04e-4, 1.41e-2, 1.02,    8.79e-2};

// benchmark missing-data mask: diastolic pressures, wedge pressure,
// systolic volume, and both vascular resistances
const std::vector<int> kRefMissingMask = {2, 4, 6, 8, 10, 14, 15};

// ----------------------------------------------------------------- plumbing

struct CheckResult {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof(buf), f, ap);
  va_end(ap);
  return buf;
}

void stage(const std::string& msg) {
  std::cerr << "  [stage] " << msg << "\n" << std::flush;
}

struct Timer {
  clk::time_point t0 = clk::now();
  double s() const { return std::chrono::duration<double>(clk::now() - t0).count(); }
};

OutputVector ref_target() {
  OutputVector y;
  for (int k = 0; k < kNumOutputs; ++k) y(k) = kRefTarget[k];
  return y;
}

double circular_gap(double a, double b, double period) {
  double d = std::fmod(std::abs(a - b), period);
  return std::min(d, period - d);
}

Dataset dataset_cached(const fs::path& dir, const PriorBox& prior,
                       Eigen::Index n, std::uint64_t seed, bool fresh) {
  if (!fresh && fs::exists(dir / "metadata.json")) {
    stage("reusing dataset " + dir.string());
    return load_dataset(dir.string());
  }
  stage("generating " + std::to_string(n) + " samples into " + dir.string());
  Timer t;
  const Dataset ds = generate(prior, n, SolverConfig{}, seed, 1);
  fs::create_directories(dir);
  save_dataset(ds, dir.string());
  stage(fmt("dataset done in %.0f s", t.s()));
  return ds;
}

template <class Maker>
ModelBundle bundle_cached(const fs::path& path, bool fresh, Maker make) {
  if (!fresh && fs::exists(path)) {
    stage("reusing bundle " + path.string());
    return load_bundle(path.string());
  }
  ModelBundle b = make();
  save_bundle(b, path.string());
  return b;
}

// --------------------------------------------------------------- criterion 1

CheckResult criterion_volume(const StateTrajectory& traj, double runtime_s) {
  const double drift =
      (traj.v_total.array() - 5000.0).abs().maxCoeff() / 5000.0;
  CheckResult r;
  r.pass = drift < 1e-4 && runtime_s < 5.0;
  r.detail = fmt("max volume drift %.2e (limit 1e-4), runtime %.2f s (limit 5)",
                 drift, runtime_s);
  return r;
}

// --------------------------------------------------------------- criterion 2

CheckResult criterion_stiffness() {
  const ParameterVector v = default_parameters();
  const StiffnessScan scan = stiffness_scan(v, SolverConfig{}, 2);
  const double ttot = 60.0 / v.hr();

  // two fastest modes at the peak, most negative real part first
  std::vector<double> re;
  for (int j = 0; j < 6; ++j) re.push_back(scan.sr_max.values(j).real());
  std::sort(re.begin(), re.end());
  const double lam1 = re[0], lam2 = re[1];

  const double rc1 = rc_constant(v.rl_out(), v.cl_sys(), v.ca());
  const double rc2 = rc_constant(v.rr_out(), v.cr_sys(), v.cpa());

  const double d_lam1 = std::abs(lam1 / kRefLambda1 - 1.0);
  const double d_lam2 = std::abs(lam2 / kRefLambda2 - 1.0);
  const double d_tau1 = std::abs(scan.tau1 / kRefTau1 - 1.0);
  const double d_tau2 = std::abs(scan.tau2 / kRefTau2 - 1.0);
  const double d_rc1 = std::abs(scan.tau1 / rc1 - 1.0);
  const double d_rc2 = std::abs(scan.tau2 / rc2 - 1.0);
  const double d_tmax = circular_gap(scan.sr_max.t, kRefSrMaxT, ttot);
  const double d_tmin = circular_gap(scan.sr_min.t, kRefSrMinT, ttot);

  CheckResult r;
  r.pass = d_lam1 <= 0.01 && d_lam2 <= 0.01 && d_tau1 <= 0.05 &&
           d_tau2 <= 0.05 && d_rc1 <= 0.05 && d_rc2 <= 0.05 &&
           d_tmax <= 2e-3 && d_tmin <= 2e-3;
  r.detail = fmt(
      "lambda (%.2f, %.2f) off by (%.2f%%, %.2f%%); tau (%.5f, %.5f) vs "
      "refs (%.1f%%, %.1f%%) vs RC (%.1f%%, %.1f%%); peak/trough time gaps "
      "(%.2f, %.2f) ms",
      lam1, lam2, 100 * d_lam1, 100 * d_lam2, scan.tau1, scan.tau2,
      100 * d_tau1, 100 * d_tau2, 100 * d_rc1, 100 * d_rc2, 1e3 * d_tmax,
      1e3 * d_tmin);
  return r;
}

// --------------------------------------------------------------- criterion 3

CheckResult criterion_rk4(const StateTrajectory& ref) {
  const ParameterVector v = default_parameters();

  // Pl below Pa while the reference says the aortic valve is open, by a
  // margin that grid-edge grazing cannot produce
  const auto violation_mmhg = [&](const StateTrajectory& rk) {
    double worst = 0.0;
    const Eigen::Index n = std::min(rk.t.size(), ref.t.size());
    for (Eigen::Index i = 0; i < n; ++i)
      if (ref.q(i, 1) > 0.0)
        worst = std::min(worst, (rk.p(i, 0) - rk.p(i, 1)) * kBaryeToMmHg);
    return -worst;
  };

  SolverConfig coarse;
  coarse.method = Method::kRk4;
  coarse.dt = 2e-2;
  double coarse_viol = 0.0;
  bool coarse_unstable = false;
  try {
    coarse_viol = violation_mmhg(simulate_rk4(v, coarse));
    coarse_unstable = coarse_viol > 1.0;
  } catch (const std::exception&) {
    coarse_unstable = true;  // blow-up is instability too
    coarse_viol = std::numeric_limits<double>::infinity();
  }

  SolverConfig fine = coarse;
  fine.dt = 4e-3;
  const StateTrajectory rk_fine = simulate_rk4(v, fine);
  const double fine_viol = violation_mmhg(rk_fine);

  const OutputVector y_rk = extract_outputs(rk_fine, v).y;
  const OutputVector y_ref = extract_outputs(ref, v).y;
  double dmax = 0.0;
  for (int k = kOutPaSys; k <= kOutPcvp; ++k)  // the pressure block, mmHg
    dmax = std::max(dmax, std::abs(y_rk(k) - y_ref(k)));

  CheckResult r;
  r.pass = coarse_unstable && fine_viol <= 1.0 && dmax <= 0.5;
  r.detail = fmt(
      "dt=2e-2 valve-interval violation %.1f mmHg (unstable: %s); dt=4e-3 "
      "violation %.3f mmHg, pressure outputs within %.3f mmHg of the "
      "implicit reference (limit 0.5)",
      coarse_viol, coarse_unstable ? "yes" : "no", fine_viol, dmax);
  return r;
}

// --------------------------------------------------------------- criterion 4

CheckResult criterion_emulator(const ModelBundle& b, const Dataset& ds) {
  const MatrixXd v = ds.v_of(Split::kValidation);
  const MatrixXd y = ds.y_of(Split::kValidation);
  const MatrixXd y_hat = b.emulate(v);

  std::vector<double> rel(static_cast<std::size_t>(v.rows()));
  for (Eigen::Index i = 0; i < v.rows(); ++i)
    rel[static_cast<std::size_t>(i)] =
        (y_hat.row(i) - y.row(i)).norm() / y.row(i).norm();
  std::sort(rel.begin(), rel.end());
  const double med = rel[rel.size() / 2];
  const double worst = rel.back();

  CheckResult r;
  r.pass = med < 0.02 && worst < 0.05;
  r.detail = fmt("validation relative l2: median %.3f%% (limit 2%%), max "
                 "%.3f%% (limit 5%%) over %zu samples",
                 100 * med, 100 * worst, rel.size());
  return r;
}

// --------------------------------------------------------------- criterion 5

CheckResult criterion_inversion(const ModelBundle& b, const fs::path& out) {
  const OutputVector y_star = ref_target();
  Rng rng(kSynTrainSeed + 7);
  stage("inverting the reference target through the exact solver (100 draws)");
  const InversionResult res =
      invert(b, y_star, 100, rng, ReconSource::kSimulator, SolverConfig{});
  save_inversion_csv(res, (out / "inversion_reference.csv").string());

  int flagged = 0, simulated = 0;
  for (std::size_t i = 0; i < res.out_of_range.size(); ++i) {
    flagged += res.out_of_range[i] ? 1 : 0;
    simulated += res.simulated[i] ? 1 : 0;
  }

  const double y_norm = y_star.norm();
  double max_rel = 0.0;
  OutputVector mean_abs = OutputVector::Zero();
  for (Eigen::Index i = 0; i < res.y_hat.rows(); ++i) {
    if (!res.simulated[static_cast<std::size_t>(i)]) continue;
    max_rel = std::max(
        max_rel, (res.y_hat.row(i).transpose() - y_star).norm() / y_norm);
    mean_abs += (res.y_hat.row(i).transpose() - y_star).cwiseAbs();
  }
  if (simulated > 0) mean_abs /= static_cast<double>(simulated);

  double worst_ratio = 0.0;
  int worst_comp = 0;
  for (int k = 0; k < kNumOutputs; ++k) {
    const double ratio = mean_abs(k) / kRefMeanAbsErr[k];
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst_comp = k;
    }
  }

  CheckResult r;
  r.pass = flagged == 0 && simulated == 100 && max_rel <= 0.01 &&
           worst_ratio <= 5.0;
  r.detail = fmt(
      "%d/100 decodes in range and simulated; max relative l2 "
      "reconstruction error %.3f%% (limit 1%%); worst per-component mean "
      "absolute error %.2fx the reference (%s, limit 5x)",
      simulated, 100 * max_rel, worst_ratio,
      output_names()[static_cast<std::size_t>(worst_comp)].c_str());
  return r;
}

// --------------------------------------------------------------- criterion 6

CheckResult criterion_manifold(const ModelBundle& b, const fs::path& out) {
  const OutputVector y_star = ref_target();
  Rng rng(kSynTrainSeed + 8);
  stage("decoding 5000 manifold points");
  const ManifoldSample ms = manifold(b, y_star, 5000, rng);
  save_spectrum_csv(ms, (out / "manifold_spectrum.csv").string());

  // independent oracle on the same preprocessed matrix
  MatrixXd x = ms.points;
  for (Eigen::Index j = 0; j < kNumParams; ++j) {
    const double lo = b.prior.lo(j), w = b.prior.hi(j) - b.prior.lo(j);
    x.col(j) = (x.col(j).array() - lo) / w;
  }
  x.rowwise() -= x.colwise().mean().eval();
  Eigen::JacobiSVD<MatrixXd> svd(x);
  const double svd_gap =
      (ms.singular - svd.singularValues()).cwiseAbs().maxCoeff();

  const double ce12 = ms.cumulative_energy(11);
  CheckResult r;
  r.pass = ce12 >= 0.97 && svd_gap <= 1e-8;
  r.detail = fmt("cumulative energy at 12 modes %.4f (limit 0.97); worst "
                 "singular-value gap to the dense SVD %.1e (limit 1e-8)",
                 ce12, svd_gap);
  return r;
}

// --------------------------------------------------------------- criterion 7

CheckResult criterion_imputation(const ModelBundle& b, const fs::path& out) {
  OutputVector y_star = ref_target();
  for (const int k : kRefMissingMask) y_star(k) = 0.0;  // masked placeholders

  Rng rng(kSynTrainSeed + 9);
  stage("imputing the benchmark mask (top 4 of 100000, 5 draws each)");
  const ImputationResult res =
      impute(b, y_star, kRefMissingMask, 100000, 4, 5, rng,
             ReconSource::kSimulator, SolverConfig{});
  save_imputation_csv(res, (out / "imputation_reference.csv").string());

  std::vector<int> observed;
  for (int k = 0; k < kNumOutputs; ++k)
    if (std::find(kRefMissingMask.begin(), kRefMissingMask.end(), k) ==
        kRefMissingMask.end())
      observed.push_back(k);

  double obs_norm = 0.0;
  for (const int k : observed) obs_norm += kRefTarget[k] * kRefTarget[k];
  obs_norm = std::sqrt(obs_norm);

  double max_rel = 0.0;
  int rows = 0, simulated = 0;
  for (const InversionResult& inv : res.inversions) {
    for (Eigen::Index i = 0; i < inv.y_hat.rows(); ++i) {
      ++rows;
      simulated += inv.simulated[static_cast<std::size_t>(i)] ? 1 : 0;
      double err2 = 0.0;
      for (const int k : observed) {
        const double d = inv.y_hat(i, k) - kRefTarget[k];
        err2 += d * d;
      }
      max_rel = std::max(max_rel, std::sqrt(err2) / obs_norm);
    }
  }

  CheckResult r;
  r.pass = max_rel <= 0.02 && simulated == rows;
  r.detail = fmt("max relative l2 error on the 9 observed components "
                 "%.3f%% over %d reconstructions (limit 2%%), %d simulated",
                 100 * max_rel, rows, simulated);
  return r;
}

// --------------------------------------------------------------- criterion 8

CheckResult criterion_noise_ordering(const fs::path& out, bool fresh,
                                     const std::string& real_csv) {
  const PriorBox prior = PriorBox::ehr();
  const Dataset ds = dataset_cached(out / "data_ehr", prior, kEhrDatasetSize,
                                    kEhrDataSeed, fresh);

  TrainingConfig base_cfg = TrainingConfig::ehr();
  base_cfg.seed = kEhrTrainSeed;
  base_cfg.budget_scale =
      TrainingConfig::budget_scale_for(ds.v.rows()) * kEhrBudgetMultiplier;

  const ModelBundle base =
      bundle_cached(out / "bundle_ehr_base.json", fresh, [&]() {
        stage("training the shared cohort emulator");
        Timer t;
        ModelBundle b = make_bundle(base_cfg, ds.stats, ds.prior);
        const TrainResult tr = train_emulator(b, ds);
        stage(fmt("emulator: %d epochs, best test %.4f, %.0f s",
                  tr.epochs_run, tr.best_test, t.s()));
        return b;
      });

  const std::vector<double> deltas = {0.25, 0.5, 1.0, 2.0};
  std::vector<ModelBundle> bundles;
  for (const double d : deltas) {
    const std::string name = fmt("bundle_ehr_d%03d.json", int(100 * d));
    bundles.push_back(bundle_cached(out / name, fresh, [&]() {
      stage(fmt("training flow and decoder at noise %.2f", d));
      Timer t;
      ModelBundle b = base;
      b.cfg = base_cfg;
      b.cfg.noise_scale = d;
      train_flow(b, ds);
      train_vae_decoder(b, ds);
      stage(fmt("noise %.2f bundles done in %.0f s", d, t.s()));
      return b;
    }));
  }

  // fixed synthetic cohort, measured once at the baseline noise level
  const fs::path cohort_path = out / "cohort.csv";
  std::vector<EhrRecord> cohort;
  if (!fresh && fs::exists(cohort_path)) {
    cohort = load_ehr_csv(cohort_path.string());
  } else {
    stage("simulating the synthetic cohort");
    PseudoEhrConfig pc;
    pc.n_patients = kCohortSize;
    pc.noise_scale = kCohortNoise;
    pc.seed = kCohortSeed;
    pc.prior = prior;
    cohort = make_pseudo_ehr(pc);
    write_ehr_csv(cohort_path.string(), cohort);
  }

  EhrInferenceConfig rc;
  rc.m = 20000;
  rc.top_k = 4;
  rc.n_w = 100;
  rc.min_present = 10;

  std::vector<ErrorReport> reports;
  for (std::size_t i = 0; i < deltas.size(); ++i) {
    stage(fmt("error report at training noise %.2f", deltas[i]));
    rc.tag = fmt("delta=%.2f", deltas[i]);
    reports.push_back(ehr_error_report(bundles[i], cohort, rc, kReportSeed));
  }
  save_error_report_csv(reports, (out / "error_table.csv").string());

  if (!real_csv.empty()) {
    stage("evaluating the supplied cohort CSV");
    const std::vector<EhrRecord> real = load_ehr_csv(real_csv, true);
    std::vector<ErrorReport> real_reports;
    for (std::size_t i = 0; i < deltas.size(); ++i) {
      rc.tag = fmt("delta=%.2f", deltas[i]);
      real_reports.push_back(
          ehr_error_report(bundles[i], real, rc, kReportSeed));
    }
    save_error_report_csv(real_reports,
                          (out / "error_table_real.csv").string());
  }

  const ErrorReport& lo = reports[1];  // delta = 0.5
  const ErrorReport& hi = reports[3];  // delta = 2.0
  const bool hr_ordered = hi.e(kOutHr) > lo.e(kOutHr);
  const bool pa_ordered = hi.e(kOutPaSys) > lo.e(kOutPaSys);

  CheckResult r;
  r.pass = hr_ordered && pa_ordered;
  r.detail = fmt(
      "Hr error %.3f -> %.3f bpm and Pa_sys error %.3f -> %.3f mmHg from "
      "noise 0.5 to 2.0 (both must increase strictly)%s",
      lo.e(kOutHr), hi.e(kOutHr), lo.e(kOutPaSys), hi.e(kOutPaSys),
      real_csv.empty() ? "" : "; full table written for the supplied CSV");
  return r;
}

// --------------------------------------------------------------- criterion 9

double rel_gap(double a, double b) {
  return std::abs(a - b) / std::max({1e-12, std::abs(a), std::abs(b)});
}

template <class Loss>
double worst_fd_gap(std::vector<nn::Parameter*> params, Loss loss) {
  const double h = 1e-5;
  loss(true);
  std::vector<MatrixXd> analytic;
  for (nn::Parameter* p : params) analytic.push_back(p->grad);
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    nn::Parameter& p = *params[k];
    for (Eigen::Index i = 0; i < p.value.rows(); ++i)
      for (Eigen::Index j = 0; j < p.value.cols(); ++j) {
        const double keep = p.value(i, j);
        p.value(i, j) = keep + h;
        const double f_hi = loss(false);
        p.value(i, j) = keep - h;
        const double f_lo = loss(false);
        p.value(i, j) = keep;
        worst = std::max(
            worst, rel_gap(analytic[k](i, j), (f_hi - f_lo) / (2.0 * h)));
      }
  }
  return worst;
}

CheckResult criterion_properties(const ModelBundle& syn,
                                 const StateTrajectory& traj) {
  std::vector<std::string> fails;
  Rng rng(33);

  // finite-difference gradients through an MLP regression loss
  {
    nn::Mlp mlp({5, 8, 4}, nn::Activation::kSwish);
    mlp.init(rng);
    MatrixXd x(12, 5), y(12, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i)
      x.data()[i] = rng.uniform(-1.0, 1.0);
    for (Eigen::Index i = 0; i < y.size(); ++i)
      y.data()[i] = rng.uniform(-1.0, 1.0);
    const auto loss = [&](bool back) {
      nn::Tape t;
      for (nn::Parameter* p : mlp.parameters()) p->zero_grad();
      nn::Var L = emulator_loss_graph(t, mlp, x, y);
      if (back) t.backward(L);
      return t.value(L)(0, 0);
    };
    const double gap = worst_fd_gap(mlp.parameters(), loss);
    if (gap >= 1e-5) fails.push_back(fmt("mlp gradient gap %.1e", gap));
  }

  // finite-difference gradients through the flow density
  {
    nn::RealNvp flow(6, 2, 6, 1, true);
    flow.init(rng);
    for (nn::Parameter* p : flow.parameters())
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value.data()[i] += 0.2 * rng.normal();
    for (nn::CouplingBlock& blk : flow.blocks) {
      blk.bn.run_mean.setConstant(0.3);
      blk.bn.run_var.setConstant(1.7);
    }
    MatrixXd y(9, 6);
    for (Eigen::Index i = 0; i < y.size(); ++i)
      y.data()[i] = rng.uniform(-2.0, 2.0);
    const auto loss = [&](bool back) {
      nn::Tape t;
      for (nn::Parameter* p : flow.parameters()) p->zero_grad();
      nn::Var L = t.sum_all(flow.log_prob_graph(t, y, false));
      if (back) t.backward(L);
      return t.value(L)(0, 0);
    };
    const double gap = worst_fd_gap(flow.parameters(), loss);
    if (gap >= 1e-5) fails.push_back(fmt("flow gradient gap %.1e", gap));
  }

  // bijectivity of perturbed flows, with and without batch norm
  for (const bool bn : {false, true}) {
    nn::RealNvp flow(16, 4, 8, 1, bn);
    flow.init(rng);
    for (nn::Parameter* p : flow.parameters())
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value.data()[i] += 0.2 * rng.normal();
    if (bn)
      for (nn::CouplingBlock& blk : flow.blocks) {
        blk.bn.run_mean.setConstant(0.4);
        blk.bn.run_var.setConstant(2.1);
      }
    MatrixXd z(20, 16);
    for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
    const MatrixXd y = flow.forward(z).first;
    const MatrixXd z2 = flow.inverse(y).first;
    const double gap = (z - z2).cwiseAbs().maxCoeff();
    if (gap >= 1e-8)
      fails.push_back(fmt("flow roundtrip gap %.1e (bn=%d)", gap, int(bn)));
  }

  // KL divergence closed forms: unit shift costs one half per dimension,
  // the standard normal costs nothing
  {
    nn::Tape t;
    const nn::Var kl1 = kl_graph(t, t.input(MatrixXd::Ones(3, 19)),
                                 t.input(MatrixXd::Zero(3, 19)));
    const nn::Var kl0 = kl_graph(t, t.input(MatrixXd::Zero(2, 19)),
                                 t.input(MatrixXd::Zero(2, 19)));
    if ((t.value(kl1).array() != 9.5).any())
      fails.push_back("shifted KL is not 9.5 exactly");
    if ((t.value(kl0).array() != 0.0).any())
      fails.push_back("standard-normal KL is not 0");
  }

  // the handwritten rhs and its matrix form agree along a real trajectory
  {
    const ParameterVector v = default_parameters();
    double worst = 0.0;
    const Eigen::Index step = std::max<Eigen::Index>(1, traj.t.size() / 200);
    for (Eigen::Index i = 0; i < traj.t.size(); i += step) {
      PressureState s;
      s.t = traj.t(i);
      s.p = traj.p.row(i).transpose();
      const Vector6 f = rhs(s, v);
      const LinearSystemForm lf = matrix_form(s, v);
      const double scale = std::max(1.0, f.cwiseAbs().maxCoeff());
      worst =
          std::max(worst, (f - (lf.A * s.p + lf.b)).cwiseAbs().maxCoeff() /
                              scale);
    }
    if (worst >= 1e-10)
      fails.push_back(fmt("rhs/matrix-form gap %.1e", worst));
  }

  // parameter counts of both architecture presets
  {
    SplitStats id;
    id.v_mean = VectorXd::Zero(kNumParams);
    id.v_std = VectorXd::Ones(kNumParams);
    id.y_mean = VectorXd::Zero(kNumOutputs);
    id.y_std = VectorXd::Ones(kNumOutputs);
    const ModelBundle a =
        make_bundle(TrainingConfig::synthetic(), id, PriorBox::structural());
    const ModelBundle b =
        make_bundle(TrainingConfig::ehr(), id, PriorBox::ehr());
    if (a.emulator.count() != 24376 || a.encoder.count() != 6246 ||
        a.decoder.count() != 20439 || a.flow.count() != 51712)
      fails.push_back(fmt("synthetic parameter counts %ld/%ld/%ld/%ld",
                          long(a.emulator.count()), long(a.encoder.count()),
                          long(a.decoder.count()), long(a.flow.count())));
    if (b.emulator.count() != 42096 || b.flow.count() != 20280)
      fails.push_back(fmt("cohort parameter counts %ld/%ld",
                          long(b.emulator.count()), long(b.flow.count())));
  }

  // determinism under fixed seeds: data generation and inversion
  {
    const Dataset d1 =
        generate(PriorBox::structural(), 40, SolverConfig{}, 977, 1);
    const Dataset d2 =
        generate(PriorBox::structural(), 40, SolverConfig{}, 977, 1);
    if (d1.v != d2.v || d1.y != d2.y)
      fails.push_back("dataset generation is seed-dependent only");
    Rng ra(55), rb(55);
    const InversionResult ia = invert(syn, ref_target(), 10, ra);
    const InversionResult ib = invert(syn, ref_target(), 10, rb);
    if (ia.v_hat != ib.v_hat || ia.y_hat != ib.y_hat)
      fails.push_back("inversion is not reproducible under a fixed seed");
  }

  CheckResult r;
  r.pass = fails.empty();
  if (r.pass) {
    r.detail = "gradients, bijectivity, KL pins, rhs/matrix equivalence, "
               "parameter counts, determinism all hold";
  } else {
    r.detail = "failed:";
    for (const std::string& f : fails) r.detail += " [" + f + "]";
  }
  return r;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate: nine criteria, one verdict line each"};
  std::string out_dir = "acceptance-out";
  std::string ehr_csv;
  bool fresh = false;
  app.add_option("--out-dir", out_dir, "artifact cache directory");
  app.add_option("--ehr-csv", ehr_csv,
                 "optional real cohort CSV for the full error table");
  app.add_flag("--fresh", fresh, "rebuild all cached artifacts");
  CLI11_PARSE(app, argc, argv);

  const fs::path out(out_dir);
  fs::create_directories(out);

  std::vector<std::pair<std::string, CheckResult>> results;
  const auto report = [&](int num, const std::string& name, CheckResult r) {
    results.emplace_back(name, r);
    std::cout << "criterion " << num << " [" << name << "]: "
              << (r.pass ? "PASS" : "FAIL") << " - " << r.detail << "\n"
              << std::flush;
  };
  const auto guarded = [&](int num, const std::string& name, auto fn) {
    try {
      report(num, name, fn());
    } catch (const std::exception& e) {
      report(num, name, {false, std::string("exception: ") + e.what()});
    }
  };

  // the implicit baseline trajectory feeds criteria 1, 3, and 9
  Timer sim_timer;
  const StateTrajectory baseline =
      simulate(default_parameters(), SolverConfig{});
  const double sim_runtime = sim_timer.s();

  guarded(1, "volume conservation",
          [&] { return criterion_volume(baseline, sim_runtime); });
  guarded(2, "stiffness spectrum", [&] { return criterion_stiffness(); });
  guarded(3, "explicit-solver instability",
          [&] { return criterion_rk4(baseline); });

  Dataset data10k;
  ModelBundle syn;
  bool have_syn = false;
  try {
    data10k = dataset_cached(out / "data_syn", PriorBox::structural(),
                             kSynDatasetSize, kSynDataSeed, fresh);
    TrainingConfig tc = TrainingConfig::synthetic();
    tc.seed = kSynTrainSeed;
    tc.budget_scale = TrainingConfig::budget_scale_for(data10k.v.rows());
    syn = bundle_cached(out / "bundle_syn.json", fresh, [&]() {
      ModelBundle b = make_bundle(tc, data10k.stats, data10k.prior);
      for (const char* which : {"emulator", "flow", "vaed"}) {
        stage(fmt("training the %s network(s)", which));
        Timer t;
        TrainResult tr;
        if (std::string(which) == "emulator")
          tr = train_emulator(b, data10k);
        else if (std::string(which) == "flow")
          tr = train_flow(b, data10k);
        else
          tr = train_vae_decoder(b, data10k);
        stage(fmt("%s: %d epochs, best test %.5f, %.0f s", which,
                  tr.epochs_run, tr.best_test, t.s()));
      }
      return b;
    });
    have_syn = true;
  } catch (const std::exception& e) {
    const CheckResult err{false, std::string("exception: ") + e.what()};
    report(4, "emulator accuracy", err);
    report(5, "inversion reconstruction", err);
    report(6, "manifold spectrum", err);
    report(7, "missing-data imputation", err);
  }

  if (have_syn) {
    guarded(4, "emulator accuracy",
            [&] { return criterion_emulator(syn, data10k); });
    guarded(5, "inversion reconstruction",
            [&] { return criterion_inversion(syn, out); });
    guarded(6, "manifold spectrum",
            [&] { return criterion_manifold(syn, out); });
    guarded(7, "missing-data imputation",
            [&] { return criterion_imputation(syn, out); });
  }

  guarded(8, "noise-level ordering",
          [&] { return criterion_noise_ordering(out, fresh, ehr_csv); });

  if (have_syn) {
    guarded(9, "property suite",
            [&] { return criterion_properties(syn, baseline); });
  } else {
    report(9, "property suite",
           {false, "skipped: the synthetic bundle is unavailable"});
  }

  int passed = 0;
  for (const auto& [name, r] : results) passed += r.pass ? 1 : 0;
  std::cout << passed << " of " << results.size() << " criteria pass\n";
  return passed == static_cast<int>(results.size()) ? 0 : 1;
}
