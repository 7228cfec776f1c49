#pragma once

#include <string>
#include <vector>

#include "cvsim/training.hpp"

namespace cvsim {

enum class ReconSource { kEmulator, kSimulator };

// One amortized inversion: N_w latent draws decoded for a single target,
// reconstructed through the emulator or the exact simulator.
struct InversionResult {
  MatrixXd v_hat;    // n_w x 23, physical units
  MatrixXd y_hat;    // n_w x 16, reconstructions of the target
  MatrixXd w;        // n_w x latent, draws used
  MatrixXd abs_err;  // n_w x 16, |target - y_hat|
  // decoded point left the 10%-widened prior box; such rows are never fed
  // to the exact simulator and fall back to the emulator
  std::vector<bool> out_of_range;
  // row actually reconstructed by the exact solver (simulator source only;
  // integration failures fall back to the emulator and stay false)
  std::vector<bool> simulated;
  ReconSource requested = ReconSource::kEmulator;
};

InversionResult invert(const ModelBundle& b, const OutputVector& y,
                       Eigen::Index n_w, Rng& rng,
                       ReconSource source = ReconSource::kEmulator,
                       const SolverConfig& sim_cfg = SolverConfig());

void save_inversion_csv(const InversionResult& res, const std::string& path);

// Decoded sample of the solution manifold of one fixed observation, with
// the spectrum of its prior-scaled, column-centered data matrix.
struct ManifoldSample {
  MatrixXd points;             // K x 23, physical units
  VectorXd singular;           // 23, descending
  VectorXd cumulative_energy;  // 23, nondecreasing, last entry exactly 1
};

// Eigenvalues of a symmetric matrix by cyclic Jacobi sweeps, descending.
VectorXd symmetric_eigenvalues_jacobi(MatrixXd a);

// Singular values of x via the Gram-matrix route used by manifold().
VectorXd singular_values_via_gram(const MatrixXd& x);

ManifoldSample manifold(const ModelBundle& b, const OutputVector& y_star,
                        Eigen::Index k, Rng& rng);

// parallel-coordinate table: one row per decoded point
void save_manifold_csv(const ManifoldSample& ms, const std::string& path);
// mode index, singular value, cumulative energy
void save_spectrum_csv(const ManifoldSample& ms, const std::string& path);

// Density ranking order: log-probs descending, ties kept in sample order.
std::vector<Eigen::Index> rank_by_log_prob(const VectorXd& log_prob);

// Missing-data inversion: flow candidates with the observed components
// overwritten, ranked by density; the top picks are each inverted.
struct ImputationResult {
  std::vector<int> missing;        // sorted component indices
  MatrixXd candidates;             // top_k x 16, physical units
  VectorXd candidate_log_prob;     // top_k, nonincreasing
  std::vector<Eigen::Index> candidate_index;  // positions in the flow draw
  std::vector<InversionResult> inversions;    // one per candidate
  bool nothing_observed = false;   // every component missing: pure sampling
};

ImputationResult impute(const ModelBundle& b, const OutputVector& y_star,
                        const std::vector<int>& missing, Eigen::Index m,
                        Eigen::Index top_k, Eigen::Index n_w, Rng& rng,
                        ReconSource source = ReconSource::kEmulator,
                        const SolverConfig& sim_cfg = SolverConfig());

void save_imputation_csv(const ImputationResult& res, const std::string& path);

// Per-component mean absolute reconstruction error over a patient cohort:
// e_k averages |y_k - Y_hat_ik| over the patients with component k present
// and over all decoded draws.
struct ErrorReport {
  VectorXd e;                              // 16, NaN where never measured
  std::array<int, kNumOutputs> counts{};   // patients with component k
  int n_patients = 0;                      // cohort size after filtering
  std::string tag;                         // e.g. "delta=0.5"
};

// Everything one cohort pass needs. n_w decodes per patient are spread
// evenly over the top_k density-ranked candidates.
struct EhrInferenceConfig {
  Eigen::Index m = 100000;  // flow candidates per patient
  Eigen::Index top_k = 4;
  Eigen::Index n_w = 100;   // total decodes per patient
  int min_present = 10;     // keep patients with strictly more measurements
  int workers = 1;
  std::string tag;
};

// One patient's predictions for plot-ready dumps.
struct PatientPrediction {
  std::string id;
  OutputVector target;  // NaN where absent
  std::array<bool, kNumOutputs> present{};
  MatrixXd y_hat;       // n_w x 16 emulator reconstructions
};

ErrorReport ehr_error_report(const ModelBundle& b,
                             const std::vector<EhrRecord>& records,
                             const EhrInferenceConfig& cfg, std::uint64_t seed,
                             std::vector<PatientPrediction>* dumps = nullptr);

// component table with one error column per report; absent components
// print None; counts come from the first report
void save_error_report_csv(const std::vector<ErrorReport>& reports,
                           const std::string& path);
// long format: patient, component, target, +-3 sigma band, draw, prediction
void save_patient_predictions_csv(const std::vector<PatientPrediction>& dumps,
                                  const std::string& path);

// Synthetic stand-in for a clinical cohort: exact-simulator outputs with
// measurement noise and a missingness pattern shaped like the real table
// (left ventricular systolic volume never measured, venous pressures rare).
struct PseudoEhrConfig {
  int n_patients = 46;
  double noise_scale = 0.5;  // measurement noise in units of reported stds
  std::uint64_t seed = 1;
  int workers = 1;
  PriorBox prior = PriorBox::ehr();
  SolverConfig solver;
};

std::vector<EhrRecord> make_pseudo_ehr(const PseudoEhrConfig& cfg);

}  // namespace cvsim
