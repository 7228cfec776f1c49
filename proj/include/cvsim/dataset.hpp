#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cvsim/outputs.hpp"
#include "cvsim/parameters.hpp"
#include "cvsim/solvers.hpp"

namespace cvsim {

// Uniform box prior over the 23 model parameters, stored as absolute
// bounds. Presets scale the default vector:
//   structural: compliances +-50%, everything else +-30%
//   ehr: Hr -20%/+60%, compliances and resistances -80%/+60%, rest +-30%
struct PriorBox {
  std::string name;
  Eigen::Matrix<double, kNumParams, 1> lo;
  Eigen::Matrix<double, kNumParams, 1> hi;

  static PriorBox structural();
  static PriorBox ehr();

  bool contains(const ParameterVector& v) const;
  // grow every side by `frac` of its width
  PriorBox widened(double frac) const;
};

// throws std::invalid_argument for names other than the two presets
PriorBox prior_preset(const std::string& name);

ParameterVector sample_from_prior(const PriorBox& prior, Rng& rng);
// n x 23, row i drawn from the stream (seed, i)
MatrixXd sample_prior(const PriorBox& prior, Eigen::Index n, std::uint64_t seed);

// One prior draw pushed through the exact simulator. Integration failures
// and invalid draws are resampled from the (seed, index, attempt) stream.
struct PriorDraw {
  ParameterVector v;
  OutputVector y;
  int attempts = 1;
  bool periodicity_warning = false;
};
PriorDraw simulate_prior_draw(const PriorBox& prior, const SolverConfig& cfg,
                              std::uint64_t seed, std::uint64_t index,
                              int max_attempts = 64);

enum class Split : int { kTrain = 0, kTest = 1, kValidation = 2 };

// per-column z-score statistics of the training split
struct SplitStats {
  VectorXd v_mean, v_std;  // 23
  VectorXd y_mean, y_std;  // 16
};

struct Dataset {
  MatrixXd v;               // n x 23
  MatrixXd y;               // n x 16
  std::vector<Split> split;  // n tags
  SplitStats stats;

  std::string prior_name;
  PriorBox prior;
  std::uint64_t seed = 0;
  SolverConfig cfg;
  std::int64_t n_resampled = 0;            // draws replaced after failures
  std::int64_t n_periodicity_warnings = 0;

  Eigen::Index rows(Split s) const;
  // row-subset views materialized as copies
  MatrixXd v_of(Split s) const;
  MatrixXd y_of(Split s) const;
};

// Simulate n draws from the prior and tag splits in the 37500/12500/4000
// proportions. Failed integrations are resampled from the stream
// (seed, index, attempt); a failure rate above 5% aborts.
Dataset generate(const PriorBox& prior, Eigen::Index n, const SolverConfig& cfg,
                 std::uint64_t seed, int workers = 1);

// z-score transform with per-column stats; zero or non-finite std throws,
// naming the offending column via `names` when provided
MatrixXd normalize(const MatrixXd& x, const VectorXd& mean, const VectorXd& std,
                   const std::vector<std::string>* names = nullptr);
MatrixXd denormalize(const MatrixXd& x, const VectorXd& mean,
                     const VectorXd& std);

// train.csv/test.csv/validation.csv plus metadata.json under dir
void save_dataset(const Dataset& ds, const std::string& dir);
Dataset load_dataset(const std::string& dir);

struct EhrRecord {
  std::string id;
  OutputVector y = OutputVector::Zero();  // physical units; NaN where absent
  std::array<bool, kNumOutputs> present{};
  int n_present = 0;
};

// Header must use the clinical output short names; blanks mean missing.
// Unrecognized columns throw unless allow_extra is set, in which case they
// are skipped and reported through `ignored`.
std::vector<EhrRecord> load_ehr_csv(const std::string& path,
                                    bool allow_extra = false,
                                    std::vector<std::string>* ignored = nullptr);
void write_ehr_csv(const std::string& path,
                   const std::vector<EhrRecord>& records);

// patients with more than `min_present` recorded measurements
std::vector<EhrRecord> filter_by_present(const std::vector<EhrRecord>& records,
                                         int min_present = 10);

}  // namespace cvsim
