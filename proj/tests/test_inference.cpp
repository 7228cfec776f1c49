#include <doctest.h>

#include <unistd.h>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvsim/inference.hpp"
#include "cvsim/io.hpp"

using namespace cvsim;

namespace {

SplitStats identity_stats() {
  SplitStats s;
  s.v_mean = VectorXd::Zero(kNumParams);
  s.v_std = VectorXd::Ones(kNumParams);
  s.y_mean = VectorXd::Zero(kNumOutputs);
  s.y_std = VectorXd::Ones(kNumOutputs);
  return s;
}

PriorBox box_around(double lo, double hi) {
  PriorBox p;
  p.name = "toy";
  p.lo.setConstant(lo);
  p.hi.setConstant(hi);
  return p;
}

// single-layer nets are exact affine maps, which keeps the oracles in
// closed form: v = [y, w] Wd + cd, y = v We + ce
struct ToyMaps {
  MatrixXd a;  // 16 x 23, y part of the decoder
  MatrixXd b;  // L x 23, latent part of the decoder
  Eigen::RowVectorXd c;
};

ModelBundle affine_bundle(const ToyMaps& maps, const PriorBox& prior,
                          Eigen::Index latent) {
  ModelBundle b;
  b.cfg.latent_dim = latent;
  b.stats = identity_stats();
  b.prior = prior;

  b.decoder =
      nn::Mlp({kNumOutputs + latent, kNumParams}, nn::Activation::kSwish);
  b.decoder.layers[0].w.value.topRows(kNumOutputs) = maps.a;
  b.decoder.layers[0].w.value.bottomRows(latent) = maps.b;
  b.decoder.layers[0].b.value = maps.c;

  b.emulator = nn::Mlp({kNumParams, kNumOutputs}, nn::Activation::kSwish);
  b.emulator.layers[0].w.value.setZero();
  b.emulator.layers[0].b.value.setZero();

  b.encoder =
      nn::Mlp({kNumParams, 2 * latent}, nn::Activation::kSwish);
  b.encoder.layers[0].w.value.setZero();
  b.encoder.layers[0].b.value.setZero();

  Rng rng(5);
  b.flow = nn::RealNvp(kNumOutputs, 2, 4, 1, false);
  b.flow.init(rng);  // coupling heads stay zero: exact identity flow

  b.has_emulator = b.has_flow = b.has_vaed = true;
  return b;
}

MatrixXd random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double lo,
                       double hi) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    static int counter = 0;
    path = std::filesystem::temp_directory_path() /
           ("cvsim_inf_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const {
    return (path / name).string();
  }
};

}  // namespace

TEST_CASE("jacobi eigenvalues match the dense solver") {
  Rng rng(11);
  const MatrixXd m = random_matrix(rng, 23, 23, -2.0, 2.0);
  const MatrixXd sym = 0.5 * (m + m.transpose());
  const VectorXd mine = symmetric_eigenvalues_jacobi(sym);
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(sym);
  const VectorXd ref = es.eigenvalues().reverse();
  CHECK((mine - ref).cwiseAbs().maxCoeff() < 1e-12);

  CHECK(symmetric_eigenvalues_jacobi(MatrixXd::Constant(1, 1, 4.0))(0) == 4.0);
  CHECK_THROWS_AS((void)symmetric_eigenvalues_jacobi(MatrixXd::Zero(2, 3)),
                  std::invalid_argument);
}

TEST_CASE("gram-route singular values match the dense SVD oracle") {
  Rng rng(13);
  SUBCASE("skinny uniform matrix") {
    const MatrixXd x = random_matrix(rng, 500, 23, -1.0, 1.0);
    const VectorXd mine = singular_values_via_gram(x);
    Eigen::JacobiSVD<MatrixXd> svd(x);
    CHECK((mine - svd.singularValues()).cwiseAbs().maxCoeff() < 1e-8);
  }
  SUBCASE("gaussian matrix at the published sample count") {
    MatrixXd x(5000, 23);
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = rng.normal();
    x.rowwise() -= x.colwise().mean().eval();
    const VectorXd mine = singular_values_via_gram(x);
    Eigen::JacobiSVD<MatrixXd> svd(x);
    const VectorXd ref = svd.singularValues();
    CHECK((mine - ref).cwiseAbs().maxCoeff() < 1e-8);

    // cumulative energy agrees through the same definition
    const double tot_m = mine.array().square().sum();
    const double tot_r = ref.array().square().sum();
    double pm = 0.0, pr = 0.0, worst = 0.0;
    for (Eigen::Index i = 0; i < 23; ++i) {
      pm += mine(i) * mine(i);
      pr += ref(i) * ref(i);
      worst = std::max(worst, std::abs(pm / tot_m - pr / tot_r));
    }
    CHECK(worst < 1e-8);
  }
}

TEST_CASE("density ranking is stable with index tie-breaks") {
  VectorXd lp(4);
  lp << 1.0, 3.0, 3.0, 2.0;
  const std::vector<Eigen::Index> order = rank_by_log_prob(lp);
  CHECK(order == std::vector<Eigen::Index>{1, 2, 3, 0});

  // appending a duplicate of the current best keeps the head of the order
  VectorXd lp2(5);
  lp2 << 1.0, 3.0, 3.0, 2.0, 3.0;
  const std::vector<Eigen::Index> order2 = rank_by_log_prob(lp2);
  CHECK(order2 == std::vector<Eigen::Index>{1, 2, 4, 3, 0});
  CHECK(order2[0] == order[0]);
  CHECK(order2[1] == order[1]);
}

TEST_CASE("inversion decodes an affine map with range flags") {
  Rng maps_rng(3);
  ToyMaps maps;
  maps.a = random_matrix(maps_rng, kNumOutputs, kNumParams, -0.05, 0.05);
  maps.b = MatrixXd::Zero(3, kNumParams);
  maps.b(0, 0) = 10.0;  // latent 0 drives parameter 0 out of the box
  maps.c = Eigen::RowVectorXd::Zero(kNumParams);
  const ModelBundle b = affine_bundle(maps, box_around(-1.0, 1.0), 3);

  OutputVector y;
  for (int k = 0; k < kNumOutputs; ++k) y(k) = 0.1 * k - 0.4;

  Rng rng(21);
  const InversionResult res = invert(b, y, 64, rng);
  CHECK(res.v_hat.rows() == 64);
  CHECK(res.v_hat.cols() == kNumParams);
  CHECK(res.w.cols() == 3);
  CHECK(res.requested == ReconSource::kEmulator);

  // closed-form decode and error
  const MatrixXd y_rep = y.transpose().replicate(64, 1);
  const MatrixXd expect =
      y_rep * maps.a + res.w * maps.b + maps.c.replicate(64, 1);
  CHECK((res.v_hat - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((res.y_hat).cwiseAbs().maxCoeff() == 0.0);  // zero emulator
  CHECK((res.abs_err - y_rep.cwiseAbs()).cwiseAbs().maxCoeff() == 0.0);

  // the widened box is [-1.2, 1.2]; only latent 0 can leave it
  int n_flagged = 0;
  for (Eigen::Index i = 0; i < 64; ++i) {
    const double p0 = expect(i, 0);
    const bool expect_flag = std::abs(p0) > 1.2;
    CHECK(res.out_of_range[static_cast<std::size_t>(i)] == expect_flag);
    CHECK_FALSE(res.simulated[static_cast<std::size_t>(i)]);
    n_flagged += expect_flag ? 1 : 0;
  }
  CHECK(n_flagged > 0);
  CHECK(n_flagged < 64);

  SUBCASE("fixed seed is bit-identical") {
    Rng r1(9), r2(9);
    const InversionResult a = invert(b, y, 8, r1);
    const InversionResult c = invert(b, y, 8, r2);
    CHECK((a.v_hat - c.v_hat).cwiseAbs().maxCoeff() == 0.0);
    CHECK((a.w - c.w).cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("guards") {
    Rng r(1);
    CHECK_THROWS_AS((void)invert(b, y, 0, r), std::invalid_argument);
    OutputVector bad = y;
    bad(3) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS((void)invert(b, bad, 1, r), std::invalid_argument);
    ModelBundle untrained = b;
    untrained.has_vaed = false;
    CHECK_THROWS_AS((void)invert(untrained, y, 1, r), std::invalid_argument);
  }
}

TEST_CASE("simulator reconstruction runs the exact solver on in-range rows") {
  // decoder pinned to the healthy baseline regardless of input
  ToyMaps maps;
  maps.a = MatrixXd::Zero(kNumOutputs, kNumParams);
  maps.b = MatrixXd::Zero(2, kNumParams);
  maps.c = default_parameters().values.transpose();
  const ModelBundle b = affine_bundle(maps, PriorBox::structural(), 2);

  const SolverConfig cfg;
  const StateTrajectory traj = simulate(default_parameters(), cfg);
  const OutputVector y_ref = extract_outputs(traj, default_parameters()).y;

  Rng rng(31);
  const InversionResult res =
      invert(b, y_ref, 2, rng, ReconSource::kSimulator, cfg);
  for (Eigen::Index i = 0; i < 2; ++i) {
    CHECK(res.simulated[static_cast<std::size_t>(i)]);
    CHECK_FALSE(res.out_of_range[static_cast<std::size_t>(i)]);
    CHECK((res.y_hat.row(i).transpose() - y_ref).cwiseAbs().maxCoeff() ==
          0.0);
  }
  CHECK(res.abs_err.cwiseAbs().maxCoeff() == 0.0);

  SUBCASE("out-of-range rows never reach the solver") {
    ModelBundle tight = b;
    tight.prior = box_around(-1.0, 1.0);  // baseline is far outside
    Rng r(7);
    const InversionResult flagged =
        invert(tight, y_ref, 2, r, ReconSource::kSimulator, cfg);
    for (Eigen::Index i = 0; i < 2; ++i) {
      CHECK(flagged.out_of_range[static_cast<std::size_t>(i)]);
      CHECK_FALSE(flagged.simulated[static_cast<std::size_t>(i)]);
      // emulator fallback: the zero net
      CHECK(flagged.y_hat.row(i).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("manifold spectrum separates live and frozen directions") {
  ToyMaps maps;
  maps.a = MatrixXd::Zero(kNumOutputs, kNumParams);
  maps.b = MatrixXd::Zero(3, kNumParams);
  maps.b(0, 0) = 1.0;
  maps.b(1, 1) = 1.0;
  maps.b(2, 2) = 1.0;  // three live parameters, the rest constant
  maps.c = Eigen::RowVectorXd::Constant(kNumParams, 0.5);
  const ModelBundle b = affine_bundle(maps, box_around(-10.0, 10.0), 3);

  OutputVector y = OutputVector::Zero();
  Rng rng(41);
  const ManifoldSample ms = manifold(b, y, 400, rng);
  CHECK(ms.points.rows() == 400);

  for (Eigen::Index i = 0; i + 1 < 23; ++i)
    CHECK(ms.singular(i) >= ms.singular(i + 1));
  CHECK(ms.singular(3) < 1e-10);   // frozen directions
  CHECK(ms.singular(0) > 1e-2);    // live directions

  for (Eigen::Index i = 0; i + 1 < 23; ++i)
    CHECK(ms.cumulative_energy(i) <= ms.cumulative_energy(i + 1));
  CHECK(ms.cumulative_energy(22) == 1.0);
  CHECK(ms.cumulative_energy(2) >= 1.0 - 1e-15);

  // oracle on the same preprocessed matrix
  MatrixXd x = ms.points;
  for (Eigen::Index j = 0; j < kNumParams; ++j)
    x.col(j) = (x.col(j).array() + 10.0) / 20.0;
  x.rowwise() -= x.colwise().mean().eval();
  Eigen::JacobiSVD<MatrixXd> svd(x);
  VectorXd ref = VectorXd::Zero(23);
  ref.head(svd.singularValues().size()) = svd.singularValues();
  CHECK((ms.singular - ref).cwiseAbs().maxCoeff() < 1e-8);

  SUBCASE("repeated point collapses the spectrum") {
    // box and constant chosen so the [0,1] rescale is exact in binary,
    // making the centered matrix literally zero
    ToyMaps flat = maps;
    flat.b.setZero();
    flat.c = Eigen::RowVectorXd::Constant(kNumParams, 8.0);
    const ModelBundle c = affine_bundle(flat, box_around(0.0, 16.0), 3);
    Rng r(2);
    const ManifoldSample all_same = manifold(c, y, 50, r);
    CHECK(all_same.singular.cwiseAbs().maxCoeff() == 0.0);
    for (Eigen::Index i = 0; i < 23; ++i)
      CHECK(all_same.cumulative_energy(i) == 1.0);
  }

  SUBCASE("guards") {
    Rng r(2);
    CHECK_THROWS_AS((void)manifold(b, y, 22, r), std::invalid_argument);
    OutputVector bad = y;
    bad(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS((void)manifold(b, bad, 100, r), std::invalid_argument);
  }
}

TEST_CASE("imputation overwrites, ranks, and finds conditional modes") {
  ToyMaps maps;
  maps.a = MatrixXd::Zero(kNumOutputs, kNumParams);
  maps.b = MatrixXd::Zero(2, kNumParams);
  maps.c = Eigen::RowVectorXd::Zero(kNumParams);
  ModelBundle b = affine_bundle(maps, box_around(-5.0, 5.0), 2);

  OutputVector y;
  for (int k = 0; k < kNumOutputs; ++k) y(k) = 0.05 * k;

  SUBCASE("nothing missing: candidates equal the target exactly") {
    Rng rng(51);
    const ImputationResult res = impute(b, y, {}, 200, 3, 2, rng);
    CHECK_FALSE(res.nothing_observed);
    for (Eigen::Index i = 0; i < 3; ++i)
      CHECK((res.candidates.row(i).transpose() - y).cwiseAbs().maxCoeff() ==
            0.0);
    // identical densities: stable ranking keeps sample order
    CHECK(res.candidate_index ==
          std::vector<Eigen::Index>{0, 1, 2});
    CHECK(res.inversions.size() == 3);
    CHECK(res.inversions[0].v_hat.rows() == 2);
  }

  SUBCASE("identity flow: masked component lands near zero") {
    Rng rng(53);
    const ImputationResult res = impute(b, y, {2}, 20000, 4, 1, rng);
    CHECK(res.missing == std::vector<int>{2});
    // observed components pinned exactly
    for (Eigen::Index i = 0; i < 4; ++i)
      for (int k = 0; k < kNumOutputs; ++k)
        if (k != 2) CHECK(res.candidates(i, k) == y(k));
    // conditional mode of the standard normal is 0
    CHECK(std::abs(res.candidates(0, 2)) < 0.01);
    for (Eigen::Index i = 0; i + 1 < 4; ++i)
      CHECK(res.candidate_log_prob(i) >= res.candidate_log_prob(i + 1));
  }

  SUBCASE("stats shift the conditional mode into physical units") {
    ModelBundle shifted = b;
    shifted.stats.y_mean(2) = 5.0;
    shifted.stats.y_std(2) = 2.0;
    Rng rng(55);
    const ImputationResult res = impute(shifted, y, {2}, 20000, 1, 1, rng);
    CHECK(std::abs(res.candidates(0, 2) - 5.0) < 0.05);
  }

  SUBCASE("perturbed flow: top candidate matches a grid-search mode") {
    ModelBundle warped = b;
    Rng prng(57);
    for (nn::Parameter* p : warped.flow.parameters())
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value.data()[i] += 0.1 * prng.normal();

    Rng rng(59);
    const ImputationResult res = impute(warped, y, {2}, 20000, 1, 1, rng);

    const Eigen::Index g = 1601;
    MatrixXd grid = y.transpose().replicate(g, 1);
    for (Eigen::Index i = 0; i < g; ++i)
      grid(i, 2) = -4.0 + 8.0 * static_cast<double>(i) /
                              static_cast<double>(g - 1);
    const VectorXd lp = warped.output_log_density(grid);
    Eigen::Index at = 0;
    lp.maxCoeff(&at);
    CHECK(std::abs(res.candidates(0, 2) - grid(at, 2)) < 0.15);

    // reported densities agree with a fresh evaluation
    const VectorXd again = warped.output_log_density(res.candidates);
    CHECK((again - res.candidate_log_prob).cwiseAbs().maxCoeff() < 1e-12);
  }

  SUBCASE("all components missing degenerates to pure sampling") {
    std::vector<int> all;
    for (int k = 0; k < kNumOutputs; ++k) all.push_back(k);
    Rng rng(61);
    const ImputationResult res = impute(b, y, all, 500, 2, 1, rng);
    CHECK(res.nothing_observed);
    CHECK(res.candidate_log_prob(0) >= res.candidate_log_prob(1));
  }

  SUBCASE("guards") {
    Rng rng(63);
    CHECK_THROWS_AS((void)impute(b, y, {16}, 100, 1, 1, rng),
                    std::invalid_argument);
    CHECK_THROWS_AS((void)impute(b, y, {}, 10, 11, 1, rng),
                    std::invalid_argument);
    ModelBundle no_flow = b;
    no_flow.has_flow = false;
    CHECK_THROWS_AS((void)impute(no_flow, y, {}, 10, 1, 1, rng),
                    std::invalid_argument);
  }
}

TEST_CASE("cohort error report reduces to hand arithmetic") {
  // constant emulator: every decoded draw reconstructs to the same vector
  OutputVector base;
  for (int k = 0; k < kNumOutputs; ++k) base(k) = 10.0 + k;

  ToyMaps maps;
  maps.a = MatrixXd::Zero(kNumOutputs, kNumParams);
  maps.b = MatrixXd::Zero(2, kNumParams);
  maps.c = Eigen::RowVectorXd::Zero(kNumParams);
  ModelBundle b = affine_bundle(maps, box_around(-5.0, 5.0), 2);
  b.emulator.layers[0].b.value = base.transpose();

  std::vector<EhrRecord> records(3);
  records[0].id = "A";
  records[1].id = "B";
  records[2].id = "C";
  for (int k = 0; k < kNumOutputs; ++k) {
    records[0].present[static_cast<std::size_t>(k)] = k <= 11;
    records[1].present[static_cast<std::size_t>(k)] = k <= 10 || k == 15;
    records[2].present[static_cast<std::size_t>(k)] = k <= 4;  // filtered out
    records[0].y(k) = base(k) + (k <= 5 ? 1.0 : 0.0);
    records[1].y(k) = base(k) - (k <= 3 ? 2.0 : 0.0);
    records[2].y(k) = base(k);
  }
  for (EhrRecord& r : records) {
    r.n_present = 0;
    for (bool p : r.present) r.n_present += p ? 1 : 0;
    for (int k = 0; k < kNumOutputs; ++k)
      if (!r.present[static_cast<std::size_t>(k)])
        r.y(k) = std::numeric_limits<double>::quiet_NaN();
  }

  EhrInferenceConfig cfg;
  cfg.m = 300;
  cfg.top_k = 2;
  cfg.n_w = 4;
  cfg.tag = "delta=0.5";
  std::vector<PatientPrediction> dumps;
  const ErrorReport rep = ehr_error_report(b, records, cfg, 77, &dumps);

  CHECK(rep.n_patients == 2);
  for (int k = 0; k <= 3; ++k) CHECK(rep.e(k) == doctest::Approx(1.5));
  for (int k = 4; k <= 5; ++k) CHECK(rep.e(k) == doctest::Approx(0.5));
  for (int k = 6; k <= 10; ++k) CHECK(rep.e(k) == doctest::Approx(0.0));
  CHECK(rep.e(11) == doctest::Approx(0.0));
  CHECK(rep.e(15) == doctest::Approx(0.0));
  for (int k = 12; k <= 14; ++k) CHECK(std::isnan(rep.e(k)));
  for (int k = 0; k <= 10; ++k) CHECK(rep.counts[static_cast<std::size_t>(k)] == 2);
  CHECK(rep.counts[11] == 1);
  CHECK(rep.counts[15] == 1);
  CHECK(rep.counts[12] == 0);

  CHECK(dumps.size() == 2);
  CHECK(dumps[0].y_hat.rows() == 4);
  CHECK(std::isnan(dumps[0].target(15)));

  SUBCASE("worker count does not change the result") {
    EhrInferenceConfig two = cfg;
    two.workers = 2;
    const ErrorReport rep2 = ehr_error_report(b, records, two, 77);
    for (int k = 0; k < kNumOutputs; ++k) {
      CHECK(rep2.counts[static_cast<std::size_t>(k)] ==
            rep.counts[static_cast<std::size_t>(k)]);
      if (std::isnan(rep.e(k)))
        CHECK(std::isnan(rep2.e(k)));
      else
        CHECK(rep2.e(k) == rep.e(k));
    }
  }

  SUBCASE("csv layout prints None for unmeasured components") {
    TempDir tmp;
    const std::string path = tmp.file("report.csv");
    save_error_report_csv({rep}, path);
    const std::string text = io::read_text(path);
    CHECK(text.rfind("num,quantity,e[delta=0.5],unit,counts\n", 0) == 0);
    CHECK(text.find(",None,") != std::string::npos);
    CHECK(text.find("0/2") != std::string::npos);
    CHECK(text.find("2/2") != std::string::npos);

    ErrorReport other = rep;
    other.counts[0] += 1;
    CHECK_THROWS_AS(save_error_report_csv({rep, other}, path),
                    std::invalid_argument);
  }

  SUBCASE("prediction dump is plot-ready") {
    TempDir tmp;
    const std::string path = tmp.file("patients.csv");
    save_patient_predictions_csv(dumps, path);
    const std::string text = io::read_text(path);
    CHECK(text.rfind("patient,component,unit,target,band_lo,band_hi,draw,"
                     "prediction\n",
                     0) == 0);
    // 12 present components for each patient, 4 draws each
    const auto lines = static_cast<Eigen::Index>(
        std::count(text.begin(), text.end(), '\n'));
    CHECK(lines == 1 + 2 * 12 * 4);
  }
}

TEST_CASE("pseudo cohort is deterministic and shaped like the clinic") {
  PseudoEhrConfig cfg;
  cfg.n_patients = 6;
  cfg.noise_scale = 0.5;
  cfg.seed = 3;
  const std::vector<EhrRecord> recs = make_pseudo_ehr(cfg);
  CHECK(recs.size() == 6);

  for (const EhrRecord& r : recs) {
    CHECK(r.n_present >= 11);
    CHECK_FALSE(r.present[kOutVlSys]);
    for (int k = 0; k < kNumOutputs; ++k) {
      if (r.present[static_cast<std::size_t>(k)])
        CHECK(std::isfinite(r.y(k)));
      else
        CHECK(std::isnan(r.y(k)));
    }
  }
  CHECK(recs[0].id == "P001");
  CHECK(recs[5].id == "P006");

  // the observed values are the seeded exact simulation plus seeded noise
  const PriorDraw draw =
      simulate_prior_draw(cfg.prior, cfg.solver, cfg.seed, 0);
  Rng noise(derive_stream_seed(cfg.seed, 0, 1000));
  const OutputVector expect = add_noise(draw.y, cfg.noise_scale, noise);
  for (int k = 0; k < kNumOutputs; ++k)
    if (recs[0].present[static_cast<std::size_t>(k)])
      CHECK(recs[0].y(k) == expect(k));

  const std::vector<EhrRecord> again = make_pseudo_ehr(cfg);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(again[i].id == recs[i].id);
    CHECK(again[i].present == recs[i].present);
    for (int k = 0; k < kNumOutputs; ++k)
      if (recs[i].present[static_cast<std::size_t>(k)])
        CHECK(again[i].y(k) == recs[i].y(k));
  }
}

TEST_CASE("inversion and manifold tables round trip through files") {
  ToyMaps maps;
  Rng mrng(71);
  maps.a = random_matrix(mrng, kNumOutputs, kNumParams, -0.1, 0.1);
  maps.b = random_matrix(mrng, 2, kNumParams, -0.1, 0.1);
  maps.c = Eigen::RowVectorXd::Zero(kNumParams);
  const ModelBundle b = affine_bundle(maps, box_around(-5.0, 5.0), 2);
  OutputVector y = OutputVector::Constant(0.2);

  TempDir tmp;
  Rng rng(73);
  const InversionResult inv = invert(b, y, 5, rng);
  save_inversion_csv(inv, tmp.file("inv.csv"));
  const std::string inv_text = io::read_text(tmp.file("inv.csv"));
  CHECK(static_cast<int>(std::count(inv_text.begin(), inv_text.end(), '\n')) ==
        6);
  CHECK(inv_text.rfind("draw,out_of_range,simulated,", 0) == 0);

  const ManifoldSample ms = manifold(b, y, 30, rng);
  save_manifold_csv(ms, tmp.file("points.csv"));
  save_spectrum_csv(ms, tmp.file("spectrum.csv"));
  const std::string pts_text = io::read_text(tmp.file("points.csv"));
  CHECK(static_cast<int>(std::count(pts_text.begin(), pts_text.end(), '\n')) ==
        31);
  const std::string spec_text = io::read_text(tmp.file("spectrum.csv"));
  CHECK(static_cast<int>(std::count(spec_text.begin(), spec_text.end(),
                                    '\n')) == 24);
  CHECK(spec_text.rfind("mode,singular_value,cumulative_energy\n", 0) == 0);

  const ImputationResult imp = impute(b, y, {1, 3}, 100, 2, 2, rng);
  save_imputation_csv(imp, tmp.file("imp.csv"));
  const std::string imp_text = io::read_text(tmp.file("imp.csv"));
  CHECK(static_cast<int>(std::count(imp_text.begin(), imp_text.end(), '\n')) ==
        3);
  CHECK(imp_text.rfind("candidate,sample_index,log_prob,", 0) == 0);
}
