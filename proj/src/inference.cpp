#include "cvsim/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <mutex>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "cvsim/io.hpp"

namespace cvsim {

namespace {

void require_inversion_nets(const ModelBundle& b) {
  if (!b.has_vaed)
    throw std::invalid_argument("bundle has no trained decoder");
  if (!b.has_emulator)
    throw std::invalid_argument("bundle has no trained emulator");
}

MatrixXd normal_matrix(Rng& rng, Eigen::Index r, Eigen::Index c) {
  MatrixXd m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

}  // namespace

InversionResult invert(const ModelBundle& b, const OutputVector& y,
                       Eigen::Index n_w, Rng& rng, ReconSource source,
                       const SolverConfig& sim_cfg) {
  require_inversion_nets(b);
  if (n_w < 1) throw std::invalid_argument("need at least one latent draw");
  if (!y.allFinite())
    throw std::invalid_argument("inversion target must be complete");

  InversionResult res;
  res.requested = source;
  res.w = normal_matrix(rng, n_w, b.cfg.latent_dim);
  const MatrixXd y_rep = y.transpose().replicate(n_w, 1);
  res.v_hat = b.decode(y_rep, res.w);

  const PriorBox box = b.prior.widened(0.10);
  res.out_of_range.resize(static_cast<std::size_t>(n_w));
  for (Eigen::Index i = 0; i < n_w; ++i) {
    ParameterVector vi;
    vi.values = res.v_hat.row(i).transpose();
    res.out_of_range[static_cast<std::size_t>(i)] = !box.contains(vi);
  }

  // emulator pass for every row; the exact solver then overwrites the rows
  // it is allowed to touch
  res.y_hat = b.emulate(res.v_hat);
  res.simulated.assign(static_cast<std::size_t>(n_w), false);
  if (source == ReconSource::kSimulator) {
    for (Eigen::Index i = 0; i < n_w; ++i) {
      if (res.out_of_range[static_cast<std::size_t>(i)]) continue;
      ParameterVector vi;
      vi.values = res.v_hat.row(i).transpose();
      try {
        const StateTrajectory traj = simulate(vi, sim_cfg);
        const OutputResult out = extract_outputs(traj, vi);
        if (!out.y.allFinite()) continue;
        res.y_hat.row(i) = out.y.transpose();
        res.simulated[static_cast<std::size_t>(i)] = true;
      } catch (const std::exception&) {
        // integration failure: the emulator row stays
      }
    }
  }
  res.abs_err = (res.y_hat - y_rep).cwiseAbs();
  return res;
}

void save_inversion_csv(const InversionResult& res, const std::string& path) {
  std::ostringstream os;
  os << "draw,out_of_range,simulated";
  for (const std::string& n : parameter_names()) os << ',' << n;
  for (const std::string& n : output_names()) os << ",yhat_" << n;
  for (const std::string& n : output_names()) os << ",abserr_" << n;
  os << '\n';
  for (Eigen::Index i = 0; i < res.v_hat.rows(); ++i) {
    os << i << ',' << (res.out_of_range[static_cast<std::size_t>(i)] ? 1 : 0)
       << ',' << (res.simulated[static_cast<std::size_t>(i)] ? 1 : 0);
    for (Eigen::Index j = 0; j < res.v_hat.cols(); ++j)
      os << ',' << io::format_double(res.v_hat(i, j));
    for (Eigen::Index j = 0; j < res.y_hat.cols(); ++j)
      os << ',' << io::format_double(res.y_hat(i, j));
    for (Eigen::Index j = 0; j < res.abs_err.cols(); ++j)
      os << ',' << io::format_double(res.abs_err(i, j));
    os << '\n';
  }
  io::write_text(path, os.str());
}

VectorXd symmetric_eigenvalues_jacobi(MatrixXd a) {
  if (a.rows() != a.cols())
    throw std::invalid_argument("jacobi needs a square matrix");
  const Eigen::Index n = a.rows();
  if (n == 0) return VectorXd();
  a = (0.5 * (a + a.transpose())).eval();  // enforce exact symmetry

  const double fro = std::max(a.norm(), 1e-300);
  for (int sweep = 0; sweep < 64; ++sweep) {
    double off = 0.0;
    for (Eigen::Index p = 0; p < n; ++p)
      for (Eigen::Index q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (std::sqrt(2.0 * off) <= 1e-15 * fro) break;

    for (Eigen::Index p = 0; p < n; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double tau = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t =
            (tau >= 0.0 ? 1.0 : -1.0) /
            (std::abs(tau) + std::sqrt(tau * tau + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        const double app = a(p, p), aqq = a(q, q);
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = a(p, k) = c * akp - s * akq;
          a(k, q) = a(q, k) = s * akp + c * akq;
        }
      }
    }
  }
  VectorXd eig = a.diagonal();
  std::sort(eig.data(), eig.data() + n, std::greater<double>());
  return eig;
}

VectorXd singular_values_via_gram(const MatrixXd& x) {
  const MatrixXd gram = x.transpose() * x;
  VectorXd eig = symmetric_eigenvalues_jacobi(gram);
  for (Eigen::Index i = 0; i < eig.size(); ++i)
    eig(i) = std::sqrt(std::max(eig(i), 0.0));
  return eig;
}

ManifoldSample manifold(const ModelBundle& b, const OutputVector& y_star,
                        Eigen::Index k, Rng& rng) {
  require_inversion_nets(b);
  if (k < kNumParams)
    throw std::invalid_argument(
        "need at least as many decoded points as parameters");
  if (!y_star.allFinite())
    throw std::invalid_argument("manifold target must be complete");

  ManifoldSample ms;
  const MatrixXd w = normal_matrix(rng, k, b.cfg.latent_dim);
  ms.points = b.decode(y_star.transpose().replicate(k, 1), w);

  // unit-free coordinates: [0,1] within the prior box, then centered
  MatrixXd x = ms.points;
  for (Eigen::Index j = 0; j < kNumParams; ++j) {
    const double width = b.prior.hi(j) - b.prior.lo(j);
    if (!(width > 0.0))
      throw std::invalid_argument("degenerate prior bounds for column " +
                                  std::to_string(j));
    x.col(j) = (x.col(j).array() - b.prior.lo(j)) / width;
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;

  ms.singular = singular_values_via_gram(x);
  VectorXd energy = ms.singular.array().square();
  VectorXd prefix(energy.size());
  double acc = 0.0;
  for (Eigen::Index i = 0; i < energy.size(); ++i) {
    acc += energy(i);
    prefix(i) = acc;
  }
  const double total = prefix(energy.size() - 1);
  // zero spread means every mode is trivially captured
  ms.cumulative_energy =
      total > 0.0 ? VectorXd(prefix / total)
                  : VectorXd(VectorXd::Ones(energy.size()));
  return ms;
}

void save_manifold_csv(const ManifoldSample& ms, const std::string& path) {
  std::ostringstream os;
  const auto& names = parameter_names();
  for (std::size_t j = 0; j < names.size(); ++j)
    os << (j ? "," : "") << names[j];
  os << '\n';
  for (Eigen::Index i = 0; i < ms.points.rows(); ++i) {
    for (Eigen::Index j = 0; j < ms.points.cols(); ++j)
      os << (j ? "," : "") << io::format_double(ms.points(i, j));
    os << '\n';
  }
  io::write_text(path, os.str());
}

void save_spectrum_csv(const ManifoldSample& ms, const std::string& path) {
  std::ostringstream os;
  os << "mode,singular_value,cumulative_energy\n";
  for (Eigen::Index i = 0; i < ms.singular.size(); ++i)
    os << (i + 1) << ',' << io::format_double(ms.singular(i)) << ','
       << io::format_double(ms.cumulative_energy(i)) << '\n';
  io::write_text(path, os.str());
}

std::vector<Eigen::Index> rank_by_log_prob(const VectorXd& log_prob) {
  std::vector<Eigen::Index> order(static_cast<std::size_t>(log_prob.size()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) {
                     return log_prob(a) > log_prob(b);
                   });
  return order;
}

ImputationResult impute(const ModelBundle& b, const OutputVector& y_star,
                        const std::vector<int>& missing, Eigen::Index m,
                        Eigen::Index top_k, Eigen::Index n_w, Rng& rng,
                        ReconSource source, const SolverConfig& sim_cfg) {
  require_inversion_nets(b);
  if (!b.has_flow) throw std::invalid_argument("bundle has no trained flow");
  if (m < 1 || top_k < 1 || top_k > m)
    throw std::invalid_argument("need 1 <= top_k <= m flow candidates");
  if (n_w < 1) throw std::invalid_argument("need at least one latent draw");

  ImputationResult res;
  res.missing = missing;
  std::sort(res.missing.begin(), res.missing.end());
  res.missing.erase(std::unique(res.missing.begin(), res.missing.end()),
                    res.missing.end());
  for (int j : res.missing)
    if (j < 0 || j >= kNumOutputs)
      throw std::invalid_argument("missing index out of range: " +
                                  std::to_string(j));
  std::array<bool, kNumOutputs> is_missing{};
  for (int j : res.missing) is_missing[static_cast<std::size_t>(j)] = true;
  res.nothing_observed =
      static_cast<int>(res.missing.size()) == kNumOutputs;

  MatrixXd cand = b.sample_outputs(m, rng);
  for (int j = 0; j < kNumOutputs; ++j) {
    if (is_missing[static_cast<std::size_t>(j)]) continue;
    if (!std::isfinite(y_star(j)))
      throw std::invalid_argument("observed component " + std::to_string(j) +
                                  " is not finite");
    cand.col(j).setConstant(y_star(j));
  }

  const VectorXd log_prob = b.output_log_density(cand);
  const std::vector<Eigen::Index> order = rank_by_log_prob(log_prob);

  res.candidates.resize(top_k, kNumOutputs);
  res.candidate_log_prob.resize(top_k);
  res.candidate_index.resize(static_cast<std::size_t>(top_k));
  res.inversions.reserve(static_cast<std::size_t>(top_k));
  for (Eigen::Index i = 0; i < top_k; ++i) {
    const Eigen::Index src = order[static_cast<std::size_t>(i)];
    res.candidates.row(i) = cand.row(src);
    res.candidate_log_prob(i) = log_prob(src);
    res.candidate_index[static_cast<std::size_t>(i)] = src;
    const OutputVector yc = res.candidates.row(i).transpose();
    res.inversions.push_back(invert(b, yc, n_w, rng, source, sim_cfg));
  }
  return res;
}

void save_imputation_csv(const ImputationResult& res,
                         const std::string& path) {
  std::ostringstream os;
  os << "candidate,sample_index,log_prob";
  for (const std::string& n : output_names()) os << ',' << n;
  os << '\n';
  for (Eigen::Index i = 0; i < res.candidates.rows(); ++i) {
    os << i << ',' << res.candidate_index[static_cast<std::size_t>(i)] << ','
       << io::format_double(res.candidate_log_prob(i));
    for (Eigen::Index j = 0; j < res.candidates.cols(); ++j)
      os << ',' << io::format_double(res.candidates(i, j));
    os << '\n';
  }
  io::write_text(path, os.str());
}

ErrorReport ehr_error_report(const ModelBundle& b,
                             const std::vector<EhrRecord>& records,
                             const EhrInferenceConfig& cfg, std::uint64_t seed,
                             std::vector<PatientPrediction>* dumps) {
  require_inversion_nets(b);
  if (!b.has_flow) throw std::invalid_argument("bundle has no trained flow");

  const std::vector<EhrRecord> cohort =
      filter_by_present(records, cfg.min_present);
  const auto n = static_cast<Eigen::Index>(cohort.size());

  ErrorReport rep;
  rep.tag = cfg.tag;
  rep.n_patients = static_cast<int>(n);
  rep.e = VectorXd::Constant(kNumOutputs,
                             std::numeric_limits<double>::quiet_NaN());
  if (n == 0) return rep;

  const Eigen::Index draws_per = std::max<Eigen::Index>(1, cfg.n_w / cfg.top_k);
  const Eigen::Index total_nw = draws_per * cfg.top_k;

  // one independent stream per patient, so the cohort can be processed in
  // any worker order with identical results
  std::vector<MatrixXd> y_hats(static_cast<std::size_t>(n));
  std::atomic<bool> failed{false};
  std::string error;
  std::mutex error_mutex;
  auto work = [&](int w, int nw) {
    for (Eigen::Index q = w; q < n; q += nw) {
      if (failed.load()) return;
      try {
        const EhrRecord& rec = cohort[static_cast<std::size_t>(q)];
        std::vector<int> missing;
        for (int k = 0; k < kNumOutputs; ++k)
          if (!rec.present[static_cast<std::size_t>(k)]) missing.push_back(k);
        Rng rng(derive_stream_seed(seed, static_cast<std::uint64_t>(q)));
        const ImputationResult imp =
            impute(b, rec.y, missing, cfg.m, cfg.top_k, draws_per, rng,
                   ReconSource::kEmulator);
        MatrixXd rows(total_nw, kNumOutputs);
        for (Eigen::Index c = 0; c < cfg.top_k; ++c)
          rows.middleRows(c * draws_per, draws_per) =
              imp.inversions[static_cast<std::size_t>(c)].y_hat;
        y_hats[static_cast<std::size_t>(q)] = std::move(rows);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        error = e.what();
        failed.store(true);
      }
    }
  };
  const int nw = std::max(1, std::min<int>(cfg.workers, static_cast<int>(n)));
  if (nw == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nw));
    for (int w = 0; w < nw; ++w) pool.emplace_back(work, w, nw);
    for (auto& t : pool) t.join();
  }
  if (failed.load()) throw std::runtime_error("cohort inversion: " + error);

  VectorXd err_sum = VectorXd::Zero(kNumOutputs);
  for (Eigen::Index q = 0; q < n; ++q) {
    const EhrRecord& rec = cohort[static_cast<std::size_t>(q)];
    const MatrixXd& rows = y_hats[static_cast<std::size_t>(q)];
    for (int k = 0; k < kNumOutputs; ++k) {
      if (!rec.present[static_cast<std::size_t>(k)]) continue;
      err_sum(k) += (rows.col(k).array() - rec.y(k)).abs().sum();
      rep.counts[static_cast<std::size_t>(k)] += 1;
    }
    if (dumps != nullptr) {
      PatientPrediction pp;
      pp.id = rec.id;
      pp.target = rec.y;
      pp.present = rec.present;
      pp.y_hat = rows;
      dumps->push_back(std::move(pp));
    }
  }
  for (int k = 0; k < kNumOutputs; ++k) {
    const int ck = rep.counts[static_cast<std::size_t>(k)];
    if (ck > 0)
      rep.e(k) = err_sum(k) /
                 (static_cast<double>(ck) * static_cast<double>(total_nw));
  }
  return rep;
}

void save_error_report_csv(const std::vector<ErrorReport>& reports,
                           const std::string& path) {
  if (reports.empty())
    throw std::invalid_argument("need at least one report");
  for (const ErrorReport& r : reports)
    if (r.counts != reports.front().counts)
      throw std::invalid_argument("reports cover different cohorts");

  std::ostringstream os;
  os << "num,quantity";
  for (const ErrorReport& r : reports)
    os << ",e[" << (r.tag.empty() ? "run" : r.tag) << ']';
  os << ",unit,counts\n";
  const auto& names = output_names();
  const auto& units = output_units();
  const int n_pat = reports.front().n_patients;
  for (int k = 0; k < kNumOutputs; ++k) {
    os << (k + 1) << ',' << names[static_cast<std::size_t>(k)];
    for (const ErrorReport& r : reports) {
      os << ',';
      if (std::isnan(r.e(k)))
        os << "None";
      else
        os << io::format_double(r.e(k));
    }
    os << ',' << units[static_cast<std::size_t>(k)] << ','
       << reports.front().counts[static_cast<std::size_t>(k)] << '/' << n_pat
       << '\n';
  }
  io::write_text(path, os.str());
}

void save_patient_predictions_csv(const std::vector<PatientPrediction>& dumps,
                                  const std::string& path) {
  const OutputVector& s = output_noise_std();
  const auto& names = output_names();
  const auto& units = output_units();
  std::ostringstream os;
  os << "patient,component,unit,target,band_lo,band_hi,draw,prediction\n";
  for (const PatientPrediction& pp : dumps) {
    for (int k = 0; k < kNumOutputs; ++k) {
      if (!pp.present[static_cast<std::size_t>(k)]) continue;
      const double lo = pp.target(k) - 3.0 * s(k);
      const double hi = pp.target(k) + 3.0 * s(k);
      for (Eigen::Index i = 0; i < pp.y_hat.rows(); ++i) {
        os << pp.id << ',' << names[static_cast<std::size_t>(k)] << ','
           << units[static_cast<std::size_t>(k)] << ','
           << io::format_double(pp.target(k)) << ',' << io::format_double(lo)
           << ',' << io::format_double(hi) << ',' << i << ','
           << io::format_double(pp.y_hat(i, k)) << '\n';
      }
    }
  }
  io::write_text(path, os.str());
}

std::vector<EhrRecord> make_pseudo_ehr(const PseudoEhrConfig& cfg) {
  if (cfg.n_patients < 1)
    throw std::invalid_argument("need at least one patient");
  const auto n = static_cast<Eigen::Index>(cfg.n_patients);
  std::vector<EhrRecord> records(static_cast<std::size_t>(n));

  std::atomic<bool> failed{false};
  std::string error;
  std::mutex error_mutex;
  auto work = [&](int w, int nw) {
    for (Eigen::Index i = w; i < n; i += nw) {
      if (failed.load()) return;
      try {
        const PriorDraw draw = simulate_prior_draw(
            cfg.prior, cfg.solver, cfg.seed, static_cast<std::uint64_t>(i));
        // attempt streams stay below (seed, i, 64); 1000 is a disjoint lane
        Rng rng(derive_stream_seed(cfg.seed, static_cast<std::uint64_t>(i),
                                   1000));
        const OutputVector noisy = add_noise(draw.y, cfg.noise_scale, rng);

        // missingness shaped like the clinical cohort: V_l,sys never
        // measured, venous pressure and diastolic volume rare
        EhrRecord rec;
        std::array<double, kNumOutputs> p_present;
        p_present.fill(0.95);
        p_present[kOutVlSys] = 0.0;
        p_present[kOutPcvp] = 0.065;
        p_present[kOutVlDia] = 0.065;
        p_present[kOutPrDia] = 0.24;
        for (int k = 0; k < kNumOutputs; ++k)
          rec.present[static_cast<std::size_t>(k)] =
              rng.uniform() < p_present[static_cast<std::size_t>(k)];

        // the report keeps patients with more than 10 measurements; top up
        // sparse draws so every pseudo-patient qualifies
        auto count_present = [&] {
          int c = 0;
          for (bool b : rec.present) c += b ? 1 : 0;
          return c;
        };
        while (count_present() < 11) {
          std::vector<int> absent;
          for (int k = 0; k < kNumOutputs; ++k)
            if (!rec.present[static_cast<std::size_t>(k)] && k != kOutVlSys)
              absent.push_back(k);
          const auto pick = static_cast<std::size_t>(
              rng.uniform(0.0, static_cast<double>(absent.size())));
          rec.present[static_cast<std::size_t>(
              absent[std::min(pick, absent.size() - 1)])] = true;
        }

        char id[16];
        std::snprintf(id, sizeof id, "P%03d", static_cast<int>(i) + 1);
        rec.id = id;
        for (int k = 0; k < kNumOutputs; ++k)
          rec.y(k) = rec.present[static_cast<std::size_t>(k)]
                         ? noisy(k)
                         : std::numeric_limits<double>::quiet_NaN();
        rec.n_present = count_present();
        records[static_cast<std::size_t>(i)] = std::move(rec);
      } catch (const std::exception& e) {
        std::lock_guard<std::mutex> lock(error_mutex);
        error = e.what();
        failed.store(true);
      }
    }
  };
  const int nw = std::max(1, std::min<int>(cfg.workers, static_cast<int>(n)));
  if (nw == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nw));
    for (int w = 0; w < nw; ++w) pool.emplace_back(work, w, nw);
    for (auto& t : pool) t.join();
  }
  if (failed.load())
    throw std::runtime_error("pseudo-cohort generation: " + error);
  return records;
}

}  // namespace cvsim
