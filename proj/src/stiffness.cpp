#include "cvsim/stiffness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cvsim {

namespace {

// Parlett-Reinsch balancing: diagonal similarity with powers of two; returns
// the scaling d with B = D^{-1} A D.
void balance(Matrix6& a, Vector6& d) {
  d.setOnes();
  bool done = false;
  while (!done) {
    done = true;
    for (int i = 0; i < 6; ++i) {
      double c = 0.0, r = 0.0;
      for (int j = 0; j < 6; ++j) {
        if (j == i) continue;
        c += std::abs(a(j, i));
        r += std::abs(a(i, j));
      }
      if (c == 0.0 || r == 0.0) continue;
      double f = 1.0;
      const double s = c + r;
      double g = r / 2.0;
      while (c < g) {
        f *= 2.0;
        c *= 4.0;
      }
      g = r * 2.0;
      while (c > g) {
        f /= 2.0;
        c /= 4.0;
      }
      if ((c + r) / f < 0.95 * s) {
        done = false;
        d[i] *= f;
        a.col(i) *= f;
        a.row(i) /= f;
      }
    }
  }
}

// Householder reduction of a real matrix to upper Hessenberg form.
void hessenberg(Matrix6& a) {
  for (int k = 0; k < 4; ++k) {
    Eigen::Matrix<double, 6, 1> x = Eigen::Matrix<double, 6, 1>::Zero();
    double norm = 0.0;
    for (int i = k + 1; i < 6; ++i) {
      x[i] = a(i, k);
      norm += x[i] * x[i];
    }
    norm = std::sqrt(norm);
    if (norm == 0.0) continue;
    const double alpha = x[k + 1] >= 0.0 ? -norm : norm;
    x[k + 1] -= alpha;
    const double vnorm2 = x.squaredNorm();
    if (vnorm2 == 0.0) continue;
    // A <- (I - 2vv^T/v^Tv) A (I - 2vv^T/v^Tv)
    Eigen::Matrix<double, 1, 6> w = (x.transpose() * a) * (2.0 / vnorm2);
    a.noalias() -= x * w;
    Eigen::Matrix<double, 6, 1> u = (a * x) * (2.0 / vnorm2);
    a.noalias() -= u * x.transpose();
    for (int i = k + 2; i < 6; ++i) a(i, k) = 0.0;
    a(k + 1, k) = alpha;
  }
}

// Complex shifted QR with deflation on a Hessenberg matrix; eigenvalues only.
Vector6c hessenberg_eigenvalues(Matrix6c h) {
  constexpr double kEps = 2.2204460492503131e-16;
  Vector6c lams;
  int hi = 5;
  int iters_at_size = 0;
  while (hi >= 0) {
    // deflate converged subdiagonals
    int lo = hi;
    while (lo > 0) {
      const double off = std::abs(h(lo, lo - 1));
      const double diag = std::abs(h(lo - 1, lo - 1)) + std::abs(h(lo, lo));
      if (off <= kEps * std::max(diag, 1e-300)) {
        h(lo, lo - 1) = 0.0;
        break;
      }
      --lo;
    }
    if (lo == hi) {
      lams[hi] = h(hi, hi);
      --hi;
      iters_at_size = 0;
      continue;
    }
    if (++iters_at_size > 80)
      throw std::runtime_error("qr iteration failed to converge");

    // Wilkinson shift from the trailing 2x2 of the active block
    const Complex a = h(hi - 1, hi - 1), b = h(hi - 1, hi);
    const Complex c = h(hi, hi - 1), dd = h(hi, hi);
    const Complex tr = a + dd;
    const Complex det = a * dd - b * c;
    const Complex disc = std::sqrt(tr * tr - 4.0 * det);
    Complex mu1 = 0.5 * (tr + disc), mu2 = 0.5 * (tr - disc);
    Complex shift = std::abs(mu1 - dd) < std::abs(mu2 - dd) ? mu1 : mu2;
    if (iters_at_size % 16 == 0 && iters_at_size > 0)
      shift += std::abs(h(hi, hi - 1));  // exceptional shift to break cycles

    // implicit single-shift QR sweep on [lo..hi] via Givens rotations
    for (int i = lo; i < hi; ++i) h(i, i) -= shift;
    h(hi, hi) -= shift;
    struct Rot {
      Complex cs;
      Complex sn;
    };
    Rot rots[5];
    for (int k = lo; k < hi; ++k) {
      const Complex f = h(k, k), g = h(k + 1, k);
      const double norm = std::sqrt(std::norm(f) + std::norm(g));
      Rot r;
      if (norm == 0.0) {
        r.cs = 1.0;
        r.sn = 0.0;
      } else {
        r.cs = std::conj(f) / norm;
        r.sn = std::conj(g) / norm;
      }
      rots[k - lo] = r;
      for (int j = k; j <= hi; ++j) {
        const Complex t1 = h(k, j), t2 = h(k + 1, j);
        h(k, j) = r.cs * t1 + r.sn * t2;
        h(k + 1, j) = -std::conj(r.sn) * t1 + std::conj(r.cs) * t2;
      }
    }
    for (int k = lo; k < hi; ++k) {
      const Rot r = rots[k - lo];
      const int jmax = std::min(k + 2, hi);
      for (int j = lo; j <= jmax; ++j) {
        const Complex t1 = h(j, k), t2 = h(j, k + 1);
        h(j, k) = t1 * std::conj(r.cs) + t2 * std::conj(r.sn);
        h(j, k + 1) = -t1 * r.sn + t2 * r.cs;
      }
    }
    for (int i = lo; i < hi; ++i) h(i, i) += shift;
    h(hi, hi) += shift;
  }
  return lams;
}

}  // namespace

EigenDecomposition eigen6(const Matrix6& a_in) {
  Matrix6 balanced = a_in;
  Vector6 d;
  balance(balanced, d);
  Matrix6 hess = balanced;
  hessenberg(hess);
  Vector6c lams = hessenberg_eigenvalues(hess.cast<Complex>());

  const double scale = std::max(a_in.norm(), 1e-300);

  // snap near-real eigenvalues
  for (int i = 0; i < 6; ++i) {
    if (std::abs(lams[i].imag()) < 1e-9 * std::max(1.0, std::abs(lams[i])))
      lams[i] = Complex(lams[i].real(), 0.0);
  }

  // eigenvalues carry an absolute error of order eps*|A|, so magnitudes
  // that far below the matrix scale are numerically zero; snapping them
  // keeps zero modes of conservative subcircuits exact
  for (int i = 0; i < 6; ++i) {
    if (std::abs(lams[i]) <= 1e-12 * scale) lams[i] = Complex(0.0, 0.0);
  }

  // sort by descending |Re|, then descending Im for determinism
  std::array<int, 6> order = {0, 1, 2, 3, 4, 5};
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    const double ri = std::abs(lams[i].real()), rj = std::abs(lams[j].real());
    if (ri != rj) return ri > rj;
    return lams[i].imag() > lams[j].imag();
  });

  EigenDecomposition dec;
  const Matrix6c ac = balanced.cast<Complex>();
  for (int k = 0; k < 6; ++k) {
    const Complex lam = lams[order[k]];
    dec.values[k] = lam;

    // inverse iteration on the balanced matrix with a slightly perturbed
    // shift; three passes is plenty at n = 6
    const double mag = std::max(std::abs(lam), 1e-3 * scale);
    Vector6c q = Vector6c::Ones().normalized();
    double best_res = 1e300;
    Vector6c best_q = q;
    for (int attempt = 0; attempt < 3 && best_res > 1e-10 * scale; ++attempt) {
      const Complex shift =
          lam + Complex(mag * 1e-11 * (attempt + 1), mag * 3e-12 * attempt);
      Matrix6c m = ac;
      for (int i = 0; i < 6; ++i) m(i, i) -= shift;
      Eigen::PartialPivLU<Matrix6c> lu(m);
      Vector6c qq = q;
      for (int j = 0; j < 6 - attempt; ++j) qq[j] += 0.25 * (attempt + 1);
      qq.normalize();
      for (int it = 0; it < 3; ++it) {
        qq = lu.solve(qq);
        const double n = qq.norm();
        if (!(n > 0.0) || !std::isfinite(n)) {
          qq = Vector6c::Unit(attempt % 6);
          continue;
        }
        qq /= n;
      }
      const double res = (ac * qq - lam * qq).norm();
      if (res < best_res) {
        best_res = res;
        best_q = qq;
      }
    }

    // undo balancing, normalize, fix the phase
    Vector6c q_full = d.cast<Complex>().asDiagonal() * best_q;
    q_full.normalize();
    int imax = 0;
    for (int i = 1; i < 6; ++i)
      if (std::abs(q_full[i]) > std::abs(q_full[imax])) imax = i;
    const Complex piv = q_full[imax];
    if (std::abs(piv) > 0.0) q_full *= std::conj(piv) / std::abs(piv);
    if (lam.imag() == 0.0) {
      for (int i = 0; i < 6; ++i) q_full[i] = Complex(q_full[i].real(), 0.0);
      q_full.normalize();
    }
    dec.vectors.col(k) = q_full;
    dec.max_residual = std::max(
        dec.max_residual, (a_in.cast<Complex>() * q_full - lam * q_full).norm());
  }
  return dec;
}

StiffnessRatio stiffness_ratio(const Vector6c& values, double tol) {
  double re_max = 0.0, re_min = 1e300, re_min_live = 1e300;
  for (int i = 0; i < 6; ++i) {
    const double r = std::abs(values[i].real());
    re_max = std::max(re_max, r);
    re_min = std::min(re_min, r);
    if (r > tol) re_min_live = std::min(re_min_live, r);
  }
  StiffnessRatio out;
  if (re_min >= tol) {
    out.value = re_max / re_min;
  } else if (re_min_live == 1e300) {
    // every mode is numerically zero; the ratio is meaningless
    out.value = 1.0;
    out.degenerate = true;
  } else {
    // near-zero modes are skipped: divide by the smallest live magnitude,
    // padded by the tolerance
    out.value = re_max / (re_min_live + tol);
  }
  return out;
}

double spectral_radius(const Vector6c& values) {
  double rho = 0.0;
  for (int i = 0; i < 6; ++i) rho = std::max(rho, std::abs(values[i]));
  return rho;
}

double rc_constant(double r, double c_j, double c_k) {
  return r * c_j * c_k / (c_j + c_k);
}

StiffnessScan stiffness_scan(const ParameterVector& v, const SolverConfig& cfg,
                             int window_cycles) {
  const StateTrajectory traj = simulate(v, cfg);
  const Eigen::Index n = traj.t.size();
  const double t_lo = traj.t[n - 1] - window_cycles * traj.t_cycle;
  Eigen::Index first = 0;
  while (first < n - 1 && traj.t[first] < t_lo - 1e-12) ++first;
  const Eigen::Index m = n - first;

  StiffnessScan scan;
  scan.t.resize(m);
  scan.re.resize(m, 6);
  scan.im.resize(m, 6);
  scan.sr.resize(m);
  scan.rho.resize(m);

  for (Eigen::Index i = 0; i < m; ++i) {
    PressureState s;
    s.p = traj.p.row(first + i).transpose();
    s.t = traj.t[first + i];
    const LinearSystemForm f = matrix_form(s, v);
    const EigenDecomposition dec = eigen6(f.A);
    scan.t[i] = s.t;
    for (int k = 0; k < 6; ++k) {
      scan.re(i, k) = dec.values[k].real();
      scan.im(i, k) = dec.values[k].imag();
    }
    const StiffnessRatio sr = stiffness_ratio(dec.values);
    scan.any_degenerate = scan.any_degenerate || sr.degenerate;
    scan.sr[i] = sr.value;
    scan.rho[i] = spectral_radius(dec.values);
  }

  // SR(t) sits on flat plateaus when every valve is shut, so the raw
  // argmin would be decided by last-ulp noise; take the earliest sample
  // attaining each extremum within a slack far below any real variation
  const double sr_hi = scan.sr.maxCoeff();
  const double sr_lo = scan.sr.minCoeff();
  Eigen::Index i_max = 0, i_min = 0;
  while (scan.sr[i_max] < sr_hi * (1.0 - 1e-9)) ++i_max;
  while (scan.sr[i_min] > sr_lo * (1.0 + 1e-9)) ++i_min;

  auto extremum_at = [&](Eigen::Index i) {
    StiffnessExtremum e;
    PressureState s;
    s.p = traj.p.row(first + i).transpose();
    s.t = traj.t[first + i];
    const EigenDecomposition dec = eigen6(matrix_form(s, v).A);
    e.t = s.t;
    e.sr = scan.sr[i];
    e.values = dec.values;
    e.vectors = dec.vectors;
    return e;
  };
  scan.sr_max = extremum_at(i_max);
  scan.sr_min = extremum_at(i_min);
  scan.tau1 = 1.0 / std::abs(scan.sr_max.values[0].real());
  scan.tau2 = 1.0 / std::abs(scan.sr_max.values[1].real());
  return scan;
}

}  // namespace cvsim
