#pragma once

// Shared test oracles. Everything here is deliberately independent of the
// library's fast paths: naive O(N^2) transforms, closed-form exponentials of
// matrices built from a known eigenstructure, and plain random draws.

#include <cmath>
#include <complex>
#include <vector>

#include "kae/common.hpp"
#include "kae/linalg.hpp"

namespace kae::testing {

inline linalg::Matrix random_matrix(Rng& rng, int n, double scale = 1.0) {
  linalg::Matrix m(n, n);
  for (double& v : m.values()) v = rng.uniform(-scale, scale);
  return m;
}

/// Skew-symmetric part minus a positive diagonal: dissipative by
/// construction (the symmetric part is -diag(d) <= 0).
inline linalg::Matrix random_dissipative(Rng& rng, int n, double skew_scale = 1.0,
                                         double diss_lo = 0.05,
                                         double diss_hi = 0.8) {
  linalg::Matrix m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = i + 1; j < n; ++j) {
      const double s = rng.uniform(-skew_scale, skew_scale);
      m(i, j) = s;
      m(j, i) = -s;
    }
  for (int i = 0; i < n; ++i) m(i, i) = -rng.uniform(diss_lo, diss_hi);
  return m;
}

/// Rescale so norm1(m) == target.
inline linalg::Matrix with_norm1(linalg::Matrix m, double target) {
  const double n1 = linalg::norm1(m);
  if (n1 > 0.0) m = (target / n1) * m;
  return m;
}

/// A matrix with a known eigenstructure and its exact exponential.
/// Built as V * L * V^-1 where L is block diagonal (1x1 real blocks and 2x2
/// blocks [[a,b],[-b,a]] for complex pairs a+-bi), so exp(M) = V exp(L) V^-1
/// with exp(L) known in closed form. V = Q1 * D * Q2 with orthogonal Q's and
/// a mild diagonal keeps the similarity well conditioned but non-normal.
struct SpectralSystem {
  linalg::Matrix m;
  linalg::Matrix exp_m;  // closed-form oracle for exp(m)
};

inline linalg::Matrix random_orthogonal(Rng& rng, int n) {
  // Gram-Schmidt on a random Gaussian matrix.
  linalg::Matrix a(n, n);
  for (double& v : a.values()) v = rng.normal();
  for (int j = 0; j < n; ++j) {
    for (int prev = 0; prev < j; ++prev) {
      double d = 0.0;
      for (int i = 0; i < n; ++i) d += a(i, j) * a(i, prev);
      for (int i = 0; i < n; ++i) a(i, j) -= d * a(i, prev);
    }
    double nrm = 0.0;
    for (int i = 0; i < n; ++i) nrm += a(i, j) * a(i, j);
    nrm = std::sqrt(nrm);
    if (nrm < 1e-8) {  // essentially impossible; keep deterministic anyway
      a(j, j) += 1.0;
      nrm = std::sqrt(nrm * nrm + 2.0 * a(j, j) - 1.0);
    }
    for (int i = 0; i < n; ++i) a(i, j) /= nrm;
  }
  return a;
}

inline SpectralSystem random_diagonalizable(Rng& rng, int n,
                                            double target_norm1) {
  using linalg::Matrix;
  Matrix lam(n, n);
  Matrix elam(n, n);
  int i = 0;
  while (i < n) {
    if (i + 1 < n && rng.uniform() < 0.6) {
      const double a = rng.uniform(-1.0, 0.3);
      const double b = rng.uniform(0.2, 1.5);
      lam(i, i) = a;
      lam(i, i + 1) = b;
      lam(i + 1, i) = -b;
      lam(i + 1, i + 1) = a;
      const double ea = std::exp(a);
      elam(i, i) = ea * std::cos(b);
      elam(i, i + 1) = ea * std::sin(b);
      elam(i + 1, i) = -ea * std::sin(b);
      elam(i + 1, i + 1) = ea * std::cos(b);
      i += 2;
    } else {
      const double a = rng.uniform(-1.5, 0.5);
      lam(i, i) = a;
      elam(i, i) = std::exp(a);
      i += 1;
    }
  }
  Matrix q1 = random_orthogonal(rng, n);
  Matrix q2 = random_orthogonal(rng, n);
  Matrix d(n, n);
  Matrix dinv(n, n);
  for (int r = 0; r < n; ++r) {
    const double dv = rng.uniform(0.5, 2.0);
    d(r, r) = dv;
    dinv(r, r) = 1.0 / dv;
  }
  const Matrix v = q1 * (d * q2);
  const Matrix vinv = transpose(q2) * (dinv * transpose(q1));

  Matrix m = v * (lam * vinv);
  const double n1 = linalg::norm1(m);
  const double c = target_norm1 / n1;
  m = c * m;
  // exp(c*M) = V exp(c*L) V^-1; rebuild exp(L) for the scaled blocks
  Matrix elam_c(n, n);
  i = 0;
  while (i < n) {
    if (i + 1 < n && lam(i + 1, i) != 0.0) {
      const double a = c * lam(i, i);
      const double b = c * lam(i, i + 1);
      const double ea = std::exp(a);
      elam_c(i, i) = ea * std::cos(b);
      elam_c(i, i + 1) = ea * std::sin(b);
      elam_c(i + 1, i) = -ea * std::sin(b);
      elam_c(i + 1, i + 1) = ea * std::cos(b);
      i += 2;
    } else {
      elam_c(i, i) = std::exp(c * lam(i, i));
      i += 1;
    }
  }
  return SpectralSystem{m, v * (elam_c * vinv)};
}

/// Naive O((HW)^2) 2-D DFT with the unnormalized forward convention.
inline std::vector<std::complex<double>> naive_dft2(
    const std::vector<std::complex<double>>& f, int h, int w) {
  const double two_pi = 6.283185307179586476925286766559;
  std::vector<std::complex<double>> out(f.size());
  for (int u = 0; u < h; ++u)
    for (int v = 0; v < w; ++v) {
      std::complex<double> s(0.0, 0.0);
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          const double ang = -two_pi * (static_cast<double>(u) * y / h +
                                        static_cast<double>(v) * x / w);
          s += f[static_cast<std::size_t>(y) * w + x] *
               std::complex<double>(std::cos(ang), std::sin(ang));
        }
      out[static_cast<std::size_t>(u) * w + v] = s;
    }
  return out;
}

inline double rel_l2(const std::vector<double>& a,
                     const std::vector<double>& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / (std::sqrt(den) + 1e-300);
}

}  // namespace kae::testing
