#include "kae/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace kae::linalg {

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw NumericError(std::string(what) + ": shape mismatch");
}

void require_square(const Matrix& a, const char* what) {
  if (!a.square())
    throw NumericError(std::string(what) + ": matrix must be square");
}

}  // namespace

Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "Matrix+");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < out.values().size(); ++i)
    out.values()[i] = a.values()[i] + b.values()[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "Matrix-");
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < out.values().size(); ++i)
    out.values()[i] = a.values()[i] - b.values()[i];
  return out;
}

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw NumericError("Matrix*: inner dim mismatch");
  const int m = a.rows(), k = a.cols(), p = b.cols();
  Matrix out(m, p);
  const double* ap = a.data();
  const double* bp = b.data();
  double* op = out.data();
  for (int i = 0; i < m; ++i) {
    const double* arow = ap + static_cast<std::size_t>(i) * k;
    double* orow = op + static_cast<std::size_t>(i) * p;
    for (int l = 0; l < k; ++l) {
      const double av = arow[l];
      const double* brow = bp + static_cast<std::size_t>(l) * p;
      for (int j = 0; j < p; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < out.values().size(); ++i)
    out.values()[i] = s * a.values()[i];
  return out;
}

Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

std::vector<double> matvec(const Matrix& a, const std::vector<double>& x) {
  if (static_cast<int>(x.size()) != a.cols())
    throw NumericError("matvec: size mismatch");
  std::vector<double> y(static_cast<std::size_t>(a.rows()), 0.0);
  for (int i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (int j = 0; j < a.cols(); ++j) s += a(i, j) * x[static_cast<std::size_t>(j)];
    y[static_cast<std::size_t>(i)] = s;
  }
  return y;
}

double norm1(const Matrix& a) {
  double best = 0.0;
  for (int j = 0; j < a.cols(); ++j) {
    double s = 0.0;
    for (int i = 0; i < a.rows(); ++i) s += std::fabs(a(i, j));
    best = std::max(best, s);
  }
  return best;
}

double max_abs(const Matrix& a) {
  double best = 0.0;
  for (double v : a.values()) best = std::max(best, std::fabs(v));
  return best;
}

// ---------------------------------------------------------------------------
// Matrix exponential
// ---------------------------------------------------------------------------

Matrix matrix_exp(const Matrix& m) {
  require_square(m, "matrix_exp");
  const int n = m.rows();
  const double nrm = norm1(m);
  if (!std::isfinite(nrm)) throw NumericError("matrix_exp: non-finite input");

  int s = 0;
  if (nrm > 1.0) s = static_cast<int>(std::ceil(std::log2(nrm)));

  const double inv_scale = std::ldexp(1.0, -s);  // exact power of two
  Matrix a = inv_scale * m;

  Matrix sum = Matrix::identity(n);
  Matrix term = Matrix::identity(n);
  for (int k = 1; k <= 30; ++k) {
    term = (1.0 / static_cast<double>(k)) * (term * a);
    for (std::size_t i = 0; i < sum.values().size(); ++i)
      sum.values()[i] += term.values()[i];
    if (norm1(term) < 1e-16 * norm1(sum)) break;
  }
  for (int i = 0; i < s; ++i) sum = sum * sum;
  return sum;
}

std::vector<double> matrix_exp_action(const Matrix& k, double tau,
                                      const std::vector<double>& z) {
  require_square(k, "matrix_exp_action");
  return matvec(matrix_exp(tau * k), z);
}

// ---------------------------------------------------------------------------
// LU solve
// ---------------------------------------------------------------------------

Matrix solve_linear(const Matrix& a, const Matrix& b) {
  require_square(a, "solve_linear");
  if (a.rows() != b.rows()) throw NumericError("solve_linear: size mismatch");
  const int n = a.rows(), nrhs = b.cols();
  Matrix lu = a;
  Matrix x = b;
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;

  for (int col = 0; col < n; ++col) {
    int piv = col;
    double best = std::fabs(lu(col, col));
    for (int r = col + 1; r < n; ++r) {
      const double v = std::fabs(lu(r, col));
      if (v > best) {
        best = v;
        piv = r;
      }
    }
    if (best < 1e-12)
      throw NumericError("solve_linear: singular matrix (pivot " +
                         std::to_string(best) + " at column " +
                         std::to_string(col) + ")");
    if (piv != col) {
      for (int j = 0; j < n; ++j) std::swap(lu(col, j), lu(piv, j));
      for (int j = 0; j < nrhs; ++j) std::swap(x(col, j), x(piv, j));
    }
    const double d = lu(col, col);
    for (int r = col + 1; r < n; ++r) {
      const double f = lu(r, col) / d;
      lu(r, col) = f;
      if (f == 0.0) continue;
      for (int j = col + 1; j < n; ++j) lu(r, j) -= f * lu(col, j);
      for (int j = 0; j < nrhs; ++j) x(r, j) -= f * x(col, j);
    }
  }
  // back substitution
  for (int r = n - 1; r >= 0; --r) {
    for (int j = 0; j < nrhs; ++j) {
      double s = x(r, j);
      for (int cidx = r + 1; cidx < n; ++cidx) s -= lu(r, cidx) * x(cidx, j);
      x(r, j) = s / lu(r, r);
    }
  }
  return x;
}

std::vector<double> solve_linear(const Matrix& a,
                                 const std::vector<double>& b) {
  if (static_cast<int>(b.size()) != a.rows())
    throw NumericError("solve_linear: size mismatch");
  Matrix rhs(a.rows(), 1);
  for (int i = 0; i < a.rows(); ++i) rhs(i, 0) = b[static_cast<std::size_t>(i)];
  Matrix x = solve_linear(a, rhs);
  std::vector<double> out(static_cast<std::size_t>(a.rows()));
  for (int i = 0; i < a.rows(); ++i) out[static_cast<std::size_t>(i)] = x(i, 0);
  return out;
}

// ---------------------------------------------------------------------------
// Spectral abscissa
// ---------------------------------------------------------------------------

namespace {

void hessenberg_inplace(Matrix& a) {
  const int n = a.rows();
  std::vector<double> v(static_cast<std::size_t>(n), 0.0);
  for (int k = 0; k + 2 < n; ++k) {
    double sigma = 0.0;
    for (int i = k + 1; i < n; ++i) sigma += a(i, k) * a(i, k);
    sigma = std::sqrt(sigma);
    if (sigma == 0.0) continue;
    const double x0 = a(k + 1, k);
    const double alpha = (x0 >= 0.0) ? -sigma : sigma;
    double vtv = 0.0;
    for (int i = k + 1; i < n; ++i) {
      v[static_cast<std::size_t>(i)] = a(i, k);
    }
    v[static_cast<std::size_t>(k + 1)] -= alpha;
    for (int i = k + 1; i < n; ++i)
      vtv += v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(i)];
    if (vtv == 0.0) continue;
    const double beta = 2.0 / vtv;
    // A <- P A
    for (int j = k; j < n; ++j) {
      double s = 0.0;
      for (int i = k + 1; i < n; ++i) s += v[static_cast<std::size_t>(i)] * a(i, j);
      s *= beta;
      for (int i = k + 1; i < n; ++i) a(i, j) -= s * v[static_cast<std::size_t>(i)];
    }
    // A <- A P
    for (int i = 0; i < n; ++i) {
      double s = 0.0;
      for (int j = k + 1; j < n; ++j) s += a(i, j) * v[static_cast<std::size_t>(j)];
      s *= beta;
      for (int j = k + 1; j < n; ++j) a(i, j) -= s * v[static_cast<std::size_t>(j)];
    }
    a(k + 1, k) = alpha;
    for (int i = k + 2; i < n; ++i) a(i, k) = 0.0;
  }
}

// Householder vector for a 3-vector; beta = 0 means identity.
struct House3 {
  double v0, v1, v2, beta;
};

House3 house3(double x, double y, double z) {
  const double nrm = std::sqrt(x * x + y * y + z * z);
  if (nrm == 0.0) return {1.0, 0.0, 0.0, 0.0};
  const double alpha = (x >= 0.0) ? -nrm : nrm;
  const double v0 = x - alpha;
  const double vtv = v0 * v0 + y * y + z * z;
  if (vtv == 0.0) return {1.0, 0.0, 0.0, 0.0};
  return {v0, y, z, 2.0 / vtv};
}

// One implicit double-shift QR step on the unreduced Hessenberg window
// [l..m] (size >= 3). Shifts come from the trailing 2x2 block; the bulge is
// chased down the subdiagonal with 3-row reflectors.
void francis_step(Matrix& h, int l, int m) {
  const int n = h.rows();
  const double s = h(m - 1, m - 1) + h(m, m);
  const double t =
      h(m - 1, m - 1) * h(m, m) - h(m - 1, m) * h(m, m - 1);
  double x = h(l, l) * h(l, l) + h(l, l + 1) * h(l + 1, l) - s * h(l, l) + t;
  double y = h(l + 1, l) * (h(l, l) + h(l + 1, l + 1) - s);
  double z = h(l + 2, l + 1) * h(l + 1, l);

  for (int k = l; k <= m - 2; ++k) {
    const House3 p = house3(x, y, z);
    if (p.beta != 0.0) {
      const int q = std::max(l, k - 1);
      for (int j = q; j < n; ++j) {
        const double d = p.beta * (p.v0 * h(k, j) + p.v1 * h(k + 1, j) +
                                   p.v2 * h(k + 2, j));
        h(k, j) -= d * p.v0;
        h(k + 1, j) -= d * p.v1;
        h(k + 2, j) -= d * p.v2;
      }
      const int r = std::min(k + 3, m);
      for (int i = 0; i <= r; ++i) {
        const double d = p.beta * (p.v0 * h(i, k) + p.v1 * h(i, k + 1) +
                                   p.v2 * h(i, k + 2));
        h(i, k) -= d * p.v0;
        h(i, k + 1) -= d * p.v1;
        h(i, k + 2) -= d * p.v2;
      }
    }
    x = h(k + 1, k);
    y = h(k + 2, k);
    z = (k + 3 <= m) ? h(k + 3, k) : 0.0;
  }

  // Final 2-row reflector on (x, y), rows m-1 and m.
  const double nrm = std::hypot(x, y);
  if (nrm > 0.0) {
    const double alpha = (x >= 0.0) ? -nrm : nrm;
    const double v0 = x - alpha, v1 = y;
    const double vtv = v0 * v0 + v1 * v1;
    if (vtv > 0.0) {
      const double beta = 2.0 / vtv;
      const int q = std::max(l, m - 2);
      for (int j = q; j < n; ++j) {
        const double d = beta * (v0 * h(m - 1, j) + v1 * h(m, j));
        h(m - 1, j) -= d * v0;
        h(m, j) -= d * v1;
      }
      for (int i = 0; i <= m; ++i) {
        const double d = beta * (v0 * h(i, m - 1) + v1 * h(i, m));
        h(i, m - 1) -= d * v0;
        h(i, m) -= d * v1;
      }
    }
  }
}

}  // namespace

double spectral_abscissa(const Matrix& a) {
  require_square(a, "spectral_abscissa");
  const int n = a.rows();
  if (n == 1) return a(0, 0);

  Matrix h = a;
  hessenberg_inplace(h);

  const double tol = 1e-10;
  const int max_sweeps = 500;
  int sweeps = 0;
  int m = n - 1;
  while (m > 0) {
    for (int i = m; i >= 1; --i) {
      if (std::fabs(h(i, i - 1)) <=
          tol * (std::fabs(h(i - 1, i - 1)) + std::fabs(h(i, i))))
        h(i, i - 1) = 0.0;
    }
    if (h(m, m - 1) == 0.0) {
      m -= 1;
      continue;
    }
    if (m == 1 || h(m - 1, m - 2) == 0.0) {
      // isolated 2x2 block; its pair is read off during extraction
      m -= 2;
      continue;
    }
    int l = m - 1;
    while (l > 0 && h(l, l - 1) != 0.0) --l;
    francis_step(h, l, m);
    if (++sweeps > max_sweeps)
      throw NumericError(
          "spectral_abscissa: QR iteration did not converge in 500 sweeps");
  }

  double best = -std::numeric_limits<double>::infinity();
  int i = 0;
  while (i < n) {
    if (i + 1 < n && h(i + 1, i) != 0.0) {
      const double p = h(i, i), q = h(i, i + 1);
      const double r = h(i + 1, i), s = h(i + 1, i + 1);
      const double tr = p + s;
      const double disc = (p - s) * (p - s) + 4.0 * q * r;
      if (disc >= 0.0) {
        const double root = std::sqrt(disc);
        best = std::max(best, 0.5 * (tr + root));
        best = std::max(best, 0.5 * (tr - root));
      } else {
        best = std::max(best, 0.5 * tr);  // complex pair, Re = tr/2
      }
      i += 2;
    } else {
      best = std::max(best, h(i, i));
      i += 1;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// FFT
// ---------------------------------------------------------------------------

namespace {

using cplx = std::complex<double>;
constexpr double kTwoPi = 6.283185307179586476925286766559;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place radix-2, forward sign convention exp(-2*pi*i/n).
void fft_pow2(std::vector<cplx>& x, bool inverse) {
  const int n = static_cast<int>(x.size());
  if (n <= 1) return;
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(x[static_cast<std::size_t>(i)], x[static_cast<std::size_t>(j)]);
  }
  for (int len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? kTwoPi : -kTwoPi) / len;
    const cplx wl(std::cos(ang), std::sin(ang));
    for (int i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (int j = 0; j < len / 2; ++j) {
        const cplx u = x[static_cast<std::size_t>(i + j)];
        const cplx v = x[static_cast<std::size_t>(i + j + len / 2)] * w;
        x[static_cast<std::size_t>(i + j)] = u + v;
        x[static_cast<std::size_t>(i + j + len / 2)] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / n;
    for (cplx& v : x) v *= inv;
  }
}

int next_pow2(int n) {
  int p = 1;
  while (p < n) p <<= 1;
  return p;
}

// Arbitrary-length DFT via Bluestein's chirp transform.
void dft_bluestein(std::vector<cplx>& x) {
  const int n = static_cast<int>(x.size());
  if (n <= 1) return;
  const int m = next_pow2(2 * n - 1);

  // chirp_k = exp(-i*pi*k^2/n); k^2 taken mod 2n to keep the angle accurate
  std::vector<cplx> chirp(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    const long long k2 = (static_cast<long long>(k) * k) % (2LL * n);
    const double ang = -kTwoPi * 0.5 * static_cast<double>(k2) / n;
    chirp[static_cast<std::size_t>(k)] = cplx(std::cos(ang), std::sin(ang));
  }

  std::vector<cplx> a(static_cast<std::size_t>(m), cplx(0.0, 0.0));
  std::vector<cplx> b(static_cast<std::size_t>(m), cplx(0.0, 0.0));
  for (int k = 0; k < n; ++k)
    a[static_cast<std::size_t>(k)] = x[static_cast<std::size_t>(k)] * chirp[static_cast<std::size_t>(k)];
  b[0] = std::conj(chirp[0]);
  for (int k = 1; k < n; ++k) {
    b[static_cast<std::size_t>(k)] = std::conj(chirp[static_cast<std::size_t>(k)]);
    b[static_cast<std::size_t>(m - k)] = std::conj(chirp[static_cast<std::size_t>(k)]);
  }

  fft_pow2(a, false);
  fft_pow2(b, false);
  for (int k = 0; k < m; ++k) a[static_cast<std::size_t>(k)] *= b[static_cast<std::size_t>(k)];
  fft_pow2(a, true);

  for (int k = 0; k < n; ++k)
    x[static_cast<std::size_t>(k)] = a[static_cast<std::size_t>(k)] * chirp[static_cast<std::size_t>(k)];
}

void fft_1d(std::vector<cplx>& x) {
  if (is_pow2(static_cast<int>(x.size())))
    fft_pow2(x, false);
  else
    dft_bluestein(x);
}

}  // namespace

std::vector<cplx> fft2(const std::vector<cplx>& f, int h, int w) {
  if (h < 1 || w < 1) throw NumericError("fft2: extents must be >= 1");
  if (f.size() != static_cast<std::size_t>(h) * static_cast<std::size_t>(w))
    throw NumericError("fft2: grid size does not match extents");
  std::vector<cplx> out = f;

  std::vector<cplx> row(static_cast<std::size_t>(w));
  for (int y = 0; y < h; ++y) {
    std::memcpy(row.data(), out.data() + static_cast<std::size_t>(y) * w,
                static_cast<std::size_t>(w) * sizeof(cplx));
    fft_1d(row);
    std::memcpy(out.data() + static_cast<std::size_t>(y) * w, row.data(),
                static_cast<std::size_t>(w) * sizeof(cplx));
  }
  std::vector<cplx> col(static_cast<std::size_t>(h));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y)
      col[static_cast<std::size_t>(y)] = out[static_cast<std::size_t>(y) * w + x];
    fft_1d(col);
    for (int y = 0; y < h; ++y)
      out[static_cast<std::size_t>(y) * w + x] = col[static_cast<std::size_t>(y)];
  }
  return out;
}

std::vector<cplx> fft2(const std::vector<double>& f, int h, int w) {
  std::vector<cplx> c(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) c[i] = cplx(f[i], 0.0);
  return fft2(c, h, w);
}

}  // namespace kae::linalg
