#pragma once

#include <complex>
#include <cstdint>
#include <vector>

#include "kae/common.hpp"

namespace kae::linalg {

/// Dense row-major matrix of doubles. Desk-scale sizes (n <= a few hundred),
/// so everything here is direct dense arithmetic.
class Matrix {
 public:
  Matrix() = default;
  Matrix(int rows, int cols)
      : rows_(rows), cols_(cols),
        a_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols),
           0.0) {
    if (rows <= 0 || cols <= 0)
      throw NumericError("Matrix: dimensions must be positive");
  }
  Matrix(int rows, int cols, std::vector<double> vals)
      : rows_(rows), cols_(cols), a_(std::move(vals)) {
    if (a_.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
      throw NumericError("Matrix: value count does not match dimensions");
  }

  static Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  bool square() const { return rows_ == cols_; }

  double& operator()(int i, int j) { return a_[idx(i, j)]; }
  double operator()(int i, int j) const { return a_[idx(i, j)]; }

  std::vector<double>& values() { return a_; }
  const std::vector<double>& values() const { return a_; }
  double* data() { return a_.data(); }
  const double* data() const { return a_.data(); }

 private:
  std::size_t idx(int i, int j) const {
    return static_cast<std::size_t>(i) * static_cast<std::size_t>(cols_) +
           static_cast<std::size_t>(j);
  }
  int rows_ = 0;
  int cols_ = 0;
  std::vector<double> a_;
};

Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Matrix transpose(const Matrix& a);
std::vector<double> matvec(const Matrix& a, const std::vector<double>& x);

/// Max absolute column sum. The operative norm for scaling decisions here.
double norm1(const Matrix& a);
double max_abs(const Matrix& a);

/// exp(M) by scaling and squaring. The series on M/2^s (s chosen from the
/// 1-norm) runs until a term's 1-norm drops below 1e-16 of the partial sum's,
/// capped at 30 terms, then the result is squared s times.
Matrix matrix_exp(const Matrix& m);

/// exp(K*tau) * z. One dense exponential, no repeated stepping.
std::vector<double> matrix_exp_action(const Matrix& k, double tau,
                                      const std::vector<double>& z);

/// Solve A x = b by LU with partial pivoting. A pivot below 1e-12 in
/// magnitude raises NumericError.
std::vector<double> solve_linear(const Matrix& a, const std::vector<double>& b);
/// Multi-RHS variant: returns X with A X = B.
Matrix solve_linear(const Matrix& a, const Matrix& b);

/// Largest real part over the eigenvalues of a real square matrix.
/// Reduction to Hessenberg form, then implicit double-shift QR steps with
/// deflation (tolerance 1e-10, at most 500 steps) until the iterate is
/// quasi-triangular; 2x2 blocks yield complex pairs through the quadratic
/// formula. Raises NumericError if the step cap is hit first.
double spectral_abscissa(const Matrix& a);

/// Unnormalized forward 2-D DFT of a row-major h x w grid:
///   F[u,v] = sum_{y,x} f[y,x] exp(-2*pi*i*(u*y/h + v*x/w)).
/// Power-of-two extents use radix-2; anything else goes through Bluestein.
std::vector<std::complex<double>> fft2(
    const std::vector<std::complex<double>>& f, int h, int w);
std::vector<std::complex<double>> fft2(const std::vector<double>& f, int h,
                                       int w);

}  // namespace kae::linalg
