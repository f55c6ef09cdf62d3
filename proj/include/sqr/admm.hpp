#pragma once

#include <cmath>

#include "sqr/fit.hpp"

namespace sqr {

// prox of the check loss under an augmented quadratic with weight rho:
// argmin_r rho_tau(r) + (rho/2)(r - v)^2  (shifted soft threshold)
inline double admm_prox(double v, double tau, double rho) {
  if (v > tau / rho) return v - tau / rho;
  if (v < -(1.0 - tau) / rho) return v + (1.0 - tau) / rho;
  return 0.0;
}

struct AdmmOptions {
  double rho = 1.0;
  int max_iter = 200000;
  double eps_abs = 1e-7;
  double eps_rel = 1e-6;
};

// ADMM baseline for the same penalized check-loss objective, via the split
// r = Y - X mu 1^T - X B Sigma. The (mu,B) update is a single pre-factorized
// ridge solve; the r update is the check-loss prox; then dual ascent.
inline QuantileFit fit_quantile_admm(const Dataset& data, double tau, double lambda,
                                     const KernelSpec& kernel, const AdmmOptions& opts = {}) {
  require(data.rectangular, "admm: rectangular (fixed-design) data required");
  require(tau > 0 && tau < 1, "admm: tau must be in (0,1)");
  require(lambda > 0, "admm: lambda must be > 0");
  data.validate();

  const Index n = data.n(), p = data.p(), m = data.grid.size();
  KernelSpec k0 = kernel;
  k0.jitter = 0.0;
  const Matrix Sigma = gram(k0, data.grid);
  const double rho = opts.rho;

  // design T = [1 Sigma] (m x (m+1)); fitted values are X C T^T with C = [mu B]
  Matrix T(m, m + 1);
  T.col(0).setOnes();
  T.rightCols(m) = Sigma;
  const Matrix TtT = T.transpose() * T;
  const Matrix Gp = data.X.transpose() * data.X;

  // normal matrix rho (T'T (x) X'X) + lambda (blockdiag(0, Sigma) (x) I_p)
  const Index q = p * (m + 1);
  Matrix Nmat(q, q);
  for (Index a = 0; a <= m; ++a)
    for (Index b = 0; b <= m; ++b)
      Nmat.block(a * p, b * p, p, p) = rho * TtT(a, b) * Gp;
  for (Index a = 1; a <= m; ++a)
    for (Index b = 1; b <= m; ++b)
      Nmat.block(a * p, b * p, p, p).diagonal().array() += lambda * Sigma(a - 1, b - 1);
  // solve-only ridge: the Gaussian Gram is numerically rank-deficient
  Nmat.diagonal().array() += 1e-9 * Nmat.diagonal().mean();
  const Eigen::LDLT<Matrix> llt(Nmat);
  if (llt.info() != Eigen::Success)
    throw numerical_error("admm: normal-equation factorization failed");

  Matrix C = Matrix::Zero(p, m + 1);
  Matrix R = Matrix::Zero(n, m), U = Matrix::Zero(n, m);
  Matrix fitted = Matrix::Zero(n, m);

  const double scale = std::sqrt(double(n * m));
  bool converged = false;
  int iter = 0;
  for (iter = 0; iter < opts.max_iter; ++iter) {
    // (mu, B) ridge solve
    const Matrix V = data.Y - R + U;
    Matrix rhs_mat = rho * (data.X.transpose() * V) * T;  // p x (m+1)
    Vector rhs = Eigen::Map<Vector>(rhs_mat.data(), q);
    Vector cvec = llt.solve(rhs);
    C = Eigen::Map<Matrix>(cvec.data(), p, m + 1);
    fitted.noalias() = data.X * (C * T.transpose());

    // r prox
    const Matrix Rold = R;
    const Matrix W = data.Y - fitted + U;
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) R(i, j) = admm_prox(W(i, j), tau, rho);

    // dual ascent on the scaled multiplier
    const Matrix Pri = data.Y - fitted - R;
    U += Pri;

    const double r_pri = Pri.norm();
    const double s_dua = rho * (R - Rold).norm();
    const double eps_pri =
        opts.eps_abs * scale + opts.eps_rel * std::max({fitted.norm(), R.norm(), data.Y.norm()});
    const double eps_dua = opts.eps_abs * scale + opts.eps_rel * rho * U.norm();
    if (r_pri <= eps_pri && s_dua <= eps_dua) {
      converged = true;
      ++iter;
      break;
    }
  }

  QuantileFit fit;
  fit.tau = tau;
  fit.lambda = lambda;
  fit.kernel = kernel;
  fit.grid = data.grid;
  fit.rectangular = true;
  fit.mu = C.col(0);
  fit.B = C.rightCols(m);
  fit.fitted = fitted;
  fit.converged = converged;
  fit.iterations = iter;
  fit.interp_tol = 1e-6 * std::sqrt((data.Y.array() - data.Y.mean()).square().sum() /
                                    double(std::max<Index>(n * m - 1, 1)));

  // multiplier estimate of the duals, clipped to the box
  const double lo = -(1.0 - tau), hi = tau;
  fit.D = (rho * U).cwiseMax(lo).cwiseMin(hi);
  const double margin = 1e-6 * (hi - lo);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      if (fit.D(i, j) > lo + margin && fit.D(i, j) < hi - margin) fit.se.emplace_back(i, j);

  fit.check_loss_sum = 0.0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j)
      fit.check_loss_sum += check_loss(data.Y(i, j) - fitted(i, j), tau);
  double pen = 0.0;
  for (Index k = 0; k < p; ++k) pen += fit.B.row(k) * Sigma * fit.B.row(k).transpose();
  fit.objective = fit.check_loss_sum + 0.5 * lambda * pen;
  fit.stationarity =
      (data.X.transpose() * fit.D.rowwise().sum()).cwiseAbs().maxCoeff();
  return fit;
}

}  // namespace sqr
