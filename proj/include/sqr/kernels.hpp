#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <utility>

#include "sqr/common.hpp"

namespace sqr {

// Observation locations s_1..s_m in R^d, d in {1,2}. Under a fixed design all
// subjects share these points; under a random design this is the union of the
// per-subject locations.
struct Grid {
  enum class Design { fixed, random };

  Matrix points;  // m x d
  Design design = Design::fixed;

  Grid() = default;
  explicit Grid(Matrix pts, Design dsg = Design::fixed)
      : points(std::move(pts)), design(dsg) {
    require(points.rows() >= 1, "grid: needs at least one point");
    require(points.cols() == 1 || points.cols() == 2, "grid: dimension must be 1 or 2");
    require(points.allFinite(), "grid: non-finite location");
  }

  static Grid regular_1d(Index m, double a = 0.0, double b = 1.0) {
    require(m >= 2, "grid: m >= 2 required");
    Matrix pts(m, 1);
    for (Index j = 0; j < m; ++j) pts(j, 0) = a + (b - a) * double(j) / double(m - 1);
    return Grid(std::move(pts));
  }

  Index size() const { return points.rows(); }
  Index dim() const { return points.cols(); }

  double distance(Index j, Index k) const {
    return (points.row(j) - points.row(k)).norm();
  }

  double diameter() const {
    double d = 0.0;
    for (Index j = 0; j < size(); ++j)
      for (Index k = j + 1; k < size(); ++k) d = std::max(d, distance(j, k));
    return d;
  }

  // evenly spaced 1-d grid (within fp slack); enables exact integer lags
  std::optional<double> regular_spacing() const {
    if (dim() != 1 || size() < 2) return std::nullopt;
    const double h = points(1, 0) - points(0, 0);
    if (h <= 0) return std::nullopt;
    for (Index j = 1; j < size(); ++j) {
      const double hj = points(j, 0) - points(j - 1, 0);
      if (std::fabs(hj - h) > 1e-9 * std::max(1.0, std::fabs(h))) return std::nullopt;
    }
    return h;
  }
};

// Reproducing kernel on the spatial domain. weighted_sum combines two child
// kernels with nonnegative coefficients (cross-validated elsewhere).
struct KernelSpec {
  enum class Family { gaussian, laplace, polynomial, inverse_quadratic, weighted_sum };

  Family family = Family::gaussian;
  double sigma = 0.2;
  int degree = 2;  // polynomial only
  double c1 = 0.0, c2 = 0.0;
  std::shared_ptr<const KernelSpec> k1, k2;
  // diagonal ridge added by gram(); negative means auto (1e-8 * mean diag)
  double jitter = -1.0;

  static KernelSpec gaussian(double sigma = 0.2) {
    KernelSpec k;
    k.family = Family::gaussian;
    k.sigma = sigma;
    return k;
  }
  static KernelSpec laplace(double sigma) {
    KernelSpec k;
    k.family = Family::laplace;
    k.sigma = sigma;
    return k;
  }
  static KernelSpec polynomial(double sigma, int degree) {
    KernelSpec k;
    k.family = Family::polynomial;
    k.sigma = sigma;
    k.degree = degree;
    return k;
  }
  static KernelSpec inverse_quadratic(double sigma) {
    KernelSpec k;
    k.family = Family::inverse_quadratic;
    k.sigma = sigma;
    return k;
  }
  static KernelSpec weighted_sum(double c1, KernelSpec a, double c2, KernelSpec b) {
    KernelSpec k;
    k.family = Family::weighted_sum;
    k.c1 = c1;
    k.c2 = c2;
    k.k1 = std::make_shared<KernelSpec>(std::move(a));
    k.k2 = std::make_shared<KernelSpec>(std::move(b));
    return k;
  }

  void validate() const {
    if (family == Family::weighted_sum) {
      require(c1 >= 0 && c2 >= 0, "kernel: weighted_sum coefficients must be >= 0");
      require(k1 && k2, "kernel: weighted_sum needs two children");
      k1->validate();
      k2->validate();
    } else {
      require(sigma > 0, "kernel: sigma must be > 0");
      if (family == Family::polynomial) require(degree >= 1, "kernel: degree must be >= 1");
    }
  }
};

// Pointwise kernel evaluation K(a, b).
inline double kernel_eval(const KernelSpec& spec, const Eigen::RowVectorXd& a,
                          const Eigen::RowVectorXd& b) {
  switch (spec.family) {
    case KernelSpec::Family::gaussian: {
      const double d2 = (a - b).squaredNorm();
      return std::exp(-d2 / (2.0 * spec.sigma * spec.sigma));
    }
    case KernelSpec::Family::laplace:
      return std::exp(-spec.sigma * (a - b).lpNorm<1>());
    case KernelSpec::Family::polynomial:
      return std::pow(a.dot(b) + spec.sigma * spec.sigma, spec.degree);
    case KernelSpec::Family::inverse_quadratic: {
      const double s2 = spec.sigma * spec.sigma;
      return s2 / (s2 + (a - b).squaredNorm());
    }
    case KernelSpec::Family::weighted_sum:
      return spec.c1 * kernel_eval(*spec.k1, a, b) + spec.c2 * kernel_eval(*spec.k2, a, b);
  }
  return 0.0;  // unreachable
}

// Gram matrix Sigma_jl = K(s_j, s_l) + jitter * 1{j=l}. Symmetric by
// construction (upper triangle mirrored).
inline Matrix gram(const KernelSpec& spec, const Grid& grid) {
  spec.validate();
  const Index m = grid.size();
  Matrix S(m, m);
  for (Index j = 0; j < m; ++j) {
    for (Index l = j; l < m; ++l) {
      const double v = kernel_eval(spec, grid.points.row(j), grid.points.row(l));
      if (!std::isfinite(v)) throw invalid_argument("gram: non-finite kernel value");
      S(j, l) = v;
      S(l, j) = v;
    }
  }
  double jit = spec.jitter;
  if (jit < 0) jit = 1e-8 * S.diagonal().mean();
  S.diagonal().array() += jit;
  return S;
}

// Kernel vector k_s = (K(s, s_1), ..., K(s, s_m)); jitter-free, so at a grid
// point it reproduces the corresponding jitter-free Gram column exactly.
inline Vector kvec(const KernelSpec& spec, const Grid& grid, const Eigen::RowVectorXd& s) {
  spec.validate();
  require(s.allFinite(), "kvec: non-finite location");
  require(s.cols() == grid.dim(), "kvec: location dimension mismatch");
  const Index m = grid.size();
  Vector k(m);
  for (Index j = 0; j < m; ++j) {
    const double v = kernel_eval(spec, s, grid.points.row(j));
    if (!std::isfinite(v)) throw invalid_argument("kvec: non-finite kernel value");
    k(j) = v;
  }
  return k;
}

inline Vector kvec(const KernelSpec& spec, const Grid& grid, double s) {
  Eigen::RowVectorXd p(1);
  p << s;
  return kvec(spec, grid, p);
}

// Matern correlation M(h) = 2^{1-nu}/Gamma(nu) (alpha h)^nu K_nu(alpha h),
// M(0) = 1. Closed forms for nu in {1/2, 3/2, 5/2}; std::cyl_bessel_k
// otherwise. Underflow-safe: extreme alpha*h returns 0, never NaN.
inline double matern(double h, double alpha, double nu) {
  require(h >= 0, "matern: h must be >= 0");
  require(alpha > 0, "matern: alpha must be > 0");
  require(nu > 0, "matern: nu must be > 0");
  const double x = alpha * h;
  if (x == 0.0) return 1.0;
  if (x > 700.0) return 0.0;  // e^{-700} underflows anyway

  double v;
  if (std::fabs(nu - 0.5) < 1e-12) {
    v = std::exp(-x);
  } else if (std::fabs(nu - 1.5) < 1e-12) {
    v = (1.0 + x) * std::exp(-x);
  } else if (std::fabs(nu - 2.5) < 1e-12) {
    v = (1.0 + x + x * x / 3.0) * std::exp(-x);
  } else {
    v = std::pow(2.0, 1.0 - nu) / std::tgamma(nu) * std::pow(x, nu) * std::cyl_bessel_k(nu, x);
  }
  if (!std::isfinite(v)) return 0.0;
  return std::min(std::max(v, 0.0), 1.0);
}

// min-eigenvalue PSD check used in tests and input validation; O(m^3)
inline bool gram_is_psd(const Matrix& S, double tol_scale = 1e-8) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(S, Eigen::EigenvaluesOnly);
  const double norm = std::max(S.cwiseAbs().maxCoeff(), 1e-300);
  return es.eigenvalues().minCoeff() >= -tol_scale * norm;
}

}  // namespace sqr
