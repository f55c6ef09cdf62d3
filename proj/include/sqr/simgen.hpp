#pragma once

#include <boost/math/distributions/normal.hpp>
#include <cmath>

#include "sqr/fit.hpp"
#include "sqr/kernels.hpp"
#include "sqr/rng.hpp"

namespace sqr {

inline double norm_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

inline double norm_quantile(double p) {
  static const boost::math::normal_distribution<double> N01;
  return boost::math::quantile(N01, p);
}

enum class NoiseLevel { moderate, high, matern };

// First simulation design: Y_i(s_j) = x_i^T beta(s_j) + eta_i(s_j, tau) with
// eta = v + eps, v a Gaussian process, and eta centered so its tau-quantile
// is zero. Covariates are (1, Bernoulli(0.5), Uniform(0,1)).
struct Sim1Config {
  Index n = 100, m = 100;
  std::uint64_t seed = 0;
  double tau = 0.5;                 // centering level
  double a = 0.6, h = 0.8;          // correlated-noise covariance scale/range
  double noise_var = 0.1;           // iid noise variance
  NoiseLevel level = NoiseLevel::moderate;
  double matern_alpha = 0.5, matern_nu = 2.5;  // matern noise variant
};

struct Sim1Data {
  Dataset data;
  Matrix beta_true;    // 3 x m
  double center_shift; // F^{-1}(tau) subtracted from eta
};

inline Matrix sim1_beta(const Grid& grid) {
  Matrix B(3, grid.size());
  for (Index j = 0; j < grid.size(); ++j) {
    const double s = grid.points(j, 0);
    B(0, j) = 5.0 * s * s;
    B(1, j) = 2.0 * std::pow(1.0 - s, 4);
    B(2, j) = 2.0 + 20.0 * std::sin(6.0 * s) + 2.0 * s * s * s;
  }
  return B;
}

inline Sim1Data gen_sim1(const Sim1Config& cfg) {
  require(cfg.n >= 1 && cfg.m >= 2, "sim1: need n >= 1, m >= 2");
  require(cfg.a > 0 && cfg.h > 0, "sim1: a, h must be > 0");
  Grid grid = Grid::regular_1d(cfg.m);
  const Index n = cfg.n, m = cfg.m;

  double noise_var = cfg.noise_var;
  if (cfg.level == NoiseLevel::high || cfg.level == NoiseLevel::matern) noise_var = 0.4;

  Matrix C(m, m);
  for (Index j = 0; j < m; ++j)
    for (Index l = 0; l < m; ++l) {
      const double d = grid.points(j, 0) - grid.points(l, 0);
      if (cfg.level == NoiseLevel::matern)
        C(j, l) = cfg.a * matern(std::fabs(d), cfg.matern_alpha, cfg.matern_nu);
      else
        C(j, l) = cfg.a * std::exp(-(d / cfg.h) * (d / cfg.h));
    }
  const Matrix L = safe_cholesky(C, 1e-10, 1e-4);

  // both noise components are normal, so the marginal of eta is exactly
  // N(0, a + noise_var) and the centering shift is analytic
  const double shift = std::sqrt(cfg.a + noise_var) * norm_quantile(cfg.tau);

  Rng rng(cfg.seed, 0x51e1);
  Matrix X(n, 3);
  for (Index i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = double(rng.bernoulli(0.5));
    X(i, 2) = rng.uniform();
  }
  Matrix beta = sim1_beta(grid);
  Matrix Y(n, m);
  Vector z(m);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < m; ++j) z(j) = rng.normal();
    Vector v = L * z;
    for (Index j = 0; j < m; ++j) {
      const double eps = std::sqrt(noise_var) * rng.normal();
      Y(i, j) = X.row(i).dot(beta.col(j)) + v(j) + eps - shift;
    }
  }

  Sim1Data out;
  out.data = Dataset::make(std::move(X), std::move(Y), std::move(grid));
  out.beta_true = std::move(beta);
  out.center_shift = shift;
  return out;
}

inline Sim1Data gen_noise_variants(Sim1Config cfg, NoiseLevel level) {
  cfg.level = level;
  return gen_sim1(cfg);
}

// Second design: Y(s) | x is N(mu_x(s), sigma_x(s)^2) with Gaussian-process
// quantile levels, i.e. Phi^{-1}(U(s)) has Matern correlation with scale
// exp(alpha^T x), so the tau-quantile is mu_x(s) + sigma_x(s) Phi^{-1}(tau).
struct Sim2Config {
  Index n = 200, m = 100;
  std::uint64_t seed = 0;
  double nu = 2.5;
  Vector alpha = (Vector(3) << 0.8, 0.8, 0.8).finished();
};

struct Sim2Data {
  Dataset data;
  Matrix U_true;               // n x m quantile levels of the observations
  Matrix mu_x, sigma_x;        // n x m marginal parameters
  Matrix beta_mu, beta_sigma;  // 3 x m
  Vector alpha;

  // true tau-quantile of Y(s_j) given row i
  double true_quantile(Index i, Index j, double tau) const {
    return mu_x(i, j) + sigma_x(i, j) * norm_quantile(tau);
  }
  Matrix true_beta(double tau) const { return beta_mu + norm_quantile(tau) * beta_sigma; }
};

inline void sim2_beta(const Grid& grid, Matrix& beta_mu, Matrix& beta_sigma) {
  const Index m = grid.size();
  beta_mu.resize(3, m);
  beta_sigma.resize(3, m);
  for (Index j = 0; j < m; ++j) {
    const double s = grid.points(j, 0);
    beta_mu(0, j) = 1.0 + s;
    beta_mu(1, j) = std::sin(2.0 * M_PI * s) + 1.5;
    beta_mu(2, j) = s * s + 0.5;
    beta_sigma(0, j) = 0.3 + 0.2 * s;
    beta_sigma(1, j) = 0.2;
    beta_sigma(2, j) = 0.1 + 0.1 * s;
  }
}

inline Sim2Data gen_sim2(const Sim2Config& cfg) {
  require(cfg.n >= 1 && cfg.m >= 2, "sim2: need n >= 1, m >= 2");
  require(cfg.alpha.size() == 3, "sim2: alpha must have 3 components");
  Grid grid = Grid::regular_1d(cfg.m);
  const Index n = cfg.n, m = cfg.m;

  Rng rng(cfg.seed, 0x51e2);
  Matrix X(n, 3);
  for (Index i = 0; i < n; ++i) {
    X(i, 0) = 1.0;
    X(i, 1) = double(rng.bernoulli(0.5));
    X(i, 2) = rng.uniform();
  }

  Sim2Data out;
  sim2_beta(grid, out.beta_mu, out.beta_sigma);
  out.alpha = cfg.alpha;
  out.mu_x = X * out.beta_mu;
  out.sigma_x = X * out.beta_sigma;
  require(out.sigma_x.minCoeff() > 0, "sim2: sigma_x must stay positive");

  Matrix Y(n, m);
  out.U_true.resize(n, m);
  Vector eps(m);
  for (Index i = 0; i < n; ++i) {
    const double scale = std::exp(cfg.alpha.dot(X.row(i)));
    Matrix R(m, m);
    for (Index j = 0; j < m; ++j)
      for (Index l = j; l < m; ++l) {
        const double v = matern(grid.distance(j, l), scale, cfg.nu);
        R(j, l) = v;
        R(l, j) = v;
      }
    const Matrix L = safe_cholesky(std::move(R), 1e-10, 1e-4);
    for (Index j = 0; j < m; ++j) eps(j) = rng.normal();
    const Vector z = L * eps;
    for (Index j = 0; j < m; ++j) {
      out.U_true(i, j) = norm_cdf(z(j));
      Y(i, j) = out.mu_x(i, j) + out.sigma_x(i, j) * z(j);
    }
  }
  out.data = Dataset::make(std::move(X), std::move(Y), std::move(grid));
  return out;
}

// root mean integrated squared error over the grid
inline double rmise(const Vector& beta_hat, const Vector& beta_true) {
  require(beta_hat.size() == beta_true.size(), "rmise: length mismatch");
  return std::sqrt((beta_hat - beta_true).squaredNorm() / double(beta_hat.size()));
}

inline double srmise(const Matrix& beta_hats, const Matrix& beta_trues) {
  require(beta_hats.rows() == beta_trues.rows() && beta_hats.cols() == beta_trues.cols(),
          "srmise: shape mismatch");
  double s = 0.0;
  for (Index k = 0; k < beta_hats.rows(); ++k)
    s += rmise(beta_hats.row(k).transpose(), beta_trues.row(k).transpose());
  return s;
}

}  // namespace sqr
