#pragma once
#include <cstdio>

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "sqr/common.hpp"
#include "sqr/kernels.hpp"
#include "sqr/qp.hpp"

namespace sqr {

// rho_tau(r): asymmetric absolute loss whose minimizer is the tau-quantile
inline double check_loss(double r, double tau) {
  return r > 0 ? tau * r : -(1.0 - tau) * r;
}

// Covariates X (n x p, constant-1 column permitted) and functional responses.
// A rectangular dataset stores Y (n x m) on a shared grid (fixed design); a
// long-form dataset lists (subject, union-grid index, value) observations.
struct Dataset {
  Matrix X;
  Matrix Y;  // n x m, rectangular only
  Grid grid;
  std::vector<Index> obs_subj, obs_loc;
  Vector obs_y;
  bool rectangular = true;

  static Dataset make(Matrix X, Matrix Y, Grid grid) {
    Dataset d;
    d.X = std::move(X);
    d.Y = std::move(Y);
    d.grid = std::move(grid);
    d.rectangular = true;
    d.validate();
    return d;
  }

  static Dataset make_long(Matrix X, std::vector<Index> subj, std::vector<Index> loc,
                           Vector y, Grid grid) {
    Dataset d;
    d.X = std::move(X);
    d.grid = std::move(grid);
    d.obs_subj = std::move(subj);
    d.obs_loc = std::move(loc);
    d.obs_y = std::move(y);
    d.rectangular = false;
    d.grid.design = Grid::Design::random;
    d.validate();
    return d;
  }

  Index n() const { return X.rows(); }
  Index p() const { return X.cols(); }
  Index n_obs() const {
    return rectangular ? Y.rows() * Y.cols() : Index(obs_subj.size());
  }

  void validate() const {
    require(X.allFinite(), "dataset: non-finite covariate");
    require(X.rows() >= X.cols(), "dataset: need n >= p");
    Eigen::ColPivHouseholderQR<Matrix> qr(X);
    require(qr.rank() == X.cols(), "dataset: X must have full column rank");
    if (rectangular) {
      require(Y.rows() == X.rows(), "dataset: X/Y row mismatch");
      require(Y.cols() == grid.size(), "dataset: Y column count != grid size");
      require(Y.allFinite(), "dataset: non-finite response");
    } else {
      require(obs_subj.size() == obs_loc.size() && Index(obs_subj.size()) == obs_y.size(),
              "dataset: observation arrays must align");
      require(obs_y.allFinite(), "dataset: non-finite response");
      for (std::size_t u = 0; u < obs_subj.size(); ++u) {
        require(obs_subj[u] >= 0 && obs_subj[u] < X.rows(), "dataset: subject index out of range");
        require(obs_loc[u] >= 0 && obs_loc[u] < grid.size(), "dataset: grid index out of range");
      }
    }
  }
};

struct FitOptions {
  double tol_mu = 1e-8;          // relative ||delta mu||_inf threshold
  double tol_stat_scale = 1e-6;  // stationarity target: scale * n * max|x|
  int max_outer = 200;
  double qp_tol = -1.0;          // final inner tolerance; auto 1e-7*(1+||c||_inf)
  int qp_max_sweeps = 10000;
  double omega = -1.0;           // augmentation weight; auto-scaled if < 0
  const Matrix* warm_D = nullptr;
  const Vector* warm_mu = nullptr;
  bool trace_objective = false;
};

struct QuantileFit {
  double tau = 0.5;
  double lambda = 1.0;
  Vector mu;  // p
  Matrix B;   // p x m representer coefficients, row k = b_k
  Matrix D;   // n x m duals (rectangular); see obs_d for long form
  std::vector<std::pair<Index, Index>> se;  // strictly interior (subject, grid) pairs
  KernelSpec kernel;
  Grid grid;
  bool rectangular = true;
  Vector obs_d, obs_fitted, obs_resid;  // long form storage
  Matrix fitted;                        // n x m fitted values (rectangular)
  bool converged = false;
  bool mu_ridge_flagged = false;
  int iterations = 0;
  double objective = 0.0;
  double check_loss_sum = 0.0;
  double stationarity = 0.0;
  double interp_tol = 0.0;
  std::vector<double> objective_trace;

  Index m() const { return grid.size(); }
};

namespace detail {

// pooled linear quantile regression on stacked observations (IRLS on a
// majorized check loss); used only to initialize mu
inline Vector pooled_quantile_init(const Matrix& X, const std::vector<Index>& subj,
                                   const Vector& y, double tau) {
  const Index p = X.cols(), N = y.size();
  Matrix Xs(N, p);
  for (Index u = 0; u < N; ++u) Xs.row(u) = X.row(subj[std::size_t(u)]);
  Vector mu = (Xs.transpose() * Xs).ldlt().solve(Xs.transpose() * y);
  const double eps = 1e-6 * (1.0 + y.cwiseAbs().maxCoeff());
  const Vector xsum = Xs.colwise().sum();
  for (int it = 0; it < 100; ++it) {
    Vector r = y - Xs * mu;
    Matrix A = Matrix::Zero(p, p);
    Vector b = Vector::Zero(p);
    for (Index u = 0; u < N; ++u) {
      const double w = 1.0 / std::max(std::fabs(r(u)), eps);
      A.noalias() += w * Xs.row(u).transpose() * Xs.row(u);
      b.noalias() += w * y(u) * Xs.row(u).transpose();
    }
    b += (2.0 * tau - 1.0) * xsum;
    Vector mu_new = A.ldlt().solve(b);
    const double step = (mu_new - mu).cwiseAbs().maxCoeff();
    mu = mu_new;
    if (step < 1e-10 * (1.0 + mu.cwiseAbs().maxCoeff())) break;
  }
  return mu;
}

}  // namespace detail

// Penalized check-loss fit at one quantile level: alternates the reduced dual
// box QP (given mu) with a least-squares mu update over the interpolation
// equations of the interior set Se. The inner QP carries an
// (omega/2)||sum_ij d_ij x_i||^2 augmentation so that the Se update is
// exactly the multiplier step driving the stationarity residual to zero.
inline QuantileFit fit_quantile(const Dataset& data, double tau, double lambda,
                                const KernelSpec& kernel, const FitOptions& opts = {}) {
  require(tau > 0 && tau < 1, "fit: tau must be in (0,1)");
  require(lambda > 0, "fit: lambda must be > 0");
  data.validate();

  const Index n = data.n(), p = data.p(), m = data.grid.size();
  KernelSpec k0 = kernel;
  k0.jitter = 0.0;  // the QP and penalty use the jitter-free Gram so that
                    // Sigma^{-1} k_{s_j} = e_j holds exactly at grid points
  const Matrix Sigma = gram(k0, data.grid);

  std::vector<Index> subj, loc;
  Vector yv;
  if (data.rectangular) {
    detail::lattice_obs(n, m, subj, loc);
    yv.resize(n * m);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) yv(i * m + j) = data.Y(i, j);
  } else {
    subj = data.obs_subj;
    loc = data.obs_loc;
    yv = data.obs_y;
  }
  const Index N = yv.size();
  const double lo = -(1.0 - tau), hi = tau;

  detail::CoordinateBoxQp qp(Sigma, data.X, subj, loc, lo, hi, lambda);
  const Matrix& G = qp.gram_x();

  double omega = opts.omega;
  if (omega < 0) {
    // balance the augmentation against the base coordinate curvature
    omega = G.diagonal().mean() * Sigma.diagonal().mean() /
            (lambda * data.X.rowwise().squaredNorm().mean());
  }
  qp.set_omega(omega);

  Vector mu = opts.warm_mu ? *opts.warm_mu
                           : detail::pooled_quantile_init(data.X, subj, yv, tau);
  if (opts.warm_D) {
    require(opts.warm_D->rows() == n && opts.warm_D->cols() == m, "fit: warm_D shape mismatch");
    for (Index u = 0; u < N; ++u)
      qp.d()(u) = std::clamp((*opts.warm_D)(subj[std::size_t(u)], loc[std::size_t(u)]), lo, hi);
    qp.refresh();
  }

  const double max_abs_x = data.X.cwiseAbs().maxCoeff();
  const double sd_y = std::sqrt((yv.array() - yv.mean()).square().sum() / double(std::max<Index>(N - 1, 1)));
  const double tol_stat = opts.tol_stat_scale * double(n) * max_abs_x;
  const double tol_interp = 1e-6 * std::max(sd_y, 1e-12);
  const double margin = 1e-6 * (hi - lo);
  double qp_tol_final = opts.qp_tol;
  if (qp_tol_final < 0) qp_tol_final = 1e-7 * (1.0 + yv.cwiseAbs().maxCoeff());

  QuantileFit fit;
  fit.tau = tau;
  fit.lambda = lambda;
  fit.kernel = kernel;
  fit.grid = data.grid;
  fit.rectangular = data.rectangular;
  fit.interp_tol = tol_interp;

  Vector c(N), w_obs(N);
  double obj_prev = std::numeric_limits<double>::infinity();
  double stat_prev = std::numeric_limits<double>::infinity();
  double dmu = std::numeric_limits<double>::infinity();
  bool kkt_ok = false;
  int outer = 0;

  auto primal_objective = [&](const Vector& mu_eval, double* loss_out) {
    double loss = 0.0;
    for (Index u = 0; u < N; ++u)
      loss += check_loss(yv(u) - data.X.row(subj[std::size_t(u)]).dot(mu_eval) - w_obs(u), tau);
    if (loss_out) *loss_out = loss;
    // penalty (lambda/2) sum_k b_k' Sigma b_k = (1/2) sum_u d_u W_u
    double pen = 0.0;
    for (Index u = 0; u < N; ++u) pen += qp.d()(u) * w_obs(u);
    return loss + 0.5 * pen;
  };

  for (outer = 0; outer < opts.max_outer; ++outer) {
    for (Index u = 0; u < N; ++u)
      c(u) = yv(u) - data.X.row(subj[std::size_t(u)]).dot(mu);

    // inexact inner solves early on, tight once the multiplier settles
    const double qp_tol = std::max(qp_tol_final, std::min(0.05 * stat_prev, 1e-3));
    const auto cert = qp.solve(c, qp_tol, opts.qp_max_sweeps);

    // fitted kernel part W = G (D Sigma) / lambda at the observations
    const Matrix V = G * qp.dsigma() / lambda;
    for (Index u = 0; u < N; ++u) w_obs(u) = V(subj[std::size_t(u)], loc[std::size_t(u)]);

    // interior set and its least-squares mu update
    Matrix A = Matrix::Zero(p, p);
    Vector b = Vector::Zero(p);
    Index n_se = 0;
    for (Index u = 0; u < N; ++u) {
      const double dv = qp.d()(u);
      if (dv > lo + margin && dv < hi - margin) {
        const auto xi = data.X.row(subj[std::size_t(u)]);
        A.noalias() += xi.transpose() * xi;
        b.noalias() += (yv(u) - w_obs(u)) * xi.transpose();
        ++n_se;
      }
    }
    Vector mu_new;
    if (n_se == 0) {
      mu_new = mu + omega * qp.xtilde_d();  // pure multiplier step
      fit.mu_ridge_flagged = true;
    } else {
      if (n_se < p) {
        A.diagonal().array() += 1e-8;
        fit.mu_ridge_flagged = true;
      }
      Eigen::LDLT<Matrix> ldlt(A);
      if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        A.diagonal().array() += 1e-8;
        fit.mu_ridge_flagged = true;
        ldlt.compute(A);
      }
      mu_new = ldlt.solve(b);
    }

    // damp the step if the primal objective (at the current duals) increases
    double loss_tmp = 0.0;
    const double obj_cand = primal_objective(mu_new, &loss_tmp);
    if (obj_cand > obj_prev * (1.0 + 1e-12) && std::isfinite(obj_prev)) {
      mu_new = mu + 0.5 * (mu_new - mu);
    }
    const double obj_now = primal_objective(mu_new, &loss_tmp);
    if (opts.trace_objective) fit.objective_trace.push_back(obj_now);
    obj_prev = obj_now;

    dmu = (mu_new - mu).cwiseAbs().maxCoeff();
    mu = mu_new;
    const double stat = qp.xtilde_d().cwiseAbs().maxCoeff();
    kkt_ok = cert.converged;
#ifdef SQR_FIT_TRACE
    std::fprintf(stderr, "  outer %3d: stat=%.3e dmu=%.3e omega=%.2e sweeps=%d res=%.2e nse=%ld\n",
                 outer, stat, dmu, omega, cert.sweeps, cert.kkt_residual, (long)n_se);
#endif

    if (dmu <= opts.tol_mu * (1.0 + mu.cwiseAbs().maxCoeff()) && stat <= tol_stat && kkt_ok &&
        cert.kkt_residual <= qp_tol_final) {
      fit.converged = true;
      ++outer;
      break;
    }
    // grow the augmentation when the stationarity residual stalls, but only
    // while it is still above target (growth past that just stiffens the QP)
    if (stat > 0.7 * stat_prev && stat > 0.5 * tol_stat && outer > 0) {
      omega = std::min(omega * 4.0, 1e10);
      qp.set_omega(omega);
    }
    stat_prev = stat;
  }

  fit.iterations = outer;
  fit.mu = mu;
  fit.stationarity = qp.xtilde_d().cwiseAbs().maxCoeff();

  // representer coefficients: b_k = (1/lambda) sum_u d_u x_{i(u),k} e_{g(u)}
  fit.B = Matrix::Zero(p, m);
  for (Index u = 0; u < N; ++u)
    fit.B.col(loc[std::size_t(u)]) +=
        qp.d()(u) / lambda * data.X.row(subj[std::size_t(u)]).transpose();

  const Matrix V = G * qp.dsigma() / lambda;
  fit.check_loss_sum = 0.0;
  fit.se.clear();
  if (data.rectangular) {
    fit.D.resize(n, m);
    fit.fitted.resize(n, m);
    for (Index u = 0; u < N; ++u) fit.D(subj[std::size_t(u)], loc[std::size_t(u)]) = qp.d()(u);
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j) {
        fit.fitted(i, j) = data.X.row(i).dot(mu) + V(i, j);
        fit.check_loss_sum += check_loss(data.Y(i, j) - fit.fitted(i, j), tau);
      }
  } else {
    fit.obs_d = qp.d();
    fit.obs_fitted.resize(N);
    fit.obs_resid.resize(N);
    for (Index u = 0; u < N; ++u) {
      fit.obs_fitted(u) = data.X.row(subj[std::size_t(u)]).dot(mu) +
                          V(subj[std::size_t(u)], loc[std::size_t(u)]);
      fit.obs_resid(u) = yv(u) - fit.obs_fitted(u);
      fit.check_loss_sum += check_loss(fit.obs_resid(u), tau);
    }
  }
  for (Index u = 0; u < N; ++u) {
    const double dv = qp.d()(u);
    if (dv > lo + margin && dv < hi - margin)
      fit.se.emplace_back(subj[std::size_t(u)], loc[std::size_t(u)]);
  }

  double pen = 0.0;
  for (Index k = 0; k < p; ++k) pen += fit.B.row(k) * Sigma * fit.B.row(k).transpose();
  fit.objective = fit.check_loss_sum + 0.5 * lambda * pen;
  return fit;
}

// beta_k(s) = mu_k + b_k^T k_s for each requested location (rows of `locations`)
inline Matrix coefficients(const QuantileFit& fit, const Matrix& locations) {
  require(locations.cols() == fit.grid.dim(), "coefficients: location dimension mismatch");
  Matrix out(fit.mu.size(), locations.rows());
  for (Index l = 0; l < locations.rows(); ++l) {
    const Vector ks = kvec(fit.kernel, fit.grid, locations.row(l));
    out.col(l) = fit.mu + fit.B * ks;
  }
  return out;
}

inline double predict(const QuantileFit& fit, const Vector& x, const Eigen::RowVectorXd& s) {
  require(x.size() == fit.mu.size(), "predict: covariate dimension mismatch");
  const Vector ks = kvec(fit.kernel, fit.grid, s);
  return x.dot(fit.mu + fit.B * ks);
}

inline double predict(const QuantileFit& fit, const Vector& x, double s) {
  Eigen::RowVectorXd p(1);
  p << s;
  return predict(fit, x, p);
}

// effective dimensionality: the number of interpolated observations
inline Index divergence(const QuantileFit& fit) { return Index(fit.se.size()); }

// check-loss sum divided by (N - df); degenerate when df >= N
inline double gacv(const QuantileFit& fit, const Dataset& data) {
  const Index N = data.n_obs();
  const Index df = divergence(fit);
  if (df >= N) throw numerical_error("gacv: degenerate model (df >= number of observations)");
  return fit.check_loss_sum / double(N - df);
}

struct LambdaSelection {
  double best_lambda = 0.0;
  Index best_index = 0;
  std::vector<double> lambdas, gacvs, objectives;
  std::vector<Index> dfs;
  QuantileFit best_fit;
};

// Refits over the grid (warm-started, ascending lambda); returns the GACV
// argmin with ties broken toward the larger lambda.
inline LambdaSelection select_lambda(const Dataset& data, double tau, const KernelSpec& kernel,
                                     std::vector<double> lambda_grid,
                                     const FitOptions& base_opts = {}) {
  require(!lambda_grid.empty(), "select_lambda: empty grid");
  std::sort(lambda_grid.begin(), lambda_grid.end());
  LambdaSelection sel;
  Matrix warm_D;
  Vector warm_mu;
  bool have_warm = false;
  bool any_ok = false;
  double best = std::numeric_limits<double>::infinity();
  for (double lam : lambda_grid) {
    FitOptions opts = base_opts;
    if (have_warm && data.rectangular) {
      opts.warm_D = &warm_D;
      opts.warm_mu = &warm_mu;
    }
    QuantileFit fit = fit_quantile(data, tau, lam, kernel, opts);
    if (data.rectangular) {
      warm_D = fit.D;
      warm_mu = fit.mu;
      have_warm = true;
    }
    double g = std::numeric_limits<double>::quiet_NaN();
    try {
      g = gacv(fit, data);
      any_ok = true;
    } catch (const numerical_error&) {
      // degenerate at this lambda; recorded as NaN in the table
    }
    sel.lambdas.push_back(lam);
    sel.gacvs.push_back(g);
    sel.objectives.push_back(fit.objective);
    sel.dfs.push_back(divergence(fit));
    if (std::isfinite(g) && g <= best) {
      best = g;
      sel.best_lambda = lam;
      sel.best_index = Index(sel.lambdas.size()) - 1;
      sel.best_fit = std::move(fit);
    }
  }
  if (!any_ok) throw numerical_error("select_lambda: all fits degenerate");
  return sel;
}

// Family of fits over a tau grid; profiles are monotonized by rearrangement
// (sorting across tau) whenever they are evaluated.
struct QuantileSurface {
  std::vector<double> taus;
  std::vector<QuantileFit> fits;
  bool monotonized = true;

  Index size() const { return Index(taus.size()); }

  // per-tau predictions at (x, s), sorted across tau when monotonized
  Vector profile(const Vector& x, const Eigen::RowVectorXd& s) const {
    const Vector ks = kvec(fits.front().kernel, fits.front().grid, s);
    Vector q(size());
    for (Index t = 0; t < size(); ++t) q(t) = x.dot(fits[std::size_t(t)].mu + fits[std::size_t(t)].B * ks);
    if (monotonized) std::sort(q.data(), q.data() + q.size());
    return q;
  }

  // m x T table of per-tau predictions at every grid point for one x,
  // each row sorted when monotonized
  Matrix profile_table(const Vector& x) const {
    const Grid& grid = fits.front().grid;
    KernelSpec k0 = fits.front().kernel;
    k0.jitter = 0.0;
    const Matrix Sigma = gram(k0, grid);
    Matrix Q(grid.size(), size());
    for (Index t = 0; t < size(); ++t) {
      const auto& f = fits[std::size_t(t)];
      Q.col(t) = Vector::Constant(grid.size(), x.dot(f.mu)) + Sigma * (f.B.transpose() * x);
    }
    if (monotonized) {
      std::vector<double> row(std::size_t(size()), 0.0);
      for (Index j = 0; j < Q.rows(); ++j) {
        for (Index t = 0; t < size(); ++t) row[std::size_t(t)] = Q(j, t);
        std::sort(row.begin(), row.end());
        for (Index t = 0; t < size(); ++t) Q(j, t) = row[std::size_t(t)];
      }
    }
    return Q;
  }
};

struct LambdaPolicy {
  enum class Mode { fixed, gacv_shared, gacv_per_tau };
  Mode mode = Mode::fixed;
  double lambda = 1.0;
  std::vector<double> grid;
  double selection_tau = 0.5;  // tau at which the shared-lambda GACV runs
};

inline QuantileSurface fit_surface(const Dataset& data, const std::vector<double>& tau_grid,
                                   const KernelSpec& kernel, const LambdaPolicy& policy,
                                   const FitOptions& base_opts = {}) {
  require(!tau_grid.empty(), "surface: empty tau grid");
  for (std::size_t t = 1; t < tau_grid.size(); ++t)
    require(tau_grid[t] > tau_grid[t - 1], "surface: tau grid must be strictly increasing");
  require(tau_grid.front() > 0 && tau_grid.back() < 1, "surface: tau grid must lie in (0,1)");

  double shared_lambda = policy.lambda;
  if (policy.mode == LambdaPolicy::Mode::gacv_shared) {
    require(!policy.grid.empty(), "surface: gacv_shared needs a lambda grid");
    shared_lambda =
        select_lambda(data, policy.selection_tau, kernel, policy.grid, base_opts).best_lambda;
  }

  QuantileSurface surf;
  surf.taus = tau_grid;
  surf.fits.reserve(tau_grid.size());
  Matrix warm_D;
  Vector warm_mu;
  bool have_warm = false;
  for (std::size_t t = 0; t < tau_grid.size(); ++t) {
    const double tau = tau_grid[t];
    double lam = shared_lambda;
    if (policy.mode == LambdaPolicy::Mode::gacv_per_tau) {
      require(!policy.grid.empty(), "surface: gacv_per_tau needs a lambda grid");
      lam = select_lambda(data, tau, kernel, policy.grid, base_opts).best_lambda;
    }
    FitOptions opts = base_opts;
    if (have_warm && data.rectangular) {
      opts.warm_D = &warm_D;
      opts.warm_mu = &warm_mu;
    }
    try {
      surf.fits.push_back(fit_quantile(data, tau, lam, kernel, opts));
    } catch (const std::exception& e) {
      throw numerical_error("surface: fit at tau index " + std::to_string(t) + " failed: " +
                            e.what());
    }
    if (data.rectangular) {
      warm_D = surf.fits.back().D;
      warm_mu = surf.fits.back().mu;
      have_warm = true;
    }
  }
  surf.monotonized = true;
  return surf;
}

inline std::vector<double> default_tau_grid() {
  std::vector<double> taus;
  for (int t = 1; t <= 99; ++t) taus.push_back(t / 100.0);
  return taus;
}

}  // namespace sqr
