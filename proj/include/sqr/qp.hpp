#pragma once

#include <algorithm>
#include <cmath>
#include <vector>
#include <cstdio>

#include "sqr/common.hpp"

namespace sqr {

// Kronecker-structured operator for the dual Hessian: returns (X X^T) D Sigma
// without forming the nm x nm matrix. Entry (i,j) equals
//   sum_{i',j'} d_{i'j'} (x_{i'}^T x_i) K(s_{j'}, s_j).
inline Matrix kron_matvec(const Matrix& Sigma, const Matrix& X, const Matrix& D) {
  require(D.rows() == X.rows() && D.cols() == Sigma.rows(), "kron_matvec: dimension mismatch");
  return X * (X.transpose() * D) * Sigma;
}

// Reduced dual of the penalized check-loss problem for a given intercept
// vector: maximize -(1/2 lambda) d^T Q d + d^T c over the box, with
// Q = Sigma (x) X^T X applied through kron_matvec.
struct DualProblem {
  Matrix sigma;   // m x m Gram, PSD
  Matrix X;       // n x p covariate rows
  Matrix c;       // n x m linear term (y - X~^T mu)
  double lo = -0.5, hi = 0.5;
  double lambda = 1.0;

  void validate() const {
    require(lo < 0 && 0 < hi, "dual: box must contain 0 in its interior");
    require(lambda > 0, "dual: lambda must be > 0");
    require(sigma.rows() == sigma.cols(), "dual: sigma must be square");
    require(c.rows() == X.rows() && c.cols() == sigma.rows(), "dual: c dimension mismatch");
  }
};

struct BoxQpOptions {
  double tol = -1.0;      // auto: 1e-7 * (1 + ||c||_inf)
  int max_sweeps = 10000;
  double omega = 0.0;     // weight of the optional (omega/2)||sum d_ij x_i||^2 penalty
};

struct BoxQpCertificate {
  double kkt_residual = 0.0;  // max projected-gradient residual over coordinates
  int sweeps = 0;
  bool converged = false;
};

namespace detail {

// Coordinate ascent over an observation list (subject index, grid index).
// A fixed design enumerates the full n x m lattice; a random design lists
// each subject's own locations against the union grid. The workspace
// (accumulated d*Sigma rows and the running sum_u d_u x_{i(u)}) persists
// across solves so that outer alternation steps warm-start cheaply.
class CoordinateBoxQp {
 public:
  CoordinateBoxQp(const Matrix& Sigma, const Matrix& X, std::vector<Index> subj,
                  std::vector<Index> loc, double lo, double hi, double lambda)
      : Sigma_(Sigma),
        X_(X),
        G_(X * X.transpose()),
        subj_(std::move(subj)),
        loc_(std::move(loc)),
        lo_(lo),
        hi_(hi),
        lambda_(lambda) {
    const Index N = Index(subj_.size());
    require(Index(loc_.size()) == N, "qp: subj/loc size mismatch");
    d_ = Vector::Zero(N);
    xsq_ = X_.rowwise().squaredNorm();
    refresh();
  }

  Vector& d() { return d_; }
  const Vector& d() const { return d_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }

  void set_box(double lo, double hi) { lo_ = lo; hi_ = hi; }
  void set_lambda(double lambda) { lambda_ = lambda; }
  void set_omega(double omega) { omega_ = omega; }
  double omega() const { return omega_; }

  // rebuild cached products from d (after external warm-start edits)
  void refresh() {
    const Index n = X_.rows(), M = Sigma_.rows();
    R_ = Matrix::Zero(n, M);
    t_ = Vector::Zero(X_.cols());
    for (std::size_t u = 0; u < subj_.size(); ++u) {
      if (d_(Index(u)) != 0.0) {
        R_.row(subj_[u]) += d_(Index(u)) * Sigma_.row(loc_[u]);
        t_ += d_(Index(u)) * X_.row(subj_[u]).transpose();
      }
    }
  }

  // sum_u d_u x_{i(u)}  (the equality-constraint residual of the full dual)
  const Vector& xtilde_d() const { return t_; }

  // accumulated D * Sigma rows; fitted kernel part is G * R / lambda
  const Matrix& dsigma() const { return R_; }
  const Matrix& gram_x() const { return G_; }

  BoxQpCertificate solve(const Vector& c, double tol, int max_sweeps) {
    require(Index(c.size()) == Index(subj_.size()), "qp: c size mismatch");
    if (tol < 0) tol = 1e-7 * (1.0 + c.cwiseAbs().maxCoeff());

    const std::size_t N = subj_.size();
    std::vector<std::uint8_t> in_set(N, 1);
    bool full_pass = true;
    BoxQpCertificate cert;
    int sweeps_since_refresh = 0;

    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
      double maxres = 0.0;
      for (std::size_t u = 0; u < N; ++u) {
        if (!full_pass && !in_set[u]) continue;
        const Index i = subj_[u], g = loc_[u];
        double grad = c(Index(u)) - G_.col(i).dot(R_.col(g)) / lambda_;
        if (omega_ > 0.0) grad -= omega_ * X_.row(i).dot(t_);

        const double dv = d_(Index(u));
        double pg = grad;
        if (dv <= lo_) pg = std::max(grad, 0.0);
        else if (dv >= hi_) pg = std::min(grad, 0.0);
        maxres = std::max(maxres, std::fabs(pg));

        if (full_pass) {
          // shrink: drop coordinates pinned at a bound with firmly outward gradient
          const bool keep = !((dv <= lo_ && grad < -tol) || (dv >= hi_ && grad > tol));
          in_set[u] = keep ? 1 : 0;
        }
        if (pg == 0.0) continue;

        const double hess = G_(i, i) * Sigma_(g, g) / lambda_ + omega_ * xsq_(i);
        const double dn = std::clamp(dv + grad / hess, lo_, hi_);
        const double delta = dn - dv;
        if (delta != 0.0) {
          d_(Index(u)) = dn;
          R_.row(i) += delta * Sigma_.row(g);
          if (omega_ > 0.0) t_ += delta * X_.row(i).transpose();
        }
      }
      ++cert.sweeps;
#ifdef SQR_QP_TRACE
      if (sweep % 25 == 0)
        std::fprintf(stderr, "    qp sweep=%d maxres=%.3e tol=%.1e full=%d\n", sweep, maxres,
                     tol, int(full_pass));
#endif
      if (++sweeps_since_refresh >= 256) {
        refresh();
        sweeps_since_refresh = 0;
      }
      if (maxres <= tol) {
        if (full_pass) {
          cert.converged = true;
          break;
        }
        full_pass = true;  // revalidate against the whole set
      } else {
        full_pass = false;
        // the free set is small (at most ~p per location); a Newton step on
        // it cuts through the slow tail of plain coordinate ascent
        if ((sweep & 3) == 3 && newton_polish(c)) full_pass = true;
      }
    }

    refresh();
    cert.kkt_residual = kkt_residual(c);
    cert.converged = cert.kkt_residual <= tol;
    return cert;
  }

  // One truncated-CG Newton step restricted to the free coordinates (interior
  // duals plus bound duals whose gradient points inward), clipped to the box
  // and accepted only if the exact quadratic gain is positive. H*v is applied
  // matrix-free through the Kronecker structure, so the free set is not
  // capped and the cost per CG iteration is two small gemms.
  bool newton_polish(const Vector& c) {
    const std::size_t N = subj_.size();
    const Index n = X_.rows(), M = Sigma_.rows();
    // gradients via one gemm; cheaper and vectorized vs per-coordinate dots
    const Matrix V = G_ * R_ / lambda_;
    std::vector<std::size_t> F;
    std::vector<double> gF;
    F.reserve(N / 8 + 16);
    gF.reserve(N / 8 + 16);
    for (std::size_t u = 0; u < N; ++u) {
      double grad = c(Index(u)) - V(subj_[u], loc_[u]);
      if (omega_ > 0.0) grad -= omega_ * X_.row(subj_[u]).dot(t_);
      const double dv = d_(Index(u));
      const bool free_coord = (dv > lo_ && dv < hi_) || (dv <= lo_ && grad > 0.0) ||
                              (dv >= hi_ && grad < 0.0);
      if (free_coord) {
        F.push_back(u);
        gF.push_back(grad);
      }
    }
    const Index f = Index(F.size());
    if (f == 0) return false;

    Matrix scratch = Matrix::Zero(n, M);
    auto apply_H = [&](const Vector& v) {
      scratch.setZero();
      for (Index a = 0; a < f; ++a) scratch(subj_[F[std::size_t(a)]], loc_[F[std::size_t(a)]]) += v(a);
      Vector xv = Vector::Zero(X_.cols());
      if (omega_ > 0.0)
        for (Index a = 0; a < f; ++a) xv += v(a) * X_.row(subj_[F[std::size_t(a)]]).transpose();
      const Matrix HV = G_ * (scratch * Sigma_) / lambda_;
      Vector out(f);
      for (Index a = 0; a < f; ++a) {
        out(a) = HV(subj_[F[std::size_t(a)]], loc_[F[std::size_t(a)]]);
        if (omega_ > 0.0) out(a) += omega_ * X_.row(subj_[F[std::size_t(a)]]).dot(xv);
      }
      return out;
    };

    const Vector gvec = Eigen::Map<const Vector>(gF.data(), f);
    // truncated CG: iterates stay in range(H), so null directions of the
    // (very) rank-deficient block never blow the step up
    Vector step = Vector::Zero(f);
    {
      Vector r = gvec, pdir = r;
      double rs = r.squaredNorm();
      const double rs0 = rs;
      for (int it = 0; it < 60 && rs > 1e-4 * rs0; ++it) {
        const Vector Hp = apply_H(pdir);
        const double curv = pdir.dot(Hp);
        if (curv <= 1e-14 * pdir.squaredNorm()) break;
        const double a = rs / curv;
        step += a * pdir;
        r -= a * Hp;
        const double rs_new = r.squaredNorm();
        pdir = r + (rs_new / rs) * pdir;
        rs = rs_new;
      }
      if (!step.allFinite() || step.isZero()) return false;
    }

    Vector delta(f);
    double scale = std::min(1.0, 4.0 * (hi_ - lo_) / step.cwiseAbs().maxCoeff());
    for (int trial = 0; trial < 30; ++trial, scale *= 0.5) {
      for (Index a = 0; a < f; ++a) {
        const double dv = d_(Index(F[std::size_t(a)]));
        delta(a) = std::clamp(dv + scale * step(a), lo_, hi_) - dv;
      }
      const double gain = gvec.dot(delta) - 0.5 * delta.dot(apply_H(delta));
#ifdef SQR_QP_TRACE
      std::fprintf(stderr, "    polish f=%ld scale=%.3e |g|=%.3e |step|=%.3e gain=%.6e\n",
                   (long)f, scale, gvec.norm(), step.norm(), gain);
#endif
      if (gain > 0.0) {
        for (Index a = 0; a < f; ++a) {
          const double dd = delta(a);
          if (dd == 0.0) continue;
          const std::size_t u = F[std::size_t(a)];
          d_(Index(u)) += dd;
          R_.row(subj_[u]) += dd * Sigma_.row(loc_[u]);
          if (omega_ > 0.0) t_ += dd * X_.row(subj_[u]).transpose();
        }
        return true;
      }
    }
    return false;
  }

  double kkt_residual(const Vector& c) const {
    double maxres = 0.0;
    for (std::size_t u = 0; u < subj_.size(); ++u) {
      const Index i = subj_[u], g = loc_[u];
      double grad = c(Index(u)) - G_.col(i).dot(R_.col(g)) / lambda_;
      if (omega_ > 0.0) grad -= omega_ * X_.row(i).dot(t_);
      const double dv = d_(Index(u));
      double pg = grad;
      if (dv <= lo_) pg = std::max(grad, 0.0);
      else if (dv >= hi_) pg = std::min(grad, 0.0);
      maxres = std::max(maxres, std::fabs(pg));
    }
    return maxres;
  }

 private:
  Vector xtilde_d_exact() const {
    Vector t = Vector::Zero(X_.cols());
    for (std::size_t u = 0; u < subj_.size(); ++u)
      t += d_(Index(u)) * X_.row(subj_[u]).transpose();
    return t;
  }

  const Matrix& Sigma_;
  const Matrix& X_;
  Matrix G_;
  std::vector<Index> subj_, loc_;
  double lo_, hi_, lambda_;
  double omega_ = 0.0;
  Vector d_, t_, xsq_;
  Matrix R_;
};

inline void lattice_obs(Index n, Index m, std::vector<Index>& subj, std::vector<Index>& loc) {
  subj.resize(std::size_t(n) * std::size_t(m));
  loc.resize(subj.size());
  std::size_t u = 0;
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j, ++u) {
      subj[u] = i;
      loc[u] = j;
    }
}

}  // namespace detail

struct BoxQpResult {
  Matrix D;
  BoxQpCertificate certificate;
};

// Box-constrained QP solve; warm (if given) must have the same shape as c.
inline BoxQpResult solve_box_qp(const DualProblem& prob, BoxQpOptions opts = {},
                                const Matrix* warm = nullptr) {
  prob.validate();
  const Index n = prob.c.rows(), m = prob.c.cols();
  std::vector<Index> subj, loc;
  detail::lattice_obs(n, m, subj, loc);
  detail::CoordinateBoxQp qp(prob.sigma, prob.X, std::move(subj), std::move(loc), prob.lo,
                             prob.hi, prob.lambda);
  qp.set_omega(opts.omega);
  Vector c(n * m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) c(i * m + j) = prob.c(i, j);
  if (warm) {
    require(warm->rows() == n && warm->cols() == m, "qp: warm start shape mismatch");
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < m; ++j)
        qp.d()(i * m + j) = std::clamp((*warm)(i, j), prob.lo, prob.hi);
    qp.refresh();
  }

  BoxQpResult out;
  out.certificate = qp.solve(c, opts.tol, opts.max_sweeps);
  out.D.resize(n, m);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < m; ++j) out.D(i, j) = qp.d()(i * m + j);
  return out;
}

// -(1/2 lambda) <D, (XX^T) D Sigma> + <D, C>
inline double dual_objective(const Matrix& Sigma, const Matrix& X, const Matrix& D,
                             const Matrix& C, double lambda) {
  return -0.5 / lambda * (D.array() * kron_matvec(Sigma, X, D).array()).sum() +
         (D.array() * C.array()).sum();
}

}  // namespace sqr
