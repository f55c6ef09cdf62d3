#pragma once

#include <Eigen/Dense>
#include <stdexcept>
#include <string>

namespace sqr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Eigen::Index;

// Thrown for invalid specs, malformed inputs, and contract violations.
struct invalid_argument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Thrown when a numerical routine cannot produce a usable result
// (degenerate model, Cholesky failure after jitter escalation, ...).
struct numerical_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw invalid_argument(msg);
}

// Lower Cholesky factor with diagonal jitter escalation (x10 per retry).
inline Matrix safe_cholesky(Matrix A, double jitter0 = 1e-10, double jitter_max = 1e-6) {
  const double scale = std::max(A.diagonal().maxCoeff(), 1e-300);
  for (double j = 0.0; j <= jitter_max; j = (j == 0.0 ? jitter0 : j * 10.0)) {
    Matrix Aj = A;
    Aj.diagonal().array() += j * scale;
    Eigen::LLT<Matrix> llt(Aj);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    if (j >= jitter_max) break;
  }
  throw numerical_error("cholesky failed after jitter escalation");
}

}  // namespace sqr
