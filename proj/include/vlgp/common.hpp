#ifndef VLGP_COMMON_HPP
#define VLGP_COMMON_HPP

#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Cholesky>

namespace vlgp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Bad input: shapes, ranges, malformed files or configs.
class ValidationError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

/// The numerics broke down: non-finite updates, indefinite kernels,
/// singular solves that cannot occur for well-formed state.
class NumericalError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ValidationError(what);
}

/// LDLT succeeded, is PSD and its pivots span less than `ratio` orders.
inline bool ldlt_usable(const Eigen::LDLT<Matrix>& f, double ratio = 1e-12) {
  if (f.info() != Eigen::Success || !f.isPositive()) return false;
  const Vector d = f.vectorD();
  const double hi = d.cwiseAbs().maxCoeff();
  return hi > 0 && d.minCoeff() > ratio * hi && f.rcond() > ratio;
}

/// Version string of the build ("0.1.0-<git describe>").
const char* version_string();

}  // namespace vlgp

#endif  // VLGP_COMMON_HPP
