#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace cmaf {

/// Outcome of an iterative linear solve.
struct LinearStats {
  bool converged = false;
  int iterations = 0;
  double residual = 0.0;  ///< final |A x - b|_2 / |b|_2
};

namespace detail {

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const std::vector<double>& a) { return std::sqrt(dot(a, a)); }

}  // namespace detail

/// Right-preconditioned BiCGStab for a matrix-free real linear operator.
///
/// `apply(x, y)` writes y = A x; `precond(r, z)` writes z ~= M^{-1} r (it may
/// be the identity copy). Solves A x = b to relative 2-norm tolerance
/// `rel_tol`, starting from the provided x (commonly zero). Deterministic and
/// sequential: a fixed input always produces the same iterate sequence.
template <class ApplyOp, class Precond>
LinearStats bicgstab(const ApplyOp& apply, const Precond& precond, const std::vector<double>& b,
                     std::vector<double>& x, double rel_tol, int max_iter) {
  const std::size_t m = b.size();
  x.resize(m, 0.0);
  std::vector<double> r(m), rhat(m), p(m, 0.0), v(m, 0.0), phat(m), s(m), shat(m), t(m);

  apply(x, r);
  for (std::size_t i = 0; i < m; ++i) r[i] = b[i] - r[i];
  rhat = r;

  const double bnorm = std::max(detail::norm2(b), 1e-300);
  double rho = 1.0, alpha = 1.0, omega = 1.0;

  LinearStats st;
  st.residual = detail::norm2(r) / bnorm;
  if (st.residual <= rel_tol) {
    st.converged = true;
    return st;
  }

  for (int it = 1; it <= max_iter; ++it) {
    st.iterations = it;
    const double rho_new = detail::dot(rhat, r);
    if (std::abs(rho_new) < 1e-300) break;  // breakdown
    if (it == 1) {
      p = r;
    } else {
      const double beta = (rho_new / rho) * (alpha / omega);
      for (std::size_t i = 0; i < m; ++i) p[i] = r[i] + beta * (p[i] - omega * v[i]);
    }
    rho = rho_new;

    precond(p, phat);
    apply(phat, v);
    const double rv = detail::dot(rhat, v);
    if (std::abs(rv) < 1e-300) break;  // breakdown
    alpha = rho / rv;

    for (std::size_t i = 0; i < m; ++i) s[i] = r[i] - alpha * v[i];
    if (detail::norm2(s) / bnorm <= rel_tol) {
      for (std::size_t i = 0; i < m; ++i) x[i] += alpha * phat[i];
      st.residual = detail::norm2(s) / bnorm;
      st.converged = true;
      return st;
    }

    precond(s, shat);
    apply(shat, t);
    const double tt = detail::dot(t, t);
    if (tt < 1e-300) break;  // breakdown
    omega = detail::dot(t, s) / tt;

    for (std::size_t i = 0; i < m; ++i) x[i] += alpha * phat[i] + omega * shat[i];
    for (std::size_t i = 0; i < m; ++i) r[i] = s[i] - omega * t[i];

    st.residual = detail::norm2(r) / bnorm;
    if (st.residual <= rel_tol) {
      st.converged = true;
      return st;
    }
    if (std::abs(omega) < 1e-300) break;  // breakdown
  }
  return st;
}

}  // namespace cmaf
