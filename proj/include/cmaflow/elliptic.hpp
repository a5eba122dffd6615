#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "cmaflow/errors.hpp"
#include "cmaflow/fft.hpp"
#include "cmaflow/field.hpp"
#include "cmaflow/geometry.hpp"
#include "cmaflow/grid.hpp"
#include "cmaflow/hessian.hpp"
#include "cmaflow/linear.hpp"

namespace cmaf {

/// Controls for the damped-Newton Monge-Ampere solvers.
struct NewtonOptions {
  double tol = 1e-11;        ///< target sup-norm of the log-residual
  int max_iter = 80;
  double lin_rel_tol = 1e-8; ///< inner Krylov relative tolerance
  int lin_max_iter = 600;
  double min_step = 1e-10;   ///< backtracking floor
};

/// Outcome of a Newton Monge-Ampere solve. `phi` is the raw iterate
/// (normalization is applied by the calling wrapper), `c` the gauge constant
/// when one was solved for, `residual` the final sup-norm log-residual.
struct NewtonOutcome {
  ScalarField phi;
  double c = 0.0;
  bool converged = false;
  int iterations = 0;
  double residual = std::numeric_limits<double>::infinity();
  std::vector<double> history;   ///< sup-norm residual per accepted iterate
  int linear_iterations = 0;     ///< total inner Krylov iterations
};

/// Optional zero-order term z(x, r) subtracted from the log-determinant:
/// the solved equation is  log det(g + Hess phi) - L - z(x, phi) - c = 0.
/// `eval(idx, r, value, slope)` must fill z and dz/dr. The implicit time
/// step uses z = (r - phi_prev)/dt + F(t, x, r); elliptic solves have none.
using ZeroOrderTerm = std::function<void(std::int64_t, double, double&, double&)>;

namespace detail {

/// Mean over all nodes (no mask: Newton operates on lifted/clipped data).
inline double vec_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double vec_sup_abs(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s = std::max(s, std::abs(x));
  return s;
}

}  // namespace detail

/// Damped Newton iteration for the nodewise equation
///   log det(g_omega + Hess phi) = L + z(x, phi) + c,
/// where c is a free constant when `mean_gauge` is set (solved by mean
/// deflation, keeping iterates mean-zero) and fixed to 0 otherwise. The
/// linearization  delta -> tr(gtilde^{-1} Hess delta) - (dz/dr) delta  is
/// solved matrix-free by BiCGStab with a flat-metric spectral preconditioner.
/// Never throws for convergence failure: inspect `converged`.
inline NewtonOutcome newton_monge_ampere(const HermitianField& omega, const ScalarField& log_rhs,
                                         const ZeroOrderTerm& zero_order, bool mean_gauge,
                                         const ScalarField& phi_init, SpectralSolver& fft,
                                         const NewtonOptions& opt = {}) {
  const auto grid = omega.grid;
  const std::int64_t cnt = grid->count;
  const int n = grid->n;

  NewtonOutcome out;
  out.phi = phi_init;
  std::vector<double>& phi = out.phi.v;
  if (mean_gauge) {
    const double m = detail::vec_mean(phi);
    for (auto& x : phi) x -= m;
  }

  std::vector<HermValue> gt(cnt);      // current metric g + Hess phi
  std::vector<double> slope(cnt, 0.0); // dz/dr at the current iterate
  std::vector<double> res(cnt);        // log-residual
  std::vector<double> rhs(cnt), delta(cnt), Hd_buf;

  // Assembles metric, residual and slope for a candidate potential.
  // Returns false when the candidate leaves the positivity cone.
  const auto assemble = [&](const std::vector<double>& p, std::vector<HermValue>& g,
                            std::vector<double>& r, std::vector<double>& sl, double& c_out,
                            bool want_c) -> bool {
    HessianStencil st(*grid, p.data());
    bool ok = true;
    for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
      if (!ok) return;
      const HermValue m = herm_at(omega, idx).plus(n, st.at(idx, c));
      if (m.min_eig(n) <= 0.0) {
        ok = false;
        return;
      }
      g[idx] = m;
      double z = 0.0, s = 0.0;
      if (zero_order) zero_order(idx, p[idx], z, s);
      sl[idx] = s;
      r[idx] = std::log(m.det(n)) - log_rhs.v[idx] - z;
    });
    if (!ok) return false;
    c_out = want_c ? detail::vec_mean(r) : 0.0;
    if (want_c)
      for (auto& x : r) x -= c_out;
    return true;
  };

  if (!assemble(phi, gt, res, slope, out.c, mean_gauge)) return out;  // initial point inadmissible

  double res_sup = detail::vec_sup_abs(res);
  out.history.push_back(res_sup);

  std::vector<double> trial(cnt);
  std::vector<HermValue> gt_try(cnt);
  std::vector<double> res_try(cnt), slope_try(cnt);

  for (int it = 1; it <= opt.max_iter; ++it) {
    if (res_sup <= opt.tol) {
      out.converged = true;
      break;
    }
    out.iterations = it;

    // Flat-preconditioner coefficient: mean of tr(gtilde^{-1})/n, and the
    // mean zero-order slope as the shift.
    double coef = 0.0, sigma_bar = 0.0;
    for (std::int64_t i = 0; i < cnt; ++i) {
      coef += gt[i].tr_inv_times(n, HermValue{1.0, n == 2 ? 1.0 : 0.0, 0.0, 0.0});
      sigma_bar += slope[i];
    }
    coef /= static_cast<double>(cnt) * n;
    sigma_bar /= static_cast<double>(cnt);
    if (mean_gauge) sigma_bar = 0.0;

    const auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
      HessianStencil st(*grid, x.data());
      for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
        y[idx] = gt[idx].tr_inv_times(n, st.at(idx, c)) - slope[idx] * x[idx];
      });
      if (mean_gauge) {
        const double m = detail::vec_mean(y);
        for (auto& v : y) v -= m;
      }
    };
    const auto precond = [&](const std::vector<double>& r, std::vector<double>& z) {
      fft.solve_shifted_laplacian(coef, sigma_bar, r, z);
      if (mean_gauge) {
        const double m = detail::vec_mean(z);
        for (auto& v : z) v -= m;
      }
    };

    for (std::int64_t i = 0; i < cnt; ++i) rhs[i] = -res[i];
    std::fill(delta.begin(), delta.end(), 0.0);
    const LinearStats ls = bicgstab(apply, precond, rhs, delta, opt.lin_rel_tol, opt.lin_max_iter);
    out.linear_iterations += ls.iterations;

    // Damped update: backtrack until the iterate stays in the cone and the
    // residual decreases.
    double tau = 1.0;
    bool accepted = false;
    while (tau >= opt.min_step) {
      for (std::int64_t i = 0; i < cnt; ++i) trial[i] = phi[i] + tau * delta[i];
      if (mean_gauge) {
        const double m = detail::vec_mean(trial);
        for (auto& x : trial) x -= m;
      }
      double c_try = 0.0;
      if (assemble(trial, gt_try, res_try, slope_try, c_try, mean_gauge)) {
        const double rs = detail::vec_sup_abs(res_try);
        if (rs <= res_sup * (1.0 - 1e-4 * tau) || rs <= opt.tol) {
          phi.swap(trial);
          gt.swap(gt_try);
          res.swap(res_try);
          slope.swap(slope_try);
          out.c = c_try;
          res_sup = rs;
          accepted = true;
          break;
        }
      }
      tau *= 0.5;
    }
    out.history.push_back(res_sup);
    if (!accepted) break;  // stagnation: report the best iterate reached
  }
  out.residual = res_sup;
  if (res_sup <= opt.tol) out.converged = true;
  return out;
}

/// Solution of the static equation (omega + dd^c phi)^n = e^c f dV.
struct EllipticSolution {
  ScalarField phi;   ///< sup-normalized: max over analysis nodes == 0
  double c = 0.0;
  double residual = 0.0;  ///< max nodewise relative residual of the density
  int iterations = 0;
  bool converged = false;
  std::vector<double> history;
  double clip_floor = 0.0;  ///< density floor actually applied (0 = none)
};

namespace detail {

/// Spectral warm start: phi with flat Laplacian matching the first-order
/// density mismatch, damped into the positivity cone.
inline ScalarField monge_ampere_warm_start(const HermitianField& omega, const ScalarField& target_det,
                                           SpectralSolver& fft) {
  const auto grid = omega.grid;
  const int n = grid->n;
  std::vector<double> rhs(grid->count), psi(grid->count, 0.0);
  double det_mass = 0.0, tgt_mass = 0.0;
  for (std::int64_t i = 0; i < grid->count; ++i) {
    det_mass += herm_at(omega, i).det(n);
    tgt_mass += target_det.v[i];
  }
  const double scale = det_mass / std::max(tgt_mass, 1e-300);
  for (std::int64_t i = 0; i < grid->count; ++i)
    rhs[i] = scale * target_det.v[i] - herm_at(omega, i).det(n);
  fft.solve_shifted_laplacian(1.0, 0.0, rhs, psi);  // (1/4 Laplacian) psi = rhs, mean-zero
  ScalarField out(grid);
  out.v = std::move(psi);
  for (int tries = 0; tries < 60; ++tries) {
    if (check_admissible(omega, out).worst_eig > 0.0) return out;
    for (auto& x : out.v) x *= 0.5;
  }
  std::fill(out.v.begin(), out.v.end(), 0.0);
  return out;
}

}  // namespace detail

/// Solves (omega + dd^c phi)^n = e^c f dV by damped Newton on the
/// log-determinant form, with the free constant c handled by mean deflation
/// (total masses match at convergence) and the output sup-normalized.
/// Densities with zeros are floored at `density_floor` (recorded in the
/// result) so the log form stays finite; the floor is far below any
/// discretization scale. Throws a solver error on non-convergence.
inline EllipticSolution solve_elliptic(const HermitianField& omega, const ScalarField& f,
                                       const ScalarField& dV, double tol = 1e-11,
                                       SpectralSolver* fft_in = nullptr,
                                       const ScalarField* warm = nullptr,
                                       double density_floor = 1e-13) {
  const auto grid = omega.grid;
  std::unique_ptr<SpectralSolver> own;
  SpectralSolver* fft = fft_in;
  if (!fft) {
    own = std::make_unique<SpectralSolver>(grid);
    fft = own.get();
  }

  EllipticSolution sol;
  ScalarField log_rhs(grid), target_det(grid);
  bool clipped = false;
  for (std::int64_t i = 0; i < grid->count; ++i) {
    if (!(f.v[i] >= 0.0))
      throw DomainError("density must be nonnegative (node " + std::to_string(i) + ")");
    if (!(dV.v[i] > 0.0))
      throw DomainError("volume density must be positive (node " + std::to_string(i) + ")");
    double fv = f.v[i];
    if (fv < density_floor) {
      fv = density_floor;
      clipped = true;
    }
    log_rhs.v[i] = std::log(fv) + std::log(dV.v[i]);
    target_det.v[i] = fv * dV.v[i];
  }
  sol.clip_floor = clipped ? density_floor : 0.0;

  NewtonOptions opt;
  opt.tol = std::max(tol * 0.1, 1e-13);  // log residual ~ relative residual for small values
  ScalarField init =
      warm ? *warm : detail::monge_ampere_warm_start(omega, target_det, *fft);
  NewtonOutcome nw =
      newton_monge_ampere(omega, log_rhs, ZeroOrderTerm{}, /*mean_gauge=*/true, init, *fft, opt);

  sol.iterations = nw.iterations;
  sol.history = std::move(nw.history);
  sol.converged = nw.converged;
  sol.c = nw.c;
  sol.phi = std::move(nw.phi);
  // Relative residual of the density form.
  double rr = 0.0;
  {
    HessianStencil st(*grid, sol.phi.v.data());
    const int n = grid->n;
    for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
      const double det = herm_at(omega, idx).plus(n, st.at(idx, c)).det(n);
      rr = std::max(rr, std::abs(det / (std::exp(sol.c) * target_det.v[idx]) - 1.0));
    });
  }
  sol.residual = rr;
  if (!sol.converged || rr > tol) {
    std::string hist;
    const std::size_t k0 = sol.history.size() > 6 ? sol.history.size() - 6 : 0;
    for (std::size_t k = k0; k < sol.history.size(); ++k)
      hist += (hist.empty() ? "" : ", ") + std::to_string(sol.history[k]);
    throw SolverError("static Monge-Ampere solve did not reach tolerance " + std::to_string(tol) +
                      " (relative residual " + std::to_string(rr) + ", last residuals: " + hist +
                      ")");
  }
  const double s = field_sup(sol.phi);
  for (auto& x : sol.phi.v) x -= s;
  return sol;
}

/// Largest grid field v <= u with omega + dd^c v positive semidefinite
/// nodewise: the discrete psh envelope. Projected Gauss-Seidel on the
/// complementarity system, using the exact spectral shift of the center-node
/// stencil weight (lowering v at a node by d raises every eigenvalue of its
/// Hessian by d/h^2). Starts at the obstacle and converges monotonically in
/// the sweep limit; throws a solver error on stagnation with the remaining
/// constraint violations.
inline ScalarField psh_envelope(const HermitianField& omega, const ScalarField& u,
                                double tol = 1e-10, int max_sweeps = 200000) {
  const auto grid = u.grid;
  const int n = grid->n;
  const double h2 = grid->h * grid->h;
  ScalarField v = u;
  HessianStencil st(*grid, v.v.data());

  double change = std::numeric_limits<double>::infinity();
  int sweep = 0;
  for (; sweep < max_sweeps && change > tol; ++sweep) {
    change = 0.0;
    for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
      const double lam = herm_at(omega, idx).plus(n, st.at(idx, c)).min_eig(n);
      const double cand = std::min(u.v[idx], v.v[idx] + h2 * lam);
      change = std::max(change, std::abs(cand - v.v[idx]));
      v.v[idx] = cand;
    });
  }
  if (change > tol) {
    double worst_eig = 0.0;
    for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
      worst_eig = std::min(worst_eig, herm_at(omega, idx).plus(n, st.at(idx, c)).min_eig(n));
    });
    throw SolverError("envelope iteration stagnated after " + std::to_string(sweep) +
                      " sweeps: last update " + std::to_string(change) +
                      ", worst Hessian eigenvalue " + std::to_string(worst_eig));
  }
  return v;
}

/// Result of the eigenvalue-maximizing auxiliary problem: the potential psi
/// and the achieved uniform lower bound on eigenvalues of theta + dd^c psi.
struct EigenMaxResult {
  ScalarField psi;
  double achieved = 0.0;  ///< min over nodes of min eigenvalue at the best iterate
};

/// Finds a potential psi (approximately) maximizing the minimal nodewise
/// eigenvalue of theta + dd^c psi. For n = 1 the optimum is exact in one
/// spectral solve: the Laplacian can equalize the scalar coefficient to its
/// mean and no competitor exceeds it (the Hessian integrates to zero). For
/// n = 2 a damped equalization iteration on the min-eigenvalue field is run
/// and the best iterate returned.
inline EigenMaxResult maximize_min_eigenvalue(const HermitianField& theta,
                                              SpectralSolver& fft, int max_iter = 80) {
  const auto grid = theta.grid;
  const int n = grid->n;
  const std::int64_t cnt = grid->count;
  EigenMaxResult res;
  res.psi = ScalarField(grid);

  const auto min_eig_field = [&](const ScalarField& psi, std::vector<double>& e) {
    HessianStencil st(*grid, psi.v.data());
    for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
      e[idx] = herm_at(theta, idx).plus(n, st.at(idx, c)).min_eig(n);
    });
  };

  std::vector<double> e(cnt), rhs(cnt), corr(cnt);
  if (n == 1) {
    double mean_a = 0.0;
    for (std::int64_t i = 0; i < cnt; ++i) mean_a += theta.a11[i];
    mean_a /= static_cast<double>(cnt);
    for (std::int64_t i = 0; i < cnt; ++i) rhs[i] = mean_a - theta.a11[i];
    fft.solve_shifted_laplacian(1.0, 0.0, rhs, res.psi.v);
    min_eig_field(res.psi, e);
    res.achieved = *std::min_element(e.begin(), e.end());
    return res;
  }

  ScalarField psi(grid), best(grid);
  min_eig_field(psi, e);
  double best_val = *std::min_element(e.begin(), e.end());
  best = psi;
  for (int it = 0; it < max_iter; ++it) {
    const double mean_e = detail::vec_mean(e);
    for (std::int64_t i = 0; i < cnt; ++i) rhs[i] = mean_e - e[i];
    fft.solve_shifted_laplacian(1.0, 0.0, rhs, corr);
    for (std::int64_t i = 0; i < cnt; ++i) psi.v[i] += 0.7 * corr[i];
    min_eig_field(psi, e);
    const double val = *std::min_element(e.begin(), e.end());
    if (val > best_val) {
      best_val = val;
      best = psi;
    }
  }
  res.psi = std::move(best);
  res.achieved = best_val;
  return res;
}

/// Interior/boundary verdict for the minimum principle on a node subset.
struct MinPrincipleReport {
  bool pre_admissible = false;   ///< theta + dd^c u >= eps0 * identity held on D
  double admissibility_margin = 0.0;  ///< min over D of min eig(theta + Hess u)
  bool pre_density = false;      ///< (theta+dd^c v)^n <= c (theta+dd^c u)^n held on D
  double density_margin = 0.0;   ///< min over D of c*det_u - det_v
  double interior_min = 0.0;     ///< min over D of v - u
  double boundary_min = 0.0;     ///< min over the stencil boundary of v - u
  bool pass = false;             ///< interior_min >= boundary_min - 1e-8
};

/// Nodes outside D whose stencil reach touches D (the discrete boundary).
inline std::vector<std::uint8_t> stencil_boundary(const TorusGrid& g,
                                                  const std::vector<std::uint8_t>& D) {
  const auto dil = stencil_halo(g, D);
  std::vector<std::uint8_t> b(dil.size(), 0);
  for (std::size_t i = 0; i < dil.size(); ++i) b[i] = dil[i] && !D[i];
  return b;
}

/// Checks the minimum principle: for u uniformly strictly admissible on D and
/// (theta+dd^c v)^n <= c (theta+dd^c u)^n on D with c in [0,1), the minimum
/// of v - u over the closed region is attained on the boundary.
inline MinPrincipleReport check_minimum_principle(const HermitianField& theta,
                                                  const ScalarField& u, const ScalarField& v,
                                                  const std::vector<std::uint8_t>& D, double c,
                                                  double eps0 = 1e-6) {
  if (!(c >= 0.0) || c >= 1.0)
    throw DomainError("minimum principle requires density factor c in [0,1), got " +
                      std::to_string(c));
  const auto grid = u.grid;
  const int n = grid->n;
  if (D.size() != static_cast<std::size_t>(grid->count))
    throw DomainError("region mask size does not match the grid");

  MinPrincipleReport rep;
  HessianStencil su(*grid, u.v.data()), sv(*grid, v.v.data());
  double adm = std::numeric_limits<double>::infinity();
  double dens = std::numeric_limits<double>::infinity();
  double imin = std::numeric_limits<double>::infinity();
  bool any = false;
  for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& cc) {
    if (!D[idx]) return;
    any = true;
    const HermValue gu = herm_at(theta, idx).plus(n, su.at(idx, cc));
    const HermValue gv = herm_at(theta, idx).plus(n, sv.at(idx, cc));
    adm = std::min(adm, gu.min_eig(n));
    dens = std::min(dens, c * gu.det(n) - gv.det(n));
    imin = std::min(imin, v.v[idx] - u.v[idx]);
  });
  if (!any) throw DomainError("region mask is empty");
  const auto bd = stencil_boundary(*grid, D);
  double bmin = std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < grid->count; ++i)
    if (bd[i]) bmin = std::min(bmin, v.v[i] - u.v[i]);

  rep.admissibility_margin = adm;
  rep.pre_admissible = adm >= eps0;
  rep.density_margin = dens;
  rep.pre_density = dens >= -1e-12 * std::max(1.0, std::abs(dens));
  rep.interior_min = imin;
  rep.boundary_min = bmin;
  rep.pass = rep.pre_admissible && rep.pre_density && imin >= bmin - 1e-8;
  return rep;
}

/// Newton solve of log det(theta + Hess v) = target on the nodes of D, with
/// v fixed to `fixed` outside D (discrete Dirichlet data). Used to build
/// minimum-principle test pairs. Jacobi-preconditioned BiCGStab on the
/// restricted unknowns.
inline ScalarField solve_dirichlet_logdet(const HermitianField& theta, const ScalarField& fixed,
                                          const std::vector<std::uint8_t>& D,
                                          const ScalarField& target_logdet, double tol = 1e-11,
                                          int max_iter = 60) {
  const auto grid = theta.grid;
  const int n = grid->n;
  std::vector<std::int64_t> nodes;
  for (std::int64_t i = 0; i < grid->count; ++i)
    if (D[i]) nodes.push_back(i);
  if (nodes.empty()) throw DomainError("region mask is empty");

  ScalarField v = fixed;
  const std::size_t m = nodes.size();
  std::vector<double> res(m), delta(m), rhs(m), full(grid->count, 0.0);
  const double h2 = grid->h * grid->h;

  const auto eval_res = [&](const ScalarField& w, std::vector<double>& r) -> bool {
    HessianStencil st(*grid, w.v.data());
    for (std::size_t k = 0; k < m; ++k) {
      const auto c = grid->coords(nodes[k]);
      const HermValue g = herm_at(theta, nodes[k]).plus(n, st.at(nodes[k], c));
      if (g.min_eig(n) <= 0.0) return false;
      r[k] = std::log(g.det(n)) - target_logdet.v[nodes[k]];
    }
    return true;
  };
  if (!eval_res(v, res))
    throw AdmissibilityError("Dirichlet data are not admissible on the region");

  for (int it = 0; it < max_iter; ++it) {
    double rs = 0.0;
    for (double r : res) rs = std::max(rs, std::abs(r));
    if (rs <= tol) return v;

    // Metric at the current iterate, restricted rows only.
    HessianStencil st(*grid, v.v.data());
    std::vector<HermValue> gt(m);
    std::vector<double> diag(m);
    for (std::size_t k = 0; k < m; ++k) {
      const auto c = grid->coords(nodes[k]);
      gt[k] = herm_at(theta, nodes[k]).plus(n, st.at(nodes[k], c));
      diag[k] = -gt[k].tr_inv_times(n, HermValue{1.0, n == 2 ? 1.0 : 0.0, 0.0, 0.0}) / h2;
    }
    const auto apply = [&](const std::vector<double>& x, std::vector<double>& y) {
      for (std::size_t k = 0; k < m; ++k) full[nodes[k]] = x[k];
      HessianStencil sd(*grid, full.data());
      for (std::size_t k = 0; k < m; ++k) {
        const auto c = grid->coords(nodes[k]);
        y[k] = gt[k].tr_inv_times(n, sd.at(nodes[k], c));
      }
    };
    const auto precond = [&](const std::vector<double>& r, std::vector<double>& z) {
      for (std::size_t k = 0; k < m; ++k) z[k] = r[k] / diag[k];
    };
    for (std::size_t k = 0; k < m; ++k) rhs[k] = -res[k];
    std::fill(delta.begin(), delta.end(), 0.0);
    bicgstab(apply, precond, rhs, delta, 1e-10, 2000);

    double tau = 1.0;
    bool accepted = false;
    ScalarField trial = v;
    std::vector<double> res_try(m);
    while (tau >= 1e-10) {
      for (std::size_t k = 0; k < m; ++k) trial.v[nodes[k]] = v.v[nodes[k]] + tau * delta[k];
      if (eval_res(trial, res_try)) {
        double rt = 0.0;
        for (double r : res_try) rt = std::max(rt, std::abs(r));
        if (rt <= rs * (1.0 - 1e-4 * tau) || rt <= tol) {
          v = trial;
          res = res_try;
          accepted = true;
          break;
        }
      }
      tau *= 0.5;
    }
    // Reset cleared scatter buffer for the next apply round.
    std::fill(full.begin(), full.end(), 0.0);
    if (!accepted)
      throw SolverError("Dirichlet log-determinant solve stagnated at residual " +
                        std::to_string(rs));
  }
  double rs = 0.0;
  for (double r : res) rs = std::max(rs, std::abs(r));
  throw SolverError("Dirichlet log-determinant solve exceeded iteration budget (residual " +
                    std::to_string(rs) + ")");
}

/// Measured quantities of the static-equation stability estimate
///   sup |phi1 - phi2|  <=  C (||phi1 - phi2||_1^alpha + ||f1 - f2||_p)^{1/n}.
struct EllipticStabilityRecord {
  double lhs = 0.0;       ///< sup norm of the potential difference
  double l1 = 0.0;        ///< L^1 norm of the potential difference
  double lp_diff = 0.0;   ///< L^p norm of the density difference
  double rhs = 0.0;       ///< bracket value (l1^alpha + lp_diff)^{1/n}
  double implied_C = 0.0; ///< lhs / rhs (0 when both vanish)
  double c1 = 0.0, c2 = 0.0;  ///< normalization constants of the two solves
  bool hypothesis_ok = false; ///< B^{-1} <= (int f^{1/n})^n <= (int f^p)^{1/p} <= B
  double mass_low = 0.0, mass_high = 0.0;  ///< the two mass functionals' range
};

/// Solves both equations and evaluates the stability bracket. `alpha` is the
/// interpolation exponent (the underlying theorem fixes it only as a function
/// of p and n, so it is an explicit input; the sweep verdict in the verifier
/// tests boundedness of the implied constant, not a specific exponent).
inline EllipticStabilityRecord check_elliptic_stability(const HermitianField& theta,
                                                        const ScalarField& f1,
                                                        const ScalarField& f2,
                                                        const ScalarField& dV, double p, double B,
                                                        double alpha = 0.5, double tol = 1e-10) {
  if (!(p > 1.0)) throw DomainError("stability check requires p > 1");
  const int n = theta.grid->n;
  EllipticStabilityRecord rec;

  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const ScalarField* f : {&f1, &f2}) {
    ScalarField root(f->grid), pow_p(f->grid);
    for (std::int64_t i = 0; i < f->grid->count; ++i) {
      root.v[i] = std::pow(f->v[i], 1.0 / n);
      pow_p.v[i] = std::pow(f->v[i], p);
    }
    const double m1 = std::pow(integrate(root), static_cast<double>(n));
    const double mp = std::pow(integrate(pow_p), 1.0 / p);
    lo = std::min(lo, m1);
    hi = std::max(hi, mp);
  }
  rec.mass_low = lo;
  rec.mass_high = hi;
  rec.hypothesis_ok = (lo >= 1.0 / B - 1e-12) && (hi <= B + 1e-12);

  SpectralSolver fft(theta.grid);
  const EllipticSolution s1 = solve_elliptic(theta, f1, dV, tol, &fft);
  const EllipticSolution s2 = solve_elliptic(theta, f2, dV, tol, &fft);
  rec.c1 = s1.c;
  rec.c2 = s2.c;

  ScalarField diff(theta.grid), fdiff(theta.grid);
  for (std::int64_t i = 0; i < theta.grid->count; ++i) {
    diff.v[i] = s1.phi.v[i] - s2.phi.v[i];
    fdiff.v[i] = f1.v[i] - f2.v[i];
  }
  rec.lhs = field_sup_abs(diff);
  rec.l1 = lp_norm(diff, 1.0);
  rec.lp_diff = lp_norm(fdiff, p);
  rec.rhs = std::pow(std::pow(rec.l1, alpha) + rec.lp_diff, 1.0 / n);
  rec.implied_C = rec.rhs > 0.0 ? rec.lhs / rec.rhs : 0.0;
  return rec;
}

}  // namespace cmaf
