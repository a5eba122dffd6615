#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cmaflow/elliptic.hpp"
#include "cmaflow/errors.hpp"
#include "cmaflow/field.hpp"
#include "cmaflow/fft.hpp"
#include "cmaflow/flow.hpp"
#include "cmaflow/geometry.hpp"
#include "cmaflow/hessian.hpp"

namespace cmaf {

namespace detail {

/// Average of r^{2a} over the unit square [-1/2,1/2]^2 (a > -1), computed
/// in polar coordinates: 8/(2a+2) * integral_0^{pi/4} (2 cos t)^{-(2a+2)} dt.
inline double unit_cell_radial_average(double a) {
  if (!(a > -1.0)) throw DomainError("radial cell average needs exponent > -1");
  const int m = 512;  // Simpson panels; integrand is smooth on [0, pi/4]
  const double hi = M_PI / 4.0;
  const double w = hi / m;
  auto g = [a](double t) { return std::pow(2.0 * std::cos(t), -(2.0 * a + 2.0)); };
  double s = g(0.0) + g(hi);
  for (int k = 1; k < m; ++k) s += (k % 2 ? 4.0 : 2.0) * g(k * w);
  return (8.0 / (2.0 * a + 2.0)) * (s * w / 3.0);
}

}  // namespace detail

/// A model weak-flow problem: evolve the class line theta0 + t*chi with an
/// adapted density prod_i q_i^{a_i}, q_i = sin^2(pi x_i) + sin^2(pi y_i),
/// from a bounded (possibly rough) initial potential.
struct CRFProblem {
  std::shared_ptr<const TorusGrid> grid;
  HermitianField theta0;  ///< initial metric, positive definite nodewise
  HermitianField chi;     ///< class direction, possibly indefinite
  std::vector<double> a;  ///< per-factor density exponents, each > -1
  ScalarField phi0;       ///< bounded initial potential

  /// Structural validation: exponent range, metric positivity, shapes.
  void validate() const {
    if (!grid) throw ConfigError("problem has no grid");
    if (a.size() != static_cast<std::size_t>(grid->n))
      throw ConfigError("need one density exponent per complex factor");
    for (double ai : a)
      if (!(ai > -1.0))
        throw ConfigError("density exponent " + std::to_string(ai) +
                          " violates the integrability requirement a > -1");
    const AdmissibilityReport rep = check_admissible(theta0, ScalarField(grid), 0.0);
    if (!rep.ok)
      throw GeometryError("initial metric is not positive definite (worst eigenvalue " +
                          std::to_string(rep.worst_eig) + " at node " +
                          std::to_string(rep.worst_node) + ")");
  }
};

/// The discrete adapted density of a problem. Factor values at divisor nodes
/// (q_i = 0) use the exact cell average of the local quadratic model
/// (pi^2 r^2)^{a_i} over an h x h cell, so nodal values stay at the h^{2a}
/// scale the continuum mass dictates and the stored exponents are finite;
/// those nodes are mask-flagged for analysis exclusion. The Lp exponent is
/// chosen inside the integrability window when some a_i is negative.
inline DensitySpec make_adapted_density(const CRFProblem& prob) {
  const auto grid = prob.grid;
  const int n = grid->n;
  DensitySpec d;
  d.f = ScalarField(grid);
  d.psi_plus = ScalarField(grid);
  d.psi_minus = ScalarField(grid);
  d.decomposed = true;

  double worst_neg = 0.0;  // most negative exponent
  for (double ai : prob.a) worst_neg = std::min(worst_neg, ai);
  d.p = worst_neg < 0.0 ? 1.0 + 0.9 * (1.0 / -worst_neg - 1.0) : 2.0;
  if (!(d.p > 1.0)) d.p = 1.0 + 0.5 * (1.0 / -worst_neg - 1.0);

  std::vector<double> pole_value(n), pole_qeff(n);
  for (int i = 0; i < n; ++i) {
    const double ai = prob.a[i];
    if (ai == 0.0) {
      pole_value[i] = 1.0;
      pole_qeff[i] = 1.0;
      continue;
    }
    const double J = detail::unit_cell_radial_average(ai);
    pole_value[i] = std::pow(M_PI * M_PI * grid->h * grid->h, ai) * J;
    pole_qeff[i] = M_PI * M_PI * grid->h * grid->h * std::pow(J, 1.0 / ai);
  }

  bool any_mask = false;
  for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    double up = 0.0, dn = 0.0;
    bool pole = false;
    for (int i = 0; i < n; ++i) {
      const double ai = prob.a[i];
      if (ai == 0.0) continue;
      const double sx = std::sin(M_PI * grid->pos(c[2 * i]));
      const double sy = std::sin(M_PI * grid->pos(c[2 * i + 1]));
      double q = sx * sx + sy * sy;
      if (q <= 0.0) {
        q = pole_qeff[i];
        pole = true;
      }
      const double e = ai * std::log(q);
      (ai > 0.0 ? up : dn) += (ai > 0.0 ? e : -e);
    }
    d.psi_plus.v[idx] = up;
    d.psi_minus.v[idx] = dn;
    d.f.v[idx] = std::exp(up - dn);
    if (pole) {
      d.psi_plus.ensure_mask();
      d.psi_minus.ensure_mask();
      d.psi_plus.mask[idx] = 1;
      d.psi_minus.mask[idx] = 1;
      any_mask = true;
    }
  });
  (void)any_mask;
  d.validate();
  return d;
}

/// Largest t in [0, t_cap] for which the class line theta0 + t*chi still
/// admits a nodewise positive-definite potential shift, to relative
/// tolerance rel_tol. Feasibility at a probe time is decided by the
/// eigenvalue-maximizing envelope.
inline double estimate_tmax(const HermitianField& theta0, const HermitianField& chi,
                            double t_cap = 8.0, double rel_tol = 1e-3) {
  const auto grid = theta0.grid;
  const int n = grid->n;
  SpectralSolver fft(grid);

  const auto form_at = [&](double t) {
    HermitianField w(grid);
    for (std::int64_t i = 0; i < grid->count; ++i) {
      w.a11[i] = theta0.a11[i] + t * chi.a11[i];
      if (n == 2) {
        w.a22[i] = theta0.a22[i] + t * chi.a22[i];
        w.re12[i] = theta0.re12[i] + t * chi.re12[i];
        w.im12[i] = theta0.im12[i] + t * chi.im12[i];
      }
    }
    w.mask = mask_union(theta0.mask, chi.mask);
    return w;
  };
  const auto feasible = [&](double t) {
    const EigenMaxResult r = maximize_min_eigenvalue(form_at(t), fft);
    return r.achieved > 1e-12;
  };

  if (!feasible(0.0))
    throw GeometryError("class line is infeasible at t = 0: no potential shift makes the "
                        "initial form positive definite");
  if (feasible(t_cap)) return t_cap;

  double lo = 0.0, hi = t_cap;
  while (hi - lo > 0.5 * rel_tol * std::max(lo, 1e-8)) {
    const double mid = 0.5 * (lo + hi);
    (feasible(mid) ? lo : hi) = mid;
  }
  return lo;
}

/// A completed weak-flow run: the underlying trajectory plus the class-line
/// bookkeeping needed to reconstruct metric and curvature snapshots.
struct CRFTrajectory {
  FlowTrajectory flow;
  HermitianField theta0;
  HermitianField chi;      ///< effective class direction actually evolved
  bool gauged = false;     ///< true when chi absorbed a potential shift
  ScalarField gauge_rate;  ///< psi with omega_t = theta0 + t(chi + dd^c psi)

  std::size_t size() const { return flow.size(); }

  /// Evolving-metric snapshot omega_t + dd^c phi_t at stored index k.
  HermitianField metric_at(std::size_t k) const {
    const HermitianField w =
        flow.path_used.at(std::min(flow.times[k], flow.path_used.T));
    const HermitianField H = complex_hessian(flow.snapshots[k]);
    HermitianField out(flow.grid);
    const int n = flow.grid->n;
    for (std::int64_t i = 0; i < flow.grid->count; ++i)
      herm_set(out, i, herm_at(w, i).plus(n, herm_at(H, i)));
    out.mask = mask_union(w.mask, H.mask);
    return out;
  }

  /// Curvature-form snapshot -dd^c log det(metric) at stored index k;
  /// nodes where the determinant is not positive are mask-flagged.
  HermitianField ricci_at(std::size_t k) const {
    const HermitianField g = metric_at(k);
    const int n = flow.grid->n;
    ScalarField logdet(flow.grid);
    logdet.mask = g.mask;
    for (std::int64_t i = 0; i < flow.grid->count; ++i) {
      const double det = herm_at(g, i).det(n);
      if (det > 0.0) {
        logdet.v[i] = std::log(det);
      } else {
        logdet.ensure_mask();
        logdet.mask[i] = 1;
        logdet.v[i] = 0.0;
      }
    }
    HermitianField ric = complex_hessian(logdet);
    for (std::int64_t i = 0; i < flow.grid->count; ++i) {
      ric.a11[i] = -ric.a11[i];
      if (n == 2) {
        ric.a22[i] = -ric.a22[i];
        ric.re12[i] = -ric.re12[i];
        ric.im12[i] = -ric.im12[i];
      }
    }
    return ric;
  }
};

/// Runs the reduced scalar flow of a model problem up to time T (which must
/// sit below the feasibility horizon). The class line is evolved as an
/// affine form path; when the straight representative leaves the admissible
/// cone at some nodes while remaining feasible, the direction absorbs the
/// time-proportional potential shift of the eigenvalue-maximizing envelope
/// (recorded in the result). density_override, when given, replaces the
/// problem's adapted density (used by perturbation sweeps).
inline CRFTrajectory run_crf(const CRFProblem& prob, double T, FlowOptions opts = {},
                             const DensitySpec* density_override = nullptr) {
  prob.validate();
  if (!(T > 0.0)) throw DomainError("horizon must be positive");
  const double tmax = estimate_tmax(prob.theta0, prob.chi, std::max(8.0, 2.0 * T));
  if (!(T < tmax))
    throw DomainError("horizon " + std::to_string(T) +
                      " is not below the feasibility estimate " + std::to_string(tmax));

  const auto grid = prob.grid;
  const int n = grid->n;
  CRFTrajectory out;
  out.theta0 = prob.theta0;
  out.chi = prob.chi;

  FormPath path;
  try {
    path = make_affine_path(prob.theta0, prob.chi, T);
  } catch (const GeometryError&) {
    SpectralSolver fft(grid);
    HermitianField end(grid);
    for (std::int64_t i = 0; i < grid->count; ++i) {
      end.a11[i] = prob.theta0.a11[i] + T * prob.chi.a11[i];
      if (n == 2) {
        end.a22[i] = prob.theta0.a22[i] + T * prob.chi.a22[i];
        end.re12[i] = prob.theta0.re12[i] + T * prob.chi.re12[i];
        end.im12[i] = prob.theta0.im12[i] + T * prob.chi.im12[i];
      }
    }
    const EigenMaxResult shift = maximize_min_eigenvalue(end, fft);
    if (!(shift.achieved > 0.0))
      throw GeometryError("class line leaves the admissible cone before the horizon and no "
                          "potential shift restores it");
    out.gauged = true;
    out.gauge_rate = shift.psi;
    for (auto& x : out.gauge_rate.v) x /= T;
    const HermitianField Hg = complex_hessian(out.gauge_rate);
    HermitianField chi_eff = prob.chi;
    for (std::int64_t i = 0; i < grid->count; ++i) {
      chi_eff.a11[i] += Hg.a11[i];
      if (n == 2) {
        chi_eff.a22[i] += Hg.a22[i];
        chi_eff.re12[i] += Hg.re12[i];
        chi_eff.im12[i] += Hg.im12[i];
      }
    }
    chi_eff.mask = mask_union(prob.chi.mask, Hg.mask);
    out.chi = chi_eff;
    path = make_affine_path(prob.theta0, chi_eff, T);
  }

  const DensitySpec density =
      density_override != nullptr ? *density_override : make_adapted_density(prob);
  ScalarField dV(grid);
  for (auto& x : dV.v) x = 1.0;
  ForcingSpec forcing;  // the reduced equation carries no zero-order forcing

  out.flow = run_flow(prob.phi0, path, density, dV, forcing, T, opts);
  return out;
}

/// Interior regularity series: discrete C0/C1/C2 seminorms of the potential
/// over a node subset at every stored time at or after eps0.
struct SmoothingDiagnostic {
  std::vector<double> times;
  std::vector<double> c0;  ///< sup |phi|
  std::vector<double> c1;  ///< sup axiswise |forward difference| / h
  std::vector<double> c2;  ///< sup axiswise |second difference| / h^2
  bool finite = false;

  /// Value of the C2 series at the stored time nearest t.
  double c2_near(double t) const {
    if (times.empty()) throw DomainError("empty diagnostic");
    std::size_t best = 0;
    for (std::size_t k = 1; k < times.size(); ++k)
      if (std::abs(times[k] - t) < std::abs(times[best] - t)) best = k;
    return c2[best];
  }
};

inline SmoothingDiagnostic smoothing_diagnostic(const CRFTrajectory& crf, double eps0,
                                                const std::vector<std::uint8_t>& K) {
  const auto grid = crf.flow.grid;
  if (K.size() != static_cast<std::size_t>(grid->count))
    throw ConfigError("node subset size does not match the grid");
  SmoothingDiagnostic d;
  const double h = grid->h;
  for (std::size_t k = 0; k < crf.size(); ++k) {
    if (crf.flow.times[k] < eps0 - 1e-15) continue;
    const ScalarField& phi = crf.flow.snapshots[k];
    double s0 = 0.0, s1 = 0.0, s2 = 0.0;
    bool any = false;
    for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
      if (!K[idx]) return;
      if (detail::excluded(phi.mask, idx)) return;
      any = true;
      s0 = std::max(s0, std::abs(phi.v[idx]));
      for (int a = 0; a < grid->axes; ++a) {
        const double plus = phi.v[grid->up(idx, a, c[a])];
        const double minus = phi.v[grid->down(idx, a, c[a])];
        s1 = std::max(s1, std::abs(plus - phi.v[idx]) / h);
        s2 = std::max(s2, std::abs(plus - 2.0 * phi.v[idx] + minus) / (h * h));
      }
    });
    if (!any) throw ConfigError("node subset is empty after mask exclusion");
    d.times.push_back(crf.flow.times[k]);
    d.c0.push_back(s0);
    d.c1.push_back(s1);
    d.c2.push_back(s2);
  }
  if (d.times.empty()) throw DomainError("no stored times at or after the cutoff");
  d.finite = true;
  for (std::size_t k = 0; k < d.times.size(); ++k)
    if (!std::isfinite(d.c0[k]) || !std::isfinite(d.c1[k]) || !std::isfinite(d.c2[k]))
      d.finite = false;
  return d;
}

}  // namespace cmaf
