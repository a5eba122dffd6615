#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "cmaflow/errors.hpp"
#include "cmaflow/field.hpp"
#include "cmaflow/grid.hpp"

namespace cmaf {

/// Relative tolerance for nodewise positive-semidefiniteness: an eigenvalue
/// lambda passes when lambda >= -kPsdTol * max(1, largest |eigenvalue|).
/// Newton iterates legitimately graze the cone boundary, so checks are
/// tolerance-based rather than exact.
inline constexpr double kPsdTol = 1e-9;

/// Complex-Hessian stencil evaluator over a raw value array. The entries are
///   H_ij = (1/4)(phi_{x_i x_j} + phi_{y_i y_j}) + (i/4)(phi_{x_i y_j} - phi_{y_i x_j})
/// with all real second derivatives taken as centered periodic differences:
/// second-order accurate, and exact against the stencil's own Fourier symbol.
struct HessianStencil {
  const TorusGrid& g;
  const double* phi;
  double inv_h2;

  HessianStencil(const TorusGrid& grid, const double* values)
      : g(grid), phi(values), inv_h2(1.0 / (grid.h * grid.h)) {}

  /// Centered second difference along a single axis.
  double second(std::int64_t idx, const std::array<int, 4>& c, int a) const {
    return (phi[g.up(idx, a, c[a])] - 2.0 * phi[idx] + phi[g.down(idx, a, c[a])]) * inv_h2;
  }

  /// Centered cross difference along two distinct axes.
  double cross(std::int64_t idx, const std::array<int, 4>& c, int a, int b) const {
    const std::int64_t pa = g.up(idx, a, c[a]);
    const std::int64_t ma = g.down(idx, a, c[a]);
    // Shifting along axis a leaves the coordinate along axis b unchanged.
    return (phi[g.up(pa, b, c[b])] - phi[g.down(pa, b, c[b])] - phi[g.up(ma, b, c[b])] +
            phi[g.down(ma, b, c[b])]) *
           (0.25 * inv_h2);
  }

  HermValue at(std::int64_t idx, const std::array<int, 4>& c) const {
    HermValue m;
    m.a = 0.25 * (second(idx, c, 0) + second(idx, c, 1));
    if (g.n == 2) {
      m.b = 0.25 * (second(idx, c, 2) + second(idx, c, 3));
      m.re12 = 0.25 * (cross(idx, c, 0, 2) + cross(idx, c, 1, 3));
      m.im12 = 0.25 * (cross(idx, c, 0, 3) - cross(idx, c, 1, 2));
    }
    return m;
  }
};

/// Complex Hessian of a potential as a Hermitian field. If the potential has
/// a pole mask the result is masked on the stencil halo (every node whose
/// stencil reads a pole node), where the finite-difference values read the
/// sentinel and are meaningless.
inline HermitianField complex_hessian(const ScalarField& phi) {
  HermitianField H(phi.grid);
  HessianStencil st(*phi.grid, phi.v.data());
  for_each_node(*phi.grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    herm_set(H, idx, st.at(idx, c));
  });
  if (phi.has_mask()) H.mask = stencil_halo(*phi.grid, phi.mask);
  return H;
}

/// Trace of the complex Hessian against the identity metric, i.e. one quarter
/// of the full real Laplacian. Masked like complex_hessian.
inline ScalarField flat_laplacian(const ScalarField& phi) {
  ScalarField out(phi.grid);
  HessianStencil st(*phi.grid, phi.v.data());
  for_each_node(*phi.grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    double t = 0.0;
    for (int a = 0; a < phi.grid->axes; ++a) t += st.second(idx, c, a);
    out.v[idx] = 0.25 * t;
  });
  if (phi.has_mask()) out.mask = stencil_halo(*phi.grid, phi.mask);
  return out;
}

/// Result of a nodewise positive-semidefiniteness scan.
struct AdmissibilityReport {
  bool ok = true;
  double worst_eig = 0.0;    ///< smallest eigenvalue over scanned nodes
  double scale = 1.0;        ///< max(1, largest |eigenvalue|), the relative scale
  std::int64_t worst_node = -1;
};

/// Scans min eigenvalues of omega + Hess(phi) over analysis nodes.
/// Passes when worst_eig >= -tol * scale.
inline AdmissibilityReport check_admissible(const HermitianField& omega, const ScalarField& phi,
                                            double tol = kPsdTol) {
  AdmissibilityReport rep;
  const auto halo = phi.has_mask() ? stencil_halo(*phi.grid, phi.mask) : std::vector<std::uint8_t>{};
  const auto excl = mask_union(halo, omega.mask);
  HessianStencil st(*phi.grid, phi.v.data());
  const int n = phi.grid->n;
  rep.worst_eig = std::numeric_limits<double>::infinity();
  for_each_node(*phi.grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    if (detail::excluded(excl, idx)) return;
    const HermValue m = herm_at(omega, idx).plus(n, st.at(idx, c));
    const double lo = m.min_eig(n), hi = m.max_eig(n);
    rep.scale = std::max(rep.scale, std::max(std::abs(lo), std::abs(hi)));
    if (lo < rep.worst_eig) {
      rep.worst_eig = lo;
      rep.worst_node = idx;
    }
  });
  if (!std::isfinite(rep.worst_eig)) rep.worst_eig = 0.0;  // everything masked
  rep.ok = rep.worst_eig >= -tol * rep.scale;
  return rep;
}

/// Nodewise density of (omega + dd^c phi)^n against dV. The normalization is
/// anchored so that the identity metric with phi == 0 and unit dV gives
/// density == 1 exactly. Inadmissible input raises an admissibility error
/// naming the worst node; `tol` loosens the cone test as in check_admissible.
inline ScalarField ma_density(const HermitianField& omega, const ScalarField& phi,
                              const ScalarField& dV, double tol = kPsdTol) {
  const auto adm = check_admissible(omega, phi, tol);
  if (!adm.ok) {
    throw AdmissibilityError("inadmissible potential: min eigenvalue " +
                             std::to_string(adm.worst_eig) + " at node " +
                             std::to_string(adm.worst_node));
  }
  ScalarField out(phi.grid);
  HessianStencil st(*phi.grid, phi.v.data());
  const int n = phi.grid->n;
  for_each_node(*phi.grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    out.v[idx] = herm_at(omega, idx).plus(n, st.at(idx, c)).det(n) / dV.v[idx];
  });
  const auto halo = phi.has_mask() ? stencil_halo(*phi.grid, phi.mask) : std::vector<std::uint8_t>{};
  out.mask = mask_union(halo, omega.mask);
  if (!out.mask.empty())
    for (std::int64_t i = 0; i < out.size(); ++i)
      if (out.mask[i]) out.v[i] = 0.0;
  return out;
}

/// Nodewise tr(g^{-1} eta). Requires omega positive definite at every
/// analysis node; a singular node raises a domain error.
inline ScalarField trace_with_respect_to(const HermitianField& omega, const HermitianField& eta) {
  ScalarField out(omega.grid);
  const int n = omega.grid->n;
  const auto excl = mask_union(omega.mask, eta.mask);
  for (std::int64_t i = 0; i < omega.grid->count; ++i) {
    if (detail::excluded(excl, i)) {
      out.v[i] = 0.0;
      continue;
    }
    const HermValue g = herm_at(omega, i);
    if (g.min_eig(n) <= 0.0)
      throw DomainError("trace_with_respect_to: base form singular at node " + std::to_string(i));
    out.v[i] = g.tr_inv_times(n, herm_at(eta, i));
  }
  out.mask = excl;
  return out;
}

/// Margin report for the convex-combination determinant inequality
///   det(d*(g1+H1) + (1-d)*(g2+H2)) >= exp(d*f1 + (1-d)*f2) * mu
/// given the two preconditions det(g_i + H_i) >= exp(f_i) * mu.
struct MixedInequalityReport {
  bool precondition_ok = false;
  double pre_margin1 = 0.0;  ///< min of det_1 - e^{f1} mu
  double pre_margin2 = 0.0;  ///< min of det_2 - e^{f2} mu
  double margin = 0.0;       ///< min of LHS - RHS over analysis nodes
  std::int64_t argmin = -1;
};

inline MixedInequalityReport check_mixed_inequality(
    const HermitianField& omega1, const ScalarField& u1, const ScalarField& f1,
    const HermitianField& omega2, const ScalarField& u2, const ScalarField& f2,
    const ScalarField& mu, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw DomainError("mixing weight must lie in (0,1)");
  MixedInequalityReport rep;
  const auto& g = *u1.grid;
  const int n = g.n;
  HessianStencil st1(g, u1.v.data()), st2(g, u2.v.data());
  auto excl = mask_union(mask_union(analysis_mask(u1), analysis_mask(u2)),
                         mask_union(omega1.mask, omega2.mask));
  double pre1 = std::numeric_limits<double>::infinity();
  double pre2 = std::numeric_limits<double>::infinity();
  double margin = std::numeric_limits<double>::infinity();
  std::int64_t argmin = -1;
  for_each_node(g, [&](std::int64_t idx, const std::array<int, 4>& c) {
    if (detail::excluded(excl, idx)) return;
    const HermValue A = herm_at(omega1, idx).plus(n, st1.at(idx, c));
    const HermValue B = herm_at(omega2, idx).plus(n, st2.at(idx, c));
    pre1 = std::min(pre1, A.det(n) - std::exp(f1.v[idx]) * mu.v[idx]);
    pre2 = std::min(pre2, B.det(n) - std::exp(f2.v[idx]) * mu.v[idx]);
    const HermValue M = A.scaled(delta).plus(n, B.scaled(1.0 - delta));
    const double rhs = std::exp(delta * f1.v[idx] + (1.0 - delta) * f2.v[idx]) * mu.v[idx];
    const double m = M.det(n) - rhs;
    if (m < margin) {
      margin = m;
      argmin = idx;
    }
  });
  rep.pre_margin1 = pre1;
  rep.pre_margin2 = pre2;
  rep.precondition_ok = pre1 >= -1e-8 && pre2 >= -1e-8;
  rep.margin = margin;
  rep.argmin = argmin;
  return rep;
}

}  // namespace cmaf
