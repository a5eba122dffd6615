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
#include "cmaflow/field.hpp"
#include "cmaflow/grid.hpp"
#include "cmaflow/hessian.hpp"

namespace cmaf {

/// Squared trigonometric distance to the divisor {x1 = y1 = 0}:
///   q(x) = sin^2(pi x1) + sin^2(pi y1),
/// a smooth periodic gauge vanishing exactly at the divisor nodes and
/// comparable to the squared Euclidean distance near them. Used both for
/// log-pole barrier potentials and power-law densities.
inline ScalarField divisor_gauge(const std::shared_ptr<const TorusGrid>& grid) {
  return make_field(grid, [&](const std::array<double, 4>& x) {
    const double sx = std::sin(M_PI * x[0]);
    const double sy = std::sin(M_PI * x[1]);
    return sx * sx + sy * sy;
  });
}

/// Static geometric data for one problem: the fixed positive reference form,
/// the (possibly degenerate) base form, the volume density, and a barrier
/// potential rho (pole-masked when it has log poles).
struct Geometry {
  std::shared_ptr<const TorusGrid> grid;
  HermitianField omega_X;  ///< fixed positive reference form; dominates theta nodewise
  HermitianField theta;    ///< semi-positive base form, may vanish on a divisor
  ScalarField dV;          ///< positive volume density, unit total mass by default
  ScalarField rho;         ///< barrier potential; masked at its poles if degenerate
  double kappa = 0.0;      ///< log-pole coefficient of rho (0 for smooth geometry)
  double delta = 1.0;      ///< nominal level of theta away from the divisor
};

/// Total mass of the top power of a Hermitian form: h^{2n} * sum of nodewise
/// determinants (masked nodes excluded).
inline double form_volume(const HermitianField& f) {
  const int n = f.grid->n;
  double s = 0.0;
  for (std::int64_t i = 0; i < f.grid->count; ++i) {
    if (detail::excluded(f.mask, i)) continue;
    s += herm_at(f, i).det(n);
  }
  return s * std::pow(f.grid->h, 2 * f.grid->n);
}

/// Largest eigenvalue of (a - b) over analysis nodes; negative means a < b
/// nodewise with margin.
inline double max_excess_eig(const HermitianField& a, const HermitianField& b) {
  const int n = a.grid->n;
  const auto excl = mask_union(a.mask, b.mask);
  double worst = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < a.grid->count; ++i) {
    if (detail::excluded(excl, i)) continue;
    worst = std::max(worst, herm_at(a, i).plus(n, herm_at(b, i).scaled(-1.0)).max_eig(n));
  }
  return worst;
}

/// Flat geometry: omega_X = identity, theta = scale * identity, dV = 1,
/// rho = 0. The everything-smooth reference configuration.
inline Geometry make_flat_geometry(const std::shared_ptr<const TorusGrid>& grid,
                                   double theta_scale = 1.0) {
  if (!(theta_scale > 0.0) || theta_scale > 1.0)
    throw ConfigError("flat geometry requires theta scale in (0, 1], got " +
                      std::to_string(theta_scale));
  Geometry g;
  g.grid = grid;
  g.omega_X = HermitianField::scaled_identity(grid, 1.0);
  g.theta = HermitianField::scaled_identity(grid, theta_scale);
  g.dV = make_field(grid, [](const std::array<double, 4>&) { return 1.0; });
  g.rho = ScalarField(grid);
  g.kappa = 0.0;
  g.delta = theta_scale;
  return g;
}

/// Degenerate geometry with a log-pole barrier.
///
/// rho = kappa * log q with q the divisor gauge; rho carries a pole mask at
/// the divisor nodes. The base form is diagonal,
///   theta = diag(t1(x), 1, ..., 1),
///   t1 = ramp(q) * min(1, delta + max(0, -(dd^c rho)_11) + pad),
/// so theta vanishes on the divisor (ramp -> 0), compensates the negative
/// part of dd^c rho away from it, and is capped by omega_X = identity. The
/// construction is verified: theta must be semi-positive, dominated by
/// omega_X, and theta + dd^c rho must be semi-positive on analysis nodes.
/// Parameters that break any of these (e.g. kappa large enough that the
/// compensator exceeds the cap) raise a geometry error rather than returning
/// a silently invalid bundle.
inline Geometry make_log_pole_geometry(const std::shared_ptr<const TorusGrid>& grid, double kappa,
                                       double delta, double pad = 0.02,
                                       double taper_cells = 2.0) {
  if (!(kappa > 0.0)) throw ConfigError("log-pole geometry requires kappa > 0");
  if (!(delta > 0.0)) throw ConfigError("log-pole geometry requires delta > 0");
  if (!(pad >= 0.0)) throw ConfigError("log-pole geometry requires pad >= 0");

  Geometry g;
  g.grid = grid;
  g.kappa = kappa;
  g.delta = delta;
  g.omega_X = HermitianField::scaled_identity(grid, 1.0);
  g.dV = make_field(grid, [](const std::array<double, 4>&) { return 1.0; });

  const ScalarField q = divisor_gauge(grid);
  g.rho = ScalarField(grid);
  g.rho.ensure_mask();
  for (std::int64_t i = 0; i < grid->count; ++i) {
    if (q.v[i] <= 0.0) {
      g.rho.v[i] = kPoleSentinel;
      g.rho.mask[i] = 1;
    } else {
      g.rho.v[i] = kappa * std::log(q.v[i]);
    }
  }

  // Compensator: negative part of the 11-entry of the discrete complex
  // Hessian of rho, zero where the stencil touches the pole (there the
  // discrete log is convex and needs no compensation).
  const HermitianField Hrho = complex_hessian(g.rho);
  const double sh = std::sin(M_PI * taper_cells * grid->h);
  const double q_taper = std::max(1e-300, sh * sh);
  g.theta = HermitianField(grid);
  for (std::int64_t i = 0; i < grid->count; ++i) {
    double comp = 0.0;
    if (!detail::excluded(Hrho.mask, i)) comp = std::max(0.0, -herm_at(Hrho, i).a);
    const double ramp = std::min(1.0, q.v[i] / q_taper);
    const double t1 = ramp * std::min(1.0, delta + comp + pad);
    g.theta.a11[i] = t1;
    if (grid->n == 2) {
      g.theta.a22[i] = 1.0;
      g.theta.re12[i] = 0.0;
      g.theta.im12[i] = 0.0;
    }
  }

  // Verification sweep: the bundle must actually satisfy its contract.
  double theta_min = std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < grid->count; ++i)
    theta_min = std::min(theta_min, herm_at(g.theta, i).min_eig(grid->n));
  if (theta_min < -kPsdTol)
    throw GeometryError("log-pole base form not semi-positive: min eigenvalue " +
                        std::to_string(theta_min));
  const double excess = max_excess_eig(g.theta, g.omega_X);
  if (excess > kPsdTol)
    throw GeometryError("log-pole base form exceeds the reference form by " +
                        std::to_string(excess));
  // The defining inequality of the bundle: theta + dd^c rho - delta * omega_X
  // must be semi-positive on every unmasked node.
  double worst_margin = std::numeric_limits<double>::infinity();
  std::int64_t worst_node = -1;
  for (std::int64_t i = 0; i < grid->count; ++i) {
    if (detail::excluded(Hrho.mask, i)) continue;
    HermValue m = herm_at(g.theta, i).plus(grid->n, herm_at(Hrho, i));
    m.a -= delta;
    if (grid->n == 2) m.b -= delta;
    const double e = m.min_eig(grid->n);
    if (e < worst_margin) {
      worst_margin = e;
      worst_node = i;
    }
  }
  if (worst_margin < -1e-10)
    throw GeometryError("barrier inequality fails: min eigenvalue of theta + dd^c rho - "
                        "delta * omega_X is " +
                        std::to_string(worst_margin) + " at node " + std::to_string(worst_node) +
                        " (delta too large for this kappa, or kappa too large for the cap)");
  return g;
}

/// Time-dependent family of Hermitian forms on [0, T]. `base` is a fixed
/// semi-positive minorant (omega_t - base is positive semidefinite for all
/// sampled t), A the declared time-regularity constant bounding omega-dot and
/// omega-ddot against omega_t, and `delta` the carried bigness constant of
/// the base form (metadata from the geometry bundle; 0 when unknown).
struct FormPath {
  double T = 1.0;
  double A = 0.0;
  double delta = 0.0;
  HermitianField base;
  std::function<HermitianField(double)> at;

  HermitianField sample(double t) const {
    if (!(t >= 0.0) || t > T * (1.0 + 1e-12))
      throw DomainError("form path sampled outside [0, T]: t = " + std::to_string(t));
    return at(std::min(t, T));
  }
};

/// Constant-in-time path (A = 0 exactly, base = the field itself).
inline FormPath make_constant_path(HermitianField theta, double T, double delta = 0.0) {
  if (!(T > 0.0)) throw ConfigError("form path horizon must be positive");
  FormPath p;
  p.T = T;
  p.A = 0.0;
  p.delta = delta;
  p.base = theta;
  p.at = [f = std::move(theta)](double) { return f; };
  return p;
}

namespace detail {

/// Largest |generalized eigenvalue| of pencil (D, G): max |lambda| with
/// det(D - lambda G) = 0, for G positive definite. Returns +infinity when G
/// is singular relative to D at the node.
inline double max_abs_gen_eig(const HermValue& D, const HermValue& G, int n) {
  const double gmin = G.min_eig(n);
  const double dnorm = D.frob(n);
  if (gmin <= 1e-14 * std::max(1.0, G.frob(n)))
    return dnorm <= 1e-14 ? 0.0 : std::numeric_limits<double>::infinity();
  if (n == 1) return std::abs(D.a) / G.a;
  const double tr = G.tr_inv_times(n, D);
  const double dt = D.det(n) / G.det(n);
  const double disc = std::max(0.0, tr * tr - 4.0 * dt);
  const double r = std::sqrt(disc);
  return std::max(std::abs(0.5 * (tr + r)), std::abs(0.5 * (tr - r)));
}

}  // namespace detail

/// Measures the smallest exponential Lipschitz constant consistent with the
/// sampled path: max over sample intervals and nodes of the generalized
/// eigenvalue of the finite-difference time derivative against the form at
/// BOTH interval endpoints (for affine-in-t families the pointwise ratio over
/// an interval peaks at an endpoint, so this is exact there and conservative
/// otherwise). Infinite when the form degenerates where it still moves.
inline double fit_path_lipschitz(const FormPath& path, int samples = 17) {
  if (samples < 2) throw DomainError("fit_path_lipschitz needs at least 2 samples");
  double A = 0.0;
  HermitianField prev = path.at(0.0);
  const int n = prev.grid->n;
  for (int k = 1; k < samples; ++k) {
    const double t = path.T * static_cast<double>(k) / (samples - 1);
    HermitianField cur = path.at(t);
    const double dt = path.T / (samples - 1);
    const auto excl = mask_union(prev.mask, cur.mask);
    for (std::int64_t i = 0; i < prev.grid->count; ++i) {
      if (detail::excluded(excl, i)) continue;
      const HermValue D =
          herm_at(cur, i).plus(n, herm_at(prev, i).scaled(-1.0)).scaled(1.0 / dt);
      A = std::max({A, detail::max_abs_gen_eig(D, herm_at(prev, i), n),
                    detail::max_abs_gen_eig(D, herm_at(cur, i), n)});
      if (!std::isfinite(A)) return A;
    }
    prev = std::move(cur);
  }
  return A;
}

/// Affine path theta_t = theta0 + t * chi. The Lipschitz constant is fitted
/// from samples; construction fails if the path leaves the semi-positive cone
/// or moves where it is degenerate (no finite constant exists there). The
/// fixed minorant is the scalar floor mu * identity with mu the smallest
/// endpoint eigenvalue (exact for affine families: quadratic forms in t are
/// affine, so extremes sit at the endpoints).
inline FormPath make_affine_path(const HermitianField& theta0, const HermitianField& chi,
                                 double T, int fit_samples = 17, double delta = 0.0) {
  if (!(T > 0.0)) throw ConfigError("form path horizon must be positive");
  if (!theta0.grid->same_layout(*chi.grid))
    throw GeometryError("affine path: base form and direction live on different grids");
  FormPath p;
  p.T = T;
  p.delta = delta;
  p.at = [theta0, chi](double t) {
    HermitianField out = theta0;
    const std::int64_t cnt = out.grid->count;
    for (std::int64_t i = 0; i < cnt; ++i) out.a11[i] += t * chi.a11[i];
    if (out.grid->n == 2) {
      for (std::int64_t i = 0; i < cnt; ++i) out.a22[i] += t * chi.a22[i];
      for (std::int64_t i = 0; i < cnt; ++i) out.re12[i] += t * chi.re12[i];
      for (std::int64_t i = 0; i < cnt; ++i) out.im12[i] += t * chi.im12[i];
    }
    out.mask = mask_union(theta0.mask, chi.mask);
    return out;
  };
  const int n = theta0.grid->n;
  for (int k = 0; k < fit_samples; ++k) {
    const double t = T * static_cast<double>(k) / (fit_samples - 1);
    const HermitianField th = p.at(t);
    double worst = std::numeric_limits<double>::infinity();
    double scale = 1.0;
    for (std::int64_t i = 0; i < th.grid->count; ++i) {
      if (detail::excluded(th.mask, i)) continue;
      const HermValue m = herm_at(th, i);
      worst = std::min(worst, m.min_eig(n));
      scale = std::max(scale, std::abs(m.max_eig(n)));
    }
    if (worst < -kPsdTol * scale)
      throw GeometryError("affine path leaves the semi-positive cone at t = " +
                          std::to_string(t) + " (min eigenvalue " + std::to_string(worst) + ")");
  }
  const double A = fit_path_lipschitz(p, fit_samples);
  if (!std::isfinite(A))
    throw GeometryError("affine path moves where it is degenerate: no finite "
                        "time-Lipschitz constant");
  p.A = A;
  // Scalar floor over the endpoints (masked nodes excluded).
  double mu = std::numeric_limits<double>::infinity();
  for (const double t : {0.0, T}) {
    const HermitianField th = p.at(t);
    for (std::int64_t i = 0; i < th.grid->count; ++i) {
      if (detail::excluded(th.mask, i)) continue;
      mu = std::min(mu, herm_at(th, i).min_eig(n));
    }
  }
  mu = std::max(0.0, mu);  // keep the minorant semi-positive
  p.base = HermitianField::scaled_identity(theta0.grid, mu);
  p.base.mask = mask_union(theta0.mask, chi.mask);
  return p;
}

/// Sampled regularity report for a form path.
struct PathCheck {
  bool semipositive_ok = true;   ///< every sample is semi-positive (to tolerance)
  bool base_ok = true;           ///< omega_t - base semi-positive at every sample
  bool lipschitz_ok = true;      ///< A omega_t +- omega_dot >= -1e-6 (centered diffs)
  bool accel_ok = true;          ///< A omega_t - omega_ddot >= -1e-6
  double worst_eig = 0.0;        ///< most negative sampled eigenvalue of omega_t
  double worst_base_margin = 0.0;   ///< most negative eigenvalue of omega_t - base
  double worst_dot_margin = 0.0;    ///< most negative eigenvalue of A omega_t +- omega_dot
  double worst_accel_margin = 0.0;  ///< most negative eigenvalue of A omega_t - omega_ddot
  double fitted_A = 0.0;         ///< measured minimal Lipschitz constant
};

/// Sweeps sampled times, checking semi-positivity, domination of the fixed
/// minorant, and the declared regularity constants against centered finite
/// differences with step 1e-4 * T. Derivative margins are required above
/// -1e-6; eigenvalue positivity uses `tol`.
inline PathCheck verify_form_path(const FormPath& path, int samples = 9, double tol = 1e-9) {
  PathCheck pc;
  pc.worst_eig = std::numeric_limits<double>::infinity();
  pc.worst_base_margin = std::numeric_limits<double>::infinity();
  pc.worst_dot_margin = std::numeric_limits<double>::infinity();
  pc.worst_accel_margin = std::numeric_limits<double>::infinity();
  const HermitianField th0 = path.at(0.0);
  const int n = th0.grid->n;
  const std::int64_t cnt = th0.grid->count;
  const bool have_base = !path.base.a11.empty();
  const double s = 1e-4 * path.T;

  for (int k = 0; k < samples; ++k) {
    // Clamp sample times so the centered stencil stays inside [0, T].
    double t = path.T * static_cast<double>(k) / (samples - 1);
    t = std::min(std::max(t, s), path.T - s);
    const HermitianField th = path.at(t);
    const HermitianField thp = path.at(t + s);
    const HermitianField thm = path.at(t - s);
    const auto excl = mask_union(th.mask, mask_union(thp.mask, thm.mask));
    for (std::int64_t i = 0; i < cnt; ++i) {
      if (detail::excluded(excl, i)) continue;
      const HermValue w = herm_at(th, i);
      pc.worst_eig = std::min(pc.worst_eig, w.min_eig(n));
      if (have_base) {
        const HermValue d = w.plus(n, herm_at(path.base, i).scaled(-1.0));
        pc.worst_base_margin = std::min(pc.worst_base_margin, d.min_eig(n));
      }
      const HermValue dot =
          herm_at(thp, i).plus(n, herm_at(thm, i).scaled(-1.0)).scaled(0.5 / s);
      const HermValue ddot = herm_at(thp, i)
                                 .plus(n, herm_at(thm, i))
                                 .plus(n, w.scaled(-2.0))
                                 .scaled(1.0 / (s * s));
      const HermValue Aw = w.scaled(path.A);
      pc.worst_dot_margin =
          std::min({pc.worst_dot_margin, Aw.plus(n, dot.scaled(-1.0)).min_eig(n),
                    Aw.plus(n, dot).min_eig(n)});
      pc.worst_accel_margin =
          std::min(pc.worst_accel_margin, Aw.plus(n, ddot.scaled(-1.0)).min_eig(n));
    }
  }
  if (!std::isfinite(pc.worst_eig)) pc.worst_eig = 0.0;
  if (!std::isfinite(pc.worst_base_margin)) pc.worst_base_margin = 0.0;
  if (!std::isfinite(pc.worst_dot_margin)) pc.worst_dot_margin = 0.0;
  if (!std::isfinite(pc.worst_accel_margin)) pc.worst_accel_margin = 0.0;
  pc.semipositive_ok = pc.worst_eig >= -tol;
  pc.base_ok = !have_base || pc.worst_base_margin >= -tol;
  pc.lipschitz_ok = pc.worst_dot_margin >= -1e-6;
  pc.accel_ok = pc.worst_accel_margin >= -1e-6;
  pc.fitted_A = fit_path_lipschitz(path, samples);
  return pc;
}

}  // namespace cmaf
