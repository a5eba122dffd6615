#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "cmaflow/elliptic.hpp"
#include "cmaflow/errors.hpp"
#include "cmaflow/field.hpp"
#include "cmaflow/flow.hpp"
#include "cmaflow/geometry.hpp"
#include "cmaflow/hessian.hpp"

namespace cmaf {

/// One verified estimate: the measured quantity, the bound it is tested
/// against, where that bound comes from, and the verdict.
struct EstimateRecord {
  std::string name;        ///< stable machine-readable check name
  std::string anchor;      ///< one-line description of the inequality tested
  double measured = 0.0;   ///< measured quantity (worst case over the run)
  double bound = 0.0;      ///< bound value at the worst case
  std::string bound_kind;  ///< "formula" (exact constants), "fitted", "tolerance"
  double margin = 0.0;     ///< bound - measured
  bool pass = false;
  std::string details;     ///< constants and context, semicolon-separated
};

/// Collection of estimate records for one run.
struct EstimateReport {
  std::vector<EstimateRecord> records;
  void add(EstimateRecord r) { records.push_back(std::move(r)); }
  bool all_pass() const {
    for (const auto& r : records)
      if (!r.pass) return false;
    return true;
  }
};

namespace detail {

inline std::string fmt(double x) {
  std::ostringstream os;
  os.precision(12);
  os << x;
  return os.str();
}

}  // namespace detail

/// The explicit constants of the sup-norm bound, assembled from two static
/// solves against the run's effective data:
///   lower barrier phi- : (theta_eff + dd^c phi-)^n = e^{c-} f dV, sup phi- = 0
///   upper barrier Phi  : (omega_eff + dd^c Phi)^n = e^{c+} f dV, inf Phi = 0
///   C  = sup |F(.,.,0)| + (lambda+1) sup(|phi-| + |Phi|) + max(-c-, c+)
///   C0(t) = sup|phi_0| e^{lambda t} + C (e^{lambda t} - 1)/lambda
/// (limit sup|phi_0| + C t when lambda = 0). theta_eff carries the run's
/// recorded identity lift; omega_eff is the reference form scaled up to
/// dominate the sampled path when necessary (the scale is reported).
struct BarrierConstants {
  double sup_phi0 = 0.0;
  double lambda = 0.0;
  double sup_F0 = 0.0;       ///< sup over stored times and nodes of |F(t,x,0)|
  double sup_barriers = 0.0; ///< sup of |phi-| + |Phi| nodewise
  double c_minus = 0.0;
  double c_plus = 0.0;
  double C = 0.0;
  double omega_scale = 1.0;  ///< factor applied to omega_X for domination
  ScalarField lower_barrier; ///< phi-, sup-normalized
  ScalarField upper_barrier; ///< Phi, inf-normalized

  double C0(double t) const {
    if (lambda == 0.0) return sup_phi0 + C * t;
    return sup_phi0 * std::exp(lambda * t) + C * (std::exp(lambda * t) - 1.0) / lambda;
  }
};

inline BarrierConstants compute_barrier_constants(const FlowTrajectory& traj,
                                                  const Geometry& geo, double tol = 1e-10) {
  if (traj.size() == 0) throw ConfigError("barrier constants need a nonempty trajectory");
  if (traj.density_used.v.empty())
    throw ConfigError("trajectory carries no effective density; barriers unavailable");
  const auto grid = traj.grid;
  const int n = grid->n;
  BarrierConstants bc;
  bc.lambda = traj.forcing_used.lambda;
  bc.sup_phi0 = field_sup_abs(traj.snapshots.front());

  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double t = traj.times[k];
    for (std::int64_t i = 0; i < grid->count; ++i)
      bc.sup_F0 = std::max(bc.sup_F0, std::abs(traj.forcing_used.eval(t, i, 0.0)));
  }

  // Static minorant of the evolving family: the path's recorded base form
  // (already carries any identity lift the run applied).
  const HermitianField& theta_eff = traj.path_used.base;
  if (theta_eff.a11.empty())
    throw ConfigError("trajectory path carries no base form; barriers unavailable");
  // Effective majorant: scale omega_X until it dominates the sampled path.
  double scale = 1.0;
  for (int k = 0; k <= 8; ++k) {
    const double t = traj.times.back() * k / 8.0;
    const HermitianField w = traj.path_used.at(std::min(t, traj.path_used.T));
    for (std::int64_t i = 0; i < grid->count; ++i) {
      if (detail::excluded(w.mask, i)) continue;
      // Smallest s with s * omega_X >= w at this node: max generalized eig.
      const double s = detail::max_abs_gen_eig(herm_at(w, i), herm_at(geo.omega_X, i), n);
      if (std::isfinite(s)) scale = std::max(scale, s);
    }
  }
  scale *= 1.0 + 1e-12;
  bc.omega_scale = scale;
  HermitianField omega_eff = geo.omega_X;
  for (std::int64_t i = 0; i < grid->count; ++i) {
    omega_eff.a11[i] *= scale;
    if (n == 2) {
      omega_eff.a22[i] *= scale;
      omega_eff.re12[i] *= scale;
      omega_eff.im12[i] *= scale;
    }
  }

  SpectralSolver fft(grid);
  const EllipticSolution lo = solve_elliptic(theta_eff, traj.density_used, traj.dV_used, tol, &fft);
  bc.lower_barrier = lo.phi;
  bc.c_minus = lo.c;
  const EllipticSolution hi = solve_elliptic(omega_eff, traj.density_used, traj.dV_used, tol, &fft);
  bc.upper_barrier = hi.phi;
  const double inf_hi = field_inf(bc.upper_barrier);
  for (auto& x : bc.upper_barrier.v) x -= inf_hi;  // inf-normalize
  bc.c_plus = hi.c;

  double sb = 0.0;
  for (std::int64_t i = 0; i < grid->count; ++i) {
    if (detail::excluded(bc.lower_barrier.mask, i)) continue;
    sb = std::max(sb, std::abs(bc.lower_barrier.v[i]) + std::abs(bc.upper_barrier.v[i]));
  }
  bc.sup_barriers = sb;
  bc.C = bc.sup_F0 + (bc.lambda + 1.0) * sb + std::max(-bc.c_minus, bc.c_plus);
  return bc;
}

/// Grid-scale slack for comparisons between two runs: a fixed floor plus the
/// measured per-step solver residuals.
inline double consistency_slack(const FlowTrajectory& traj) {
  double r = 0.0;
  for (double x : traj.step_residuals) r = std::max(r, x);
  return 1e-6 + 10.0 * r;
}

/// sup-norm bound: max |phi_t| <= C0(t) + slack at every stored time, with
/// C0 from the explicit barrier constants.
inline EstimateRecord check_uniform_bound(const FlowTrajectory& traj, const Geometry& geo,
                                          double slack = 1e-6) {
  const BarrierConstants bc = compute_barrier_constants(traj, geo);
  EstimateRecord rec;
  rec.name = "uniform-bound";
  rec.anchor = "sup-norm of the potential dominated by the barrier-constant profile C0(t)";
  rec.bound_kind = "formula";
  double worst_excess = -std::numeric_limits<double>::infinity();
  std::size_t worst_k = 0;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double sup_phi = field_sup_abs(traj.snapshots[k]);
    const double excess = sup_phi - bc.C0(traj.times[k]);
    if (excess > worst_excess) {
      worst_excess = excess;
      worst_k = k;
    }
  }
  rec.measured = field_sup_abs(traj.snapshots[worst_k]);
  rec.bound = bc.C0(traj.times[worst_k]) + slack;
  rec.margin = rec.bound - rec.measured;
  rec.pass = rec.margin >= 0.0;
  rec.details = "C=" + detail::fmt(bc.C) + "; lambda=" + detail::fmt(bc.lambda) +
                "; supF0=" + detail::fmt(bc.sup_F0) + "; sup_barriers=" +
                detail::fmt(bc.sup_barriers) + "; c-=" + detail::fmt(bc.c_minus) +
                "; c+=" + detail::fmt(bc.c_plus) + "; omega_scale=" +
                detail::fmt(bc.omega_scale) + "; worst_t=" + detail::fmt(traj.times[worst_k]);
  return rec;
}

/// Lower barrier with the log-time profile: at every stored t > 0 and
/// unmasked node,
///   phi_t >= (1 - alpha t) e^{-A t} phi_0 + alpha t rho
///            + n (t log(alpha t) - t) - C (e^{lambda t} - 1)/lambda.
/// Reports the worst margin under the formula constant and the fitted
/// minimal C making the bound hold.
struct BarrierCheck {
  EstimateRecord record;
  double fitted_C = 0.0;
};

inline BarrierCheck check_barrier(const FlowTrajectory& traj, const Geometry& geo, double alpha,
                                  double slack = 1e-6) {
  if (traj.size() < 2) throw DomainError("barrier check needs at least two stored times");
  if (!(alpha > 0.0) || !(alpha * traj.times.back() < 1.0))
    throw DomainError("barrier profile requires alpha > 0 with alpha * T < 1");
  const BarrierConstants bc = compute_barrier_constants(traj, geo);
  const auto grid = traj.grid;
  const int n = grid->n;
  const double A = traj.path_used.A;
  const double lam = bc.lambda;
  const ScalarField& phi0 = traj.snapshots.front();

  double worst_margin = std::numeric_limits<double>::infinity();
  // Minimal (signed) constant making the bound hold everywhere; negative
  // values measure slack and stay comparable across grid refinements.
  double fitted_C = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 1; k < traj.size(); ++k) {
    const double t = traj.times[k];
    const double growth = lam == 0.0 ? t : (std::exp(lam * t) - 1.0) / lam;
    const double log_profile = n * (t * std::log(alpha * t) - t);
    const auto& phi = traj.snapshots[k];
    for (std::int64_t i = 0; i < grid->count; ++i) {
      if (detail::excluded(geo.rho.mask, i)) continue;
      const double base = (1.0 - alpha * t) * std::exp(-A * t) * phi0.v[i] +
                          alpha * t * geo.rho.v[i] + log_profile;
      worst_margin = std::min(worst_margin, phi.v[i] - (base - bc.C * growth));
      fitted_C = std::max(fitted_C, (base - phi.v[i]) / growth);
    }
  }
  BarrierCheck out;
  out.fitted_C = fitted_C;
  out.record.name = "lower-barrier";
  out.record.anchor = "pointwise lower barrier with n(t log(alpha t) - t) profile";
  out.record.bound_kind = "formula";
  out.record.measured = -worst_margin;  // worst violation of the formula bound
  out.record.bound = slack;
  out.record.margin = out.record.bound - out.record.measured;
  out.record.pass = out.record.margin >= 0.0;
  out.record.details = "formula_C=" + detail::fmt(bc.C) + "; fitted_C=" + detail::fmt(fitted_C) +
                       "; alpha=" + detail::fmt(alpha) + "; A=" + detail::fmt(A) +
                       "; lambda=" + detail::fmt(lam);
  return out;
}

/// Fitted constants of the time-derivative bounds
///   phi_dot <= C_upper / t  and  phi_dot >= n log t - C_lower
/// over stored times at or after the startup index (default: the third
/// stored time, avoiding backward-difference startup error).
struct TimeDerivativeCheck {
  EstimateRecord record;
  double C_upper = 0.0;
  double C_lower = 0.0;
};

inline TimeDerivativeCheck check_time_derivative_bounds(const FlowTrajectory& traj,
                                                        std::size_t start_index = 3) {
  TimeDerivativeCheck out;
  if (traj.size() < start_index + 1)
    throw DomainError("trajectory too short for time-derivative fitting");
  const int n = traj.grid->n;
  for (std::size_t k = std::max<std::size_t>(start_index, 1); k < traj.size(); ++k) {
    const double t = traj.times[k];
    const ScalarField dot = traj.phi_dot(k);
    out.C_upper = std::max(out.C_upper, t * std::max(0.0, field_sup(dot)));
    out.C_lower = std::max(out.C_lower, n * std::log(t) - field_inf(dot));
  }
  out.record.name = "time-derivative-bounds";
  out.record.anchor = "velocity pinched between n log t - C and C / t";
  out.record.bound_kind = "fitted";
  out.record.measured = std::max(out.C_upper, out.C_lower);
  out.record.bound = std::numeric_limits<double>::infinity();
  out.record.margin = std::isfinite(out.record.measured) ? 1.0 : -1.0;
  out.record.pass = std::isfinite(out.C_upper) && std::isfinite(out.C_lower);
  out.record.details =
      "C_upper=" + detail::fmt(out.C_upper) + "; C_lower=" + detail::fmt(out.C_lower);
  return out;
}

/// Fitted constants of second-order time regularity: the semi-concavity
/// profile t^2 phi_ddot <= C, and the minimal shift C_shift making
///   t -> phi_t - n (t log t - t) + C_shift * t
/// nondecreasing nodewise across stored times.
struct SemiConcavityCheck {
  EstimateRecord record;
  double C_concavity = 0.0;
  double C_shift = 0.0;
};

inline SemiConcavityCheck check_semiconcavity(const FlowTrajectory& traj,
                                              std::size_t start_index = 3) {
  SemiConcavityCheck out;
  if (traj.size() < start_index + 2)
    throw DomainError("trajectory too short for semi-concavity fitting");
  const int n = traj.grid->n;
  for (std::size_t k = std::max<std::size_t>(start_index, 1); k + 1 < traj.size(); ++k) {
    const double t = traj.times[k];
    const ScalarField dd = traj.phi_ddot(k);
    out.C_concavity = std::max(out.C_concavity, t * t * std::max(0.0, field_sup(dd)));
  }
  const auto profile = [n](double t) { return t > 0.0 ? n * (t * std::log(t) - t) : 0.0; };
  for (std::size_t k = 0; k + 1 < traj.size(); ++k) {
    const double dt = traj.times[k + 1] - traj.times[k];
    const double dp = profile(traj.times[k + 1]) - profile(traj.times[k]);
    double drop = -std::numeric_limits<double>::infinity();
    for (std::int64_t i = 0; i < traj.grid->count; ++i)
      drop = std::max(drop, (traj.snapshots[k].v[i] - traj.snapshots[k + 1].v[i]));
    // g_{k+1} - g_k + C dt >= 0 with g = phi - profile.
    out.C_shift = std::max(out.C_shift, (drop + dp) / dt);
  }
  out.C_shift = std::max(0.0, out.C_shift);
  out.record.name = "semi-concavity";
  out.record.anchor = "t^2-weighted acceleration cap and adjusted-profile monotonicity";
  out.record.bound_kind = "fitted";
  out.record.measured = out.C_concavity;
  out.record.bound = std::numeric_limits<double>::infinity();
  out.record.margin = std::isfinite(out.C_concavity) ? 1.0 : -1.0;
  out.record.pass = std::isfinite(out.C_concavity) && std::isfinite(out.C_shift);
  out.record.details =
      "C_concavity=" + detail::fmt(out.C_concavity) + "; C_shift=" + detail::fmt(out.C_shift);
  return out;
}

/// Order preservation between two runs of the same problem:
///   max_t sup (phi_t - psi_t) <= sup (phi_0 - psi_0)_+ + slack.
inline EstimateRecord check_comparison(const FlowTrajectory& a, const FlowTrajectory& b) {
  if (!a.grid->same_layout(*b.grid)) throw ConfigError("comparison runs use different grids");
  if (a.times.size() != b.times.size())
    throw ConfigError("comparison runs use different schedules");
  for (std::size_t k = 0; k < a.times.size(); ++k)
    if (std::abs(a.times[k] - b.times[k]) > 1e-14)
      throw ConfigError("comparison runs use different schedules");
  if (!a.density_used.v.empty() && !b.density_used.v.empty()) {
    double df = 0.0;
    for (std::int64_t i = 0; i < a.grid->count; ++i)
      df = std::max(df, std::abs(a.density_used.v[i] - b.density_used.v[i]));
    if (df > 1e-12) throw ConfigError("comparison runs use different densities");
  }

  double initial_excess = 0.0;
  for (std::int64_t i = 0; i < a.grid->count; ++i)
    initial_excess =
        std::max(initial_excess, a.snapshots.front().v[i] - b.snapshots.front().v[i]);
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::int64_t i = 0; i < a.grid->count; ++i)
      worst = std::max(worst, a.snapshots[k].v[i] - b.snapshots[k].v[i]);
  }
  const double slack = std::max(consistency_slack(a), consistency_slack(b));
  EstimateRecord rec;
  rec.name = "comparison";
  rec.anchor = "ordered data stay ordered: sup(phi - psi) bounded by the initial excess";
  rec.bound_kind = "tolerance";
  rec.measured = worst;
  rec.bound = initial_excess + slack;
  rec.margin = rec.bound - rec.measured;
  rec.pass = rec.margin >= 0.0;
  rec.details = "initial_excess=" + detail::fmt(initial_excess) + "; slack=" + detail::fmt(slack);
  return rec;
}

/// Mass monotonicity against the measure mu:
///   integral of phi_t d(mu) <= integral of phi_0 d(mu) + C,
/// with C = max(0, T * mu(X) * (log M - log mu(X) - m)), m the sampled
/// infimum of the forcing over the run's value box and M the largest stored
/// Monge-Ampere mass.
inline EstimateRecord check_mass_monotonicity(const FlowTrajectory& traj,
                                              const ScalarField& mu) {
  const auto grid = traj.grid;
  const int n = grid->n;
  const double muX = integrate(mu);
  if (!(muX > 0.0)) throw DomainError("measure has nonpositive total mass");

  double R = 0.0;
  for (const auto& s : traj.snapshots) R = std::max(R, field_sup_abs(s));
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < traj.size(); ++k)
    for (std::int64_t i = 0; i < grid->count; ++i)
      for (const double r : {-R, 0.0, R})
        m = std::min(m, traj.forcing_used.eval(traj.times[k], i, r));
  if (!traj.forcing_used.F) m = 0.0;

  double M = 0.0;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const HermitianField w = traj.path_used.at(std::min(traj.times[k], traj.path_used.T));
    const HermitianField H = complex_hessian(traj.snapshots[k]);
    double mass = 0.0;
    for (std::int64_t i = 0; i < grid->count; ++i) {
      if (detail::excluded(H.mask, i)) continue;
      mass += herm_at(w, i).plus(n, herm_at(H, i)).det(n);
    }
    M = std::max(M, mass * std::pow(grid->h, 2 * n));
  }
  const double T = traj.times.back();
  const double C = std::max(0.0, T * muX * (std::log(M) - std::log(muX) - m));

  ScalarField wfield(grid);
  double mass0 = 0.0;
  for (std::int64_t i = 0; i < grid->count; ++i) wfield.v[i] = traj.snapshots[0].v[i] * mu.v[i];
  mass0 = integrate(wfield);
  double worst = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < traj.size(); ++k) {
    for (std::int64_t i = 0; i < grid->count; ++i)
      wfield.v[i] = traj.snapshots[k].v[i] * mu.v[i];
    worst = std::max(worst, integrate(wfield));
  }
  EstimateRecord rec;
  rec.name = "mass-monotonicity";
  rec.anchor = "potential mass against the flow measure grows at most by the entropy constant";
  rec.bound_kind = "formula";
  rec.measured = worst;
  rec.bound = mass0 + C + 1e-9;
  rec.margin = rec.bound - rec.measured;
  rec.pass = rec.margin >= 0.0;
  rec.details = "mu(X)=" + detail::fmt(muX) + "; m=" + detail::fmt(m) + "; M=" +
                detail::fmt(M) + "; C=" + detail::fmt(C);
  return rec;
}

/// One pair of the stability sweep.
struct StabilityPair {
  double lhs = 0.0;      ///< sup over [eps, T] x nodes of |phi1 - phi2|
  double l1 = 0.0;       ///< space-time L^1 norm of phi1 - phi2 on [0, T]
  double lp = 0.0;       ///< spatial L^p norm of f1 - f2
  double bracket = 0.0;  ///< (l1^gamma + lp)^{1/n}
  double implied_B = 0.0;
};

/// Evaluates the stability bracket for one pair of runs:
///   sup_{[eps,T]} |phi1 - phi2| <= B (||phi1 - phi2||_{L1(X_T)}^gamma
///                                     + ||f1 - f2||_{Lp})^{1/n}.
/// The space-time L^1 norm is a time-trapezoid of the spatial L^1 norms.
inline StabilityPair stability_pair(const FlowTrajectory& a, const FlowTrajectory& b,
                                    double eps, double gamma) {
  if (!a.grid->same_layout(*b.grid)) throw ConfigError("stability runs use different grids");
  if (a.times.size() != b.times.size())
    throw ConfigError("stability runs use different schedules");
  const auto grid = a.grid;
  const int n = grid->n;
  StabilityPair out;
  std::vector<double> l1t(a.size(), 0.0);
  ScalarField diff(grid);
  for (std::size_t k = 0; k < a.size(); ++k) {
    for (std::int64_t i = 0; i < grid->count; ++i)
      diff.v[i] = a.snapshots[k].v[i] - b.snapshots[k].v[i];
    l1t[k] = lp_norm(diff, 1.0);
    if (a.times[k] >= eps - 1e-15) out.lhs = std::max(out.lhs, field_sup_abs(diff));
  }
  for (std::size_t k = 1; k < a.size(); ++k)
    out.l1 += 0.5 * (l1t[k] + l1t[k - 1]) * (a.times[k] - a.times[k - 1]);
  ScalarField fdiff(grid);
  for (std::int64_t i = 0; i < grid->count; ++i)
    fdiff.v[i] = a.density_used.v[i] - b.density_used.v[i];
  const double p = 2.0;
  out.lp = lp_norm(fdiff, p);
  out.bracket = std::pow(std::pow(out.l1, gamma) + out.lp, 1.0 / n);
  out.implied_B = out.bracket > 0.0 ? out.lhs / out.bracket : 0.0;
  return out;
}

/// Sweep verdict: every pair yields a finite implied constant and the spread
/// max/min over nontrivial pairs stays below the cap.
struct StabilityCheck {
  EstimateRecord record;
  std::vector<StabilityPair> pairs;
};

inline StabilityCheck check_parabolic_stability(const std::vector<const FlowTrajectory*>& runs,
                                                double eps, double gamma = 0.5,
                                                double spread_cap = 50.0) {
  if (runs.size() < 2) throw DomainError("stability sweep needs at least two runs");
  StabilityCheck out;
  double bmin = std::numeric_limits<double>::infinity(), bmax = 0.0;
  for (std::size_t i = 0; i + 1 < runs.size(); ++i) {
    for (std::size_t j = i + 1; j < runs.size(); ++j) {
      StabilityPair p = stability_pair(*runs[i], *runs[j], eps, gamma);
      if (p.bracket > 1e-13) {
        bmin = std::min(bmin, p.implied_B);
        bmax = std::max(bmax, p.implied_B);
      }
      out.pairs.push_back(p);
    }
  }
  const bool have = std::isfinite(bmin) && bmin > 0.0;
  out.record.name = "parabolic-stability";
  out.record.anchor = "sup-norm gap controlled by the L1/Lp bracket with bounded constant";
  out.record.bound_kind = "fitted";
  out.record.measured = have ? bmax / bmin : 1.0;
  out.record.bound = spread_cap;
  out.record.margin = out.record.bound - out.record.measured;
  out.record.pass = out.record.margin >= 0.0;
  out.record.details = "pairs=" + std::to_string(out.pairs.size()) + "; B_min=" +
                       detail::fmt(have ? bmin : 0.0) + "; B_max=" + detail::fmt(bmax) +
                       "; gamma=" + detail::fmt(gamma) + "; eps=" + detail::fmt(eps);
  return out;
}

/// Weighted interior second-order bound: over stored t >= eps0 and nodes of
/// K (masked nodes excluded),
///   |trace Laplacian of phi_t| * e^{delta psi-} <= B,
/// with B fitted and the unweighted sup reported alongside.
struct WeightedLaplacianCheck {
  EstimateRecord record;
  double weighted_sup = 0.0;
  double unweighted_sup = 0.0;
};

inline WeightedLaplacianCheck check_weighted_laplacian(const FlowTrajectory& traj,
                                                       const ScalarField& psi_minus,
                                                       double delta,
                                                       const std::vector<std::uint8_t>& K,
                                                       double eps0) {
  if (!(delta >= 0.0)) throw DomainError("weight exponent must be nonnegative");
  if (K.size() != static_cast<std::size_t>(traj.grid->count))
    throw ConfigError("node subset size does not match the grid");
  WeightedLaplacianCheck out;
  bool any = false;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    if (traj.times[k] < eps0 - 1e-15) continue;
    const ScalarField lap = flat_laplacian(traj.snapshots[k]);
    for (std::int64_t i = 0; i < traj.grid->count; ++i) {
      if (!K[i]) continue;
      if (detail::excluded(lap.mask, i) || detail::excluded(psi_minus.mask, i)) continue;
      const double a = std::abs(lap.v[i]);
      out.unweighted_sup = std::max(out.unweighted_sup, a);
      out.weighted_sup = std::max(out.weighted_sup, a * std::exp(delta * psi_minus.v[i]));
      any = true;
    }
  }
  if (!any) throw ConfigError("node subset is empty after mask exclusion");
  out.record.name = "weighted-laplacian";
  out.record.anchor = "interior Laplacian controlled by the inverse weight of the density pole";
  out.record.bound_kind = "fitted";
  out.record.measured = out.weighted_sup;
  out.record.bound = std::numeric_limits<double>::infinity();
  out.record.margin = std::isfinite(out.weighted_sup) ? 1.0 : -1.0;
  out.record.pass = std::isfinite(out.weighted_sup);
  out.record.details = "weighted_sup=" + detail::fmt(out.weighted_sup) + "; unweighted_sup=" +
                       detail::fmt(out.unweighted_sup) + "; delta=" + detail::fmt(delta) +
                       "; eps0=" + detail::fmt(eps0);
  return out;
}

/// Ratio of a fitted constant across a refinement (fine over coarse), with
/// the zero/zero case treated as perfectly stable.
inline double refinement_ratio(double coarse, double fine) {
  if (coarse == 0.0 && fine == 0.0) return 1.0;
  if (coarse == 0.0) return std::numeric_limits<double>::infinity();
  return fine / coarse;
}

}  // namespace cmaf
