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

#include "cmaflow/elliptic.hpp"
#include "cmaflow/errors.hpp"
#include "cmaflow/fft.hpp"
#include "cmaflow/field.hpp"
#include "cmaflow/geometry.hpp"
#include "cmaflow/grid.hpp"
#include "cmaflow/hessian.hpp"

namespace cmaf {

/// Zero-order forcing term F(t, x, r) of the flow together with its declared
/// structural constants. `lambda` is the quasi-monotonicity constant
/// (F + lambda * r nondecreasing in r), `kappa` the Lipschitz constant in
/// (t, r), `semi_convexity` the semi-convexity constant in (t, r). The
/// optional `dr` evaluator supplies the exact r-derivative; a central
/// difference is used otherwise.
struct ForcingSpec {
  std::function<double(double, std::int64_t, double)> F;
  std::function<double(double, std::int64_t, double)> dr;  ///< optional dF/dr
  double lambda = 0.0;
  double kappa = 0.0;
  double semi_convexity = 0.0;

  double eval(double t, std::int64_t idx, double r) const { return F ? F(t, idx, r) : 0.0; }

  double slope(double t, std::int64_t idx, double r) const {
    if (!F) return 0.0;
    if (dr) return dr(t, idx, r);
    const double h = 1e-6 * std::max(1.0, std::abs(r));
    return (F(t, idx, r + h) - F(t, idx, r - h)) / (2.0 * h);
  }
};

/// Sampled validation of the declared forcing constants.
struct ForcingCheck {
  bool monotone_ok = true;       ///< F + lambda r nondecreasing in r on samples
  bool lipschitz_ok = true;      ///< |dF| <= kappa (|dt| + |dr|) on samples
  bool convex_ok = true;         ///< midpoint convexity defect bounded by the constant
  double worst_monotone = 0.0;   ///< most negative sampled slope of F + lambda r
  double worst_lipschitz = 0.0;  ///< largest sampled excess over the kappa bound
  double worst_convex = 0.0;     ///< largest sampled midpoint defect excess
};

/// Samples the forcing on a (t, r) lattice at a few grid nodes and tests the
/// declared constants. `t_max` and `r_max` bound the sampled rectangle.
inline ForcingCheck validate_forcing(const ForcingSpec& fs, const TorusGrid& g, double t_max,
                                     double r_max, int samples = 9, double tol = 1e-9) {
  ForcingCheck out;
  if (!fs.F) return out;
  std::vector<std::int64_t> nodes = {0, g.count / 3, (2 * g.count) / 3, g.count - 1};
  for (std::int64_t idx : nodes) {
    for (int it = 0; it <= samples; ++it) {
      const double t = t_max * it / samples;
      for (int ir = 0; ir <= samples; ++ir) {
        const double r = -r_max + 2.0 * r_max * ir / samples;
        // Quasi-monotonicity: forward difference in r of F + lambda r.
        if (ir < samples) {
          const double r2 = -r_max + 2.0 * r_max * (ir + 1) / samples;
          const double d =
              (fs.F(t, idx, r2) + fs.lambda * r2) - (fs.F(t, idx, r) + fs.lambda * r);
          out.worst_monotone = std::min(out.worst_monotone, d);
        }
        // Lipschitz in (t, r) against a shifted sample.
        if (it < samples && ir < samples) {
          const double t2 = t_max * (it + 1) / samples;
          const double r2 = -r_max + 2.0 * r_max * (ir + 1) / samples;
          const double excess = std::abs(fs.F(t2, idx, r2) - fs.F(t, idx, r)) -
                                fs.kappa * (std::abs(t2 - t) + std::abs(r2 - r));
          out.worst_lipschitz = std::max(out.worst_lipschitz, excess);
          // Semi-convexity: midpoint value against the chord, allowing the
          // declared constant times the squared half-diagonal.
          const double mid = fs.F(0.5 * (t + t2), idx, 0.5 * (r + r2));
          const double chord = 0.5 * (fs.F(t, idx, r) + fs.F(t2, idx, r2));
          const double d2 = 0.25 * ((t2 - t) * (t2 - t) + (r2 - r) * (r2 - r));
          out.worst_convex =
              std::max(out.worst_convex, mid - chord - 0.5 * fs.semi_convexity * d2);
        }
      }
    }
  }
  out.monotone_ok = out.worst_monotone >= -tol;
  out.lipschitz_ok = out.worst_lipschitz <= tol;
  out.convex_ok = out.worst_convex <= tol;
  return out;
}

/// Density data of the flow: the nodewise density f with integrability
/// exponent p, optionally carrying a log decomposition f = e^{psi+ - psi-}
/// whose parts may have pole masks.
struct DensitySpec {
  ScalarField f;
  double p = 2.0;
  ScalarField psi_plus;   ///< optional (empty when not decomposed)
  ScalarField psi_minus;  ///< optional
  bool decomposed = false;

  /// True when the density genuinely degenerates: zeros of f, or pole-masked
  /// decomposition parts.
  bool degenerate() const {
    if (decomposed) {
      if (!psi_plus.v.empty() && !psi_plus.mask.empty())
        for (auto m : psi_plus.mask)
          if (m) return true;
      if (!psi_minus.v.empty() && !psi_minus.mask.empty())
        for (auto m : psi_minus.mask)
          if (m) return true;
    }
    for (std::int64_t i = 0; i < f.grid->count; ++i) {
      if (detail::excluded(f.mask, i)) continue;
      if (f.v[i] <= 0.0) return true;
    }
    return false;
  }

  /// Bounded approximant at clip level j: the decomposition exponents are
  /// floored at -j*ln(10) (pole-masked nodes included), giving
  /// f_j = e^{max(psi+,-j ln 10) - max(psi-,-j ln 10)}. Without a
  /// decomposition the density itself is floored at 10^{-j}.
  ScalarField clipped(int j) const {
    if (j < 1) throw DomainError("clip level must be >= 1");
    const double floor_log = -static_cast<double>(j) * std::log(10.0);
    ScalarField out(f.grid);
    if (decomposed && !psi_plus.v.empty() && !psi_minus.v.empty()) {
      for (std::int64_t i = 0; i < f.grid->count; ++i) {
        const double up = std::max(psi_plus.v[i], floor_log);
        const double dn = std::max(psi_minus.v[i], floor_log);
        out.v[i] = std::exp(up - dn);
      }
    } else {
      const double fl = std::pow(10.0, -static_cast<double>(j));
      for (std::int64_t i = 0; i < f.grid->count; ++i) out.v[i] = std::max(f.v[i], fl);
    }
    return out;
  }

  /// Checks the structural hypotheses: f >= 0 with finite L^p mass, and
  /// e^{-psi-} in L^p when decomposed. Throws a domain error on violation.
  void validate() const {
    if (!(p > 1.0)) throw DomainError("density exponent must satisfy p > 1");
    for (std::int64_t i = 0; i < f.grid->count; ++i) {
      if (detail::excluded(f.mask, i)) continue;
      if (!(f.v[i] >= 0.0) || !std::isfinite(f.v[i]))
        throw DomainError("density must be finite and nonnegative (node " + std::to_string(i) +
                          ")");
    }
    if (!std::isfinite(lp_norm(f, p))) throw DomainError("density has infinite L^p mass");
    if (decomposed && !psi_minus.v.empty()) {
      ScalarField e(f.grid);
      e.mask = psi_minus.mask;
      for (std::int64_t i = 0; i < f.grid->count; ++i)
        e.v[i] = detail::excluded(psi_minus.mask, i) ? 0.0 : std::exp(-psi_minus.v[i]);
      if (!std::isfinite(lp_norm(e, p)))
        throw DomainError("negative decomposition part fails the L^p hypothesis");
    }
  }
};

namespace detail {

/// Path with `eps * identity` added to every sample (and to the base).
inline FormPath lift_path(const FormPath& path, double eps, int n) {
  FormPath lifted;
  lifted.T = path.T;
  lifted.A = path.A;
  lifted.delta = path.delta;
  lifted.at = [inner = path.at, eps, n](double t) {
    HermitianField w = inner(t);
    for (std::int64_t i = 0; i < w.grid->count; ++i) {
      w.a11[i] += eps;
      if (n == 2) w.a22[i] += eps;
    }
    return w;
  };
  if (!path.base.a11.empty()) {
    lifted.base = path.base;
    for (std::int64_t i = 0; i < lifted.base.grid->count; ++i) {
      lifted.base.a11[i] += eps;
      if (n == 2) lifted.base.a22[i] += eps;
    }
  } else {
    lifted.base = lifted.at(0.0);
  }
  return lifted;
}

/// Smallest endpoint eigenvalue of the path (degeneracy probe).
inline double path_floor(const FormPath& path, const TorusGrid& g) {
  double floor_eig = std::numeric_limits<double>::infinity();
  for (const double t : {0.0, path.T}) {
    const HermitianField th = path.at(t);
    for (std::int64_t i = 0; i < g.count; ++i)
      floor_eig = std::min(floor_eig, herm_at(th, i).min_eig(g.n));
  }
  return floor_eig;
}

}  // namespace detail

/// One accepted point of the flow.
struct FlowState {
  double t = 0.0;
  double t_prev = 0.0;
  ScalarField phi;
  ScalarField phi_prev;
  double last_residual = 0.0;
  int last_newton_iterations = 0;
};

/// Time-grid specification: `steps` intervals on [0, T], geometric from
/// `first_step_rel * T` with the given growth factor, switching to an exact
/// uniform fill of the remainder (the grid always ends at T in `steps`
/// intervals).
struct TimeGridSpec {
  int steps = 100;
  double first_step_rel = 1e-3;
  double growth = 1.1;
};

inline std::vector<double> make_time_grid(double T, const TimeGridSpec& spec) {
  if (!(T >= 0.0)) throw DomainError("horizon must be nonnegative");
  if (spec.steps < 1) throw DomainError("time grid needs at least one step");
  if (!(spec.first_step_rel > 0.0) || !(spec.growth >= 1.0))
    throw DomainError("time grid requires positive first step and growth >= 1");
  std::vector<double> ts{0.0};
  if (T == 0.0) return ts;
  double dt_geo = spec.first_step_rel * T;
  double t = 0.0;
  for (int k = 1; k <= spec.steps; ++k) {
    const int remaining = spec.steps - (k - 1);
    const double dt_uni = (T - t) / remaining;
    const double dt = std::min(dt_geo, dt_uni);
    t += dt;
    ts.push_back(t);
    dt_geo *= spec.growth;
  }
  ts.back() = T;  // exact landing
  return ts;
}

/// Flow run controls.
struct FlowOptions {
  double tol = 1e-10;        ///< per-step Newton residual target (log form)
  TimeGridSpec schedule;
  int max_halvings = 14;     ///< step-size halvings before giving up
  int reg_level = 6;         ///< clip level used when the density degenerates
  double psh_tol = 1e-9;     ///< admissibility tolerance for the initial datum
  double lift_floor = 1e-9;  ///< minimal base-form eigenvalue before lifting kicks in
};

/// Stored result of a flow run: graded times, potential snapshots, the
/// effective (possibly regularized) problem data, and failure marks. The
/// time-derivative accessors implement backward first differences and exact
/// nonuniform centered second differences.
struct FlowTrajectory {
  std::shared_ptr<const TorusGrid> grid;
  std::vector<double> times;
  std::vector<ScalarField> snapshots;
  std::vector<double> step_residuals;  ///< max Newton residual per stored step

  FormPath path_used;        ///< the form path actually stepped (lift included)
  ScalarField density_used;  ///< the density actually stepped (clip included)
  ScalarField dV_used;
  ForcingSpec forcing_used;

  bool envelope_applied = false;  ///< initial datum was replaced by its envelope
  double envelope_shift = 0.0;    ///< sup |phi0 - envelope|
  int clip_level = 0;             ///< density clip level (0 = none applied)
  double lift_eps = 0.0;          ///< identity lift added to the form path

  bool failed = false;
  double failed_time = 0.0;
  std::string failure;

  std::size_t size() const { return times.size(); }

  /// Backward difference (phi_k - phi_{k-1}) / (t_k - t_{k-1}); k >= 1.
  ScalarField phi_dot(std::size_t k) const {
    if (k < 1 || k >= times.size()) throw DomainError("phi_dot index out of range");
    const double dt = times[k] - times[k - 1];
    ScalarField out(grid);
    out.mask = snapshots[k].mask;
    for (std::int64_t i = 0; i < grid->count; ++i)
      out.v[i] = (snapshots[k].v[i] - snapshots[k - 1].v[i]) / dt;
    return out;
  }

  /// Centered second difference with exact nonuniform weights; 1 <= k <= M-1.
  ScalarField phi_ddot(std::size_t k) const {
    if (k < 1 || k + 1 >= times.size()) throw DomainError("phi_ddot index out of range");
    const double h1 = times[k] - times[k - 1];
    const double h2 = times[k + 1] - times[k];
    ScalarField out(grid);
    out.mask = snapshots[k].mask;
    const double w = 2.0 / (h1 * h2 * (h1 + h2));
    for (std::int64_t i = 0; i < grid->count; ++i)
      out.v[i] = w * (h1 * snapshots[k + 1].v[i] - (h1 + h2) * snapshots[k].v[i] +
                      h2 * snapshots[k - 1].v[i]);
    return out;
  }
};

/// One implicit (backward Euler) step of the flow: solves
///   log det(g_{t+dt} + Hess phi) - log(f dV) - F(t+dt, x, phi)
///     - (phi - phi_t)/dt = 0
/// nodewise by damped Newton from the previous state. Requires dt below the
/// Jacobian-definiteness cap 1/(2 lambda) and a strictly positive density.
/// Throws a step error with the residual trace on Newton failure (the caller
/// is expected to halve dt and retry).
inline FlowState step_implicit(const FlowState& state, const FormPath& path,
                               const ScalarField& f, const ScalarField& dV,
                               const ForcingSpec& forcing, double dt, double tol,
                               SpectralSolver& fft) {
  if (!(dt > 0.0)) throw DomainError("step size must be positive");
  if (forcing.lambda > 0.0 && dt >= 0.5 / forcing.lambda)
    throw DomainError("step size " + std::to_string(dt) +
                      " exceeds the definiteness cap 1/(2 lambda) = " +
                      std::to_string(0.5 / forcing.lambda));
  const auto grid = state.phi.grid;
  const double t_next = state.t + dt;
  const HermitianField omega = path.at(std::min(t_next, path.T));

  ScalarField log_rhs(grid);
  for (std::int64_t i = 0; i < grid->count; ++i) {
    if (!(f.v[i] > 0.0))
      throw DomainError("implicit step requires a strictly positive density (node " +
                        std::to_string(i) + "); clip degenerate densities first");
    log_rhs.v[i] = std::log(f.v[i]) + std::log(dV.v[i]);
  }

  const double* prev = state.phi.v.data();
  ZeroOrderTerm zot = [&forcing, prev, dt, t_next](std::int64_t idx, double r, double& z,
                                                   double& slope) {
    z = (r - prev[idx]) / dt + forcing.eval(t_next, idx, r);
    slope = 1.0 / dt + forcing.slope(t_next, idx, r);
  };

  // The previous potential may sit exactly on the cone boundary (an enveloped
  // rough datum does). Newton needs a strictly interior start: shrinking
  // toward zero gains margin because the minimal eigenvalue is superadditive,
  //   min_eig(omega + (1-s) H) >= (1-s) min_eig(omega + H) + s min_eig(omega).
  ScalarField start = state.phi;
  const AdmissibilityReport start_rep = check_admissible(omega, start, 0.0);
  if (!start_rep.ok) {
    const double lam_omega = check_admissible(omega, ScalarField(grid), 0.0).worst_eig;
    const double margin = std::max(1e-10, 1e-6 * lam_omega);
    const double m = start_rep.worst_eig;
    if (lam_omega > margin && m < margin) {
      const double s = std::min(1.0, (margin - m) / (lam_omega - m));
      for (auto& x : start.v) x *= 1.0 - s;
    }
  }

  NewtonOptions opt;
  opt.tol = tol;
  const NewtonOutcome nw =
      newton_monge_ampere(omega, log_rhs, zot, /*mean_gauge=*/false, start, fft, opt);
  if (!nw.converged) {
    std::string hist;
    const std::size_t k0 = nw.history.size() > 8 ? nw.history.size() - 8 : 0;
    for (std::size_t k = k0; k < nw.history.size(); ++k)
      hist += (hist.empty() ? "" : ", ") + std::to_string(nw.history[k]);
    throw StepError("implicit step at t = " + std::to_string(t_next) +
                    " failed to converge (dt = " + std::to_string(dt) +
                    ", residual trace: " + (hist.empty() ? "inadmissible start" : hist) + ")");
  }

  FlowState next;
  next.t = t_next;
  next.t_prev = state.t;
  next.phi = std::move(nw.phi);
  next.phi_prev = state.phi;
  next.last_residual = nw.residual;
  next.last_newton_iterations = nw.iterations;
  return next;
}

/// Integrates the flow from phi0 over [0, T] on a graded time grid.
///
/// The initial datum is enveloped (and the fact recorded) when it is not
/// admissible within tolerance. Degenerate densities and degenerate form
/// paths are regularized once at the configured clip level: the density is
/// replaced by its bounded approximant and the path lifted by the matching
/// identity multiple; both are recorded in the trajectory. A failed step is
/// retried with halved substeps; persistent failure returns the partial
/// trajectory with the failure mark set.
inline FlowTrajectory run_flow(const ScalarField& phi0, const FormPath& path,
                               const DensitySpec& density, const ScalarField& dV,
                               const ForcingSpec& forcing, double T,
                               const FlowOptions& opts = {}) {
  const auto grid = phi0.grid;
  if (!(T >= 0.0)) throw DomainError("flow horizon must be nonnegative");
  if (T > path.T * (1.0 + 1e-12))
    throw DomainError("flow horizon exceeds the form path horizon");
  density.validate();

  FlowTrajectory traj;
  traj.grid = grid;
  traj.forcing_used = forcing;
  traj.dV_used = dV;

  // Regularize degenerate data once, at a fixed recorded level.
  FormPath run_path = path;
  ScalarField f_run = density.f;
  const bool density_degenerate = density.degenerate();
  if (density_degenerate) {
    f_run = density.clipped(opts.reg_level);
    traj.clip_level = opts.reg_level;
  }
  const double base_floor = detail::path_floor(path, *grid);
  if (density_degenerate || base_floor < opts.lift_floor) {
    const double eps = std::pow(2.0, -static_cast<double>(opts.reg_level));
    traj.lift_eps = eps;
    run_path = detail::lift_path(path, eps, grid->n);
  }
  traj.path_used = run_path;
  traj.density_used = f_run;

  // Initial datum: envelope if not admissible within tolerance.
  ScalarField start = phi0;
  {
    const HermitianField om0 = run_path.at(0.0);
    const auto adm = check_admissible(om0, start, opts.psh_tol);
    if (!adm.ok) {
      const ScalarField env = psh_envelope(om0, start);
      double shift = 0.0;
      for (std::int64_t i = 0; i < grid->count; ++i)
        shift = std::max(shift, std::abs(env.v[i] - start.v[i]));
      traj.envelope_applied = true;
      traj.envelope_shift = shift;
      start = env;
    }
  }

  traj.times = make_time_grid(T, opts.schedule);
  traj.snapshots.reserve(traj.times.size());
  traj.snapshots.push_back(start);
  traj.step_residuals.assign(traj.times.size(), 0.0);
  if (T == 0.0) return traj;

  SpectralSolver fft(grid);
  FlowState state;
  state.t = 0.0;
  state.phi = start;
  state.phi_prev = start;

  const double dt_cap =
      forcing.lambda > 0.0 ? 0.45 / forcing.lambda : std::numeric_limits<double>::infinity();

  for (std::size_t k = 1; k < traj.times.size(); ++k) {
    const double target = traj.times[k];
    double max_res = 0.0;
    bool ok = true;
    while (state.t < target - 1e-15 * T) {
      double dt = target - state.t;
      if (dt > dt_cap) dt = dt_cap;
      int halvings = 0;
      for (;;) {
        try {
          FlowState next = step_implicit(state, run_path, f_run, dV, forcing, dt, opts.tol, fft);
          max_res = std::max(max_res, next.last_residual);
          state = std::move(next);
          break;
        } catch (const StepError& e) {
          if (++halvings > opts.max_halvings) {
            traj.failed = true;
            traj.failed_time = state.t;
            traj.failure = e.what();
            ok = false;
            break;
          }
          dt *= 0.5;
        }
      }
      if (!ok) break;
    }
    if (!ok) {
      traj.times.resize(k);
      traj.step_residuals.resize(k);
      return traj;
    }
    state.t = target;  // absorb roundoff from substeps
    traj.snapshots.push_back(state.phi);
    traj.step_residuals[k] = max_res;
  }
  return traj;
}

/// Sup-distance between two trajectories over stored times in [t_lo, t_hi]
/// (analysis nodes only). The grids and schedules must agree.
inline double trajectory_sup_distance(const FlowTrajectory& a, const FlowTrajectory& b,
                                      double t_lo, double t_hi) {
  if (!a.grid->same_layout(*b.grid))
    throw DomainError("trajectories live on different grids");
  if (a.times.size() != b.times.size())
    throw DomainError("trajectories have different schedules");
  double d = 0.0;
  for (std::size_t k = 0; k < a.times.size(); ++k) {
    if (a.times[k] < t_lo - 1e-15 || a.times[k] > t_hi + 1e-15) continue;
    const auto excl = mask_union(a.snapshots[k].mask, b.snapshots[k].mask);
    for (std::int64_t i = 0; i < a.grid->count; ++i) {
      if (detail::excluded(excl, i)) continue;
      d = std::max(d, std::abs(a.snapshots[k].v[i] - b.snapshots[k].v[i]));
    }
  }
  return d;
}

/// Regularization ladder report: trajectories at decreasing regularization
/// and the successive sup-distances on [t_lo, T] over unmasked nodes.
struct LadderReport {
  std::vector<FlowTrajectory> levels;   ///< level j = 1..J
  std::vector<double> distances;        ///< |level j - level j-1|, j = 2..J
  bool distances_monotone = true;       ///< nonincreasing after the first entry
};

/// Runs the flow at clip levels j = 1..J: density clipped at -j ln 10,
/// initial datum mollified at width 2^{-j} * width0 then enveloped, and --
/// when the input path is degenerate -- the form path lifted by 2^{-j} *
/// identity. Reports successive sup-distances on [t_lo, T]. With smooth
/// nondegenerate data every level reproduces the direct run (clips, blur of
/// constants and envelopes are identities there).
inline LadderReport regularization_ladder(const ScalarField& phi0, const FormPath& path,
                                          const DensitySpec& density, const ScalarField& dV,
                                          const ForcingSpec& forcing, double T, int J,
                                          double t_lo = 0.1, double width0 = 0.05,
                                          const FlowOptions& opts_in = {}) {
  if (J < 1) throw DomainError("ladder needs at least one level");
  LadderReport rep;
  SpectralSolver fft(phi0.grid);
  const bool lift_needed =
      detail::path_floor(path, *phi0.grid) < opts_in.lift_floor || density.degenerate();
  for (int j = 1; j <= J; ++j) {
    const double eps = std::pow(2.0, -static_cast<double>(j));
    DensitySpec dj;
    dj.f = density.clipped(j);
    dj.p = density.p;
    const FormPath lifted =
        lift_needed ? detail::lift_path(path, eps, phi0.grid->n) : path;
    ScalarField start = fft.gaussian_blur(phi0, width0 * eps);
    start = psh_envelope(lifted.at(0.0), start);

    FlowOptions opts = opts_in;
    opts.lift_floor = 0.0;  // the ladder has already handled lifting
    FlowTrajectory traj;
    try {
      traj = run_flow(start, lifted, dj, dV, forcing, T, opts);
    } catch (const Error& e) {
      throw SolverError("ladder level " + std::to_string(j) + " failed: " + e.what());
    }
    if (traj.failed)
      throw SolverError("ladder level " + std::to_string(j) + " failed at t = " +
                        std::to_string(traj.failed_time) + ": " + traj.failure);
    traj.clip_level = j;
    traj.lift_eps = lift_needed ? eps : 0.0;
    rep.levels.push_back(std::move(traj));
  }
  for (std::size_t j = 1; j < rep.levels.size(); ++j)
    rep.distances.push_back(
        trajectory_sup_distance(rep.levels[j], rep.levels[j - 1], t_lo, T));
  for (std::size_t j = 1; j < rep.distances.size(); ++j)
    if (rep.distances[j] > rep.distances[j - 1] * (1.0 + 1e-12))
      rep.distances_monotone = false;
  return rep;
}

/// Direction of a slicewise inequality check.
enum class SliceDirection { Sub, Super };

/// Nodewise margin of the slice inequality at time t:
///   Sub:   det(g_t + Hess phi) - e^{phi_dot + F(t, x, phi)} f dV  (>= 0 wanted)
///   Super: the negated difference.
struct SliceCheck {
  ScalarField margin;
  double min_margin = 0.0;  ///< min over analysis nodes
  bool admissible = true;   ///< g_t + Hess phi stayed semi-positive (to tol)
};

inline SliceCheck check_subsolution_slice(double t, const ScalarField& phi,
                                          const ScalarField& phi_dot, const FormPath& path,
                                          const ScalarField& f, const ScalarField& dV,
                                          const ForcingSpec& forcing, SliceDirection dir) {
  const auto grid = phi.grid;
  const HermitianField omega = path.at(std::min(t, path.T));
  const int n = grid->n;
  SliceCheck out;
  out.margin = ScalarField(grid);
  HessianStencil st(*grid, phi.v.data());
  const auto halo = analysis_mask(phi);
  out.margin.mask = mask_union(halo, mask_union(omega.mask, phi_dot.mask));
  double worst_eig = std::numeric_limits<double>::infinity();
  double mm = std::numeric_limits<double>::infinity();
  for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    if (detail::excluded(out.margin.mask, idx)) return;
    const HermValue g = herm_at(omega, idx).plus(n, st.at(idx, c));
    worst_eig = std::min(worst_eig, g.min_eig(n));
    const double lhs = g.det(n);
    const double rhs =
        std::exp(phi_dot.v[idx] + forcing.eval(t, idx, phi.v[idx])) * f.v[idx] * dV.v[idx];
    const double m = dir == SliceDirection::Sub ? lhs - rhs : rhs - lhs;
    out.margin.v[idx] = m;
    mm = std::min(mm, m);
  });
  out.min_margin = std::isfinite(mm) ? mm : 0.0;
  out.admissible = worst_eig >= -kPsdTol;
  return out;
}

/// Constants of the subsolution rescaling u^s, derived from the run data:
///   lambda_s = |s-1| / s,
///   alpha_s  = s (1 - lambda_s)(1 - A1 |s-1|),
///   u^s(t,x) = (alpha_s / s) phi(ts, x) + (1 - alpha_s) rho1(x) - C |s-1| t,
/// with rho1 the static solution at level eps1 * base and eps1 chosen below
/// the sampled minimum of lambda_s / (1 - alpha_s) so the form-convexity
/// budget closes for every admissible s.
struct RescaleConstants {
  double eps0 = 0.1;  ///< admissible range |s-1| < eps0
  double A1 = 0.5;    ///< first-order rescaling constant (structural knob)
  double eps1 = 0.0;
  double C = 0.0;
  ScalarField rho1;
  double c1 = 0.0;
};

/// Computes the rescaling constants for a completed run. The trajectory's
/// effective path base must be strictly positive (run degenerate problems
/// through the recorded lift). The shift constant C is assembled generously
/// from measured magnitudes: path regularity, potential and velocity bounds,
/// forcing constants and the static normalization.
inline RescaleConstants make_rescale_constants(const FlowTrajectory& traj, double eps0 = 0.1,
                                               double A1 = 0.5, double tol = 1e-11) {
  if (!(eps0 > 0.0) || eps0 >= 0.5)
    throw DomainError("rescaling requires 0 < eps0 < 1/2");
  if (!(A1 > 0.0)) throw DomainError("rescaling requires A1 > 0");
  if (traj.size() < 2) throw DomainError("rescaling needs a run with at least one step");
  RescaleConstants rc;
  rc.eps0 = eps0;
  rc.A1 = A1;

  // eps1: sampled minimum of lambda_s / (1 - alpha_s) over the admissible
  // range (both branches of s), with margin, capped at 1.
  double ratio_min = std::numeric_limits<double>::infinity();
  const int K = 40;
  for (int k = 1; k <= K; ++k) {
    for (const double sgn : {-1.0, 1.0}) {
      const double s = 1.0 + sgn * eps0 * static_cast<double>(k) / K;
      const double lam = std::abs(s - 1.0) / s;
      const double alpha = s * (1.0 - lam) * (1.0 - A1 * std::abs(s - 1.0));
      if (!(alpha > 0.0) || !(alpha < 1.0))
        throw DomainError("rescaling constants leave (0,1) at s = " + std::to_string(s) +
                          "; shrink eps0 or A1");
      ratio_min = std::min(ratio_min, lam / (1.0 - alpha));
    }
  }
  rc.eps1 = std::min(1.0, 0.9 * ratio_min);

  // Static normalization at level eps1 * base.
  const HermitianField& base = traj.path_used.base;
  if (base.a11.empty())
    throw DomainError("trajectory path carries no base form; rescaling unavailable");
  const int n = traj.grid->n;
  double base_min = std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < traj.grid->count; ++i)
    base_min = std::min(base_min, herm_at(base, i).min_eig(n));
  if (!(base_min > 0.0))
    throw DomainError("path base form is degenerate (min eigenvalue " +
                      std::to_string(base_min) + "); rescaling needs the lifted run");
  HermitianField eb = base;
  for (std::int64_t i = 0; i < traj.grid->count; ++i) {
    eb.a11[i] *= rc.eps1;
    if (n == 2) {
      eb.a22[i] *= rc.eps1;
      eb.re12[i] *= rc.eps1;
      eb.im12[i] *= rc.eps1;
    }
  }
  const EllipticSolution es = solve_elliptic(eb, traj.density_used, traj.dV_used, tol);
  rc.rho1 = es.phi;
  rc.c1 = es.c;

  // Generous shift constant from measured magnitudes.
  double sup_phi = 0.0, sup_dot = 0.0;
  for (std::size_t k = 0; k < traj.size(); ++k)
    sup_phi = std::max(sup_phi, field_sup_abs(traj.snapshots[k]));
  for (std::size_t k = 1; k < traj.size(); ++k)
    sup_dot = std::max(sup_dot, field_sup_abs(traj.phi_dot(k)));
  const double sup_rho = field_sup_abs(rc.rho1);
  const double T = traj.times.back();
  const ForcingSpec& fs = traj.forcing_used;
  rc.C = n * traj.path_used.A * (1.0 + T) +
         (fs.lambda + 1.0) * (sup_phi + sup_rho + std::abs(rc.c1) + 1.0) + sup_dot +
         fs.kappa * (1.0 + T) + 5.0;
  return rc;
}

/// Applies the subsolution rescaling to a completed run. Output times are
/// t_k / s (the stored snapshots are reused exactly; no interpolation), and
/// for s < 1 the trailing slices beyond the path horizon are dropped.
/// s = 1 returns the trajectory unchanged.
inline FlowTrajectory rescale_subsolution(const FlowTrajectory& traj, double s,
                                          const RescaleConstants& rc) {
  if (std::abs(s - 1.0) >= rc.eps0)
    throw DomainError("rescaling factor s = " + std::to_string(s) +
                      " outside the admissible range |s-1| < " + std::to_string(rc.eps0));
  if (s == 1.0) return traj;
  const double lam = std::abs(s - 1.0) / s;
  const double alpha = s * (1.0 - lam) * (1.0 - rc.A1 * std::abs(s - 1.0));

  FlowTrajectory out;
  out.grid = traj.grid;
  out.path_used = traj.path_used;
  out.density_used = traj.density_used;
  out.dV_used = traj.dV_used;
  out.forcing_used = traj.forcing_used;
  out.clip_level = traj.clip_level;
  out.lift_eps = traj.lift_eps;
  for (std::size_t k = 0; k < traj.size(); ++k) {
    const double tp = traj.times[k] / s;
    if (tp > traj.path_used.T * (1.0 + 1e-12)) break;
    ScalarField u(traj.grid);
    u.mask = traj.snapshots[k].mask;
    for (std::int64_t i = 0; i < traj.grid->count; ++i)
      u.v[i] = (alpha / s) * traj.snapshots[k].v[i] + (1.0 - alpha) * rc.rho1.v[i] -
               rc.C * std::abs(s - 1.0) * tp;
    out.times.push_back(tp);
    out.snapshots.push_back(std::move(u));
  }
  out.step_residuals.assign(out.times.size(), 0.0);
  return out;
}

}  // namespace cmaf
