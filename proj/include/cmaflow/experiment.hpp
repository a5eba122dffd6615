#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <ctime>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "cmaflow/chern_ricci.hpp"
#include "cmaflow/config.hpp"
#include "cmaflow/elliptic.hpp"
#include "cmaflow/errors.hpp"
#include "cmaflow/estimates.hpp"
#include "cmaflow/flow.hpp"
#include "cmaflow/geometry.hpp"
#include "cmaflow/io.hpp"
#include "cmaflow/parallel.hpp"

namespace cmaf {

/// Fully resolved experiment description (a named preset or a parsed config).
struct ExperimentSpec {
  std::string name = "custom";
  // geometry
  std::string geometry = "G1";  ///< G1 flat | G2 degenerate big form
  int n = 1;
  int N = 64;
  double kappa = 0.05;  ///< G2 pole strength
  double delta = 0.1;   ///< G2 positivity reserve
  // density
  std::string density = "constant";  ///< constant | sine | klt
  double density_amplitude = 0.3;
  std::vector<double> exponents;  ///< klt exponents a_i (one per factor)
  // forcing
  std::string forcing = "zero";  ///< zero | linear
  double lambda = 0.1;           ///< linear slope
  // initial datum
  std::string initial = "zero";  ///< zero | constant | sine | kink
  double amplitude = 0.05;
  double level = 0.0;
  // class direction (switches to the class-line front end when not "none")
  std::string chi = "none";  ///< none | zero | constant | indefinite
  double chi_scale = 0.8;    ///< constant direction = -scale * identity
  // schedule
  double T = 1.0;
  int steps = 100;
  double growth = 1.1;
  double first_step_rel = 1e-3;
  // checks and knobs
  std::vector<std::string> checks{"all"};
  double alpha = 0.5;         ///< barrier profile rate (clamped below 1/T)
  double eps0 = 0.1;          ///< interior time cutoff
  double weight_delta = 0.5;  ///< weighted-Laplacian exponent
  // reproducibility
  std::uint64_t seed = 42;
};

/// All check names the runner knows, in report order.
inline const std::vector<std::string>& known_checks() {
  static const std::vector<std::string> v{
      "uniform-bound",    "lower-barrier",       "time-derivative-bounds",
      "semi-concavity",   "comparison",          "mass-monotonicity",
      "parabolic-stability", "weighted-laplacian", "ladder"};
  return v;
}

inline ExperimentSpec spec_from_config(const Config& cfg) {
  ExperimentSpec s;
  cfg.require_section("geometry");
  s.name = cfg.get_string("experiment", "name", "custom");
  s.geometry = cfg.get_string("geometry", "preset", "G1");
  if (s.geometry != "G1" && s.geometry != "G2")
    throw ConfigError(cfg.origin() + ": [geometry] preset must be G1 or G2, got '" +
                      s.geometry + "'");
  s.n = static_cast<int>(cfg.get_int("geometry", "n", 1));
  s.N = static_cast<int>(cfg.get_int("geometry", "N", 64));
  s.kappa = cfg.get_double("geometry", "kappa", 0.05);
  s.delta = cfg.get_double("geometry", "delta", 0.1);

  s.density = cfg.get_string("density", "preset", "constant");
  s.density_amplitude = cfg.get_double("density", "amplitude", 0.3);
  if (cfg.has("density", "exponents")) {
    for (const auto& tok : cfg.get_list("density", "exponents")) {
      try {
        s.exponents.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ConfigError(cfg.origin() + ": [density] exponents entry '" + tok +
                          "' is not a number");
      }
    }
  }
  s.forcing = cfg.get_string("forcing", "preset", "zero");
  s.lambda = cfg.get_double("forcing", "lambda", 0.1);
  s.initial = cfg.get_string("initial", "preset", "zero");
  s.amplitude = cfg.get_double("initial", "amplitude", 0.05);
  s.level = cfg.get_double("initial", "level", 0.0);
  s.chi = cfg.get_string("class", "direction", "none");
  s.chi_scale = cfg.get_double("class", "scale", 0.8);
  s.T = cfg.get_double("schedule", "T", 1.0);
  s.steps = static_cast<int>(cfg.get_int("schedule", "steps", 100));
  s.growth = cfg.get_double("schedule", "growth", 1.1);
  s.first_step_rel = cfg.get_double("schedule", "first_step_rel", 1e-3);
  if (cfg.has("checks", "enabled")) s.checks = cfg.get_list("checks", "enabled");
  s.alpha = cfg.get_double("checks", "alpha", 0.5);
  s.eps0 = cfg.get_double("checks", "eps0", 0.1);
  s.weight_delta = cfg.get_double("checks", "weight_delta", 0.5);
  s.seed = static_cast<std::uint64_t>(cfg.get_int("run", "seed", 42));

  if (!(s.T > 0.0)) throw ConfigError(cfg.origin() + ": [schedule] T must be positive");
  if (s.steps < 1) throw ConfigError(cfg.origin() + ": [schedule] steps must be >= 1");
  if (s.n != 1 && s.n != 2)
    throw ConfigError(cfg.origin() + ": [geometry] n must be 1 or 2");
  if (s.N < 8 || s.N % 2 != 0)
    throw ConfigError(cfg.origin() + ": [geometry] N must be even and >= 8");
  for (const auto& c : s.checks) {
    if (c == "all" || c == "none") continue;
    const auto& known = known_checks();
    if (std::find(known.begin(), known.end(), c) == known.end())
      throw ConfigError(cfg.origin() + ": [checks] enabled names unknown check '" + c + "'");
  }
  cfg.reject_unconsumed();
  return s;
}

/// Everything a run needs, instantiated on the grid.
struct BuiltExperiment {
  std::shared_ptr<const TorusGrid> grid;
  Geometry geo;
  DensitySpec density;
  ScalarField dV;
  ForcingSpec forcing;
  ScalarField phi0;
  bool crf = false;
  CRFProblem problem;  ///< populated when crf
  FormPath path;       ///< populated when !crf
};

namespace detail {

inline ScalarField build_initial(const ExperimentSpec& s,
                                 std::shared_ptr<const TorusGrid> grid) {
  if (s.initial == "zero") return ScalarField(grid);
  if (s.initial == "constant") return ScalarField(grid, s.level);
  if (s.initial == "sine") {
    return make_field(grid, [&](const std::array<double, 4>& x) {
      double v = s.amplitude * std::sin(2.0 * M_PI * x[0]) *
                 std::cos(2.0 * M_PI * x[1]);
      if (grid->n == 2) v += 0.5 * s.amplitude * std::sin(2.0 * M_PI * x[2]);
      return s.level + v;
    });
  }
  if (s.initial == "kink") {
    // Max of two cones in the first factor: continuous, kinked, not
    // admissible until enveloped.
    const auto tdist = [](double a, double b) {
      const double d = std::abs(a - b);
      return std::min(d, 1.0 - d);
    };
    return make_field(grid, [&](const std::array<double, 4>& x) {
      const double d1 = std::hypot(tdist(x[0], 0.25), tdist(x[1], 0.25));
      const double d2 = std::hypot(tdist(x[0], 0.75), tdist(x[1], 0.5));
      const double cone1 = 0.2 - 0.8 * d1;
      const double cone2 = 0.15 - 0.6 * d2;
      return s.level + std::max({cone1, cone2, 0.0});
    });
  }
  throw ConfigError("unknown initial-datum preset '" + s.initial + "'");
}

inline HermitianField build_chi(const ExperimentSpec& s,
                                std::shared_ptr<const TorusGrid> grid) {
  if (s.chi == "zero") return HermitianField(grid);
  if (s.chi == "constant") return HermitianField::scaled_identity(grid, -s.chi_scale);
  if (s.chi == "indefinite") {
    HermitianField chi(grid);
    for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
      const double v = -(0.5 + 0.3 * std::cos(2.0 * M_PI * grid->pos(c[0])));
      chi.a11[idx] = v;
      if (grid->n == 2) chi.a22[idx] = v;
    });
    return chi;
  }
  throw ConfigError("unknown class direction '" + s.chi + "'");
}

}  // namespace detail

inline BuiltExperiment build_experiment(const ExperimentSpec& s) {
  BuiltExperiment b;
  b.grid = TorusGrid::make(s.n, s.N);
  b.geo = s.geometry == "G2" ? make_log_pole_geometry(b.grid, s.kappa, s.delta)
                             : make_flat_geometry(b.grid);
  b.dV = ScalarField(b.grid, 1.0);
  b.phi0 = detail::build_initial(s, b.grid);

  if (s.forcing == "zero") {
    // default-constructed ForcingSpec is F == 0
  } else if (s.forcing == "linear") {
    const double lam = s.lambda;
    b.forcing.lambda = lam;
    b.forcing.F = [lam](double, std::int64_t, double r) { return lam * r; };
    b.forcing.dr = [lam](double, std::int64_t, double) { return lam; };
  } else {
    throw ConfigError("unknown forcing preset '" + s.forcing + "'");
  }

  b.crf = s.chi != "none";
  if (s.density == "klt" || !s.exponents.empty()) {
    if (!b.crf)
      throw ConfigError("klt densities run through the class-line front end; set a class "
                        "direction");
  }

  if (b.crf) {
    if (s.geometry != "G1")
      throw ConfigError("class-line runs use the flat geometry preset G1");
    b.problem.grid = b.grid;
    b.problem.theta0 = b.geo.theta;
    b.problem.chi = detail::build_chi(s, b.grid);
    b.problem.a = s.exponents.empty() ? std::vector<double>(static_cast<std::size_t>(s.n), 0.0)
                                      : s.exponents;
    b.problem.phi0 = b.phi0;
    b.density = make_adapted_density(b.problem);
    if (s.forcing != "zero")
      throw ConfigError("the class-line reduction carries no forcing; use forcing = zero");
    return b;
  }

  if (s.density == "constant") {
    b.density.f = ScalarField(b.grid, 1.0);
  } else if (s.density == "sine") {
    const double amp = s.density_amplitude;
    b.density.f = make_field(b.grid, [&](const std::array<double, 4>& x) {
      double v = amp * std::sin(2.0 * M_PI * x[0]);
      if (s.n == 2) v += 0.5 * amp * std::cos(2.0 * M_PI * x[2]);
      return std::exp(v);
    });
  } else {
    throw ConfigError("unknown density preset '" + s.density + "'");
  }
  b.path = make_constant_path(b.geo.theta, s.T);
  return b;
}

/// Outcome of one experiment: exit status semantics are
///   0 = ran to completion (check verdicts live in the report),
///   1 = a solver failed (partial artifacts and a failure record exist).
struct ExperimentResult {
  int status = 0;
  std::string failure;
  EstimateReport report;
  std::vector<std::string> files;  ///< artifact names relative to out_dir
};

namespace detail {

inline bool check_enabled(const ExperimentSpec& s, const std::string& name) {
  for (const auto& c : s.checks) {
    if (c == "all") return true;
    if (c == name) return true;
  }
  return false;
}

inline DensitySpec perturb_density(const DensitySpec& d, double s, double phase) {
  DensitySpec out = d;
  const auto grid = d.f.grid;
  for_each_node(*grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    const double bump = s * std::cos(2.0 * M_PI * grid->pos(c[0]) + phase);
    out.f.v[idx] *= std::exp(bump);
    if (d.decomposed) out.psi_plus.v[idx] += bump;
  });
  return out;
}

inline EstimateRecord failure_record(const std::string& name, const std::string& what) {
  EstimateRecord rec;
  rec.name = name;
  rec.anchor = "check did not run";
  rec.bound_kind = "tolerance";
  rec.measured = 1.0;
  rec.bound = 0.0;
  rec.margin = -1.0;
  rec.pass = false;
  rec.details = what;
  return rec;
}

inline EstimateRecord ratio_record(const std::string& name, double coarse, double fine) {
  EstimateRecord rec;
  rec.name = name;
  rec.anchor = "fitted constant stable under one grid refinement";
  rec.bound_kind = "fitted";
  const double r = refinement_ratio(coarse, fine);
  rec.measured = r;
  rec.bound = 2.0;
  rec.margin = std::min(r - 0.5, 2.0 - r);
  rec.pass = r >= 0.5 && r <= 2.0;
  rec.details = "coarse=" + detail::fmt(coarse) + "; fine=" + detail::fmt(fine);
  return rec;
}

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentSpec& spec, const std::string& out_dir,
                                       int threads = 1) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  ExperimentResult res;

  BuiltExperiment base = build_experiment(spec);
  FlowOptions opts;
  opts.schedule.steps = spec.steps;
  opts.schedule.growth = spec.growth;
  opts.schedule.first_step_rel = spec.first_step_rel;

  const auto run_variant = [&](const BuiltExperiment& b, const ScalarField& phi0,
                               const DensitySpec& dens) -> FlowTrajectory {
    if (b.crf) {
      CRFProblem p = b.problem;
      p.phi0 = phi0;
      CRFTrajectory t = run_crf(p, spec.T, opts, &dens);
      return std::move(t.flow);
    }
    return run_flow(phi0, b.path, dens, b.dV, b.forcing, spec.T, opts);
  };

  // ---- runs (base, refinement partner, comparison pair, stability sweep)
  FlowTrajectory traj;
  std::optional<BuiltExperiment> coarse_built;
  std::optional<FlowTrajectory> coarse;
  FlowTrajectory cmp_low, cmp_crossed;
  const std::vector<double> sweep_s{0.05, 0.1, 0.2};
  std::vector<FlowTrajectory> sweep(sweep_s.size());
  std::vector<std::string> task_failures;
  std::mutex fail_mutex;

  const bool want_fit_ratios =
      detail::check_enabled(spec, "lower-barrier") ||
      detail::check_enabled(spec, "time-derivative-bounds") ||
      detail::check_enabled(spec, "semi-concavity");
  const bool want_comparison = detail::check_enabled(spec, "comparison");
  const bool want_stability = detail::check_enabled(spec, "parabolic-stability");

  std::vector<std::function<void()>> tasks;
  const auto guard = [&](const std::string& label, std::function<void()> fn) {
    tasks.push_back([&, label, fn = std::move(fn)] {
      try {
        fn();
      } catch (const Error& e) {
        std::lock_guard<std::mutex> lock(fail_mutex);
        task_failures.push_back(label + ": " + e.what());
      }
    });
  };

  guard("base run", [&] { traj = run_variant(base, base.phi0, base.density); });
  if (want_fit_ratios && spec.N / 2 >= 8 && (spec.N / 2) % 2 == 0) {
    guard("refinement partner", [&] {
      ExperimentSpec cs = spec;
      cs.N = spec.N / 2;
      coarse_built = build_experiment(cs);
      coarse = run_variant(*coarse_built, coarse_built->phi0, coarse_built->density);
    });
  }
  if (want_comparison) {
    guard("comparison runs", [&] {
      ScalarField lo = base.phi0;
      for (auto& x : lo.v) x -= 0.1;
      cmp_low = run_variant(base, lo, base.density);
      ScalarField crossed = make_field(base.grid, [&](const std::array<double, 4>& x) {
        return 0.05 * std::sin(2.0 * M_PI * x[1]);
      });
      for (std::int64_t i = 0; i < base.grid->count; ++i) crossed.v[i] += base.phi0.v[i];
      cmp_crossed = run_variant(base, crossed, base.density);
    });
  }
  if (want_stability) {
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> uni(0.0, 2.0 * M_PI);
    std::vector<double> phases;
    for (std::size_t k = 0; k < sweep_s.size(); ++k) phases.push_back(uni(rng));
    for (std::size_t k = 0; k < sweep_s.size(); ++k) {
      guard("stability run s=" + std::to_string(sweep_s[k]), [&, k, phase = phases[k]] {
        sweep[k] = run_variant(base, base.phi0,
                               detail::perturb_density(base.density, sweep_s[k], phase));
      });
    }
  }
  run_tasks(std::move(tasks), threads);

  for (const auto& f : task_failures) {
    res.status = 1;
    res.failure += (res.failure.empty() ? "" : "; ") + f;
    res.report.add(detail::failure_record("solver", f));
  }
  if (traj.size() > 0 && traj.failed) {
    res.status = 1;
    res.failure += (res.failure.empty() ? "" : "; ") + traj.failure;
    res.report.add(detail::failure_record("solver", traj.failure));
  }

  const bool base_ok = traj.size() > 1 && !traj.failed;

  // ---- checks
  std::string stability_csv;
  if (base_ok) {
    const auto run_check = [&](const std::string& name, std::function<void()> fn) {
      if (!detail::check_enabled(spec, name)) return;
      try {
        fn();
      } catch (const Error& e) {
        res.report.add(detail::failure_record(name, e.what()));
      }
    };

    run_check("uniform-bound",
              [&] { res.report.add(check_uniform_bound(traj, base.geo)); });

    run_check("lower-barrier", [&] {
      const double alpha = std::min(spec.alpha, 0.9 / spec.T);
      BarrierCheck fine = check_barrier(traj, base.geo, alpha);
      res.report.add(fine.record);
      if (coarse && coarse->size() > 1 && !coarse->failed) {
        BarrierCheck c = check_barrier(*coarse, coarse_built->geo, alpha);
        res.report.add(detail::ratio_record("lower-barrier-refinement", c.fitted_C,
                                            fine.fitted_C));
      }
    });

    run_check("time-derivative-bounds", [&] {
      TimeDerivativeCheck fine = check_time_derivative_bounds(traj);
      res.report.add(fine.record);
      if (coarse && coarse->size() > 1 && !coarse->failed) {
        TimeDerivativeCheck c = check_time_derivative_bounds(*coarse);
        res.report.add(
            detail::ratio_record("time-upper-refinement", c.C_upper, fine.C_upper));
        res.report.add(
            detail::ratio_record("time-lower-refinement", c.C_lower, fine.C_lower));
      }
    });

    run_check("semi-concavity", [&] {
      SemiConcavityCheck fine = check_semiconcavity(traj);
      res.report.add(fine.record);
      if (coarse && coarse->size() > 1 && !coarse->failed) {
        SemiConcavityCheck c = check_semiconcavity(*coarse);
        res.report.add(detail::ratio_record("semi-concavity-refinement", c.C_concavity,
                                            fine.C_concavity));
      }
    });

    run_check("comparison", [&] {
      if (cmp_low.size() != traj.size() || cmp_low.failed)
        throw SolverError("ordered partner run unavailable");
      res.report.add(check_comparison(cmp_low, traj));
      if (cmp_crossed.size() == traj.size() && !cmp_crossed.failed) {
        EstimateRecord rec = check_comparison(cmp_crossed, traj);
        rec.name = "comparison-crossed";
        rec.anchor = "crossed data: excess bounded by the positive part of the initial excess";
        res.report.add(rec);
      }
    });

    run_check("mass-monotonicity", [&] {
      ScalarField mu(base.grid);
      for (std::int64_t i = 0; i < base.grid->count; ++i)
        mu.v[i] = traj.density_used.v[i] * traj.dV_used.v[i];
      res.report.add(check_mass_monotonicity(traj, mu));
    });

    run_check("parabolic-stability", [&] {
      std::vector<const FlowTrajectory*> runs{&traj};
      for (const auto& t : sweep) {
        if (t.size() != traj.size() || t.failed)
          throw SolverError("stability sweep member unavailable");
        runs.push_back(&t);
      }
      StabilityCheck st = check_parabolic_stability(runs, spec.eps0);
      res.report.add(st.record);
      std::string csv = "s1,s2,lhs,rhs,implied_C\n";
      std::vector<double> labels{0.0};
      labels.insert(labels.end(), sweep_s.begin(), sweep_s.end());
      std::size_t q = 0;
      for (std::size_t i = 0; i + 1 < labels.size(); ++i)
        for (std::size_t j = i + 1; j < labels.size(); ++j, ++q)
          csv += csv17(labels[i]) + "," + csv17(labels[j]) + "," + csv17(st.pairs[q].lhs) +
                 "," + csv17(st.pairs[q].bracket) + "," + csv17(st.pairs[q].implied_B) + "\n";
      stability_csv = std::move(csv);
    });

    run_check("weighted-laplacian", [&] {
      ScalarField psim(base.grid);
      if (base.density.decomposed && !base.density.psi_minus.v.empty())
        psim = base.density.psi_minus;
      std::vector<std::uint8_t> K(static_cast<std::size_t>(base.grid->count), 1);
      if (psim.has_mask())
        for (std::int64_t i = 0; i < base.grid->count; ++i)
          if (psim.mask[i]) K[static_cast<std::size_t>(i)] = 0;
      WeightedLaplacianCheck wl =
          check_weighted_laplacian(traj, psim, spec.weight_delta, K, spec.eps0);
      res.report.add(wl.record);
    });

    run_check("ladder", [&] {
      if (base.crf) {
        bool chi_zero = true;
        for (double x : base.problem.chi.a11) chi_zero = chi_zero && x == 0.0;
        if (base.grid->n == 2)
          for (double x : base.problem.chi.a22) chi_zero = chi_zero && x == 0.0;
        if (!chi_zero) return;  // moving class line: ladder not defined here
      }
      const FormPath ladder_path =
          base.crf ? make_constant_path(base.problem.theta0, spec.T) : base.path;
      const DensitySpec& dens = base.density;
      LadderReport lr = regularization_ladder(base.phi0, ladder_path, dens, base.dV,
                                              base.forcing, spec.T, 4, spec.eps0, 0.05, opts);
      EstimateRecord rec;
      rec.name = "ladder";
      rec.anchor = "bounded-data approximants approach the run monotonically after level 1";
      rec.bound_kind = "tolerance";
      rec.measured = lr.distances.empty() ? 0.0 : lr.distances.back();
      rec.bound = lr.distances.empty() ? 0.0 : lr.distances.front();
      rec.margin = rec.bound - rec.measured;
      rec.pass = lr.distances_monotone;
      std::string d;
      for (double x : lr.distances) d += (d.empty() ? "" : " ") + detail::fmt(x);
      rec.details = "levels=" + std::to_string(lr.levels) + "; distances=" + d;
      res.report.add(rec);
    });
  }

  // ---- artifacts
  std::vector<ManifestEntry> manifest;
  const auto emit = [&](const std::string& name, const std::function<void(const std::string&)>& writer) {
    const std::string path = (fs::path(out_dir) / name).string();
    writer(path);
    ManifestEntry e;
    e.name = name;
    e.bytes = static_cast<std::uint64_t>(fs::file_size(path));
    e.digest = file_digest(path);
    manifest.push_back(e);
    res.files.push_back(name);
  };

  if (traj.size() > 0) {
    emit("snapshots.bin", [&](const std::string& p) {
      write_snapshots(p, traj, base.crf ? 2u : 1u);
    });
    emit("series.csv", [&](const std::string& p) { write_series_csv(p, traj); });
  }
  emit("report.txt", [&](const std::string& p) { write_report_text(p, res.report); });
  emit("report.csv", [&](const std::string& p) { write_report_csv(p, res.report); });
  if (!stability_csv.empty())
    emit("stability.csv",
         [&](const std::string& p) { cmaf::detail::write_file(p, stability_csv); });
  {
    std::string constants = "name,value\n";
    for (const auto& r : res.report.records)
      if (r.bound_kind == "fitted") constants += r.name + "," + csv17(r.measured) + "\n";
    emit("constants.csv",
         [&](const std::string& p) { cmaf::detail::write_file(p, constants); });
  }
  write_manifest((fs::path(out_dir) / "manifest.txt").string(), manifest, spec.seed,
                 detail::utc_timestamp());
  res.files.push_back("manifest.txt");
  return res;
}

}  // namespace cmaf
