#pragma once

#include <string>
#include <vector>

#include "cmaflow/errors.hpp"
#include "cmaflow/experiment.hpp"

namespace cmaf {

/// One named, fully resolved experiment plus a one-line description.
struct PresetInfo {
  std::string name;
  std::string summary;
};

/// Stable-order listing of the named experiment presets. The two geometry
/// presets G1/G2 are selected inside configs rather than run directly, but
/// appear in the listing since configs reference them by name.
inline const std::vector<PresetInfo>& preset_infos() {
  static const std::vector<PresetInfo> v{
      {"G1", "geometry: flat nondegenerate reference form (config value)"},
      {"G2", "geometry: degenerate big form with a log-pole barrier (config value)"},
      {"flat-anchor", "stationary run: flat geometry, unit density, zero data"},
      {"constant-data", "spatially constant data driven by a linear forcing"},
      {"linear-forcing", "smooth sine density with a mild linear forcing"},
      {"sine-data", "smooth sine density and sine initial potential"},
      {"big-form", "degenerate big-form geometry, unit density"},
      {"klt-pole-0.5", "adapted density with exponent -0.5 (pole at the divisor)"},
      {"klt-zero-0.5", "adapted density with exponent +0.5 (zero at the divisor)"},
      {"indefinite-chi", "class line with a sign-changing direction"},
      {"enveloped-kink", "rough two-cone initial datum, enveloped then smoothed"},
  };
  return v;
}

/// Resolves a named run preset to its spec. The geometry names G1/G2 are not
/// runnable on their own.
inline ExperimentSpec preset_spec(const std::string& name) {
  ExperimentSpec s;
  s.name = name;
  if (name == "flat-anchor") {
    s.N = 64;
    s.steps = 100;
    return s;
  }
  if (name == "constant-data") {
    s.N = 32;
    s.initial = "constant";
    s.level = 0.3;
    s.forcing = "linear";
    s.lambda = 0.1;
    s.steps = 100;
    return s;
  }
  if (name == "linear-forcing") {
    s.N = 64;
    s.density = "sine";
    s.forcing = "linear";
    s.lambda = 0.1;
    s.initial = "sine";
    s.amplitude = 0.05;
    s.steps = 80;
    return s;
  }
  if (name == "sine-data") {
    s.N = 64;
    s.density = "sine";
    s.initial = "sine";
    s.amplitude = 0.1;
    s.steps = 80;
    return s;
  }
  if (name == "big-form") {
    s.geometry = "G2";
    s.N = 64;
    s.steps = 80;
    s.alpha = 0.5;
    return s;
  }
  if (name == "klt-pole-0.5") {
    s.N = 64;
    s.chi = "zero";
    s.exponents = {-0.5};
    s.density = "klt";
    s.steps = 80;
    return s;
  }
  if (name == "klt-zero-0.5") {
    s.N = 64;
    s.chi = "zero";
    s.exponents = {0.5};
    s.density = "klt";
    s.steps = 80;
    return s;
  }
  if (name == "indefinite-chi") {
    s.N = 64;
    s.chi = "indefinite";
    s.T = 1.0;
    s.steps = 80;
    return s;
  }
  if (name == "enveloped-kink") {
    s.N = 64;
    s.chi = "zero";
    s.initial = "kink";
    s.steps = 80;
    return s;
  }
  throw ConfigError("unknown preset '" + name + "' (try list-presets)");
}

/// Names of the runnable presets in stable order.
inline std::vector<std::string> runnable_presets() {
  std::vector<std::string> out;
  for (const auto& p : preset_infos())
    if (p.name != "G1" && p.name != "G2") out.push_back(p.name);
  return out;
}

/// Text listing. machine = one name per line; otherwise names + summaries.
inline std::string preset_listing(bool machine) {
  std::string out;
  for (const auto& p : preset_infos()) {
    if (machine) {
      out += p.name + "\n";
    } else {
      out += p.name;
      out.append(p.name.size() < 16 ? 16 - p.name.size() : 1, ' ');
      out += p.summary + "\n";
    }
  }
  return out;
}

}  // namespace cmaf
