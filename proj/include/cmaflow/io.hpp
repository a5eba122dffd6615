#pragma once

#include <algorithm>
#include <bit>
#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "cmaflow/errors.hpp"
#include "cmaflow/estimates.hpp"
#include "cmaflow/field.hpp"
#include "cmaflow/flow.hpp"
#include "cmaflow/grid.hpp"

namespace cmaf {

/// 64-bit FNV-1a content digest.
inline std::uint64_t fnv1a(const void* data, std::size_t len,
                           std::uint64_t h = 14695981039346656037ull) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t file_digest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path + " for digesting");
  std::uint64_t h = 14695981039346656037ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    h = fnv1a(buf, static_cast<std::size_t>(in.gcount()), h);
  return h;
}

/// One double rendered with 17 significant digits (round-trip exact).
inline std::string csv17(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
inline void put_f64(std::string& out, double x) {
  const std::uint64_t v = std::bit_cast<std::uint64_t>(x);
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
inline std::uint32_t get_u32(const std::string& s, std::size_t& pos) {
  if (pos + 4 > s.size()) throw IoError("snapshot file truncated");
  std::uint32_t v = 0;
  for (int k = 0; k < 4; ++k)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[pos + k])) << (8 * k);
  pos += 4;
  return v;
}
inline double get_f64(const std::string& s, std::size_t& pos) {
  if (pos + 8 > s.size()) throw IoError("snapshot file truncated");
  std::uint64_t v = 0;
  for (int k = 0; k < 8; ++k)
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s[pos + k])) << (8 * k);
  pos += 8;
  return std::bit_cast<double>(v);
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return s;
}

}  // namespace detail

/// In-memory form of a snapshot file: a time-indexed stack of node fields.
/// version 1 = plain trajectory, 2 = class-line trajectory.
struct SnapshotFile {
  std::uint32_t version = 1;
  std::uint32_t n = 1;
  std::uint32_t N = 0;
  std::vector<double> times;
  std::vector<std::vector<double>> values;  ///< row-major node values per time
};

/// Little-endian layout: "CMAF" | u32 version | u32 n | u32 N | u32 count |
/// then per snapshot: f64 t | count * f64 values (row-major, last axis
/// fastest).
inline void write_snapshots(const std::string& path, const SnapshotFile& sf) {
  std::string out;
  out += "CMAF";
  detail::put_u32(out, sf.version);
  detail::put_u32(out, sf.n);
  detail::put_u32(out, sf.N);
  detail::put_u32(out, static_cast<std::uint32_t>(sf.times.size()));
  for (std::size_t k = 0; k < sf.times.size(); ++k) {
    detail::put_f64(out, sf.times[k]);
    for (double x : sf.values[k]) detail::put_f64(out, x);
  }
  detail::write_file(path, out);
}

inline void write_snapshots(const std::string& path, const FlowTrajectory& traj,
                            std::uint32_t version = 1) {
  SnapshotFile sf;
  sf.version = version;
  sf.n = static_cast<std::uint32_t>(traj.grid->n);
  sf.N = static_cast<std::uint32_t>(traj.grid->N);
  sf.times = traj.times;
  sf.values.reserve(traj.size());
  for (const auto& s : traj.snapshots) sf.values.push_back(s.v);
  write_snapshots(path, sf);
}

inline SnapshotFile read_snapshots(const std::string& path) {
  const std::string s = detail::read_file(path);
  if (s.size() < 20 || s.compare(0, 4, "CMAF") != 0)
    throw IoError(path + " is not a snapshot file (bad magic)");
  std::size_t pos = 4;
  SnapshotFile sf;
  sf.version = detail::get_u32(s, pos);
  if (sf.version != 1 && sf.version != 2)
    throw IoError(path + ": unsupported snapshot version " + std::to_string(sf.version));
  sf.n = detail::get_u32(s, pos);
  sf.N = detail::get_u32(s, pos);
  const std::uint32_t count = detail::get_u32(s, pos);
  if (sf.n != 1 && sf.n != 2) throw IoError(path + ": invalid dimension field");
  if (sf.N < 2 || sf.N % 2 != 0) throw IoError(path + ": invalid resolution field");
  std::int64_t nodes = 1;
  for (std::uint32_t a = 0; a < 2 * sf.n; ++a) nodes *= sf.N;
  for (std::uint32_t k = 0; k < count; ++k) {
    sf.times.push_back(detail::get_f64(s, pos));
    std::vector<double> v(static_cast<std::size_t>(nodes));
    for (auto& x : v) x = detail::get_f64(s, pos);
    sf.values.push_back(std::move(v));
  }
  if (pos != s.size()) throw IoError(path + ": trailing bytes after snapshot payload");
  return sf;
}

/// CSV of a scalar field: node coordinates then the value.
inline void write_field_csv(const std::string& path, const ScalarField& f) {
  std::string out = "x1,y1";
  if (f.grid->n == 2) out += ",x2,y2";
  out += ",value\n";
  for_each_node(*f.grid, [&](std::int64_t idx, const std::array<int, 4>& c) {
    out += csv17(f.grid->pos(c[0])) + "," + csv17(f.grid->pos(c[1]));
    if (f.grid->n == 2) out += "," + csv17(f.grid->pos(c[2])) + "," + csv17(f.grid->pos(c[3]));
    out += "," + csv17(f.v[idx]) + "\n";
  });
  detail::write_file(path, out);
}

/// CSV time series of a trajectory: t, min/max of the potential, max/min of
/// the backward velocity, and the t^2-weighted acceleration cap. Velocity
/// entries are 0 at the first stored time and acceleration entries are 0 at
/// the boundary times where the centered difference is undefined.
inline void write_series_csv(const std::string& path, const FlowTrajectory& traj) {
  std::string out = "t,min_phi,max_phi,max_phidot,min_phidot,max_t2_phiddot\n";
  for (std::size_t k = 0; k < traj.size(); ++k) {
    double dmax = 0.0, dmin = 0.0, acc = 0.0;
    if (k >= 1) {
      const ScalarField d = traj.phi_dot(k);
      dmax = field_sup(d);
      dmin = field_inf(d);
    }
    if (k >= 1 && k + 1 < traj.size()) {
      const ScalarField a = traj.phi_ddot(k);
      acc = traj.times[k] * traj.times[k] * field_sup(a);
    }
    out += csv17(traj.times[k]) + "," + csv17(field_inf(traj.snapshots[k])) + "," +
           csv17(field_sup(traj.snapshots[k])) + "," + csv17(dmax) + "," + csv17(dmin) + "," +
           csv17(acc) + "\n";
  }
  detail::write_file(path, out);
}

/// Structured text report: one record per line.
inline void write_report_text(const std::string& path, const EstimateReport& rep) {
  std::string out;
  for (const auto& r : rep.records) {
    out += (r.pass ? "PASS " : "FAIL ") + r.name + " | " + r.anchor +
           " | measured=" + csv17(r.measured) + " bound=" + csv17(r.bound) + " (" +
           r.bound_kind + ") margin=" + csv17(r.margin);
    if (!r.details.empty()) out += " | " + r.details;
    out += "\n";
  }
  detail::write_file(path, out);
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

inline void write_report_csv(const std::string& path, const EstimateReport& rep) {
  std::string out = "name,anchor,measured,bound,bound_kind,margin,verdict,details\n";
  for (const auto& r : rep.records) {
    out += csv_escape(r.name) + "," + csv_escape(r.anchor) + "," + csv17(r.measured) + "," +
           csv17(r.bound) + "," + csv_escape(r.bound_kind) + "," + csv17(r.margin) + "," +
           (r.pass ? "pass" : "fail") + "," + csv_escape(r.details) + "\n";
  }
  detail::write_file(path, out);
}

/// Per-time sup and L1 distances between two snapshot stacks on [eps, T].
/// Grids must agree; times are matched exactly (same schedule) or by the
/// intersection of stored times within 1e-12.
inline std::string compare_snapshots_csv(const SnapshotFile& a, const SnapshotFile& b,
                                         double eps) {
  if (a.n != b.n || a.N != b.N)
    throw ConfigError("snapshot stacks live on different grids (" + std::to_string(a.n) + "/" +
                      std::to_string(a.N) + " vs " + std::to_string(b.n) + "/" +
                      std::to_string(b.N) + ")");
  const double cell = [&] {
    double w = 1.0;
    for (std::uint32_t ax = 0; ax < 2 * a.n; ++ax) w /= static_cast<double>(a.N);
    return w;
  }();
  std::string out = "t,sup_distance,l1_distance\n";
  std::size_t jb = 0;
  for (std::size_t ja = 0; ja < a.times.size(); ++ja) {
    while (jb < b.times.size() && b.times[jb] < a.times[ja] - 1e-12) ++jb;
    if (jb >= b.times.size()) break;
    if (std::abs(b.times[jb] - a.times[ja]) > 1e-12) continue;
    if (a.times[ja] < eps - 1e-15) continue;
    double sup = 0.0, l1 = 0.0;
    for (std::size_t i = 0; i < a.values[ja].size(); ++i) {
      const double d = std::abs(a.values[ja][i] - b.values[jb][i]);
      sup = std::max(sup, d);
      l1 += d;
    }
    out += csv17(a.times[ja]) + "," + csv17(sup) + "," + csv17(l1 * cell) + "\n";
  }
  return out;
}

/// Output manifest: produced files with sizes and content digests, plus the
/// run seed. The timestamp line is informational and excluded from digests.
struct ManifestEntry {
  std::string name;
  std::uint64_t bytes = 0;
  std::uint64_t digest = 0;
};

inline void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries,
                           std::uint64_t seed, const std::string& timestamp) {
  std::string out = "# produced files: name bytes fnv1a64\n";
  for (const auto& e : entries) {
    char line[512];
    std::snprintf(line, sizeof line, "%s %" PRIu64 " %016" PRIx64 "\n", e.name.c_str(), e.bytes,
                  e.digest);
    out += line;
  }
  out += "seed " + std::to_string(seed) + "\n";
  out += "timestamp " + timestamp + "\n";
  detail::write_file(path, out);
}

}  // namespace cmaf
