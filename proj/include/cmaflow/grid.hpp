#pragma once

#include <array>
#include <cstdint>
#include <memory>

#include "cmaflow/errors.hpp"

namespace cmaf {

/// Discrete flat complex torus C^n/(Z+iZ)^n, n in {1,2}, sampled on the
/// fundamental domain [0,1)^{2n} with N nodes per real axis.
///
/// Axis layout: axis 2i is the real part x_{i+1} and axis 2i+1 the imaginary
/// part y_{i+1} of the complex coordinate z_{i+1} = x_{i+1} + i*y_{i+1}.
/// Flat node indices are row-major over (x1, y1[, x2, y2]) with the last axis
/// fastest, so `index({c0,..})` = sum_a c_a * stride[a].
struct TorusGrid {
  int n = 0;                           ///< complex dimension, 1 or 2
  int N = 0;                           ///< nodes per real axis (even, >= 8)
  int axes = 0;                        ///< number of real axes, 2n
  std::int64_t count = 0;              ///< total node count N^{2n}
  double h = 0.0;                      ///< grid spacing 1/N
  std::array<std::int64_t, 4> stride{};  ///< flat-index stride per axis

  /// Validates parameters and builds the grid descriptor.
  static std::shared_ptr<const TorusGrid> make(int n, int N) {
    if (n != 1 && n != 2) throw ConfigError("complex dimension must be 1 or 2, got " + std::to_string(n));
    if (N < 8) throw ConfigError("grid resolution must be at least 8, got " + std::to_string(N));
    if (N % 2 != 0) throw ConfigError("grid resolution must be even, got " + std::to_string(N));
    TorusGrid g;
    g.n = n;
    g.N = N;
    g.axes = 2 * n;
    g.h = 1.0 / N;
    g.count = 1;
    for (int a = 0; a < g.axes; ++a) g.count *= N;
    std::int64_t s = 1;
    for (int a = g.axes - 1; a >= 0; --a) {
      g.stride[a] = s;
      s *= N;
    }
    return std::make_shared<const TorusGrid>(g);
  }

  /// Flat index of the node with per-axis coordinates c[0..axes).
  std::int64_t index(const std::array<int, 4>& c) const {
    std::int64_t idx = 0;
    for (int a = 0; a < axes; ++a) idx += static_cast<std::int64_t>(c[a]) * stride[a];
    return idx;
  }

  /// Per-axis coordinates of a flat index.
  std::array<int, 4> coords(std::int64_t idx) const {
    std::array<int, 4> c{};
    for (int a = 0; a < axes; ++a) c[a] = static_cast<int>((idx / stride[a]) % N);
    return c;
  }

  /// Physical coordinate of node position i along any axis.
  double pos(int i) const { return i * h; }

  /// Flat index shifted by +1 along axis a, wrapping periodically.
  /// `ca` is the current coordinate of the node along that axis.
  std::int64_t up(std::int64_t idx, int a, int ca) const {
    return (ca + 1 == N) ? idx - stride[a] * (N - 1) : idx + stride[a];
  }

  /// Flat index shifted by -1 along axis a, wrapping periodically.
  std::int64_t down(std::int64_t idx, int a, int ca) const {
    return (ca == 0) ? idx + stride[a] * (N - 1) : idx - stride[a];
  }

  bool same_layout(const TorusGrid& other) const { return n == other.n && N == other.N; }
};

/// Calls fn(idx, coords) for every node, maintaining coordinates
/// incrementally (row-major order, last axis fastest).
template <class Fn>
inline void for_each_node(const TorusGrid& g, Fn&& fn) {
  std::array<int, 4> c{};
  for (std::int64_t idx = 0; idx < g.count; ++idx) {
    fn(idx, c);
    for (int a = g.axes - 1; a >= 0; --a) {
      if (++c[a] < g.N) break;
      c[a] = 0;
    }
  }
}

}  // namespace cmaf
