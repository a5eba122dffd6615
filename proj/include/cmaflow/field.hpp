#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "cmaflow/grid.hpp"

namespace cmaf {

/// Value stored at pole nodes of a singular potential; such nodes stand for
/// -infinity and are excluded from analysis (see analysis_mask below).
inline constexpr double kPoleSentinel = -1.0e6;

/// Real scalar field on a torus grid. An optional pole mask marks nodes where
/// the field is -infinity (log poles of singular potentials); masked nodes
/// carry the sentinel value and are excluded from sups, infs, integrals and
/// estimate checks.
struct ScalarField {
  std::shared_ptr<const TorusGrid> grid;
  std::vector<double> v;
  std::vector<std::uint8_t> mask;  ///< empty, or one flag per node (1 = pole)

  ScalarField() = default;
  ScalarField(std::shared_ptr<const TorusGrid> g, double fill = 0.0)
      : grid(std::move(g)), v(grid->count, fill) {}

  bool has_mask() const { return !mask.empty(); }
  std::int64_t size() const { return grid ? grid->count : 0; }
  double& operator[](std::int64_t i) { return v[i]; }
  double operator[](std::int64_t i) const { return v[i]; }

  void ensure_mask() {
    if (mask.empty()) mask.assign(v.size(), 0);
  }
};

/// Hermitian n x n coefficient-matrix field (n = grid->n). Storage is packed
/// per entry: the diagonal is real, and for n = 2 the single off-diagonal
/// entry a_{12} is split into real and imaginary parts (a_{21} = conj(a_{12})
/// implicitly). An optional mask mirrors ScalarField pole semantics for
/// fields derived from singular potentials.
struct HermitianField {
  std::shared_ptr<const TorusGrid> grid;
  std::vector<double> a11;
  std::vector<double> a22;   ///< empty when n == 1
  std::vector<double> re12;  ///< empty when n == 1
  std::vector<double> im12;  ///< empty when n == 1
  std::vector<std::uint8_t> mask;

  HermitianField() = default;
  explicit HermitianField(std::shared_ptr<const TorusGrid> g) : grid(std::move(g)) {
    a11.assign(grid->count, 0.0);
    if (grid->n == 2) {
      a22.assign(grid->count, 0.0);
      re12.assign(grid->count, 0.0);
      im12.assign(grid->count, 0.0);
    }
  }

  int n() const { return grid->n; }
  bool has_mask() const { return !mask.empty(); }

  /// Identity-scaled field s * I at every node.
  static HermitianField scaled_identity(std::shared_ptr<const TorusGrid> g, double s) {
    HermitianField f(std::move(g));
    std::fill(f.a11.begin(), f.a11.end(), s);
    if (f.grid->n == 2) std::fill(f.a22.begin(), f.a22.end(), s);
    return f;
  }

  std::complex<double> entry(std::int64_t idx, int i, int j) const {
    if (i == j) return {i == 0 ? a11[idx] : a22[idx], 0.0};
    if (i == 0) return {re12[idx], im12[idx]};
    return {re12[idx], -im12[idx]};
  }
};

/// Nodewise Hermitian matrix value, the working currency of kernels.
/// For n = 1 only `a` is meaningful; for n = 2 the matrix is
/// [[a, re12 + i*im12], [re12 - i*im12, b]].
struct HermValue {
  double a = 0.0, b = 0.0, re12 = 0.0, im12 = 0.0;

  double trace(int n) const { return n == 1 ? a : a + b; }
  double det(int n) const { return n == 1 ? a : a * b - (re12 * re12 + im12 * im12); }
  double min_eig(int n) const {
    if (n == 1) return a;
    const double m = 0.5 * (a + b);
    const double d = det(2);
    const double disc = std::max(0.0, m * m - d);
    return m - std::sqrt(disc);
  }
  double max_eig(int n) const {
    if (n == 1) return a;
    const double m = 0.5 * (a + b);
    const double d = det(2);
    const double disc = std::max(0.0, m * m - d);
    return m + std::sqrt(disc);
  }
  /// tr(this^{-1} * B); requires det != 0.
  double tr_inv_times(int n, const HermValue& B) const {
    if (n == 1) return B.a / a;
    const double d = det(2);
    return (b * B.a + a * B.b - 2.0 * (re12 * B.re12 + im12 * B.im12)) / d;
  }
  /// Frobenius norm of the matrix.
  double frob(int n) const {
    if (n == 1) return std::abs(a);
    return std::sqrt(a * a + b * b + 2.0 * (re12 * re12 + im12 * im12));
  }
  HermValue plus(int n, const HermValue& o) const {
    return {a + o.a, n == 1 ? 0.0 : b + o.b, re12 + o.re12, im12 + o.im12};
  }
  HermValue scaled(double s) const { return {a * s, b * s, re12 * s, im12 * s}; }
};

inline HermValue herm_at(const HermitianField& f, std::int64_t idx) {
  if (f.grid->n == 1) return {f.a11[idx], 0.0, 0.0, 0.0};
  return {f.a11[idx], f.a22[idx], f.re12[idx], f.im12[idx]};
}

inline void herm_set(HermitianField& f, std::int64_t idx, const HermValue& m) {
  f.a11[idx] = m.a;
  if (f.grid->n == 2) {
    f.a22[idx] = m.b;
    f.re12[idx] = m.re12;
    f.im12[idx] = m.im12;
  }
}

/// Nodes whose Hessian stencil reads at least one masked node, including the
/// masked nodes themselves. Second differences read +-1 along single axes and
/// cross differences read (+-1, +-1) along axis pairs from different complex
/// dimensions, so the halo is the Chebyshev-1 neighborhood restricted to
/// those reach patterns; dilating by the full Chebyshev ball of radius 1 is a
/// superset only through pairs within one complex dimension, which no stencil
/// uses. We dilate exactly along the stencil's reach.
inline std::vector<std::uint8_t> stencil_halo(const TorusGrid& g, const std::vector<std::uint8_t>& mask) {
  std::vector<std::uint8_t> out(mask);
  if (mask.empty()) return out;
  for_each_node(g, [&](std::int64_t idx, const std::array<int, 4>& c) {
    if (!mask[idx]) return;
    // single-axis reads
    for (int a = 0; a < g.axes; ++a) {
      out[g.up(idx, a, c[a])] = 1;
      out[g.down(idx, a, c[a])] = 1;
    }
    // cross reads: axes of different complex dimensions only
    if (g.n == 2) {
      for (int a = 0; a < 2; ++a) {
        for (int b = 2; b < 4; ++b) {
          const std::int64_t pa = g.up(idx, a, c[a]), ma = g.down(idx, a, c[a]);
          const auto cpa = g.coords(pa), cma = g.coords(ma);
          out[g.up(pa, b, cpa[b])] = 1;
          out[g.down(pa, b, cpa[b])] = 1;
          out[g.up(ma, b, cma[b])] = 1;
          out[g.down(ma, b, cma[b])] = 1;
        }
      }
    }
  });
  return out;
}

/// Mask of nodes excluded from analysis (sups, infs, estimate checks): the
/// pole nodes plus their stencil halo. Empty when the field has no mask.
inline std::vector<std::uint8_t> analysis_mask(const ScalarField& f) {
  if (!f.has_mask()) return {};
  return stencil_halo(*f.grid, f.mask);
}

/// Union of two optional masks (either may be empty).
inline std::vector<std::uint8_t> mask_union(const std::vector<std::uint8_t>& a,
                                            const std::vector<std::uint8_t>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  std::vector<std::uint8_t> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] | b[i];
  return out;
}

namespace detail {
inline bool excluded(const std::vector<std::uint8_t>& m, std::int64_t i) {
  return !m.empty() && m[i] != 0;
}
}  // namespace detail

/// Supremum over analysis nodes (pole halo excluded).
inline double field_sup(const ScalarField& f) {
  const auto m = analysis_mask(f);
  double s = -std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < f.size(); ++i)
    if (!detail::excluded(m, i)) s = std::max(s, f.v[i]);
  return s;
}

/// Infimum over analysis nodes (pole halo excluded).
inline double field_inf(const ScalarField& f) {
  const auto m = analysis_mask(f);
  double s = std::numeric_limits<double>::infinity();
  for (std::int64_t i = 0; i < f.size(); ++i)
    if (!detail::excluded(m, i)) s = std::min(s, f.v[i]);
  return s;
}

inline double field_sup_abs(const ScalarField& f) {
  return std::max(std::abs(field_sup(f)), std::abs(field_inf(f)));
}

/// Discrete integral against the cell measure h^{2n} (unit total volume);
/// masked nodes contribute nothing.
inline double integrate(const ScalarField& f) {
  const auto m = analysis_mask(f);
  double s = 0.0;
  for (std::int64_t i = 0; i < f.size(); ++i)
    if (!detail::excluded(m, i)) s += f.v[i];
  double w = 1.0;
  for (int a = 0; a < f.grid->axes; ++a) w *= f.grid->h;
  return s * w;
}

/// Mean over analysis nodes.
inline double field_mean(const ScalarField& f) {
  const auto m = analysis_mask(f);
  double s = 0.0;
  std::int64_t cnt = 0;
  for (std::int64_t i = 0; i < f.size(); ++i)
    if (!detail::excluded(m, i)) {
      s += f.v[i];
      ++cnt;
    }
  return cnt ? s / cnt : 0.0;
}

/// Discrete L^p norm (p >= 1) against the cell measure.
inline double lp_norm(const ScalarField& f, double p) {
  const auto m = analysis_mask(f);
  double s = 0.0;
  for (std::int64_t i = 0; i < f.size(); ++i)
    if (!detail::excluded(m, i)) s += std::pow(std::abs(f.v[i]), p);
  double w = 1.0;
  for (int a = 0; a < f.grid->axes; ++a) w *= f.grid->h;
  return std::pow(s * w, 1.0 / p);
}

/// Builds a field by evaluating fn(coords scaled to [0,1)^{2n}).
inline ScalarField make_field(std::shared_ptr<const TorusGrid> g,
                              const std::function<double(const std::array<double, 4>&)>& fn) {
  ScalarField f(g);
  for_each_node(*g, [&](std::int64_t idx, const std::array<int, 4>& c) {
    std::array<double, 4> x{};
    for (int a = 0; a < g->axes; ++a) x[a] = g->pos(c[a]);
    f.v[idx] = fn(x);
  });
  return f;
}

}  // namespace cmaf
