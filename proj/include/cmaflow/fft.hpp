#pragma once

#include <complex>
#include <memory>
#include <mutex>
#include <vector>

#include <fftw3.h>

#include "cmaflow/field.hpp"
#include "cmaflow/grid.hpp"

namespace cmaf {

namespace detail {
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Constant-coefficient spectral solves on the periodic grid. Used as the
/// Newton preconditioner (shifted flat Laplacian inverse), for exact Poisson
/// solves in feasibility constructions, and for periodic Gaussian mollifying.
///
/// The discrete complex Laplacian here is L = (1/4) * (sum of centered second
/// differences over all 2n real axes), i.e. the trace of the complex Hessian
/// against the identity metric; its Fourier symbol on mode k is
///   lambda(k) = -(1/h^2) * sum_a sin^2(pi k_a / N).
///
/// Instances own their FFTW plans and buffers; distinct instances may be used
/// concurrently (plan creation is serialized globally as FFTW requires).
class SpectralSolver {
 public:
  explicit SpectralSolver(std::shared_ptr<const TorusGrid> grid) : grid_(std::move(grid)) {
    // FFTW-aligned buffer: a fixed alignment pins the kernel selection, so
    // transform results are bitwise reproducible across processes.
    buf_ = reinterpret_cast<std::complex<double>*>(
        fftw_alloc_complex(static_cast<std::size_t>(grid_->count)));
    if (buf_ == nullptr) throw SolverError("spectral buffer allocation failed");
    int dims[4];
    for (int a = 0; a < grid_->axes; ++a) dims[a] = grid_->N;
    std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
    fwd_ = fftw_plan_dft(grid_->axes, dims, reinterpret_cast<fftw_complex*>(buf_),
                         reinterpret_cast<fftw_complex*>(buf_), FFTW_FORWARD, FFTW_ESTIMATE);
    bwd_ = fftw_plan_dft(grid_->axes, dims, reinterpret_cast<fftw_complex*>(buf_),
                         reinterpret_cast<fftw_complex*>(buf_), FFTW_BACKWARD, FFTW_ESTIMATE);
    // Per-axis symbol table sin^2(pi k / N) / h^2.
    axis_sym_.resize(grid_->N);
    for (int k = 0; k < grid_->N; ++k) {
      const double s = std::sin(M_PI * static_cast<double>(k) / grid_->N);
      axis_sym_[k] = s * s / (grid_->h * grid_->h);
    }
  }

  ~SpectralSolver() {
    {
      std::lock_guard<std::mutex> lock(detail::fftw_plan_mutex());
      fftw_destroy_plan(fwd_);
      fftw_destroy_plan(bwd_);
    }
    fftw_free(buf_);
  }

  SpectralSolver(const SpectralSolver&) = delete;
  SpectralSolver& operator=(const SpectralSolver&) = delete;

  const TorusGrid& grid() const { return *grid_; }

  /// Solves (coef * L - sigma) u = rhs. With sigma == 0 the operator is
  /// singular on constants: the right-hand side is projected to mean zero and
  /// the solution returned with mean zero.
  void solve_shifted_laplacian(double coef, double sigma, const std::vector<double>& rhs,
                               std::vector<double>& out) {
    load(rhs);
    fftw_execute(fwd_);
    const double scale = 1.0 / static_cast<double>(grid_->count);
    apply_symbol([&](double lam) { return coef * lam - sigma; }, sigma == 0.0, scale);
    fftw_execute(bwd_);
    store(out);
  }

  /// Applies the forward operator coef * L - sigma spectrally (exact for the
  /// centered stencil); mainly a testing aid.
  void apply_shifted_laplacian(double coef, double sigma, const std::vector<double>& rhs,
                               std::vector<double>& out) {
    load(rhs);
    fftw_execute(fwd_);
    const double scale = 1.0 / static_cast<double>(grid_->count);
    std::array<int, 4> c{};
    for (std::int64_t i = 0; i < grid_->count; ++i) {
      // axis_sym already carries the quarter of each axis second difference.
      double lam = 0.0;
      for (int a = 0; a < grid_->axes; ++a) lam -= axis_sym_[c[a]];
      buf_[i] *= (coef * lam - sigma) * scale;
      advance(c);
    }
    fftw_execute(bwd_);
    store(out);
  }

  /// Periodic Gaussian blur of the given width (standard deviation in torus
  /// units); width == 0 is the identity.
  ScalarField gaussian_blur(const ScalarField& f, double width) {
    ScalarField out = f;
    if (width <= 0.0) return out;
    load(f.v);
    fftw_execute(fwd_);
    const double scale = 1.0 / static_cast<double>(grid_->count);
    std::array<int, 4> c{};
    for (std::int64_t i = 0; i < grid_->count; ++i) {
      double k2 = 0.0;
      for (int a = 0; a < grid_->axes; ++a) {
        const int k = c[a] <= grid_->N / 2 ? c[a] : grid_->N - c[a];
        k2 += static_cast<double>(k) * k;
      }
      buf_[i] *= std::exp(-2.0 * M_PI * M_PI * width * width * k2) * scale;
      advance(c);
    }
    fftw_execute(bwd_);
    store(out.v);
    return out;
  }

 private:
  void load(const std::vector<double>& src) {
    for (std::int64_t i = 0; i < grid_->count; ++i) buf_[i] = {src[i], 0.0};
  }
  void store(std::vector<double>& dst) {
    dst.resize(grid_->count);
    for (std::int64_t i = 0; i < grid_->count; ++i) dst[i] = buf_[i].real();
  }
  void advance(std::array<int, 4>& c) {
    for (int a = grid_->axes - 1; a >= 0; --a) {
      if (++c[a] < grid_->N) break;
      c[a] = 0;
    }
  }
  template <class SymFn>
  void apply_symbol(SymFn&& sym, bool zero_mean_mode, double scale) {
    std::array<int, 4> c{};
    for (std::int64_t i = 0; i < grid_->count; ++i) {
      // axis_sym already carries the quarter of each axis second difference.
      double lam = 0.0;
      for (int a = 0; a < grid_->axes; ++a) lam -= axis_sym_[c[a]];
      if (i == 0 && zero_mean_mode) {
        buf_[i] = {0.0, 0.0};
      } else {
        buf_[i] *= scale / sym(lam);
      }
      advance(c);
    }
  }

  std::shared_ptr<const TorusGrid> grid_;
  std::complex<double>* buf_ = nullptr;  // fftw_alloc_complex owned
  std::vector<double> axis_sym_;
  fftw_plan fwd_, bwd_;
};

}  // namespace cmaf
