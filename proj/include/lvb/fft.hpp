#pragma once
// Spectral transforms on the M x M periodic grid of a torus lattice.
//
// Grid convention used across the library: samples sit at
// x_{ab} = (a/M) e1 + (b/M) e2 with a, b = 0..M-1 (duplicated edges excluded),
// stored row-major as index a*M + b, and quadrature weights are 1/M^2. On that
// grid the plane wave e^{2 pi i (k1 f1 + k2 f2)} in fractional coordinates is
// an exact eigenfunction of the spectral Laplacian with eigenvalue
// -|2 pi (k1 d1 + k2 d2)|^2, where d1, d2 is the dual basis.

#include <fftw3.h>

#include <cstddef>
#include <vector>

#include "lvb/core.hpp"

namespace lvb {

// Signed DFT mode for array index j on an M-point grid.
inline int dft_mode(int j, int M) { return 2 * j < M ? j : j - M; }

class Fft2 {
 public:
  Fft2(const TorusDomain& dom, int M) : M_(M) {
    if (M < 2) throw config_error("fft grid must have at least 2 points per side");
    std::size_t mm = std::size_t(M) * std::size_t(M);
    buf_ = fftw_alloc_complex(mm);
    if (buf_ == nullptr) throw numeric_error("fft buffer allocation failed");
    plan_fwd_ = fftw_plan_dft_2d(M, M, buf_, buf_, FFTW_FORWARD, FFTW_ESTIMATE);
    plan_bwd_ = fftw_plan_dft_2d(M, M, buf_, buf_, FFTW_BACKWARD, FFTW_ESTIMATE);
    q2_.resize(mm);
    for (int a = 0; a < M; ++a) {
      for (int b = 0; b < M; ++b) {
        Vec2 q = 2.0 * pi * (double(dft_mode(a, M)) * dom.d1 + double(dft_mode(b, M)) * dom.d2);
        q2_[std::size_t(a) * M + b] = norm2(q);
      }
    }
  }

  Fft2(const Fft2&) = delete;
  Fft2& operator=(const Fft2&) = delete;

  ~Fft2() {
    fftw_destroy_plan(plan_fwd_);
    fftw_destroy_plan(plan_bwd_);
    fftw_free(buf_);
  }

  int size() const { return M_; }

  // out = -Delta u, spectral. Exact on plane waves below the Nyquist mode.
  void neg_laplacian(const std::vector<double>& u, std::vector<double>& out) {
    load(u);
    fftw_execute(plan_fwd_);
    std::size_t mm = std::size_t(M_) * M_;
    for (std::size_t k = 0; k < mm; ++k) {
      buf_[k][0] *= q2_[k];
      buf_[k][1] *= q2_[k];
    }
    fftw_execute(plan_bwd_);
    store(out);
  }

  // out = (-Delta + shift)^{-1} r. With shift == 0 the mean mode is projected
  // out instead of inverted, so the result has zero grid mean.
  void solve_shifted(const std::vector<double>& r, double shift, std::vector<double>& out) {
    if (shift < 0.0) throw config_error("solve_shifted requires shift >= 0");
    load(r);
    fftw_execute(plan_fwd_);
    std::size_t mm = std::size_t(M_) * M_;
    for (std::size_t k = 0; k < mm; ++k) {
      double den = q2_[k] + shift;
      double w = den > 0.0 ? 1.0 / den : 0.0;
      buf_[k][0] *= w;
      buf_[k][1] *= w;
    }
    fftw_execute(plan_bwd_);
    store(out);
  }

 private:
  void load(const std::vector<double>& u) {
    std::size_t mm = std::size_t(M_) * M_;
    if (u.size() != mm) throw config_error("fft input size mismatch");
    for (std::size_t k = 0; k < mm; ++k) {
      buf_[k][0] = u[k];
      buf_[k][1] = 0.0;
    }
  }

  // FFTW's backward transform is unnormalized; fold in the 1/M^2 here.
  void store(std::vector<double>& out) {
    std::size_t mm = std::size_t(M_) * M_;
    out.resize(mm);
    double s = 1.0 / double(mm);
    for (std::size_t k = 0; k < mm; ++k) out[k] = buf_[k][0] * s;
  }

  int M_;
  std::vector<double> q2_;
  fftw_complex* buf_ = nullptr;
  fftw_plan plan_fwd_ = nullptr;
  fftw_plan plan_bwd_ = nullptr;
};

}  // namespace lvb
