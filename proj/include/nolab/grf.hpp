#pragma once

// Stationary Gaussian random fields with the Whittle-Matern covariance,
// sampled by circulant embedding on the doubled torus, plus the affine link
// from field samples to wave-speed grids and the out-of-distribution family
// table used by the evaluation protocol.

#include <cmath>
#include <complex>
#include <cstdint>
#include <iostream>
#include <string>
#include <vector>

#include "nolab/errors.hpp"
#include "nolab/rng.hpp"
#include "nolab/tensor.hpp"

namespace nolab::grf {

struct MaternParams {
  double s = 1.0;        // marginal standard deviation, C(0) = s^2
  double nu = 1.0;       // smoothness
  double a_scale = 1.0;  // residual range factor applied after the per-axis lambdas
  double lambda1 = 0.1;  // correlation length along x (km)
  double lambda2 = 0.1;  // correlation length along y (km)

  void validate() const {
    if (!(s > 0.0) || !(nu > 0.0) || !(a_scale > 0.0) || !(lambda1 > 0.0) || !(lambda2 > 0.0))
      throw ConfigError("MaternParams: all parameters must be positive");
  }
};

// Anisotropy enters through the scaled distance, each coordinate difference
// divided by its correlation length.
inline double aniso_distance(double dx, double dy, double lambda1, double lambda2) {
  const double u = dx / lambda1, v = dy / lambda2;
  return std::sqrt(u * u + v * v);
}

// C(r) = s^2 * 2^(1-nu)/Gamma(nu) * (sqrt(2 nu) r / a)^nu * K_nu(sqrt(2 nu) r / a).
// The r -> 0 limit is s^2 exactly.
inline double matern_cov(double r, const MaternParams& p) {
  p.validate();
  if (r < 0.0) throw ConfigError("matern_cov: negative distance");
  if (r == 0.0) return p.s * p.s;
  const double z = std::sqrt(2.0 * p.nu) * r / p.a_scale;
  // Guard the far tail where K_nu underflows to 0 and the prefactor overflows.
  if (z > 700.0) return 0.0;
  const double k = std::cyl_bessel_k(p.nu, z);
  const double pref = std::pow(2.0, 1.0 - p.nu) / std::tgamma(p.nu);
  return p.s * p.s * pref * std::pow(z, p.nu) * k;
}

// Precomputed circulant-embedding spectrum for one (covariance, grid) pairing.
struct Sampler {
  MaternParams params;
  int H = 0, W = 0;       // target grid (rows = y, cols = x)
  double Lx = 0.0, Ly = 0.0;
  std::vector<double> sqrt_eig;  // (2H, 2W), sqrt of clamped eigenvalues
  double clamped_fraction = 0.0;
};

// Builds the doubled-torus covariance, takes its FFT, clamps negative
// eigenvalues to zero, and warns on stderr if the clamped mass exceeds 5%.
inline Sampler build_sampler(const MaternParams& p, double Lx, double Ly, int H, int W) {
  p.validate();
  if (H <= 0 || W <= 0 || !ad::is_pow2(H) || !ad::is_pow2(W))
    throw ConfigError("build_sampler: grid extents must be positive powers of two");
  if (!(Lx > 0.0) || !(Ly > 0.0)) throw ConfigError("build_sampler: domain extents must be positive");

  Sampler smp;
  smp.params = p;
  smp.H = H;
  smp.W = W;
  smp.Lx = Lx;
  smp.Ly = Ly;

  const int H2 = 2 * H, W2 = 2 * W;
  const double hx = Lx / W, hy = Ly / H;
  std::vector<std::complex<double>> cov(static_cast<size_t>(H2) * W2);
  for (int i = 0; i < H2; ++i) {
    const int di = i <= H ? i : H2 - i;  // wrapped displacement on the doubled torus
    for (int j = 0; j < W2; ++j) {
      const int dj = j <= W ? j : W2 - j;
      const double r = aniso_distance(dj * hx, di * hy, p.lambda1, p.lambda2);
      cov[static_cast<size_t>(i) * W2 + j] = matern_cov(r, p);
    }
  }
  ad::detail::fft2_batch(cov.data(), 1, H2, W2, 1, false);

  smp.sqrt_eig.resize(cov.size());
  double neg_mass = 0.0, tot_mass = 0.0;
  for (size_t i = 0; i < cov.size(); ++i) {
    const double ev = cov[i].real();
    tot_mass += std::fabs(ev);
    if (ev < 0.0) {
      neg_mass += -ev;
      smp.sqrt_eig[i] = 0.0;
    } else {
      smp.sqrt_eig[i] = std::sqrt(ev);
    }
  }
  smp.clamped_fraction = tot_mass > 0.0 ? neg_mass / tot_mass : 0.0;
  if (smp.clamped_fraction > 0.05)
    std::cerr << "warning: circulant embedding clamped " << smp.clamped_fraction * 100.0
              << "% of spectral mass; samples are approximate\n";
  return smp;
}

// One zero-mean stationary sample on the H x W grid. Bit-exact for a given
// seed: normals are drawn in fixed row-major order, real then imaginary.
inline std::vector<float> sample_field(const Sampler& smp, uint64_t seed) {
  const int H2 = 2 * smp.H, W2 = 2 * smp.W;
  const size_t M = static_cast<size_t>(H2) * W2;
  rng::Prng g(seed);
  std::vector<std::complex<double>> xi(M);
  for (size_t i = 0; i < M; ++i) {
    const double a = g.normal();
    const double b = g.normal();
    xi[i] = std::complex<double>(a * smp.sqrt_eig[i], b * smp.sqrt_eig[i]);
  }
  // y = F^H (sqrt(eig) xi) / sqrt(M); real part has the target covariance.
  ad::detail::fft2_batch(xi.data(), 1, H2, W2, 1, true);
  const double scale = 1.0 / std::sqrt(static_cast<double>(M));
  std::vector<float> out(static_cast<size_t>(smp.H) * smp.W);
  for (int i = 0; i < smp.H; ++i)
    for (int j = 0; j < smp.W; ++j)
      out[static_cast<size_t>(i) * smp.W + j] =
          static_cast<float>(xi[static_cast<size_t>(i) * W2 + j].real() * scale);
  return out;
}

struct WaveSpeedSample {
  std::vector<float> grid;  // (H, W) km/s
  int H = 0, W = 0;
  double c_min = 0.0, c_max = 0.0;
  MaternParams provenance;
  uint64_t seed = 0;
};

// Per-sample min-max affine link onto [c_min, c_max]; a constant field maps to
// the midpoint. Extremes attain the endpoints exactly.
inline WaveSpeedSample link_to_wavespeed(const std::vector<float>& field, int H, int W,
                                         double c_min, double c_max, const MaternParams& prov,
                                         uint64_t seed) {
  if (!(c_max > c_min)) throw ConfigError("link_to_wavespeed: need c_max > c_min");
  if (field.size() != static_cast<size_t>(H) * W) throw ConfigError("link_to_wavespeed: size mismatch");
  WaveSpeedSample ws;
  ws.H = H;
  ws.W = W;
  ws.c_min = c_min;
  ws.c_max = c_max;
  ws.provenance = prov;
  ws.seed = seed;
  ws.grid.resize(field.size());
  float lo = field[0], hi = field[0];
  for (float v : field) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  if (hi - lo < 1e-12f) {
    const float mid = static_cast<float>(0.5 * (c_min + c_max));
    for (auto& v : ws.grid) v = mid;
    return ws;
  }
  const double scale = (c_max - c_min) / (static_cast<double>(hi) - lo);
  for (size_t i = 0; i < field.size(); ++i)
    ws.grid[i] = static_cast<float>(c_min + (static_cast<double>(field[i]) - lo) * scale);
  return ws;
}

// Out-of-distribution family table: correlation lengths, wave-speed range and
// smoothness per family; id 0 is the in-distribution baseline.
struct OodFamilySpec {
  int id = 0;
  double lambda1 = 0.1, lambda2 = 0.1;
  double c_min = 1.5, c_max = 5.0;
  double nu = 1.0;
};

inline std::vector<OodFamilySpec> ood_family_table() {
  return {
      {0, 0.10, 0.10, 1.5, 5.0, 1.0},
      {1, 0.20, 0.20, 1.5, 5.0, 1.0},
      {2, 0.10, 0.20, 1.5, 5.0, 1.0},
      {3, 0.20, 0.20, 2.0, 3.5, 1.0},
      {4, 0.10, 0.20, 2.0, 3.5, 1.0},
      {5, 0.10, 0.30, 2.0, 6.0, 1.0},
      {6, 0.25, 0.75, 2.0, 6.0, 1.0},
      {7, 0.10, 0.10, 1.5, 5.0, 0.5},
      {8, 0.10, 0.10, 1.5, 5.0, 3.5},
      {9, 0.25, 0.75, 2.0, 6.0, 0.5},
      {10, 0.25, 0.75, 2.0, 6.0, 3.5},
  };
}

// Draws n wave-speed samples from one family. Per-sample seeds derive from the
// master seed so sample i is independent of n.
inline std::vector<WaveSpeedSample> gen_ood_family(const OodFamilySpec& fam, int n,
                                                   uint64_t master_seed, double Lx, double Ly,
                                                   int H, int W, double s = 1.0,
                                                   double a_scale = 1.0) {
  MaternParams p;
  p.s = s;
  p.a_scale = a_scale;
  p.nu = fam.nu;
  p.lambda1 = fam.lambda1;
  p.lambda2 = fam.lambda2;
  Sampler smp = build_sampler(p, Lx, Ly, H, W);
  std::vector<WaveSpeedSample> out;
  out.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const uint64_t seed = rng::derive_seed(master_seed, static_cast<uint64_t>(i));
    out.push_back(link_to_wavespeed(sample_field(smp, seed), H, W, fam.c_min, fam.c_max, p, seed));
  }
  return out;
}

}  // namespace nolab::grf
