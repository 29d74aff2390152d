#pragma once
// Closed-form bound calculators: Rademacher complexities for the additive
// and multiplicative operator classes, the matching generalization error
// bounds, Lipschitz constants, the Bernoulli-expectation bound for gated
// depth, the OOD risk bound with small-ball psi inversion, and empirical
// estimation of the constants from a trained model and a dataset.
//
// Conventions baked in (also spelled out in the README):
//   - d_hat defaults to 4 (the product domain of a 2-d problem); any value
//     above 1 is accepted.
//   - Proportionality constants inside the small-ball psi asymptotics are
//     taken as 1.
//   - The Bernoulli-expectation bound only controls growth order; we report
//     the formula value with absolute constant 1 and carry an explicit
//     up_to_constant flag rather than pretending to a sharp value.
//   - Kernel norms use the orthonormal Fourier basis on the unit square, so
//     the L2 norm of a truncated kernel equals the l2 norm of its stored
//     coefficients.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "nolab/arch.hpp"
#include "nolab/errors.hpp"
#include "nolab/io.hpp"
#include "nolab/tensor.hpp"

namespace nolab::bounds {

// Constants of the bound assumptions. Cw/Ck/Csigma/Ca/Cd describe the
// hypothesis class, Calpha/Cbeta the continuous kernel (user supplied; no
// recipe exists for estimating them from truncated coefficients), rho/Ru the
// loss, dom_area and dom_diag the domain. d_hat is the doubling dimension of
// the product domain.
struct BoundConstants {
  double Cw = 1.0;
  double Ck = 1.0;
  double Csigma = 1.0;
  double Ca = 1.0;
  double Calpha = 1.0;
  double Cbeta = 1.0;
  double Cd = 1.0;
  double d_hat = 4.0;
  double rho = 1.0;
  double Ru = 1.0;
  double dom_area = 1.0;  // |D|
  double dom_diag = 2.0;  // diameter of D x D; 2 for the unit square

  void validate() const {
    const double vals[] = {Cw, Ck, Csigma, Ca, Calpha, Cbeta, Cd, rho, Ru, dom_area, dom_diag};
    for (double v : vals)
      if (!(v > 0.0) || !std::isfinite(v))
        throw ConfigError("bounds: all constants must be strictly positive and finite");
    if (!(d_hat > 1.0) || !std::isfinite(d_hat))
      throw ConfigError("bounds: d_hat must exceed 1");
  }
};

// Per-layer gates of the multiplicative class: Z is the skip gate (0 or 1),
// X either a fixed branch gate (0 or 1) or the decay weight x in [0,1] that
// scales the Bernoulli survival probability p = x / L^{1/(d_hat+1)}.
// Both vectors run over layer indices 0..L, so their length is L+1.
struct GateSchedule {
  std::vector<double> Z;
  std::vector<double> X;

  void validate(int L) const {
    if (static_cast<int>(Z.size()) != L + 1 || static_cast<int>(X.size()) != L + 1)
      throw ConfigError("bounds: gate schedule length must be L+1");
    for (double z : Z)
      if (z != 0.0 && z != 1.0) throw ConfigError("bounds: Z gates must be 0 or 1");
    for (double x : X)
      if (!(x >= 0.0 && x <= 1.0)) throw ConfigError("bounds: X gates must lie in [0,1]");
  }

  static GateSchedule fixed(std::vector<double> z, std::vector<double> x) {
    return GateSchedule{std::move(z), std::move(x)};
  }
  // v1 wiring: every skip and every branch active.
  static GateSchedule v1(int L) {
    return GateSchedule{std::vector<double>(static_cast<size_t>(L) + 1, 1.0),
                        std::vector<double>(static_cast<size_t>(L) + 1, 1.0)};
  }
  // plain sequential stack: branches only, no skips.
  static GateSchedule pure_sno(int L) {
    return GateSchedule{std::vector<double>(static_cast<size_t>(L) + 1, 0.0),
                        std::vector<double>(static_cast<size_t>(L) + 1, 1.0)};
  }
  // all branches dropped: the identity map.
  static GateSchedule skips_only(int L) {
    return GateSchedule{std::vector<double>(static_cast<size_t>(L) + 1, 1.0),
                        std::vector<double>(static_cast<size_t>(L) + 1, 0.0)};
  }
};

namespace detail {

inline void check_depth(int L) {
  if (L < 0) throw ConfigError("bounds: L must be non-negative");
}
inline void check_samples(int64_t n) {
  if (n < 1) throw ConfigError("bounds: n must be at least 1");
}
// Shared leading factor of gamma and gamma tilde:
// 4 { ((d-1)/2)^{2/(d+1)} + ((d-1)/2)^{-(d-1)/(d+1)} } (12/(d-1))^{2/(d+1)}.
inline double gamma_prefix(double d_hat) {
  const double half = (d_hat - 1.0) / 2.0;
  const double brace =
      std::pow(half, 2.0 / (d_hat + 1.0)) + std::pow(half, -(d_hat - 1.0) / (d_hat + 1.0));
  return 4.0 * brace * std::pow(12.0 / (d_hat - 1.0), 2.0 / (d_hat + 1.0));
}
// Branch factors of the multiplicative class: Q1 covers the M-layer MLP
// block, Q2 the kernel stage.
inline double q1(const BoundConstants& c, int M) {
  return std::pow(c.Cw, M + 1) * std::pow(c.Csigma, M);
}
inline double q2(const BoundConstants& c) { return c.Ck * c.Csigma; }

}  // namespace detail

inline double gamma_const(const BoundConstants& c) {
  c.validate();
  const double kernel_cap = 8.0 * c.dom_area * c.Calpha * std::max(c.Cbeta * c.dom_diag, 2.0);
  return detail::gamma_prefix(c.d_hat) * std::max(2.0 * c.Cw, kernel_cap) *
         std::pow(c.Cd, 2.0 * (c.d_hat + 2.0) / (c.d_hat + 1.0)) * c.rho * c.Ca;
}

inline double gamma_tilde_const(const BoundConstants& c, int M) {
  c.validate();
  if (M < 1) throw ConfigError("bounds: M must be at least 1");
  const double kernel_cap = 16.0 * c.dom_area * c.Calpha * std::max(c.Cbeta * c.dom_diag, 2.0);
  return detail::gamma_prefix(c.d_hat) * std::max(2.0 * c.Cw, kernel_cap) *
         std::pow(std::pow(c.Cd, 4) * M, (c.d_hat + 2.0) / (c.d_hat + 1.0)) * c.rho * c.Ca;
}

// Rademacher complexity of the additive class:
// gamma L^{(d+2)/(d+1)} {(Cw+Ck)Csigma}^L n^{-1/(d+1)}.
inline double rademacher_no(const BoundConstants& c, int L, int64_t n) {
  detail::check_depth(L);
  detail::check_samples(n);
  const double base = (c.Cw + c.Ck) * c.Csigma;
  return gamma_const(c) * std::pow(static_cast<double>(L), (c.d_hat + 2.0) / (c.d_hat + 1.0)) *
         std::pow(base, L) * std::pow(1.0 / static_cast<double>(n), 1.0 / (c.d_hat + 1.0));
}

// Sum and product factors shared by the multiplicative Rademacher bound and
// the matching generalization bound. The sum's 0/0 cells (X = 0, Z = 0) are
// taken as 0: a dead branch contributes nothing.
namespace detail {

inline double gate_sum(const BoundConstants& c, int M, const GateSchedule& g) {
  const double a = q1(c, M), b = q2(c);
  double s = 0.0;
  for (size_t l = 0; l < g.X.size(); ++l) {
    const double x = g.X[l], z = g.Z[l];
    if (x > 0.0) s += x * a / (z + x * a) + x / (z + x * b);
  }
  return s;
}
inline double gate_product(const BoundConstants& c, int M, const GateSchedule& g) {
  const double a = q1(c, M), b = q2(c);
  double p = 1.0;
  for (size_t l = 0; l < g.X.size(); ++l)
    p *= (g.Z[l] + g.X[l] * a) * (g.Z[l] + g.X[l] * b);
  return p;
}

}  // namespace detail

// Rademacher complexity of the multiplicative class:
// gamma~ L^{1/(d+1)} (sum over gates) (product over gates) n^{-1/(d+1)}.
inline double rademacher_sno(const BoundConstants& c, int L, int M, int64_t n,
                             const GateSchedule& g) {
  detail::check_depth(L);
  detail::check_samples(n);
  g.validate(L);
  return gamma_tilde_const(c, M) * std::pow(static_cast<double>(L), 1.0 / (c.d_hat + 1.0)) *
         detail::gate_sum(c, M, g) * detail::gate_product(c, M, g) *
         std::pow(1.0 / static_cast<double>(n), 1.0 / (c.d_hat + 1.0));
}

// Generalization bounds: empirical + 2 Rademacher + (rho R + Ru) sqrt(2 delta/n),
// holding with probability 1 - 2 exp(-delta), hence the delta > log 2 domain.
inline double geb_no(const BoundConstants& c, int L, int64_t n, double delta,
                     double empirical_loss) {
  if (!(delta > std::log(2.0))) throw ConfigError("bounds: geb needs delta > log 2");
  const double base = (c.Cw + c.Ck) * c.Csigma;
  const double radius = std::pow(base, L) * (c.Cw + c.Ck) * c.Ca;
  return empirical_loss + 2.0 * rademacher_no(c, L, n) +
         (c.rho * radius + c.Ru) * std::sqrt(2.0 * delta / static_cast<double>(n));
}

inline double geb_sno(const BoundConstants& c, int L, int M, int64_t n, double delta,
                      double empirical_loss, const GateSchedule& g) {
  if (!(delta > std::log(2.0))) throw ConfigError("bounds: geb needs delta > log 2");
  const double radius = detail::gate_product(c, M, g) * c.Ca;
  return empirical_loss + 2.0 * rademacher_sno(c, L, M, n, g) +
         (c.rho * radius + c.Ru) * std::sqrt(2.0 * delta / static_cast<double>(n));
}

// Expectation of the gated bound over Bernoulli branch gates with survival
// probabilities p = x / L^{1/(d_hat+1)}. The lemma fixes growth order only,
// so the value carries absolute constant 1 and an explicit flag.
struct BrvBound {
  double value = 0.0;
  bool up_to_constant = true;
};

inline BrvBound expected_geb_bernoulli(const BoundConstants& c, int L, int M, int64_t n,
                                       double delta, const std::vector<double>& x) {
  c.validate();
  detail::check_depth(L);
  detail::check_samples(n);
  if (M < 1) throw ConfigError("bounds: M must be at least 1");
  if (delta < 0.0) throw ConfigError("bounds: delta must be non-negative");
  if (static_cast<int>(x.size()) != L + 1)
    throw ConfigError("bounds: gate schedule length must be L+1");
  for (double v : x)
    if (!(v >= 0.0 && v <= 1.0)) throw ConfigError("bounds: X gates must lie in [0,1]");

  const double q = detail::q1(c, M) + detail::q2(c) +
                   std::pow(c.Cw, M + 1) * c.Ck * std::pow(c.Csigma, M + 1);
  double sum = 0.0;
  for (size_t l = 1; l < x.size(); ++l) sum += x[l];
  double prod = 1.0;
  for (double v : x) prod *= 1.0 + q * v;
  const double nf = static_cast<double>(n);
  BrvBound b;
  b.value = sum * prod * std::pow(1.0 / nf, 1.0 / (c.d_hat + 1.0)) +
            (c.rho * prod * c.Ca + c.Ru) * std::sqrt(2.0 * delta / nf);
  return b;
}

// Lipschitz bounds of the two hypothesis classes.
inline double lipschitz_no(const BoundConstants& c, int L) {
  c.validate();
  detail::check_depth(L);
  return std::pow(c.Cw + c.Ck, L + 1) * std::pow(c.Csigma, L);
}

inline double lipschitz_sno(const BoundConstants& c, int L, int M, const GateSchedule& g) {
  c.validate();
  detail::check_depth(L);
  if (M < 1) throw ConfigError("bounds: M must be at least 1");
  g.validate(L);
  return detail::gate_product(c, M, g);
}

// Small-ball rate functions psi on (0,1], all strictly decreasing, with
// proportionality constants fixed at 1:
//   brownian_sheet_l2      psi(eta) = log(1/eta^2)^2 / eta^2
//   gaussian_sheet_sup(h)  psi(eta) = eta^{-2/h},          0 < h < 2
//   general(alpha, beta)   psi(eta) = log(1/eta)^beta / eta^alpha,
//                          0 < alpha < 2, beta >= 0
struct Psi {
  enum class Form { brownian_sheet_l2, gaussian_sheet_sup, general };
  Form form = Form::general;
  double h = 1.0;
  double alpha = 1.0;
  double beta = 0.0;

  static Psi brownian_sheet_l2() { return Psi{Form::brownian_sheet_l2, 1.0, 1.0, 0.0}; }
  static Psi gaussian_sheet_sup(double h) { return Psi{Form::gaussian_sheet_sup, h, 1.0, 0.0}; }
  static Psi general(double alpha, double beta) {
    return Psi{Form::general, 1.0, alpha, beta};
  }

  void validate() const {
    switch (form) {
      case Form::brownian_sheet_l2: return;
      case Form::gaussian_sheet_sup:
        if (!(h > 0.0 && h < 2.0)) throw ConfigError("bounds: psi needs 0 < h < 2");
        return;
      case Form::general:
        if (!(alpha > 0.0 && alpha < 2.0)) throw ConfigError("bounds: psi needs 0 < alpha < 2");
        if (!(beta >= 0.0)) throw ConfigError("bounds: psi needs beta >= 0");
        return;
    }
  }

  double operator()(double eta) const {
    const double lg = -std::log(eta);
    switch (form) {
      case Form::brownian_sheet_l2: {
        const double t = 2.0 * lg;  // log(1/eta^2)
        return t * t / (eta * eta);
      }
      case Form::gaussian_sheet_sup:
        return std::pow(eta, -2.0 / h);
      case Form::general:
        return (beta == 0.0 ? 1.0 : std::pow(lg, beta)) / std::pow(eta, alpha);
    }
    return 0.0;
  }
};

// Inverse of psi on (0,1] by bisection. psi decreases from +inf (eta -> 0)
// to psi(1), so any target >= psi(1) has a unique preimage; smaller targets
// are out of range.
inline double psi_inverse(const Psi& psi, double target) {
  psi.validate();
  if (!(target > 0.0) || !std::isfinite(target))
    throw ConfigError("bounds: psi_inverse target must be positive and finite");
  if (target < psi(1.0)) throw ConfigError("bounds: psi_inverse target below psi(1)");

  double lo = 0.5, hi = 1.0;
  while (psi(lo) < target) {
    lo *= 0.5;
    if (lo < 1e-300) throw NumericError("bounds: psi_inverse bracket collapsed");
  }
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    if (psi(mid) >= target)
      lo = mid;
    else
      hi = mid;
  }
  return 0.5 * (lo + hi);
}

// Inputs of the OOD risk bound. L_ell is the loss Lipschitz constant,
// L_star the optimal map's, L_G the hypothesis class bound (take it from
// lipschitz_no / lipschitz_sno); eps is the coupling defect, C_mu and Sigma
// the measure's small-ball constant and weak variance.
struct OodInputs {
  double L_ell = 1.0;
  double L_star = 1.0;
  double L_G = 1.0;
  double eps = 0.0;
  double C_mu = 1.0;
  double Sigma = 1.0;

  void validate() const {
    if (!(L_ell > 0.0)) throw ConfigError("bounds: ood needs L_ell > 0");
    if (!(L_star >= 0.0 && L_G >= 0.0)) throw ConfigError("bounds: ood Lipschitz inputs < 0");
    if (!(eps >= 0.0)) throw ConfigError("bounds: ood needs eps >= 0");
    if (!(C_mu > 0.0 && Sigma >= 0.0)) throw ConfigError("bounds: ood needs C_mu > 0, Sigma >= 0");
  }
};

// L_bar (emp + eps + C_mu psi^{-1}(log N) + Sigma sqrt(-2 log delta)/sqrt(N))
// with L_bar = L_ell max{1, L_star} max{1, L_G}.
inline double ood_bound(const OodInputs& in, const Psi& psi, int64_t N, double delta,
                        double empirical_term) {
  in.validate();
  if (N < 2) throw ConfigError("bounds: ood needs N >= 2");
  if (!(delta > 0.0 && delta <= 1.0)) throw ConfigError("bounds: ood needs delta in (0,1]");
  const double L_bar = in.L_ell * std::max(1.0, in.L_star) * std::max(1.0, in.L_G);
  const double nf = static_cast<double>(N);
  const double conc = in.Sigma * std::sqrt(-2.0 * std::log(delta)) / std::sqrt(nf);
  return L_bar * empirical_term +
         L_bar * (in.eps + in.C_mu * psi_inverse(psi, std::log(nf)) + conc);
}

// ---- empirical constant estimation ----

struct SpectralNormResult {
  double value = 0.0;
  bool converged = false;
  double resid = 0.0;  // last relative change of the estimate
  int iters = 0;
};

// Largest singular value of a real matrix (rows, cols) by power iteration
// on A^T A. The start vector is fixed, so results are reproducible.
inline SpectralNormResult spectral_norm(const ad::DiffArray& w, int max_iters = 50,
                                        double tol = 1e-6) {
  if (w.dtype != ad::Dtype::real32 || w.shape.size() != 2)
    throw ConfigError("bounds: spectral_norm expects a real 2-D matrix");
  const int64_t rows = w.shape[0], cols = w.shape[1];
  std::vector<double> v(static_cast<size_t>(cols)), av(static_cast<size_t>(rows));
  for (int64_t j = 0; j < cols; ++j)
    v[static_cast<size_t>(j)] = 1.0 + 1e-3 * static_cast<double>(j);
  double nv = 0.0;
  for (double x : v) nv += x * x;
  nv = std::sqrt(nv);
  for (double& x : v) x /= nv;

  SpectralNormResult r;
  double sigma_prev = 0.0;
  for (int it = 1; it <= max_iters; ++it) {
    for (int64_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (int64_t j = 0; j < cols; ++j)
        s += static_cast<double>(w.re[static_cast<size_t>(i * cols + j)]) *
             v[static_cast<size_t>(j)];
      av[static_cast<size_t>(i)] = s;
    }
    double na = 0.0;
    for (double x : av) na += x * x;
    na = std::sqrt(na);
    r.value = na;
    r.iters = it;
    if (na == 0.0) {  // zero matrix; nothing to iterate on
      r.converged = true;
      r.resid = 0.0;
      return r;
    }
    for (int64_t j = 0; j < cols; ++j) {
      double s = 0.0;
      for (int64_t i = 0; i < rows; ++i)
        s += static_cast<double>(w.re[static_cast<size_t>(i * cols + j)]) *
             av[static_cast<size_t>(i)];
      v[static_cast<size_t>(j)] = s;
    }
    double nn = 0.0;
    for (double x : v) nn += x * x;
    nn = std::sqrt(nn);
    for (double& x : v) x /= nn;
    r.resid = std::fabs(na - sigma_prev) / std::max(na, 1e-300);
    if (it > 1 && r.resid <= tol) {
      r.converged = true;
      return r;
    }
    sigma_prev = na;
  }
  return r;
}

// Largest derivative magnitude of the activation. Closed for the piecewise
// linear ones; a scan plus ternary refine for the smooth gelu.
inline double activation_lipschitz(ad::Act act) {
  switch (act) {
    case ad::Act::relu:
    case ad::Act::leaky_relu:
    case ad::Act::identity:
      return 1.0;
    case ad::Act::gelu:
      break;
  }
  auto dgelu = [](double x) {
    const double c1 = 0.7978845608, c2 = 0.044715;
    const double u = c1 * (x + c2 * x * x * x);
    const double th = std::tanh(u);
    const double du = c1 * (1.0 + 3.0 * c2 * x * x);
    return std::fabs(0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
  };
  double best_x = 0.0, best = 0.0;
  for (double x = -8.0; x <= 8.0; x += 1e-3) {
    const double v = dgelu(x);
    if (v > best) {
      best = v;
      best_x = x;
    }
  }
  double lo = best_x - 2e-3, hi = best_x + 2e-3;
  for (int i = 0; i < 300; ++i) {
    const double m1 = lo + (hi - lo) / 3.0, m2 = hi - (hi - lo) / 3.0;
    if (dgelu(m1) < dgelu(m2))
      lo = m1;
    else
      hi = m2;
  }
  return dgelu(0.5 * (lo + hi));
}

struct ConstantEstimate {
  BoundConstants c;
  bool spectral_converged = true;  // every power iteration hit tol
  double worst_resid = 0.0;        // largest final relative change
};

// Empirical portion of the constants, measured from a trained model and the
// dataset it runs on:
//   Cw      max spectral norm over the per-layer linear maps (local W and
//           the two MLP matrices); lifting/projection sit outside the layer
//           stack the bounds quantify over and are excluded
//   Ck      max over layers of the coefficient l2 norm (Parseval on the
//           orthonormal unit-square basis)
//   Ca      max input L2 norm over the dataset, midpoint rule on the unit
//           square, wave-speed channel only
//   Csigma  activation derivative bound
//   Cd      widest channel count inside the layer stack (MLP hidden included)
// Calpha/Cbeta/rho/Ru and the domain geometry stay at their defaults; they
// are not estimable from a model.
inline ConstantEstimate estimate_constants(const arch::OperatorModel& m, const io::Dataset& d,
                                           double d_hat = 4.0) {
  ConstantEstimate est;
  est.c.d_hat = d_hat;

  double cw = 0.0;
  auto absorb = [&](const ad::DiffArray& w) {
    const SpectralNormResult r = spectral_norm(w);
    cw = std::max(cw, r.value);
    est.worst_resid = std::max(est.worst_resid, r.resid);
    if (!r.converged) est.spectral_converged = false;
  };
  double ck = 0.0;
  for (const arch::OperatorLayer& lay : m.layers) {
    if (!m.cfg.sno_family()) absorb(lay.W);
    if (m.cfg.sno_family()) {
      absorb(lay.mlp_w1);
      absorb(lay.mlp_w2);
    }
    double s2 = 0.0;
    for (const ad::cfloat& z : lay.K.coeff.cx)
      s2 += static_cast<double>(z.real()) * z.real() + static_cast<double>(z.imag()) * z.imag();
    ck = std::max(ck, std::sqrt(s2));
  }
  est.c.Cw = m.layers.empty() ? 1.0 : cw;
  est.c.Ck = m.layers.empty() ? 1.0 : ck;

  const uint64_t hw = static_cast<uint64_t>(d.H) * d.W;
  double ca = 0.0;
  for (uint32_t i = 0; i < d.n(); ++i) {
    double s2 = 0.0;
    for (uint64_t k = 0; k < hw; ++k) {
      const double v = d.c[static_cast<size_t>(i * hw + k)];
      s2 += v * v;
    }
    ca = std::max(ca, std::sqrt(s2 / static_cast<double>(hw)));
  }
  est.c.Ca = d.n() == 0 ? 1.0 : ca;

  est.c.Csigma = activation_lipschitz(m.cfg.act);
  est.c.Cd = static_cast<double>(
      m.cfg.sno_family() ? m.cfg.mlp_expansion * m.cfg.width : m.cfg.width);
  return est;
}

}  // namespace nolab::bounds
