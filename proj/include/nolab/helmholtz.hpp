#pragma once

// Frequency-domain Helmholtz oracle on a rectangle: second-order 5-point
// stencil for -(lap + omega^2/c^2), Dirichlet surface row elimination,
// first-order absorbing (Robin) rows by ghost-node elimination elsewhere, and
// a sparse direct solve. Generates the (wave speed, pressure) datasets and the
// receiver traces the operator experiments consume.
//
// Grid conventions: solver nodes (iy, ix) at (x, y) = (ix*hx, iy*hy) with
// iy = 0 the surface and y growing downward; node id = iy*Nsx + ix. The
// training grid is every refine-th solver node, so it spans [0, L - L/n].

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Sparse>
#include <Eigen/SparseLU>

#include "nolab/errors.hpp"
#include "nolab/grf.hpp"
#include "nolab/io.hpp"
#include "nolab/rng.hpp"
#include "nolab/tensor.hpp"

namespace nolab::helm {

using cd = std::complex<double>;

enum class BcMode { top_dirichlet, all_dirichlet, all_robin };

struct DomainConfig {
  double Lx = 1.27, Ly = 1.27;      // km
  double freq = 15.0;               // Hz
  double c_min = 1.5, c_max = 5.0;  // km/s
  int nx = 32, ny = 32;             // training grid extents
  int refine = 4;                   // solver refinement factor

  double omega() const { return 2.0 * std::numbers::pi * freq; }
  int solver_nx() const { return refine * nx + 1; }  // nodes, both ends included
  int solver_ny() const { return refine * ny + 1; }
  double hx() const { return Lx / (refine * nx); }
  double hy() const { return Ly / (refine * ny); }
  double train_hx() const { return Lx / nx; }
  double train_hy() const { return Ly / ny; }
  double ppw() const { return (c_min / freq) / std::max(hx(), hy()); }

  void validate() const {
    if (!(Lx > 0.0) || !(Ly > 0.0) || !(freq > 0.0)) throw ConfigError("domain: extents and frequency must be positive");
    if (!(c_min > 0.0) || !(c_max > c_min)) throw ConfigError("domain: need 0 < c_min < c_max");
    if (nx <= 0 || ny <= 0 || !ad::is_pow2(nx) || !ad::is_pow2(ny))
      throw ConfigError("domain: nx, ny must be powers of two");
    if (refine < 1 || !ad::is_pow2(refine * nx) || !ad::is_pow2(refine * ny))
      throw ConfigError("domain: refine*nx, refine*ny must be powers of two");
    if (ppw() < 10.0)
      throw ConfigError("domain: fewer than 10 solver points per minimum wavelength (ppw = " +
                        std::to_string(ppw()) + ")");
  }
};

struct SourceSpec {
  double x = 0.635;    // km
  double depth = 0.01; // km below the surface
};

struct ReceiverLine {
  std::vector<double> xs;  // km
  double depth = 0.01;
  double spacing = 0.0;
};

// n positions evenly spread over the interior, away from the lateral edges.
inline std::vector<double> interior_line(int n, double Lx) {
  if (n <= 0) throw ConfigError("interior_line: need n > 0");
  std::vector<double> xs(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) xs[static_cast<size_t>(i)] = Lx * (i + 1) / (n + 1);
  return xs;
}

inline ReceiverLine make_receiver_line(int n, const DomainConfig& cfg, double depth = 0.01) {
  ReceiverLine line;
  line.xs = interior_line(n, cfg.Lx);
  line.depth = depth;
  line.spacing = n > 1 ? line.xs[1] - line.xs[0] : 0.0;
  return line;
}

inline std::vector<SourceSpec> make_source_line(int n, const DomainConfig& cfg, double depth = 0.01) {
  std::vector<SourceSpec> out;
  for (double x : interior_line(n, cfg.Lx)) out.push_back({x, depth});
  return out;
}

// Complex pressure on the training grid, stored (H, W, 2) as (re, im).
struct PressureField {
  int H = 0, W = 0;
  std::vector<float> data;

  float re(int i, int j) const { return data[2 * (static_cast<size_t>(i) * W + j)]; }
  float im(int i, int j) const { return data[2 * (static_cast<size_t>(i) * W + j) + 1]; }
  double max_abs() const {
    double m = 0.0;
    for (size_t k = 0; k + 1 < data.size(); k += 2)
      m = std::max(m, std::hypot(static_cast<double>(data[k]), static_cast<double>(data[k + 1])));
    return m;
  }
  bool finite() const {
    for (float v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

// Bilinear upsample of a training-grid field onto the solver nodes. The far
// row/column extrapolates from the last cell, which keeps linear fields exact.
inline std::vector<double> upsample_to_solver(const std::vector<float>& c_train,
                                              const DomainConfig& cfg) {
  if (c_train.size() != static_cast<size_t>(cfg.nx) * cfg.ny)
    throw ConfigError("upsample_to_solver: wave-speed grid does not match nx*ny");
  const int Nsx = cfg.solver_nx(), Nsy = cfg.solver_ny();
  std::vector<double> out(static_cast<size_t>(Nsx) * Nsy);
  // The training grid samples [0, L-h_train]; solver nodes past the last
  // sample take the nearest value. Clamping keeps the weights convex, so the
  // upsampled field stays inside [min, max] of the input (extrapolating the
  // last strip can leave the physical range on steep boundary gradients).
  for (int iy = 0; iy < Nsy; ++iy) {
    double v = std::min(static_cast<double>(iy) / cfg.refine, static_cast<double>(cfg.ny - 1));
    int i0 = std::min(static_cast<int>(v), cfg.ny - 2);
    if (cfg.ny == 1) i0 = 0;
    const double fv = v - i0;
    for (int ix = 0; ix < Nsx; ++ix) {
      double u = std::min(static_cast<double>(ix) / cfg.refine, static_cast<double>(cfg.nx - 1));
      int j0 = std::min(static_cast<int>(u), cfg.nx - 2);
      if (cfg.nx == 1) j0 = 0;
      const double fu = u - j0;
      const auto at = [&](int i, int j) {
        return static_cast<double>(c_train[static_cast<size_t>(i) * cfg.nx + j]);
      };
      const int i1 = std::min(i0 + 1, cfg.ny - 1), j1 = std::min(j0 + 1, cfg.nx - 1);
      out[static_cast<size_t>(iy) * Nsx + ix] =
          (1 - fv) * ((1 - fu) * at(i0, j0) + fu * at(i0, j1)) +
          fv * ((1 - fu) * at(i1, j0) + fu * at(i1, j1));
    }
  }
  return out;
}

// Assembled and factorized operator for one wave-speed grid. Reused across
// right-hand sides, so multi-source datasets factorize once per sample.
struct SolveOp {
  DomainConfig cfg;
  BcMode mode = BcMode::top_dirichlet;
  int Nsx = 0, Nsy = 0;
  std::vector<double> c_nodes;   // wave speed at solver nodes
  std::vector<char> dirichlet;   // per-node flag
  Eigen::SparseMatrix<cd> A;
  std::unique_ptr<Eigen::SparseLU<Eigen::SparseMatrix<cd>>> lu;

  int node(int iy, int ix) const { return iy * Nsx + ix; }
};

// Builds the 5-point rows. Absorbing edges eliminate the ghost node of the
// outward central difference, which doubles the inward neighbor and adds
// -2i(omega/c)/h to the diagonal; corners get the treatment on both axes.
// Rows of Dirichlet nodes are identity and their columns are skipped, so the
// free block stays symmetrizable by the cell-weight diagonal (1, 1/2, 1/4),
// which is what makes discrete source/receiver reciprocity hold.
inline std::unique_ptr<SolveOp> assemble_operator(const std::vector<float>& c_train,
                                                  const DomainConfig& cfg, BcMode mode) {
  cfg.validate();
  auto op = std::make_unique<SolveOp>();
  op->cfg = cfg;
  op->mode = mode;
  op->Nsx = cfg.solver_nx();
  op->Nsy = cfg.solver_ny();
  op->c_nodes = upsample_to_solver(c_train, cfg);
  for (double c : op->c_nodes)
    if (!(c > 0.0)) throw ConfigError("assemble_operator: wave speed must be positive");

  const int Nsx = op->Nsx, Nsy = op->Nsy;
  const int N = Nsx * Nsy;
  const double hx = cfg.hx(), hy = cfg.hy(), w = cfg.omega();

  op->dirichlet.assign(static_cast<size_t>(N), 0);
  for (int iy = 0; iy < Nsy; ++iy)
    for (int ix = 0; ix < Nsx; ++ix) {
      const bool edge = iy == 0 || iy == Nsy - 1 || ix == 0 || ix == Nsx - 1;
      bool dir = false;
      if (mode == BcMode::all_dirichlet)
        dir = edge;
      else if (mode == BcMode::top_dirichlet)
        dir = iy == 0;
      op->dirichlet[static_cast<size_t>(op->node(iy, ix))] = dir ? 1 : 0;
    }

  std::vector<Eigen::Triplet<cd>> trip;
  trip.reserve(static_cast<size_t>(N) * 5);
  for (int iy = 0; iy < Nsy; ++iy)
    for (int ix = 0; ix < Nsx; ++ix) {
      const int id = op->node(iy, ix);
      if (op->dirichlet[static_cast<size_t>(id)]) {
        trip.emplace_back(id, id, cd(1.0, 0.0));
        continue;
      }
      const double k = w / op->c_nodes[static_cast<size_t>(id)];
      cd center(2.0 / (hx * hx) + 2.0 / (hy * hy) - k * k, 0.0);
      const auto couple = [&](int niy, int nix, double over_h2) {
        const int nid = op->node(niy, nix);
        if (!op->dirichlet[static_cast<size_t>(nid)]) trip.emplace_back(id, nid, cd(-over_h2, 0.0));
      };
      // x axis
      if (ix == 0) {
        couple(iy, ix + 1, 2.0 / (hx * hx));
        center += cd(0.0, -2.0 * k / hx);
      } else if (ix == Nsx - 1) {
        couple(iy, ix - 1, 2.0 / (hx * hx));
        center += cd(0.0, -2.0 * k / hx);
      } else {
        couple(iy, ix - 1, 1.0 / (hx * hx));
        couple(iy, ix + 1, 1.0 / (hx * hx));
      }
      // y axis
      if (iy == 0) {
        couple(iy + 1, ix, 2.0 / (hy * hy));
        center += cd(0.0, -2.0 * k / hy);
      } else if (iy == Nsy - 1) {
        couple(iy - 1, ix, 2.0 / (hy * hy));
        center += cd(0.0, -2.0 * k / hy);
      } else {
        couple(iy - 1, ix, 1.0 / (hy * hy));
        couple(iy + 1, ix, 1.0 / (hy * hy));
      }
      trip.emplace_back(id, id, center);
    }

  op->A.resize(N, N);
  op->A.setFromTriplets(trip.begin(), trip.end());
  op->A.makeCompressed();
  op->lu = std::make_unique<Eigen::SparseLU<Eigen::SparseMatrix<cd>>>();
  op->lu->compute(op->A);
  if (op->lu->info() != Eigen::Success)
    throw NumericError("assemble_operator: sparse factorization failed");
  return op;
}

inline Eigen::VectorXcd make_rhs(const SolveOp& op) {
  return Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(op.Nsx) * op.Nsy);
}

// Discrete delta at the nearest node: load -i*omega scaled by 1/cell-area.
inline void add_point_source(Eigen::VectorXcd& rhs, const SolveOp& op, const SourceSpec& src) {
  const DomainConfig& cfg = op.cfg;
  if (src.x < 0.0 || src.x > cfg.Lx || src.depth < 0.0 || src.depth > cfg.Ly)
    throw ConfigError("add_point_source: source outside the domain");
  const int ix = static_cast<int>(std::lround(src.x / cfg.hx()));
  const int iy = static_cast<int>(std::lround(src.depth / cfg.hy()));
  const int id = op.node(std::min(iy, op.Nsy - 1), std::min(ix, op.Nsx - 1));
  if (op.dirichlet[static_cast<size_t>(id)])
    throw ConfigError("add_point_source: source lands on a Dirichlet node");
  rhs[id] += cd(0.0, -cfg.omega()) / (cfg.hx() * cfg.hy());
}

inline void add_volume_forcing(Eigen::VectorXcd& rhs, const SolveOp& op,
                               const std::function<cd(double, double)>& f) {
  for (int iy = 0; iy < op.Nsy; ++iy)
    for (int ix = 0; ix < op.Nsx; ++ix) {
      const int id = op.node(iy, ix);
      if (!op.dirichlet[static_cast<size_t>(id)]) rhs[id] += f(ix * op.cfg.hx(), iy * op.cfg.hy());
    }
}

inline Eigen::VectorXcd solve(const SolveOp& op, const Eigen::VectorXcd& rhs) {
  Eigen::VectorXcd u = op.lu->solve(rhs);
  const double fn = rhs.norm();
  if (fn > 0.0) {
    const double res = (op.A * u - rhs).norm() / fn;
    if (!(res <= 1e-8))
      throw NumericError("solve: residual " + std::to_string(res) + " exceeds 1e-8");
  }
  return u;
}

// Pointwise subsampling at the coincident nodes (every refine-th solver node).
inline PressureField restrict_to_training_grid(const SolveOp& op, const Eigen::VectorXcd& u) {
  PressureField p;
  p.H = op.cfg.ny;
  p.W = op.cfg.nx;
  p.data.resize(2 * static_cast<size_t>(p.H) * p.W);
  for (int i = 0; i < p.H; ++i)
    for (int j = 0; j < p.W; ++j) {
      const cd v = u[op.node(i * op.cfg.refine, j * op.cfg.refine)];
      p.data[2 * (static_cast<size_t>(i) * p.W + j)] = static_cast<float>(v.real());
      p.data[2 * (static_cast<size_t>(i) * p.W + j) + 1] = static_cast<float>(v.imag());
    }
  return p;
}

// Bilinear interpolation of the training-grid field at one point. Positions in
// the final grid cell strip extrapolate from the last cell, which is exact for
// fields linear in x and y.
inline cd interp_field(const PressureField& p, const DomainConfig& cfg, double x, double y) {
  if (x < 0.0 || x > cfg.Lx || y < 0.0 || y > cfg.Ly)
    throw ConfigError("interp_field: position outside the domain");
  const double u = x / cfg.train_hx(), v = y / cfg.train_hy();
  const int j0 = std::max(0, std::min(static_cast<int>(u), cfg.nx - 2));
  const int i0 = std::max(0, std::min(static_cast<int>(v), cfg.ny - 2));
  const double fu = u - j0, fv = v - i0;
  const auto at = [&](int i, int j) {
    return cd(p.re(i, j), p.im(i, j));
  };
  return (1 - fv) * ((1 - fu) * at(i0, j0) + fu * at(i0, j0 + 1)) +
         fv * ((1 - fu) * at(i0 + 1, j0) + fu * at(i0 + 1, j0 + 1));
}

inline std::vector<cd> restrict_to_receivers(const PressureField& p, const DomainConfig& cfg,
                                             const ReceiverLine& line) {
  std::vector<cd> trace;
  trace.reserve(line.xs.size());
  for (double x : line.xs) trace.push_back(interp_field(p, cfg, x, line.depth));
  return trace;
}

inline void check_field(const PressureField& p, int sample_idx) {
  if (!p.finite())
    throw NumericError("sample " + std::to_string(sample_idx) + ": non-finite pressure field");
  const double cap = 1e-6 * p.max_abs();
  for (int j = 0; j < p.W; ++j)
    if (std::hypot(static_cast<double>(p.re(0, j)), static_cast<double>(p.im(0, j))) > cap)
      throw NumericError("sample " + std::to_string(sample_idx) + ": top row violates the surface condition");
}

struct DataGenConfig {
  DomainConfig dom;
  grf::MaternParams grf_params;  // defaults: s=1, nu=1, lambda 0.1
  SourceSpec src;
  int n = 512;
  uint64_t seed = 1;
};

// n pairs (c_i, p_i): GRF draw, affine link to [c_min, c_max], single factorize
// and solve per sample. Pure function of (config, master seed).
inline io::Dataset generate_dataset(const DataGenConfig& gen) {
  gen.dom.validate();
  io::Dataset ds;
  ds.flags = 0;
  ds.H = gen.dom.ny;
  ds.W = gen.dom.nx;
  ds.n_src = 1;
  ds.n_rcv = 0;
  grf::Sampler smp = grf::build_sampler(gen.grf_params, gen.dom.Lx, gen.dom.Ly, gen.dom.ny, gen.dom.nx);
  for (int i = 0; i < gen.n; ++i) {
    const uint64_t seed_i = rng::derive_seed(gen.seed, static_cast<uint64_t>(i));
    auto ws = grf::link_to_wavespeed(grf::sample_field(smp, seed_i), gen.dom.ny, gen.dom.nx,
                                     gen.dom.c_min, gen.dom.c_max, gen.grf_params, seed_i);
    try {
      auto op = assemble_operator(ws.grid, gen.dom, BcMode::top_dirichlet);
      auto rhs = make_rhs(*op);
      add_point_source(rhs, *op, gen.src);
      PressureField p = restrict_to_training_grid(*op, solve(*op, rhs));
      check_field(p, i);
      ds.c.insert(ds.c.end(), ws.grid.begin(), ws.grid.end());
      ds.p.insert(ds.p.end(), p.data.begin(), p.data.end());
    } catch (const NumericError& e) {
      throw NumericError("sample " + std::to_string(i) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("sample " + std::to_string(i) + ": " + e.what());
    }
  }
  ds.check_consistent();
  return ds;
}

struct ForwardGenConfig {
  DomainConfig dom;
  grf::MaternParams grf_params;
  int n = 64;
  int n_src = 8;
  int n_rcv = 16;
  double src_depth = 0.01;
  double rcv_depth = 0.01;
  uint64_t seed = 1;
};

// Forward-operator dataset: per wave speed, one factorization reused across
// all sources; the payload is c plus a (n_src, n_rcv, 2) trace matrix per
// sample. Source and receiver lines are pure functions of the config, so
// consumers rebuild them with make_source_line / make_receiver_line.
inline io::Dataset generate_forward_dataset(const ForwardGenConfig& gen) {
  gen.dom.validate();
  if (gen.n_src <= 0 || gen.n_rcv <= 0) throw ConfigError("forward dataset: need sources and receivers");
  io::Dataset ds;
  ds.flags = 1;
  ds.H = gen.dom.ny;
  ds.W = gen.dom.nx;
  ds.n_src = static_cast<uint16_t>(gen.n_src);
  ds.n_rcv = static_cast<uint16_t>(gen.n_rcv);
  const auto sources = make_source_line(gen.n_src, gen.dom, gen.src_depth);
  const auto line = make_receiver_line(gen.n_rcv, gen.dom, gen.rcv_depth);
  grf::Sampler smp = grf::build_sampler(gen.grf_params, gen.dom.Lx, gen.dom.Ly, gen.dom.ny, gen.dom.nx);
  for (int i = 0; i < gen.n; ++i) {
    const uint64_t seed_i = rng::derive_seed(gen.seed, static_cast<uint64_t>(i));
    auto ws = grf::link_to_wavespeed(grf::sample_field(smp, seed_i), gen.dom.ny, gen.dom.nx,
                                     gen.dom.c_min, gen.dom.c_max, gen.grf_params, seed_i);
    try {
      auto op = assemble_operator(ws.grid, gen.dom, BcMode::top_dirichlet);
      for (int s = 0; s < gen.n_src; ++s) {
        auto rhs = make_rhs(*op);
        add_point_source(rhs, *op, sources[static_cast<size_t>(s)]);
        PressureField p = restrict_to_training_grid(*op, solve(*op, rhs));
        check_field(p, i);
        if (s == 0) ds.c.insert(ds.c.end(), ws.grid.begin(), ws.grid.end());
        for (const cd& t : restrict_to_receivers(p, gen.dom, line)) {
          ds.traces.push_back(static_cast<float>(t.real()));
          ds.traces.push_back(static_cast<float>(t.imag()));
        }
      }
    } catch (const NumericError& e) {
      throw NumericError("sample " + std::to_string(i) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("sample " + std::to_string(i) + ": " + e.what());
    }
  }
  ds.check_consistent();
  return ds;
}

}  // namespace nolab::helm
