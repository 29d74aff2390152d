#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "nolab/helmholtz.hpp"

using namespace nolab;
using helm::cd;
using helm::DomainConfig;

namespace {

DomainConfig small_domain(int n, int refine, double freq) {
  DomainConfig d;
  d.nx = d.ny = n;
  d.refine = refine;
  d.freq = freq;
  d.c_min = 3.0;  // tests below use media at or above 3 km/s
  d.c_max = 5.0;
  return d;
}

// Relative L2 error of the solver field against an analytic profile evaluated
// on a node set selected by `keep`.
double window_rel_l2(const helm::SolveOp& op, const Eigen::VectorXcd& u,
                     const std::function<cd(double, double)>& exact,
                     const std::function<bool(double, double)>& keep) {
  double num = 0.0, den = 0.0;
  for (int iy = 0; iy < op.Nsy; ++iy)
    for (int ix = 0; ix < op.Nsx; ++ix) {
      const double x = ix * op.cfg.hx(), y = iy * op.cfg.hy();
      if (!keep(x, y)) continue;
      const cd e = exact(x, y);
      const cd d = u[op.node(iy, ix)] - e;
      num += std::norm(d);
      den += std::norm(e);
    }
  return std::sqrt(num / den);
}

double manufactured_error(const DomainConfig& dom, double c0) {
  std::vector<float> c(static_cast<size_t>(dom.nx) * dom.ny, static_cast<float>(c0));
  auto op = helm::assemble_operator(c, dom, helm::BcMode::all_dirichlet);
  const double k = dom.omega() / c0;
  const double pi = std::numbers::pi;
  const double coef = pi * pi / (dom.Lx * dom.Lx) + pi * pi / (dom.Ly * dom.Ly) - k * k;
  auto rhs = helm::make_rhs(*op);
  helm::add_volume_forcing(rhs, *op, [&](double x, double y) {
    return cd(coef * std::sin(pi * x / dom.Lx) * std::sin(pi * y / dom.Ly), 0.0);
  });
  auto u = helm::solve(*op, rhs);
  return window_rel_l2(*op, u,
                       [&](double x, double y) {
                         return cd(std::sin(pi * x / dom.Lx) * std::sin(pi * y / dom.Ly), 0.0);
                       },
                       [](double, double) { return true; });
}

}  // namespace

TEST(Domain, ValidatesGridAndWavelengthBudget) {
  DomainConfig d;  // defaults: 32x32, refine 4, 15 Hz, c_min 1.5
  EXPECT_NO_THROW(d.validate());
  EXPECT_NEAR(d.ppw(), 10.08, 0.01);

  DomainConfig bad = d;
  bad.freq = 30.0;  // ppw drops to ~5
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = d;
  bad.nx = 48;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = d;
  bad.refine = 3;  // 3*32 not a power of two
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Assembly, UpsampleStaysInsideTheInputRange) {
  // Solver nodes past the last training row/column take the nearest sample;
  // a steep gradient at the boundary must not push the upsampled field
  // outside [min, max] (extrapolation once produced negative wave speeds).
  DomainConfig d = small_domain(16, 4, 7.5);
  std::vector<float> c(16 * 16, 5.0f);
  for (int i = 0; i < 16; ++i) c[static_cast<size_t>(i) * 16 + 15] = 1.5f;  // cliff at the right edge
  for (int j = 0; j < 16; ++j) c[15 * 16 + static_cast<size_t>(j)] = 1.5f;  // and the bottom
  const auto up = helm::upsample_to_solver(c, d);
  double lo = up[0], hi = up[0];
  for (double v : up) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  EXPECT_GE(lo, 1.5);
  EXPECT_LE(hi, 5.0);
  // interior midpoint of a uniform region reproduces the sample value
  EXPECT_DOUBLE_EQ(up[2 * d.solver_nx() + 2], 5.0);
  // the last solver column equals the clamped edge value
  EXPECT_DOUBLE_EQ(up[5 * d.solver_nx() + (d.solver_nx() - 1)], 1.5);
}

TEST(Assembly, ZeroRhsGivesZeroSolution) {
  DomainConfig d = small_domain(16, 2, 7.0);
  std::vector<float> c(16 * 16, 3.0f);
  auto op = helm::assemble_operator(c, d, helm::BcMode::top_dirichlet);
  EXPECT_EQ(op->A.rows(), static_cast<Eigen::Index>(d.solver_nx()) * d.solver_ny());
  auto u = helm::solve(*op, helm::make_rhs(*op));
  EXPECT_DOUBLE_EQ(u.norm(), 0.0);
}

TEST(Assembly, InteriorRowSumIsMinusKSquared) {
  DomainConfig d = small_domain(16, 2, 7.0);
  const double c0 = 3.0;
  std::vector<float> c(16 * 16, static_cast<float>(c0));
  auto op = helm::assemble_operator(c, d, helm::BcMode::top_dirichlet);
  const int id = op->node(op->Nsy / 2, op->Nsx / 2);
  cd row_sum = 0.0;
  for (int col = 0; col < op->A.outerSize(); ++col)
    for (Eigen::SparseMatrix<cd>::InnerIterator it(op->A, col); it; ++it)
      if (it.row() == id) row_sum += it.value();
  const double k2 = std::pow(d.omega() / c0, 2);
  EXPECT_NEAR(row_sum.real(), -k2, 1e-9 * k2);
  EXPECT_NEAR(row_sum.imag(), 0.0, 1e-12);
}

TEST(Solver, ManufacturedSolutionIsSecondOrder) {
  const double e_coarse = manufactured_error(small_domain(32, 2, 10.0), 3.0);
  const double e_fine = manufactured_error(small_domain(32, 4, 10.0), 3.0);
  const double ratio = e_coarse / e_fine;
  EXPECT_GE(ratio, 3.5) << "coarse " << e_coarse << " fine " << e_fine;
  EXPECT_LE(ratio, 4.5) << "coarse " << e_coarse << " fine " << e_fine;
}

TEST(Solver, ManufacturedRestrictionMatchesAnalytic) {
  DomainConfig d = small_domain(32, 4, 10.0);
  const double c0 = 3.0;
  std::vector<float> c(static_cast<size_t>(d.nx) * d.ny, static_cast<float>(c0));
  auto op = helm::assemble_operator(c, d, helm::BcMode::all_dirichlet);
  const double pi = std::numbers::pi;
  const double k = d.omega() / c0;
  const double coef = 2.0 * pi * pi / (d.Lx * d.Lx) - k * k;
  auto rhs = helm::make_rhs(*op);
  helm::add_volume_forcing(rhs, *op, [&](double x, double y) {
    return cd(coef * std::sin(pi * x / d.Lx) * std::sin(pi * y / d.Ly), 0.0);
  });
  auto p = helm::restrict_to_training_grid(*op, helm::solve(*op, rhs));
  double max_err = 0.0;
  for (int i = 0; i < p.H; ++i)
    for (int j = 0; j < p.W; ++j) {
      const double exact = std::sin(pi * j * d.train_hx() / d.Lx) * std::sin(pi * i * d.train_hy() / d.Ly);
      max_err = std::max(max_err, std::abs(p.re(i, j) - exact));
      max_err = std::max(max_err, std::abs(static_cast<double>(p.im(i, j))));
    }
  EXPECT_LE(max_err, 5e-3);  // discretization error at this h, well above float noise
}

TEST(Solver, GreenFunctionWindow) {
  // Homogeneous medium, absorbing on all sides, source mid-domain; compare on
  // an annulus clear of both the source node and the boundary layers.
  DomainConfig d;
  d.Lx = d.Ly = 2.54;
  d.nx = d.ny = 32;
  d.refine = 8;
  d.freq = 10.0;
  d.c_min = 2.9;
  d.c_max = 5.0;
  const double c0 = 3.0;
  std::vector<float> c(static_cast<size_t>(d.nx) * d.ny, static_cast<float>(c0));
  auto op = helm::assemble_operator(c, d, helm::BcMode::all_robin);
  helm::SourceSpec src{d.Lx / 2.0, d.Ly / 2.0};
  auto rhs = helm::make_rhs(*op);
  helm::add_point_source(rhs, *op, src);
  auto u = helm::solve(*op, rhs);

  const double k = d.omega() / c0;
  const double amp = d.omega() / 4.0;
  const auto exact = [&](double x, double y) {
    const double r = std::hypot(x - src.x, y - src.depth);
    return cd(amp * std::cyl_bessel_j(0, k * r), amp * std::cyl_neumann(0, k * r));
  };
  const auto keep = [&](double x, double y) {
    const double r = std::hypot(x - src.x, y - src.depth);
    return r >= 0.30 && r <= 0.60;
  };
  const double err = window_rel_l2(*op, u, exact, keep);
  EXPECT_LE(err, 0.05) << "annulus relative L2 " << err;
  EXPECT_GE(d.ppw(), 10.0);
}

TEST(Restrict, RefineOneIsIdentityAndConstantStaysConstant) {
  DomainConfig d = small_domain(16, 1, 3.0);
  std::vector<float> c(16 * 16, 3.5f);
  auto op = helm::assemble_operator(c, d, helm::BcMode::top_dirichlet);
  auto rhs = helm::make_rhs(*op);
  helm::add_point_source(rhs, *op, {0.635, 0.3});
  auto u = helm::solve(*op, rhs);
  auto p = helm::restrict_to_training_grid(*op, u);
  for (int i = 0; i < p.H; ++i)
    for (int j = 0; j < p.W; ++j) {
      EXPECT_EQ(p.re(i, j), static_cast<float>(u[op->node(i, j)].real()));
      EXPECT_EQ(p.im(i, j), static_cast<float>(u[op->node(i, j)].imag()));
    }

  helm::PressureField flat;
  flat.H = flat.W = 4;
  flat.data.assign(32, 0.0f);
  for (size_t k = 0; k < flat.data.size(); k += 2) flat.data[k] = 2.5f;
  DomainConfig d4 = small_domain(4, 1, 1.0);
  d4.c_min = 3.0;
  auto trace = helm::restrict_to_receivers(flat, d4, helm::make_receiver_line(5, d4, 0.4));
  for (const cd& t : trace) {
    EXPECT_NEAR(t.real(), 2.5, 1e-6);
    EXPECT_NEAR(t.imag(), 0.0, 1e-12);
  }
}

TEST(Restrict, BilinearIsExactOnLinearFields) {
  DomainConfig d = small_domain(8, 1, 1.0);
  d.c_min = 3.0;
  helm::PressureField p;
  p.H = p.W = 8;
  p.data.resize(2 * 64);
  for (int i = 0; i < 8; ++i)
    for (int j = 0; j < 8; ++j) {
      const double x = j * d.train_hx(), y = i * d.train_hy();
      p.data[2 * (static_cast<size_t>(i) * 8 + j)] = static_cast<float>(2.0 * x + 3.0 * y + 1.0);
      p.data[2 * (static_cast<size_t>(i) * 8 + j) + 1] = static_cast<float>(-x + 0.5 * y);
    }
  // off-node, on-node, and far-strip extrapolated positions
  for (auto [x, y] : {std::pair{0.3, 0.7}, {2 * d.train_hx(), 3 * d.train_hy()}, {1.25, 1.2}}) {
    const cd t = helm::interp_field(p, d, x, y);
    EXPECT_NEAR(t.real(), 2.0 * x + 3.0 * y + 1.0, 1e-5);
    EXPECT_NEAR(t.imag(), -x + 0.5 * y, 1e-5);
  }
  EXPECT_THROW(helm::interp_field(p, d, -0.1, 0.5), ConfigError);
  EXPECT_THROW(helm::interp_field(p, d, 0.5, 1.3), ConfigError);
}

TEST(Reciprocity, SwappedSourceReceiverAgree) {
  DomainConfig d;  // experiment defaults, 15 Hz, refine 4
  // Smooth heterogeneous medium, wave speeds within [2.5, 3.5]
  grf::MaternParams mp;
  mp.lambda1 = mp.lambda2 = 0.2;
  auto smp = grf::build_sampler(mp, d.Lx, d.Ly, d.ny, d.nx);
  auto ws = grf::link_to_wavespeed(grf::sample_field(smp, 31), d.ny, d.nx, 2.5, 3.5, mp, 31);
  auto op = helm::assemble_operator(ws.grid, d, helm::BcMode::top_dirichlet);

  // Both points on training-grid nodes at equal depth
  const double depth = 4 * d.train_hy();
  const double xa = 8 * d.train_hx(), xb = 23 * d.train_hx();
  const auto record = [&](double sx, double rx) {
    auto rhs = helm::make_rhs(*op);
    helm::add_point_source(rhs, *op, {sx, depth});
    auto p = helm::restrict_to_training_grid(*op, helm::solve(*op, rhs));
    helm::ReceiverLine line;
    line.xs = {rx};
    line.depth = depth;
    return helm::restrict_to_receivers(p, d, line)[0];
  };
  const cd t_ab = record(xa, xb);
  const cd t_ba = record(xb, xa);
  EXPECT_LE(std::abs(t_ab - t_ba) / std::abs(t_ab), 0.02)
      << "a->b " << t_ab << " b->a " << t_ba;
}

TEST(Dataset, DeterministicWithSurfaceCondition) {
  helm::DataGenConfig gen;
  gen.dom = small_domain(16, 4, 7.5);
  gen.src = {0.635, 0.02};
  gen.n = 3;
  gen.seed = 11;
  auto a = helm::generate_dataset(gen);
  auto b = helm::generate_dataset(gen);
  EXPECT_EQ(a.n(), 3u);
  ASSERT_EQ(a.c.size(), b.c.size());
  for (size_t i = 0; i < a.c.size(); ++i) EXPECT_EQ(a.c[i], b.c[i]);
  ASSERT_EQ(a.p.size(), b.p.size());
  for (size_t i = 0; i < a.p.size(); ++i) EXPECT_EQ(a.p[i], b.p[i]);

  // top row is the eliminated Dirichlet row
  for (uint32_t s = 0; s < a.n(); ++s)
    for (int j = 0; j < 16; ++j) {
      const size_t base = (static_cast<size_t>(s) * 16 * 16 + static_cast<size_t>(j)) * 2;
      EXPECT_EQ(a.p[base], 0.0f);
      EXPECT_EQ(a.p[base + 1], 0.0f);
    }

  gen.n = 0;
  EXPECT_EQ(helm::generate_dataset(gen).n(), 0u);
}

TEST(Dataset, DeepRefineCompletes) {
  helm::DataGenConfig gen;
  gen.dom = small_domain(16, 8, 15.0);  // ppw 10.08 at refine 8
  gen.src = {0.635, 0.02};
  gen.n = 2;
  gen.seed = 4;
  auto ds = helm::generate_dataset(gen);
  EXPECT_EQ(ds.n(), 2u);
  for (float v : ds.p) EXPECT_TRUE(std::isfinite(v));
}

TEST(Forward, TraceMatrixShapeAndSingleSourceReduction) {
  helm::ForwardGenConfig gen;
  gen.dom = small_domain(16, 4, 7.5);
  gen.n = 2;
  gen.n_src = 2;
  gen.n_rcv = 3;
  gen.seed = 21;
  auto ds = helm::generate_forward_dataset(gen);
  EXPECT_TRUE(ds.has_traces());
  EXPECT_EQ(ds.n(), 2u);
  EXPECT_EQ(ds.traces.size(), 2u * 2u * 3u * 2u);

  // one source, one receiver reduces to restrict(solve(...))
  helm::ForwardGenConfig g1 = gen;
  g1.n = 1;
  g1.n_src = 1;
  g1.n_rcv = 1;
  auto d1 = helm::generate_forward_dataset(g1);
  const uint64_t seed0 = rng::derive_seed(g1.seed, 0);
  auto smp = grf::build_sampler(g1.grf_params, g1.dom.Lx, g1.dom.Ly, g1.dom.ny, g1.dom.nx);
  auto ws = grf::link_to_wavespeed(grf::sample_field(smp, seed0), g1.dom.ny, g1.dom.nx,
                                   g1.dom.c_min, g1.dom.c_max, g1.grf_params, seed0);
  auto op = helm::assemble_operator(ws.grid, g1.dom, helm::BcMode::top_dirichlet);
  auto rhs = helm::make_rhs(*op);
  helm::add_point_source(rhs, *op, helm::make_source_line(1, g1.dom, g1.src_depth)[0]);
  auto p = helm::restrict_to_training_grid(*op, helm::solve(*op, rhs));
  auto tr = helm::restrict_to_receivers(p, g1.dom, helm::make_receiver_line(1, g1.dom, g1.rcv_depth));
  EXPECT_FLOAT_EQ(d1.traces[0], static_cast<float>(tr[0].real()));
  EXPECT_FLOAT_EQ(d1.traces[1], static_cast<float>(tr[0].imag()));
}
