#include <cmath>
#include <cstring>
#include <filesystem>
#include <vector>

#include <gtest/gtest.h>

#include "nolab/train.hpp"

using namespace nolab;
using ad::DiffArray;
using train::TrainConfig;

namespace {

std::string tmp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

arch::ArchConfig tiny_arch(arch::Kind k = arch::Kind::s_no_eps_v1) {
  arch::ArchConfig c;
  c.kind = k;
  c.modes = 2;
  c.width = 4;
  c.layer_spec = {1};
  c.lift_hidden = 6;
  return c;
}

// Smooth random media with a pointwise-affine pressure target; a tiny model
// can drive this loss near zero, which is what the mechanics tests need.
io::Dataset synth_dataset(int n, int H, int W, uint64_t seed) {
  io::Dataset d;
  d.H = H;
  d.W = W;
  d.c.resize(static_cast<size_t>(n) * H * W);
  d.p.resize(static_cast<size_t>(n) * H * W * 2);
  for (int s = 0; s < n; ++s) {
    rng::Prng g(rng::derive_seed(seed, static_cast<uint64_t>(s)));
    const double a1 = g.uniform01(), a2 = g.uniform01(), ph = 6.28318530718 * g.uniform01();
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double x = static_cast<double>(j) / W, y = static_cast<double>(i) / H;
        const double v = 3.25 + 1.2 * (a1 * std::cos(6.28318530718 * x + ph) +
                                       a2 * std::sin(6.28318530718 * y));
        const size_t at = (static_cast<size_t>(s) * H + i) * W + j;
        d.c[at] = static_cast<float>(v);
        d.p[2 * at] = static_cast<float>(0.5 * v - 1.0);
        d.p[2 * at + 1] = static_cast<float>(0.25 * v + 0.5);
      }
  }
  return d;
}

std::vector<float> snapshot(arch::OperatorModel& m) {
  std::vector<float> w;
  m.for_each_param([&](const std::string&, DiffArray& p) {
    if (p.dtype == ad::Dtype::real32)
      w.insert(w.end(), p.re.begin(), p.re.end());
    else
      for (const auto& v : p.cx) {
        w.push_back(v.real());
        w.push_back(v.imag());
      }
  });
  return w;
}

TrainConfig tiny_cfg(int64_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch = 4;
  c.n_train = 8;
  c.n_val = 2;
  c.n_test = 2;
  c.seed = 5;
  return c;
}

}  // namespace

TEST(StepLr, FloorSchedule) {
  EXPECT_DOUBLE_EQ(train::steplr(0, 1e-3, 40, 0.5), 1e-3);
  EXPECT_DOUBLE_EQ(train::steplr(39, 1e-3, 40, 0.5), 1e-3);
  EXPECT_DOUBLE_EQ(train::steplr(40, 1e-3, 40, 0.5), 5e-4);
  EXPECT_DOUBLE_EQ(train::steplr(100, 1e-3, 40, 0.5), 2.5e-4);
  EXPECT_THROW(train::steplr(1, 1e-3, 0, 0.5), ConfigError);
}

TEST(AdamW, ScalarStepMatchesHandComputation) {
  double m = 0.0, v = 0.0;
  const double w1 = train::adamw_component(1.0, 1.0, m, v, 1, 0.1, 0.0);
  EXPECT_DOUBLE_EQ(w1, 0.90000000099999999);
  EXPECT_DOUBLE_EQ(m, 0.1);
  EXPECT_DOUBLE_EQ(v, 0.001);
}

TEST(AdamW, ZeroGradZeroDecayIsIdentity) {
  double m = 0.0, v = 0.0;
  EXPECT_DOUBLE_EQ(train::adamw_component(0.73, 0.0, m, v, 1, 0.1, 0.0), 0.73);

  auto model = arch::build(tiny_arch(), 8, 8, 3);
  const auto before = snapshot(model);
  auto opt = train::make_adamw(model);
  ad::GradTape tape;
  model.for_each_param([&](const std::string&, DiffArray& p) { tape.watch(p); });
  train::adamw_step(model, tape, opt, 1e-3, 0.0);  // no backward ran: all grads zero
  EXPECT_EQ(snapshot(model), before);
  EXPECT_EQ(opt.step, 1u);
}

TEST(AdamW, DecayOnlyStrictlyShrinksParameters) {
  auto model = arch::build(tiny_arch(), 8, 8, 3);
  const auto before = snapshot(model);
  auto opt = train::make_adamw(model);
  ad::GradTape tape;
  model.for_each_param([&](const std::string&, DiffArray& p) { tape.watch(p); });
  train::adamw_step(model, tape, opt, 0.1, 0.01);
  const auto after = snapshot(model);
  double n0 = 0.0, n1 = 0.0;
  for (size_t i = 0; i < before.size(); ++i) {
    n0 += static_cast<double>(before[i]) * before[i];
    n1 += static_cast<double>(after[i]) * after[i];
    if (before[i] != 0.0f) EXPECT_LT(std::fabs(after[i]), std::fabs(before[i]));
  }
  EXPECT_LT(n1, n0);
}

TEST(Loss, RelL2AnchorValues) {
  DiffArray ref = DiffArray::zeros({2, 3, 2});
  rng::Prng g(7);
  for (auto& v : ref.re) v = static_cast<float>(1.0 + g.uniform01());
  DiffArray pred = ref;
  EXPECT_DOUBLE_EQ(ad::rel_l2_batch(nullptr, pred, ref).value, 0.0);
  for (auto& v : pred.re) v = 0.0f;
  EXPECT_DOUBLE_EQ(ad::rel_l2_batch(nullptr, pred, ref).value, 1.0);
  for (size_t i = 0; i < pred.re.size(); ++i) pred.re[i] = 2.0f * ref.re[i];
  EXPECT_NEAR(ad::rel_l2_batch(nullptr, pred, ref).value, 1.0, 1e-6);
  DiffArray zero = DiffArray::zeros({2, 3, 2});
  EXPECT_THROW(ad::rel_l2_batch(nullptr, pred, zero), std::invalid_argument);
}

TEST(Train, ZeroEpochsLeavesModelUntouched) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  auto model = arch::build(tiny_arch(), 8, 8, 3);
  const auto before = snapshot(model);
  train::Metrics m = train::train(model, d, tiny_cfg(0));
  EXPECT_EQ(snapshot(model), before);
  EXPECT_TRUE(m.train_loss.empty());
  EXPECT_TRUE(m.val_loss.empty());
  EXPECT_GT(m.test_loss, 0.0);
}

TEST(Train, ConfigValidation) {
  io::Dataset d = synth_dataset(8, 8, 8, 11);
  auto model = arch::build(tiny_arch(), 8, 8, 3);
  TrainConfig c = tiny_cfg(1);  // 8+2+2 > 8
  EXPECT_THROW(train::train(model, d, c), ConfigError);
  c.n_train = 4;
  c.n_val = 2;
  c.n_test = 2;
  c.batch = 0;
  EXPECT_THROW(train::train(model, d, c), ConfigError);
}

TEST(Train, OverfitsTinyAffineTask) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  auto model = arch::build(tiny_arch(), 8, 8, 3);
  TrainConfig cfg = tiny_cfg(150);
  cfg.lr = 3e-3;
  train::Metrics m = train::train(model, d, cfg);
  EXPECT_EQ(m.train_loss.size(), 150u);
  EXPECT_LT(m.train_loss.back(), m.train_loss.front());
  const double train_loss = train::evaluate(model, d, 0, cfg.n_train, cfg.batch).mean;
  EXPECT_LT(train_loss, 0.1);
}

TEST(Train, RerunIsBitwiseDeterministic) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  auto a = arch::build(tiny_arch(arch::Kind::s_no_eps_v2), 8, 8, 3);
  auto b = arch::build(tiny_arch(arch::Kind::s_no_eps_v2), 8, 8, 3);
  train::Metrics ma = train::train(a, d, tiny_cfg(4));
  train::Metrics mb = train::train(b, d, tiny_cfg(4));
  EXPECT_EQ(snapshot(a), snapshot(b));
  EXPECT_EQ(ma.train_loss, mb.train_loss);
  EXPECT_EQ(ma.val_loss, mb.val_loss);
  EXPECT_EQ(ma.test_loss, mb.test_loss);

  auto c = arch::build(tiny_arch(arch::Kind::s_no_eps_v2), 8, 8, 3);
  TrainConfig other = tiny_cfg(4);
  other.seed = 6;
  train::Metrics mc = train::train(c, d, other);
  EXPECT_NE(ma.test_loss, mc.test_loss);
}

TEST(Train, NonFiniteLossAborts) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  auto model = arch::build(tiny_arch(), 8, 8, 3);
  TrainConfig cfg = tiny_cfg(5);
  cfg.lr = 1e25;  // blows the parameters up within a step or two
  EXPECT_THROW(train::train(model, d, cfg), NumericError);
}

TEST(Train, V2GatesActiveInTrainModeOnly) {
  io::Dataset d = synth_dataset(8, 8, 8, 11);
  arch::ArchConfig ac = tiny_arch(arch::Kind::s_no_eps_v2);
  ac.layer_spec = {4};
  ac.droppath_final_keep = 0.5;
  auto model = arch::build(ac, 8, 8, 3);
  std::vector<int64_t> ids{0, 1, 2, 3};
  DiffArray in = train::detail::batch_input(d, ids, 0, 4, model.cfg);
  DiffArray target = train::detail::batch_target(d, ids, 0, 4);
  rng::Prng g(9);
  const double l1 = ad::rel_l2_batch(nullptr, arch::forward(model, in, arch::Mode::train, nullptr, &g), target).value;
  const double l2 = ad::rel_l2_batch(nullptr, arch::forward(model, in, arch::Mode::train, nullptr, &g), target).value;
  EXPECT_NE(l1, l2);
  const double e1 = ad::rel_l2_batch(nullptr, arch::forward(model, in, arch::Mode::eval), target).value;
  const double e2 = ad::rel_l2_batch(nullptr, arch::forward(model, in, arch::Mode::eval), target).value;
  EXPECT_EQ(e1, e2);
}

TEST(Evaluate, EmptyAndOutOfRange) {
  io::Dataset d = synth_dataset(8, 8, 8, 11);
  auto model = arch::build(tiny_arch(), 8, 8, 3);
  train::EvalResult r = train::evaluate(model, d, 0, 0, 4);
  EXPECT_TRUE(r.per_sample.empty());
  EXPECT_THROW(train::evaluate(model, d, 4, 8, 4), ConfigError);
}

TEST(Checkpoint, ResumeReproducesUninterruptedRunBitwise) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  const std::string path = tmp_path("nolab_test_resume.nock");
  arch::ArchConfig ac = tiny_arch(arch::Kind::s_no_eps_v2);

  auto full = arch::build(ac, 8, 8, 3);
  train::Metrics mfull = train::train(
      full, d, tiny_cfg(6),
      [&](int64_t next_epoch, const arch::OperatorModel& m, const train::AdamW& opt,
          const rng::Prng& rng, const train::Metrics&) {
        if (next_epoch == 3)
          io::save_checkpoint(path, train::make_checkpoint(m, opt, rng, 3));
      });

  io::Checkpoint ck = io::load_checkpoint(path);
  EXPECT_EQ(ck.epoch, 3u);
  auto resumed = train::model_from_checkpoint(ck);
  auto opt = train::optimizer_from_checkpoint(ck, resumed);
  rng::Prng trng(0);
  trng.load_state(ck.rng_state);
  train::Metrics mres = train::train_from(resumed, d, tiny_cfg(6), opt, trng, ck.epoch);

  EXPECT_EQ(snapshot(resumed), snapshot(full));
  EXPECT_EQ(mres.test_loss, mfull.test_loss);
  ASSERT_EQ(mres.train_loss.size(), 3u);
  for (size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(mres.train_loss[e], mfull.train_loss[e + 3]);
    EXPECT_EQ(mres.val_loss[e], mfull.val_loss[e + 3]);
  }
  std::filesystem::remove(path);
}

TEST(Checkpoint, ConfigTextRoundTrip) {
  arch::ArchConfig c;
  c.kind = arch::Kind::res_no;
  c.modes = 5;
  c.width = 12;
  c.layer_spec = {3, 3, 9, 3};
  c.act = ad::Act::identity;
  c.droppath_final_keep = 0.65;
  c.lift_hidden = 7;
  const std::string text = train::arch_config_text(c, 16, 32);
  int64_t gh = 0, gw = 0;
  arch::ArchConfig back = train::arch_config_parse(io::parse_config_text(text), gh, gw);
  EXPECT_EQ(back.kind, c.kind);
  EXPECT_EQ(back.modes, c.modes);
  EXPECT_EQ(back.width, c.width);
  EXPECT_EQ(back.layer_spec, c.layer_spec);
  EXPECT_EQ(back.act, c.act);
  EXPECT_DOUBLE_EQ(back.droppath_final_keep, c.droppath_final_keep);
  EXPECT_EQ(back.lift_hidden, c.lift_hidden);
  EXPECT_EQ(gh, 16);
  EXPECT_EQ(gw, 32);
}

TEST(Landscape, RecoversPlantedSubspace) {
  const size_t D = 50;
  rng::Prng g(13);
  std::vector<double> u(D), v(D), mu(D);
  for (size_t i = 0; i < D; ++i) {
    u[i] = g.normal();
    v[i] = g.normal();
    mu[i] = g.normal();
  }
  double nu = 0.0;
  for (size_t i = 0; i < D; ++i) nu += u[i] * u[i];
  for (size_t i = 0; i < D; ++i) u[i] /= std::sqrt(nu);
  double uv = 0.0;
  for (size_t i = 0; i < D; ++i) uv += u[i] * v[i];
  for (size_t i = 0; i < D; ++i) v[i] -= uv * u[i];
  double nv = 0.0;
  for (size_t i = 0; i < D; ++i) nv += v[i] * v[i];
  for (size_t i = 0; i < D; ++i) v[i] /= std::sqrt(nv);

  std::vector<std::vector<double>> traj;
  for (int k = 0; k < 6; ++k) {
    const double a = 0.5 * k + 0.1 * k * k, b = 1.0 - 0.3 * k;
    std::vector<double> t(D);
    for (size_t i = 0; i < D; ++i) t[i] = mu[i] + a * u[i] + b * v[i];
    traj.push_back(std::move(t));
  }
  auto [d1, d2] = train::principal_directions(traj);

  // principal angles: singular values of [u v]^T [d1 d2] must be ~1
  auto dot = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < D; ++i) s += a[i] * b[i];
    return s;
  };
  Eigen::Matrix2d M;
  M << dot(u, d1), dot(u, d2), dot(v, d1), dot(v, d2);
  Eigen::JacobiSVD<Eigen::Matrix2d> svd(M);
  EXPECT_LT(std::acos(std::min(1.0, svd.singularValues()(0))), 1e-3);
  EXPECT_LT(std::acos(std::min(1.0, svd.singularValues()(1))), 1e-3);

  // orthonormality of the returned directions
  EXPECT_NEAR(dot(d1, d1), 1.0, 1e-6);
  EXPECT_NEAR(dot(d2, d2), 1.0, 1e-6);
  EXPECT_NEAR(dot(d1, d2), 0.0, 1e-6);
}

TEST(Landscape, DegenerateTrajectoriesRejected) {
  std::vector<std::vector<double>> two(2, std::vector<double>(5, 1.0));
  EXPECT_THROW(train::principal_directions(two), ConfigError);

  std::vector<std::vector<double>> rank1;
  for (int k = 0; k < 5; ++k) {
    std::vector<double> t(6, 0.0);
    t[2] = 1.0 * k;
    rank1.push_back(std::move(t));
  }
  EXPECT_THROW(train::principal_directions(rank1), NumericError);
}

TEST(Landscape, CenterEqualsValidationLossExactly) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  auto model = arch::build(tiny_arch(), 8, 8, 3);
  TrainConfig cfg = tiny_cfg(4);
  std::vector<std::vector<double>> traj;
  train::train(model, d, cfg,
               [&](int64_t, const arch::OperatorModel& m, const train::AdamW&, const rng::Prng&,
                   const train::Metrics&) { traj.push_back(train::flatten_params(m)); });
  ASSERT_EQ(traj.size(), 4u);

  const auto before = snapshot(model);
  train::Landscape L =
      train::loss_landscape(model, traj, d, cfg.n_train, cfg.n_val, 5, 0.5, cfg.batch);
  EXPECT_EQ(snapshot(model), before);  // restored bit for bit
  const double val = train::evaluate(model, d, cfg.n_train, cfg.n_val, cfg.batch).mean;
  EXPECT_EQ(L.center_loss, val);
  EXPECT_EQ(L.values[2 * 5 + 2], L.center_loss);
  EXPECT_EQ(L.offsets[2], 0.0);
  double o11 = 0.0, o22 = 0.0, o12 = 0.0;
  for (size_t i = 0; i < L.dir1.size(); ++i) {
    o11 += L.dir1[i] * L.dir1[i];
    o22 += L.dir2[i] * L.dir2[i];
    o12 += L.dir1[i] * L.dir2[i];
  }
  EXPECT_NEAR(o11, 1.0, 1e-6);
  EXPECT_NEAR(o22, 1.0, 1e-6);
  EXPECT_NEAR(o12, 0.0, 1e-6);

  EXPECT_THROW(train::loss_landscape(model, traj, d, 0, 4, 4, 0.5, 4), ConfigError);
}

TEST(Ablation, SingleCellMatchesPlainTraining) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  arch::ArchConfig base = tiny_arch(arch::Kind::no);
  TrainConfig cfg = tiny_cfg(3);
  auto cells = train::ablation_run({arch::Kind::no}, {ad::Act::identity}, base, d, cfg);
  ASSERT_EQ(cells.size(), 1u);
  EXPECT_TRUE(std::isfinite(cells[0].metrics.test_loss));

  arch::ArchConfig same = base;
  same.act = ad::Act::identity;
  auto model = arch::build(same, 8, 8, cfg.seed);
  train::Metrics direct = train::train(model, d, cfg);
  EXPECT_EQ(cells[0].metrics.test_loss, direct.test_loss);
}

TEST(Restarts, OneRowPerSeed) {
  io::Dataset d = synth_dataset(12, 8, 8, 11);
  TrainConfig cfg = tiny_cfg(2);
  cfg.n_restarts = 3;
  auto rows = train::train_restarts(tiny_arch(), d, cfg);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_NE(rows[0].seed, rows[1].seed);
  EXPECT_NE(rows[0].test_loss, rows[1].test_loss);
  const std::string csv = train::restarts_csv(rows);
  EXPECT_NE(csv.find("restart,seed,test_rel_l2"), std::string::npos);
}

namespace {

helm::DomainConfig small_ood_domain() {
  helm::DomainConfig dom;
  dom.nx = dom.ny = 16;
  dom.refine = 4;
  dom.freq = 7.5;
  return dom;
}

}  // namespace

TEST(Ood, TableShapeAndDeterminism) {
  auto model = arch::build(tiny_arch(), 16, 16, 3);
  const auto fams = grf::ood_family_table();
  std::vector<grf::OodFamilySpec> two{fams[0], fams[7]};
  auto rows = train::ood_eval(model, two, 4, small_ood_domain(), 99);
  ASSERT_EQ(rows.size(), 2u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.n, 4);
    EXPECT_TRUE(std::isfinite(r.mean));
    EXPECT_GT(r.mean, 0.0);
    EXPECT_GE(r.se, 0.0);
  }
  auto again = train::ood_eval(model, two, 4, small_ood_domain(), 99);
  EXPECT_EQ(rows[0].mean, again[0].mean);
  EXPECT_EQ(rows[1].mean, again[1].mean);

  EXPECT_TRUE(train::ood_eval(model, two, 0, small_ood_domain(), 99).empty());
  const std::string csv = train::ood_csv(rows);
  EXPECT_NE(csv.find("family,lambda1,lambda2,c_min,c_max,nu,n,rel_l2,se"), std::string::npos);
}

TEST(Hyper, TrainingLoopRunsAndRoundTrips) {
  helm::ForwardGenConfig fg;
  fg.dom = small_ood_domain();
  fg.n = 8;
  fg.n_src = 2;
  fg.n_rcv = 4;
  fg.seed = 3;
  io::Dataset d = helm::generate_forward_dataset(fg);

  arch::ArchConfig ac = tiny_arch();
  auto h = arch::hyper_build(ac, 16, 16, fg.n_rcv, 7);
  TrainConfig cfg = tiny_cfg(2);
  cfg.n_train = 4;
  cfg.n_val = 2;
  cfg.n_test = 2;
  train::Metrics m = train::train_hyper(h, d, fg, cfg);
  EXPECT_EQ(m.train_loss.size(), 2u);
  for (double v : m.train_loss) EXPECT_TRUE(std::isfinite(v));
  EXPECT_TRUE(std::isfinite(m.test_loss));

  train::EvalResult e1 = train::evaluate_hyper(h, d, fg, 0, 4, 2);
  train::EvalResult e2 = train::evaluate_hyper(h, d, fg, 0, 4, 2);
  EXPECT_EQ(e1.per_sample, e2.per_sample);

  const std::string path = tmp_path("nolab_test_hyper.nock");
  io::save_checkpoint(path, train::make_hyper_checkpoint(h));
  auto back = train::hyper_from_checkpoint(io::load_checkpoint(path));
  train::EvalResult e3 = train::evaluate_hyper(back, d, fg, 0, 4, 2);
  EXPECT_EQ(e1.per_sample, e3.per_sample);
  std::filesystem::remove(path);

  helm::ForwardGenConfig wrong = fg;
  wrong.n_src = 3;
  EXPECT_THROW(train::train_hyper(h, d, wrong, cfg), ConfigError);
}

TEST(Csv, MetricsAndLandscapeShapes) {
  train::Metrics m;
  m.train_loss = {0.5, 0.4};
  m.val_loss = {0.6, 0.5};
  m.test_loss = 0.45;
  const std::string csv = train::metrics_csv(m);
  EXPECT_NE(csv.find("epoch,train_rel_l2,val_rel_l2"), std::string::npos);
  EXPECT_NE(csv.find("test,,0.45"), std::string::npos);

  train::Landscape L;
  L.grid_n = 3;
  L.offsets = {-0.1, 0.0, 0.1};
  L.values.assign(9, 0.25);
  const std::string lcsv = train::landscape_csv(L);
  EXPECT_NE(lcsv.find("alpha,beta,rel_l2"), std::string::npos);
  EXPECT_EQ(static_cast<int>(std::count(lcsv.begin(), lcsv.end(), '\n')), 10);
}
