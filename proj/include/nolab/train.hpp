#pragma once

// Training harness: AdamW with a step scheduler on the relative L2 loss,
// deterministic splits and shuffles, OOD family evaluation, checkpoint
// round trips, loss-landscape grids, ablations, and the hypernetwork loop.
//
// Determinism contract: a run is a pure function of (dataset bytes, config,
// seed). One Prng drives epoch shuffles and v2 gate draws; checkpoints store
// its exact state so an interrupted run continues bit-identically. Metrics
// wall time stays out of persisted artifacts for that reason.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "nolab/arch.hpp"
#include "nolab/errors.hpp"
#include "nolab/helmholtz.hpp"
#include "nolab/io.hpp"
#include "nolab/rng.hpp"
#include "nolab/tensor.hpp"

namespace nolab::train {

using ad::DiffArray;
using ad::GradTape;

struct TrainConfig {
  double lr = 1e-3;
  int64_t step_size = 40;
  double gamma = 0.5;
  int64_t epochs = 100;
  double weight_decay = 1e-5;
  int64_t batch = 32;
  uint64_t seed = 1;
  int64_t n_train = 512, n_val = 128, n_test = 512;
  int64_t n_restarts = 1;

  void validate(uint32_t dataset_n) const {
    if (lr <= 0.0) throw ConfigError("train: lr must be positive");
    if (step_size < 1) throw ConfigError("train: step_size must be >= 1");
    if (gamma <= 0.0) throw ConfigError("train: gamma must be positive");
    if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (n_train < 1 || n_val < 1 || n_test < 1) throw ConfigError("train: splits must be positive");
    if (n_restarts < 1) throw ConfigError("train: n_restarts must be >= 1");
    if (static_cast<uint64_t>(n_train) + n_val + n_test > dataset_n)
      throw ConfigError("train: splits exceed dataset size (" + std::to_string(dataset_n) + ")");
  }
};

struct Metrics {
  std::vector<double> train_loss, val_loss;  // one entry per epoch
  double test_loss = 0.0;
  double wall_seconds = 0.0;  // diagnostic only, never persisted
};

inline double steplr(int64_t epoch, double lr0, int64_t step_size, double gamma) {
  if (step_size < 1) throw ConfigError("steplr: step_size must be >= 1");
  return lr0 * std::pow(gamma, static_cast<double>(epoch / step_size));
}

// ---------------------------------------------------------------------------
// AdamW. Moments live in float32 so checkpoints round-trip exactly; each
// component update runs in float64. Complex parameters are treated as real
// and imaginary component pairs.

struct AdamConsts {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

// One component; m and v are updated in place. Decay is decoupled and applied
// before the moment update.
inline double adamw_component(double w, double g, double& m, double& v, uint64_t t, double lr,
                              double wd, const AdamConsts& k = {}) {
  w -= lr * wd * w;
  m = k.beta1 * m + (1.0 - k.beta1) * g;
  v = k.beta2 * v + (1.0 - k.beta2) * g * g;
  const double mhat = m / (1.0 - std::pow(k.beta1, static_cast<double>(t)));
  const double vhat = v / (1.0 - std::pow(k.beta2, static_cast<double>(t)));
  return w - lr * mhat / (std::sqrt(vhat) + k.eps);
}

struct AdamW {
  AdamConsts k;
  uint64_t step = 0;
  std::vector<std::string> names;       // enumeration order of for_each_param
  std::vector<std::vector<float>> m, v;  // complex params hold 2 floats per entry
};

template <typename Model>
AdamW make_adamw(Model& model) {
  AdamW opt;
  model.for_each_param([&](const std::string& name, DiffArray& p) {
    const size_t n = p.dtype == ad::Dtype::real32 ? p.re.size() : p.cx.size() * 2;
    opt.names.push_back(name);
    opt.m.emplace_back(n, 0.0f);
    opt.v.emplace_back(n, 0.0f);
  });
  return opt;
}

// Applies one step using the gradients recorded on `tape`. Parameters must
// have been watched on that tape before the forward pass.
template <typename Model>
void adamw_step(Model& model, GradTape& tape, AdamW& opt, double lr, double wd) {
  ++opt.step;
  size_t idx = 0;
  model.for_each_param([&](const std::string& name, DiffArray& p) {
    if (idx >= opt.names.size() || opt.names[idx] != name)
      throw ConfigError("optimizer state does not match model parameters at '" + name + "'");
    auto& m = opt.m[idx];
    auto& v = opt.v[idx];
    auto upd = [&](float& w, double g, size_t j) {
      double md = m[j], vd = v[j];
      w = static_cast<float>(adamw_component(w, g, md, vd, opt.step, lr, wd, opt.k));
      m[j] = static_cast<float>(md);
      v[j] = static_cast<float>(vd);
    };
    if (p.dtype == ad::Dtype::real32) {
      const auto& g = tape.gr(p.node);
      for (size_t j = 0; j < p.re.size(); ++j) upd(p.re[j], g[j], j);
    } else {
      const auto& g = tape.gc(p.node);
      for (size_t j = 0; j < p.cx.size(); ++j) {
        float re = p.cx[j].real(), im = p.cx[j].imag();
        upd(re, g[j].real(), 2 * j);
        upd(im, g[j].imag(), 2 * j + 1);
        p.cx[j] = ad::cfloat(re, im);
      }
    }
    ++idx;
  });
  if (idx != opt.names.size()) throw ConfigError("optimizer state has extra parameter entries");
}

// ---------------------------------------------------------------------------
// Dataset views. Splits are contiguous: the generator draws i.i.d. samples,
// so order carries no information.

struct Splits {
  int64_t train0, n_train, val0, n_val, test0, n_test;
};

inline Splits make_splits(const TrainConfig& cfg, uint32_t dataset_n) {
  cfg.validate(dataset_n);
  return Splits{0, cfg.n_train, cfg.n_train, cfg.n_val, cfg.n_train + cfg.n_val, cfg.n_test};
}

namespace detail {

inline DiffArray batch_input(const io::Dataset& d, const std::vector<int64_t>& ids, size_t at,
                             size_t bn, const arch::ArchConfig& cfg) {
  const size_t hw = static_cast<size_t>(d.H) * d.W;
  std::vector<float> c(bn * hw);
  for (size_t b = 0; b < bn; ++b)
    std::copy_n(d.c.data() + static_cast<size_t>(ids[at + b]) * hw, hw, c.data() + b * hw);
  return arch::make_input(c, static_cast<int64_t>(bn), d.H, d.W, cfg);
}

inline DiffArray batch_target(const io::Dataset& d, const std::vector<int64_t>& ids, size_t at,
                              size_t bn) {
  const size_t hw2 = static_cast<size_t>(d.H) * d.W * 2;
  DiffArray t = DiffArray::zeros({static_cast<int64_t>(bn), d.H, d.W, 2});
  for (size_t b = 0; b < bn; ++b)
    std::copy_n(d.p.data() + static_cast<size_t>(ids[at + b]) * hw2, hw2, t.re.data() + b * hw2);
  return t;
}

inline double sample_rel_l2(const float* pred, const float* ref, size_t m) {
  double d2 = 0.0, r2 = 0.0;
  for (size_t i = 0; i < m; ++i) {
    const double dd = static_cast<double>(pred[i]) - ref[i];
    d2 += dd * dd;
    r2 += static_cast<double>(ref[i]) * ref[i];
  }
  if (r2 == 0.0) throw ConfigError("rel_l2: reference has zero norm");
  return std::sqrt(d2 / r2);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Evaluation: eval-mode forward, per-sample relative L2 plus the mean.

struct EvalResult {
  double mean = 0.0;
  std::vector<double> per_sample;

  double se() const {
    const size_t n = per_sample.size();
    if (n < 2) return 0.0;
    double s2 = 0.0;
    for (double v : per_sample) s2 += (v - mean) * (v - mean);
    return std::sqrt(s2 / (static_cast<double>(n) - 1.0) / static_cast<double>(n));
  }
};

inline EvalResult evaluate(arch::OperatorModel& model, const io::Dataset& d, int64_t first,
                           int64_t count, int64_t batch) {
  if (d.has_traces()) throw ConfigError("evaluate: needs a field dataset");
  if (first < 0 || count < 0 || static_cast<uint64_t>(first + count) > d.n())
    throw ConfigError("evaluate: sample range out of bounds");
  EvalResult r;
  if (count == 0) return r;
  const size_t hw2 = static_cast<size_t>(d.H) * d.W * 2;
  std::vector<int64_t> ids(static_cast<size_t>(count));
  std::iota(ids.begin(), ids.end(), first);
  for (size_t at = 0; at < ids.size(); at += static_cast<size_t>(batch)) {
    const size_t bn = std::min(static_cast<size_t>(batch), ids.size() - at);
    DiffArray in = detail::batch_input(d, ids, at, bn, model.cfg);
    DiffArray target = detail::batch_target(d, ids, at, bn);
    DiffArray out = arch::forward(model, in, arch::Mode::eval);
    for (size_t b = 0; b < bn; ++b)
      r.per_sample.push_back(
          detail::sample_rel_l2(out.re.data() + b * hw2, target.re.data() + b * hw2, hw2));
  }
  r.mean = std::accumulate(r.per_sample.begin(), r.per_sample.end(), 0.0) /
           static_cast<double>(r.per_sample.size());
  return r;
}

// ---------------------------------------------------------------------------
// Training loop. One Prng drives shuffles and stochastic-depth gates; epochs
// consume it strictly in order, so a checkpointed state resumes bitwise.

using EpochSink = std::function<void(int64_t next_epoch, const arch::OperatorModel&, const AdamW&,
                                     const rng::Prng&, const Metrics&)>;

inline Metrics train_from(arch::OperatorModel& model, const io::Dataset& d, const TrainConfig& cfg,
                          AdamW& opt, rng::Prng& trng, int64_t start_epoch,
                          const EpochSink& sink = {}) {
  if (d.has_traces()) throw ConfigError("train: needs a field dataset");
  const Splits sp = make_splits(cfg, d.n());
  if (model.grid_h != d.H || model.grid_w != d.W)
    throw ConfigError("train: model grid does not match dataset grid");
  const auto t0 = std::chrono::steady_clock::now();
  Metrics m;
  std::vector<int64_t> order(static_cast<size_t>(sp.n_train));
  for (int64_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = steplr(epoch, cfg.lr, cfg.step_size, cfg.gamma);
    std::iota(order.begin(), order.end(), sp.train0);
    trng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch)) {
      const size_t bn = std::min(static_cast<size_t>(cfg.batch), order.size() - at);
      DiffArray in = detail::batch_input(d, order, at, bn, model.cfg);
      DiffArray target = detail::batch_target(d, order, at, bn);
      GradTape tape;
      model.for_each_param([&](const std::string&, DiffArray& p) { tape.watch(p); });
      ad::ScalarNode loss =
          ad::rel_l2_batch(&tape, arch::forward(model, in, arch::Mode::train, &tape, &trng), target);
      if (!std::isfinite(loss.value))
        throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(at / cfg.batch) + ": non-finite training loss");
      tape.backward(loss.node);
      adamw_step(model, tape, opt, lr, cfg.weight_decay);
      loss_sum += loss.value * static_cast<double>(bn);
    }
    m.train_loss.push_back(loss_sum / static_cast<double>(sp.n_train));
    m.val_loss.push_back(evaluate(model, d, sp.val0, sp.n_val, cfg.batch).mean);
    if (sink) sink(epoch + 1, model, opt, trng, m);
  }
  m.test_loss = evaluate(model, d, sp.test0, sp.n_test, cfg.batch).mean;
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

inline Metrics train(arch::OperatorModel& model, const io::Dataset& d, const TrainConfig& cfg,
                     const EpochSink& sink = {}) {
  AdamW opt = make_adamw(model);
  rng::Prng trng(rng::derive_seed(cfg.seed, 101));  // training stream
  return train_from(model, d, cfg, opt, trng, 0, sink);
}

struct RestartRow {
  int64_t restart = 0;
  uint64_t seed = 0;
  double test_loss = 0.0;
};

// Multi-seed protocol: each restart draws its own model init and training
// stream from the master seed and reports one test-loss row.
inline std::vector<RestartRow> train_restarts(const arch::ArchConfig& ac, const io::Dataset& d,
                                              const TrainConfig& cfg) {
  std::vector<RestartRow> rows;
  for (int64_t r = 0; r < cfg.n_restarts; ++r) {
    TrainConfig one = cfg;
    one.seed = rng::derive_seed(cfg.seed, static_cast<uint64_t>(r));
    auto model = arch::build(ac, d.H, d.W, one.seed);
    rows.push_back({r, one.seed, train(model, d, one).test_loss});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// OOD evaluation: fresh solver datasets per family, model loss per family.

struct OodRow {
  grf::OodFamilySpec fam;
  int64_t n = 0;
  double mean = 0.0, se = 0.0;
};

inline std::vector<OodRow> ood_eval(arch::OperatorModel& model,
                                    const std::vector<grf::OodFamilySpec>& fams,
                                    int64_t n_per_family, const helm::DomainConfig& dom,
                                    uint64_t seed, int64_t batch = 32) {
  std::vector<OodRow> rows;
  if (n_per_family == 0) return rows;
  for (const auto& fam : fams) {
    helm::DataGenConfig g;
    g.dom = dom;
    g.dom.c_min = fam.c_min;
    g.dom.c_max = fam.c_max;
    g.grf_params.nu = fam.nu;
    g.grf_params.lambda1 = fam.lambda1;
    g.grf_params.lambda2 = fam.lambda2;
    g.n = n_per_family;
    g.seed = rng::derive_seed(seed, static_cast<uint64_t>(fam.id));
    io::Dataset ds = helm::generate_dataset(g);
    EvalResult r = evaluate(model, ds, 0, n_per_family, batch);
    rows.push_back({fam, n_per_family, r.mean, r.se()});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Parameter flattening and the loss-landscape grid. Complex entries split
// into real and imaginary components.

inline std::vector<double> flatten_params(const arch::OperatorModel& model) {
  std::vector<double> w;
  const_cast<arch::OperatorModel&>(model).for_each_param([&](const std::string&, DiffArray& p) {
    if (p.dtype == ad::Dtype::real32) {
      for (float v : p.re) w.push_back(v);
    } else {
      for (const auto& v : p.cx) {
        w.push_back(v.real());
        w.push_back(v.imag());
      }
    }
  });
  return w;
}

namespace detail {

inline void load_offset(arch::OperatorModel& model, const std::vector<double>& base,
                        const std::vector<double>& d1, const std::vector<double>& d2, double a,
                        double b) {
  size_t i = 0;
  auto next = [&]() {
    const double v = base[i] + a * d1[i] + b * d2[i];
    ++i;
    return static_cast<float>(v);
  };
  model.for_each_param([&](const std::string&, DiffArray& p) {
    if (p.dtype == ad::Dtype::real32) {
      for (auto& v : p.re) v = next();
    } else {
      for (auto& v : p.cx) {
        const float re = next(), im = next();
        v = ad::cfloat(re, im);
      }
    }
  });
  if (i != base.size()) throw ConfigError("landscape: flat vector does not match model");
}

}  // namespace detail

// Top-2 principal directions of the centered trajectory, via the Gram matrix
// of the (few) checkpoints. Unit length, mutually orthogonal.
inline std::pair<std::vector<double>, std::vector<double>> principal_directions(
    const std::vector<std::vector<double>>& traj) {
  const size_t K = traj.size();
  if (K < 3) throw ConfigError("landscape: need at least 3 checkpoints");
  const size_t D = traj[0].size();
  for (const auto& t : traj)
    if (t.size() != D) throw ConfigError("landscape: checkpoint sizes differ");

  Eigen::MatrixXd T(static_cast<Eigen::Index>(K), static_cast<Eigen::Index>(D));
  for (size_t k = 0; k < K; ++k)
    for (size_t j = 0; j < D; ++j) T(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(j)) = traj[k][j];
  T.rowwise() -= T.colwise().mean();

  const Eigen::MatrixXd G = T * T.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(G);
  if (es.info() != Eigen::Success) throw NumericError("landscape: eigen decomposition failed");
  const auto& ev = es.eigenvalues();  // ascending
  const double lmax = ev(static_cast<Eigen::Index>(K - 1));
  const double l2nd = ev(static_cast<Eigen::Index>(K - 2));
  if (lmax <= 0.0 || l2nd <= lmax * 1e-12)
    throw NumericError("landscape: trajectory has rank < 2");

  auto dir = [&](size_t which) {
    const Eigen::VectorXd u = es.eigenvectors().col(static_cast<Eigen::Index>(K - 1 - which));
    Eigen::VectorXd v = T.transpose() * u;
    return v;
  };
  Eigen::VectorXd v1 = dir(0), v2 = dir(1);
  v1.normalize();
  v2 -= v1.dot(v2) * v1;
  const double n2 = v2.norm();
  if (n2 == 0.0) throw NumericError("landscape: trajectory has rank < 2");
  v2 /= n2;
  return {std::vector<double>(v1.data(), v1.data() + v1.size()),
          std::vector<double>(v2.data(), v2.data() + v2.size())};
}

struct Landscape {
  int64_t grid_n = 0;
  double span = 0.0;
  std::vector<double> offsets;  // grid_n values shared by both axes
  std::vector<double> values;   // row-major, [i_alpha * grid_n + j_beta]
  std::vector<double> dir1, dir2;
  double center_loss = 0.0;
};

// Samples the loss on an affine grid around the final (current) parameters.
// grid_n must be odd so the exact zero offset is a grid point; the center
// evaluates the unperturbed parameters bit for bit.
inline Landscape loss_landscape(arch::OperatorModel& model,
                                const std::vector<std::vector<double>>& traj,
                                const io::Dataset& d, int64_t first, int64_t count,
                                int64_t grid_n, double span, int64_t batch) {
  if (grid_n < 3 || grid_n % 2 == 0) throw ConfigError("landscape: grid_n must be odd and >= 3");
  if (span <= 0.0) throw ConfigError("landscape: span must be positive");
  auto [d1, d2] = principal_directions(traj);
  const std::vector<double> base = flatten_params(model);
  if (base.size() != d1.size()) throw ConfigError("landscape: trajectory does not match model");

  Landscape L;
  L.grid_n = grid_n;
  L.span = span;
  L.dir1 = std::move(d1);
  L.dir2 = std::move(d2);
  const int64_t half = grid_n / 2;
  const double step = span / static_cast<double>(half);
  for (int64_t i = -half; i <= half; ++i) L.offsets.push_back(static_cast<double>(i) * step);

  L.values.resize(static_cast<size_t>(grid_n) * grid_n);
  for (int64_t i = 0; i < grid_n; ++i)
    for (int64_t j = 0; j < grid_n; ++j) {
      detail::load_offset(model, base, L.dir1, L.dir2, L.offsets[static_cast<size_t>(i)],
                          L.offsets[static_cast<size_t>(j)]);
      const double v = evaluate(model, d, first, count, batch).mean;
      L.values[static_cast<size_t>(i) * grid_n + j] = v;
      if (i == half && j == half) L.center_loss = v;
    }
  detail::load_offset(model, base, L.dir1, L.dir2, 0.0, 0.0);  // restore exactly
  return L;
}

// ---------------------------------------------------------------------------
// Ablation matrix: one trained model per (kind, activation) cell, same
// dataset and seed everywhere.

struct AblationCell {
  arch::Kind kind;
  ad::Act act;
  Metrics metrics;
};

inline std::vector<AblationCell> ablation_run(const std::vector<arch::Kind>& kinds,
                                              const std::vector<ad::Act>& acts,
                                              const arch::ArchConfig& base, const io::Dataset& d,
                                              const TrainConfig& cfg) {
  std::vector<AblationCell> cells;
  for (arch::Kind k : kinds)
    for (ad::Act a : acts) {
      arch::ArchConfig ac = base;
      ac.kind = k;
      ac.act = a;
      auto model = arch::build(ac, d.H, d.W, cfg.seed);
      cells.push_back({k, a, train(model, d, cfg)});
    }
  return cells;
}

// ---------------------------------------------------------------------------
// Hypernetwork loop. Trace datasets hold (sample, source, receiver) targets;
// each batch tiles samples over sources so one scalar loss covers all pairs.

namespace detail {

inline std::vector<std::pair<double, double>> source_positions(const io::Dataset& d,
                                                               const helm::ForwardGenConfig& fg) {
  if (!d.has_traces()) throw ConfigError("hyper: needs a trace dataset");
  if (d.n_src != fg.n_src || d.n_rcv != fg.n_rcv)
    throw ConfigError("hyper: dataset source/receiver counts do not match config");
  const auto srcs = helm::make_source_line(d.n_src, fg.dom, fg.src_depth);
  std::vector<std::pair<double, double>> pos;
  for (const auto& s : srcs) pos.emplace_back(s.x / fg.dom.Lx, s.depth / fg.dom.Ly);
  return pos;
}

// Rows ordered (sample, source) to match the trace payload layout.
inline std::pair<DiffArray, DiffArray> hyper_batch(const io::Dataset& d,
                                                   const std::vector<int64_t>& ids, size_t at,
                                                   size_t bn, const arch::ArchConfig& cfg,
                                                   const std::vector<std::pair<double, double>>& srcs) {
  const size_t hw = static_cast<size_t>(d.H) * d.W;
  const size_t S = srcs.size();
  std::vector<float> c(bn * S * hw);
  DiffArray pos = DiffArray::zeros({static_cast<int64_t>(bn * S), 2});
  for (size_t b = 0; b < bn; ++b)
    for (size_t s = 0; s < S; ++s) {
      std::copy_n(d.c.data() + static_cast<size_t>(ids[at + b]) * hw, hw,
                  c.data() + (b * S + s) * hw);
      pos.re[(b * S + s) * 2] = static_cast<float>(srcs[s].first);
      pos.re[(b * S + s) * 2 + 1] = static_cast<float>(srcs[s].second);
    }
  DiffArray in = arch::make_input(c, static_cast<int64_t>(bn * S), d.H, d.W, cfg);
  return {std::move(in), std::move(pos)};
}

inline DiffArray hyper_target(const io::Dataset& d, const std::vector<int64_t>& ids, size_t at,
                              size_t bn) {
  const size_t row = static_cast<size_t>(d.n_src) * d.n_rcv * 2;
  DiffArray t = DiffArray::zeros(
      {static_cast<int64_t>(bn) * d.n_src, d.n_rcv, 2});
  for (size_t b = 0; b < bn; ++b)
    std::copy_n(d.traces.data() + static_cast<size_t>(ids[at + b]) * row, row,
                t.re.data() + b * row);
  return t;
}

}  // namespace detail

inline EvalResult evaluate_hyper(arch::HyperModel& h, const io::Dataset& d,
                                 const helm::ForwardGenConfig& fg, int64_t first, int64_t count,
                                 int64_t batch) {
  const auto srcs = detail::source_positions(d, fg);
  if (first < 0 || count < 0 || static_cast<uint64_t>(first + count) > d.n())
    throw ConfigError("evaluate: sample range out of bounds");
  EvalResult r;
  if (count == 0) return r;
  const size_t row = static_cast<size_t>(d.n_src) * d.n_rcv * 2;
  const size_t src_row = static_cast<size_t>(d.n_rcv) * 2;
  std::vector<int64_t> ids(static_cast<size_t>(count));
  std::iota(ids.begin(), ids.end(), first);
  for (size_t at = 0; at < ids.size(); at += static_cast<size_t>(batch)) {
    const size_t bn = std::min(static_cast<size_t>(batch), ids.size() - at);
    auto [in, pos] = detail::hyper_batch(d, ids, at, bn, h.trunk.cfg, srcs);
    DiffArray target = detail::hyper_target(d, ids, at, bn);
    DiffArray out = arch::hyper_forward(h, in, pos, arch::Mode::eval);
    // per-sample value: mean over its sources of per-source trace errors
    for (size_t b = 0; b < bn; ++b) {
      double acc = 0.0;
      for (size_t s = 0; s < static_cast<size_t>(d.n_src); ++s)
        acc += detail::sample_rel_l2(out.re.data() + b * row + s * src_row,
                                     target.re.data() + b * row + s * src_row, src_row);
      r.per_sample.push_back(acc / static_cast<double>(d.n_src));
    }
  }
  r.mean = std::accumulate(r.per_sample.begin(), r.per_sample.end(), 0.0) /
           static_cast<double>(r.per_sample.size());
  return r;
}

inline Metrics train_hyper(arch::HyperModel& h, const io::Dataset& d,
                           const helm::ForwardGenConfig& fg, const TrainConfig& cfg) {
  const auto srcs = detail::source_positions(d, fg);
  const Splits sp = make_splits(cfg, d.n());
  const auto t0 = std::chrono::steady_clock::now();
  Metrics m;
  AdamW opt = make_adamw(h);
  rng::Prng trng(rng::derive_seed(cfg.seed, 101));
  std::vector<int64_t> order(static_cast<size_t>(sp.n_train));
  for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = steplr(epoch, cfg.lr, cfg.step_size, cfg.gamma);
    std::iota(order.begin(), order.end(), sp.train0);
    trng.shuffle(order);
    double loss_sum = 0.0;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(cfg.batch)) {
      const size_t bn = std::min(static_cast<size_t>(cfg.batch), order.size() - at);
      auto [in, pos] = detail::hyper_batch(d, order, at, bn, h.trunk.cfg, srcs);
      DiffArray target = detail::hyper_target(d, order, at, bn);
      GradTape tape;
      h.for_each_param([&](const std::string&, DiffArray& p) { tape.watch(p); });
      ad::ScalarNode loss = ad::rel_l2_batch(
          &tape, arch::hyper_forward(h, in, pos, arch::Mode::train, &tape, &trng), target);
      if (!std::isfinite(loss.value))
        throw NumericError("epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(at / cfg.batch) + ": non-finite training loss");
      tape.backward(loss.node);
      adamw_step(h, tape, opt, lr, cfg.weight_decay);
      loss_sum += loss.value * static_cast<double>(bn);
    }
    m.train_loss.push_back(loss_sum / static_cast<double>(sp.n_train));
    m.val_loss.push_back(evaluate_hyper(h, d, fg, sp.val0, sp.n_val, cfg.batch).mean);
  }
  m.test_loss = evaluate_hyper(h, d, fg, sp.test0, sp.n_test, cfg.batch).mean;
  m.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return m;
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing. The config text stores everything needed to rebuild
// the model; parameter and moment blobs are keyed by for_each_param names.

inline std::string act_name(ad::Act a) {
  switch (a) {
    case ad::Act::gelu: return "gelu";
    case ad::Act::relu: return "relu";
    case ad::Act::leaky_relu: return "leaky_relu";
    case ad::Act::identity: return "identity";
  }
  throw ConfigError("unknown activation");
}

inline ad::Act act_from_name(const std::string& s) {
  if (s == "gelu") return ad::Act::gelu;
  if (s == "relu") return ad::Act::relu;
  if (s == "leaky_relu") return ad::Act::leaky_relu;
  if (s == "identity") return ad::Act::identity;
  throw ConfigError("unknown activation name: " + s);
}

inline std::string arch_config_text(const arch::ArchConfig& c, int64_t grid_h, int64_t grid_w) {
  std::string spec;
  for (size_t i = 0; i < c.layer_spec.size(); ++i)
    spec += (i ? "," : "") + std::to_string(c.layer_spec[i]);
  std::string s;
  s += "arch.kind = " + std::string(arch::kind_name(c.kind)) + "\n";
  s += "arch.modes = " + std::to_string(c.modes) + "\n";
  s += "arch.width = " + std::to_string(c.width) + "\n";
  s += "arch.layer_spec = " + spec + "\n";
  s += "arch.act = " + act_name(c.act) + "\n";
  s += "arch.droppath_final_keep = " + io::fmt(c.droppath_final_keep) + "\n";
  s += "arch.mlp_expansion = " + std::to_string(c.mlp_expansion) + "\n";
  s += "arch.lift_hidden = " + std::to_string(c.lift_hidden) + "\n";
  s += "arch.positional_encoding = " + std::string(c.positional_encoding ? "true" : "false") + "\n";
  s += "arch.out_channels = " + std::to_string(c.out_channels) + "\n";
  s += "grid.h = " + std::to_string(grid_h) + "\n";
  s += "grid.w = " + std::to_string(grid_w) + "\n";
  return s;
}

inline std::vector<int> parse_layer_spec(const std::string& s) {
  std::vector<int> out;
  size_t at = 0;
  while (at <= s.size()) {
    const size_t comma = s.find(',', at);
    const std::string tok = io::trim(s.substr(at, comma == std::string::npos ? std::string::npos
                                                                             : comma - at));
    out.push_back(static_cast<int>(io::RunConfig::parse_int("arch.layer_spec", tok)));
    if (comma == std::string::npos) break;
    at = comma + 1;
  }
  return out;
}

inline arch::ArchConfig arch_config_parse(const io::RunConfig& rc, int64_t& grid_h,
                                          int64_t& grid_w) {
  arch::ArchConfig c;
  c.kind = arch::kind_from_name(rc.get_str("arch.kind", arch::kind_name(c.kind)));
  c.modes = rc.get_int("arch.modes", c.modes);
  c.width = rc.get_int("arch.width", c.width);
  if (rc.has("arch.layer_spec")) c.layer_spec = parse_layer_spec(rc.need_str("arch.layer_spec"));
  c.act = act_from_name(rc.get_str("arch.act", act_name(c.act)));
  c.droppath_final_keep = rc.get_double("arch.droppath_final_keep", c.droppath_final_keep);
  c.mlp_expansion = rc.get_int("arch.mlp_expansion", c.mlp_expansion);
  c.lift_hidden = rc.get_int("arch.lift_hidden", c.lift_hidden);
  c.positional_encoding = rc.get_bool("arch.positional_encoding", c.positional_encoding);
  c.out_channels = rc.get_int("arch.out_channels", c.out_channels);
  grid_h = rc.get_int("grid.h", grid_h);
  grid_w = rc.get_int("grid.w", grid_w);
  return c;
}

namespace detail {

template <typename Model>
std::vector<io::Blob> param_blobs(Model& model) {
  std::vector<io::Blob> blobs;
  model.for_each_param([&](const std::string& name, DiffArray& p) {
    io::Blob b;
    b.name = name;
    b.dtype = p.dtype;
    b.dims = p.shape;
    if (p.dtype == ad::Dtype::real32)
      b.f = p.re;
    else
      b.c = p.cx;
    blobs.push_back(std::move(b));
  });
  return blobs;
}

template <typename Model>
void load_param_blobs(Model& model, const std::vector<io::Blob>& blobs) {
  size_t idx = 0;
  model.for_each_param([&](const std::string& name, DiffArray& p) {
    if (idx >= blobs.size() || blobs[idx].name != name)
      throw ConfigError("checkpoint: parameter order mismatch at '" + name + "'");
    const io::Blob& b = blobs[idx];
    if (b.dtype != p.dtype) throw ConfigError("checkpoint: dtype mismatch at '" + name + "'");
    if (p.dtype == ad::Dtype::real32) {
      if (b.f.size() != p.re.size()) throw ConfigError("checkpoint: size mismatch at '" + name + "'");
      p.re = b.f;
    } else {
      if (b.c.size() != p.cx.size()) throw ConfigError("checkpoint: size mismatch at '" + name + "'");
      p.cx = b.c;
    }
    ++idx;
  });
  if (idx != blobs.size()) throw ConfigError("checkpoint: extra parameter blobs");
}

}  // namespace detail

inline io::Checkpoint make_checkpoint(const arch::OperatorModel& model, const AdamW& opt,
                                      const rng::Prng& trng, uint32_t epoch,
                                      const std::string& extra_config = "") {
  auto& m = const_cast<arch::OperatorModel&>(model);
  io::Checkpoint ck;
  ck.config_text = arch_config_text(model.cfg, model.grid_h, model.grid_w) + extra_config;
  ck.params = detail::param_blobs(m);
  ck.opt_step = opt.step;
  for (size_t i = 0; i < opt.names.size(); ++i) {
    io::Blob bm, bv;
    bm.name = opt.names[i] + ".m";
    bm.f = opt.m[i];
    bv.name = opt.names[i] + ".v";
    bv.f = opt.v[i];
    ck.opt_state.push_back(std::move(bm));
    ck.opt_state.push_back(std::move(bv));
  }
  ck.rng_state = trng.save_state();
  ck.epoch = epoch;
  return ck;
}

inline arch::OperatorModel model_from_checkpoint(const io::Checkpoint& ck) {
  const io::RunConfig rc = io::parse_config_text(ck.config_text);
  int64_t gh = 0, gw = 0;
  const arch::ArchConfig ac = arch_config_parse(rc, gh, gw);
  if (gh <= 0 || gw <= 0) throw ConfigError("checkpoint: missing grid dimensions");
  auto model = arch::build(ac, gh, gw, 0);
  detail::load_param_blobs(model, ck.params);
  return model;
}

inline AdamW optimizer_from_checkpoint(const io::Checkpoint& ck, arch::OperatorModel& model) {
  AdamW opt = make_adamw(model);
  opt.step = ck.opt_step;
  if (ck.opt_state.size() != opt.names.size() * 2)
    throw ConfigError("checkpoint: optimizer blob count mismatch");
  for (size_t i = 0; i < opt.names.size(); ++i) {
    const io::Blob& bm = ck.opt_state[2 * i];
    const io::Blob& bv = ck.opt_state[2 * i + 1];
    if (bm.name != opt.names[i] + ".m" || bv.name != opt.names[i] + ".v")
      throw ConfigError("checkpoint: optimizer state order mismatch at '" + opt.names[i] + "'");
    if (bm.f.size() != opt.m[i].size() || bv.f.size() != opt.v[i].size())
      throw ConfigError("checkpoint: optimizer state size mismatch at '" + opt.names[i] + "'");
    opt.m[i] = bm.f;
    opt.v[i] = bv.f;
  }
  return opt;
}

inline io::Checkpoint make_hyper_checkpoint(const arch::HyperModel& h,
                                            const std::string& extra_config = "") {
  auto& hm = const_cast<arch::HyperModel&>(h);
  io::Checkpoint ck;
  ck.config_text = arch_config_text(h.trunk.cfg, h.trunk.grid_h, h.trunk.grid_w) +
                   "model = hyper\nhyper.n_rcv = " + std::to_string(h.n_rcv) + "\n" + extra_config;
  ck.params = detail::param_blobs(hm);
  return ck;
}

inline arch::HyperModel hyper_from_checkpoint(const io::Checkpoint& ck) {
  const io::RunConfig rc = io::parse_config_text(ck.config_text);
  if (rc.get_str("model", "") != "hyper") throw ConfigError("checkpoint: not a hyper model");
  int64_t gh = 0, gw = 0;
  const arch::ArchConfig ac = arch_config_parse(rc, gh, gw);
  if (gh <= 0 || gw <= 0) throw ConfigError("checkpoint: missing grid dimensions");
  const int64_t n_rcv = rc.get_int("hyper.n_rcv", 0);
  if (n_rcv <= 0) throw ConfigError("checkpoint: missing hyper.n_rcv");
  auto h = arch::hyper_build(ac, gh, gw, n_rcv, 0);
  detail::load_param_blobs(h, ck.params);
  return h;
}

// ---------------------------------------------------------------------------
// CSV emitters. Wall time is excluded so reruns produce identical bytes.

inline std::string metrics_csv(const Metrics& m) {
  io::CsvWriter w;
  w.cell("epoch").cell("train_rel_l2").cell("val_rel_l2");
  w.endl();
  for (size_t e = 0; e < m.train_loss.size(); ++e) {
    w.cell(static_cast<int64_t>(e)).cell(m.train_loss[e]).cell(m.val_loss[e]);
    w.endl();
  }
  w.cell("test").cell("").cell(m.test_loss);
  w.endl();
  return w.buf;
}

inline std::string restarts_csv(const std::vector<RestartRow>& rows) {
  io::CsvWriter w;
  w.cell("restart").cell("seed").cell("test_rel_l2");
  w.endl();
  for (const auto& r : rows) {
    w.cell(r.restart).cell(std::to_string(r.seed)).cell(r.test_loss);
    w.endl();
  }
  return w.buf;
}

inline std::string ood_csv(const std::vector<OodRow>& rows) {
  io::CsvWriter w;
  w.cell("family").cell("lambda1").cell("lambda2").cell("c_min").cell("c_max").cell("nu")
      .cell("n").cell("rel_l2").cell("se");
  w.endl();
  for (const auto& r : rows) {
    w.cell(static_cast<int64_t>(r.fam.id))
        .cell(r.fam.lambda1)
        .cell(r.fam.lambda2)
        .cell(r.fam.c_min)
        .cell(r.fam.c_max)
        .cell(r.fam.nu)
        .cell(r.n)
        .cell(r.mean)
        .cell(r.se);
    w.endl();
  }
  return w.buf;
}

inline std::string landscape_csv(const Landscape& L) {
  io::CsvWriter w;
  w.cell("alpha").cell("beta").cell("rel_l2");
  w.endl();
  for (int64_t i = 0; i < L.grid_n; ++i)
    for (int64_t j = 0; j < L.grid_n; ++j) {
      w.cell(L.offsets[static_cast<size_t>(i)])
          .cell(L.offsets[static_cast<size_t>(j)])
          .cell(L.values[static_cast<size_t>(i) * L.grid_n + j]);
      w.endl();
    }
  return w.buf;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  io::CsvWriter w;
  w.cell("kind").cell("act").cell("test_rel_l2");
  w.endl();
  for (const auto& c : cells) {
    w.cell(std::string(arch::kind_name(c.kind))).cell(act_name(c.act)).cell(c.metrics.test_loss);
    w.endl();
  }
  return w.buf;
}

}  // namespace nolab::train
