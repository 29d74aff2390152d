#pragma once
// Command-line surface. Every subcommand reads a flat key=value RunConfig
// (-c), honors --seed and --out, and writes NOPD/NOCK/CSV outputs that are
// pure functions of (config bytes, seed). Unknown config keys are rejected
// with their line number. Exit codes: 0 success, 2 config error, 3 numeric
// failure. Header-only so the tests drive the same code path the binary does.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "nolab/arch.hpp"
#include "nolab/bounds.hpp"
#include "nolab/errors.hpp"
#include "nolab/grf.hpp"
#include "nolab/helmholtz.hpp"
#include "nolab/io.hpp"
#include "nolab/rng.hpp"
#include "nolab/train.hpp"

namespace nolab::cli {

namespace detail {

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open output file: " + path);
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!os) throw ConfigError("failed writing: " + path);
}

inline std::string out_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create output directory '" + dir + "': " + ec.message());
}

inline helm::DomainConfig domain_from(const io::RunConfig& rc) {
  helm::DomainConfig d;
  d.Lx = rc.get_double("domain.lx", d.Lx);
  d.Ly = rc.get_double("domain.ly", d.Ly);
  d.freq = rc.get_double("domain.freq", d.freq);
  d.c_min = rc.get_double("domain.c_min", d.c_min);
  d.c_max = rc.get_double("domain.c_max", d.c_max);
  d.nx = static_cast<int>(rc.get_int("domain.nx", d.nx));
  d.ny = static_cast<int>(rc.get_int("domain.ny", d.ny));
  d.refine = static_cast<int>(rc.get_int("domain.refine", d.refine));
  return d;
}

inline grf::MaternParams grf_from(const io::RunConfig& rc) {
  grf::MaternParams p;
  p.s = rc.get_double("grf.s", p.s);
  p.nu = rc.get_double("grf.nu", p.nu);
  p.a_scale = rc.get_double("grf.a_scale", p.a_scale);
  p.lambda1 = rc.get_double("grf.lambda1", p.lambda1);
  p.lambda2 = rc.get_double("grf.lambda2", p.lambda2);
  return p;
}

inline train::TrainConfig train_from(const io::RunConfig& rc, uint64_t seed) {
  train::TrainConfig t;
  t.lr = rc.get_double("train.lr", t.lr);
  t.step_size = rc.get_int("train.step_size", t.step_size);
  t.gamma = rc.get_double("train.gamma", t.gamma);
  t.epochs = rc.get_int("train.epochs", t.epochs);
  t.weight_decay = rc.get_double("train.weight_decay", t.weight_decay);
  t.batch = rc.get_int("train.batch", t.batch);
  t.n_train = rc.get_int("train.n_train", t.n_train);
  t.n_val = rc.get_int("train.n_val", t.n_val);
  t.n_test = rc.get_int("train.n_test", t.n_test);
  t.n_restarts = rc.get_int("train.n_restarts", t.n_restarts);
  t.seed = seed;
  return t;
}

// OOD families: the builtin table unless the config spells out
// ood.family.K.{lambda1,lambda2,c_min,c_max,nu} entries.
inline std::vector<grf::OodFamilySpec> families_from(const io::RunConfig& rc) {
  std::map<int, grf::OodFamilySpec> custom;
  for (const auto& [key, val] : rc.kv) {
    if (key.rfind("ood.family.", 0) != 0) continue;
    const size_t id0 = std::string("ood.family.").size();
    const size_t dot = key.find('.', id0);
    if (dot == std::string::npos) throw ConfigError("malformed family key: " + key);
    const int id = static_cast<int>(io::RunConfig::parse_int(key, key.substr(id0, dot - id0)));
    auto& fam = custom[id];
    fam.id = id;
    const std::string field = key.substr(dot + 1);
    const double v = io::RunConfig::parse_double(key, val);
    if (field == "lambda1")
      fam.lambda1 = v;
    else if (field == "lambda2")
      fam.lambda2 = v;
    else if (field == "c_min")
      fam.c_min = v;
    else if (field == "c_max")
      fam.c_max = v;
    else if (field == "nu")
      fam.nu = v;
    else
      throw ConfigError("unknown family field: " + key);
  }
  if (custom.empty()) return grf::ood_family_table();
  std::vector<grf::OodFamilySpec> fams;
  for (auto& [id, fam] : custom) fams.push_back(fam);
  return fams;
}

// Mirrors the construction inside train::ood_eval so written families hash
// identically to what ood-eval evaluates: family lambdas/nu over an
// otherwise default Matern, family speed range, per-family derived seed.
inline helm::DataGenConfig family_gen_config(const grf::OodFamilySpec& fam,
                                             const helm::DomainConfig& dom, int64_t n,
                                             uint64_t seed) {
  helm::DataGenConfig g;
  g.dom = dom;
  g.dom.c_min = fam.c_min;
  g.dom.c_max = fam.c_max;
  g.grf_params.nu = fam.nu;
  g.grf_params.lambda1 = fam.lambda1;
  g.grf_params.lambda2 = fam.lambda2;
  g.n = static_cast<int>(n);
  g.seed = rng::derive_seed(seed, static_cast<uint64_t>(fam.id));
  return g;
}

// Receiver/source geometry for a trace dataset; counts come from the file,
// the domain and depths from the config, which must match generation.
inline helm::ForwardGenConfig forward_from(const io::RunConfig& rc, const io::Dataset& d) {
  helm::ForwardGenConfig fg;
  fg.dom = domain_from(rc);
  fg.grf_params = grf_from(rc);
  fg.n = static_cast<int>(d.n());
  fg.n_src = d.n_src;
  fg.n_rcv = d.n_rcv;
  fg.src_depth = rc.get_double("data.src_depth", fg.src_depth);
  fg.rcv_depth = rc.get_double("data.rcv_depth", fg.rcv_depth);
  return fg;
}

inline bounds::BoundConstants constants_from(const io::RunConfig& rc) {
  bounds::BoundConstants c;
  c.Cw = rc.get_double("bounds.cw", c.Cw);
  c.Ck = rc.get_double("bounds.ck", c.Ck);
  c.Csigma = rc.get_double("bounds.csigma", c.Csigma);
  c.Ca = rc.get_double("bounds.ca", c.Ca);
  c.Calpha = rc.get_double("bounds.calpha", c.Calpha);
  c.Cbeta = rc.get_double("bounds.cbeta", c.Cbeta);
  c.Cd = rc.get_double("bounds.cd", c.Cd);
  c.d_hat = rc.get_double("bounds.d_hat", c.d_hat);
  c.rho = rc.get_double("bounds.rho", c.rho);
  c.Ru = rc.get_double("bounds.ru", c.Ru);
  c.dom_area = rc.get_double("bounds.dom_area", c.dom_area);
  c.dom_diag = rc.get_double("bounds.dom_diag", c.dom_diag);
  return c;
}

// Branch-gate decay weights for the Bernoulli expectation: x_0 = 1 and
// x_l = 1/l^2 for the summable default, or a constant value.
inline std::vector<double> x_schedule_from(const io::RunConfig& rc, int L) {
  const std::string kind = rc.get_str("bounds.x_schedule", "inv_square");
  std::vector<double> x(static_cast<size_t>(L) + 1, 1.0);
  if (kind == "inv_square") {
    for (int l = 1; l <= L; ++l) x[static_cast<size_t>(l)] = 1.0 / (static_cast<double>(l) * l);
  } else if (kind == "uniform") {
    const double v = rc.get_double("bounds.x_value", 1.0);
    std::fill(x.begin(), x.end(), v);
  } else {
    throw ConfigError("bounds.x_schedule must be inv_square or uniform");
  }
  return x;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  size_t at = 0;
  while (at <= s.size()) {
    const size_t c = s.find(',', at);
    const std::string item = io::trim(c == std::string::npos ? s.substr(at) : s.substr(at, c - at));
    if (!item.empty()) out.push_back(item);
    if (c == std::string::npos) break;
    at = c + 1;
  }
  return out;
}

// "L=a..b" with 1 <= a <= b.
inline std::pair<int, int> parse_sweep(const std::string& s) {
  const auto fail = [&] { throw ConfigError("bad sweep '" + s + "', expected L=<a>..<b>"); };
  if (s.rfind("L=", 0) != 0) fail();
  const size_t dots = s.find("..", 2);
  if (dots == std::string::npos) fail();
  const int a = static_cast<int>(io::RunConfig::parse_int("sweep", s.substr(2, dots - 2)));
  const int b = static_cast<int>(io::RunConfig::parse_int("sweep", s.substr(dots + 2)));
  if (a < 1 || b < a) fail();
  return {a, b};
}

// ---- allowed-key registries (unknown keys are rejected with line numbers)

inline std::vector<std::string> domain_keys() {
  return {"domain.lx",    "domain.ly", "domain.freq",   "domain.c_min",
          "domain.c_max", "domain.nx", "domain.ny",     "domain.refine"};
}
inline std::vector<std::string> grf_keys() {
  return {"grf.s", "grf.nu", "grf.a_scale", "grf.lambda1", "grf.lambda2"};
}
inline std::vector<std::string> arch_keys() {
  return {"arch.kind",          "arch.modes",
          "arch.width",         "arch.layer_spec",
          "arch.act",           "arch.droppath_final_keep",
          "arch.mlp_expansion", "arch.lift_hidden",
          "arch.positional_encoding", "arch.out_channels"};
}
inline std::vector<std::string> train_keys() {
  return {"train.lr",      "train.step_size", "train.gamma",      "train.epochs",
          "train.weight_decay", "train.batch", "train.n_train",   "train.n_val",
          "train.n_test",  "train.n_restarts", "train.dataset",   "train.checkpoint_every"};
}
inline std::vector<std::string> family_keys() {
  return {"ood.family.*.lambda1", "ood.family.*.lambda2", "ood.family.*.c_min",
          "ood.family.*.c_max", "ood.family.*.nu"};
}

inline std::vector<std::string> merge(std::initializer_list<std::vector<std::string>> lists) {
  std::vector<std::string> all = {"seed"};
  for (const auto& l : lists) all.insert(all.end(), l.begin(), l.end());
  return all;
}

}  // namespace detail

// ---- subcommand bodies. Each takes the parsed config, the resolved seed,
// and a created output directory, throws ConfigError/NumericError on
// failure, and returns 0.

inline int run_gen_data(const io::RunConfig& rc, uint64_t seed, const std::string& out) {
  io::validate_keys(rc, detail::merge({detail::domain_keys(), detail::grf_keys(),
                                       {"data.n", "data.src_x", "data.src_depth"}}));
  helm::DataGenConfig g;
  g.dom = detail::domain_from(rc);
  g.grf_params = detail::grf_from(rc);
  g.src.x = rc.get_double("data.src_x", g.src.x);
  g.src.depth = rc.get_double("data.src_depth", g.src.depth);
  g.n = static_cast<int>(rc.get_int("data.n", 512));
  g.seed = seed;
  const io::Dataset ds = helm::generate_dataset(g);
  const std::string path = detail::out_path(out, "dataset.nopd");
  io::save_dataset(path, ds);
  std::cout << "wrote " << path << " (n=" << ds.n() << ", grid " << ds.H << "x" << ds.W << ")\n";
  return 0;
}

inline int run_gen_ood(const io::RunConfig& rc, uint64_t seed, const std::string& out) {
  io::validate_keys(rc, detail::merge({detail::domain_keys(), detail::family_keys(), {"data.n"}}));
  const helm::DomainConfig dom = detail::domain_from(rc);
  const int64_t n = rc.get_int("data.n", 128);
  for (const auto& fam : detail::families_from(rc)) {
    const io::Dataset ds = helm::generate_dataset(detail::family_gen_config(fam, dom, n, seed));
    char name[32];
    std::snprintf(name, sizeof name, "ood_fam%02d.nopd", fam.id);
    const std::string path = detail::out_path(out, name);
    io::save_dataset(path, ds);
    std::cout << "wrote " << path << " (n=" << ds.n() << ")\n";
  }
  return 0;
}

inline int run_train(const io::RunConfig& rc, uint64_t seed, const std::string& out) {
  io::validate_keys(rc, detail::merge({detail::arch_keys(), detail::train_keys()}));
  const io::Dataset d = io::load_dataset(rc.need_str("train.dataset"));
  int64_t gh = 0, gw = 0;
  const arch::ArchConfig ac = train::arch_config_parse(rc, gh, gw);
  const train::TrainConfig tc = detail::train_from(rc, seed);

  if (tc.n_restarts > 1) {
    const auto rows = train::train_restarts(ac, d, tc);
    detail::write_text(detail::out_path(out, "restarts.csv"), train::restarts_csv(rows));
    std::cout << "wrote restarts.csv (" << rows.size() << " seeds)\n";
    return 0;
  }

  auto model = arch::build(ac, d.H, d.W, tc.seed);
  const int64_t every = rc.get_int("train.checkpoint_every", 0);
  train::AdamW last_opt = train::make_adamw(model);
  rng::Prng last_rng(rng::derive_seed(tc.seed, 101));
  const train::EpochSink sink = [&](int64_t next_epoch, const arch::OperatorModel& mm,
                                    const train::AdamW& opt, const rng::Prng& trng,
                                    const train::Metrics&) {
    last_opt = opt;
    last_rng = trng;
    if (every > 0 && next_epoch < tc.epochs && next_epoch % every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "ckpt_epoch%04d.nock", static_cast<int>(next_epoch));
      io::save_checkpoint(detail::out_path(out, name),
                          train::make_checkpoint(mm, opt, trng, static_cast<uint32_t>(next_epoch)));
    }
  };
  const train::Metrics m = train::train(model, d, tc, sink);
  io::save_checkpoint(
      detail::out_path(out, "model.nock"),
      train::make_checkpoint(model, last_opt, last_rng, static_cast<uint32_t>(tc.epochs)));
  detail::write_text(detail::out_path(out, "metrics.csv"), train::metrics_csv(m));
  std::cout << "final test rel_l2 " << io::fmt(m.test_loss) << "\n";
  return 0;
}

inline int run_eval(const io::RunConfig& rc, uint64_t, const std::string& out) {
  io::validate_keys(rc, detail::merge({{"eval.checkpoint", "eval.dataset", "eval.first",
                                        "eval.count", "eval.batch"}}));
  auto model = train::model_from_checkpoint(io::load_checkpoint(rc.need_str("eval.checkpoint")));
  const io::Dataset d = io::load_dataset(rc.need_str("eval.dataset"));
  const int64_t first = rc.get_int("eval.first", 0);
  const int64_t count = rc.get_int("eval.count", static_cast<int64_t>(d.n()) - first);
  const int64_t batch = rc.get_int("eval.batch", 32);
  const train::EvalResult r = train::evaluate(model, d, first, count, batch);

  io::CsvWriter per;
  per.cell("sample").cell("rel_l2").endl();
  for (size_t i = 0; i < r.per_sample.size(); ++i)
    per.cell(first + static_cast<int64_t>(i)).cell(r.per_sample[i]).endl();
  detail::write_text(detail::out_path(out, "eval.csv"), per.buf);

  io::CsvWriter sum;
  sum.cell("n").cell("mean_rel_l2").cell("se").endl();
  sum.cell(static_cast<int64_t>(r.per_sample.size())).cell(r.mean).cell(r.se()).endl();
  detail::write_text(detail::out_path(out, "eval_summary.csv"), sum.buf);
  std::cout << "mean rel_l2 " << io::fmt(r.mean) << " over " << r.per_sample.size()
            << " samples\n";
  return 0;
}

inline int run_ood_eval(const io::RunConfig& rc, uint64_t seed, const std::string& out) {
  io::validate_keys(rc, detail::merge({detail::domain_keys(), detail::family_keys(),
                                       {"ood.checkpoint", "ood.n_per_family", "ood.batch"}}));
  auto model = train::model_from_checkpoint(io::load_checkpoint(rc.need_str("ood.checkpoint")));
  const auto rows =
      train::ood_eval(model, detail::families_from(rc), rc.get_int("ood.n_per_family", 128),
                      detail::domain_from(rc), seed, rc.get_int("ood.batch", 32));
  detail::write_text(detail::out_path(out, "ood.csv"), train::ood_csv(rows));
  std::cout << "wrote ood.csv (" << rows.size() << " families)\n";
  return 0;
}

inline int run_bounds(const io::RunConfig& rc, uint64_t, const std::string& out,
                      const std::string& sweep) {
  io::validate_keys(
      rc, detail::merge({{"bounds.cw", "bounds.ck", "bounds.csigma", "bounds.ca",
                          "bounds.calpha", "bounds.cbeta", "bounds.cd", "bounds.d_hat",
                          "bounds.rho", "bounds.ru", "bounds.dom_area", "bounds.dom_diag",
                          "bounds.l", "bounds.m", "bounds.n", "bounds.delta",
                          "bounds.empirical", "bounds.x_schedule", "bounds.x_value"}}));
  const bounds::BoundConstants c = detail::constants_from(rc);
  const int L = static_cast<int>(rc.get_int("bounds.l", 18));
  const int M = static_cast<int>(rc.get_int("bounds.m", 2));
  const int64_t n = rc.get_int("bounds.n", 512);
  const double delta = rc.get_double("bounds.delta", 1.0);
  const double emp = rc.get_double("bounds.empirical", 0.0);

  const auto v1 = bounds::GateSchedule::v1(L);
  const auto sno = bounds::GateSchedule::pure_sno(L);
  const auto x = detail::x_schedule_from(rc, L);
  const char* brv_note = "expectation over Bernoulli gates, up to the absolute constant";

  io::CsvWriter w;
  w.cell("quantity").cell("value").cell("note").endl();
  w.cell("gamma").cell(bounds::gamma_const(c)).cell("").endl();
  w.cell("gamma_tilde").cell(bounds::gamma_tilde_const(c, M)).cell("").endl();
  w.cell("rademacher_no").cell(bounds::rademacher_no(c, L, n)).cell("").endl();
  w.cell("rademacher_sno_pure").cell(bounds::rademacher_sno(c, L, M, n, sno)).cell("").endl();
  w.cell("rademacher_sno_v1").cell(bounds::rademacher_sno(c, L, M, n, v1)).cell("").endl();
  w.cell("geb_no").cell(bounds::geb_no(c, L, n, delta, emp)).cell("").endl();
  w.cell("geb_sno_v1").cell(bounds::geb_sno(c, L, M, n, delta, emp, v1)).cell("").endl();
  w.cell("lipschitz_no").cell(bounds::lipschitz_no(c, L)).cell("").endl();
  w.cell("lipschitz_sno_v1").cell(bounds::lipschitz_sno(c, L, M, v1)).cell("").endl();
  w.cell("expected_geb_bernoulli")
      .cell(bounds::expected_geb_bernoulli(c, L, M, n, delta, x).value)
      .cell(brv_note)
      .endl();
  detail::write_text(detail::out_path(out, "bounds.csv"), w.buf);

  if (!sweep.empty()) {
    const auto [a, b] = detail::parse_sweep(sweep);
    io::CsvWriter s;
    s.cell("L").cell("no").cell("sno").cell("v1").cell("v2_expected_up_to_constant").endl();
    for (int l = a; l <= b; ++l) {
      s.cell(static_cast<int64_t>(l))
          .cell(bounds::rademacher_no(c, l, n))
          .cell(bounds::rademacher_sno(c, l, M, n, bounds::GateSchedule::pure_sno(l)))
          .cell(bounds::rademacher_sno(c, l, M, n, bounds::GateSchedule::v1(l)))
          .cell(bounds::expected_geb_bernoulli(c, l, M, n, delta,
                                               detail::x_schedule_from(rc, l))
                    .value)
          .endl();
    }
    detail::write_text(detail::out_path(out, "bounds_sweep.csv"), s.buf);
    std::cout << "wrote bounds.csv and bounds_sweep.csv (L=" << a << ".." << b << ")\n";
  } else {
    std::cout << "wrote bounds.csv\n";
  }
  return 0;
}

inline int run_landscape(const io::RunConfig& rc, uint64_t, const std::string& out) {
  io::validate_keys(rc, detail::merge({{"landscape.checkpoints", "landscape.dataset",
                                        "landscape.grid_n", "landscape.span",
                                        "landscape.first", "landscape.count",
                                        "landscape.batch"}}));
  const auto paths = detail::split_list(rc.need_str("landscape.checkpoints"));
  if (paths.size() < 3)
    throw ConfigError("landscape needs at least 3 checkpoints, got " +
                      std::to_string(paths.size()));
  std::vector<std::vector<double>> traj;
  arch::OperatorModel model;  // rebuilt from the last checkpoint below
  for (const auto& p : paths) {
    model = train::model_from_checkpoint(io::load_checkpoint(p));
    traj.push_back(train::flatten_params(model));
  }
  const io::Dataset d = io::load_dataset(rc.need_str("landscape.dataset"));
  const int64_t first = rc.get_int("landscape.first", 0);
  const int64_t count = rc.get_int("landscape.count", static_cast<int64_t>(d.n()) - first);
  const train::Landscape L = train::loss_landscape(
      model, traj, d, first, count, rc.get_int("landscape.grid_n", 25),
      rc.get_double("landscape.span", 1.0), rc.get_int("landscape.batch", 32));
  detail::write_text(detail::out_path(out, "landscape.csv"), train::landscape_csv(L));
  std::cout << "center rel_l2 " << io::fmt(L.center_loss) << "\n";
  return 0;
}

inline int run_hyper_train(const io::RunConfig& rc, uint64_t seed, const std::string& out) {
  io::validate_keys(rc, detail::merge({detail::domain_keys(), detail::grf_keys(),
                                       detail::arch_keys(), detail::train_keys(),
                                       {"hyper.dataset", "data.src_depth", "data.rcv_depth"}}));
  const io::Dataset d = io::load_dataset(rc.need_str("hyper.dataset"));
  const helm::ForwardGenConfig fg = detail::forward_from(rc, d);
  int64_t gh = 0, gw = 0;
  const arch::ArchConfig ac = train::arch_config_parse(rc, gh, gw);
  const train::TrainConfig tc = detail::train_from(rc, seed);
  auto h = arch::hyper_build(ac, d.H, d.W, d.n_rcv, tc.seed);
  const train::Metrics m = train::train_hyper(h, d, fg, tc);
  io::save_checkpoint(detail::out_path(out, "hyper.nock"), train::make_hyper_checkpoint(h));
  detail::write_text(detail::out_path(out, "hyper_metrics.csv"), train::metrics_csv(m));
  std::cout << "final trace rel_l2 " << io::fmt(m.test_loss) << "\n";
  return 0;
}

inline int run_hyper_eval(const io::RunConfig& rc, uint64_t, const std::string& out) {
  io::validate_keys(rc, detail::merge({detail::domain_keys(), detail::grf_keys(),
                                       {"hyper.checkpoint", "hyper.dataset", "hyper.first",
                                        "hyper.count", "hyper.batch", "data.src_depth",
                                        "data.rcv_depth"}}));
  auto h = train::hyper_from_checkpoint(io::load_checkpoint(rc.need_str("hyper.checkpoint")));
  const io::Dataset d = io::load_dataset(rc.need_str("hyper.dataset"));
  const helm::ForwardGenConfig fg = detail::forward_from(rc, d);
  const int64_t first = rc.get_int("hyper.first", 0);
  const int64_t count = rc.get_int("hyper.count", static_cast<int64_t>(d.n()) - first);
  const train::EvalResult r =
      train::evaluate_hyper(h, d, fg, first, count, rc.get_int("hyper.batch", 32));
  io::CsvWriter w;
  w.cell("n").cell("mean_rel_l2").cell("se").endl();
  w.cell(static_cast<int64_t>(r.per_sample.size())).cell(r.mean).cell(r.se()).endl();
  detail::write_text(detail::out_path(out, "hyper_eval.csv"), w.buf);
  std::cout << "mean trace rel_l2 " << io::fmt(r.mean) << "\n";
  return 0;
}

inline int run_solve(const io::RunConfig& rc, uint64_t seed, const std::string& out) {
  io::validate_keys(rc, detail::merge({detail::domain_keys(), detail::grf_keys(),
                                       {"solve.medium", "solve.c0", "solve.src_x",
                                        "solve.src_depth"}}));
  const helm::DomainConfig dom = detail::domain_from(rc);
  const std::string medium = rc.get_str("solve.medium", "grf");
  std::vector<float> c;
  if (medium == "grf") {
    const grf::MaternParams gp = detail::grf_from(rc);
    grf::Sampler smp = grf::build_sampler(gp, dom.Lx, dom.Ly, dom.ny, dom.nx);
    c = grf::link_to_wavespeed(grf::sample_field(smp, seed), dom.ny, dom.nx, dom.c_min,
                               dom.c_max, gp, seed)
            .grid;
  } else if (medium == "homogeneous") {
    const double c0 = rc.get_double("solve.c0", 0.5 * (dom.c_min + dom.c_max));
    if (!(c0 >= dom.c_min && c0 <= dom.c_max))
      throw ConfigError("solve.c0 must lie in [c_min, c_max]");
    c.assign(static_cast<size_t>(dom.nx) * dom.ny, static_cast<float>(c0));
  } else {
    throw ConfigError("solve.medium must be grf or homogeneous");
  }

  helm::SourceSpec src;
  src.x = rc.get_double("solve.src_x", src.x);
  src.depth = rc.get_double("solve.src_depth", src.depth);
  auto op = helm::assemble_operator(c, dom, helm::BcMode::top_dirichlet);
  auto rhs = helm::make_rhs(*op);
  helm::add_point_source(rhs, *op, src);
  const helm::PressureField p = helm::restrict_to_training_grid(*op, helm::solve(*op, rhs));

  io::CsvWriter w;
  w.cell("i").cell("j").cell("x").cell("y").cell("c").cell("p_re").cell("p_im").endl();
  for (int i = 0; i < dom.ny; ++i)
    for (int j = 0; j < dom.nx; ++j) {
      const size_t at = static_cast<size_t>(i) * dom.nx + j;
      w.cell(static_cast<int64_t>(i))
          .cell(static_cast<int64_t>(j))
          .cell(j * dom.train_hx())
          .cell(i * dom.train_hy())
          .cell(static_cast<double>(c[at]))
          .cell(static_cast<double>(p.data[2 * at]))
          .cell(static_cast<double>(p.data[2 * at + 1]))
          .endl();
    }
  detail::write_text(detail::out_path(out, "solution.csv"), w.buf);
  std::cout << "wrote solution.csv (grid " << dom.ny << "x" << dom.nx << ")\n";
  return 0;
}

// ---- dispatch

inline int dispatch(int argc, const char* const* argv) {
  CLI::App app{"nolab: neural-operator laboratory for the Helmholtz problem"};
  app.require_subcommand(1);

  struct Args {
    std::string config;
    std::string out = ".";
    uint64_t seed = 0;
    CLI::App* cmd = nullptr;
    CLI::Option* seed_opt = nullptr;
  };
  std::map<std::string, Args> sub;
  const std::vector<std::pair<std::string, std::string>> cmds = {
      {"gen-data", "generate a wave-speed/pressure dataset (NOPD)"},
      {"gen-ood", "generate the out-of-distribution family datasets"},
      {"train", "train an operator model on a dataset"},
      {"eval", "evaluate a checkpoint on a dataset"},
      {"ood-eval", "evaluate a checkpoint across OOD families"},
      {"bounds", "evaluate the closed-form bound tables"},
      {"landscape", "2-D loss landscape around a checkpoint trajectory"},
      {"hyper-train", "train the forward-operator hypernetwork"},
      {"hyper-eval", "evaluate a hypernetwork checkpoint"},
      {"solve", "run the finite-difference oracle once"}};
  std::string sweep;
  for (const auto& [name, help] : cmds) {
    Args& a = sub[name];
    a.cmd = app.add_subcommand(name, help);
    a.cmd->add_option("-c,--config", a.config, "run configuration file (key = value lines)");
    a.cmd->add_option("--out", a.out, "output directory (created if missing)");
    a.seed_opt = a.cmd->add_option("--seed", a.seed, "master seed (overrides the config's)");
    if (name == "bounds")
      a.cmd->add_option("--sweep", sweep, "depth sweep, e.g. L=1..100");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    for (auto& [name, a] : sub) {
      if (!a.cmd->parsed()) continue;
      const io::RunConfig rc =
          a.config.empty() ? io::RunConfig{} : io::parse_config_file(a.config);
      const uint64_t seed =
          a.seed_opt->count() > 0 ? a.seed : rc.get_u64("seed", 1);
      detail::ensure_dir(a.out);
      if (name == "gen-data") return run_gen_data(rc, seed, a.out);
      if (name == "gen-ood") return run_gen_ood(rc, seed, a.out);
      if (name == "train") return run_train(rc, seed, a.out);
      if (name == "eval") return run_eval(rc, seed, a.out);
      if (name == "ood-eval") return run_ood_eval(rc, seed, a.out);
      if (name == "bounds") return run_bounds(rc, seed, a.out, sweep);
      if (name == "landscape") return run_landscape(rc, seed, a.out);
      if (name == "hyper-train") return run_hyper_train(rc, seed, a.out);
      if (name == "hyper-eval") return run_hyper_eval(rc, seed, a.out);
      if (name == "solve") return run_solve(rc, seed, a.out);
    }
    std::cerr << "no subcommand given\n" << app.help();
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace nolab::cli
