#pragma once

// The five operator architectures and the hypernetwork surrogate. A model is
// a bag of DiffArrays; forward builds the layer graph on a tape so the same
// code serves training, evaluation, and finite-difference checks. Layer
// equations, per architecture, acting on features v with d channels:
//   NO:    v <- act(W v + K v + b)
//   resNO: v <- v + act(W v + K v + b)
//   sNO:   w <- act(K v + b);  v <- mlp(w)
//   v1:    w <- v + act(K N1(v) + b);  v <- w + mlp(N2(w))
//   v2:    v1 with both residual branches of layer l gated by one Bernoulli
//          draw per sample in train mode and scaled by p_l in eval mode
// mlp is the inverse bottleneck linear(d->e*d), act, linear(e*d->d).

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "nolab/errors.hpp"
#include "nolab/rng.hpp"
#include "nolab/tensor.hpp"

namespace nolab::arch {

enum class Kind { no, res_no, s_no, s_no_eps_v1, s_no_eps_v2 };
enum class Mode { train, eval };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::no: return "no";
    case Kind::res_no: return "resno";
    case Kind::s_no: return "sno";
    case Kind::s_no_eps_v1: return "sno_eps_v1";
    case Kind::s_no_eps_v2: return "sno_eps_v2";
  }
  return "?";
}

inline Kind kind_from_name(const std::string& s) {
  for (Kind k : {Kind::no, Kind::res_no, Kind::s_no, Kind::s_no_eps_v1, Kind::s_no_eps_v2})
    if (s == kind_name(k)) return k;
  throw ConfigError("unknown architecture '" + s + "'");
}

struct ArchConfig {
  Kind kind = Kind::s_no_eps_v2;
  int modes = 12;
  int width = 36;
  std::vector<int> layer_spec = {3, 3, 9, 3};  // stage block counts; {L} for a flat stack
  ad::Act act = ad::Act::gelu;
  double droppath_final_keep = 0.7;  // survival probability of the last layer, v2 only
  int mlp_expansion = 4;
  int lift_hidden = 18;
  bool positional_encoding = true;
  int out_channels = 2;
  bool debug_identity_wiring = false;  // test hook: run v1/v2 params through the plain sNO path

  int total_layers() const {
    int s = 0;
    for (int k : layer_spec) s += k;
    return s;
  }
  int in_channels() const { return positional_encoding ? 3 : 1; }
  bool sno_family() const {
    return kind == Kind::s_no || kind == Kind::s_no_eps_v1 || kind == Kind::s_no_eps_v2;
  }
  void validate() const {
    if (modes <= 0 || width <= 0 || lift_hidden <= 0 || mlp_expansion < 1 || out_channels <= 0)
      throw ConfigError("arch: modes, width, lift_hidden, mlp_expansion, out_channels must be positive");
    if (layer_spec.empty()) throw ConfigError("arch: layer_spec must not be empty");
    for (int k : layer_spec)
      if (k < 0) throw ConfigError("arch: layer_spec entries must be non-negative");
    if (kind == Kind::s_no_eps_v2 &&
        !(droppath_final_keep > 0.0 && droppath_final_keep <= 1.0))
      throw ConfigError("arch: droppath_final_keep must lie in (0, 1]");
  }
};

struct OperatorLayer {
  ad::SpectralKernel K;
  ad::DiffArray W, b;  // W only for NO/resNO; b is the kernel-stage bias everywhere
  ad::DiffArray ln1_g, ln1_b, ln2_g, ln2_b;
  ad::DiffArray mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct OperatorModel {
  ArchConfig cfg;
  int grid_h = 0, grid_w = 0;  // grid the model was built against
  ad::DiffArray lift_w1, lift_b1, lift_w2, lift_b2;
  std::vector<OperatorLayer> layers;
  ad::DiffArray proj_w, proj_b;
  std::vector<double> p_keep;  // droppath survival schedule, all ones except v2

  // Stable iteration order; checkpoints and optimizers key off these names.
  template <class F>
  void for_each_param(F&& fn) {
    fn("lift.w1", lift_w1);
    fn("lift.b1", lift_b1);
    fn("lift.w2", lift_w2);
    fn("lift.b2", lift_b2);
    for (size_t l = 0; l < layers.size(); ++l) {
      const std::string pre = "layer" + std::string(l < 10 ? "0" : "") + std::to_string(l) + ".";
      OperatorLayer& L = layers[l];
      fn(pre + "K", L.K.coeff);
      if (!cfg.sno_family()) fn(pre + "W", L.W);
      fn(pre + "b", L.b);
      if (cfg.sno_family()) {
        fn(pre + "ln1.g", L.ln1_g);
        fn(pre + "ln1.b", L.ln1_b);
        fn(pre + "mlp.w1", L.mlp_w1);
        fn(pre + "mlp.b1", L.mlp_b1);
        fn(pre + "mlp.w2", L.mlp_w2);
        fn(pre + "mlp.b2", L.mlp_b2);
        fn(pre + "ln2.g", L.ln2_g);
        fn(pre + "ln2.b", L.ln2_b);
      }
    }
    fn("proj.w", proj_w);
    fn("proj.b", proj_b);
  }

  int64_t count_params() {
    int64_t n = 0;
    for_each_param([&](const std::string&, ad::DiffArray& p) {
      n += p.dtype == ad::Dtype::complex64 ? 2 * p.numel() : p.numel();
    });
    return n;
  }
  int64_t lifting_params() const {
    return lift_w1.numel() + lift_b1.numel() + lift_w2.numel() + lift_b2.numel();
  }
  int64_t projection_params() const { return proj_w.numel() + proj_b.numel(); }
};

namespace detail {

inline void fill_uniform(ad::DiffArray& a, rng::Prng& g, double bound) {
  for (auto& v : a.re) v = static_cast<float>((2.0 * g.uniform01() - 1.0) * bound);
}

inline void fill_spectral(ad::SpectralKernel& K, rng::Prng& g, double scl) {
  for (auto& v : K.coeff.cx)
    v = ad::cfloat(static_cast<float>(g.uniform01() * scl), static_cast<float>(g.uniform01() * scl));
}

inline ad::DiffArray ones(std::vector<int64_t> shp) {
  ad::DiffArray a = ad::DiffArray::zeros(std::move(shp));
  for (auto& v : a.re) v = 1.0f;
  return a;
}

}  // namespace detail

// Parameters are drawn in a fixed order, so equal seeds give equal models.
// Local and MLP weights are uniform within +-1/sqrt(fan_in); spectral
// coefficients are uniform complex scaled by 1/(d_in*d_out).
inline OperatorModel build(const ArchConfig& cfg, int grid_h, int grid_w, uint64_t seed) {
  cfg.validate();
  if (grid_h <= 0 || grid_w <= 0 || cfg.modes > grid_h / 2 || cfg.modes > grid_w / 2)
    throw ConfigError("build: modes must satisfy modes <= grid/2");
  OperatorModel m;
  m.cfg = cfg;
  m.grid_h = grid_h;
  m.grid_w = grid_w;
  rng::Prng g(seed);
  const int d = cfg.width, hid = cfg.lift_hidden, in = cfg.in_channels();

  m.lift_w1 = ad::DiffArray::zeros({hid, in});
  m.lift_b1 = ad::DiffArray::zeros({hid});
  m.lift_w2 = ad::DiffArray::zeros({d, hid});
  m.lift_b2 = ad::DiffArray::zeros({d});
  detail::fill_uniform(m.lift_w1, g, 1.0 / std::sqrt(static_cast<double>(in)));
  detail::fill_uniform(m.lift_b1, g, 1.0 / std::sqrt(static_cast<double>(in)));
  detail::fill_uniform(m.lift_w2, g, 1.0 / std::sqrt(static_cast<double>(hid)));
  detail::fill_uniform(m.lift_b2, g, 1.0 / std::sqrt(static_cast<double>(hid)));

  const int L = cfg.total_layers();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  for (int l = 0; l < L; ++l) {
    OperatorLayer lay;
    lay.K = ad::SpectralKernel::zeros(cfg.modes, d, d);
    detail::fill_spectral(lay.K, g, 1.0 / (static_cast<double>(d) * d));
    if (!cfg.sno_family()) {
      lay.W = ad::DiffArray::zeros({d, d});
      detail::fill_uniform(lay.W, g, inv_sqrt_d);
    }
    lay.b = ad::DiffArray::zeros({d});
    detail::fill_uniform(lay.b, g, inv_sqrt_d);
    if (cfg.sno_family()) {
      lay.ln1_g = detail::ones({d});
      lay.ln1_b = ad::DiffArray::zeros({d});
      lay.ln2_g = detail::ones({d});
      lay.ln2_b = ad::DiffArray::zeros({d});
      const int e = cfg.mlp_expansion * d;
      lay.mlp_w1 = ad::DiffArray::zeros({e, d});
      lay.mlp_b1 = ad::DiffArray::zeros({e});
      lay.mlp_w2 = ad::DiffArray::zeros({d, e});
      lay.mlp_b2 = ad::DiffArray::zeros({d});
      detail::fill_uniform(lay.mlp_w1, g, inv_sqrt_d);
      detail::fill_uniform(lay.mlp_b1, g, inv_sqrt_d);
      detail::fill_uniform(lay.mlp_w2, g, 1.0 / std::sqrt(static_cast<double>(e)));
      detail::fill_uniform(lay.mlp_b2, g, 1.0 / std::sqrt(static_cast<double>(e)));
    }
    m.layers.push_back(std::move(lay));
  }

  m.proj_w = ad::DiffArray::zeros({cfg.out_channels, d});
  m.proj_b = ad::DiffArray::zeros({cfg.out_channels});
  detail::fill_uniform(m.proj_w, g, inv_sqrt_d);
  detail::fill_uniform(m.proj_b, g, inv_sqrt_d);

  m.p_keep.assign(static_cast<size_t>(L), 1.0);
  if (cfg.kind == Kind::s_no_eps_v2 && L > 1)
    for (int l = 0; l < L; ++l)
      m.p_keep[static_cast<size_t>(l)] =
          1.0 - (1.0 - cfg.droppath_final_keep) * static_cast<double>(l) / (L - 1);
  return m;
}

// Input tensor (B, H, W, C): the wave speed plus, when enabled, positional
// channels that map the grid affinely onto [0,1]^2.
inline ad::DiffArray make_input(const std::vector<float>& c, int64_t B, int H, int W,
                                const ArchConfig& cfg) {
  if (c.size() != static_cast<size_t>(B) * H * W) throw ConfigError("make_input: payload size mismatch");
  const int ch = cfg.in_channels();
  ad::DiffArray x = ad::DiffArray::zeros({B, H, W, ch});
  for (int64_t s = 0; s < B; ++s)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const size_t at = static_cast<size_t>(((s * H + i) * W + j)) * ch;
        x.re[at] = c[static_cast<size_t>((s * H + i) * W + j)];
        if (ch == 3) {
          x.re[at + 1] = W > 1 ? static_cast<float>(j) / (W - 1) : 0.0f;
          x.re[at + 2] = H > 1 ? static_cast<float>(i) / (H - 1) : 0.0f;
        }
      }
  return x;
}

namespace detail {

// One sNO-family layer. `gate` applies the v2 stochastic-depth rule to a
// residual branch; for sNO and v1 it is the identity.
template <class Gate>
ad::DiffArray sno_layer(ad::GradTape* t, OperatorLayer& L, ad::DiffArray v, const ArchConfig& cfg,
                        bool with_skip, Gate&& gate) {
  using namespace ad;
  DiffArray w;
  if (with_skip) {
    DiffArray n1 = layer_norm(t, v, L.ln1_g, L.ln1_b);
    DiffArray br = activation(t, bias_add(t, spectral_conv(t, n1, L.K), L.b), cfg.act);
    w = add(t, v, gate(br));
  } else {
    w = activation(t, bias_add(t, spectral_conv(t, v, L.K), L.b), cfg.act);
  }
  DiffArray mlp_in = with_skip ? layer_norm(t, w, L.ln2_g, L.ln2_b) : w;
  DiffArray h = activation(t, affine_pointwise(t, mlp_in, L.mlp_w1, L.mlp_b1), cfg.act);
  DiffArray mlp_out = affine_pointwise(t, h, L.mlp_w2, L.mlp_b2);
  return with_skip ? add(t, w, gate(mlp_out)) : mlp_out;
}

}  // namespace detail

// Trunk: lifting plus the operator layers, no projection. The v2 train path
// draws one Bernoulli gate per (sample, layer), shared by both branches of
// that layer; eval scales both branches by the survival probability instead.
inline ad::DiffArray forward_features(OperatorModel& m, const ad::DiffArray& input, Mode mode,
                                      ad::GradTape* tape, rng::Prng* g) {
  using namespace ad;
  const ArchConfig& cfg = m.cfg;
  if (input.dtype != Dtype::real32 || input.shape.size() != 4 ||
      input.shape[3] != cfg.in_channels())
    throw ConfigError("forward: input must be (B, H, W, in_channels)");
  const int64_t B = input.shape[0];
  const bool v2_train = cfg.kind == Kind::s_no_eps_v2 && mode == Mode::train;
  if (v2_train && g == nullptr) throw ConfigError("forward: v2 train mode needs an rng");

  DiffArray v = affine_pointwise(tape, input, m.lift_w1, m.lift_b1);
  v = activation(tape, v, cfg.act);
  v = affine_pointwise(tape, v, m.lift_w2, m.lift_b2);

  for (size_t l = 0; l < m.layers.size(); ++l) {
    OperatorLayer& L = m.layers[l];
    switch (cfg.kind) {
      case Kind::no:
      case Kind::res_no: {
        DiffArray pre = add(tape, affine_pointwise(tape, v, L.W, L.b), spectral_conv(tape, v, L.K));
        DiffArray act_out = activation(tape, pre, cfg.act);
        v = cfg.kind == Kind::no ? act_out : add(tape, v, act_out);
        break;
      }
      case Kind::s_no:
        v = detail::sno_layer(tape, L, v, cfg, false, [](ad::DiffArray x) { return x; });
        break;
      case Kind::s_no_eps_v1:
      case Kind::s_no_eps_v2: {
        if (cfg.debug_identity_wiring) {
          v = detail::sno_layer(tape, L, v, cfg, false, [](ad::DiffArray x) { return x; });
          break;
        }
        if (v2_train) {
          std::vector<float> mask(static_cast<size_t>(B));
          for (auto& mv : mask) mv = g->uniform01() < m.p_keep[l] ? 1.0f : 0.0f;
          v = detail::sno_layer(tape, L, v, cfg, true,
                                [&](ad::DiffArray x) { return scale_rows(tape, x, mask); });
        } else if (cfg.kind == Kind::s_no_eps_v2) {
          const double p = m.p_keep[l];
          v = detail::sno_layer(tape, L, v, cfg, true,
                                [&](ad::DiffArray x) { return scale(tape, x, p); });
        } else {
          v = detail::sno_layer(tape, L, v, cfg, true, [](ad::DiffArray x) { return x; });
        }
        break;
      }
    }
  }
  return v;
}

inline ad::DiffArray forward(OperatorModel& m, const ad::DiffArray& input, Mode mode,
                             ad::GradTape* tape = nullptr, rng::Prng* g = nullptr) {
  ad::DiffArray feats = forward_features(m, input, mode, tape, g);
  return affine_pointwise(tape, feats, m.proj_w, m.proj_b);
}

// Hypernetwork surrogate of the forward operator: the trunk digests the wave
// speed into pooled features, per-layer encoders emit the metanet weights,
// and the metanet maps the normalized source position to a receiver trace.
//   x_0 = embed(pos),  x_k = x_{k-1} + leaky_relu(W_k x_{k-1} + b_k),  k = 1,2
// with (W_k, b_k) unpacked from encoder k's output, so all-zero encoders give
// trace = embed(pos) exactly.
struct HyperModel {
  OperatorModel trunk;  // projection params unused and excluded from the hyper set
  int n_rcv = 0;
  ad::DiffArray embed_w, embed_b;
  std::array<ad::DiffArray, 2> enc_w, enc_b;

  int metanet_width() const { return 2 * n_rcv; }

  template <class F>
  void for_each_param(F&& fn) {
    trunk.for_each_param([&](const std::string& name, ad::DiffArray& p) {
      if (name.rfind("proj.", 0) != 0) fn("trunk." + name, p);
    });
    fn("embed.w", embed_w);
    fn("embed.b", embed_b);
    for (int k = 0; k < 2; ++k) {
      const std::string pre = "enc" + std::to_string(k) + ".";
      fn(pre + "w", enc_w[static_cast<size_t>(k)]);
      fn(pre + "b", enc_b[static_cast<size_t>(k)]);
    }
  }
};

inline HyperModel hyper_build(const ArchConfig& cfg, int grid_h, int grid_w, int n_rcv,
                              uint64_t seed) {
  if (n_rcv <= 0) throw ConfigError("hyper_build: need n_rcv > 0");
  HyperModel h;
  h.trunk = build(cfg, grid_h, grid_w, rng::derive_seed(seed, 0));
  h.n_rcv = n_rcv;
  const int mw = h.metanet_width();
  const int64_t theta = static_cast<int64_t>(mw) * mw + mw;  // one affine layer's parameters
  rng::Prng g(rng::derive_seed(seed, 1));
  h.embed_w = ad::DiffArray::zeros({mw, 2});
  h.embed_b = ad::DiffArray::zeros({mw});
  detail::fill_uniform(h.embed_w, g, 1.0 / std::sqrt(2.0));
  detail::fill_uniform(h.embed_b, g, 1.0 / std::sqrt(2.0));
  for (int k = 0; k < 2; ++k) {
    h.enc_w[static_cast<size_t>(k)] = ad::DiffArray::zeros({theta, cfg.width});
    h.enc_b[static_cast<size_t>(k)] = ad::DiffArray::zeros({theta});
    detail::fill_uniform(h.enc_w[static_cast<size_t>(k)], g,
                         1.0 / std::sqrt(static_cast<double>(cfg.width)));
    detail::fill_uniform(h.enc_b[static_cast<size_t>(k)], g,
                         1.0 / std::sqrt(static_cast<double>(cfg.width)));
  }
  return h;
}

// pos is (B, 2) with coordinates already normalized to [0,1]. Returns traces
// (B, n_rcv, 2).
inline ad::DiffArray hyper_forward(HyperModel& h, const ad::DiffArray& input,
                                   const ad::DiffArray& pos, Mode mode,
                                   ad::GradTape* tape = nullptr, rng::Prng* g = nullptr) {
  using namespace ad;
  if (pos.shape.size() != 2 || pos.shape[1] != 2 || pos.shape[0] != input.shape[0])
    throw ConfigError("hyper_forward: pos must be (B, 2) matching the input batch");
  DiffArray feats = forward_features(h.trunk, input, mode, tape, g);
  DiffArray pooled = reshape(average_pool_per_sample(tape, feats),
                             {feats.shape[0], feats.shape[3]});
  DiffArray x = affine_pointwise(tape, pos, h.embed_w, h.embed_b);
  for (int k = 0; k < 2; ++k) {
    DiffArray theta = affine_pointwise(tape, pooled, h.enc_w[static_cast<size_t>(k)],
                                       h.enc_b[static_cast<size_t>(k)]);
    DiffArray step = activation(tape, hyper_affine(tape, theta, x), Act::leaky_relu);
    x = add(tape, x, step);
  }
  return reshape(x, {x.shape[0], h.n_rcv, 2});
}

}  // namespace nolab::arch
