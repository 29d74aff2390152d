#pragma once

// Reverse-mode differentiable arrays with exactly the operations the operator
// architectures need: pointwise affine maps, activations, layer norm, radix-2
// FFTs and truncated-mode spectral convolution, plus scalar reductions.
//
// Conventions
//  - Arrays are flat row-major; the last axis is the channel axis, all leading
//    axes are treated as independent points (a batch axis is just another
//    leading axis). FFT ops require (H,W,d) or (B,H,W,d) shapes.
//  - Parameters and activations are float32, complex tensors are interleaved
//    complex<float>, reductions and statistics accumulate in float64.
//  - Complex gradients use the (dL/dRe + i dL/dIm) convention.
//  - Ops take a GradTape*; passing nullptr runs the identical arithmetic
//    without recording, so grad-off forward is bit-identical to grad-on.

#include <cmath>
#include <complex>
#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace nolab::ad {

using cfloat = std::complex<float>;

enum class Dtype { real32, complex64 };
enum class Act { gelu, relu, leaky_relu, identity };

inline void fail(const std::string& msg) { throw std::invalid_argument(msg); }

inline bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// GeLU uses the tanh approximation with the fixed constants below.
template <typename T>
inline T act_eval(Act k, T x) {
  switch (k) {
    case Act::identity: return x;
    case Act::relu: return x > T(0) ? x : T(0);
    case Act::leaky_relu: return x > T(0) ? x : T(0.01) * x;
    case Act::gelu: {
      const T c1 = T(0.7978845608L), c2 = T(0.044715L);
      const T u = c1 * (x + c2 * x * x * x);
      return T(0.5) * x * (T(1) + std::tanh(u));
    }
  }
  return x;
}

template <typename T>
inline T act_grad(Act k, T x) {
  switch (k) {
    case Act::identity: return T(1);
    case Act::relu: return x > T(0) ? T(1) : T(0);
    case Act::leaky_relu: return x > T(0) ? T(1) : T(0.01);
    case Act::gelu: {
      const T c1 = T(0.7978845608L), c2 = T(0.044715L);
      const T u = c1 * (x + c2 * x * x * x);
      const T th = std::tanh(u);
      return T(0.5) * (T(1) + th) +
             T(0.5) * x * (T(1) - th * th) * c1 * (T(1) + T(3) * c2 * x * x);
    }
  }
  return T(1);
}

struct DiffArray {
  std::vector<int64_t> shape;
  Dtype dtype = Dtype::real32;
  std::vector<float> re;    // payload when real32
  std::vector<cfloat> cx;   // payload when complex64
  bool requires_grad = false;
  int node = -1;            // tape node id, -1 = untracked

  int64_t numel() const {
    int64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
  int64_t channels() const { return shape.empty() ? 1 : shape.back(); }
  int64_t points() const { return shape.empty() ? 1 : numel() / shape.back(); }

  static DiffArray zeros(std::vector<int64_t> shp) {
    DiffArray a;
    a.shape = std::move(shp);
    a.re.assign(static_cast<size_t>(a.numel()), 0.0f);
    return a;
  }
  static DiffArray zeros_complex(std::vector<int64_t> shp) {
    DiffArray a;
    a.shape = std::move(shp);
    a.dtype = Dtype::complex64;
    a.cx.assign(static_cast<size_t>(a.numel()), cfloat(0.0f, 0.0f));
    return a;
  }
  static DiffArray from(std::vector<int64_t> shp, std::vector<float> data) {
    DiffArray a;
    a.shape = std::move(shp);
    if (static_cast<int64_t>(data.size()) != a.numel()) fail("DiffArray::from: size mismatch");
    a.re = std::move(data);
    return a;
  }
};

// Same buffers and tape node under a new shape; numel must match.
inline DiffArray reshape(const DiffArray& x, std::vector<int64_t> shp) {
  DiffArray y = x;
  y.shape = std::move(shp);
  if (y.numel() != x.numel()) fail("reshape: numel mismatch");
  return y;
}

// Scalar-valued tape outputs carry their value in float64.
struct ScalarNode {
  double value = 0.0;
  int node = -1;
};

// Records operations in creation (= topological) order; backward visits each
// node at most once in reverse order. Scalar losses only.
class GradTape {
 public:
  int watch(DiffArray& a) {
    a.requires_grad = true;
    a.node = add_node(a.numel(), a.dtype);
    return a.node;
  }

  int add_node(int64_t numel, Dtype dt) {
    nodes_.push_back(Node{numel, dt, nullptr});
    gr_.emplace_back();
    gc_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }
  void set_back(int node, std::function<void(GradTape&)> fn) {
    nodes_[static_cast<size_t>(node)].back = std::move(fn);
  }

  void backward(int loss_node, double seed = 1.0) {
    if (loss_node < 0 || loss_node >= static_cast<int>(nodes_.size()))
      fail("backward: invalid loss node");
    const Node& ln = nodes_[static_cast<size_t>(loss_node)];
    if (ln.numel != 1 || ln.dtype != Dtype::real32)
      fail("backward: loss must be a real scalar");
    gr(loss_node)[0] += static_cast<float>(seed);
    for (int i = loss_node; i >= 0; --i) {
      if (gr_[static_cast<size_t>(i)].empty() && gc_[static_cast<size_t>(i)].empty()) continue;
      if (nodes_[static_cast<size_t>(i)].back) nodes_[static_cast<size_t>(i)].back(*this);
    }
  }

  // Gradient buffers, lazily sized to the node's numel.
  std::vector<float>& gr(int node) {
    auto& g = gr_[static_cast<size_t>(node)];
    if (g.empty()) g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), 0.0f);
    return g;
  }
  std::vector<cfloat>& gc(int node) {
    auto& g = gc_[static_cast<size_t>(node)];
    if (g.empty())
      g.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].numel), cfloat(0.0f, 0.0f));
    return g;
  }
  bool has_grad(int node) const {
    return node >= 0 && (!gr_[static_cast<size_t>(node)].empty() ||
                         !gc_[static_cast<size_t>(node)].empty());
  }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    int64_t numel;
    Dtype dtype;
    std::function<void(GradTape&)> back;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<float>> gr_;
  std::vector<std::vector<cfloat>> gc_;
};

namespace detail {

inline bool tracked(const DiffArray& a) { return a.node >= 0; }
inline bool recording(const GradTape* t, std::initializer_list<const DiffArray*> ins) {
  if (!t) return false;
  for (auto* a : ins)
    if (tracked(*a)) return true;
  return false;
}
inline std::shared_ptr<std::vector<float>> keep(const std::vector<float>& v) {
  return std::make_shared<std::vector<float>>(v);
}
inline std::shared_ptr<std::vector<cfloat>> keep(const std::vector<cfloat>& v) {
  return std::make_shared<std::vector<cfloat>>(v);
}

template <typename T>
void make_twiddles(int n, bool inverse, std::vector<std::complex<T>>& tw) {
  tw.resize(static_cast<size_t>(n / 2));
  const double sgn = inverse ? 1.0 : -1.0;
  const double pi = 3.14159265358979323846;
  for (int k = 0; k < n / 2; ++k) {
    const double ang = sgn * 2.0 * pi * static_cast<double>(k) / static_cast<double>(n);
    tw[static_cast<size_t>(k)] = std::complex<T>(T(std::cos(ang)), T(std::sin(ang)));
  }
}

// Radix-2 FFT over n positions spaced `stride` complex elements apart, applied
// to `width` interleaved transforms at once (the channel axis), so the inner
// loop is contiguous and vectorizes.
template <typename T>
void fft_vec(std::complex<T>* a, int n, int64_t stride, int64_t width,
             const std::vector<std::complex<T>>& tw) {
  for (int i = 1, j = 0; i < n; ++i) {
    int bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::complex<T>* p = a + static_cast<int64_t>(i) * stride;
      std::complex<T>* q = a + static_cast<int64_t>(j) * stride;
      for (int64_t c = 0; c < width; ++c) std::swap(p[c], q[c]);
    }
  }
  for (int len = 2; len <= n; len <<= 1) {
    const int half = len >> 1;
    const int step = n / len;
    for (int i = 0; i < n; i += len) {
      for (int k = 0; k < half; ++k) {
        const std::complex<T> w = tw[static_cast<size_t>(k * step)];
        std::complex<T>* p = a + static_cast<int64_t>(i + k) * stride;
        std::complex<T>* q = a + static_cast<int64_t>(i + k + half) * stride;
        for (int64_t c = 0; c < width; ++c) {
          const std::complex<T> u = p[c];
          const std::complex<T> v(q[c].real() * w.real() - q[c].imag() * w.imag(),
                                  q[c].real() * w.imag() + q[c].imag() * w.real());
          p[c] = u + v;
          q[c] = u - v;
        }
      }
    }
  }
}

// Unnormalized 2-D FFT of `batch` fields of shape (H,W,d), interleaved layout.
template <typename T>
void fft2_batch(std::complex<T>* data, int64_t batch, int H, int W, int64_t d, bool inverse) {
  std::vector<std::complex<T>> twH, twW;
  make_twiddles<T>(H, inverse, twH);
  make_twiddles<T>(W, inverse, twW);
  const int64_t plane = static_cast<int64_t>(H) * W * d;
  for (int64_t b = 0; b < batch; ++b) {
    std::complex<T>* base = data + b * plane;
    for (int h = 0; h < H; ++h) fft_vec(base + static_cast<int64_t>(h) * W * d, W, d, d, twW);
    fft_vec(base, H, static_cast<int64_t>(W) * d, static_cast<int64_t>(W) * d, twH);
  }
}

struct GridDims {
  int64_t batch;
  int H, W;
  int64_t d;
};

inline GridDims grid_dims(const DiffArray& x, const char* op) {
  GridDims g{};
  if (x.shape.size() == 3) {
    g.batch = 1;
    g.H = static_cast<int>(x.shape[0]);
    g.W = static_cast<int>(x.shape[1]);
    g.d = x.shape[2];
  } else if (x.shape.size() == 4) {
    g.batch = x.shape[0];
    g.H = static_cast<int>(x.shape[1]);
    g.W = static_cast<int>(x.shape[2]);
    g.d = x.shape[3];
  } else {
    fail(std::string(op) + ": expected (H,W,d) or (B,H,W,d)");
  }
  if (!is_pow2(g.H) || !is_pow2(g.W)) fail(std::string(op) + ": grid extents must be powers of two");
  return g;
}

}  // namespace detail

// y[p,:] = W x[p,:] + b at every point p. x: (...,din), W: (dout,din), b: (dout).
inline DiffArray affine_pointwise(GradTape* t, const DiffArray& x, const DiffArray& w,
                                  const DiffArray& b) {
  if (x.dtype != Dtype::real32 || w.dtype != Dtype::real32 || b.dtype != Dtype::real32)
    fail("affine_pointwise: real32 only");
  if (w.shape.size() != 2 || b.shape.size() != 1) fail("affine_pointwise: W must be 2-D, b 1-D");
  const int64_t din = w.shape[1], dout = w.shape[0];
  if (x.channels() != din || b.shape[0] != dout) fail("affine_pointwise: dimension mismatch");
  const int64_t P = x.points();

  DiffArray y;
  y.shape = x.shape;
  y.shape.back() = dout;
  y.re.resize(static_cast<size_t>(P * dout));

  // Hand-rolled kernels with a fixed accumulation order: results must not
  // depend on buffer addresses, and library GEMMs pick alignment-dependent
  // code paths. Sizes here are small (din, dout <= a few hundred), so plain
  // contiguous loops carry the day.
  const float* xp = x.re.data();
  const float* wp = w.re.data();
  const float* bp = b.re.data();
  float* yp = y.re.data();
  for (int64_t p = 0; p < P; ++p) {
    const float* xr = xp + p * din;
    float* yr = yp + p * dout;
    for (int64_t o = 0; o < dout; ++o) {
      const float* wr = wp + o * din;
      float acc = 0.0f;
      for (int64_t i = 0; i < din; ++i) acc += wr[i] * xr[i];
      yr[o] = acc + bp[o];
    }
  }

  if (detail::recording(t, {&x, &w, &b})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    auto xs = detail::keep(x.re);
    auto ws = detail::keep(w.re);
    const int xid = x.node, wid = w.node, bid = b.node;
    t->set_back(self, [=](GradTape& tt) {
      const float* g = tt.gr(self).data();
      if (xid >= 0) {
        float* gx = tt.gr(xid).data();
        const float* wd = ws->data();
        for (int64_t p = 0; p < P; ++p) {
          const float* gr = g + p * dout;
          float* gxr = gx + p * din;
          for (int64_t o = 0; o < dout; ++o) {
            const float go = gr[o];
            const float* wr = wd + o * din;
            for (int64_t i = 0; i < din; ++i) gxr[i] += wr[i] * go;
          }
        }
      }
      if (wid >= 0) {
        float* gw = tt.gr(wid).data();
        const float* xd = xs->data();
        for (int64_t p = 0; p < P; ++p) {
          const float* gr = g + p * dout;
          const float* xr = xd + p * din;
          for (int64_t o = 0; o < dout; ++o) {
            const float go = gr[o];
            float* gwr = gw + o * din;
            for (int64_t i = 0; i < din; ++i) gwr[i] += go * xr[i];
          }
        }
      }
      if (bid >= 0) {
        float* gb = tt.gr(bid).data();
        for (int64_t p = 0; p < P; ++p) {
          const float* gr = g + p * dout;
          for (int64_t o = 0; o < dout; ++o) gb[o] += gr[o];
        }
      }
    });
  }
  return y;
}

// y = x + b broadcast over points. x: (...,d), b: (d).
inline DiffArray bias_add(GradTape* t, const DiffArray& x, const DiffArray& b) {
  if (x.dtype != Dtype::real32 || b.dtype != Dtype::real32) fail("bias_add: real32 only");
  if (b.shape.size() != 1 || b.shape[0] != x.channels()) fail("bias_add: dimension mismatch");
  const int64_t d = x.channels(), P = x.points();

  DiffArray y;
  y.shape = x.shape;
  y.re.resize(x.re.size());
  for (int64_t p = 0; p < P; ++p)
    for (int64_t c = 0; c < d; ++c)
      y.re[static_cast<size_t>(p * d + c)] =
          x.re[static_cast<size_t>(p * d + c)] + b.re[static_cast<size_t>(c)];

  if (detail::recording(t, {&x, &b})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    const int xid = x.node, bid = b.node;
    t->set_back(self, [=](GradTape& tt) {
      const auto& g = tt.gr(self);
      if (xid >= 0) {
        auto& gx = tt.gr(xid);
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bid >= 0) {
        auto& gb = tt.gr(bid);
        for (int64_t p = 0; p < P; ++p)
          for (int64_t c = 0; c < d; ++c) gb[static_cast<size_t>(c)] += g[static_cast<size_t>(p * d + c)];
      }
    });
  }
  return y;
}

inline DiffArray activation(GradTape* t, const DiffArray& x, Act kind) {
  if (x.dtype != Dtype::real32) fail("activation: real32 only");
  DiffArray y;
  y.shape = x.shape;
  y.re.resize(x.re.size());
  for (size_t i = 0; i < x.re.size(); ++i) y.re[i] = act_eval(kind, x.re[i]);

  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    auto xs = detail::keep(x.re);
    const int xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const auto& g = tt.gr(self);
      auto& gx = tt.gr(xid);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += act_grad(kind, (*xs)[i]) * g[i];
    });
  }
  return y;
}

// Per-point layer norm over the channel axis with affine (gamma, beta).
// Statistics accumulate in float64; denominator uses 1/d (biased variance).
inline DiffArray layer_norm(GradTape* t, const DiffArray& x, const DiffArray& gamma,
                            const DiffArray& beta, double eps = 1e-5) {
  if (x.dtype != Dtype::real32) fail("layer_norm: real32 only");
  const int64_t d = x.channels(), P = x.points();
  if (gamma.shape.size() != 1 || gamma.shape[0] != d || beta.shape.size() != 1 ||
      beta.shape[0] != d)
    fail("layer_norm: affine shape mismatch");

  DiffArray y;
  y.shape = x.shape;
  y.re.resize(x.re.size());
  std::vector<float> xhat(x.re.size());
  std::vector<float> inv(static_cast<size_t>(P));
  for (int64_t p = 0; p < P; ++p) {
    const float* xp = x.re.data() + p * d;
    double mu = 0.0;
    for (int64_t c = 0; c < d; ++c) mu += xp[c];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t c = 0; c < d; ++c) {
      const double dv = xp[c] - mu;
      var += dv * dv;
    }
    var /= static_cast<double>(d);
    const float iv = static_cast<float>(1.0 / std::sqrt(var + eps));
    inv[static_cast<size_t>(p)] = iv;
    const float muf = static_cast<float>(mu);
    for (int64_t c = 0; c < d; ++c) {
      const float xh = (xp[c] - muf) * iv;
      xhat[static_cast<size_t>(p * d + c)] = xh;
      y.re[static_cast<size_t>(p * d + c)] =
          gamma.re[static_cast<size_t>(c)] * xh + beta.re[static_cast<size_t>(c)];
    }
  }

  if (detail::recording(t, {&x, &gamma, &beta})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    auto xh = detail::keep(xhat);
    auto ivs = detail::keep(inv);
    auto gs = detail::keep(gamma.re);
    const int xid = x.node, gid = gamma.node, bid = beta.node;
    t->set_back(self, [=](GradTape& tt) {
      const auto& g = tt.gr(self);
      if (gid >= 0) {
        auto& gg = tt.gr(gid);
        for (int64_t p = 0; p < P; ++p)
          for (int64_t c = 0; c < d; ++c)
            gg[static_cast<size_t>(c)] += g[static_cast<size_t>(p * d + c)] *
                                          (*xh)[static_cast<size_t>(p * d + c)];
      }
      if (bid >= 0) {
        auto& gb = tt.gr(bid);
        for (int64_t p = 0; p < P; ++p)
          for (int64_t c = 0; c < d; ++c) gb[static_cast<size_t>(c)] += g[static_cast<size_t>(p * d + c)];
      }
      if (xid >= 0) {
        auto& gx = tt.gr(xid);
        for (int64_t p = 0; p < P; ++p) {
          const float* gp = g.data() + p * d;
          const float* xp = xh->data() + p * d;
          double m1 = 0.0, m2 = 0.0;
          for (int64_t c = 0; c < d; ++c) {
            const double gh = static_cast<double>(gp[c]) * (*gs)[static_cast<size_t>(c)];
            m1 += gh;
            m2 += gh * xp[c];
          }
          m1 /= static_cast<double>(d);
          m2 /= static_cast<double>(d);
          const float iv = (*ivs)[static_cast<size_t>(p)];
          for (int64_t c = 0; c < d; ++c) {
            const double gh = static_cast<double>(gp[c]) * (*gs)[static_cast<size_t>(c)];
            gx[static_cast<size_t>(p * d + c)] +=
                iv * static_cast<float>(gh - m1 - static_cast<double>(xp[c]) * m2);
          }
        }
      }
    });
  }
  return y;
}

inline DiffArray add(GradTape* t, const DiffArray& a, const DiffArray& b) {
  if (a.dtype != Dtype::real32 || b.dtype != Dtype::real32) fail("add: real32 only");
  if (a.shape != b.shape) fail("add: shape mismatch");
  DiffArray y;
  y.shape = a.shape;
  y.re.resize(a.re.size());
  for (size_t i = 0; i < a.re.size(); ++i) y.re[i] = a.re[i] + b.re[i];
  if (detail::recording(t, {&a, &b})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    const int aid = a.node, bid = b.node;
    t->set_back(self, [=](GradTape& tt) {
      const auto& g = tt.gr(self);
      if (aid >= 0) {
        auto& ga = tt.gr(aid);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      }
      if (bid >= 0) {
        auto& gb = tt.gr(bid);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

inline DiffArray scale(GradTape* t, const DiffArray& x, double s) {
  if (x.dtype != Dtype::real32) fail("scale: real32 only");
  const float sf = static_cast<float>(s);
  DiffArray y;
  y.shape = x.shape;
  y.re.resize(x.re.size());
  for (size_t i = 0; i < x.re.size(); ++i) y.re[i] = x.re[i] * sf;
  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    const int xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const auto& g = tt.gr(self);
      auto& gx = tt.gr(xid);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * sf;
    });
  }
  return y;
}

// Multiplies each slice along the first axis by mask[b] (per-sample gating).
inline DiffArray scale_rows(GradTape* t, const DiffArray& x, const std::vector<float>& mask) {
  if (x.dtype != Dtype::real32) fail("scale_rows: real32 only");
  if (x.shape.empty() || static_cast<int64_t>(mask.size()) != x.shape[0])
    fail("scale_rows: mask length must equal the first axis");
  const int64_t B = x.shape[0], S = x.numel() / B;
  DiffArray y;
  y.shape = x.shape;
  y.re.resize(x.re.size());
  for (int64_t b = 0; b < B; ++b) {
    const float m = mask[static_cast<size_t>(b)];
    const float* xp = x.re.data() + b * S;
    float* yp = y.re.data() + b * S;
    for (int64_t i = 0; i < S; ++i) yp[i] = xp[i] * m;
  }
  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    const int xid = x.node;
    auto ms = std::make_shared<std::vector<float>>(mask);
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const auto& g = tt.gr(self);
      auto& gx = tt.gr(xid);
      for (int64_t b = 0; b < B; ++b) {
        const float m = (*ms)[static_cast<size_t>(b)];
        for (int64_t i = 0; i < S; ++i)
          gx[static_cast<size_t>(b * S + i)] += g[static_cast<size_t>(b * S + i)] * m;
      }
    });
  }
  return y;
}

inline DiffArray square(GradTape* t, const DiffArray& x) {
  if (x.dtype != Dtype::real32) fail("square: real32 only");
  DiffArray y;
  y.shape = x.shape;
  y.re.resize(x.re.size());
  for (size_t i = 0; i < x.re.size(); ++i) y.re[i] = x.re[i] * x.re[i];
  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    auto xs = detail::keep(x.re);
    const int xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const auto& g = tt.gr(self);
      auto& gx = tt.gr(xid);
      for (size_t i = 0; i < g.size(); ++i) gx[i] += 2.0f * (*xs)[i] * g[i];
    });
  }
  return y;
}

// Mean over all leading axes, keeping channels: (...,d) -> (1,..,1,d).
inline DiffArray global_average_pool(GradTape* t, const DiffArray& x) {
  if (x.dtype != Dtype::real32) fail("global_average_pool: real32 only");
  const int64_t d = x.channels(), P = x.points();
  DiffArray y;
  y.shape.assign(x.shape.size(), 1);
  y.shape.back() = d;
  y.re.assign(static_cast<size_t>(d), 0.0f);
  std::vector<double> acc(static_cast<size_t>(d), 0.0);
  for (int64_t p = 0; p < P; ++p)
    for (int64_t c = 0; c < d; ++c) acc[static_cast<size_t>(c)] += x.re[static_cast<size_t>(p * d + c)];
  for (int64_t c = 0; c < d; ++c)
    y.re[static_cast<size_t>(c)] = static_cast<float>(acc[static_cast<size_t>(c)] / static_cast<double>(P));

  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    const int xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const auto& g = tt.gr(self);
      auto& gx = tt.gr(xid);
      const float invP = static_cast<float>(1.0 / static_cast<double>(P));
      for (int64_t p = 0; p < P; ++p)
        for (int64_t c = 0; c < d; ++c)
          gx[static_cast<size_t>(p * d + c)] += g[static_cast<size_t>(c)] * invP;
    });
  }
  return y;
}

// Batched GAP: (B,...,d) -> (B,1,..,1,d), mean over the middle axes of each sample.
inline DiffArray average_pool_per_sample(GradTape* t, const DiffArray& x) {
  if (x.dtype != Dtype::real32) fail("average_pool_per_sample: real32 only");
  if (x.shape.size() < 2) fail("average_pool_per_sample: need at least (B,d)");
  const int64_t B = x.shape[0], d = x.channels();
  const int64_t P = x.numel() / (B * d);
  DiffArray y;
  y.shape.assign(x.shape.size(), 1);
  y.shape[0] = B;
  y.shape.back() = d;
  y.re.assign(static_cast<size_t>(B * d), 0.0f);
  for (int64_t b = 0; b < B; ++b) {
    std::vector<double> acc(static_cast<size_t>(d), 0.0);
    const float* xp = x.re.data() + b * P * d;
    for (int64_t p = 0; p < P; ++p)
      for (int64_t c = 0; c < d; ++c) acc[static_cast<size_t>(c)] += xp[p * d + c];
    for (int64_t c = 0; c < d; ++c)
      y.re[static_cast<size_t>(b * d + c)] =
          static_cast<float>(acc[static_cast<size_t>(c)] / static_cast<double>(P));
  }
  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    const int xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const auto& g = tt.gr(self);
      auto& gx = tt.gr(xid);
      const float invP = static_cast<float>(1.0 / static_cast<double>(P));
      for (int64_t b = 0; b < B; ++b)
        for (int64_t p = 0; p < P; ++p)
          for (int64_t c = 0; c < d; ++c)
            gx[static_cast<size_t>((b * P + p) * d + c)] += g[static_cast<size_t>(b * d + c)] * invP;
    });
  }
  return y;
}

// theta = (W flattened row-major, then b) per sample; y[b] = W_b x[b] + b_b.
// theta: (B,1,..,m*m+m), x: (B,1,..,m). Differentiates through both.
inline DiffArray hyper_affine(GradTape* t, const DiffArray& theta, const DiffArray& x) {
  if (theta.dtype != Dtype::real32 || x.dtype != Dtype::real32) fail("hyper_affine: real32 only");
  if (theta.shape.empty() || x.shape.empty() || theta.shape[0] != x.shape[0])
    fail("hyper_affine: batch mismatch");
  const int64_t B = x.shape[0];
  const int64_t m = x.numel() / B;
  if (theta.numel() / B != m * m + m) fail("hyper_affine: theta must pack m*m+m values");

  DiffArray y;
  y.shape = x.shape;
  y.re.assign(x.re.size(), 0.0f);
  for (int64_t b = 0; b < B; ++b) {
    const float* th = theta.re.data() + b * (m * m + m);
    const float* xp = x.re.data() + b * m;
    float* yp = y.re.data() + b * m;
    for (int64_t o = 0; o < m; ++o) {
      double acc = th[m * m + o];
      const float* row = th + o * m;
      for (int64_t i = 0; i < m; ++i) acc += static_cast<double>(row[i]) * xp[i];
      yp[o] = static_cast<float>(acc);
    }
  }

  if (detail::recording(t, {&theta, &x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    auto ths = detail::keep(theta.re);
    auto xs = detail::keep(x.re);
    const int tid = theta.node, xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      const auto& g = tt.gr(self);
      for (int64_t b = 0; b < B; ++b) {
        const float* gp = g.data() + b * m;
        const float* th = ths->data() + b * (m * m + m);
        const float* xp = xs->data() + b * m;
        if (tid >= 0) {
          auto& gt = tt.gr(tid);
          float* gth = gt.data() + b * (m * m + m);
          for (int64_t o = 0; o < m; ++o) {
            for (int64_t i = 0; i < m; ++i) gth[o * m + i] += gp[o] * xp[i];
            gth[m * m + o] += gp[o];
          }
        }
        if (xid >= 0) {
          auto& gx = tt.gr(xid);
          float* gxp = gx.data() + b * m;
          for (int64_t o = 0; o < m; ++o)
            for (int64_t i = 0; i < m; ++i) gxp[i] += th[o * m + i] * gp[o];
        }
      }
    });
  }
  return y;
}

// Unnormalized forward 2-D FFT per channel. Real (.,H,W,d) -> complex (.,H,W,d).
inline DiffArray fft2_forward(GradTape* t, const DiffArray& x) {
  if (x.dtype != Dtype::real32) fail("fft2_forward: real32 input only");
  const auto gd = detail::grid_dims(x, "fft2_forward");
  DiffArray y = DiffArray::zeros_complex(x.shape);
  for (size_t i = 0; i < x.re.size(); ++i) y.cx[i] = cfloat(x.re[i], 0.0f);
  detail::fft2_batch(y.cx.data(), gd.batch, gd.H, gd.W, gd.d, false);

  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::complex64);
    y.node = self;
    const int xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      std::vector<cfloat> scratch = tt.gc(self);
      detail::fft2_batch(scratch.data(), gd.batch, gd.H, gd.W, gd.d, true);
      auto& gx = tt.gr(xid);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += scratch[i].real();
    });
  }
  return y;
}

// Inverse 2-D FFT with 1/(H*W) normalization; returns the real part.
inline DiffArray ifft2_inverse(GradTape* t, const DiffArray& x) {
  if (x.dtype != Dtype::complex64) fail("ifft2_inverse: complex64 input only");
  const auto gd = detail::grid_dims(x, "ifft2_inverse");
  const float invM = 1.0f / static_cast<float>(gd.H * gd.W);
  std::vector<cfloat> scratch = x.cx;
  detail::fft2_batch(scratch.data(), gd.batch, gd.H, gd.W, gd.d, true);
  DiffArray y = DiffArray::zeros(x.shape);
  for (size_t i = 0; i < y.re.size(); ++i) y.re[i] = scratch[i].real() * invM;

  if (detail::recording(t, {&x})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    const int xid = x.node;
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const auto& g = tt.gr(self);
      std::vector<cfloat> s(g.size());
      for (size_t i = 0; i < g.size(); ++i) s[i] = cfloat(g[i] * invM, 0.0f);
      detail::fft2_batch(s.data(), gd.batch, gd.H, gd.W, gd.d, false);
      auto& gx = tt.gc(xid);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += s[i];
    });
  }
  return y;
}

// Truncated-mode spectral weights. Coefficient tensor is complex with shape
// (k_max, k_max, 2, d_in, d_out); the extent-2 axis selects the nonnegative /
// negative frequency block along the first spatial axis (rows [0,k_max) and
// [H-k_max,H)), the second spatial axis keeps columns [0,k_max).
struct SpectralKernel {
  DiffArray coeff;
  int k_max = 0;
  int64_t d_in = 0, d_out = 0;

  static SpectralKernel zeros(int k_max, int64_t d_in, int64_t d_out) {
    SpectralKernel k;
    k.k_max = k_max;
    k.d_in = d_in;
    k.d_out = d_out;
    k.coeff = DiffArray::zeros_complex({k_max, k_max, 2, d_in, d_out});
    return k;
  }
  void validate() const {
    if (k_max <= 0) fail("SpectralKernel: k_max must be positive");
    if (coeff.dtype != Dtype::complex64 || coeff.shape.size() != 5 || coeff.shape[0] != k_max ||
        coeff.shape[1] != k_max || coeff.shape[2] != 2 || coeff.shape[3] != d_in ||
        coeff.shape[4] != d_out)
      fail("SpectralKernel: coefficient shape mismatch");
    for (const auto& v : coeff.cx)
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        fail("SpectralKernel: non-finite coefficient");
  }
};

// y = Re(IFFT2(K . FFT2(x))) on the retained modes. The conjugate-mirrored
// entries are written for columns 1..k_max-1 so the inverse transform of the
// retained set is real up to the ky=0 columns, whose imaginary residue is
// dropped by taking Re.
inline DiffArray spectral_conv(GradTape* t, const DiffArray& x, SpectralKernel& K) {
  if (x.dtype != Dtype::real32) fail("spectral_conv: real32 input only");
  const auto gd = detail::grid_dims(x, "spectral_conv");
  if (gd.d != K.d_in) fail("spectral_conv: channel mismatch");
  const int km = K.k_max;
  if (km > gd.H / 2 || km > gd.W / 2) fail("spectral_conv: k_max exceeds grid/2");
  const int64_t din = K.d_in, dout = K.d_out;
  const int H = gd.H, W = gd.W;
  const int64_t B = gd.batch;
  const float invM = 1.0f / static_cast<float>(H * W);

  // Forward FFT of the input, interleaved over channels.
  std::vector<cfloat> xf(x.re.size());
  for (size_t i = 0; i < x.re.size(); ++i) xf[i] = cfloat(x.re[i], 0.0f);
  detail::fft2_batch(xf.data(), B, H, W, din, false);

  // Retained blocks of the input spectrum, saved for the backward pass.
  const int64_t bsz = static_cast<int64_t>(km) * km * 2;
  auto xblocks = std::make_shared<std::vector<cfloat>>(static_cast<size_t>(B * bsz * din));
  auto row_of = [&](int k1, int blk) { return blk == 0 ? k1 : H - km + k1; };
  for (int64_t b = 0; b < B; ++b)
    for (int k1 = 0; k1 < km; ++k1)
      for (int k2 = 0; k2 < km; ++k2)
        for (int blk = 0; blk < 2; ++blk) {
          const int r = row_of(k1, blk);
          const cfloat* src = xf.data() + ((b * H + r) * W + k2) * din;
          cfloat* dst = xblocks->data() +
                        (((b * km + k1) * km + k2) * 2 + blk) * din;
          for (int64_t i = 0; i < din; ++i) dst[i] = src[i];
        }

  // Multiply blocks by the kernel and scatter into a full spectrum.
  std::vector<cfloat> yf(static_cast<size_t>(B * H * W * dout), cfloat(0.0f, 0.0f));
  std::vector<cfloat> yb(static_cast<size_t>(dout));
  for (int64_t b = 0; b < B; ++b)
    for (int k1 = 0; k1 < km; ++k1)
      for (int k2 = 0; k2 < km; ++k2)
        for (int blk = 0; blk < 2; ++blk) {
          const cfloat* xb = xblocks->data() + (((b * km + k1) * km + k2) * 2 + blk) * din;
          const cfloat* kc = K.coeff.cx.data() + (((static_cast<int64_t>(k1) * km + k2) * 2 + blk) * din) * dout;
          std::fill(yb.begin(), yb.end(), cfloat(0.0f, 0.0f));
          for (int64_t i = 0; i < din; ++i) {
            const cfloat xv = xb[i];
            const cfloat* krow = kc + i * dout;
            for (int64_t o = 0; o < dout; ++o) {
              const cfloat kv = krow[o];
              yb[static_cast<size_t>(o)] +=
                  cfloat(xv.real() * kv.real() - xv.imag() * kv.imag(),
                         xv.real() * kv.imag() + xv.imag() * kv.real());
            }
          }
          const int r = row_of(k1, blk);
          cfloat* dst = yf.data() + ((b * H + r) * W + k2) * dout;
          for (int64_t o = 0; o < dout; ++o) dst[o] = yb[static_cast<size_t>(o)];
          if (k2 >= 1) {
            const int mr = (H - r) % H;
            const int mc = W - k2;
            cfloat* mdst = yf.data() + ((b * H + mr) * W + mc) * dout;
            for (int64_t o = 0; o < dout; ++o) mdst[o] = std::conj(yb[static_cast<size_t>(o)]);
          }
        }

  detail::fft2_batch(yf.data(), B, H, W, dout, true);
  DiffArray y;
  y.shape = x.shape;
  y.shape.back() = dout;
  y.re.resize(static_cast<size_t>(B * H * W * dout));
  for (size_t i = 0; i < y.re.size(); ++i) y.re[i] = yf[i].real() * invM;

  if (detail::recording(t, {&x, &K.coeff})) {
    const int self = t->add_node(y.numel(), Dtype::real32);
    y.node = self;
    auto kcopy = detail::keep(K.coeff.cx);
    const int xid = x.node, kid = K.coeff.node;
    t->set_back(self, [=](GradTape& tt) {
      const auto& g = tt.gr(self);
      // U = (1/M) FFT2(g) per output channel.
      std::vector<cfloat> uf(g.size());
      for (size_t i = 0; i < g.size(); ++i) uf[i] = cfloat(g[i] * invM, 0.0f);
      detail::fft2_batch(uf.data(), B, H, W, dout, false);

      std::vector<cfloat> ub(static_cast<size_t>(dout));
      std::vector<cfloat> gxf;
      if (xid >= 0) gxf.assign(static_cast<size_t>(B * H * W * din), cfloat(0.0f, 0.0f));
      for (int64_t b = 0; b < B; ++b)
        for (int k1 = 0; k1 < km; ++k1)
          for (int k2 = 0; k2 < km; ++k2)
            for (int blk = 0; blk < 2; ++blk) {
              const int r = blk == 0 ? k1 : H - km + k1;
              const cfloat* up = uf.data() + ((b * H + r) * W + k2) * dout;
              for (int64_t o = 0; o < dout; ++o) ub[static_cast<size_t>(o)] = up[o];
              if (k2 >= 1) {
                const int mr = (H - r) % H;
                const int mc = W - k2;
                const cfloat* um = uf.data() + ((b * H + mr) * W + mc) * dout;
                for (int64_t o = 0; o < dout; ++o) ub[static_cast<size_t>(o)] += std::conj(um[o]);
              }
              const cfloat* xb = xblocks->data() + (((b * km + k1) * km + k2) * 2 + blk) * din;
              const int64_t koff = (((static_cast<int64_t>(k1) * km + k2) * 2 + blk) * din) * dout;
              if (kid >= 0) {
                auto& gk = tt.gc(kid);
                for (int64_t i = 0; i < din; ++i) {
                  const cfloat xc = std::conj(xb[i]);
                  cfloat* grow = gk.data() + koff + i * dout;
                  for (int64_t o = 0; o < dout; ++o) grow[o] += ub[static_cast<size_t>(o)] * xc;
                }
              }
              if (xid >= 0) {
                cfloat* gx = gxf.data() + ((b * H + r) * W + k2) * din;
                const cfloat* kc = kcopy->data() + koff;
                for (int64_t i = 0; i < din; ++i) {
                  cfloat acc(0.0f, 0.0f);
                  const cfloat* krow = kc + i * dout;
                  for (int64_t o = 0; o < dout; ++o) acc += std::conj(krow[o]) * ub[static_cast<size_t>(o)];
                  gx[i] = acc;
                }
              }
            }
      if (xid >= 0) {
        detail::fft2_batch(gxf.data(), B, H, W, din, true);
        auto& gx = tt.gr(xid);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += gxf[i].real();
      }
    });
  }
  return y;
}

// Sum of all entries, accumulated in float64.
inline ScalarNode sum(GradTape* t, const DiffArray& x) {
  if (x.dtype != Dtype::real32) fail("sum: real32 only");
  ScalarNode s;
  double acc = 0.0;
  for (float v : x.re) acc += v;
  s.value = acc;
  if (detail::recording(t, {&x})) {
    s.node = t->add_node(1, Dtype::real32);
    const int self = s.node, xid = x.node;
    const int64_t n = x.numel();
    t->set_back(self, [=](GradTape& tt) {
      if (xid < 0) return;
      const float g = tt.gr(self)[0];
      auto& gx = tt.gr(xid);
      for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
    });
  }
  return s;
}

namespace detail {
inline ScalarNode rel_l2_impl(GradTape* t, const DiffArray& pred, const DiffArray& ref,
                              int64_t nbatch) {
  if (pred.dtype != Dtype::real32 || ref.dtype != Dtype::real32) fail("rel_l2: real32 only");
  if (pred.numel() != ref.numel()) fail("rel_l2: shape mismatch");
  const int64_t S = pred.numel() / nbatch;
  std::vector<double> num(static_cast<size_t>(nbatch)), den(static_cast<size_t>(nbatch));
  double total = 0.0;
  for (int64_t b = 0; b < nbatch; ++b) {
    double n2 = 0.0, d2 = 0.0;
    const float* pp = pred.re.data() + b * S;
    const float* rp = ref.re.data() + b * S;
    for (int64_t i = 0; i < S; ++i) {
      const double dv = static_cast<double>(pp[i]) - rp[i];
      n2 += dv * dv;
      d2 += static_cast<double>(rp[i]) * rp[i];
    }
    if (d2 == 0.0) fail("rel_l2: reference has zero norm");
    num[static_cast<size_t>(b)] = std::sqrt(n2);
    den[static_cast<size_t>(b)] = std::sqrt(d2);
    total += num[static_cast<size_t>(b)] / den[static_cast<size_t>(b)];
  }
  ScalarNode s;
  s.value = total / static_cast<double>(nbatch);
  if (detail::recording(t, {&pred})) {
    s.node = t->add_node(1, Dtype::real32);
    const int self = s.node, pid = pred.node;
    auto ps = detail::keep(pred.re);
    auto rs = detail::keep(ref.re);
    auto nums = std::make_shared<std::vector<double>>(std::move(num));
    auto dens = std::make_shared<std::vector<double>>(std::move(den));
    t->set_back(self, [=](GradTape& tt) {
      if (pid < 0) return;
      const double g = static_cast<double>(tt.gr(self)[0]) / static_cast<double>(nbatch);
      auto& gp = tt.gr(pid);
      for (int64_t b = 0; b < nbatch; ++b) {
        const double nb = (*nums)[static_cast<size_t>(b)], db = (*dens)[static_cast<size_t>(b)];
        if (nb == 0.0) continue;
        const double coef = g / (nb * db);
        const float* pp = ps->data() + b * S;
        const float* rp = rs->data() + b * S;
        float* gpp = gp.data() + b * S;
        for (int64_t i = 0; i < S; ++i)
          gpp[i] += static_cast<float>((static_cast<double>(pp[i]) - rp[i]) * coef);
      }
    });
  }
  return s;
}
}  // namespace detail

// Relative L2 error of one sample: |pred - ref| / |ref| over the whole array.
inline ScalarNode rel_l2(GradTape* t, const DiffArray& pred, const DiffArray& ref) {
  return detail::rel_l2_impl(t, pred, ref, 1);
}

// Mean of per-sample relative L2 errors over the first axis.
inline ScalarNode rel_l2_batch(GradTape* t, const DiffArray& pred, const DiffArray& ref) {
  if (pred.shape.empty()) fail("rel_l2_batch: need a batch axis");
  return detail::rel_l2_impl(t, pred, ref, pred.shape[0]);
}

}  // namespace nolab::ad
