#pragma once

// Binary dataset / checkpoint containers, run-config parsing, CSV output.
//
// NOPD dataset layout (little endian):
//   "NOPD" | u16 version | u16 flags | u32 n | u32 H | u32 W | u16 n_src |
//   u16 n_rcv | payload float32 | u32 crc32(payload)
// Payload is c (n,H,W) followed by p (n,H,W,2) for field datasets, or by
// traces (n,n_src,n_rcv,2) when flags bit0 is set. Row-major throughout.
//
// NOCK checkpoint layout:
//   "NOCK" | u16 version | body | u32 crc32(body)
// Body: u32 len + config text, named parameter blobs, optimizer step and
// moment blobs in the same framing, rng state text, u32 epoch.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "nolab/errors.hpp"
#include "nolab/tensor.hpp"

static_assert(std::endian::native == std::endian::little,
              "file formats assume a little-endian host");

namespace nolab::io {

using ad::cfloat;

inline uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0) {
  static const auto table = [] {
    std::array<uint32_t, 256> t{};
    for (uint32_t i = 0; i < 256; ++i) {
      uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  uint32_t c = seed ^ 0xFFFFFFFFu;
  for (size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

namespace detail {

struct Writer {
  std::string buf;
  template <typename T>
  void raw(const T& v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const size_t at = buf.size();
    buf.resize(at + sizeof(T));
    std::memcpy(buf.data() + at, &v, sizeof(T));
  }
  void bytes(const void* p, size_t n) {
    const size_t at = buf.size();
    buf.resize(at + n);
    std::memcpy(buf.data() + at, p, n);
  }
  void str16(const std::string& s) {
    if (s.size() > 0xFFFF) throw ConfigError("string too long for u16 framing");
    raw(static_cast<uint16_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void str32(const std::string& s) {
    raw(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
};

struct Reader {
  const uint8_t* p;
  size_t n, at = 0;
  Reader(const uint8_t* data, size_t len) : p(data), n(len) {}
  template <typename T>
  T raw() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (at + sizeof(T) > n) throw ConfigError("file truncated");
    T v;
    std::memcpy(&v, p + at, sizeof(T));
    at += sizeof(T);
    return v;
  }
  void bytes(void* dst, size_t len) {
    if (at + len > n) throw ConfigError("file truncated");
    std::memcpy(dst, p + at, len);
    at += len;
  }
  std::string str16() {
    const uint16_t len = raw<uint16_t>();
    std::string s(len, '\0');
    bytes(s.data(), len);
    return s;
  }
  std::string str32() {
    const uint32_t len = raw<uint32_t>();
    std::string s(len, '\0');
    bytes(s.data(), len);
    return s;
  }
};

inline std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open file: " + path);
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

inline void spit(const std::string& path, const std::string& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write file: " + path);
  f.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!f) throw ConfigError("write failed: " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// NOPD datasets

struct Dataset {
  uint16_t version = 1;
  uint16_t flags = 0;  // bit0: trace payload
  uint32_t H = 0, W = 0;
  uint16_t n_src = 0, n_rcv = 0;
  std::vector<float> c;       // (n,H,W)
  std::vector<float> p;       // (n,H,W,2) when field payload
  std::vector<float> traces;  // (n,n_src,n_rcv,2) when trace payload

  bool has_traces() const { return (flags & 1u) != 0; }
  uint32_t n() const {
    const uint64_t hw = static_cast<uint64_t>(H) * W;
    return hw == 0 ? 0 : static_cast<uint32_t>(c.size() / hw);
  }
  void check_consistent() const {
    const uint64_t hw = static_cast<uint64_t>(H) * W;
    if (hw == 0 || c.size() % hw != 0) throw ConfigError("dataset: bad c payload size");
    const uint64_t nn = c.size() / hw;
    if (has_traces()) {
      if (traces.size() != nn * n_src * n_rcv * 2) throw ConfigError("dataset: bad trace payload size");
      if (!p.empty()) throw ConfigError("dataset: both payload kinds present");
    } else {
      if (p.size() != nn * hw * 2) throw ConfigError("dataset: bad field payload size");
      if (!traces.empty()) throw ConfigError("dataset: both payload kinds present");
    }
  }
};

inline void save_dataset(const std::string& path, const Dataset& d) {
  d.check_consistent();
  detail::Writer w;
  w.bytes("NOPD", 4);
  w.raw(d.version);
  w.raw(d.flags);
  w.raw(d.n());
  w.raw(d.H);
  w.raw(d.W);
  w.raw(d.n_src);
  w.raw(d.n_rcv);
  const size_t payload_at = w.buf.size();
  w.bytes(d.c.data(), d.c.size() * sizeof(float));
  if (d.has_traces())
    w.bytes(d.traces.data(), d.traces.size() * sizeof(float));
  else
    w.bytes(d.p.data(), d.p.size() * sizeof(float));
  const uint32_t crc = crc32(reinterpret_cast<const uint8_t*>(w.buf.data() + payload_at),
                             w.buf.size() - payload_at);
  w.raw(crc);
  detail::spit(path, w.buf);
}

inline Dataset load_dataset(const std::string& path) {
  const std::string buf = detail::slurp(path);
  detail::Reader r(reinterpret_cast<const uint8_t*>(buf.data()), buf.size());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "NOPD", 4) != 0) throw ConfigError(path + ": not a NOPD dataset");
  Dataset d;
  d.version = r.raw<uint16_t>();
  if (d.version != 1) throw ConfigError(path + ": unsupported NOPD version");
  d.flags = r.raw<uint16_t>();
  const uint32_t n = r.raw<uint32_t>();
  d.H = r.raw<uint32_t>();
  d.W = r.raw<uint32_t>();
  d.n_src = r.raw<uint16_t>();
  d.n_rcv = r.raw<uint16_t>();
  const uint64_t hw = static_cast<uint64_t>(d.H) * d.W;
  const size_t payload_at = r.at;
  d.c.resize(n * hw);
  r.bytes(d.c.data(), d.c.size() * sizeof(float));
  if (d.has_traces()) {
    d.traces.resize(static_cast<size_t>(n) * d.n_src * d.n_rcv * 2);
    r.bytes(d.traces.data(), d.traces.size() * sizeof(float));
  } else {
    d.p.resize(n * hw * 2);
    r.bytes(d.p.data(), d.p.size() * sizeof(float));
  }
  const uint32_t stored = r.raw<uint32_t>();
  const uint32_t computed = crc32(reinterpret_cast<const uint8_t*>(buf.data()) + payload_at,
                                  r.at - 4 - payload_at);
  if (stored != computed) throw ConfigError(path + ": payload checksum mismatch");
  d.check_consistent();
  return d;
}

// ---------------------------------------------------------------------------
// NOCK checkpoints

struct Blob {
  std::string name;
  ad::Dtype dtype = ad::Dtype::real32;
  std::vector<int64_t> dims;
  std::vector<float> f;
  std::vector<cfloat> c;
};

struct Checkpoint {
  uint16_t version = 1;
  std::string config_text;  // architecture key=value block
  std::vector<Blob> params;
  uint64_t opt_step = 0;
  std::vector<Blob> opt_state;
  std::string rng_state;
  uint32_t epoch = 0;
};

namespace detail {

inline void write_blob(Writer& w, const Blob& b) {
  w.str16(b.name);
  w.raw(static_cast<uint8_t>(b.dtype == ad::Dtype::real32 ? 0 : 1));
  w.raw(static_cast<uint8_t>(b.dims.size()));
  for (int64_t d : b.dims) w.raw(d);
  if (b.dtype == ad::Dtype::real32) {
    w.raw(static_cast<uint64_t>(b.f.size()));
    w.bytes(b.f.data(), b.f.size() * sizeof(float));
  } else {
    w.raw(static_cast<uint64_t>(b.c.size()));
    w.bytes(b.c.data(), b.c.size() * sizeof(cfloat));
  }
}

inline Blob read_blob(Reader& r) {
  Blob b;
  b.name = r.str16();
  b.dtype = r.raw<uint8_t>() == 0 ? ad::Dtype::real32 : ad::Dtype::complex64;
  const uint8_t nd = r.raw<uint8_t>();
  b.dims.resize(nd);
  for (auto& d : b.dims) d = r.raw<int64_t>();
  const uint64_t count = r.raw<uint64_t>();
  if (b.dtype == ad::Dtype::real32) {
    b.f.resize(count);
    r.bytes(b.f.data(), count * sizeof(float));
  } else {
    b.c.resize(count);
    r.bytes(b.c.data(), count * sizeof(cfloat));
  }
  return b;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  detail::Writer w;
  w.str32(ck.config_text);
  w.raw(static_cast<uint32_t>(ck.params.size()));
  for (const auto& b : ck.params) detail::write_blob(w, b);
  w.raw(ck.opt_step);
  w.raw(static_cast<uint32_t>(ck.opt_state.size()));
  for (const auto& b : ck.opt_state) detail::write_blob(w, b);
  w.str32(ck.rng_state);
  w.raw(ck.epoch);

  detail::Writer out;
  out.bytes("NOCK", 4);
  out.raw(ck.version);
  out.bytes(w.buf.data(), w.buf.size());
  out.raw(crc32(reinterpret_cast<const uint8_t*>(w.buf.data()), w.buf.size()));
  detail::spit(path, out.buf);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  const std::string buf = detail::slurp(path);
  detail::Reader r(reinterpret_cast<const uint8_t*>(buf.data()), buf.size());
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, "NOCK", 4) != 0) throw ConfigError(path + ": not a NOCK checkpoint");
  Checkpoint ck;
  ck.version = r.raw<uint16_t>();
  if (ck.version != 1) throw ConfigError(path + ": unsupported NOCK version");
  const size_t body_at = r.at;
  if (buf.size() < body_at + 4) throw ConfigError(path + ": file truncated");
  uint32_t stored = 0;
  std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
  const uint32_t computed = crc32(reinterpret_cast<const uint8_t*>(buf.data()) + body_at,
                                  buf.size() - body_at - 4);
  if (stored != computed) throw ConfigError(path + ": checkpoint checksum mismatch");
  ck.config_text = r.str32();
  const uint32_t np = r.raw<uint32_t>();
  ck.params.resize(np);
  for (auto& b : ck.params) b = detail::read_blob(r);
  ck.opt_step = r.raw<uint64_t>();
  const uint32_t no = r.raw<uint32_t>();
  ck.opt_state.resize(no);
  for (auto& b : ck.opt_state) b = detail::read_blob(r);
  ck.rng_state = r.str32();
  ck.epoch = r.raw<uint32_t>();
  return ck;
}

// ---------------------------------------------------------------------------
// Run configuration: flat key=value text with '#' comments.

struct RunConfig {
  std::map<std::string, std::string> kv;
  std::map<std::string, int> line;  // for diagnostics

  bool has(const std::string& k) const { return kv.count(k) != 0; }

  std::string get_str(const std::string& k, const std::string& def) const {
    auto it = kv.find(k);
    return it == kv.end() ? def : it->second;
  }
  std::string need_str(const std::string& k) const {
    auto it = kv.find(k);
    if (it == kv.end()) throw ConfigError("missing required config key: " + k);
    return it->second;
  }
  double get_double(const std::string& k, double def) const {
    auto it = kv.find(k);
    return it == kv.end() ? def : parse_double(k, it->second);
  }
  int64_t get_int(const std::string& k, int64_t def) const {
    auto it = kv.find(k);
    return it == kv.end() ? def : parse_int(k, it->second);
  }
  uint64_t get_u64(const std::string& k, uint64_t def) const {
    auto it = kv.find(k);
    if (it == kv.end()) return def;
    uint64_t v = 0;
    auto [p, ec] = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
    if (ec != std::errc() || p != it->second.data() + it->second.size())
      throw ConfigError("config key " + k + ": expected unsigned integer, got '" + it->second + "'");
    return v;
  }
  bool get_bool(const std::string& k, bool def) const {
    auto it = kv.find(k);
    if (it == kv.end()) return def;
    const std::string& s = it->second;
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("config key " + k + ": expected boolean, got '" + s + "'");
  }

  static double parse_double(const std::string& k, const std::string& s) {
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("config key " + k + ": expected number, got '" + s + "'");
    return v;
  }
  static int64_t parse_int(const std::string& k, const std::string& s) {
    int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("config key " + k + ": expected integer, got '" + s + "'");
    return v;
  }
};

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  size_t b = s.find_last_not_of(" \t\r");
  return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

inline RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream is(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const size_t hash = raw.find('#');
    std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    const size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(s.substr(0, eq));
    const std::string val = trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    if (cfg.kv.count(key))
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    cfg.kv[key] = val;
    cfg.line[key] = lineno;
  }
  return cfg;
}

inline RunConfig parse_config_file(const std::string& path) {
  return parse_config_text(detail::slurp(path));
}

// Pattern segments are dot-separated; '*' matches one arbitrary segment.
inline bool key_matches(const std::string& pattern, const std::string& key) {
  size_t pi = 0, ki = 0;
  while (true) {
    const size_t pe = pattern.find('.', pi);
    const size_t ke = key.find('.', ki);
    const std::string ps = pattern.substr(pi, pe == std::string::npos ? std::string::npos : pe - pi);
    const std::string ks = key.substr(ki, ke == std::string::npos ? std::string::npos : ke - ki);
    if (ps != "*" && ps != ks) return false;
    if (pe == std::string::npos || ke == std::string::npos)
      return pe == std::string::npos && ke == std::string::npos;
    pi = pe + 1;
    ki = ke + 1;
  }
}

// Unknown keys are rejected with the line number where they appear.
inline void validate_keys(const RunConfig& cfg, const std::vector<std::string>& allowed) {
  for (const auto& [key, val] : cfg.kv) {
    bool ok = false;
    for (const auto& pat : allowed)
      if (key_matches(pat, key)) {
        ok = true;
        break;
      }
    if (!ok) {
      const auto it = cfg.line.find(key);
      const int ln = it == cfg.line.end() ? 0 : it->second;
      throw ConfigError("config line " + std::to_string(ln) + ": unknown key '" + key + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// CSV with shortest round-trip float formatting.

inline std::string fmt(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}
inline std::string fmt(float v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, p);
}
inline std::string fmt(int64_t v) { return std::to_string(v); }

struct CsvWriter {
  std::string buf;
  bool line_open = false;

  CsvWriter& cell(const std::string& s) {
    if (line_open) buf += ',';
    buf += s;
    line_open = true;
    return *this;
  }
  CsvWriter& cell(double v) { return cell(fmt(v)); }
  CsvWriter& cell(int64_t v) { return cell(fmt(v)); }
  void endl() {
    buf += '\n';
    line_open = false;
  }
  void save(const std::string& path) const { detail::spit(path, buf); }
};

}  // namespace nolab::io
