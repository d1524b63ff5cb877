// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "marseg/bytes.hpp"
#include "marseg/errors.hpp"
#include "marseg/hash.hpp"
#include "marseg/rng.hpp"
#include "marseg/tensor.hpp"

namespace marseg::nn {

// --------------------------------------------------------------------- layers

// x:[N,Din] w:[Din,Dout] b:[Dout] -> [N,Dout]
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x->shape.size() != 2 || w->shape.size() != 2 || b->shape.size() != 1 ||
      x->shape[1] != w->shape[0] || w->shape[1] != b->shape[0])
    throw ShapeError("linear: incompatible shapes " + shape_str(x->shape) +
                     " " + shape_str(w->shape) + " " + shape_str(b->shape));
  const int n = x->shape[0], din = x->shape[1], dout = w->shape[1];
  std::vector<double> v(static_cast<size_t>(n) * dout);
  for (int r = 0; r < n; ++r) {
    double* out = &v[static_cast<size_t>(r) * dout];
    std::copy_n(b->value.data(), dout, out);
    const double* xr = &x->value[static_cast<size_t>(r) * din];
    for (int k = 0; k < din; ++k) {
      const double xv = xr[k];
      const double* wk = &w->value[static_cast<size_t>(k) * dout];
      for (int j = 0; j < dout; ++j) out[j] += xv * wk[j];
    }
  }
  return detail::derived({n, dout}, std::move(v), {x, w, b},
                         [n, din, dout](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    if (px.requires_grad) {
      px.ensure_grad();
      for (int r = 0; r < n; ++r) {
        const double* g = &self.grad[static_cast<size_t>(r) * dout];
        double* dx = &px.grad[static_cast<size_t>(r) * din];
        for (int k = 0; k < din; ++k) {
          const double* wk = &pw.value[static_cast<size_t>(k) * dout];
          double acc = 0.0;
          for (int j = 0; j < dout; ++j) acc += g[j] * wk[j];
          dx[k] += acc;
        }
      }
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      for (int r = 0; r < n; ++r) {
        const double* g = &self.grad[static_cast<size_t>(r) * dout];
        const double* xr = &px.value[static_cast<size_t>(r) * din];
        for (int k = 0; k < din; ++k) {
          const double xv = xr[k];
          double* dw = &pw.grad[static_cast<size_t>(k) * dout];
          for (int j = 0; j < dout; ++j) dw[j] += xv * g[j];
        }
      }
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int r = 0; r < n; ++r) {
        const double* g = &self.grad[static_cast<size_t>(r) * dout];
        for (int j = 0; j < dout; ++j) pb.grad[j] += g[j];
      }
    }
  });
}

// x:[Cin,H,W] w:[Cout,Cin,k,k] b:[Cout] -> [Cout,H,W], stride 1, zero padded
// to keep spatial size. k must be odd.
inline Var conv2d(const Var& x, const Var& w, const Var& b) {
  if (x->shape.size() != 3 || w->shape.size() != 4 || b->shape.size() != 1)
    throw ShapeError("conv2d: need [Cin,H,W], [Cout,Cin,k,k], [Cout]");
  const int cin = x->shape[0], h = x->shape[1], wd = x->shape[2];
  const int cout = w->shape[0], k = w->shape[2];
  if (w->shape[1] != cin || w->shape[3] != k || b->shape[0] != cout)
    throw ShapeError("conv2d: incompatible shapes");
  if (k % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
  const int pad = k / 2;
  const size_t plane = static_cast<size_t>(h) * wd;
  std::vector<double> v(static_cast<size_t>(cout) * plane);
  for (int co = 0; co < cout; ++co) {
    double* out_plane = &v[co * plane];
    std::fill_n(out_plane, plane, b->value[co]);
    for (int ci = 0; ci < cin; ++ci) {
      const double* in_plane = &x->value[ci * plane];
      for (int dy = 0; dy < k; ++dy) {
        for (int dx = 0; dx < k; ++dx) {
          const double wv =
              w->value[((static_cast<size_t>(co) * cin + ci) * k + dy) * k + dx];
          if (wv == 0.0) continue;
          const int shift = dx - pad;
          const int c0 = shift < 0 ? -shift : 0;
          const int c1 = shift > 0 ? wd - shift : wd;
          for (int r = 0; r < h; ++r) {
            const int ir = r + dy - pad;
            if (ir < 0 || ir >= h) continue;
            double* orow = out_plane + static_cast<size_t>(r) * wd;
            const double* irow = in_plane + static_cast<size_t>(ir) * wd + shift;
            for (int c = c0; c < c1; ++c) orow[c] += wv * irow[c];
          }
        }
      }
    }
  }
  return detail::derived({cout, h, wd}, std::move(v), {x, w, b},
                         [cin, h, wd, cout, k, pad, plane](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    auto& pb = *self.parents[2];
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (int co = 0; co < cout; ++co) {
        const double* g = &self.grad[co * plane];
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += g[i];
        pb.grad[co] += acc;
      }
    }
    if (px.requires_grad) px.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    if (!px.requires_grad && !pw.requires_grad) return;
    for (int co = 0; co < cout; ++co) {
      const double* g_plane = &self.grad[co * plane];
      for (int ci = 0; ci < cin; ++ci) {
        const double* in_plane = &px.value[ci * plane];
        double* din_plane = px.requires_grad ? &px.grad[ci * plane] : nullptr;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) {
            const size_t wi =
                ((static_cast<size_t>(co) * cin + ci) * k + dy) * k + dx;
            const double wv = pw.value[wi];
            const int shift = dx - pad;
            const int c0 = shift < 0 ? -shift : 0;
            const int c1 = shift > 0 ? wd - shift : wd;
            double wacc = 0.0;
            for (int r = 0; r < h; ++r) {
              const int ir = r + dy - pad;
              if (ir < 0 || ir >= h) continue;
              const double* grow = g_plane + static_cast<size_t>(r) * wd;
              const size_t ioff = static_cast<size_t>(ir) * wd + shift;
              if (din_plane) {
                double* drow = din_plane + ioff;
                for (int c = c0; c < c1; ++c) drow[c] += wv * grow[c];
              }
              if (pw.requires_grad) {
                const double* irow = in_plane + ioff;
                for (int c = c0; c < c1; ++c) wacc += grow[c] * irow[c];
              }
            }
            if (pw.requires_grad) pw.grad[wi] += wacc;
          }
        }
      }
    }
  });
}

// 2x2 max pooling, stride 2. H and W must be even. Ties take the first
// maximum in row-major scan order.
inline Var max_pool2(const Var& x) {
  if (x->shape.size() != 3) throw ShapeError("max_pool2: need [C,H,W]");
  const int c = x->shape[0], h = x->shape[1], w = x->shape[2];
  if (h % 2 || w % 2) throw ShapeError("max_pool2: dims must be even");
  const int oh = h / 2, ow = w / 2;
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(oh) * ow;
  std::vector<double> v(static_cast<size_t>(c) * oplane);
  auto argmax = std::make_shared<std::vector<size_t>>(v.size());
  for (int ch = 0; ch < c; ++ch) {
    const double* in = &x->value[ch * plane];
    for (int r = 0; r < oh; ++r) {
      for (int col = 0; col < ow; ++col) {
        const size_t base = static_cast<size_t>(2 * r) * w + 2 * col;
        const size_t cand[4] = {base, base + 1, base + w, base + w + 1};
        size_t best = cand[0];
        for (int i = 1; i < 4; ++i)
          if (in[cand[i]] > in[best]) best = cand[i];
        const size_t oi = ch * oplane + static_cast<size_t>(r) * ow + col;
        v[oi] = in[best];
        (*argmax)[oi] = ch * plane + best;
      }
    }
  }
  return detail::derived({c, oh, ow}, std::move(v), {x},
                         [argmax](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p.grad[(*argmax)[i]] += self.grad[i];
  });
}

// Nearest-neighbour 2x upsampling.
inline Var upsample2(const Var& x) {
  if (x->shape.size() != 3) throw ShapeError("upsample2: need [C,H,W]");
  const int c = x->shape[0], h = x->shape[1], w = x->shape[2];
  const int oh = 2 * h, ow = 2 * w;
  const size_t plane = static_cast<size_t>(h) * w;
  const size_t oplane = static_cast<size_t>(oh) * ow;
  std::vector<double> v(static_cast<size_t>(c) * oplane);
  for (int ch = 0; ch < c; ++ch)
    for (int r = 0; r < oh; ++r) {
      const double* in = &x->value[ch * plane + static_cast<size_t>(r / 2) * w];
      double* out = &v[ch * oplane + static_cast<size_t>(r) * ow];
      for (int col = 0; col < ow; ++col) out[col] = in[col / 2];
    }
  return detail::derived({c, oh, ow}, std::move(v), {x},
                         [c, h, w, plane, oplane](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const int ow = 2 * w;
    for (int ch = 0; ch < c; ++ch)
      for (int r = 0; r < 2 * h; ++r) {
        const double* g = &self.grad[ch * oplane + static_cast<size_t>(r) * ow];
        double* d = &p.grad[ch * plane + static_cast<size_t>(r / 2) * w];
        for (int col = 0; col < ow; ++col) d[col / 2] += g[col];
      }
  });
}

// --------------------------------------------------------------------- losses

// Mean cross entropy with logits [N,C] and integer labels; log-sum-exp
// stabilised. N must be positive.
inline Var softmax_cross_entropy(const Var& logits,
                                 const std::vector<int>& labels) {
  if (logits->shape.size() != 2)
    throw ShapeError("softmax_cross_entropy: need [N,C]");
  const int n = logits->shape[0], c = logits->shape[1];
  if (static_cast<int>(labels.size()) != n)
    throw ShapeError("softmax_cross_entropy: label count mismatch");
  if (n == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  for (int y : labels)
    if (y < 0 || y >= c)
      throw ShapeError("softmax_cross_entropy: label out of range");
  auto probs = std::make_shared<std::vector<double>>(logits->value);
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    double* row = &(*probs)[static_cast<size_t>(r) * c];
    double m = row[0];
    for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      row[j] = std::exp(row[j] - m);
      z += row[j];
    }
    const double inv = 1.0 / z;
    for (int j = 0; j < c; ++j) row[j] *= inv;
    // log-domain loss: stays finite when the label probability underflows
    total += m + std::log(z) -
             logits->value[static_cast<size_t>(r) * c + labels[r]];
  }
  auto lab = std::make_shared<std::vector<int>>(labels);
  return detail::derived({1}, {total / n}, {logits},
                         [probs, lab, n, c](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0] / n;
    for (int r = 0; r < n; ++r) {
      const double* pr = &(*probs)[static_cast<size_t>(r) * c];
      double* d = &p.grad[static_cast<size_t>(r) * c];
      for (int j = 0; j < c; ++j) d[j] += g * pr[j];
      d[(*lab)[r]] -= g;
    }
  });
}

// Mean binary cross entropy with logits over the rows where mask is set.
// Numerically stable form; an all-clear mask yields a constant zero.
inline Var bce_with_logits(const Var& logits, const std::vector<double>& target,
                           const std::vector<uint8_t>& mask) {
  const size_t n = logits->numel();
  if (logits->shape.size() > 2 ||
      (logits->shape.size() == 2 && logits->shape[1] != 1))
    throw ShapeError("bce_with_logits: need [N] or [N,1]");
  if (target.size() != n || mask.size() != n)
    throw ShapeError("bce_with_logits: target or mask count mismatch");
  size_t active = 0;
  for (uint8_t m : mask) active += m ? 1 : 0;
  if (active == 0) return scalar(0.0);
  double total = 0.0;
  for (size_t i = 0; i < n; ++i) {
    if (!mask[i]) continue;
    const double z = logits->value[i];
    total += std::max(z, 0.0) - z * target[i] + std::log1p(std::exp(-std::abs(z)));
  }
  auto tgt = std::make_shared<std::vector<double>>(target);
  auto msk = std::make_shared<std::vector<uint8_t>>(mask);
  return detail::derived({1}, {total / active}, {logits},
                         [tgt, msk, active](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0] / active;
    for (size_t i = 0; i < p.value.size(); ++i) {
      if (!(*msk)[i]) continue;
      const double sig = 1.0 / (1.0 + std::exp(-p.value[i]));
      p.grad[i] += g * (sig - (*tgt)[i]);
    }
  });
}

inline int argmax_row(const double* row, int width) {
  int best = 0;
  for (int j = 1; j < width; ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// ----------------------------------------------------------------- parameters

struct ParameterSet {
  std::vector<std::string> names;
  std::vector<Var> vars;

  Var add(std::string name, Shape shape, std::vector<double> init) {
    for (const auto& existing : names)
      if (existing == name) throw ConfigError("duplicate parameter " + name);
    auto v = make_tensor(std::move(shape), std::move(init), true);
    names.push_back(std::move(name));
    vars.push_back(v);
    return v;
  }

  size_t count() const { return vars.size(); }

  size_t total_scalars() const {
    size_t n = 0;
    for (const auto& v : vars) n += v->numel();
    return n;
  }

  void zero_grads() {
    for (auto& v : vars) v->zero_grad();
  }
};

inline std::vector<double> kaiming_uniform(Rng& rng, int fan_in, size_t count) {
  if (fan_in <= 0) throw ConfigError("kaiming_uniform: fan_in must be positive");
  const double bound = std::sqrt(3.0 / fan_in);
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

inline std::vector<double> uniform_init(Rng& rng, size_t count, double lo,
                                        double hi) {
  std::vector<double> v(count);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return v;
}

// ----------------------------------------------------------------- optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(const ParameterSet& params, AdamConfig cfg) : cfg_(cfg) {
    m_.reserve(params.count());
    v_.reserve(params.count());
    for (const auto& p : params.vars) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }

  void step(ParameterSet& params) {
    if (params.count() != m_.size())
      throw StateError("optimizer bound to a different parameter set");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t pi = 0; pi < params.count(); ++pi) {
      auto& p = *params.vars[pi];
      if (p.grad.empty()) continue;
      auto& m = m_[pi];
      auto& v = v_[pi];
      for (size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p.value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  int64_t steps() const { return t_; }

 private:
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------- checkpoint

// Layout: magic "MSEGCKPT", u8 version, u32 record count, then per record
// u32 name length + name bytes + u32 rank + u32 dims + f64 data, all
// little endian, then a u64 fnv1a checksum of every preceding byte.
inline constexpr char kCheckpointMagic[8] = {'M', 'S', 'E', 'G',
                                             'C', 'K', 'P', 'T'};
inline constexpr uint8_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path,
                            const ParameterSet& params) {
  std::string buf;
  buf.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  bytes::append_raw(buf, kCheckpointVersion);
  bytes::append_raw(buf, static_cast<uint32_t>(params.count()));
  for (size_t i = 0; i < params.count(); ++i) {
    const auto& name = params.names[i];
    const auto& v = *params.vars[i];
    bytes::append_raw(buf, static_cast<uint32_t>(name.size()));
    buf.append(name);
    bytes::append_raw(buf, static_cast<uint32_t>(v.shape.size()));
    for (int d : v.shape) bytes::append_raw(buf, static_cast<uint32_t>(d));
    buf.append(reinterpret_cast<const char*>(v.value.data()),
               v.value.size() * sizeof(double));
  }
  bytes::append_raw(buf, fnv1a64(buf.data(), buf.size()));
  bytes::write_file(path, buf);
}

// Loads into an already-built parameter set; names, order and shapes must
// match exactly.
inline void load_checkpoint(const std::string& path, ParameterSet& params) {
  const std::string buf = bytes::read_file(path);
  if (buf.size() < sizeof(kCheckpointMagic) + 1 + 4 + 8)
    throw DataError("checkpoint too short: " + path);
  if (std::memcmp(buf.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
    throw DataError("bad checkpoint magic: " + path);
  const size_t body = buf.size() - 8;
  uint64_t stored;
  std::memcpy(&stored, buf.data() + body, 8);
  if (stored != fnv1a64(buf.data(), body))
    throw DataError("checkpoint checksum mismatch: " + path);
  size_t off = sizeof(kCheckpointMagic);
  const auto version = bytes::read_raw<uint8_t>(buf, off);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version));
  const auto count = bytes::read_raw<uint32_t>(buf, off);
  if (count != params.count())
    throw DataError("checkpoint has " + std::to_string(count) +
                    " parameters, model expects " +
                    std::to_string(params.count()));
  for (uint32_t i = 0; i < count; ++i) {
    const auto name_len = bytes::read_raw<uint32_t>(buf, off);
    if (off + name_len > body) throw DataError("truncated record");
    const std::string name(buf.data() + off, name_len);
    off += name_len;
    if (name != params.names[i])
      throw DataError("parameter name mismatch: got " + name + ", expected " +
                      params.names[i]);
    const auto rank = bytes::read_raw<uint32_t>(buf, off);
    Shape shape(rank);
    for (auto& d : shape)
      d = static_cast<int>(bytes::read_raw<uint32_t>(buf, off));
    auto& v = *params.vars[i];
    if (shape != v.shape)
      throw DataError("shape mismatch for " + name + ": got " +
                      shape_str(shape) + ", expected " + shape_str(v.shape));
    const size_t bytes = v.numel() * sizeof(double);
    if (off + bytes > body) throw DataError("truncated record");
    std::memcpy(v.value.data(), buf.data() + off, bytes);
    off += bytes;
  }
  if (off != body) throw DataError("trailing bytes in checkpoint: " + path);
}

inline uint64_t file_hash(const std::string& path) {
  const std::string buf = bytes::read_file(path);
  return fnv1a64(buf.data(), buf.size());
}

}  // namespace marseg::nn
