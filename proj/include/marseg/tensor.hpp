// SPDX-License-Identifier: Apache-2.0
//
// Reverse-mode autodiff on dense double tensors. Graphs are built eagerly as
// shared_ptr DAGs; backward() topo-sorts from the loss and runs each node's
// backprop closure in reverse order. Everything is double precision and
// sequential, so repeated runs are bitwise identical.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "marseg/errors.hpp"

namespace marseg::nn {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension");
    n *= static_cast<size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i)
    s += (i ? "," : "") + std::to_string(shape[i]);
  return s + "]";
}

struct TensorNode;
using Var = std::shared_ptr<TensorNode>;

struct TensorNode {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(TensorNode&)> backprop;

  size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
  void zero_grad() {
    if (!grad.empty()) std::fill(grad.begin(), grad.end(), 0.0);
  }
};

inline Var make_tensor(Shape shape, std::vector<double> value,
                       bool requires_grad = false) {
  if (value.size() != shape_numel(shape))
    throw ShapeError("value count " + std::to_string(value.size()) +
                     " does not match shape " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  return node;
}

inline Var constant(Shape shape, std::vector<double> value) {
  return make_tensor(std::move(shape), std::move(value), false);
}

inline Var zeros(Shape shape) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return make_tensor(std::move(shape), std::move(v), false);
}

inline Var scalar(double v) { return constant({1}, {v}); }

namespace detail {

inline Var derived(Shape shape, std::vector<double> value,
                   std::vector<Var> parents,
                   std::function<void(TensorNode&)> backprop) {
  auto node = make_tensor(std::move(shape), std::move(value), false);
  for (const auto& p : parents)
    if (p->requires_grad) node->requires_grad = true;
  node->parents = std::move(parents);
  if (node->requires_grad) node->backprop = std::move(backprop);
  return node;
}

inline void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a->shape) +
                     " vs " + shape_str(b->shape));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

inline Var add(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> v(a->numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + b->value[i];
  return detail::derived(a->shape, std::move(v), {a, b}, [](TensorNode& self) {
    for (int pi = 0; pi < 2; ++pi) {
      auto& p = *self.parents[pi];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> v(a->numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] - b->value[i];
  return detail::derived(a->shape, std::move(v), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> v(a->numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * b->value[i];
  return detail::derived(a->shape, std::move(v), {a, b}, [](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i)
        pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

inline Var scale(const Var& a, double s) {
  std::vector<double> v(a->numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * s;
  return detail::derived(a->shape, std::move(v), {a}, [s](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i] * s;
  });
}

inline Var tanh(const Var& a) {
  std::vector<double> v(a->numel());
  for (size_t i = 0; i < v.size(); ++i) v[i] = std::tanh(a->value[i]);
  return detail::derived(a->shape, std::move(v), {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      p.grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

inline Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a->value) s += x;
  return detail::derived({1}, {s}, {a}, [](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    for (size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g;
  });
}

// -------------------------------------------------------------- row plumbing

// Result row r = x row idx[r]; backward scatters row gradients back.
inline Var select_rows(const Var& x, std::vector<int> idx) {
  if (x->shape.size() != 2) throw ShapeError("select_rows: need [N,D]");
  const int n = x->shape[0], d = x->shape[1];
  for (int i : idx)
    if (i < 0 || i >= n) throw ShapeError("select_rows: index out of range");
  const int m = static_cast<int>(idx.size());
  std::vector<double> v(static_cast<size_t>(m) * d);
  for (int r = 0; r < m; ++r)
    std::copy_n(&x->value[static_cast<size_t>(idx[r]) * d], d,
                &v[static_cast<size_t>(r) * d]);
  auto indices = std::make_shared<std::vector<int>>(std::move(idx));
  return detail::derived({m, d}, std::move(v), {x},
                         [indices, d](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < indices->size(); ++r) {
      double* dst = &p.grad[static_cast<size_t>((*indices)[r]) * d];
      const double* src = &self.grad[r * d];
      for (int c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

inline Var concat_cols(const Var& a, const Var& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 ||
      a->shape[0] != b->shape[0])
    throw ShapeError("concat_cols: need [N,Da] and [N,Db]");
  const int n = a->shape[0], da = a->shape[1], db = b->shape[1];
  std::vector<double> v(static_cast<size_t>(n) * (da + db));
  for (int r = 0; r < n; ++r) {
    std::copy_n(&a->value[static_cast<size_t>(r) * da], da,
                &v[static_cast<size_t>(r) * (da + db)]);
    std::copy_n(&b->value[static_cast<size_t>(r) * db], db,
                &v[static_cast<size_t>(r) * (da + db) + da]);
  }
  return detail::derived({n, da + db}, std::move(v), {a, b},
                         [n, da, db](TensorNode& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    for (int r = 0; r < n; ++r) {
      const double* g = &self.grad[static_cast<size_t>(r) * (da + db)];
      if (pa.requires_grad) {
        pa.ensure_grad();
        double* dst = &pa.grad[static_cast<size_t>(r) * da];
        for (int c = 0; c < da; ++c) dst[c] += g[c];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        double* dst = &pb.grad[static_cast<size_t>(r) * db];
        for (int c = 0; c < db; ++c) dst[c] += g[da + c];
      }
    }
  });
}

// out row r = x row r + table row id[r]; table is [K,D] of learnable rows.
inline Var embedding_add(const Var& x, const Var& table,
                         std::vector<int> row_ids) {
  if (x->shape.size() != 2 || table->shape.size() != 2 ||
      x->shape[1] != table->shape[1])
    throw ShapeError("embedding_add: need [N,D] and [K,D]");
  const int n = x->shape[0], d = x->shape[1], k = table->shape[0];
  if (static_cast<int>(row_ids.size()) != n)
    throw ShapeError("embedding_add: row_ids length mismatch");
  for (int id : row_ids)
    if (id < 0 || id >= k) throw ShapeError("embedding_add: id out of range");
  std::vector<double> v(x->value);
  for (int r = 0; r < n; ++r) {
    const double* e = &table->value[static_cast<size_t>(row_ids[r]) * d];
    double* dst = &v[static_cast<size_t>(r) * d];
    for (int c = 0; c < d; ++c) dst[c] += e[c];
  }
  auto ids = std::make_shared<std::vector<int>>(std::move(row_ids));
  return detail::derived({n, d}, std::move(v), {x, table},
                         [ids, d](TensorNode& self) {
    auto& px = *self.parents[0];
    auto& pt = *self.parents[1];
    if (px.requires_grad) {
      px.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    }
    if (pt.requires_grad) {
      pt.ensure_grad();
      for (size_t r = 0; r < ids->size(); ++r) {
        double* dst = &pt.grad[static_cast<size_t>((*ids)[r]) * d];
        const double* src = &self.grad[r * d];
        for (int c = 0; c < d; ++c) dst[c] += src[c];
      }
    }
  });
}

// out row r = mean of x rows sharing group_id[r]. group ids must be dense
// 0..G-1. Used for the voxel-mean aggregation round.
inline Var group_mean_expand(const Var& x, std::vector<int> group_ids,
                             int group_count) {
  if (x->shape.size() != 2) throw ShapeError("group_mean_expand: need [N,D]");
  const int n = x->shape[0], d = x->shape[1];
  if (static_cast<int>(group_ids.size()) != n)
    throw ShapeError("group_mean_expand: group_ids length mismatch");
  std::vector<int> counts(group_count, 0);
  for (int g : group_ids) {
    if (g < 0 || g >= group_count)
      throw ShapeError("group_mean_expand: group id out of range");
    ++counts[g];
  }
  std::vector<double> means(static_cast<size_t>(group_count) * d, 0.0);
  for (int r = 0; r < n; ++r) {
    const double* src = &x->value[static_cast<size_t>(r) * d];
    double* dst = &means[static_cast<size_t>(group_ids[r]) * d];
    for (int c = 0; c < d; ++c) dst[c] += src[c];
  }
  for (int g = 0; g < group_count; ++g) {
    double* row = &means[static_cast<size_t>(g) * d];
    for (int c = 0; c < d; ++c) row[c] /= counts[g];
  }
  std::vector<double> v(static_cast<size_t>(n) * d);
  for (int r = 0; r < n; ++r)
    std::copy_n(&means[static_cast<size_t>(group_ids[r]) * d], d,
                &v[static_cast<size_t>(r) * d]);
  auto ids = std::make_shared<std::vector<int>>(std::move(group_ids));
  auto cnt = std::make_shared<std::vector<int>>(std::move(counts));
  return detail::derived({n, d}, std::move(v), {x},
                         [ids, cnt, d, group_count](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    std::vector<double> gsum(static_cast<size_t>(group_count) * d, 0.0);
    for (size_t r = 0; r < ids->size(); ++r) {
      const double* src = &self.grad[r * d];
      double* dst = &gsum[static_cast<size_t>((*ids)[r]) * d];
      for (int c = 0; c < d; ++c) dst[c] += src[c];
    }
    for (size_t r = 0; r < ids->size(); ++r) {
      const int g = (*ids)[r];
      const double inv = 1.0 / (*cnt)[g];
      const double* src = &gsum[static_cast<size_t>(g) * d];
      double* dst = &p.grad[r * d];
      for (int c = 0; c < d; ++c) dst[c] += src[c] * inv;
    }
  });
}

// ----------------------------------------------------------- image plumbing

inline Var concat_channels(const std::vector<Var>& maps) {
  if (maps.empty()) throw ShapeError("concat_channels: no inputs");
  for (const auto& m : maps)
    if (m->shape.size() != 3) throw ShapeError("concat_channels: need [C,H,W]");
  const int h = maps[0]->shape[1], w = maps[0]->shape[2];
  int total_c = 0;
  for (const auto& m : maps) {
    if (m->shape[1] != h || m->shape[2] != w)
      throw ShapeError("concat_channels: spatial dims differ");
    total_c += m->shape[0];
  }
  const size_t hw = static_cast<size_t>(h) * w;
  std::vector<double> v(static_cast<size_t>(total_c) * hw);
  size_t off = 0;
  for (const auto& m : maps) {
    std::copy(m->value.begin(), m->value.end(), v.begin() + off);
    off += m->value.size();
  }
  return detail::derived({total_c, h, w}, std::move(v), maps,
                         [hw](TensorNode& self) {
    size_t off = 0;
    for (auto& parent : self.parents) {
      auto& p = *parent;
      const size_t n = p.value.size();
      if (p.requires_grad) {
        p.ensure_grad();
        for (size_t i = 0; i < n; ++i) p.grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// Per point r, copies the channel column of map at pixel[r]; pixel[r] < 0
// means out of extent and yields a zero row (no gradient flows there).
inline Var gather_pixels(const Var& map, std::vector<int> pixel) {
  if (map->shape.size() != 3) throw ShapeError("gather_pixels: need [C,H,W]");
  const int c = map->shape[0];
  const size_t hw = static_cast<size_t>(map->shape[1]) * map->shape[2];
  const int n = static_cast<int>(pixel.size());
  for (int pix : pixel)
    if (pix >= static_cast<int>(hw))
      throw ShapeError("gather_pixels: pixel index out of range");
  std::vector<double> v(static_cast<size_t>(n) * c, 0.0);
  for (int r = 0; r < n; ++r) {
    const int pix = pixel[r];
    if (pix < 0) continue;
    for (int ch = 0; ch < c; ++ch)
      v[static_cast<size_t>(r) * c + ch] = map->value[ch * hw + pix];
  }
  auto pixels = std::make_shared<std::vector<int>>(std::move(pixel));
  return detail::derived({n, c}, std::move(v), {map},
                         [pixels, c, hw](TensorNode& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t r = 0; r < pixels->size(); ++r) {
      const int pix = (*pixels)[r];
      if (pix < 0) continue;
      const double* src = &self.grad[r * c];
      for (int ch = 0; ch < c; ++ch) p.grad[ch * hw + pix] += src[ch];
    }
  });
}

// ------------------------------------------------------------------ backward

inline void backward(const Var& loss) {
  if (loss->numel() != 1)
    throw ShapeError("backward: loss must be a scalar tensor");
  if (!loss->requires_grad) return;

  // Post-order DFS over grad-requiring nodes.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.get(), 0);
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) {
        visited.insert(parent);
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->ensure_grad();
  loss->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backprop && !node->grad.empty()) node->backprop(*node);
  }
}

}  // namespace marseg::nn
