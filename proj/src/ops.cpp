#include "rvos/ops.hpp"

#include <algorithm>
#include <cmath>

#include "rvos/kernels.hpp"
#include "rvos/math.hpp"

namespace rvos::ad {

namespace {

template <typename S>
void require_same(const Var<S>& a, const Var<S>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename S>
void require_rank(const Var<S>& a, std::size_t rank, const char* op) {
  if (a.shape().size() != rank)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(a.shape()));
}

template <typename S>
Tensor<S> scalar_tensor(S v) {
  return Tensor<S>({1}, std::vector<S>{v});
}

}  // namespace

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  require_same(a, b, "add");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<S>& t, const std::vector<S>& g) {
    for (int id : {a.id, b.id}) {
      if (!t.requires_grad(id)) continue;
      auto& d = t.grad(id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  require_same(a, b, "sub");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<S>& t, const std::vector<S>& g) {
    if (t.requires_grad(a.id)) {
      auto& d = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      auto& d = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  require_same(a, b, "mul");
  Tensor<S> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape<S>& t, const std::vector<S>& g) {
    if (t.requires_grad(a.id)) {
      auto& d = t.grad(a.id);
      const auto& bv = t.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (t.requires_grad(b.id)) {
      auto& d = t.grad(b.id);
      const auto& av = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

template <typename S>
Var<S> scale(Var<S> a, S factor) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v *= factor;
  return a.tape->record(std::move(out), {a}, [a, factor](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += factor * g[i];
  });
}

template <typename S>
Var<S> add_scalar(Var<S> a, S offset) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v += offset;
  return a.tape->record(std::move(out), {a}, [a](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename S>
Var<S> silu(Var<S> x) {
  Tensor<S> out = x.value();
  for (auto& v : out.data) v = rvos::silu(v);
  return x.tape->record(std::move(out), {x}, [x](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    const auto& xv = t.value(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * silu_grad(xv[i]);
  });
}

template <typename S>
Var<S> sigmoid(Var<S> x) {
  Tensor<S> out = x.value();
  for (auto& v : out.data) v = rvos::sigmoid(v);
  std::vector<S> y = out.data;
  return x.tape->record(std::move(out), {x}, [x, y = std::move(y)](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * y[i] * (S(1) - y[i]);
  });
}

template <typename S>
Var<S> reshape(Var<S> x, Shape shape) {
  if (numel(shape) != x.size()) throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor<S> out(std::move(shape), x.value().data);
  return x.tape->record(std::move(out), {x}, [x](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

template <typename S>
Var<S> detach(Var<S> x) {
  return x.tape->constant(x.value());
}

template <typename S>
Var<S> sum(Var<S> x) {
  S acc = S(0);
  for (S v : x.value().data) acc += v;
  return x.tape->record(scalar_tensor(acc), {x}, [x](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (auto& v : d) v += g[0];
  });
}

template <typename S>
Var<S> sum_scalars(Tape<S>& tape, std::span<const Var<S>> terms) {
  if (terms.empty()) return tape.constant(scalar_tensor(S(0)));
  Var<S> acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return acc;
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b, bool trans_a, bool trans_b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const int m = trans_a ? a.shape()[1] : a.shape()[0];
  const int k = trans_a ? a.shape()[0] : a.shape()[1];
  const int kb = trans_b ? b.shape()[1] : b.shape()[0];
  const int n = trans_b ? b.shape()[0] : b.shape()[1];
  if (k != kb) throw ShapeError("matmul: inner dimensions " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor<S> out({m, n});
  kernels::gemm<S>(trans_a, trans_b, m, n, k, S(1), a.value().ptr(), b.value().ptr(), S(0), out.ptr());
  return a.tape->record(std::move(out), {a, b}, [a, b, m, n, k, trans_a, trans_b](Tape<S>& t, const std::vector<S>& g) {
    const S* av = t.value(a.id).ptr();
    const S* bv = t.value(b.id).ptr();
    if (t.requires_grad(a.id)) {
      S* da = t.grad(a.id).data();
      // dA = G op(B)^T  (or its transpose when A was transposed).
      if (!trans_a) {
        kernels::gemm<S>(false, !trans_b, m, k, n, S(1), g.data(), bv, S(1), da);
      } else {
        kernels::gemm<S>(trans_b, true, k, m, n, S(1), bv, g.data(), S(1), da);
      }
    }
    if (t.requires_grad(b.id)) {
      S* db = t.grad(b.id).data();
      if (!trans_b) {
        kernels::gemm<S>(!trans_a, false, k, n, m, S(1), av, g.data(), S(1), db);
      } else {
        kernels::gemm<S>(true, trans_a, n, k, m, S(1), g.data(), av, S(1), db);
      }
    }
  });
}

template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const int n = x.shape()[0], in = x.shape()[1], out_dim = w.shape()[0];
  if (w.shape()[1] != in) throw ShapeError("linear: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const bool has_bias = b.valid();
  if (has_bias && b.shape() != Shape{out_dim}) throw ShapeError("linear: bias " + shape_str(b.shape()));
  Tensor<S> out({n, out_dim});
  kernels::gemm<S>(false, true, n, out_dim, in, S(1), x.value().ptr(), w.value().ptr(), S(0), out.ptr());
  if (has_bias)
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < out_dim; ++c) out.at(r, c) += b.value()[c];
  auto fn = [x, w, b, has_bias, n, in, out_dim](Tape<S>& t, const std::vector<S>& g) {
    if (t.requires_grad(x.id))
      kernels::gemm<S>(false, false, n, in, out_dim, S(1), g.data(), t.value(w.id).ptr(), S(1), t.grad(x.id).data());
    if (t.requires_grad(w.id))
      kernels::gemm<S>(true, false, out_dim, in, n, S(1), g.data(), t.value(x.id).ptr(), S(1), t.grad(w.id).data());
    if (has_bias && t.requires_grad(b.id)) {
      auto& db = t.grad(b.id);
      for (int r = 0; r < n; ++r)
        for (int c = 0; c < out_dim; ++c) db[c] += g[static_cast<std::size_t>(r) * out_dim + c];
    }
  };
  return has_bias ? x.tape->record(std::move(out), {x, w, b}, fn) : x.tape->record(std::move(out), {x, w}, fn);
}

template <typename S>
Var<S> transpose(Var<S> x) {
  require_rank(x, 2, "transpose");
  const int m = x.shape()[0], n = x.shape()[1];
  Tensor<S> out({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out.at(j, i) = x.value().at(i, j);
  return x.tape->record(std::move(out), {x}, [x, m, n](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) d[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
  });
}

template <typename S>
Var<S> softmax_rows(Var<S> x) {
  require_rank(x, 2, "softmax_rows");
  const int m = x.shape()[0], n = x.shape()[1];
  Tensor<S> out({m, n});
  for (int i = 0; i < m; ++i) {
    S mx = x.value().at(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x.value().at(i, j));
    S z = S(0);
    for (int j = 0; j < n; ++j) z += out.at(i, j) = std::exp(x.value().at(i, j) - mx);
    for (int j = 0; j < n; ++j) out.at(i, j) /= z;
  }
  Tensor<S> saved = out;
  return x.tape->record(std::move(out), {x}, [x, y = std::move(saved), m, n](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (int i = 0; i < m; ++i) {
      S dot = S(0);
      for (int j = 0; j < n; ++j) dot += g[static_cast<std::size_t>(i) * n + j] * y.at(i, j);
      for (int j = 0; j < n; ++j)
        d[static_cast<std::size_t>(i) * n + j] += y.at(i, j) * (g[static_cast<std::size_t>(i) * n + j] - dot);
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> x, int c0, int c1) {
  require_rank(x, 2, "slice_cols");
  const int m = x.shape()[0], n = x.shape()[1];
  if (c0 < 0 || c1 > n || c0 >= c1) throw ShapeError("slice_cols: bad range");
  const int w = c1 - c0;
  Tensor<S> out({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j) out.at(i, j) = x.value().at(i, c0 + j);
  return x.tape->record(std::move(out), {x}, [x, m, n, c0, w](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) d[static_cast<std::size_t>(i) * n + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
  });
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int m = parts[0].shape()[0];
  int n = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols");
    if (p.shape()[0] != m) throw ShapeError("concat_cols: row mismatch");
    n += p.shape()[1];
  }
  Tensor<S> out({m, n});
  int off = 0;
  for (const auto& p : parts) {
    const int w = p.shape()[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j) out.at(i, off + j) = p.value().at(i, j);
    off += w;
  }
  std::vector<Var<S>> ps(parts.begin(), parts.end());
  Tape<S>* tape = parts[0].tape;
  return tape->record(std::move(out), ps, [ps, m, n](Tape<S>& t, const std::vector<S>& g) {
    int off = 0;
    for (const auto& p : ps) {
      const int w = t.value(p.id).shape[1];
      if (t.requires_grad(p.id)) {
        auto& d = t.grad(p.id);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j) d[static_cast<std::size_t>(i) * w + j] += g[static_cast<std::size_t>(i) * n + off + j];
      }
      off += w;
    }
  });
}

template <typename S>
Var<S> concat0(Var<S> a, Var<S> b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1))
    throw ShapeError("concat0: " + shape_str(sa) + " vs " + shape_str(sb));
  Shape so = sa;
  so[0] += sb[0];
  Tensor<S> out(so);
  std::copy(a.value().data.begin(), a.value().data.end(), out.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(), out.data.begin() + a.size());
  const std::size_t na = a.size();
  return a.tape->record(std::move(out), {a, b}, [a, b, na](Tape<S>& t, const std::vector<S>& g) {
    if (t.requires_grad(a.id)) {
      auto& d = t.grad(a.id);
      for (std::size_t i = 0; i < na; ++i) d[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      auto& d = t.grad(b.id);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[na + i];
    }
  });
}

template <typename S>
Var<S> gather_rows(Var<S> x, std::span<const int> rows) {
  require_rank(x, 2, "gather_rows");
  const int n = x.shape()[0], d = x.shape()[1];
  Tensor<S> out({static_cast<int>(rows.size()), d});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= n) throw ShapeError("gather_rows: index out of range");
    std::copy_n(x.value().ptr() + static_cast<std::size_t>(rows[r]) * d, d, out.ptr() + r * d);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return x.tape->record(std::move(out), {x}, [x, idx = std::move(idx), d](Tape<S>& t, const std::vector<S>& g) {
    auto& dx = t.grad(x.id);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (int j = 0; j < d; ++j) dx[static_cast<std::size_t>(idx[r]) * d + j] += g[r * d + j];
  });
}

template <typename S>
Var<S> mean_rows(Var<S> x) {
  require_rank(x, 2, "mean_rows");
  const int n = x.shape()[0], d = x.shape()[1];
  if (n == 0) throw ShapeError("mean_rows: empty input");
  Tensor<S> out({1, d});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out[j] += x.value().at(i, j);
  for (auto& v : out.data) v /= S(n);
  return x.tape->record(std::move(out), {x}, [x, n, d](Tape<S>& t, const std::vector<S>& g) {
    auto& dx = t.grad(x.id);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) dx[static_cast<std::size_t>(i) * d + j] += g[j] / S(n);
  });
}

template <typename S>
Var<S> embedding(Var<S> table, std::span<const int> ids) {
  require_rank(table, 2, "embedding");
  const int v = table.shape()[0], c = table.shape()[1];
  Tensor<S> out({static_cast<int>(ids.size()), c});
  for (std::size_t l = 0; l < ids.size(); ++l) {
    if (ids[l] < 0 || ids[l] >= v) throw DataError("token id " + std::to_string(ids[l]) + " outside vocabulary");
    std::copy_n(table.value().ptr() + static_cast<std::size_t>(ids[l]) * c, c, out.ptr() + l * c);
  }
  std::vector<int> idx(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table}, [table, idx = std::move(idx), c](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(table.id);
    for (std::size_t l = 0; l < idx.size(); ++l)
      for (int j = 0; j < c; ++j) d[static_cast<std::size_t>(idx[l]) * c + j] += g[l * c + j];
  });
}

template <typename S>
Var<S> conv2d(Var<S> x, Var<S> w, Var<S> b, int stride, int pad) {
  require_rank(x, 3, "conv2d");
  require_rank(w, 4, "conv2d");
  kernels::ConvGeom geo;
  geo.cin = x.shape()[0];
  geo.h = x.shape()[1];
  geo.w = x.shape()[2];
  geo.cout = w.shape()[0];
  geo.k = w.shape()[2];
  geo.stride = stride;
  geo.pad = pad;
  if (w.shape()[1] != geo.cin || w.shape()[3] != geo.k)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
  const bool has_bias = b.valid();
  Tensor<S> out({geo.cout, geo.hout(), geo.wout()});
  kernels::conv2d_forward<S>(geo, x.value().ptr(), w.value().ptr(), has_bias ? b.value().ptr() : nullptr, out.ptr());
  auto fn = [x, w, b, has_bias, geo](Tape<S>& t, const std::vector<S>& g) {
    S* dx = t.requires_grad(x.id) ? t.grad(x.id).data() : nullptr;
    S* dw = t.requires_grad(w.id) ? t.grad(w.id).data() : nullptr;
    S* db = has_bias && t.requires_grad(b.id) ? t.grad(b.id).data() : nullptr;
    kernels::conv2d_backward<S>(geo, t.value(x.id).ptr(), t.value(w.id).ptr(), g.data(), dx, dw, db);
  };
  return has_bias ? x.tape->record(std::move(out), {x, w, b}, fn) : x.tape->record(std::move(out), {x, w}, fn);
}

template <typename S>
Var<S> upsample2x(Var<S> x) {
  require_rank(x, 3, "upsample2x");
  const int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  Tensor<S> out({c, 2 * h, 2 * w});
  for (int k = 0; k < c; ++k)
    for (int i = 0; i < 2 * h; ++i)
      for (int j = 0; j < 2 * w; ++j) out.at(k, i, j) = x.value().at(k, i / 2, j / 2);
  return x.tape->record(std::move(out), {x}, [x, c, h, w](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (int k = 0; k < c; ++k)
      for (int i = 0; i < 2 * h; ++i)
        for (int j = 0; j < 2 * w; ++j)
          d[(static_cast<std::size_t>(k) * h + i / 2) * w + j / 2] +=
              g[(static_cast<std::size_t>(k) * 2 * h + i) * 2 * w + j];
  });
}

template <typename S>
Var<S> dynamic_conv(Var<S> x, Var<S> filter, std::vector<int> widths) {
  require_rank(x, 3, "dynamic_conv");
  if (widths.size() < 2 || widths.back() != 1) throw ShapeError("dynamic_conv: widths must end in 1");
  if (x.shape()[0] != widths[0])
    throw ShapeError("dynamic_conv: feature width " + std::to_string(x.shape()[0]) + " != filter input width " +
                     std::to_string(widths[0]));
  if (static_cast<int>(filter.size()) != kernels::dynamic_filter_size(widths))
    throw ShapeError("dynamic_conv: filter length " + std::to_string(filter.size()) + " does not match layer widths");
  const int h = x.shape()[1], w = x.shape()[2];
  Tensor<S> out({h, w});
  kernels::dynamic_conv_forward<S>(widths, x.value().ptr(), filter.value().ptr(), h * w, out.ptr());
  return x.tape->record(std::move(out), {x, filter},
                        [x, filter, widths = std::move(widths), h, w](Tape<S>& t, const std::vector<S>& g) {
                          S* dx = t.requires_grad(x.id) ? t.grad(x.id).data() : nullptr;
                          S* df = t.requires_grad(filter.id) ? t.grad(filter.id).data() : nullptr;
                          kernels::dynamic_conv_backward<S>(widths, t.value(x.id).ptr(), t.value(filter.id).ptr(),
                                                            h * w, g.data(), dx, df);
                        });
}

template <typename S>
Var<S> max_along(Var<S> x, int axis) {
  require_rank(x, 2, "max_along");
  const int h = x.shape()[0], w = x.shape()[1];
  const int n = axis == 0 ? w : h;
  const int len = axis == 0 ? h : w;
  Tensor<S> out({n});
  std::vector<int> arg(n);
  for (int i = 0; i < n; ++i) {
    int best = 0;
    S bv = axis == 0 ? x.value().at(0, i) : x.value().at(i, 0);
    for (int j = 1; j < len; ++j) {
      const S v = axis == 0 ? x.value().at(j, i) : x.value().at(i, j);
      if (v > bv) {
        bv = v;
        best = j;
      }
    }
    out[i] = bv;
    arg[i] = axis == 0 ? best * w + i : i * w + best;
  }
  return x.tape->record(std::move(out), {x}, [x, arg = std::move(arg)](Tape<S>& t, const std::vector<S>& g) {
    auto& d = t.grad(x.id);
    for (std::size_t i = 0; i < arg.size(); ++i) d[arg[i]] += g[i];
  });
}

template <typename S>
Var<S> dice_loss(Var<S> probs, const Tensor<S>& target, S eps) {
  if (probs.size() != target.size()) throw ShapeError("dice_loss: prediction/target size mismatch");
  S inter = S(0), ps = S(0), ys = S(0);
  const auto& p = probs.value();
  for (std::size_t i = 0; i < p.size(); ++i) {
    inter += p[i] * target[i];
    ps += p[i];
    ys += target[i];
  }
  const S num = S(2) * inter + eps;
  const S den = ps + ys + eps;
  return probs.tape->record(scalar_tensor(S(1) - num / den), {probs},
                            [probs, target, num, den](Tape<S>& t, const std::vector<S>& g) {
                              auto& d = t.grad(probs.id);
                              const S inv = g[0] / (den * den);
                              for (std::size_t i = 0; i < d.size(); ++i)
                                d[i] -= inv * (S(2) * target[i] * den - num);
                            });
}

template <typename S>
Var<S> focal_loss(Var<S> logits, const Tensor<S>& target, S alpha, S gamma) {
  if (logits.size() != target.size()) throw ShapeError("focal_loss: prediction/target size mismatch");
  const auto& z = logits.value();
  const std::size_t n = z.size();
  S total = S(0);
  for (std::size_t i = 0; i < n; ++i) {
    const bool pos = target[i] > S(0.5);
    const S s = pos ? z[i] : -z[i];
    const S at = pos ? alpha : S(1) - alpha;
    const S q = rvos::sigmoid(-s);
    total += -at * std::pow(q, gamma) * log_sigmoid(s);
  }
  return logits.tape->record(scalar_tensor(total / S(n)), {logits},
                             [logits, target, alpha, gamma, n](Tape<S>& t, const std::vector<S>& g) {
                               auto& d = t.grad(logits.id);
                               const auto& zv = t.value(logits.id);
                               for (std::size_t i = 0; i < n; ++i) {
                                 const bool pos = target[i] > S(0.5);
                                 const S s = pos ? zv[i] : -zv[i];
                                 const S at = pos ? alpha : S(1) - alpha;
                                 const S q = rvos::sigmoid(-s);
                                 const S pt = rvos::sigmoid(s);
                                 const S ds = at * std::pow(q, gamma) * (gamma * pt * log_sigmoid(s) - q);
                                 d[i] += g[0] * (pos ? ds : -ds) / S(n);
                               }
                             });
}

template <typename S>
Var<S> pairwise_contrast(Var<S> q, Var<S> keys, const std::vector<char>& positive, S clamp) {
  Tape<S>& tape = *q.tape;
  const int dim = static_cast<int>(q.size());
  const int n = keys.shape().empty() ? 0 : keys.shape()[0];
  if (n == 0) return tape.constant(scalar_tensor(S(0)));
  require_rank(keys, 2, "pairwise_contrast");
  if (keys.shape()[1] != dim) throw ShapeError("pairwise_contrast: key width mismatch");
  if (static_cast<int>(positive.size()) != n) throw ShapeError("pairwise_contrast: label count mismatch");
  std::vector<S> z(n);
  S total = S(0);
  for (int i = 0; i < n; ++i) {
    S dot = S(0);
    for (int j = 0; j < dim; ++j) dot += q.value()[j] * keys.value().at(i, j);
    z[i] = dot;
    const S c = std::clamp(dot, -clamp, clamp);
    total += positive[i] ? -log_sigmoid(c) : -log_sigmoid(-c);
  }
  return tape.record(scalar_tensor(total / S(n)), {q, keys},
                     [q, keys, positive, z = std::move(z), clamp, n, dim](Tape<S>& t, const std::vector<S>& g) {
                       const auto& qv = t.value(q.id);
                       const auto& kv = t.value(keys.id);
                       S* dq = t.requires_grad(q.id) ? t.grad(q.id).data() : nullptr;
                       S* dk = t.requires_grad(keys.id) ? t.grad(keys.id).data() : nullptr;
                       for (int i = 0; i < n; ++i) {
                         if (z[i] > clamp || z[i] < -clamp) continue;
                         const S s = rvos::sigmoid(z[i]);
                         const S dz = g[0] * (positive[i] ? s - S(1) : s) / S(n);
                         for (int j = 0; j < dim; ++j) {
                           if (dq) dq[j] += dz * kv.at(i, j);
                           if (dk) dk[static_cast<std::size_t>(i) * dim + j] += dz * qv[j];
                         }
                       }
                     });
}

#define RVOS_INSTANTIATE_OPS(S)                                                                  \
  template Var<S> add<S>(Var<S>, Var<S>);                                                        \
  template Var<S> sub<S>(Var<S>, Var<S>);                                                        \
  template Var<S> mul<S>(Var<S>, Var<S>);                                                        \
  template Var<S> scale<S>(Var<S>, S);                                                           \
  template Var<S> add_scalar<S>(Var<S>, S);                                                      \
  template Var<S> silu<S>(Var<S>);                                                               \
  template Var<S> sigmoid<S>(Var<S>);                                                            \
  template Var<S> reshape<S>(Var<S>, Shape);                                                     \
  template Var<S> detach<S>(Var<S>);                                                             \
  template Var<S> sum<S>(Var<S>);                                                                \
  template Var<S> sum_scalars<S>(Tape<S>&, std::span<const Var<S>>);                             \
  template Var<S> matmul<S>(Var<S>, Var<S>, bool, bool);                                         \
  template Var<S> linear<S>(Var<S>, Var<S>, Var<S>);                                             \
  template Var<S> transpose<S>(Var<S>);                                                          \
  template Var<S> softmax_rows<S>(Var<S>);                                                       \
  template Var<S> slice_cols<S>(Var<S>, int, int);                                               \
  template Var<S> concat_cols<S>(std::span<const Var<S>>);                                       \
  template Var<S> concat0<S>(Var<S>, Var<S>);                                                    \
  template Var<S> gather_rows<S>(Var<S>, std::span<const int>);                                  \
  template Var<S> mean_rows<S>(Var<S>);                                                          \
  template Var<S> embedding<S>(Var<S>, std::span<const int>);                                    \
  template Var<S> conv2d<S>(Var<S>, Var<S>, Var<S>, int, int);                                   \
  template Var<S> upsample2x<S>(Var<S>);                                                         \
  template Var<S> dynamic_conv<S>(Var<S>, Var<S>, std::vector<int>);                             \
  template Var<S> max_along<S>(Var<S>, int);                                                     \
  template Var<S> dice_loss<S>(Var<S>, const Tensor<S>&, S);                                     \
  template Var<S> focal_loss<S>(Var<S>, const Tensor<S>&, S, S);                                 \
  template Var<S> pairwise_contrast<S>(Var<S>, Var<S>, const std::vector<char>&, S);

RVOS_INSTANTIATE_OPS(float)
RVOS_INSTANTIATE_OPS(double)

}  // namespace rvos::ad
