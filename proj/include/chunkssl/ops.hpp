#pragma once

// Differentiable primitives. Each op validates shapes, computes its forward
// value with a plain kernel, and registers a backward closure that reads the
// recorded input values from the tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <string>
#include <type_traits>
#include <vector>

#include "chunkssl/array.hpp"
#include "chunkssl/error.hpp"
#include "chunkssl/tape.hpp"

namespace chunkssl {

/// Binary attention mask; true means the key may be attended.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> bits;

  AttentionMask() = default;
  AttentionMask(std::size_t r, std::size_t c, bool fill = false)
      : rows(r), cols(c), bits(r * c, fill ? 1 : 0) {}

  bool operator()(std::size_t i, std::size_t j) const { return bits[i * cols + j] != 0; }
  void set(std::size_t i, std::size_t j, bool v) { bits[i * cols + j] = v ? 1 : 0; }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;
};

/// How blocked attention entries are removed from the softmax.
enum class MaskMode {
  exact,     // excluded from the normalisation sum
  additive,  // -1e9 added to the logit
};

template <class T>
constexpr MaskMode default_mask_mode() {
  return std::is_same_v<T, double> ? MaskMode::exact : MaskMode::additive;
}

namespace kernels {

template <class T>
void require_cols(const Array<T>& a, std::size_t c, const char* op) {
  if (a.cols() != c) {
    throw ConfigError(std::string(op) + ": expected " + std::to_string(c) + " columns, got " +
                      Array<T>::shape_string(a.shape()));
  }
}

// C = A * B
template <class T>
Array<T> matmul(const Array<T>& a, const Array<T>& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: inner dimensions differ " + Array<T>::shape_string(a.shape()) +
                      " * " + Array<T>::shape_string(b.shape()));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Array<T> c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    T* crow = c.data().data() + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a(i, p);
      if (av == T(0)) continue;
      const T* brow = b.data().data() + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A * B^T
template <class T>
Array<T> matmul_nt(const Array<T>& a, const Array<T>& b) {
  if (a.cols() != b.cols()) {
    throw ConfigError("matmul_nt: inner dimensions differ " + Array<T>::shape_string(a.shape()) +
                      " * " + Array<T>::shape_string(b.shape()) + "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Array<T> c(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const T* arow = a.data().data() + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const T* brow = b.data().data() + j * k;
      T s = 0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      c(i, j) = s;
    }
  }
  return c;
}

// C = A^T * B
template <class T>
Array<T> matmul_tn(const Array<T>& a, const Array<T>& b) {
  if (a.rows() != b.rows()) {
    throw ConfigError("matmul_tn: row counts differ " + Array<T>::shape_string(a.shape()) +
                      " vs " + Array<T>::shape_string(b.shape()));
  }
  const std::size_t k = a.rows(), n = a.cols(), m = b.cols();
  Array<T> c(n, m);
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a.data().data() + p * n;
    const T* brow = b.data().data() + p * m;
    for (std::size_t i = 0; i < n; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* crow = c.data().data() + i * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

template <class T>
Array<T> masked_softmax(const Array<T>& s, const AttentionMask* mask, MaskMode mode) {
  if (mask && (mask->rows != s.rows() || mask->cols != s.cols())) {
    throw ConfigError("masked_softmax: mask " + std::to_string(mask->rows) + "x" +
                      std::to_string(mask->cols) + " does not match logits " +
                      Array<T>::shape_string(s.shape()));
  }
  Array<T> out(s.rows(), s.cols());
  for (std::size_t i = 0; i < s.rows(); ++i) {
    auto allowed = [&](std::size_t j) { return !mask || (*mask)(i, j); };
    T mx = -std::numeric_limits<T>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      T v = s(i, j);
      if (!allowed(j)) {
        if (mode == MaskMode::exact) continue;
        v += T(-1e9);
      } else {
        any = true;
      }
      mx = std::max(mx, v);
    }
    if (!any) throw NumericError("masked_softmax: row " + std::to_string(i) + " has no unblocked entries");
    T z = 0;
    for (std::size_t j = 0; j < s.cols(); ++j) {
      if (!allowed(j) && mode == MaskMode::exact) continue;
      T v = allowed(j) ? s(i, j) : s(i, j) + T(-1e9);
      out(i, j) = std::exp(v - mx);
      z += out(i, j);
    }
    for (std::size_t j = 0; j < s.cols(); ++j) out(i, j) /= z;
  }
  return out;
}

template <class T>
Array<T> depthwise_conv1d(const Array<T>& x, const Array<T>& kernel) {
  require_cols(kernel, x.cols(), "depthwise_conv1d");
  const std::size_t w = kernel.rows();
  if (w == 0 || x.rows() < w) {
    throw ConfigError("depthwise_conv1d: input length " + std::to_string(x.rows()) +
                      " shorter than kernel width " + std::to_string(w));
  }
  const std::size_t len = x.rows() - w + 1, d = x.cols();
  Array<T> out(len, d);
  for (std::size_t t = 0; t < len; ++t) {
    for (std::size_t tap = 0; tap < w; ++tap) {
      for (std::size_t c = 0; c < d; ++c) out(t, c) += x(t + tap, c) * kernel(tap, c);
    }
  }
  return out;
}

}  // namespace kernels

namespace detail {

template <class T>
Tape<T>& same_tape(std::initializer_list<Var<T>> vs) {
  Tape<T>* t = vs.begin()->tape;
  for (const auto& v : vs) {
    if (v.tape != t) throw UsageError("ops: variables recorded on different tapes");
  }
  return *t;
}

template <class T>
void add_into(Array<T>& dst, const Array<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
Var<T> unary(const char* name, Var<T> x, T (*f)(T), T (*dfdy_from_xy)(T, T)) {
  Tape<T>& t = *x.tape;
  const std::size_t xi = x.id;
  return t.apply(
      name, {xi},
      [xi, f](const Tape<T>& tp) {
        Array<T> out = tp.value(xi);
        for (auto& v : out.data()) v = f(v);
        return out;
      },
      [xi, dfdy_from_xy](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(xi)) return;
        const Array<T>& x = tp.value(xi);
        const Array<T>& y = tp.value(self);
        const Array<T>& g = tp.grad_ref(self);
        Array<T>& gx = tp.grad_ref(xi);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * dfdy_from_xy(x[i], y[i]);
      });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape({a, b});
  const std::size_t ai = a.id, bi = b.id;
  return t.apply(
      "matmul", {ai, bi},
      [ai, bi](const Tape<T>& tp) { return kernels::matmul(tp.value(ai), tp.value(bi)); },
      [ai, bi](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(ai)) detail::add_into(tp.grad_ref(ai), kernels::matmul_nt(g, tp.value(bi)));
        if (tp.requires_grad(bi)) detail::add_into(tp.grad_ref(bi), kernels::matmul_tn(tp.value(ai), g));
      });
}

/// a * b^T
template <class T>
Var<T> matmul_nt(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape({a, b});
  const std::size_t ai = a.id, bi = b.id;
  return t.apply(
      "matmul_nt", {ai, bi},
      [ai, bi](const Tape<T>& tp) { return kernels::matmul_nt(tp.value(ai), tp.value(bi)); },
      [ai, bi](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(ai)) detail::add_into(tp.grad_ref(ai), kernels::matmul(g, tp.value(bi)));
        if (tp.requires_grad(bi)) detail::add_into(tp.grad_ref(bi), kernels::matmul_tn(g, tp.value(ai)));
      });
}

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape({a, b});
  Array<T>::require_same_shape(a.value(), b.value(), "add");
  const std::size_t ai = a.id, bi = b.id;
  return t.apply(
      "add", {ai, bi},
      [ai, bi](const Tape<T>& tp) {
        Array<T> out = tp.value(ai);
        out += tp.value(bi);
        return out;
      },
      [ai, bi](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(ai)) detail::add_into(tp.grad_ref(ai), g);
        if (tp.requires_grad(bi)) detail::add_into(tp.grad_ref(bi), g);
      });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape({a, b});
  Array<T>::require_same_shape(a.value(), b.value(), "sub");
  const std::size_t ai = a.id, bi = b.id;
  return t.apply(
      "sub", {ai, bi},
      [ai, bi](const Tape<T>& tp) {
        Array<T> out = tp.value(ai);
        const Array<T>& b = tp.value(bi);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
        return out;
      },
      [ai, bi](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(ai)) detail::add_into(tp.grad_ref(ai), g);
        if (tp.requires_grad(bi)) {
          Array<T>& gb = tp.grad_ref(bi);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g[i];
        }
      });
}

/// Hadamard product.
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape({a, b});
  Array<T>::require_same_shape(a.value(), b.value(), "mul");
  const std::size_t ai = a.id, bi = b.id;
  return t.apply(
      "mul", {ai, bi},
      [ai, bi](const Tape<T>& tp) {
        Array<T> out = tp.value(ai);
        const Array<T>& b = tp.value(bi);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
        return out;
      },
      [ai, bi](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(ai)) {
          Array<T>& ga = tp.grad_ref(ai);
          const Array<T>& b = tp.value(bi);
          for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * b[i];
        }
        if (tp.requires_grad(bi)) {
          Array<T>& gb = tp.grad_ref(bi);
          const Array<T>& a = tp.value(ai);
          for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * a[i];
        }
      });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  const std::size_t ai = a.id;
  return a.tape->apply(
      "scale", {ai},
      [ai, s](const Tape<T>& tp) {
        Array<T> out = tp.value(ai);
        for (auto& v : out.data()) v *= s;
        return out;
      },
      [ai, s](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(ai)) return;
        const Array<T>& g = tp.grad_ref(self);
        Array<T>& ga = tp.grad_ref(ai);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g[i];
      });
}

/// Adds a 1 x n row to every row of an r x n array.
template <class T>
Var<T> add_row(Var<T> a, Var<T> row) {
  Tape<T>& t = detail::same_tape({a, row});
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ConfigError("add_row: row " + Array<T>::shape_string(row.value().shape()) +
                      " does not broadcast over " + Array<T>::shape_string(a.value().shape()));
  }
  const std::size_t ai = a.id, ri = row.id;
  return t.apply(
      "add_row", {ai, ri},
      [ai, ri](const Tape<T>& tp) {
        Array<T> out = tp.value(ai);
        const Array<T>& r = tp.value(ri);
        for (std::size_t i = 0; i < out.rows(); ++i)
          for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += r[j];
        return out;
      },
      [ai, ri](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(ai)) detail::add_into(tp.grad_ref(ai), g);
        if (tp.requires_grad(ri)) {
          Array<T>& gr = tp.grad_ref(ri);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j);
        }
      });
}

/// Multiplies every row of an r x n array elementwise by a 1 x n row.
template <class T>
Var<T> mul_row(Var<T> a, Var<T> row) {
  Tape<T>& t = detail::same_tape({a, row});
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw ConfigError("mul_row: row " + Array<T>::shape_string(row.value().shape()) +
                      " does not broadcast over " + Array<T>::shape_string(a.value().shape()));
  }
  const std::size_t ai = a.id, ri = row.id;
  return t.apply(
      "mul_row", {ai, ri},
      [ai, ri](const Tape<T>& tp) {
        Array<T> out = tp.value(ai);
        const Array<T>& r = tp.value(ri);
        for (std::size_t i = 0; i < out.rows(); ++i)
          for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) *= r[j];
        return out;
      },
      [ai, ri](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        const Array<T>& a = tp.value(ai);
        const Array<T>& r = tp.value(ri);
        if (tp.requires_grad(ai)) {
          Array<T>& ga = tp.grad_ref(ai);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) ga(i, j) += g(i, j) * r[j];
        }
        if (tp.requires_grad(ri)) {
          Array<T>& gr = tp.grad_ref(ri);
          for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(i, j) * a(i, j);
        }
      });
}

template <class T>
Var<T> tanh(Var<T> x) {
  return detail::unary<T>(
      "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> sigmoid(Var<T> x) {
  return detail::unary<T>(
      "sigmoid", x, [](T v) { return T(1) / (T(1) + std::exp(-v)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> relu(Var<T> x) {
  return detail::unary<T>(
      "relu", x, [](T v) { return v > T(0) ? v : T(0); },
      [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

/// x * sigmoid(x)
template <class T>
Var<T> swish(Var<T> x) {
  return detail::unary<T>(
      "swish", x, [](T v) { return v / (T(1) + std::exp(-v)); },
      [](T xv, T) {
        const T s = T(1) / (T(1) + std::exp(-xv));
        return s * (T(1) + xv * (T(1) - s));
      });
}

/// Bounded rounding with a straight-through gradient: forward is
/// clamp(round-half-away-from-zero(x), lo, hi) per column, backward is the
/// identity. With `passthrough` the forward is also the identity, which gives
/// the smooth surrogate used for gradient checks.
template <class T>
Var<T> round_ste(Var<T> x, std::vector<T> lo, std::vector<T> hi, bool passthrough = false) {
  if (lo.size() != x.cols() || hi.size() != x.cols()) throw ConfigError("round_ste: bound width mismatch");
  const std::size_t xi = x.id;
  return x.tape->apply(
      "round_ste", {xi},
      [xi, lo = std::move(lo), hi = std::move(hi), passthrough](const Tape<T>& tp) {
        Array<T> out = tp.value(xi);
        if (passthrough) return out;
        for (std::size_t i = 0; i < out.rows(); ++i)
          for (std::size_t j = 0; j < out.cols(); ++j)
            out(i, j) = std::clamp(std::round(out(i, j)), lo[j], hi[j]);
        return out;
      },
      [xi](Tape<T>& tp, std::size_t self) {
        if (tp.requires_grad(xi)) detail::add_into(tp.grad_ref(xi), tp.grad_ref(self));
      });
}

// ---------------------------------------------------------------------------
// Structural

template <class T>
Var<T> slice_cols(Var<T> a, std::size_t begin, std::size_t end) {
  if (begin > end || end > a.cols()) throw ConfigError("slice_cols: range out of bounds");
  const std::size_t ai = a.id;
  return a.tape->apply(
      "slice_cols", {ai},
      [ai, begin, end](const Tape<T>& tp) {
        const Array<T>& a = tp.value(ai);
        Array<T> out(a.rows(), end - begin);
        for (std::size_t i = 0; i < a.rows(); ++i)
          for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
        return out;
      },
      [ai, begin, end](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(ai)) return;
        const Array<T>& g = tp.grad_ref(self);
        Array<T>& ga = tp.grad_ref(ai);
        for (std::size_t i = 0; i < g.rows(); ++i)
          for (std::size_t j = begin; j < end; ++j) ga(i, j) += g(i, j - begin);
      });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_cols: no inputs");
  Tape<T>& t = *parts.front().tape;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.tape != &t) throw UsageError("ops: variables recorded on different tapes");
    if (p.rows() != parts.front().rows()) throw ConfigError("concat_cols: row counts differ");
    ids.push_back(p.id);
  }
  return t.apply(
      "concat_cols", ids,
      [ids](const Tape<T>& tp) {
        std::size_t rows = tp.value(ids.front()).rows(), cols = 0;
        for (auto id : ids) cols += tp.value(id).cols();
        Array<T> out(rows, cols);
        std::size_t off = 0;
        for (auto id : ids) {
          const Array<T>& p = tp.value(id);
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
          off += p.cols();
        }
        return out;
      },
      [ids](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        std::size_t off = 0;
        for (auto id : ids) {
          const std::size_t c = tp.value(id).cols();
          if (tp.requires_grad(id)) {
            Array<T>& gp = tp.grad_ref(id);
            for (std::size_t i = 0; i < g.rows(); ++i)
              for (std::size_t j = 0; j < c; ++j) gp(i, j) += g(i, off + j);
          }
          off += c;
        }
      });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw ConfigError("concat_rows: no inputs");
  Tape<T>& t = *parts.front().tape;
  std::vector<std::size_t> ids;
  for (const auto& p : parts) {
    if (p.tape != &t) throw UsageError("ops: variables recorded on different tapes");
    if (p.cols() != parts.front().cols()) throw ConfigError("concat_rows: column counts differ");
    ids.push_back(p.id);
  }
  return t.apply(
      "concat_rows", ids,
      [ids](const Tape<T>& tp) {
        std::size_t rows = 0, cols = tp.value(ids.front()).cols();
        for (auto id : ids) rows += tp.value(id).rows();
        Array<T> out(rows, cols);
        auto it = out.data().begin();
        for (auto id : ids) it = std::copy(tp.value(id).data().begin(), tp.value(id).data().end(), it);
        return out;
      },
      [ids](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        std::size_t off = 0;
        for (auto id : ids) {
          const std::size_t n = tp.value(id).size();
          if (tp.requires_grad(id)) {
            Array<T>& gp = tp.grad_ref(id);
            for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
          }
          off += n;
        }
      });
}

/// Row gather; index -1 produces a zero row.
template <class T>
Var<T> gather_rows(Var<T> a, std::vector<long> index) {
  for (long r : index) {
    if (r < -1 || r >= static_cast<long>(a.rows())) throw ConfigError("gather_rows: index out of range");
  }
  const std::size_t ai = a.id;
  auto idx = std::make_shared<const std::vector<long>>(std::move(index));
  return a.tape->apply(
      "gather_rows", {ai},
      [ai, idx](const Tape<T>& tp) {
        const Array<T>& a = tp.value(ai);
        Array<T> out(idx->size(), a.cols());
        for (std::size_t i = 0; i < idx->size(); ++i) {
          if ((*idx)[i] < 0) continue;
          auto src = a.row_span(static_cast<std::size_t>((*idx)[i]));
          std::copy(src.begin(), src.end(), out.row_span(i).begin());
        }
        return out;
      },
      [ai, idx](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(ai)) return;
        const Array<T>& g = tp.grad_ref(self);
        Array<T>& ga = tp.grad_ref(ai);
        for (std::size_t i = 0; i < idx->size(); ++i) {
          if ((*idx)[i] < 0) continue;
          const std::size_t r = static_cast<std::size_t>((*idx)[i]);
          for (std::size_t j = 0; j < g.cols(); ++j) ga(r, j) += g(i, j);
        }
      });
}

/// Replaces the listed rows of `a` with the 1 x n row `replacement`.
template <class T>
Var<T> replace_rows(Var<T> a, std::vector<std::size_t> rows, Var<T> replacement) {
  Tape<T>& t = detail::same_tape({a, replacement});
  if (replacement.rows() != 1 || replacement.cols() != a.cols()) {
    throw ConfigError("replace_rows: replacement must be 1 x " + std::to_string(a.cols()));
  }
  for (auto r : rows) {
    if (r >= a.rows()) throw ConfigError("replace_rows: row out of range");
  }
  std::sort(rows.begin(), rows.end());
  rows.erase(std::unique(rows.begin(), rows.end()), rows.end());
  const std::size_t ai = a.id, ri = replacement.id;
  auto sel = std::make_shared<const std::vector<std::size_t>>(std::move(rows));
  return t.apply(
      "replace_rows", {ai, ri},
      [ai, ri, sel](const Tape<T>& tp) {
        Array<T> out = tp.value(ai);
        const Array<T>& r = tp.value(ri);
        for (auto row : *sel) std::copy(r.data().begin(), r.data().end(), out.row_span(row).begin());
        return out;
      },
      [ai, ri, sel](Tape<T>& tp, std::size_t self) {
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(ai)) {
          Array<T> ga = g;
          for (auto row : *sel) std::fill(ga.row_span(row).begin(), ga.row_span(row).end(), T(0));
          detail::add_into(tp.grad_ref(ai), ga);
        }
        if (tp.requires_grad(ri)) {
          Array<T>& gr = tp.grad_ref(ri);
          for (auto row : *sel)
            for (std::size_t j = 0; j < g.cols(); ++j) gr[j] += g(row, j);
        }
      });
}

// ---------------------------------------------------------------------------
// Normalisation, attention, convolution

/// Per-row layer normalisation with a learned 1 x n gain and bias.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
  Tape<T>& t = detail::same_tape({x, gain, bias});
  const std::size_t n = x.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw ConfigError("layer_norm: gain/bias must be 1 x " + std::to_string(n));
  }
  const std::size_t xi = x.id, gi = gain.id, bi = bias.id;
  auto normalise = [](const Array<T>& x, std::size_t i, T eps, std::vector<T>& xhat) {
    const std::size_t n = x.cols();
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
    mean /= T(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= T(n);
    const T inv = T(1) / std::sqrt(var + eps);
    xhat.resize(n);
    for (std::size_t j = 0; j < n; ++j) xhat[j] = (x(i, j) - mean) * inv;
    return inv;
  };
  return t.apply(
      "layer_norm", {xi, gi, bi},
      [=](const Tape<T>& tp) {
        const Array<T>& x = tp.value(xi);
        const Array<T>& g = tp.value(gi);
        const Array<T>& b = tp.value(bi);
        Array<T> out(x.rows(), x.cols());
        std::vector<T> xhat;
        for (std::size_t i = 0; i < x.rows(); ++i) {
          normalise(x, i, eps, xhat);
          for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = g[j] * xhat[j] + b[j];
        }
        return out;
      },
      [=](Tape<T>& tp, std::size_t self) {
        const Array<T>& x = tp.value(xi);
        const Array<T>& g = tp.value(gi);
        const Array<T>& dy = tp.grad_ref(self);
        const std::size_t n = x.cols();
        std::vector<T> xhat, dxhat(n);
        for (std::size_t i = 0; i < x.rows(); ++i) {
          const T inv = normalise(x, i, eps, xhat);
          if (tp.requires_grad(gi)) {
            Array<T>& gg = tp.grad_ref(gi);
            for (std::size_t j = 0; j < n; ++j) gg[j] += dy(i, j) * xhat[j];
          }
          if (tp.requires_grad(bi)) {
            Array<T>& gb = tp.grad_ref(bi);
            for (std::size_t j = 0; j < n; ++j) gb[j] += dy(i, j);
          }
          if (tp.requires_grad(xi)) {
            T m1 = 0, m2 = 0;
            for (std::size_t j = 0; j < n; ++j) {
              dxhat[j] = dy(i, j) * g[j];
              m1 += dxhat[j];
              m2 += dxhat[j] * xhat[j];
            }
            m1 /= T(n);
            m2 /= T(n);
            Array<T>& gx = tp.grad_ref(xi);
            for (std::size_t j = 0; j < n; ++j) gx(i, j) += inv * (dxhat[j] - m1 - xhat[j] * m2);
          }
        }
      });
}

/// Row softmax restricted to unblocked entries. Blocked entries are exactly
/// zero in the output and receive zero gradient.
template <class T>
Var<T> masked_softmax(Var<T> logits, std::shared_ptr<const AttentionMask> mask,
                      MaskMode mode = default_mask_mode<T>()) {
  const std::size_t si = logits.id;
  return logits.tape->apply(
      "masked_softmax", {si},
      [si, mask, mode](const Tape<T>& tp) { return kernels::masked_softmax(tp.value(si), mask.get(), mode); },
      [si](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(si)) return;
        const Array<T>& a = tp.value(self);
        const Array<T>& g = tp.grad_ref(self);
        Array<T>& gs = tp.grad_ref(si);
        for (std::size_t i = 0; i < a.rows(); ++i) {
          T dot = 0;
          for (std::size_t j = 0; j < a.cols(); ++j) dot += a(i, j) * g(i, j);
          for (std::size_t j = 0; j < a.cols(); ++j) gs(i, j) += a(i, j) * (g(i, j) - dot);
        }
      });
}

/// Expands per-query relative-position scores to a query x key matrix:
/// out(i, j) = scores(i, clamp(key_pos[j] - query_pos[i], -window, window) + window).
template <class T>
Var<T> relative_gather(Var<T> scores, std::vector<long> query_pos, std::vector<long> key_pos, long window) {
  if (scores.rows() != query_pos.size() || scores.cols() != static_cast<std::size_t>(2 * window + 1)) {
    throw ConfigError("relative_gather: scores must be " + std::to_string(query_pos.size()) + " x " +
                      std::to_string(2 * window + 1));
  }
  const std::size_t si = scores.id;
  auto qp = std::make_shared<const std::vector<long>>(std::move(query_pos));
  auto kp = std::make_shared<const std::vector<long>>(std::move(key_pos));
  auto bucket = [window](long q, long k) {
    return static_cast<std::size_t>(std::clamp(k - q, -window, window) + window);
  };
  return scores.tape->apply(
      "relative_gather", {si},
      [si, qp, kp, bucket](const Tape<T>& tp) {
        const Array<T>& s = tp.value(si);
        Array<T> out(qp->size(), kp->size());
        for (std::size_t i = 0; i < qp->size(); ++i)
          for (std::size_t j = 0; j < kp->size(); ++j) out(i, j) = s(i, bucket((*qp)[i], (*kp)[j]));
        return out;
      },
      [si, qp, kp, bucket](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(si)) return;
        const Array<T>& g = tp.grad_ref(self);
        Array<T>& gs = tp.grad_ref(si);
        for (std::size_t i = 0; i < qp->size(); ++i)
          for (std::size_t j = 0; j < kp->size(); ++j) gs(i, bucket((*qp)[i], (*kp)[j])) += g(i, j);
      });
}

/// Valid-mode depthwise convolution: x is L x D, kernel is W x D, output is
/// (L - W + 1) x D with out(t) = sum_w x(t + w) * kernel(w).
template <class T>
Var<T> depthwise_conv1d(Var<T> x, Var<T> kernel) {
  Tape<T>& t = detail::same_tape({x, kernel});
  kernels::require_cols(kernel.value(), x.cols(), "depthwise_conv1d");
  if (x.rows() < kernel.rows()) throw ConfigError("depthwise_conv1d: input shorter than kernel");
  const std::size_t xi = x.id, ki = kernel.id;
  return t.apply(
      "depthwise_conv1d", {xi, ki},
      [xi, ki](const Tape<T>& tp) { return kernels::depthwise_conv1d(tp.value(xi), tp.value(ki)); },
      [xi, ki](Tape<T>& tp, std::size_t self) {
        const Array<T>& x = tp.value(xi);
        const Array<T>& k = tp.value(ki);
        const Array<T>& g = tp.grad_ref(self);
        if (tp.requires_grad(xi)) {
          Array<T>& gx = tp.grad_ref(xi);
          for (std::size_t s = 0; s < g.rows(); ++s)
            for (std::size_t tap = 0; tap < k.rows(); ++tap)
              for (std::size_t c = 0; c < g.cols(); ++c) gx(s + tap, c) += g(s, c) * k(tap, c);
        }
        if (tp.requires_grad(ki)) {
          Array<T>& gk = tp.grad_ref(ki);
          for (std::size_t s = 0; s < g.rows(); ++s)
            for (std::size_t tap = 0; tap < k.rows(); ++tap)
              for (std::size_t c = 0; c < g.cols(); ++c) gk(tap, c) += g(s, c) * x(s + tap, c);
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions and losses

template <class T>
Var<T> sum(Var<T> x) {
  const std::size_t xi = x.id;
  return x.tape->apply(
      "sum", {xi},
      [xi](const Tape<T>& tp) {
        const auto& d = tp.value(xi).data();
        return Array<T>::scalar(std::accumulate(d.begin(), d.end(), T(0)));
      },
      [xi](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(xi)) return;
        const T g = tp.grad_ref(self)[0];
        for (auto& v : tp.grad_ref(xi).data()) v += g;
      });
}

/// Mean squared error over all elements.
template <class T>
Var<T> mse(Var<T> a, Var<T> b) {
  Tape<T>& t = detail::same_tape({a, b});
  Array<T>::require_same_shape(a.value(), b.value(), "mse");
  const std::size_t ai = a.id, bi = b.id;
  return t.apply(
      "mse", {ai, bi},
      [ai, bi](const Tape<T>& tp) {
        const Array<T>& a = tp.value(ai);
        const Array<T>& b = tp.value(bi);
        T s = 0;
        for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
        return Array<T>::scalar(s / T(a.size()));
      },
      [ai, bi](Tape<T>& tp, std::size_t self) {
        const Array<T>& a = tp.value(ai);
        const Array<T>& b = tp.value(bi);
        const T g = tp.grad_ref(self)[0] * T(2) / T(a.size());
        if (tp.requires_grad(ai)) {
          Array<T>& ga = tp.grad_ref(ai);
          for (std::size_t i = 0; i < a.size(); ++i) ga[i] += g * (a[i] - b[i]);
        }
        if (tp.requires_grad(bi)) {
          Array<T>& gb = tp.grad_ref(bi);
          for (std::size_t i = 0; i < a.size(); ++i) gb[i] -= g * (a[i] - b[i]);
        }
      });
}

/// Summed softmax cross-entropy: -sum_i log softmax(logits_i)[target_i],
/// evaluated with log-sum-exp.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::vector<std::size_t> targets) {
  if (targets.size() != logits.rows()) throw ConfigError("cross_entropy: one target per row required");
  for (auto k : targets) {
    if (k >= logits.cols()) {
      throw UsageError("cross_entropy: target " + std::to_string(k) + " outside " +
                       std::to_string(logits.cols()) + " classes");
    }
  }
  const std::size_t li = logits.id;
  auto tg = std::make_shared<const std::vector<std::size_t>>(std::move(targets));
  auto log_z = [](const Array<T>& l, std::size_t i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < l.cols(); ++j) mx = std::max(mx, l(i, j));
    T z = 0;
    for (std::size_t j = 0; j < l.cols(); ++j) z += std::exp(l(i, j) - mx);
    return mx + std::log(z);
  };
  return logits.tape->apply(
      "cross_entropy", {li},
      [li, tg, log_z](const Tape<T>& tp) {
        const Array<T>& l = tp.value(li);
        T s = 0;
        for (std::size_t i = 0; i < l.rows(); ++i) s += log_z(l, i) - l(i, (*tg)[i]);
        return Array<T>::scalar(s);
      },
      [li, tg, log_z](Tape<T>& tp, std::size_t self) {
        if (!tp.requires_grad(li)) return;
        const Array<T>& l = tp.value(li);
        const T g = tp.grad_ref(self)[0];
        Array<T>& gl = tp.grad_ref(li);
        for (std::size_t i = 0; i < l.rows(); ++i) {
          const T lz = log_z(l, i);
          for (std::size_t j = 0; j < l.cols(); ++j) gl(i, j) += g * std::exp(l(i, j) - lz);
          gl(i, (*tg)[i]) -= g;
        }
      });
}

}  // namespace chunkssl
