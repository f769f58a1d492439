#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "twbert/core/tensor.hpp"

namespace twbert {

namespace detail {

template <Scalar Real>
void require_matrix(const Tensor<Real>& t, const char* op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(t.shape()));
  }
}

template <Scalar Real>
void require_same_shape(const Tensor<Real>& a, const Tensor<Real>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

// c[m x n] += a[m x k] * b[k x n]
template <Scalar Real>
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    Real* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = a[i * k + p];
      const Real* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c[m x n] += a[m x k] * b[n x k]^T
template <Scalar Real>
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* ai = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* bj = b + j * k;
      Real s = 0;
      for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      c[i * n + j] += s;
    }
  }
}

// c[k x n] += a[m x k]^T * b[m x n]
template <Scalar Real>
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const Real* bi = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = a[i * k + p];
      Real* cp = c + p * n;
      for (std::size_t j = 0; j < n; ++j) cp[j] += aip * bi[j];
    }
  }
}

}  // namespace detail

/// a[m x k] * b[k x n].
template <Scalar Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner dimensions differ: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  std::vector<Real> out(m * n, Real(0));
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Real>({m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](Node<Real>& self) {
    if (Real* ga = detail::grad_of(pa)) detail::gemm_nt(self.grad.data(), pb->value.data(), ga, m, n, k);
    if (Real* gb = detail::grad_of(pb)) detail::gemm_tn(pa->value.data(), self.grad.data(), gb, m, k, n);
  });
}

/// a[m x k] * b[n x k]^T.
template <Scalar Real>
Tensor<Real> matmul_nt(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) {
    throw DimensionError("matmul_nt: widths differ: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  std::vector<Real> out(m * n, Real(0));
  detail::gemm_nt(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Real>({m, n}, std::move(out), {pa, pb}, [pa, pb, m, k, n](Node<Real>& self) {
    if (Real* ga = detail::grad_of(pa)) detail::gemm_nn(self.grad.data(), pb->value.data(), ga, m, n, k);
    if (Real* gb = detail::grad_of(pb)) detail::gemm_tn(self.grad.data(), pa->value.data(), gb, m, n, k);
  });
}

template <Scalar Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Real>(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node<Real>& self) {
    for (const auto& p : {pa, pb}) {
      if (Real* g = detail::grad_of(p)) {
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
      }
    }
  });
}

template <Scalar Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Real>(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node<Real>& self) {
    if (Real* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = detail::grad_of(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

/// Element-wise product.
template <Scalar Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  auto pa = a.node(), pb = b.node();
  return detail::make_result<Real>(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node<Real>& self) {
    if (Real* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (Real* g = detail::grad_of(pb)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

template <Scalar Real>
Tensor<Real> scale(const Tensor<Real>& a, Real s) {
  std::vector<Real> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  auto pa = a.node();
  return detail::make_result<Real>(a.shape(), std::move(out), {pa}, [pa, s](Node<Real>& self) {
    if (Real* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
    }
  });
}

/// x[... x n] + b[n], broadcast over rows.
template <Scalar Real>
Tensor<Real> add_bias(const Tensor<Real>& x, const Tensor<Real>& b) {
  const std::size_t n = x.cols();
  if (b.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_string(b.shape()) + " does not match width of " +
                         shape_string(x.shape()));
  }
  const std::size_t rows = x.rows();
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] + b[c];
  auto px = x.node(), pb = b.node();
  return detail::make_result<Real>(x.shape(), std::move(out), {px, pb}, [px, pb, rows, n](Node<Real>& self) {
    if (Real* g = detail::grad_of(px)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (Real* g = detail::grad_of(pb)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
    }
  });
}

template <Scalar Real>
Tensor<Real> sum(const Tensor<Real>& a) {
  Real s = 0;
  for (Real v : a.values()) s += v;
  auto pa = a.node();
  return detail::make_result<Real>({1}, {s}, {pa}, [pa](Node<Real>& self) {
    if (Real* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < pa->value.size(); ++i) g[i] += self.grad[0];
    }
  });
}

template <Scalar Real>
Tensor<Real> mean(const Tensor<Real>& a) {
  return scale(sum(a), Real(1) / static_cast<Real>(a.numel()));
}

template <Scalar Real>
Tensor<Real> reshape(const Tensor<Real>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  }
  std::vector<Real> out(a.values().begin(), a.values().end());
  auto pa = a.node();
  return detail::make_result<Real>(std::move(shape), std::move(out), {pa}, [pa](Node<Real>& self) {
    if (Real* g = detail::grad_of(pa)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

/// Row-wise softmax with max subtraction.
template <Scalar Real>
Tensor<Real> softmax_rows(const Tensor<Real>& t) {
  if (t.rank() == 0 || t.numel() == 0) throw DimensionError("softmax_rows: empty rows");
  const std::size_t n = t.cols(), rows = t.rows();
  std::vector<Real> out(t.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* x = t.values().data() + r * n;
    Real* y = out.data() + r * n;
    const Real mx = *std::max_element(x, x + n);
    Real z = 0;
    for (std::size_t c = 0; c < n; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < n; ++c) y[c] /= z;
  }
  auto pt = t.node();
  return detail::make_result<Real>(t.shape(), std::move(out), {pt}, [pt, rows, n](Node<Real>& self) {
    if (Real* g = detail::grad_of(pt)) {
      for (std::size_t r = 0; r < rows; ++r) {
        const Real* y = self.value.data() + r * n;
        const Real* gy = self.grad.data() + r * n;
        Real dot = 0;
        for (std::size_t c = 0; c < n; ++c) dot += y[c] * gy[c];
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += y[c] * (gy[c] - dot);
      }
    }
  });
}

/// Normalizes every vector along the last axis to zero mean and unit
/// variance (population variance, eps inside the root), then applies gain
/// and bias.
template <Scalar Real>
Tensor<Real> layer_norm(const Tensor<Real>& x, const Tensor<Real>& gain, const Tensor<Real>& bias,
                        Real eps = Real(1e-6)) {
  const std::size_t d = x.cols(), rows = x.rows();
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(gain.shape()) + "/" +
                         shape_string(bias.shape()) + " vs input " + shape_string(x.shape()));
  }
  if (!(eps > 0)) throw ContractError("layer_norm: eps must be positive");
  std::vector<Real> out(x.numel()), xhat(x.numel()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* v = x.values().data() + r * d;
    Real mu = 0;
    for (std::size_t c = 0; c < d; ++c) mu += v[c];
    mu /= static_cast<Real>(d);
    Real var = 0;
    for (std::size_t c = 0; c < d; ++c) var += (v[c] - mu) * (v[c] - mu);
    var /= static_cast<Real>(d);
    inv_std[r] = Real(1) / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      xhat[r * d + c] = (v[c] - mu) * inv_std[r];
      out[r * d + c] = xhat[r * d + c] * gain[c] + bias[c];
    }
  }
  auto px = x.node(), pg = gain.node(), pb = bias.node();
  return detail::make_result<Real>(
      x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<Real>& self) {
        const Real* gy = self.grad.data();
        if (Real* g = detail::grad_of(pg)) {
          for (std::size_t i = 0; i < rows * d; ++i) g[i % d] += gy[i] * xhat[i];
        }
        if (Real* g = detail::grad_of(pb)) {
          for (std::size_t i = 0; i < rows * d; ++i) g[i % d] += gy[i];
        }
        if (Real* g = detail::grad_of(px)) {
          const Real inv_d = Real(1) / static_cast<Real>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            Real s1 = 0, s2 = 0;
            for (std::size_t c = 0; c < d; ++c) {
              const Real gh = gy[r * d + c] * pg->value[c];
              s1 += gh;
              s2 += gh * xhat[r * d + c];
            }
            for (std::size_t c = 0; c < d; ++c) {
              const Real gh = gy[r * d + c] * pg->value[c];
              g[r * d + c] += inv_std[r] * (gh - inv_d * s1 - xhat[r * d + c] * inv_d * s2);
            }
          }
        }
      });
}

/// Exact (erf) GELU.
template <Scalar Real>
Tensor<Real> gelu(const Tensor<Real>& x) {
  const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = Real(0.5) * x[i] * (Real(1) + std::erf(x[i] * inv_sqrt2));
  auto px = x.node();
  return detail::make_result<Real>(x.shape(), std::move(out), {px}, [px, inv_sqrt2](Node<Real>& self) {
    if (Real* g = detail::grad_of(px)) {
      const Real inv_sqrt2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<Real>;
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const Real v = px->value[i];
        const Real cdf = Real(0.5) * (Real(1) + std::erf(v * inv_sqrt2));
        const Real pdf = inv_sqrt2pi * std::exp(Real(-0.5) * v * v);
        g[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

/// x[... x k] * w[k x n] (+ b[n]).
template <Scalar Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const std::optional<std::type_identity_t<Tensor<Real>>>& b = std::nullopt) {
  detail::require_matrix(w, "linear");
  if (x.cols() != w.shape()[0]) {
    throw DimensionError("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  Tensor<Real> x2 = x.rank() == 2 ? x : reshape(x, {x.rows(), x.cols()});
  Tensor<Real> y = matmul(x2, w);
  if (b) y = add_bias(y, *b);
  if (x.rank() != 2) {
    Shape s = x.shape();
    s.back() = w.shape()[1];
    y = reshape(y, std::move(s));
  }
  return y;
}

/// Stacks rows of the given matrices (all with equal width).
template <Scalar Real>
Tensor<Real> concat_rows(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t rows = 0;
  std::vector<std::shared_ptr<Node<Real>>> parents;
  for (const auto& p : parts) {
    if (p.cols() != n) {
      throw DimensionError("concat_rows: width mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    rows += p.rows();
    parents.push_back(p.node());
  }
  std::vector<Real> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());
  return detail::make_result<Real>({rows, n}, std::move(out), parents, [parents](Node<Real>& self) {
    std::size_t offset = 0;
    for (const auto& p : parents) {
      if (Real* g = detail::grad_of(p)) {
        for (std::size_t i = 0; i < p->value.size(); ++i) g[i] += self.grad[offset + i];
      }
      offset += p->value.size();
    }
  });
}

/// Joins matrices with equal row counts side by side.
template <Scalar Real>
Tensor<Real> concat_cols(const std::vector<Tensor<Real>>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t rows = parts.front().rows();
  std::size_t width = 0;
  std::vector<std::shared_ptr<Node<Real>>> parents;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                           shape_string(p.shape()));
    }
    width += p.cols();
    widths.push_back(p.cols());
    parents.push_back(p.node());
  }
  std::vector<Real> out(rows * width);
  std::size_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * width + col + c] = parts[k][r * widths[k] + c];
    col += widths[k];
  }
  return detail::make_result<Real>({rows, width}, std::move(out), parents,
                                   [parents, widths, rows, width](Node<Real>& self) {
                                     std::size_t col = 0;
                                     for (std::size_t k = 0; k < parents.size(); ++k) {
                                       if (Real* g = detail::grad_of(parents[k])) {
                                         for (std::size_t r = 0; r < rows; ++r)
                                           for (std::size_t c = 0; c < widths[k]; ++c)
                                             g[r * widths[k] + c] += self.grad[r * width + col + c];
                                       }
                                       col += widths[k];
                                     }
                                   });
}

/// out[i] = x[index[i]] along the first axis of a matrix. Indices may repeat.
template <Scalar Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, std::vector<std::size_t> index) {
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  const std::size_t n = x.cols(), rows = x.rows();
  std::vector<Real> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= rows) {
      throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " out of range for " +
                           shape_string(x.shape()));
    }
    std::copy_n(x.values().data() + index[i] * n, n, out.data() + i * n);
  }
  auto px = x.node();
  const std::size_t m = index.size();
  return detail::make_result<Real>({m, n}, std::move(out), {px}, [px, n, index = std::move(index)](Node<Real>& self) {
    if (Real* g = detail::grad_of(px)) {
      for (std::size_t i = 0; i < index.size(); ++i)
        for (std::size_t c = 0; c < n; ++c) g[index[i] * n + c] += self.grad[i * n + c];
    }
  });
}

template <Scalar Real>
Tensor<Real> slice_rows(const Tensor<Real>& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_string(x.shape()));
  }
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, std::move(idx));
}

/// Divides every row by max(||row||_2, eps). A zero row stays zero.
template <Scalar Real>
Tensor<Real> l2_normalize_rows(const Tensor<Real>& x, Real eps = Real(1e-12)) {
  const std::size_t n = x.cols(), rows = x.rows();
  std::vector<Real> out(x.numel()), norms(rows);
  std::vector<char> clamped(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    Real s = 0;
    for (std::size_t c = 0; c < n; ++c) s += x[r * n + c] * x[r * n + c];
    const Real norm = std::sqrt(s);
    clamped[r] = norm < eps;
    norms[r] = clamped[r] ? eps : norm;
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = x[r * n + c] / norms[r];
  }
  auto px = x.node();
  return detail::make_result<Real>(
      x.shape(), std::move(out), {px},
      [px, rows, n, norms = std::move(norms), clamped = std::move(clamped)](Node<Real>& self) {
        if (Real* g = detail::grad_of(px)) {
          for (std::size_t r = 0; r < rows; ++r) {
            const Real* y = self.value.data() + r * n;
            const Real* gy = self.grad.data() + r * n;
            Real dot = 0;
            if (!clamped[r]) {
              for (std::size_t c = 0; c < n; ++c) dot += y[c] * gy[c];
            }
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += (gy[c] - y[c] * dot) / norms[r];
          }
        }
      });
}

/// Mean over rows of -log softmax(logits[r])[target[r]].
///
/// `allowed`, when non-empty, is a rows x cols mask; disallowed columns are
/// removed from that row's softmax. The target column must be allowed.
template <Scalar Real>
Tensor<Real> cross_entropy_rows(const Tensor<Real>& logits, const std::vector<std::size_t>& targets,
                                const std::vector<char>& allowed = {}) {
  detail::require_matrix(logits, "cross_entropy_rows");
  const std::size_t rows = logits.shape()[0], n = logits.shape()[1];
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
  }
  if (!allowed.empty() && allowed.size() != rows * n) throw DimensionError("cross_entropy_rows: mask size");
  auto ok = [&](std::size_t r, std::size_t c) { return allowed.empty() || allowed[r * n + c]; };
  std::vector<Real> probs(rows * n, Real(0));
  Real total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= n || !ok(r, targets[r])) throw ContractError("cross_entropy_rows: invalid target");
    const Real* x = logits.values().data() + r * n;
    Real mx = -std::numeric_limits<Real>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (ok(r, c)) mx = std::max(mx, x[c]);
    Real z = 0;
    for (std::size_t c = 0; c < n; ++c)
      if (ok(r, c)) z += (probs[r * n + c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < n; ++c) probs[r * n + c] /= z;
    total += -(x[targets[r]] - mx - std::log(z));
  }
  const Real inv_rows = Real(1) / static_cast<Real>(rows);
  auto pl = logits.node();
  return detail::make_result<Real>(
      {1}, {total * inv_rows}, {pl},
      [pl, rows, n, inv_rows, targets, probs = std::move(probs)](Node<Real>& self) {
        if (Real* g = detail::grad_of(pl)) {
          const Real s = self.grad[0] * inv_rows;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < n; ++c) g[r * n + c] += s * probs[r * n + c];
            g[r * n + targets[r]] -= s;
          }
        }
      });
}

}  // namespace twbert
