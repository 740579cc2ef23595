#pragma once

// Differentiable operations over fedlora::Tensor.
//
// Matrices are rank-2 row-major. Vectors are rank-1 and broadcast as a single
// row where an op documents it. Every op has a backward rule that accumulates
// into inputs flagged requires_grad; frozen inputs receive nothing.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "fedlora/tensor.hpp"

namespace fedlora::ops {

// Additive attention mask value. exp() of it underflows to exactly zero.
inline constexpr double kMasked = -1e300;

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline bool tracking(const std::vector<Tensor>& inputs) {
  if (!active_tape()) return false;
  for (const auto& t : inputs)
    if (t.requires_grad()) return true;
  return false;
}

inline Tensor finish(const char* name, Shape shape, std::vector<double> data, bool track,
                     Tape::BackwardFn fn) {
  if (fedlora::detail::finite_check_slot())
    for (double v : data)
      if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by op '") + name + "'");
  Tensor out(std::move(shape), std::move(data), track);
  if (track) active_tape()->record(name, out, std::move(fn));
  return out;
}

inline void require_matrix(const Tensor& t, const char* op) {
  if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// C[m×n] += A[m×k]·B[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m×k] += G[m×n]·B[k×n]ᵀ
inline void gemm_nt(const double* g, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = g + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k×n] += A[m×k]ᵀ·G[m×n]
inline void gemm_tn(const double* a, const double* g, double* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

inline std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  bool track = detail::tracking({&a, &b});
  return detail::finish("matmul", {m, n}, std::move(out), track, [a, b, m, k, n](const std::vector<double>& g) {
    if (a.requires_grad()) detail::gemm_nt(g.data(), b.data().data(), a.grad_buffer().data(), m, n, k);
    if (b.requires_grad()) detail::gemm_tn(a.data().data(), g.data(), b.grad_buffer().data(), m, k, n);
  });
}

// a·bᵀ without materializing the transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul_nt");
  detail::require_matrix(b, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k)
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()) + "^T");
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nt(a.data().data(), b.data().data(), out.data(), m, k, n);
  bool track = detail::tracking({&a, &b});
  return detail::finish("matmul_nt", {m, n}, std::move(out), track, [a, b, m, k, n](const std::vector<double>& g) {
    // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
    if (a.requires_grad()) detail::gemm_nn(g.data(), b.data().data(), a.grad_buffer().data(), m, n, k);
    if (b.requires_grad()) detail::gemm_tn(g.data(), a.data().data(), b.grad_buffer().data(), m, n, k);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  bool track = detail::tracking({&a, &b});
  return detail::finish("add", a.shape(), std::move(out), track, [a, b](const std::vector<double>& g) {
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  bool track = detail::tracking({&a, &b});
  return detail::finish("sub", a.shape(), std::move(out), track, [a, b](const std::vector<double>& g) {
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  bool track = detail::tracking({&a, &b});
  return detail::finish("mul", a.shape(), std::move(out), track, [a, b](const std::vector<double>& g) {
    if (a.requires_grad()) {
      auto& ga = a.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b[i];
    }
    if (b.requires_grad()) {
      auto& gb = b.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
  bool track = detail::tracking({&a});
  return detail::finish("scale", a.shape(), std::move(out), track, [a, s](const std::vector<double>& g) {
    auto& ga = a.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

// x[..×n] + bias[n], bias broadcast over every leading index.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  if (bias.rank() != 1 || bias.dim(0) != detail::last_dim(x))
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " + shape_str(x.shape()));
  const std::size_t n = bias.dim(0);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + bias[i % n];
  bool track = detail::tracking({&x, &bias});
  return detail::finish("add_bias", x.shape(), std::move(out), track, [x, bias, n](const std::vector<double>& g) {
    if (x.requires_grad()) {
      auto& gx = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (bias.requires_grad()) {
      auto& gb = bias.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % n] += g[i];
    }
  });
}

// GELU, tanh approximation: 0.5x(1 + tanh(√(2/π)(x + 0.044715x³))).
inline Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double k = 0.044715;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + k * v * v * v)));
  }
  bool track = detail::tracking({&x});
  return detail::finish("gelu", x.shape(), std::move(out), track, [x](const std::vector<double>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = x[i];
      const double u = c * (v + k * v * v * v);
      const double t = std::tanh(u);
      const double du = c * (1.0 + 3.0 * k * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

// Normalizes each row of x[m×n] and applies gamma[n], beta[n].
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
  detail::require_matrix(x, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n)
    throw DimensionError("layer_norm: affine parameters do not match " + shape_str(x.shape()));
  std::vector<double> out(m * n), xhat(m * n), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* r = x.data().data() + i * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += r[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (r[j] - mean) * (r[j] - mean);
    var /= static_cast<double>(n);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[i * n + j] = (r[j] - mean) * inv_std[i];
      out[i * n + j] = xhat[i * n + j] * gamma[j] + beta[j];
    }
  }
  bool track = detail::tracking({&x, &gamma, &beta});
  return detail::finish("layer_norm", x.shape(), std::move(out), track,
                        [x, gamma, beta, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                            const std::vector<double>& g) {
                          if (gamma.requires_grad()) {
                            auto& gg = gamma.grad_buffer();
                            for (std::size_t i = 0; i < m * n; ++i) gg[i % n] += g[i] * xhat[i];
                          }
                          if (beta.requires_grad()) {
                            auto& gb = beta.grad_buffer();
                            for (std::size_t i = 0; i < m * n; ++i) gb[i % n] += g[i];
                          }
                          if (!x.requires_grad()) return;
                          auto& gx = x.grad_buffer();
                          const double inv_n = 1.0 / static_cast<double>(n);
                          for (std::size_t i = 0; i < m; ++i) {
                            double s1 = 0.0, s2 = 0.0;
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dy = g[i * n + j] * gamma[j];
                              s1 += dy;
                              s2 += dy * xhat[i * n + j];
                            }
                            for (std::size_t j = 0; j < n; ++j) {
                              const double dy = g[i * n + j] * gamma[j];
                              gx[i * n + j] += inv_std[i] * (dy - inv_n * s1 - xhat[i * n + j] * inv_n * s2);
                            }
                          }
                        });
}

// Softmax over the last axis of x / temperature, max-subtracted.
inline Tensor softmax_lastdim(const Tensor& x, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw std::invalid_argument("softmax_lastdim: temperature must be positive");
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j] / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] / temperature - mx);
      s += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= s;
  }
  bool track = detail::tracking({&x});
  std::vector<double> probs = track ? out : std::vector<double>{};
  return detail::finish("softmax", x.shape(), std::move(out), track,
                        [x, n, rows, temperature, probs = std::move(probs)](const std::vector<double>& g) {
                          auto& gx = x.grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* p = probs.data() + r * n;
                            const double* gr = g.data() + r * n;
                            double dot = 0.0;
                            for (std::size_t j = 0; j < n; ++j) dot += gr[j] * p[j];
                            for (std::size_t j = 0; j < n; ++j)
                              gx[r * n + j] += p[j] * (gr[j] - dot) / temperature;
                          }
                        });
}

// log(softmax(x / temperature)) along the last axis, via log-sum-exp.
inline Tensor log_softmax_lastdim(const Tensor& x, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw std::invalid_argument("log_softmax_lastdim: temperature must be positive");
  const std::size_t n = detail::last_dim(x), rows = x.numel() / n;
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data().data() + r * n;
    double* o = out.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, in[j] / temperature);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += std::exp(in[j] / temperature - mx);
    const double lse = mx + std::log(s);
    for (std::size_t j = 0; j < n; ++j) o[j] = in[j] / temperature - lse;
  }
  bool track = detail::tracking({&x});
  std::vector<double> logp = track ? out : std::vector<double>{};
  return detail::finish("log_softmax", x.shape(), std::move(out), track,
                        [x, n, rows, temperature, logp = std::move(logp)](const std::vector<double>& g) {
                          auto& gx = x.grad_buffer();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const double* gr = g.data() + r * n;
                            double gs = 0.0;
                            for (std::size_t j = 0; j < n; ++j) gs += gr[j];
                            for (std::size_t j = 0; j < n; ++j)
                              gx[r * n + j] += (gr[j] - std::exp(logp[r * n + j]) * gs) / temperature;
                          }
                        });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  bool track = detail::tracking({&x});
  return detail::finish("reshape", std::move(shape), x.values(), track, [x](const std::vector<double>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

inline Tensor transpose(const Tensor& x) {
  detail::require_matrix(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
  bool track = detail::tracking({&x});
  return detail::finish("transpose", {n, m}, std::move(out), track, [x, m, n](const std::vector<double>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[j * m + i];
  });
}

// Stacks matrices (or vectors, each as one row) along the first axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = detail::last_dim(parts.front());
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.rank() > 2 || detail::last_dim(p) != n)
      throw DimensionError("concat_rows: incompatible part " + shape_str(p.shape()));
    rows += p.numel() / n;
  }
  std::vector<double> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  bool track = detail::tracking(parts);
  return detail::finish("concat_rows", {rows, n}, std::move(out), track, [parts](const std::vector<double>& g) {
    std::size_t off = 0;
    for (auto& p : parts) {
      if (p.requires_grad()) {
        auto& gp = p.grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
      }
      off += p.numel();
    }
  });
}

// Joins matrices side by side along the last axis; vectors are joined end to end.
inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const bool vec = parts.front().rank() == 1;
  const std::size_t m = vec ? 1 : parts.front().dim(0);
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const auto& p : parts) {
    if ((p.rank() == 1) != vec || (!vec && (p.rank() != 2 || p.dim(0) != m)))
      throw DimensionError("concat_cols: incompatible part " + shape_str(p.shape()));
    widths.push_back(detail::last_dim(p));
    total += widths.back();
  }
  std::vector<double> out(m * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < widths[k]; ++j) out[i * total + off + j] = parts[k][i * widths[k] + j];
    off += widths[k];
  }
  Shape shape = vec ? Shape{total} : Shape{m, total};
  bool track = detail::tracking(parts);
  return detail::finish("concat_cols", std::move(shape), std::move(out), track,
                        [parts, widths, m, total](const std::vector<double>& g) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < parts.size(); ++k) {
                            if (parts[k].requires_grad()) {
                              auto& gp = parts[k].grad_buffer();
                              for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < widths[k]; ++j)
                                  gp[i * widths[k] + j] += g[i * total + off + j];
                            }
                            off += widths[k];
                          }
                        });
}

// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_rows");
  if (begin >= end || end > x.dim(0))
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  const std::size_t n = x.dim(1);
  std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * n),
                          x.data().begin() + static_cast<std::ptrdiff_t>(end * n));
  bool track = detail::tracking({&x});
  return detail::finish("slice_rows", {end - begin, n}, std::move(out), track,
                        [x, begin, n](const std::vector<double>& g) {
                          auto& gx = x.grad_buffer();
                          for (std::size_t i = 0; i < g.size(); ++i) gx[begin * n + i] += g[i];
                        });
}

// Columns [begin, end) of a matrix.
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_matrix(x, "slice_cols");
  if (begin >= end || end > x.dim(1))
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") outside " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1), w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x[i * n + begin + j];
  bool track = detail::tracking({&x});
  return detail::finish("slice_cols", {m, w}, std::move(out), track,
                        [x, begin, m, n, w](const std::vector<double>& g) {
                          auto& gx = x.grad_buffer();
                          for (std::size_t i = 0; i < m; ++i)
                            for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += g[i * w + j];
                        });
}

// Embedding lookup: rows of table[v×n] selected by index.
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& index) {
  detail::require_matrix(table, "gather_rows");
  const std::size_t n = table.dim(1);
  if (index.empty()) throw DimensionError("gather_rows: empty index");
  std::vector<double> out(index.size() * n);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= table.dim(0))
      throw DimensionError("gather_rows: index " + std::to_string(index[r]) + " outside " + shape_str(table.shape()));
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(index[r] * n), n, out.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  bool track = detail::tracking({&table});
  return detail::finish("gather_rows", {index.size(), n}, std::move(out), track,
                        [table, index, n](const std::vector<double>& g) {
                          auto& gt = table.grad_buffer();
                          for (std::size_t r = 0; r < index.size(); ++r)
                            for (std::size_t j = 0; j < n; ++j) gt[index[r] * n + j] += g[r * n + j];
                        });
}

// x[b×c] → [b], picking column labels[i] from row i.
inline Tensor pick(const Tensor& x, const std::vector<std::size_t>& labels) {
  detail::require_matrix(x, "pick");
  const std::size_t b = x.dim(0), c = x.dim(1);
  if (labels.size() != b) throw DimensionError("pick: label count does not match " + shape_str(x.shape()));
  std::vector<double> out(b);
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] >= c) throw std::out_of_range("pick: label " + std::to_string(labels[i]) + " out of range");
    out[i] = x[i * c + labels[i]];
  }
  bool track = detail::tracking({&x});
  return detail::finish("pick", {b}, std::move(out), track, [x, labels, c](const std::vector<double>& g) {
    auto& gx = x.grad_buffer();
    for (std::size_t i = 0; i < labels.size(); ++i) gx[i * c + labels[i]] += g[i];
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  bool track = detail::tracking({&x});
  return detail::finish("sum", {1}, {s}, track, [x](const std::vector<double>& g) {
    auto& gx = x.grad_buffer();
    for (auto& v : gx) v += g[0];
  });
}

inline Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  bool track = detail::tracking({&x});
  return detail::finish("mean", {1}, {s * inv}, track, [x, inv](const std::vector<double>& g) {
    auto& gx = x.grad_buffer();
    for (auto& v : gx) v += g[0] * inv;
  });
}

// Non-overlapping P×P patches of image[C×H×W], one flattened row per patch in
// raster order, each row laid out channel-major (c, dy, dx).
inline Tensor extract_patches(const Tensor& image, std::size_t patch) {
  if (image.rank() != 3) throw DimensionError("extract_patches: expected C×H×W, got " + shape_str(image.shape()));
  const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (patch == 0 || h % patch != 0 || w % patch != 0)
    throw DimensionError("extract_patches: image " + shape_str(image.shape()) + " not divisible by patch " +
                         std::to_string(patch));
  const std::size_t gh = h / patch, gw = w / patch, width = c * patch * patch;
  std::vector<std::size_t> src(gh * gw * width);
  for (std::size_t py = 0; py < gh; ++py)
    for (std::size_t px = 0; px < gw; ++px)
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t dy = 0; dy < patch; ++dy)
          for (std::size_t dx = 0; dx < patch; ++dx) {
            const std::size_t row = py * gw + px;
            const std::size_t col = (ch * patch + dy) * patch + dx;
            src[row * width + col] = (ch * h + py * patch + dy) * w + px * patch + dx;
          }
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = image[src[i]];
  bool track = detail::tracking({&image});
  return detail::finish("extract_patches", {gh * gw, width}, std::move(out), track,
                        [image, src = std::move(src)](const std::vector<double>& g) {
                          auto& gi = image.grad_buffer();
                          for (std::size_t i = 0; i < src.size(); ++i) gi[src[i]] += g[i];
                        });
}

}  // namespace fedlora::ops
