#include "tabaconv/ops.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <limits>
#include <sstream>

namespace tabaconv {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
thread_local bool g_grad_enabled = true;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

template class Tensor<float>;
template class Tensor<double>;

}  // namespace tabaconv

namespace tabaconv::ops {
namespace {

template <typename T>
using Inputs = std::vector<ImplPtr<T>>;

template <typename T, typename Fn>
Tensor<T> finish(Shape shape, std::vector<T> data, std::initializer_list<Tensor<T>> inputs,
                 const char* op, Fn&& backward) {
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::move(data));
  if (!GradMode::enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = op;
  for (const auto& in : inputs) node->inputs.push_back(in.impl());
  node->backward = std::forward<Fn>(backward);
  out.impl()->requires_grad = true;
  out.impl()->node = std::move(node);
  return out;
}

template <typename T>
inline void axpy(T* __restrict y, const T* __restrict x, T alpha, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

// Result shape of a trailing broadcast of a and b.
template <typename T>
Shape broadcast_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa == sb) return sa;
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (b.numel() == 1 || is_suffix(sb, sa)) return sa;
  if (a.numel() == 1 || is_suffix(sa, sb)) return sb;
  throw DimensionError(std::string(op) + ": shapes " + shape_str(sa) + " and " + shape_str(sb) +
                       " are not trailing-broadcastable");
}

// x[.., m, n] -> x[.., n, m] on raw buffers.
template <typename T>
void transpose_block(const T* src, T* dst, std::size_t m, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
}

}  // namespace

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() < 2 || b.dim() < 2) {
    throw DimensionError("matmul: operands must be at least 2-D, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.size(a.dim() - 2);
  const std::size_t p = a.size(a.dim() - 1);
  const std::size_t pb = b.size(b.dim() - 2);
  const std::size_t n = b.size(b.dim() - 1);
  const bool shared_b = b.dim() == 2;
  const bool leading_ok =
      shared_b || (a.dim() == b.dim() && std::equal(a.shape().begin(), a.shape().end() - 2,
                                                    b.shape().begin()));
  if (p != pb || !leading_ok) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * p);
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(batch * m * n, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  // With a shared right operand the batch folds into the row count.
  const std::size_t rows = shared_b ? batch * m : m;
  const std::size_t nb = shared_b ? 1 : batch;
  for (std::size_t s = 0; s < nb; ++s) {
    const T* As = A + s * rows * p;
    const T* Bs = B + s * p * n;
    T* Cs = out.data() + s * rows * n;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t k = 0; k < p; ++k) {
        const T av = As[i * p + k];
        if (av != T(0)) axpy(Cs + i * n, Bs + k * n, av, n);
      }
  }
  return finish<T>(std::move(out_shape), std::move(out), {a, b}, "matmul",
                   [rows, p, n, nb](const TensorImpl<T>& o, const Inputs<T>& in) {
                     const T* G = o.grad.data();
                     TensorImpl<T>& ta = *in[0];
                     TensorImpl<T>& tb = *in[1];
                     std::vector<T> bt(p * n);
                     for (std::size_t s = 0; s < nb; ++s) {
                       const T* Gs = G + s * rows * n;
                       if (ta.requires_grad) {
                         // dA = G · Bᵀ, row-wise axpy over the transposed B.
                         transpose_block(tb.data.data() + s * p * n, bt.data(), p, n);
                         T* dA = ta.grad_buffer().data() + s * rows * p;
                         for (std::size_t i = 0; i < rows; ++i)
                           for (std::size_t j = 0; j < n; ++j) {
                             const T g = Gs[i * n + j];
                             if (g != T(0)) axpy(dA + i * p, bt.data() + j * p, g, p);
                           }
                       }
                       if (tb.requires_grad) {
                         // dB = Aᵀ · G
                         const T* As = ta.data.data() + s * rows * p;
                         T* dB = tb.grad_buffer().data() + s * p * n;
                         for (std::size_t i = 0; i < rows; ++i)
                           for (std::size_t k = 0; k < p; ++k) {
                             const T av = As[i * p + k];
                             if (av != T(0)) axpy(dB + k * n, Gs + i * n, av, n);
                           }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
  const std::size_t nd = x.dim();
  if (axes.size() != nd) {
    throw DimensionError("permute: " + std::to_string(axes.size()) + " axes for tensor " +
                         shape_str(x.shape()));
  }
  std::vector<bool> seen(nd, false);
  for (std::size_t ax : axes) {
    if (ax >= nd || seen[ax]) throw DimensionError("permute: invalid axis order");
    seen[ax] = true;
  }
  Shape out_shape(nd);
  for (std::size_t i = 0; i < nd; ++i) out_shape[i] = x.size(axes[i]);
  std::vector<std::size_t> in_stride(nd, 1);
  for (std::size_t i = nd; i-- > 1;) in_stride[i - 1] = in_stride[i] * x.size(i);

  const std::size_t total = x.numel();
  auto source = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(nd, 0);
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < nd; ++i) src += idx[i] * in_stride[axes[i]];
    (*source)[o] = src;
    for (std::size_t i = nd; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<T> out(total);
  const auto& xd = x.values();
  for (std::size_t o = 0; o < total; ++o) out[o] = xd[(*source)[o]];
  return finish<T>(std::move(out_shape), std::move(out), {x}, "permute",
                   [source](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t i = 0; i < source->size(); ++i) gx[(*source)[i]] += o.grad[i];
                   });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.dim() < 2) throw DimensionError("transpose_last2: tensor " + shape_str(x.shape()));
  std::vector<std::size_t> axes(x.dim());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[x.dim() - 1], axes[x.dim() - 2]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return finish<T>(std::move(shape), x.values(), {x}, "reshape",
                   [](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                   });
}

template <typename T>
Tensor<T> conv1d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Padding padding) {
  if (w.dim() != 3) throw DimensionError("conv1d: kernel must be [k,F_in,F_c], got " + shape_str(w.shape()));
  const std::size_t k = w.size(0);
  if (k % 2 == 0) throw ConfigError("conv1d: kernel size must be odd, got " + std::to_string(k));
  if (x.dim() != 3 || x.size(2) != w.size(1)) {
    throw DimensionError("conv1d: input " + shape_str(x.shape()) + " does not match kernel " +
                         shape_str(w.shape()));
  }
  const std::size_t fc = w.size(2);
  if (bias.numel() != fc) {
    throw DimensionError("conv1d: bias " + shape_str(bias.shape()) + " for " + std::to_string(fc) +
                         " output channels");
  }
  const std::size_t nb = x.size(0), nt = x.size(1), fin = x.size(2);
  const auto half = static_cast<std::ptrdiff_t>(k / 2);
  // source[t*k + d] = input time index for output t and tap d, or -1 for zero.
  auto source = std::make_shared<std::vector<std::ptrdiff_t>>(nt * k);
  for (std::size_t t = 0; t < nt; ++t)
    for (std::size_t d = 0; d < k; ++d) {
      std::ptrdiff_t s = static_cast<std::ptrdiff_t>(t + d) - half;
      const auto len = static_cast<std::ptrdiff_t>(nt);
      if (padding == Padding::kCircular) {
        s = ((s % len) + len) % len;
      } else if (s < 0 || s >= len) {
        s = -1;
      }
      (*source)[t * k + d] = s;
    }

  std::vector<T> out(nb * nt * fc);
  const T* X = x.data().data();
  const T* W = w.data().data();
  const T* Bv = bias.data().data();
  for (std::size_t b = 0; b < nb; ++b)
    for (std::size_t t = 0; t < nt; ++t) {
      T* orow = out.data() + (b * nt + t) * fc;
      std::copy(Bv, Bv + fc, orow);
      for (std::size_t d = 0; d < k; ++d) {
        const std::ptrdiff_t s = (*source)[t * k + d];
        if (s < 0) continue;
        const T* xrow = X + (b * nt + static_cast<std::size_t>(s)) * fin;
        for (std::size_t f = 0; f < fin; ++f)
          if (xrow[f] != T(0)) axpy(orow, W + (d * fin + f) * fc, xrow[f], fc);
      }
    }
  return finish<T>(
      {nb, nt, fc}, std::move(out), {x, w, bias}, "conv1d",
      [source, nb, nt, fin, fc, k](const TensorImpl<T>& o, const Inputs<T>& in) {
        TensorImpl<T>& tx = *in[0];
        TensorImpl<T>& tw = *in[1];
        TensorImpl<T>& tbias = *in[2];
        const T* G = o.grad.data();
        if (tbias.requires_grad) {
          auto& gb = tbias.grad_buffer();
          for (std::size_t r = 0; r < nb * nt; ++r) axpy(gb.data(), G + r * fc, T(1), fc);
        }
        std::vector<T> wt;
        if (tx.requires_grad) {
          // wt[d][c][f] so the input gradient is an axpy over f.
          wt.resize(k * fc * fin);
          for (std::size_t d = 0; d < k; ++d)
            transpose_block(tw.data.data() + d * fin * fc, wt.data() + d * fc * fin, fin, fc);
        }
        T* gx = tx.requires_grad ? tx.grad_buffer().data() : nullptr;
        T* gw = tw.requires_grad ? tw.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < nb; ++b)
          for (std::size_t t = 0; t < nt; ++t) {
            const T* grow = G + (b * nt + t) * fc;
            for (std::size_t d = 0; d < k; ++d) {
              const std::ptrdiff_t s = (*source)[t * k + d];
              if (s < 0) continue;
              const std::size_t src = (b * nt + static_cast<std::size_t>(s)) * fin;
              if (gx) {
                for (std::size_t c = 0; c < fc; ++c)
                  if (grow[c] != T(0)) axpy(gx + src, wt.data() + (d * fc + c) * fin, grow[c], fin);
              }
              if (gw) {
                const T* xrow = tx.data.data() + src;
                for (std::size_t f = 0; f < fin; ++f)
                  if (xrow[f] != T(0)) axpy(gw + (d * fin + f) * fc, grow, xrow[f], fc);
              }
            }
          }
      });
}

template <typename T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  const std::size_t d = x.shape().back();
  const std::size_t rows = d ? x.numel() / d : 0;
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X + r * d;
    T* yr = out.data() + r * d;
    const T mx = *std::max_element(xr, xr + d);
    T total = 0;
    for (std::size_t i = 0; i < d; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      total += yr[i];
    }
    for (std::size_t i = 0; i < d; ++i) yr[i] /= total;
  }
  return finish<T>(x.shape(), std::move(out), {x}, "softmax",
                   [rows, d](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* y = o.data.data() + r * d;
                       const T* g = o.grad.data() + r * d;
                       T dot = 0;
                       for (std::size_t i = 0; i < d; ++i) dot += g[i] * y[i];
                       for (std::size_t i = 0; i < d; ++i) gx[r * d + i] += y[i] * (g[i] - dot);
                     }
                   });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     double eps) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw DimensionError("layer_norm: gain/bias of " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " for input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  const T* X = x.data().data();
  const T* Gm = gamma.data().data();
  const T* Bt = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = X + r * d;
    T mu = 0;
    for (std::size_t i = 0; i < d; ++i) mu += xr[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
    var /= static_cast<T>(d);
    const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[r] = inv;
    for (std::size_t i = 0; i < d; ++i) {
      const T h = (xr[i] - mu) * inv;
      (*xhat)[r * d + i] = h;
      out[r * d + i] = Gm[i] * h + Bt[i];
    }
  }
  return finish<T>(x.shape(), std::move(out), {x, gamma, beta}, "layer_norm",
                   [xhat, inv_std, rows, d](const TensorImpl<T>& o, const Inputs<T>& in) {
                     TensorImpl<T>& tx = *in[0];
                     TensorImpl<T>& tg = *in[1];
                     TensorImpl<T>& tb = *in[2];
                     const T* G = o.grad.data();
                     if (tg.requires_grad || tb.requires_grad) {
                       T* gg = tg.requires_grad ? tg.grad_buffer().data() : nullptr;
                       T* gb = tb.requires_grad ? tb.grad_buffer().data() : nullptr;
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < d; ++i) {
                           if (gg) gg[i] += G[r * d + i] * (*xhat)[r * d + i];
                           if (gb) gb[i] += G[r * d + i];
                         }
                     }
                     if (!tx.requires_grad) return;
                     auto& gx = tx.grad_buffer();
                     const T* gamma_v = tg.data.data();
                     std::vector<T> dh(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       T sum_dh = 0, sum_dh_h = 0;
                       for (std::size_t i = 0; i < d; ++i) {
                         dh[i] = G[r * d + i] * gamma_v[i];
                         sum_dh += dh[i];
                         sum_dh_h += dh[i] * (*xhat)[r * d + i];
                       }
                       const T scale_r = (*inv_std)[r] / static_cast<T>(d);
                       for (std::size_t i = 0; i < d; ++i) {
                         gx[r * d + i] += scale_r * (static_cast<T>(d) * dh[i] - sum_dh -
                                                     (*xhat)[r * d + i] * sum_dh_h);
                       }
                     }
                   });
}

namespace {

template <typename T>
Tensor<T> add_impl(const Tensor<T>& a, const Tensor<T>& b, T sign_b, const char* op) {
  Shape shape = broadcast_shape(a, b, op);
  const std::size_t total = shape_numel(shape);
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<T> out(total);
  const T* A = a.data().data();
  const T* B = b.data().data();
  if (na == total && nb == total) {
    for (std::size_t i = 0; i < total; ++i) out[i] = A[i] + sign_b * B[i];
  } else {
    for (std::size_t i = 0; i < total; ++i) out[i] = A[i % na] + sign_b * B[i % nb];
  }
  return finish<T>(std::move(shape), std::move(out), {a, b}, op,
                   [na, nb, sign_b](const TensorImpl<T>& o, const Inputs<T>& in) {
                     const std::size_t total_o = o.grad.size();
                     if (in[0]->requires_grad) {
                       auto& ga = in[0]->grad_buffer();
                       for (std::size_t i = 0; i < total_o; ++i) ga[i % na] += o.grad[i];
                     }
                     if (in[1]->requires_grad) {
                       auto& gb = in[1]->grad_buffer();
                       for (std::size_t i = 0; i < total_o; ++i) gb[i % nb] += sign_b * o.grad[i];
                     }
                   });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return add_impl(a, b, T(1), "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add_impl(a, b, T(-1), "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  Shape shape = broadcast_shape(a, b, "mul");
  const std::size_t total = shape_numel(shape);
  const std::size_t na = a.numel(), nb = b.numel();
  std::vector<T> out(total);
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < total; ++i) out[i] = A[i % na] * B[i % nb];
  return finish<T>(std::move(shape), std::move(out), {a, b}, "mul",
                   [na, nb](const TensorImpl<T>& o, const Inputs<T>& in) {
                     const std::size_t total_o = o.grad.size();
                     const auto& av = in[0]->data;
                     const auto& bv = in[1]->data;
                     if (in[0]->requires_grad) {
                       auto& ga = in[0]->grad_buffer();
                       for (std::size_t i = 0; i < total_o; ++i) ga[i % na] += o.grad[i] * bv[i % nb];
                     }
                     if (in[1]->requires_grad) {
                       auto& gb = in[1]->grad_buffer();
                       for (std::size_t i = 0; i < total_o; ++i) gb[i % nb] += o.grad[i] * av[i % na];
                     }
                   });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  const T f = static_cast<T>(factor);
  std::vector<T> out(x.values());
  for (auto& v : out) v *= f;
  return finish<T>(x.shape(), std::move(out), {x}, "scale",
                   [f](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += f * o.grad[i];
                   });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) v = v > T(0) ? v : T(0);
  return finish<T>(x.shape(), std::move(out), {x}, "relu",
                   [](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t i = 0; i < gx.size(); ++i)
                       if (o.data[i] > T(0)) gx[i] += o.grad[i];
                   });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.values());
  for (auto& v : out) {
    v = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return finish<T>(x.shape(), std::move(out), {x}, "sigmoid",
                   [](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t i = 0; i < gx.size(); ++i)
                       gx[i] += o.grad[i] * o.data[i] * (T(1) - o.data[i]);
                   });
}

template <typename T>
Tensor<T> concat_lastdim(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.dim() != b.dim() || a.dim() == 0 ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw DimensionError("concat_lastdim: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ outside the last axis");
  }
  const std::size_t da = a.shape().back(), db = b.shape().back(), dc = da + db;
  const std::size_t rows = da + db ? (a.numel() + b.numel()) / dc : 0;
  Shape shape = a.shape();
  shape.back() = dc;
  std::vector<T> out(rows * dc);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a.data().data() + r * da, da, out.data() + r * dc);
    std::copy_n(b.data().data() + r * db, db, out.data() + r * dc + da);
  }
  return finish<T>(std::move(shape), std::move(out), {a, b}, "concat",
                   [rows, da, db, dc](const TensorImpl<T>& o, const Inputs<T>& in) {
                     if (in[0]->requires_grad) {
                       auto& ga = in[0]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < da; ++i) ga[r * da + i] += o.grad[r * dc + i];
                     }
                     if (in[1]->requires_grad) {
                       auto& gb = in[1]->grad_buffer();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t i = 0; i < db; ++i) gb[r * db + i] += o.grad[r * dc + da + i];
                     }
                   });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.dim()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.size(i);
  for (std::size_t i = axis + 1; i < x.dim(); ++i) inner *= x.size(i);
  const std::size_t n = x.size(axis);
  Shape shape;
  for (std::size_t i = 0; i < x.dim(); ++i)
    if (i != axis) shape.push_back(x.size(i));
  if (shape.empty()) shape.push_back(1);
  std::vector<T> out(outer * inner, T(0));
  const T* X = x.data().data();
  const T inv = T(1) / static_cast<T>(n);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < n; ++j) axpy(out.data() + o * inner, X + (o * n + j) * inner, T(1), inner);
    for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] *= inv;
  }
  return finish<T>(std::move(shape), std::move(out), {x}, "mean_axis",
                   [outer, inner, n, inv](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t a = 0; a < outer; ++a)
                       for (std::size_t j = 0; j < n; ++j)
                         axpy(gx.data() + (a * n + j) * inner, o.grad.data() + a * inner, inv, inner);
                   });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = 0;
  for (T v : x.data()) total += v;
  return finish<T>({1}, {total}, {x}, "sum", [](const TensorImpl<T>& o, const Inputs<T>& in) {
    auto& gx = in[0]->grad_buffer();
    for (auto& g : gx) g += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.numel() == 0) return Tensor<T>::scalar(T(0));
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::int64_t> rows) {
  if (x.dim() != 2) throw DimensionError("gather_rows: table must be 2-D, got " + shape_str(x.shape()));
  const std::size_t nrows = x.size(0), d = x.size(1);
  auto idx = std::make_shared<std::vector<std::int64_t>>(rows.begin(), rows.end());
  std::vector<T> out(idx->size() * d);
  for (std::size_t i = 0; i < idx->size(); ++i) {
    const std::int64_t r = (*idx)[i];
    if (r < 0 || static_cast<std::size_t>(r) >= nrows) {
      throw IndexError("gather_rows: index " + std::to_string(r) + " outside table of " +
                       std::to_string(nrows) + " rows");
    }
    std::copy_n(x.data().data() + static_cast<std::size_t>(r) * d, d, out.data() + i * d);
  }
  return finish<T>({idx->size(), d}, std::move(out), {x}, "gather_rows",
                   [idx, d](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     for (std::size_t i = 0; i < idx->size(); ++i)
                       axpy(gx.data() + static_cast<std::size_t>((*idx)[i]) * d, o.grad.data() + i * d,
                            T(1), d);
                   });
}

template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const std::int64_t> targets) {
  if (logits.dim() != 2 || logits.size(0) != targets.size()) {
    throw DimensionError("cross_entropy_sum: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t m = logits.size(0), v = logits.size(1);
  auto probs = std::make_shared<std::vector<T>>(m * v);
  auto tgt = std::make_shared<std::vector<std::int64_t>>(targets.begin(), targets.end());
  T total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::int64_t t = targets[i];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw IndexError("cross_entropy_sum: target " + std::to_string(t) + " outside " +
                       std::to_string(v) + " classes");
    }
    const T* l = logits.data().data() + i * v;
    const T mx = *std::max_element(l, l + v);
    T z = 0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(l[j] - mx);
    const T lse = mx + std::log(z);
    total += lse - l[t];
    for (std::size_t j = 0; j < v; ++j) (*probs)[i * v + j] = std::exp(l[j] - lse);
  }
  return finish<T>({1}, {total}, {logits}, "cross_entropy",
                   [probs, tgt, m, v](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     const T g = o.grad[0];
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t j = 0; j < v; ++j) gx[i * v + j] += g * (*probs)[i * v + j];
                       gx[i * v + static_cast<std::size_t>((*tgt)[i])] -= g;
                     }
                   });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> labels) {
  if (logits.numel() != labels.size()) {
    throw DimensionError("bce_with_logits: logits " + shape_str(logits.shape()) + " for " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = logits.numel();
  if (n == 0) return Tensor<T>::scalar(T(0));
  auto y = std::make_shared<std::vector<T>>(labels.begin(), labels.end());
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T z = logits[i];
    total += std::max(z, T(0)) - z * labels[i] + std::log1p(std::exp(-std::abs(z)));
  }
  const T inv = T(1) / static_cast<T>(n);
  return finish<T>({1}, {total * inv}, {logits}, "bce_with_logits",
                   [y, inv](const TensorImpl<T>& o, const Inputs<T>& in) {
                     auto& gx = in[0]->grad_buffer();
                     const auto& z = in[0]->data;
                     for (std::size_t i = 0; i < gx.size(); ++i) {
                       const T s = z[i] >= T(0) ? T(1) / (T(1) + std::exp(-z[i]))
                                                : std::exp(z[i]) / (T(1) + std::exp(z[i]));
                       gx[i] += o.grad[0] * inv * (s - (*y)[i]);
                     }
                   });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw ConfigError("dropout: probability must be below 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  std::vector<T> mask(x.numel());
  for (auto& m : mask) m = rng.bernoulli(p) ? T(0) : keep_scale;
  return mul(x, Tensor<T>::from(x.shape(), std::move(mask)));
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  return add(matmul(x, w), b);
}

#define TABACONV_INSTANTIATE_OPS(T)                                                            \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> transpose_last2(const Tensor<T>&);                                        \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);               \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> conv1d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Padding);    \
  template Tensor<T> softmax_lastdim(const Tensor<T>&);                                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double); \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, double);                                          \
  template Tensor<T> relu(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                \
  template Tensor<T> concat_lastdim(const Tensor<T>&, const Tensor<T>&);                       \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::int64_t>);             \
  template Tensor<T> cross_entropy_sum(const Tensor<T>&, std::span<const std::int64_t>);       \
  template Tensor<T> bce_with_logits(const Tensor<T>&, std::span<const T>);                    \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                  \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

TABACONV_INSTANTIATE_OPS(float)
TABACONV_INSTANTIATE_OPS(double)

#undef TABACONV_INSTANTIATE_OPS

}  // namespace tabaconv::ops
