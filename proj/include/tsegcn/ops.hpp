#pragma once

#include <limits>
#include <vector>

#include "tsegcn/autodiff.hpp"

namespace tsegcn::ag {

/// Add a per-joint bias table: x[B,N,T,C] + pe[N,C].
inline Var add_joint_bias(const Var& x, const Var& pe) {
  const Tensor& xv = x.value();
  const Tensor& pv = pe.value();
  if (xv.rank() != 4 || pv.rank() != 2 || xv.dim(1) != pv.dim(0) || xv.dim(3) != pv.dim(1))
    throw DimensionError("add_joint_bias: " + shape_str(xv.shape()) + " vs " + shape_str(pv.shape()));
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3);
  Tensor out = xv;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) out.at(b, n, t, c) += pv.at(n, c);
  return make_node(std::move(out), {x.node(), pe.node()}, [x = x.node(), pe = pe.node(), B, N, T, C](Node& self) {
    if (x->requires_grad) {
      x->ensure_grad();
      x->grad += self.grad;
    }
    if (pe->requires_grad) {
      pe->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n)
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c) pe->grad.at(n, c) += self.grad.at(b, n, t, c);
    }
  });
}

/// Apply a per-sample joint mixing matrix: out[b,i,t,c] = sum_j z[b,i,j] * x[b,j,t,c].
inline Var topology_apply(const Var& z, const Var& x) {
  const Tensor& zv = z.value();
  const Tensor& xv = x.value();
  if (zv.rank() != 3 || xv.rank() != 4 || zv.dim(0) != xv.dim(0) || zv.dim(1) != xv.dim(1) || zv.dim(2) != xv.dim(1))
    throw DimensionError("topology_apply: " + shape_str(zv.shape()) + " vs " + shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3);
  const std::size_t tc = T * C;
  Tensor out({B, N, T, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i) {
      double* orow = out.data() + (b * N + i) * tc;
      for (std::size_t j = 0; j < N; ++j) {
        const double w = zv.at(b, i, j);
        if (w == 0.0) continue;
        const double* xrow = xv.data() + (b * N + j) * tc;
        for (std::size_t k = 0; k < tc; ++k) orow[k] += w * xrow[k];
      }
    }
  return make_node(std::move(out), {z.node(), x.node()}, [z = z.node(), x = x.node(), B, N, tc](Node& self) {
    if (z->requires_grad) {
      z->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i) {
          const double* grow = self.grad.data() + (b * N + i) * tc;
          for (std::size_t j = 0; j < N; ++j) {
            const double* xrow = x->value.data() + (b * N + j) * tc;
            double acc = 0.0;
            for (std::size_t k = 0; k < tc; ++k) acc += grow[k] * xrow[k];
            z->grad.at(b, i, j) += acc;
          }
        }
    }
    if (x->requires_grad) {
      x->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i) {
          const double* grow = self.grad.data() + (b * N + i) * tc;
          for (std::size_t j = 0; j < N; ++j) {
            const double w = z->value.at(b, i, j);
            if (w == 0.0) continue;
            double* xgrow = x->grad.data() + (b * N + j) * tc;
            for (std::size_t k = 0; k < tc; ++k) xgrow[k] += w * grow[k];
          }
        }
    }
  });
}

/// Slice partition k of a [B,K,N,N] stack -> [B,N,N].
inline Var partition_slice(const Var& z, std::size_t k) {
  const Tensor& zv = z.value();
  if (zv.rank() != 4) throw DimensionError("partition_slice: expected rank-4 input");
  const std::size_t B = zv.dim(0), K = zv.dim(1), N = zv.dim(2);
  if (k >= K) throw DimensionError("partition_slice: index out of range");
  Tensor out({B, N, N});
  const std::size_t nn = N * N;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < nn; ++i) out[b * nn + i] = zv[(b * K + k) * nn + i];
  return make_node(std::move(out), {z.node()}, [z = z.node(), B, K, k, nn](Node& self) {
    z->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < nn; ++i) z->grad[(b * K + k) * nn + i] += self.grad[b * nn + i];
  });
}

/// Assemble the learned topology stack:
///   out[b,s] = react_gain * reactivated[b,s] + calib_gain * calib[b] + free_topo[s]
/// with reactivated [B,K,N,N], calib [B,N,N], free_topo [K,N,N] and both
/// gains 1-element tensors.
inline Var assemble_topology_stack(const Var& reactivated, const Var& calib, const Var& free_topo,
                                   const Var& react_gain, const Var& calib_gain) {
  const Tensor& av = reactivated.value();
  const Tensor& cv = calib.value();
  const Tensor& fv = free_topo.value();
  if (av.rank() != 4 || cv.rank() != 3 || fv.rank() != 3)
    throw DimensionError("assemble_topology_stack: bad ranks");
  const std::size_t B = av.dim(0), K = av.dim(1), N = av.dim(2);
  if (cv.dim(0) != B || cv.dim(1) != N || cv.dim(2) != N || fv.dim(0) != K || fv.dim(1) != N || fv.dim(2) != N)
    throw DimensionError("assemble_topology_stack: shape mismatch");
  const double alpha = react_gain.value()[0];
  const double beta = calib_gain.value()[0];
  const std::size_t nn = N * N;
  Tensor out({B, K, N, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t s = 0; s < K; ++s)
      for (std::size_t i = 0; i < nn; ++i)
        out[(b * K + s) * nn + i] = alpha * av[(b * K + s) * nn + i] + beta * cv[b * nn + i] + fv[s * nn + i];
  return make_node(
      std::move(out), {reactivated.node(), calib.node(), free_topo.node(), react_gain.node(), calib_gain.node()},
      [a = reactivated.node(), c = calib.node(), f = free_topo.node(), ga = react_gain.node(), gb = calib_gain.node(),
       B, K, nn, alpha, beta](Node& self) {
        if (a->requires_grad) {
          a->ensure_grad();
          for (std::size_t i = 0; i < self.grad.size(); ++i) a->grad[i] += alpha * self.grad[i];
        }
        if (c->requires_grad) {
          c->ensure_grad();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < K; ++s)
              for (std::size_t i = 0; i < nn; ++i) c->grad[b * nn + i] += beta * self.grad[(b * K + s) * nn + i];
        }
        if (f->requires_grad) {
          f->ensure_grad();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < K; ++s)
              for (std::size_t i = 0; i < nn; ++i) f->grad[s * nn + i] += self.grad[(b * K + s) * nn + i];
        }
        if (ga->requires_grad) {
          ga->ensure_grad();
          double acc = 0.0;
          for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * a->value[i];
          ga->grad[0] += acc;
        }
        if (gb->requires_grad) {
          gb->ensure_grad();
          double acc = 0.0;
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t s = 0; s < K; ++s)
              for (std::size_t i = 0; i < nn; ++i) acc += self.grad[(b * K + s) * nn + i] * c->value[b * nn + i];
          gb->grad[0] += acc;
        }
      });
}

/// Negative squared Euclidean distance between joint embeddings:
/// out[b,i,j] = -|e_i - e_j|^2 for e = x[b], x: [B,N,C].
inline Var neg_pairwise_sqdist(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw DimensionError("neg_pairwise_sqdist: expected [B,N,C], got " + shape_str(xv.shape()));
  const std::size_t B = xv.dim(0), N = xv.dim(1), C = xv.dim(2);
  Tensor out({B, N, N});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        if (j == i) continue;  // diagonal stays exactly 0
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
          const double d = xv.at(b, i, c) - xv.at(b, j, c);
          acc += d * d;
        }
        out.at(b, i, j) = -acc;
      }
  return make_node(std::move(out), {x.node()}, [x = x.node(), B, N, C](Node& self) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j) {
          if (j == i) continue;
          const double g = self.grad.at(b, i, j);
          if (g == 0.0) continue;
          for (std::size_t c = 0; c < C; ++c) {
            const double d = x->value.at(b, i, c) - x->value.at(b, j, c);
            x->grad.at(b, i, c) += -2.0 * d * g;
            x->grad.at(b, j, c) += 2.0 * d * g;
          }
        }
  });
}

/// Depthwise temporal convolution with zero padding:
///   out[b,n,t',c] = sum_r w[c,r] * x[b,n, t'*stride + (r - (R-1)/2)*dilation, c]
/// Output length is ceil(T / stride); out-of-range taps contribute zero.
inline Var depthwise_time_conv(const Var& x, const Var& w, std::size_t stride, std::size_t dilation) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 2 || xv.dim(3) != wv.dim(0))
    throw DimensionError("depthwise_time_conv: " + shape_str(xv.shape()) + " vs " + shape_str(wv.shape()));
  if (stride < 1 || dilation < 1) throw ConfigError("depthwise_time_conv: stride and dilation must be >= 1");
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3), R = wv.dim(1);
  const std::size_t t_out = (T + stride - 1) / stride;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(R - 1) / 2;
  Tensor out({B, N, t_out, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t to = 0; to < t_out; ++to)
        for (std::size_t r = 0; r < R; ++r) {
          const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to * stride) +
                                    (static_cast<std::ptrdiff_t>(r) - half) * static_cast<std::ptrdiff_t>(dilation);
          if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
          for (std::size_t c = 0; c < C; ++c)
            out.at(b, n, to, c) += wv.at(c, r) * xv.at(b, n, static_cast<std::size_t>(ti), c);
        }
  return make_node(std::move(out), {x.node(), w.node()},
                   [x = x.node(), w = w.node(), B, N, T, C, R, t_out, half, stride, dilation](Node& self) {
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t n = 0; n < N; ++n)
                         for (std::size_t to = 0; to < t_out; ++to)
                           for (std::size_t r = 0; r < R; ++r) {
                             const std::ptrdiff_t ti =
                                 static_cast<std::ptrdiff_t>(to * stride) +
                                 (static_cast<std::ptrdiff_t>(r) - half) * static_cast<std::ptrdiff_t>(dilation);
                             if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
                             const std::size_t tu = static_cast<std::size_t>(ti);
                             if (x->requires_grad) {
                               x->ensure_grad();
                               for (std::size_t c = 0; c < C; ++c)
                                 x->grad.at(b, n, tu, c) += w->value.at(c, r) * self.grad.at(b, n, to, c);
                             }
                             if (w->requires_grad) {
                               w->ensure_grad();
                               for (std::size_t c = 0; c < C; ++c)
                                 w->grad.at(c, r) += x->value.at(b, n, tu, c) * self.grad.at(b, n, to, c);
                             }
                           }
                   });
}

/// Weighted graph readout: out[b,t,c] = (1/N) * sum_n w[n] * y[b,n,t,c].
inline Var weighted_readout(const Var& y, const Var& w) {
  const Tensor& yv = y.value();
  const Tensor& wv = w.value();
  if (yv.rank() != 4 || wv.rank() != 1 || wv.dim(0) != yv.dim(1))
    throw DimensionError("weighted_readout: " + shape_str(yv.shape()) + " vs " + shape_str(wv.shape()));
  const std::size_t B = yv.dim(0), N = yv.dim(1), T = yv.dim(2), C = yv.dim(3);
  const double inv_n = 1.0 / static_cast<double>(N);
  Tensor out({B, T, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n) {
      const double wn = wv[n] * inv_n;
      for (std::size_t t = 0; t < T; ++t)
        for (std::size_t c = 0; c < C; ++c) out.at(b, t, c) += wn * yv.at(b, n, t, c);
    }
  return make_node(std::move(out), {y.node(), w.node()}, [y = y.node(), w = w.node(), B, N, T, C, inv_n](Node& self) {
    if (y->requires_grad) {
      y->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n) {
          const double wn = w->value[n] * inv_n;
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c) y->grad.at(b, n, t, c) += wn * self.grad.at(b, t, c);
        }
    }
    if (w->requires_grad) {
      w->ensure_grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t n = 0; n < N; ++n) {
          double acc = 0.0;
          for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < C; ++c) acc += y->value.at(b, n, t, c) * self.grad.at(b, t, c);
          w->grad[n] += acc * inv_n;
        }
    }
  });
}

/// One deformable tap: sample y [B,N,T,C] at q = clamp(t + grid + p[b,t,r], 0, T-1)
/// with linear interpolation, scaled by the modulation m[b,t,r]. The offset
/// gradient is the interpolation slope; it is zero where the position clamps.
inline Var deform_sample_tap(const Var& y, const Var& p, const Var& m, std::size_t r, std::ptrdiff_t grid) {
  const Tensor& yv = y.value();
  const Tensor& pv = p.value();
  const Tensor& mv = m.value();
  if (yv.rank() != 4 || pv.rank() != 3 || mv.rank() != 3)
    throw DimensionError("deform_sample_tap: bad ranks");
  const std::size_t B = yv.dim(0), N = yv.dim(1), T = yv.dim(2), C = yv.dim(3);
  if (pv.dim(0) != B || pv.dim(1) != T || mv.dim(0) != B || mv.dim(1) != T || r >= pv.dim(2))
    throw DimensionError("deform_sample_tap: offset field shape mismatch");

  const double t_max = static_cast<double>(T - 1);
  Tensor out({B, N, T, C});
  // Cached per (b,t): lower index, fraction, clamped flag.
  std::vector<std::size_t> lo_idx(B * T);
  std::vector<double> frac(B * T);
  std::vector<char> clamped(B * T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) {
      const double raw = static_cast<double>(t) + static_cast<double>(grid) + pv.at(b, t, r);
      double q = raw;
      char cl = 0;
      if (q <= 0.0) {
        q = 0.0;
        cl = (raw < 0.0);
      }
      if (q >= t_max) {
        cl |= (raw > t_max);
        q = t_max;
      }
      const double fl = std::floor(q);
      std::size_t lo = static_cast<std::size_t>(fl);
      double f = q - fl;
      if (lo >= T - 1 && T > 1) {
        lo = T - 2;
        f = q - static_cast<double>(lo);
      }
      if (T == 1) {
        lo = 0;
        f = 0.0;
      }
      lo_idx[b * T + t] = lo;
      frac[b * T + t] = f;
      clamped[b * T + t] = cl;
    }
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t t = 0; t < T; ++t) {
        const std::size_t lo = lo_idx[b * T + t];
        const std::size_t hi = (T == 1) ? 0 : lo + 1;
        const double f = frac[b * T + t];
        const double mm = mv.at(b, t, r);
        for (std::size_t c = 0; c < C; ++c)
          out.at(b, n, t, c) = mm * ((1.0 - f) * yv.at(b, n, lo, c) + f * yv.at(b, n, hi, c));
      }
  return make_node(
      std::move(out), {y.node(), p.node(), m.node()},
      [y = y.node(), p = p.node(), m = m.node(), B, N, T, C, r, lo_idx = std::move(lo_idx), frac = std::move(frac),
       clamped = std::move(clamped)](Node& self) {
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t t = 0; t < T; ++t) {
            const std::size_t lo = lo_idx[b * T + t];
            const std::size_t hi = (T == 1) ? 0 : lo + 1;
            const double f = frac[b * T + t];
            const double mm = m->value.at(b, t, r);
            double p_acc = 0.0, m_acc = 0.0;
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t c = 0; c < C; ++c) {
                const double g = self.grad.at(b, n, t, c);
                if (g == 0.0) continue;
                const double v_lo = y->value.at(b, n, lo, c);
                const double v_hi = y->value.at(b, n, hi, c);
                if (y->requires_grad) {
                  y->ensure_grad();
                  y->grad.at(b, n, lo, c) += g * mm * (1.0 - f);
                  y->grad.at(b, n, hi, c) += g * mm * f;
                }
                p_acc += g * mm * (v_hi - v_lo);
                m_acc += g * ((1.0 - f) * v_lo + f * v_hi);
              }
            if (p->requires_grad && !clamped[b * T + t]) {
              p->ensure_grad();
              p->grad.at(b, t, r) += p_acc;
            }
            if (m->requires_grad) {
              m->ensure_grad();
              m->grad.at(b, t, r) += m_acc;
            }
          }
      });
}

/// Temporal max pooling with window size k, given stride, and half-window
/// padding; out-of-range positions are ignored (treated as -inf).
inline Var maxpool_time(const Var& x, std::size_t k, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("maxpool_time: expected rank-4 input");
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3);
  const std::size_t t_out = (T + stride - 1) / stride;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>(k - 1) / 2;
  Tensor out({B, N, t_out, C});
  std::vector<std::size_t> arg(B * N * t_out * C);
  std::size_t flat = 0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t to = 0; to < t_out; ++to)
        for (std::size_t c = 0; c < C; ++c, ++flat) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_t = 0;
          for (std::size_t w = 0; w < k; ++w) {
            const std::ptrdiff_t ti = static_cast<std::ptrdiff_t>(to * stride) + static_cast<std::ptrdiff_t>(w) - half;
            if (ti < 0 || ti >= static_cast<std::ptrdiff_t>(T)) continue;
            const double v = xv.at(b, n, static_cast<std::size_t>(ti), c);
            if (v > best) {
              best = v;
              best_t = static_cast<std::size_t>(ti);
            }
          }
          out[flat] = best;
          arg[flat] = best_t;
        }
  return make_node(std::move(out), {x.node()}, [x = x.node(), B, N, T, C, t_out, arg = std::move(arg)](Node& self) {
    x->ensure_grad();
    std::size_t flat = 0;
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t to = 0; to < t_out; ++to)
          for (std::size_t c = 0; c < C; ++c, ++flat) x->grad.at(b, n, arg[flat], c) += self.grad[flat];
  });
}

/// Temporal subsampling: out[b,n,t',c] = x[b,n,t'*stride,c].
inline Var subsample_time(const Var& x, std::size_t stride) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("subsample_time: expected rank-4 input");
  if (stride == 1) return Var(x.node());
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3);
  const std::size_t t_out = (T + stride - 1) / stride;
  Tensor out({B, N, t_out, C});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t to = 0; to < t_out; ++to)
        for (std::size_t c = 0; c < C; ++c) out.at(b, n, to, c) = xv.at(b, n, to * stride, c);
  return make_node(std::move(out), {x.node()}, [x = x.node(), B, N, C, t_out, stride](Node& self) {
    x->ensure_grad();
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t to = 0; to < t_out; ++to)
          for (std::size_t c = 0; c < C; ++c) x->grad.at(b, n, to * stride, c) += self.grad.at(b, n, to, c);
  });
}

/// Feature standardization over (batch, joints, frames) per channel.
/// Training mode: batch statistics; also reports them so the caller can
/// update running estimates. Biased variance, like the usual batch norm.
inline Var feature_norm_train(const Var& x, const Var& gain, const Var& shift, double eps,
                              std::vector<double>* batch_mean_out = nullptr,
                              std::vector<double>* batch_var_out = nullptr) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("feature_norm_train: expected rank-4 input");
  const std::size_t B = xv.dim(0), N = xv.dim(1), T = xv.dim(2), C = xv.dim(3);
  const std::size_t rows = B * N * T;
  const double inv_rows = 1.0 / static_cast<double>(rows);

  std::vector<double> mean(C, 0.0), var(C, 0.0), inv_std(C, 0.0);
  const double* xd = xv.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) mean[c] += xd[r * C + c];
  for (std::size_t c = 0; c < C; ++c) mean[c] *= inv_rows;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const double d = xd[r * C + c] - mean[c];
      var[c] += d * d;
    }
  for (std::size_t c = 0; c < C; ++c) {
    var[c] *= inv_rows;
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  }
  if (batch_mean_out) *batch_mean_out = mean;
  if (batch_var_out) *batch_var_out = var;

  Tensor out(xv.shape());
  const double* gd = gain.value().data();
  const double* sd = shift.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = gd[c] * (xd[r * C + c] - mean[c]) * inv_std[c] + sd[c];

  return make_node(std::move(out), {x.node(), gain.node(), shift.node()},
                   [x = x.node(), gain = gain.node(), shift = shift.node(), rows, C, mean = std::move(mean),
                    inv_std = std::move(inv_std), inv_rows](Node& self) {
                     const double* gd = self.grad.data();
                     const double* xd = x->value.data();
                     // Per-channel sums of g and g * x_hat.
                     std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
                     for (std::size_t r = 0; r < rows; ++r)
                       for (std::size_t c = 0; c < C; ++c) {
                         const double xh = (xd[r * C + c] - mean[c]) * inv_std[c];
                         sum_g[c] += gd[r * C + c];
                         sum_gx[c] += gd[r * C + c] * xh;
                       }
                     if (gain->requires_grad) {
                       gain->ensure_grad();
                       for (std::size_t c = 0; c < C; ++c) gain->grad[c] += sum_gx[c];
                     }
                     if (shift->requires_grad) {
                       shift->ensure_grad();
                       for (std::size_t c = 0; c < C; ++c) shift->grad[c] += sum_g[c];
                     }
                     if (x->requires_grad) {
                       x->ensure_grad();
                       double* xg = x->grad.data();
                       const double* gv = gain->value.data();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < C; ++c) {
                           const double xh = (xd[r * C + c] - mean[c]) * inv_std[c];
                           xg[r * C + c] += gv[c] * inv_std[c] *
                                            (gd[r * C + c] - inv_rows * sum_g[c] - xh * inv_rows * sum_gx[c]);
                         }
                     }
                   });
}

/// Inference-mode standardization with fixed running statistics.
inline Var feature_norm_eval(const Var& x, const Var& gain, const Var& shift, const std::vector<double>& run_mean,
                             const std::vector<double>& run_var, double eps) {
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw DimensionError("feature_norm_eval: expected rank-4 input");
  const std::size_t C = xv.dim(3);
  const std::size_t rows = xv.size() / C;
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(run_var[c] + eps);
  Tensor out(xv.shape());
  const double* xd = xv.data();
  const double* gd = gain.value().data();
  const double* sd = shift.value().data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = gd[c] * (xd[r * C + c] - run_mean[c]) * inv_std[c] + sd[c];
  return make_node(std::move(out), {x.node(), gain.node(), shift.node()},
                   [x = x.node(), gain = gain.node(), shift = shift.node(), rows, C, run_mean, inv_std](Node& self) {
                     const double* gd = self.grad.data();
                     const double* xd = x->value.data();
                     if (x->requires_grad) {
                       x->ensure_grad();
                       const double* gv = gain->value.data();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < C; ++c) x->grad[r * C + c] += gv[c] * inv_std[c] * gd[r * C + c];
                     }
                     if (gain->requires_grad) {
                       gain->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < C; ++c)
                           gain->grad[c] += gd[r * C + c] * (xd[r * C + c] - run_mean[c]) * inv_std[c];
                     }
                     if (shift->requires_grad) {
                       shift->ensure_grad();
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t c = 0; c < C; ++c) shift->grad[c] += gd[r * C + c];
                     }
                   });
}

/// Mean cross-entropy of logits [B,C] against integer labels, stabilized by
/// max subtraction. Returns a scalar node.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2) throw DimensionError("cross_entropy: expected [B,C] logits, got " + shape_str(lv.shape()));
  const std::size_t B = lv.dim(0), C = lv.dim(1);
  if (labels.size() != B)
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " + std::to_string(B));
  for (std::size_t b = 0; b < B; ++b)
    if (labels[b] >= C)
      throw ConfigError("cross_entropy: label " + std::to_string(labels[b]) + " out of range for " +
                        std::to_string(C) + " classes");

  Tensor probs({B, C});
  double loss = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t arg = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (lv.at(b, c) > lv.at(b, arg)) arg = c;
    const double mx = lv.at(b, arg);
    // the max term contributes exactly exp(0) = 1, so log(sum) = log1p(rest)
    double rest = 0.0;
    for (std::size_t c = 0; c < C; ++c)
      if (c != arg) rest += std::exp(lv.at(b, c) - mx);
    const double log_z = std::log1p(rest);
    const double z = 1.0 + rest;
    for (std::size_t c = 0; c < C; ++c) probs.at(b, c) = std::exp(lv.at(b, c) - mx) / z;
    loss += log_z - (lv.at(b, labels[b]) - mx);
  }
  loss /= static_cast<double>(B);
  return make_node(Tensor::scalar(loss), {logits.node()},
                   [logits = logits.node(), labels, probs = std::move(probs), B, C](Node& self) {
                     logits->ensure_grad();
                     const double g = self.grad[0] / static_cast<double>(B);
                     for (std::size_t b = 0; b < B; ++b)
                       for (std::size_t c = 0; c < C; ++c)
                         logits->grad.at(b, c) += g * (probs.at(b, c) - (labels[b] == c ? 1.0 : 0.0));
                   });
}

}  // namespace tsegcn::ag
