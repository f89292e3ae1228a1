#pragma once

// Dense layer kernels: conv2d, batch/layer norm, activations, bilinear
// resize/sampling, linear maps. Forward and backward are paired free
// functions; backward returns gradients for every differentiable input.
// Layout is row-major NCHW for image batches.

#include <cmath>
#include <cstring>
#include <vector>

#include "traceseg/tensor.hpp"

namespace traceseg {

enum class PadMode { zero, replicate };

template <typename T>
struct Vec2 {
    T x{};
    T y{};
};

namespace detail {

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace detail

// ---------------------------------------------------------------------------
// Padding
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int pad, PadMode mode) {
    if (x.rank() != 4) throw ShapeError("pad2d expects NCHW, got " + shape_str(x.shape));
    if (pad == 0) return x;
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    Tensor<T> out({N, C, Hp, Wp});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = x.ptr() + (static_cast<std::size_t>(n) * C + c) * H * W;
            T* dst = out.ptr() + (static_cast<std::size_t>(n) * C + c) * Hp * Wp;
            for (int py = 0; py < Hp; ++py) {
                if (mode == PadMode::zero) {
                    const int sy = py - pad;
                    if (sy < 0 || sy >= H) continue;  // already zero
                    std::memcpy(dst + static_cast<std::size_t>(py) * Wp + pad,
                                src + static_cast<std::size_t>(sy) * W, sizeof(T) * W);
                } else {
                    const int sy = detail::clampi(py - pad, 0, H - 1);
                    T* drow = dst + static_cast<std::size_t>(py) * Wp;
                    const T* srow = src + static_cast<std::size_t>(sy) * W;
                    for (int px = 0; px < Wp; ++px)
                        drow[px] = srow[detail::clampi(px - pad, 0, W - 1)];
                }
            }
        }
    return out;
}

// Fold gradients w.r.t. a padded tensor back onto the original extent.
// Zero padding crops; replicate padding accumulates each border cell into the
// edge pixel it was copied from.
template <typename T>
Tensor<T> unpad2d_backward(const Tensor<T>& gpad, int pad, PadMode mode, int H, int W) {
    if (pad == 0) return gpad;
    const int N = gpad.dim(0), C = gpad.dim(1), Hp = gpad.dim(2), Wp = gpad.dim(3);
    Tensor<T> gx({N, C, H, W});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = gpad.ptr() + (static_cast<std::size_t>(n) * C + c) * Hp * Wp;
            T* dst = gx.ptr() + (static_cast<std::size_t>(n) * C + c) * H * W;
            if (mode == PadMode::zero) {
                for (int y = 0; y < H; ++y)
                    std::memcpy(dst + static_cast<std::size_t>(y) * W,
                                src + static_cast<std::size_t>(y + pad) * Wp + pad, sizeof(T) * W);
            } else {
                for (int py = 0; py < Hp; ++py) {
                    const int sy = detail::clampi(py - pad, 0, H - 1);
                    const T* srow = src + static_cast<std::size_t>(py) * Wp;
                    T* drow = dst + static_cast<std::size_t>(sy) * W;
                    for (int px = 0; px < Wp; ++px)
                        drow[detail::clampi(px - pad, 0, W - 1)] += srow[px];
                }
            }
        }
    return gx;
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation)
// ---------------------------------------------------------------------------

template <typename T>
void conv2d_check(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d expects NCHW input and OIkk kernel, got " + shape_str(x.shape) +
                         " and " + shape_str(w.shape));
    if (w.dim(1) != x.dim(1))
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape) + " vs kernel " +
                         shape_str(w.shape));
    if (w.dim(2) != w.dim(3) || w.dim(2) % 2 == 0)
        throw ShapeError("conv2d kernel must be square with odd size, got " + shape_str(w.shape));
    if (b.rank() != 1 || b.dim(0) != w.dim(0))
        throw ShapeError("conv2d bias shape mismatch: " + shape_str(b.shape));
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                         int pad, PadMode mode) {
    conv2d_check(x, w, b);
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), k = w.dim(2);
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    if (Ho < 1 || Wo < 1) throw ShapeError("conv2d output would be empty for " + shape_str(x.shape));

    const Tensor<T> xp = pad2d(x, pad, mode);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;
    Tensor<T> y({N, Co, Ho, Wo});

    for (int n = 0; n < N; ++n) {
        const T* xn = xp.ptr() + static_cast<std::size_t>(n) * Ci * Hp * Wp;
        for (int co = 0; co < Co; ++co) {
            T* yc = y.ptr() + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
            const T bias = b[static_cast<std::size_t>(co)];
            for (int i = 0; i < Ho * Wo; ++i) yc[i] = bias;
            for (int ci = 0; ci < Ci; ++ci) {
                const T* xc = xn + static_cast<std::size_t>(ci) * Hp * Wp;
                const T* wk = w.ptr() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wk[ky * k + kx];
                        if (stride == 1) {
                            for (int oy = 0; oy < Ho; ++oy) {
                                const T* xrow = xc + static_cast<std::size_t>(oy + ky) * Wp + kx;
                                T* yrow = yc + static_cast<std::size_t>(oy) * Wo;
                                for (int ox = 0; ox < Wo; ++ox) yrow[ox] += wv * xrow[ox];
                            }
                        } else {
                            for (int oy = 0; oy < Ho; ++oy) {
                                const T* xrow =
                                    xc + static_cast<std::size_t>(oy * stride + ky) * Wp + kx;
                                T* yrow = yc + static_cast<std::size_t>(oy) * Wo;
                                for (int ox = 0; ox < Wo; ++ox) yrow[ox] += wv * xrow[ox * stride];
                            }
                        }
                    }
            }
        }
    }
    return y;
}

template <typename T>
struct Conv2dGrads {
    Tensor<T> gx, gw, gb;
};

template <typename T>
Conv2dGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad,
                               PadMode mode, const Tensor<T>& gy) {
    conv2d_check(x, w, Tensor<T>({w.dim(0)}));
    const int N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int Co = w.dim(0), k = w.dim(2);
    const int Ho = gy.dim(2), Wo = gy.dim(3);
    const int Hp = H + 2 * pad, Wp = W + 2 * pad;

    const Tensor<T> xp = pad2d(x, pad, mode);
    Tensor<T> gxp({N, Ci, Hp, Wp});
    Conv2dGrads<T> g;
    g.gw = Tensor<T>({Co, Ci, k, k});
    g.gb = Tensor<T>({Co});

    for (int n = 0; n < N; ++n) {
        const T* xn = xp.ptr() + static_cast<std::size_t>(n) * Ci * Hp * Wp;
        T* gxn = gxp.ptr() + static_cast<std::size_t>(n) * Ci * Hp * Wp;
        for (int co = 0; co < Co; ++co) {
            const T* gyc = gy.ptr() + (static_cast<std::size_t>(n) * Co + co) * Ho * Wo;
            T gb_acc = T(0);
            for (int i = 0; i < Ho * Wo; ++i) gb_acc += gyc[i];
            g.gb[static_cast<std::size_t>(co)] += gb_acc;
            for (int ci = 0; ci < Ci; ++ci) {
                const T* xc = xn + static_cast<std::size_t>(ci) * Hp * Wp;
                T* gxc = gxn + static_cast<std::size_t>(ci) * Hp * Wp;
                const T* wk = w.ptr() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k;
                T* gwk = g.gw.ptr() + ((static_cast<std::size_t>(co) * Ci + ci) * k) * k;
                for (int ky = 0; ky < k; ++ky)
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wk[ky * k + kx];
                        T gw_acc = T(0);
                        if (stride == 1) {
                            for (int oy = 0; oy < Ho; ++oy) {
                                const T* xrow = xc + static_cast<std::size_t>(oy + ky) * Wp + kx;
                                T* gxrow = gxc + static_cast<std::size_t>(oy + ky) * Wp + kx;
                                const T* grow = gyc + static_cast<std::size_t>(oy) * Wo;
                                for (int ox = 0; ox < Wo; ++ox) {
                                    gw_acc += grow[ox] * xrow[ox];
                                    gxrow[ox] += wv * grow[ox];
                                }
                            }
                        } else {
                            for (int oy = 0; oy < Ho; ++oy) {
                                const T* xrow =
                                    xc + static_cast<std::size_t>(oy * stride + ky) * Wp + kx;
                                T* gxrow =
                                    gxc + static_cast<std::size_t>(oy * stride + ky) * Wp + kx;
                                const T* grow = gyc + static_cast<std::size_t>(oy) * Wo;
                                for (int ox = 0; ox < Wo; ++ox) {
                                    gw_acc += grow[ox] * xrow[ox * stride];
                                    gxrow[ox * stride] += wv * grow[ox];
                                }
                            }
                        }
                        gwk[ky * k + kx] += gw_acc;
                    }
            }
        }
    }
    g.gx = unpad2d_backward(gxp, pad, mode, H, W);
    return g;
}

// ---------------------------------------------------------------------------
// Batch norm (per-channel over N×H×W)
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormCache {
    Tensor<T> mean;     // [C] statistics actually used for normalization
    Tensor<T> invstd;   // [C]
    bool training = true;
};

// Normalizes with biased batch variance in training mode; running stats get
// the momentum update with the unbiased variance (count/(count-1) correction)
// so eval-mode statistics are unbiased estimates.
template <typename T>
Tensor<T> batch_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                             T momentum, T eps, BatchNormCache<T>* cache = nullptr) {
    if (x.rank() != 4) throw ShapeError("batch_norm expects NCHW, got " + shape_str(x.shape));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.dim(0) != C || beta.dim(0) != C || running_mean.dim(0) != C ||
        running_var.dim(0) != C)
        throw ShapeError("batch_norm parameter size mismatch for C=" + std::to_string(C));

    Tensor<T> mean({C}), invstd({C});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t count = static_cast<std::size_t>(N) * plane;

    for (int c = 0; c < C; ++c) {
        T m, v;
        if (training) {
            T sum = T(0), sq = T(0);
            for (int n = 0; n < N; ++n) {
                const T* p = x.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    sum += p[i];
                    sq += p[i] * p[i];
                }
            }
            m = sum / static_cast<T>(count);
            v = sq / static_cast<T>(count) - m * m;
            if (v < T(0)) v = T(0);  // guard against cancellation
            const T unbiased =
                count > 1 ? v * static_cast<T>(count) / static_cast<T>(count - 1) : v;
            running_mean[static_cast<std::size_t>(c)] =
                (T(1) - momentum) * running_mean[static_cast<std::size_t>(c)] + momentum * m;
            running_var[static_cast<std::size_t>(c)] =
                (T(1) - momentum) * running_var[static_cast<std::size_t>(c)] + momentum * unbiased;
        } else {
            m = running_mean[static_cast<std::size_t>(c)];
            v = running_var[static_cast<std::size_t>(c)];
        }
        mean[static_cast<std::size_t>(c)] = m;
        invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(v + eps);
    }

    Tensor<T> y(x.shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T m = mean[static_cast<std::size_t>(c)];
            const T is = invstd[static_cast<std::size_t>(c)];
            const T g = gamma[static_cast<std::size_t>(c)];
            const T bt = beta[static_cast<std::size_t>(c)];
            const T* xr = x.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
            T* yr = y.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) yr[i] = g * (xr[i] - m) * is + bt;
        }

    if (cache) {
        cache->mean = mean;
        cache->invstd = invstd;
        cache->training = training;
    }
    return y;
}

template <typename T>
struct BatchNormGrads {
    Tensor<T> gx, ggamma, gbeta;
};

template <typename T>
BatchNormGrads<T> batch_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma,
                                      const BatchNormCache<T>& cache, const Tensor<T>& gy) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t count = static_cast<std::size_t>(N) * plane;

    BatchNormGrads<T> g;
    g.gx = Tensor<T>(x.shape);
    g.ggamma = Tensor<T>({C});
    g.gbeta = Tensor<T>({C});

    for (int c = 0; c < C; ++c) {
        const T m = cache.mean[static_cast<std::size_t>(c)];
        const T is = cache.invstd[static_cast<std::size_t>(c)];
        const T gm = gamma[static_cast<std::size_t>(c)];
        T sum_g = T(0), sum_gx = T(0);
        for (int n = 0; n < N; ++n) {
            const T* xr = x.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
            const T* gr = gy.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const T xh = (xr[i] - m) * is;
                sum_g += gr[i];
                sum_gx += gr[i] * xh;
            }
        }
        g.gbeta[static_cast<std::size_t>(c)] = sum_g;
        g.ggamma[static_cast<std::size_t>(c)] = sum_gx;

        if (cache.training) {
            const T mg = sum_g / static_cast<T>(count);
            const T mgx = sum_gx / static_cast<T>(count);
            for (int n = 0; n < N; ++n) {
                const T* xr = x.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                const T* gr = gy.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                T* gxr = g.gx.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const T xh = (xr[i] - m) * is;
                    gxr[i] = gm * is * (gr[i] - mg - xh * mgx);
                }
            }
        } else {
            const T scale = gm * is;  // running stats are constants in eval mode
            for (int n = 0; n < N; ++n) {
                const T* gr = gy.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                T* gxr = g.gx.ptr() + (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) gxr[i] = scale * gr[i];
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------
// Layer norm across the channel axis, independently at each (n, h, w)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> layer_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             T eps) {
    if (x.rank() != 4) throw ShapeError("layer_norm expects NCHW, got " + shape_str(x.shape));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.dim(0) != C || beta.dim(0) != C)
        throw ShapeError("layer_norm parameter size mismatch for C=" + std::to_string(C));
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<T> y(x.shape);
    for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
            const T* base = x.ptr() + static_cast<std::size_t>(n) * C * plane + i;
            // two-pass variance: immune to cancellation when the channel
            // spread is much smaller than the channel mean
            T sum = T(0);
            for (int c = 0; c < C; ++c) sum += base[static_cast<std::size_t>(c) * plane];
            const T m = sum / static_cast<T>(C);
            T var = T(0);
            for (int c = 0; c < C; ++c) {
                const T d = base[static_cast<std::size_t>(c) * plane] - m;
                var += d * d;
            }
            var /= static_cast<T>(C);
            const T is = T(1) / std::sqrt(var + eps);
            T* out = y.ptr() + static_cast<std::size_t>(n) * C * plane + i;
            for (int c = 0; c < C; ++c) {
                const std::size_t off = static_cast<std::size_t>(c) * plane;
                out[off] = gamma[static_cast<std::size_t>(c)] * (base[off] - m) * is +
                           beta[static_cast<std::size_t>(c)];
            }
        }
    return y;
}

template <typename T>
struct LayerNormGrads {
    Tensor<T> gx, ggamma, gbeta;
};

template <typename T>
LayerNormGrads<T> layer_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, T eps,
                                      const Tensor<T>& gy) {
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    LayerNormGrads<T> g;
    g.gx = Tensor<T>(x.shape);
    g.ggamma = Tensor<T>({C});
    g.gbeta = Tensor<T>({C});
    for (int n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
            const T* base = x.ptr() + static_cast<std::size_t>(n) * C * plane + i;
            const T* gup = gy.ptr() + static_cast<std::size_t>(n) * C * plane + i;
            // mirror the forward pass's two-pass variance exactly
            T sum = T(0);
            for (int c = 0; c < C; ++c) sum += base[static_cast<std::size_t>(c) * plane];
            const T m = sum / static_cast<T>(C);
            T var = T(0);
            for (int c = 0; c < C; ++c) {
                const T d = base[static_cast<std::size_t>(c) * plane] - m;
                var += d * d;
            }
            var /= static_cast<T>(C);
            const T is = T(1) / std::sqrt(var + eps);

            T mgh = T(0), mghx = T(0);
            for (int c = 0; c < C; ++c) {
                const std::size_t off = static_cast<std::size_t>(c) * plane;
                const T xh = (base[off] - m) * is;
                const T gh = gup[off] * gamma[static_cast<std::size_t>(c)];
                g.ggamma[static_cast<std::size_t>(c)] += gup[off] * xh;
                g.gbeta[static_cast<std::size_t>(c)] += gup[off];
                mgh += gh;
                mghx += gh * xh;
            }
            mgh /= static_cast<T>(C);
            mghx /= static_cast<T>(C);
            T* gxout = g.gx.ptr() + static_cast<std::size_t>(n) * C * plane + i;
            for (int c = 0; c < C; ++c) {
                const std::size_t off = static_cast<std::size_t>(c) * plane;
                const T xh = (base[off] - m) * is;
                const T gh = gup[off] * gamma[static_cast<std::size_t>(c)];
                gxout[off] = is * (gh - mgh - xh * mghx);
            }
        }
    return g;
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
inline T gelu_scalar(T v) {
    const T c = static_cast<T>(0.7978845608);  // sqrt(2/pi), tanh approximation
    const T t = std::tanh(c * (v + static_cast<T>(0.044715) * v * v * v));
    return static_cast<T>(0.5) * v * (T(1) + t);
}

template <typename T>
inline T gelu_grad_scalar(T v) {
    const T c = static_cast<T>(0.7978845608);
    const T inner = c * (v + static_cast<T>(0.044715) * v * v * v);
    const T t = std::tanh(inner);
    const T dinner = c * (T(1) + T(3) * static_cast<T>(0.044715) * v * v);
    return static_cast<T>(0.5) * (T(1) + t) +
           static_cast<T>(0.5) * v * (T(1) - t * t) * dinner;
}

template <typename T>
inline T sigmoid_scalar(T v) {
    if (v >= T(0)) {
        const T e = std::exp(-v);
        return T(1) / (T(1) + e);
    }
    const T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Tensor<T> gelu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = gelu_scalar(x[i]);
    return y;
}

template <typename T>
Tensor<T> gelu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
    Tensor<T> gx(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] = gy[i] * gelu_grad_scalar(x[i]);
    return gx;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
    return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& gy) {
    Tensor<T> gx(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) gx[i] = x[i] > T(0) ? gy[i] : T(0);
    return gx;
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.numel(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

// Backward in terms of the forward output: dσ/dx = σ(1−σ).
template <typename T>
Tensor<T> sigmoid_backward(const Tensor<T>& y, const Tensor<T>& gy) {
    Tensor<T> gx(y.shape);
    for (std::size_t i = 0; i < y.numel(); ++i) gx[i] = gy[i] * y[i] * (T(1) - y[i]);
    return gx;
}

// ---------------------------------------------------------------------------
// Bilinear resize (align-corners=false) and point sampling
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
struct AxisTap {
    int i0, i1;
    T w1;  // weight of i1; weight of i0 is 1-w1
};

template <typename T>
std::vector<AxisTap<T>> resize_taps(int in, int out) {
    std::vector<AxisTap<T>> taps(static_cast<std::size_t>(out));
    const T scale = static_cast<T>(in) / static_cast<T>(out);
    for (int o = 0; o < out; ++o) {
        T s = (static_cast<T>(o) + static_cast<T>(0.5)) * scale - static_cast<T>(0.5);
        if (s < T(0)) s = T(0);
        if (s > static_cast<T>(in - 1)) s = static_cast<T>(in - 1);
        int i0 = static_cast<int>(std::floor(s));
        if (i0 > in - 1) i0 = in - 1;
        const int i1 = i0 + 1 <= in - 1 ? i0 + 1 : in - 1;
        taps[static_cast<std::size_t>(o)] = {i0, i1, s - static_cast<T>(i0)};
    }
    return taps;
}

}  // namespace detail

template <typename T>
Tensor<T> bilinear_resize_forward(const Tensor<T>& x, int out_h, int out_w) {
    if (x.rank() != 4) throw ShapeError("bilinear_resize expects NCHW, got " + shape_str(x.shape));
    if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize target must be positive");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const auto ty = detail::resize_taps<T>(H, out_h);
    const auto tx = detail::resize_taps<T>(W, out_w);
    Tensor<T> y({N, C, out_h, out_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* src = x.ptr() + (static_cast<std::size_t>(n) * C + c) * H * W;
            T* dst = y.ptr() + (static_cast<std::size_t>(n) * C + c) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
                const auto& a = ty[static_cast<std::size_t>(oy)];
                const T* r0 = src + static_cast<std::size_t>(a.i0) * W;
                const T* r1 = src + static_cast<std::size_t>(a.i1) * W;
                T* drow = dst + static_cast<std::size_t>(oy) * out_w;
                for (int ox = 0; ox < out_w; ++ox) {
                    const auto& bx = tx[static_cast<std::size_t>(ox)];
                    const T top = r0[bx.i0] + bx.w1 * (r0[bx.i1] - r0[bx.i0]);
                    const T bot = r1[bx.i0] + bx.w1 * (r1[bx.i1] - r1[bx.i0]);
                    drow[ox] = top + a.w1 * (bot - top);
                }
            }
        }
    return y;
}

template <typename T>
Tensor<T> bilinear_resize_backward(int in_h, int in_w, const Tensor<T>& gy) {
    const int N = gy.dim(0), C = gy.dim(1), Ho = gy.dim(2), Wo = gy.dim(3);
    const auto ty = detail::resize_taps<T>(in_h, Ho);
    const auto tx = detail::resize_taps<T>(in_w, Wo);
    Tensor<T> gx({N, C, in_h, in_w});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            T* dst = gx.ptr() + (static_cast<std::size_t>(n) * C + c) * in_h * in_w;
            const T* src = gy.ptr() + (static_cast<std::size_t>(n) * C + c) * Ho * Wo;
            for (int oy = 0; oy < Ho; ++oy) {
                const auto& a = ty[static_cast<std::size_t>(oy)];
                const T wy1 = a.w1, wy0 = T(1) - a.w1;
                const T* srow = src + static_cast<std::size_t>(oy) * Wo;
                T* r0 = dst + static_cast<std::size_t>(a.i0) * in_w;
                T* r1 = dst + static_cast<std::size_t>(a.i1) * in_w;
                for (int ox = 0; ox < Wo; ++ox) {
                    const auto& bx = tx[static_cast<std::size_t>(ox)];
                    const T g = srow[ox];
                    r0[bx.i0] += wy0 * (T(1) - bx.w1) * g;
                    r0[bx.i1] += wy0 * bx.w1 * g;
                    r1[bx.i0] += wy1 * (T(1) - bx.w1) * g;
                    r1[bx.i1] += wy1 * bx.w1 * g;
                }
            }
        }
    return gx;
}

// Four-corner weights for sampling a map at continuous position p (pixel
// coordinates, x along width). Coordinates are clamped to the valid box, so
// the result is defined for every finite p and exact at integer grid points.
template <typename T>
struct SampleTaps {
    int x0, x1, y0, y1;
    T wx, wy;  // fractional weights of the high corners
};

template <typename T>
SampleTaps<T> sample_taps(int H, int W, Vec2<T> p) {
    T px = p.x, py = p.y;
    if (px < T(0)) px = T(0);
    if (px > static_cast<T>(W - 1)) px = static_cast<T>(W - 1);
    if (py < T(0)) py = T(0);
    if (py > static_cast<T>(H - 1)) py = static_cast<T>(H - 1);
    int x0 = static_cast<int>(std::floor(px));
    int y0 = static_cast<int>(std::floor(py));
    if (x0 > W - 1) x0 = W - 1;
    if (y0 > H - 1) y0 = H - 1;
    SampleTaps<T> t;
    t.x0 = x0;
    t.y0 = y0;
    t.x1 = x0 + 1 <= W - 1 ? x0 + 1 : W - 1;
    t.y1 = y0 + 1 <= H - 1 ? y0 + 1 : H - 1;
    t.wx = px - static_cast<T>(x0);
    t.wy = py - static_cast<T>(y0);
    return t;
}

// feature: [C,H,W]; returns [C] at one point.
template <typename T>
void bilinear_sample(const T* feature, int C, int H, int W, Vec2<T> p, T* out) {
    const SampleTaps<T> t = sample_taps<T>(H, W, p);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const T w00 = (T(1) - t.wx) * (T(1) - t.wy);
    const T w10 = t.wx * (T(1) - t.wy);
    const T w01 = (T(1) - t.wx) * t.wy;
    const T w11 = t.wx * t.wy;
    for (int c = 0; c < C; ++c) {
        const T* pl = feature + static_cast<std::size_t>(c) * plane;
        out[c] = w00 * pl[t.y0 * W + t.x0] + w10 * pl[t.y0 * W + t.x1] +
                 w01 * pl[t.y1 * W + t.x0] + w11 * pl[t.y1 * W + t.x1];
    }
}

// Scatter of the upstream gradient for one sampled point back onto the map.
template <typename T>
void bilinear_sample_backward(T* gfeature, int C, int H, int W, Vec2<T> p, const T* gout) {
    const SampleTaps<T> t = sample_taps<T>(H, W, p);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const T w00 = (T(1) - t.wx) * (T(1) - t.wy);
    const T w10 = t.wx * (T(1) - t.wy);
    const T w01 = (T(1) - t.wx) * t.wy;
    const T w11 = t.wx * t.wy;
    for (int c = 0; c < C; ++c) {
        T* pl = gfeature + static_cast<std::size_t>(c) * plane;
        pl[t.y0 * W + t.x0] += w00 * gout[c];
        pl[t.y0 * W + t.x1] += w10 * gout[c];
        pl[t.y1 * W + t.x0] += w01 * gout[c];
        pl[t.y1 * W + t.x1] += w11 * gout[c];
    }
}

// ---------------------------------------------------------------------------
// Linear map y = x · Wᵀ + b with x:[M,K], W:[N,K], b:[N]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(1))
        throw ShapeError("linear shape mismatch: " + shape_str(x.shape) + " vs " +
                         shape_str(w.shape));
    const int M = x.dim(0), K = x.dim(1), Nn = w.dim(0);
    if (b.dim(0) != Nn) throw ShapeError("linear bias mismatch: " + shape_str(b.shape));
    Tensor<T> y({M, Nn});
    for (int i = 0; i < M; ++i) {
        const T* xr = x.ptr() + static_cast<std::size_t>(i) * K;
        T* yr = y.ptr() + static_cast<std::size_t>(i) * Nn;
        for (int j = 0; j < Nn; ++j) {
            const T* wr = w.ptr() + static_cast<std::size_t>(j) * K;
            T acc = b[static_cast<std::size_t>(j)];
            for (int k = 0; k < K; ++k) acc += xr[k] * wr[k];
            yr[j] = acc;
        }
    }
    return y;
}

template <typename T>
struct LinearGrads {
    Tensor<T> gx, gw, gb;
};

template <typename T>
LinearGrads<T> linear_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& gy) {
    const int M = x.dim(0), K = x.dim(1), Nn = w.dim(0);
    LinearGrads<T> g;
    g.gx = Tensor<T>({M, K});
    g.gw = Tensor<T>({Nn, K});
    g.gb = Tensor<T>({Nn});
    for (int i = 0; i < M; ++i) {
        const T* xr = x.ptr() + static_cast<std::size_t>(i) * K;
        const T* gr = gy.ptr() + static_cast<std::size_t>(i) * Nn;
        T* gxr = g.gx.ptr() + static_cast<std::size_t>(i) * K;
        for (int j = 0; j < Nn; ++j) {
            const T gv = gr[j];
            const T* wr = w.ptr() + static_cast<std::size_t>(j) * K;
            T* gwr = g.gw.ptr() + static_cast<std::size_t>(j) * K;
            g.gb[static_cast<std::size_t>(j)] += gv;
            for (int k = 0; k < K; ++k) {
                gxr[k] += gv * wr[k];
                gwr[k] += gv * xr[k];
            }
        }
    }
    return g;
}

}  // namespace traceseg
