#pragma once

// Selective state-space machinery: the sequential scan recurrence, the
// channel bottleneck around it, and the four-direction spatial unfold/refold
// (cross-scan / cross-merge) block.

#include <cmath>
#include <memory>
#include <vector>

#include "traceseg/tape.hpp"
#include "traceseg/tensor.hpp"

namespace traceseg {

// ---------------------------------------------------------------------------
// Directional index maps. Each map lists flat grid indices (row-major y*W+x)
// in visit order; all four are permutations of 0..H*W-1. The 2x2 orders are
// fixed golden values:
//   horizontal [0,1,2,3]  vertical [0,2,1,3]  diagonal [0,1,2,3]
//   anti-diagonal [1,0,3,2]
// ---------------------------------------------------------------------------

enum class ScanDir { horizontal = 0, vertical = 1, diagonal = 2, antidiagonal = 3 };

inline std::vector<int> scan_order(ScanDir dir, int H, int W) {
    std::vector<int> order;
    order.reserve(static_cast<std::size_t>(H) * W);
    switch (dir) {
        case ScanDir::horizontal:
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) order.push_back(y * W + x);
            break;
        case ScanDir::vertical:
            for (int x = 0; x < W; ++x)
                for (int y = 0; y < H; ++y) order.push_back(y * W + x);
            break;
        case ScanDir::diagonal:
            // anti-diagonals x+y = d, d ascending; within one, y ascending
            for (int d = 0; d <= H + W - 2; ++d)
                for (int y = std::max(0, d - (W - 1)); y <= std::min(d, H - 1); ++y)
                    order.push_back(y * W + (d - y));
            break;
        case ScanDir::antidiagonal:
            // main diagonals x-y = c, c descending; within one, y ascending
            for (int c = W - 1; c >= -(H - 1); --c)
                for (int y = std::max(0, -c); y <= std::min(H - 1, W - 1 - c); ++y)
                    order.push_back(y * W + (y + c));
            break;
    }
    return order;
}

inline std::vector<int> inverse_perm(const std::vector<int>& p) {
    std::vector<int> inv(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) inv[static_cast<std::size_t>(p[i])] = static_cast<int>(i);
    return inv;
}

// ---------------------------------------------------------------------------
// Scan recurrence. State size S; input rows f: [L, Din]; output [L, Dout].
//
//   A      = -softplus(a_raw)                    (per-state decay, always <= 0)
//   delta_j = softplus(delta_raw [+ Wd f_j])     (per-state step size)
//   h_j    = exp(delta_j*A) (.) h_{j-1} + coef_j (.) (B f_j)
//   y_j    = C h_j + D f_j
//
// coef_j is delta_j for the Euler input rule, or (exp(delta_j*A)-1)/A for
// zero-order hold (series fallback when |A| is tiny).
// ---------------------------------------------------------------------------

struct ScanFlags {
    bool selective = false;  // input-dependent delta via Wd
    bool zoh = false;        // zero-order-hold input discretization
};

template <typename T>
inline T softplus(T x) {
    if (x > T(20)) return x;
    if (x < T(-20)) return std::exp(x);
    return std::log1p(std::exp(x));
}

template <typename T>
struct ScanCache {
    Tensor<T> h;       // [L,S]
    Tensor<T> decay;   // [L,S]
    Tensor<T> delta;   // [L,S]
    Tensor<T> coef;    // [L,S]
    Tensor<T> arg;     // [L,S] pre-softplus delta argument
    Tensor<T> u;       // [L,S] B f_j
    Tensor<T> a;       // [S]   A values
};

template <typename T>
Tensor<T> scan_forward(const Tensor<T>& a_raw, const Tensor<T>& delta_raw, const Tensor<T>& B,
                       const Tensor<T>& C, const Tensor<T>& D, const Tensor<T>& Wd,
                       const Tensor<T>& f, const ScanFlags& flags,
                       ScanCache<T>* cache = nullptr) {
    const int L = f.dim(0), Din = f.dim(1);
    const int S = a_raw.dim(0);
    const int Dout = C.dim(0);
    if (delta_raw.dim(0) != S || B.dim(0) != S || B.dim(1) != Din || C.dim(1) != S ||
        D.dim(0) != Dout || D.dim(1) != Din)
        throw ShapeError("scan parameter shapes inconsistent");
    if (flags.selective && (Wd.dim(0) != S || Wd.dim(1) != Din))
        throw ShapeError("scan selective projection shape inconsistent");

    ScanCache<T> local;
    ScanCache<T>& cc = cache ? *cache : local;
    cc.h = Tensor<T>({L, S});
    cc.decay = Tensor<T>({L, S});
    cc.delta = Tensor<T>({L, S});
    cc.coef = Tensor<T>({L, S});
    cc.arg = Tensor<T>({L, S});
    cc.u = Tensor<T>({L, S});
    cc.a = Tensor<T>({S});
    for (int s = 0; s < S; ++s) cc.a[static_cast<std::size_t>(s)] = -softplus(a_raw[static_cast<std::size_t>(s)]);

    Tensor<T> y({L, Dout});
    std::vector<T> h(static_cast<std::size_t>(S), T(0));
    for (int j = 0; j < L; ++j) {
        const T* fj = f.ptr() + static_cast<std::size_t>(j) * Din;
        T* hj = cc.h.ptr() + static_cast<std::size_t>(j) * S;
        T* dj = cc.decay.ptr() + static_cast<std::size_t>(j) * S;
        T* dl = cc.delta.ptr() + static_cast<std::size_t>(j) * S;
        T* cf = cc.coef.ptr() + static_cast<std::size_t>(j) * S;
        T* ag = cc.arg.ptr() + static_cast<std::size_t>(j) * S;
        T* uj = cc.u.ptr() + static_cast<std::size_t>(j) * S;
        for (int s = 0; s < S; ++s) {
            T arg = delta_raw[static_cast<std::size_t>(s)];
            if (flags.selective) {
                const T* wr = Wd.ptr() + static_cast<std::size_t>(s) * Din;
                for (int d = 0; d < Din; ++d) arg += wr[d] * fj[d];
            }
            ag[s] = arg;
            const T delta = softplus(arg);
            dl[s] = delta;
            const T a = cc.a[static_cast<std::size_t>(s)];
            const T decay = std::exp(delta * a);
            dj[s] = decay;
            T coef;
            if (flags.zoh) {
                coef = std::abs(a) < T(1e-6) ? delta : (decay - T(1)) / a;
            } else {
                coef = delta;
            }
            cf[s] = coef;
            const T* br = B.ptr() + static_cast<std::size_t>(s) * Din;
            T u = T(0);
            for (int d = 0; d < Din; ++d) u += br[d] * fj[d];
            uj[s] = u;
            h[static_cast<std::size_t>(s)] = decay * h[static_cast<std::size_t>(s)] + coef * u;
            hj[s] = h[static_cast<std::size_t>(s)];
        }
        T* yj = y.ptr() + static_cast<std::size_t>(j) * Dout;
        for (int o = 0; o < Dout; ++o) {
            const T* cr = C.ptr() + static_cast<std::size_t>(o) * S;
            const T* dr = D.ptr() + static_cast<std::size_t>(o) * Din;
            T acc = T(0);
            for (int s = 0; s < S; ++s) acc += cr[s] * hj[s];
            for (int d = 0; d < Din; ++d) acc += dr[d] * fj[d];
            yj[o] = acc;
        }
    }
    return y;
}

template <typename T>
struct ScanGrads {
    Tensor<T> ga_raw, gdelta_raw, gB, gC, gD, gWd, gf;
};

template <typename T>
ScanGrads<T> scan_backward(const Tensor<T>& a_raw, const Tensor<T>& delta_raw, const Tensor<T>& B,
                           const Tensor<T>& C, const Tensor<T>& D, const Tensor<T>& Wd,
                           const Tensor<T>& f, const ScanFlags& flags, const ScanCache<T>& cc,
                           const Tensor<T>& gy) {
    const int L = f.dim(0), Din = f.dim(1);
    const int S = a_raw.dim(0);
    const int Dout = C.dim(0);

    ScanGrads<T> g;
    g.ga_raw = Tensor<T>({S});
    g.gdelta_raw = Tensor<T>({S});
    g.gB = Tensor<T>(B.shape);
    g.gC = Tensor<T>(C.shape);
    g.gD = Tensor<T>(D.shape);
    g.gWd = Tensor<T>(Wd.shape);
    g.gf = Tensor<T>(f.shape);

    Tensor<T> ga({S});  // accumulated dL/dA (A = -softplus(a_raw))
    std::vector<T> q(static_cast<std::size_t>(S), T(0));  // dL/dh_j
    for (int j = L - 1; j >= 0; --j) {
        const T* fj = f.ptr() + static_cast<std::size_t>(j) * Din;
        const T* gyj = gy.ptr() + static_cast<std::size_t>(j) * Dout;
        const T* hj = cc.h.ptr() + static_cast<std::size_t>(j) * S;
        const T* hprev = j > 0 ? cc.h.ptr() + static_cast<std::size_t>(j - 1) * S : nullptr;
        const T* dj = cc.decay.ptr() + static_cast<std::size_t>(j) * S;
        const T* dl = cc.delta.ptr() + static_cast<std::size_t>(j) * S;
        const T* cf = cc.coef.ptr() + static_cast<std::size_t>(j) * S;
        const T* ag = cc.arg.ptr() + static_cast<std::size_t>(j) * S;
        const T* uj = cc.u.ptr() + static_cast<std::size_t>(j) * S;
        T* gfj = g.gf.ptr() + static_cast<std::size_t>(j) * Din;

        // y_j = C h_j + D f_j
        for (int o = 0; o < Dout; ++o) {
            const T gv = gyj[o];
            const T* cr = C.ptr() + static_cast<std::size_t>(o) * S;
            T* gcr = g.gC.ptr() + static_cast<std::size_t>(o) * S;
            const T* dr = D.ptr() + static_cast<std::size_t>(o) * Din;
            T* gdr = g.gD.ptr() + static_cast<std::size_t>(o) * Din;
            for (int s = 0; s < S; ++s) {
                gcr[s] += gv * hj[s];
                q[static_cast<std::size_t>(s)] += gv * cr[s];
            }
            for (int d = 0; d < Din; ++d) {
                gdr[d] += gv * fj[d];
                gfj[d] += gv * dr[d];
            }
        }

        // h_j = decay_j (.) h_{j-1} + coef_j (.) u_j
        for (int s = 0; s < S; ++s) {
            const T qs = q[static_cast<std::size_t>(s)];
            const T hp = hprev ? hprev[s] : T(0);
            const T gdecay = qs * hp;
            const T gcoef = qs * uj[s];
            const T gu = qs * cf[s];
            const T a = cc.a[static_cast<std::size_t>(s)];

            // B f_j path
            const T* br = B.ptr() + static_cast<std::size_t>(s) * Din;
            T* gbr = g.gB.ptr() + static_cast<std::size_t>(s) * Din;
            for (int d = 0; d < Din; ++d) {
                gbr[d] += gu * fj[d];
                gfj[d] += gu * br[d];
            }

            // decay = exp(delta*A)
            T gdelta = gdecay * a * dj[s];
            ga[static_cast<std::size_t>(s)] += gdecay * dl[s] * dj[s];

            // coef
            if (flags.zoh) {
                if (std::abs(a) < T(1e-6)) {
                    // coef -> delta + delta^2*a/2 near a=0
                    gdelta += gcoef * (T(1) + dl[s] * a);
                    ga[static_cast<std::size_t>(s)] += gcoef * dl[s] * dl[s] / T(2);
                } else {
                    gdelta += gcoef * dj[s];
                    ga[static_cast<std::size_t>(s)] += gcoef * (dl[s] * a * dj[s] - (dj[s] - T(1))) / (a * a);
                }
            } else {
                gdelta += gcoef;
            }

            // delta = softplus(arg)
            const T garg = gdelta * sigmoid_scalar(ag[s]);
            g.gdelta_raw[static_cast<std::size_t>(s)] += garg;
            if (flags.selective) {
                const T* wr = Wd.ptr() + static_cast<std::size_t>(s) * Din;
                T* gwr = g.gWd.ptr() + static_cast<std::size_t>(s) * Din;
                for (int d = 0; d < Din; ++d) {
                    gwr[d] += garg * fj[d];
                    gfj[d] += garg * wr[d];
                }
            }

            // pass to h_{j-1}
            q[static_cast<std::size_t>(s)] = qs * dj[s];
        }
    }
    // A = -softplus(a_raw)
    for (int s = 0; s < S; ++s)
        g.ga_raw[static_cast<std::size_t>(s)] =
            -ga[static_cast<std::size_t>(s)] * sigmoid_scalar(a_raw[static_cast<std::size_t>(s)]);
    return g;
}

// Parameter node ids for one scan direction.
struct ScanParamIds {
    int a_raw = -1, delta_raw = -1, B = -1, C = -1, D = -1, Wd = -1;
};

template <typename T>
int scan_op(Tape<T>& tape, const ScanParamIds& p, int f, const ScanFlags& flags) {
    auto cache = std::make_shared<ScanCache<T>>();
    Tensor<T> y = scan_forward(tape.value(p.a_raw), tape.value(p.delta_raw), tape.value(p.B),
                               tape.value(p.C), tape.value(p.D), tape.value(p.Wd), tape.value(f),
                               flags, cache.get());
    const bool needs =
        tape.any_needs_grad({p.a_raw, p.delta_raw, p.B, p.C, p.D, p.Wd, f});
    const int out = tape.push_value(std::move(y), needs);
    tape.register_backward(out, [p, f, flags, cache, out](Tape<T>& t) {
        auto g = scan_backward(t.value(p.a_raw), t.value(p.delta_raw), t.value(p.B), t.value(p.C),
                               t.value(p.D), t.value(p.Wd), t.value(f), flags, *cache,
                               t.grad(out));
        t.accumulate(p.a_raw, g.ga_raw);
        t.accumulate(p.delta_raw, g.gdelta_raw);
        t.accumulate(p.B, g.gB);
        t.accumulate(p.C, g.gC);
        t.accumulate(p.D, g.gD);
        t.accumulate(p.Wd, g.gWd);
        t.accumulate(f, g.gf);
    });
    return out;
}

// ---------------------------------------------------------------------------
// Bottleneck: 1x1 reduce -> scan -> 1x1 expand over token rows [L, C].
// ---------------------------------------------------------------------------

struct BottleneckParamIds {
    ScanParamIds scan;
    int reduce_w = -1, reduce_b = -1, expand_w = -1, expand_b = -1;
};

// The reduced width channels/r must be a whole number.
inline int bottleneck_width(int channels, int r) {
    if (r < 1) throw ConfigError("bottleneck ratio must be >= 1");
    if (channels % r != 0)
        throw ConfigError("channel count " + std::to_string(channels) +
                          " is not divisible by bottleneck ratio " + std::to_string(r));
    return channels / r;
}

template <typename T>
int bottleneck_scan_op(Tape<T>& tape, const BottleneckParamIds& p, int tokens,
                       const ScanFlags& flags) {
    const int reduced = tape.linear(tokens, p.reduce_w, p.reduce_b);
    const int scanned = scan_op(tape, p.scan, reduced, flags);
    return tape.linear(scanned, p.expand_w, p.expand_b);
}

// ---------------------------------------------------------------------------
// Cross-scan / cross-merge and the SS2D block.
// ---------------------------------------------------------------------------

// [C,H,W] -> [H*W, C] pixel rows (row-major pixels).
template <typename T>
int chw_to_rows(Tape<T>& tape, int feat) {
    const Tensor<T>& v = tape.value(feat);
    if (v.rank() != 3) throw ShapeError("chw_to_rows expects CHW");
    const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<T> y({H * W, C});
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            y[i * static_cast<std::size_t>(C) + static_cast<std::size_t>(c)] =
                v[static_cast<std::size_t>(c) * plane + i];
    const int out = tape.push_value(std::move(y), tape.needs_grad(feat));
    tape.register_backward(out, [feat, C, plane, out](Tape<T>& t) {
        if (!t.needs_grad(feat)) return;
        Tensor<T>& gf = t.grad_buf(feat);
        const Tensor<T>& g = t.grad(out);
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                gf[static_cast<std::size_t>(c) * plane + i] +=
                    g[i * static_cast<std::size_t>(C) + static_cast<std::size_t>(c)];
    });
    return out;
}

// [H*W, C] pixel rows -> [C,H,W].
template <typename T>
int rows_to_chw(Tape<T>& tape, int rows, int H, int W) {
    const Tensor<T>& v = tape.value(rows);
    if (v.rank() != 2 || v.dim(0) != H * W) throw ShapeError("rows_to_chw shape mismatch");
    const int C = v.dim(1);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    Tensor<T> y({C, H, W});
    for (int c = 0; c < C; ++c)
        for (std::size_t i = 0; i < plane; ++i)
            y[static_cast<std::size_t>(c) * plane + i] =
                v[i * static_cast<std::size_t>(C) + static_cast<std::size_t>(c)];
    const int out = tape.push_value(std::move(y), tape.needs_grad(rows));
    tape.register_backward(out, [rows, C, plane, out](Tape<T>& t) {
        if (!t.needs_grad(rows)) return;
        Tensor<T>& gr = t.grad_buf(rows);
        const Tensor<T>& g = t.grad(out);
        for (int c = 0; c < C; ++c)
            for (std::size_t i = 0; i < plane; ++i)
                gr[i * static_cast<std::size_t>(C) + static_cast<std::size_t>(c)] +=
                    g[static_cast<std::size_t>(c) * plane + i];
    });
    return out;
}

// Mean of four same-shape tensors in fixed pairwise order ((a+b)+(c+d))/4, so
// that merging four identical grids is exactly the identity.
template <typename T>
int mean4(Tape<T>& tape, int a, int b, int c, int d) {
    const Tensor<T>& va = tape.value(a);
    Tensor<T> y(va.shape);
    const Tensor<T>& vb = tape.value(b);
    const Tensor<T>& vc = tape.value(c);
    const Tensor<T>& vd = tape.value(d);
    for (std::size_t i = 0; i < y.numel(); ++i)
        y[i] = ((va[i] + vb[i]) + (vc[i] + vd[i])) * T(0.25);
    const int out = tape.push_value(std::move(y), tape.any_needs_grad({a, b, c, d}));
    tape.register_backward(out, [a, b, c, d, out](Tape<T>& t) {
        const Tensor<T>& g = t.grad(out);
        for (int id : {a, b, c, d}) {
            if (!t.needs_grad(id)) continue;
            Tensor<T>& gx = t.grad_buf(id);
            for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += T(0.25) * g[i];
        }
    });
    return out;
}

struct Ss2dParamIds {
    BottleneckParamIds dir[4];
    int ln_gamma = -1, ln_beta = -1;
};

// SS2D block on one image: four directional bottleneck scans, refold and
// average, residual add, channel layer norm. feat: [C,H,W] -> [C,H,W].
template <typename T>
int ss2d_op(Tape<T>& tape, int feat, const Ss2dParamIds& p, const ScanFlags& flags, T ln_eps) {
    const Tensor<T>& v = tape.value(feat);
    const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
    const int rows = chw_to_rows(tape, feat);
    int refolded[4];
    for (int d = 0; d < 4; ++d) {
        const auto order = scan_order(static_cast<ScanDir>(d), H, W);
        const int seq = tape.gather_rows(rows, order);
        const int y = bottleneck_scan_op(tape, p.dir[d], seq, flags);
        refolded[d] = tape.gather_rows(y, inverse_perm(order));
    }
    const int merged = mean4(tape, refolded[0], refolded[1], refolded[2], refolded[3]);
    const int grid = rows_to_chw(tape, merged, H, W);
    const int res = tape.add(feat, grid);
    const int res4 = tape.reshape(res, {1, C, H, W});
    const int normed = tape.layer_norm(res4, p.ln_gamma, p.ln_beta, ln_eps);
    return tape.reshape(normed, {C, H, W});
}

}  // namespace traceseg
