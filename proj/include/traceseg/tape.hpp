#pragma once

// Reverse-mode gradient tape over the fixed kernel set. Ops append value
// nodes and (when any input requires gradients) a backward closure; calling
// backward(loss) replays the closures in reverse creation order. This is not
// a general autodiff system: only the kernels the architecture composes are
// provided, and module headers register their own fused ops through the
// low-level push_value / register_backward API.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "traceseg/kernels.hpp"
#include "traceseg/tensor.hpp"

namespace traceseg {

template <typename T>
struct GradientPair {
    Tensor<T> value;
    std::map<std::string, Tensor<T>> grads;
};

template <typename T>
class Tape {
  public:
    // ---- low-level node API -------------------------------------------------
    int push_value(Tensor<T> v, bool needs_grad) {
        entries_.push_back(Entry{std::move(v), Tensor<T>(), needs_grad, false});
        return static_cast<int>(entries_.size()) - 1;
    }

    void register_backward(int out_id, std::function<void(Tape&)> fn) {
        if (!entries_[static_cast<std::size_t>(out_id)].needs_grad) return;
        back_.push_back({out_id, std::move(fn)});
    }

    bool needs_grad(int id) const { return entries_[static_cast<std::size_t>(id)].needs_grad; }
    bool any_needs_grad(std::initializer_list<int> ids) const {
        for (int id : ids)
            if (needs_grad(id)) return true;
        return false;
    }

    const Tensor<T>& value(int id) const { return entries_[static_cast<std::size_t>(id)].value; }
    std::size_t size() const { return entries_.size(); }

    bool has_grad(int id) const { return entries_[static_cast<std::size_t>(id)].has_grad; }

    // Gradient buffer, allocated as zeros on first touch.
    Tensor<T>& grad_buf(int id) {
        Entry& e = entries_[static_cast<std::size_t>(id)];
        if (!e.has_grad) {
            e.grad = Tensor<T>(e.value.shape);
            e.has_grad = true;
        }
        return e.grad;
    }

    const Tensor<T>& grad(int id) const {
        const Entry& e = entries_[static_cast<std::size_t>(id)];
        if (!e.has_grad) throw ConfigError("gradient requested for a node backward never reached");
        return e.grad;
    }

    // Adds g into the gradient of `id` (no-op if the node does not need one).
    void accumulate(int id, const Tensor<T>& g) {
        if (!needs_grad(id)) return;
        Tensor<T>& buf = grad_buf(id);
        for (std::size_t i = 0; i < buf.numel(); ++i) buf[i] += g[i];
    }

    void backward(int loss_id) {
        if (value(loss_id).numel() != 1)
            throw ShapeError("backward expects a scalar loss, got " +
                             shape_str(value(loss_id).shape));
        grad_buf(loss_id)[0] = T(1);
        for (auto it = back_.rbegin(); it != back_.rend(); ++it)
            if (entries_[static_cast<std::size_t>(it->first)].has_grad) it->second(*this);
    }

    // ---- leaves -------------------------------------------------------------
    int leaf(Tensor<T> v, bool requires_grad = true) {
        return push_value(std::move(v), requires_grad);
    }
    int constant(Tensor<T> v) { return push_value(std::move(v), false); }

    // ---- elementwise --------------------------------------------------------
    int add(int a, int b) {
        if (value(a).shape != value(b).shape) throw ShapeError("add shape mismatch");
        Tensor<T> y(value(a).shape);
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] = value(a)[i] + value(b)[i];
        const int out = push_value(std::move(y), any_needs_grad({a, b}));
        register_backward(out, [a, b, out](Tape& t) {
            t.accumulate(a, t.grad(out));
            t.accumulate(b, t.grad(out));
        });
        return out;
    }

    // a + c*b with a compile-time-fixed scalar c
    int add_scaled(int a, int b, T c) {
        if (value(a).shape != value(b).shape) throw ShapeError("add_scaled shape mismatch");
        Tensor<T> y(value(a).shape);
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] = value(a)[i] + c * value(b)[i];
        const int out = push_value(std::move(y), any_needs_grad({a, b}));
        register_backward(out, [a, b, c, out](Tape& t) {
            t.accumulate(a, t.grad(out));
            if (!t.needs_grad(b)) return;
            Tensor<T>& gb = t.grad_buf(b);
            const Tensor<T>& g = t.grad(out);
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += c * g[i];
        });
        return out;
    }

    int scale(int a, T c) {
        Tensor<T> y(value(a).shape);
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] = c * value(a)[i];
        const int out = push_value(std::move(y), needs_grad(a));
        register_backward(out, [a, c, out](Tape& t) {
            Tensor<T>& ga = t.grad_buf(a);
            const Tensor<T>& g = t.grad(out);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += c * g[i];
        });
        return out;
    }

    int mul(int a, int b) {
        if (value(a).shape != value(b).shape) throw ShapeError("mul shape mismatch");
        Tensor<T> y(value(a).shape);
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] = value(a)[i] * value(b)[i];
        const int out = push_value(std::move(y), any_needs_grad({a, b}));
        register_backward(out, [a, b, out](Tape& t) {
            const Tensor<T>& g = t.grad(out);
            if (t.needs_grad(a)) {
                Tensor<T>& ga = t.grad_buf(a);
                const Tensor<T>& vb = t.value(b);
                for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g[i] * vb[i];
            }
            if (t.needs_grad(b)) {
                Tensor<T>& gb = t.grad_buf(b);
                const Tensor<T>& va = t.value(a);
                for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[i] * va[i];
            }
        });
        return out;
    }

    // y = x * s[0] where s is a one-element parameter (fusion weights etc.)
    int mul_scalar_param(int x, int s) {
        if (value(s).numel() != 1) throw ShapeError("mul_scalar_param expects a 1-element tensor");
        const T sv = value(s)[0];
        Tensor<T> y(value(x).shape);
        for (std::size_t i = 0; i < y.numel(); ++i) y[i] = sv * value(x)[i];
        const int out = push_value(std::move(y), any_needs_grad({x, s}));
        register_backward(out, [x, s, sv, out](Tape& t) {
            const Tensor<T>& g = t.grad(out);
            if (t.needs_grad(x)) {
                Tensor<T>& gx = t.grad_buf(x);
                for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += sv * g[i];
            }
            if (t.needs_grad(s)) {
                const Tensor<T>& vx = t.value(x);
                T acc = T(0);
                for (std::size_t i = 0; i < vx.numel(); ++i) acc += g[i] * vx[i];
                t.grad_buf(s)[0] += acc;
            }
        });
        return out;
    }

    // ---- activations --------------------------------------------------------
    int gelu(int x) {
        const int out = push_value(gelu_forward(value(x)), needs_grad(x));
        register_backward(out, [x, out](Tape& t) {
            t.accumulate(x, gelu_backward(t.value(x), t.grad(out)));
        });
        return out;
    }

    int relu(int x) {
        const int out = push_value(relu_forward(value(x)), needs_grad(x));
        register_backward(out, [x, out](Tape& t) {
            t.accumulate(x, relu_backward(t.value(x), t.grad(out)));
        });
        return out;
    }

    int sigmoid(int x) {
        const int out = push_value(sigmoid_forward(value(x)), needs_grad(x));
        register_backward(out, [x, out](Tape& t) {
            t.accumulate(x, sigmoid_backward(t.value(out), t.grad(out)));
        });
        return out;
    }

    // ---- layers -------------------------------------------------------------
    int conv2d(int x, int w, int b, int stride, int pad, PadMode mode) {
        const int out = push_value(conv2d_forward(value(x), value(w), value(b), stride, pad, mode),
                                   any_needs_grad({x, w, b}));
        register_backward(out, [x, w, b, stride, pad, mode, out](Tape& t) {
            auto g = conv2d_backward(t.value(x), t.value(w), stride, pad, mode, t.grad(out));
            t.accumulate(x, g.gx);
            t.accumulate(w, g.gw);
            t.accumulate(b, g.gb);
        });
        return out;
    }

    // Training-mode BN mutates the caller-owned running stats in the forward
    // pass; gradients never flow into them.
    int batch_norm(int x, int gamma, int beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                   bool training, T momentum, T eps) {
        auto cache = std::make_shared<BatchNormCache<T>>();
        const int out = push_value(batch_norm_forward(value(x), value(gamma), value(beta),
                                                      running_mean, running_var, training,
                                                      momentum, eps, cache.get()),
                                   any_needs_grad({x, gamma, beta}));
        register_backward(out, [x, gamma, beta, cache, out](Tape& t) {
            auto g = batch_norm_backward(t.value(x), t.value(gamma), *cache, t.grad(out));
            t.accumulate(x, g.gx);
            t.accumulate(gamma, g.ggamma);
            t.accumulate(beta, g.gbeta);
        });
        return out;
    }

    int layer_norm(int x, int gamma, int beta, T eps) {
        const int out = push_value(layer_norm_forward(value(x), value(gamma), value(beta), eps),
                                   any_needs_grad({x, gamma, beta}));
        register_backward(out, [x, gamma, beta, eps, out](Tape& t) {
            auto g = layer_norm_backward(t.value(x), t.value(gamma), eps, t.grad(out));
            t.accumulate(x, g.gx);
            t.accumulate(gamma, g.ggamma);
            t.accumulate(beta, g.gbeta);
        });
        return out;
    }

    int bilinear_resize(int x, int oh, int ow) {
        const int out = push_value(bilinear_resize_forward(value(x), oh, ow), needs_grad(x));
        const int in_h = value(x).dim(2), in_w = value(x).dim(3);
        register_backward(out, [x, in_h, in_w, out](Tape& t) {
            t.accumulate(x, bilinear_resize_backward<T>(in_h, in_w, t.grad(out)));
        });
        return out;
    }

    int linear(int x, int w, int b) {
        const int out =
            push_value(linear_forward(value(x), value(w), value(b)), any_needs_grad({x, w, b}));
        register_backward(out, [x, w, b, out](Tape& t) {
            auto g = linear_backward(t.value(x), t.value(w), t.grad(out));
            t.accumulate(x, g.gx);
            t.accumulate(w, g.gw);
            t.accumulate(b, g.gb);
        });
        return out;
    }

    // ---- shape plumbing -----------------------------------------------------
    int reshape(int x, Shape s) {
        if (shape_numel(s) != value(x).numel()) throw ShapeError("reshape numel mismatch");
        Tensor<T> y;
        y.shape = std::move(s);
        y.data = value(x).data;
        const int out = push_value(std::move(y), needs_grad(x));
        register_backward(out, [x, out](Tape& t) {
            if (!t.needs_grad(x)) return;
            Tensor<T>& gx = t.grad_buf(x);
            const Tensor<T>& g = t.grad(out);
            for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g[i];
        });
        return out;
    }

    // Concatenate along `axis`; all other dimensions must match.
    int concat(const std::vector<int>& ids, int axis) {
        if (ids.empty()) throw ShapeError("concat of nothing");
        const Shape& s0 = value(ids[0]).shape;
        Shape out_shape = s0;
        const int rank = static_cast<int>(s0.size());
        if (axis < 0 || axis >= rank) throw ShapeError("concat axis out of range");
        int total = 0;
        for (int id : ids) {
            const Shape& s = value(id).shape;
            if (static_cast<int>(s.size()) != rank) throw ShapeError("concat rank mismatch");
            for (int d = 0; d < rank; ++d)
                if (d != axis && s[static_cast<std::size_t>(d)] != s0[static_cast<std::size_t>(d)])
                    throw ShapeError("concat dim mismatch");
            total += s[static_cast<std::size_t>(axis)];
        }
        out_shape[static_cast<std::size_t>(axis)] = total;

        std::size_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(s0[static_cast<std::size_t>(d)]);
        for (int d = axis + 1; d < rank; ++d)
            inner *= static_cast<std::size_t>(s0[static_cast<std::size_t>(d)]);

        Tensor<T> y(out_shape);
        std::size_t off = 0;
        const std::size_t ototal = static_cast<std::size_t>(total) * inner;
        for (int id : ids) {
            const Tensor<T>& v = value(id);
            const std::size_t len = static_cast<std::size_t>(v.dim(axis)) * inner;
            for (std::size_t o = 0; o < outer; ++o)
                std::copy(v.ptr() + o * len, v.ptr() + (o + 1) * len,
                          y.ptr() + o * ototal + off);
            off += len;
        }
        bool needs = false;
        for (int id : ids) needs = needs || needs_grad(id);
        const int out = push_value(std::move(y), needs);
        register_backward(out, [ids, axis, outer, inner, ototal, out](Tape& t) {
            const Tensor<T>& g = t.grad(out);
            std::size_t off = 0;
            for (int id : ids) {
                const std::size_t len = static_cast<std::size_t>(t.value(id).dim(axis)) * inner;
                if (t.needs_grad(id)) {
                    Tensor<T>& gx = t.grad_buf(id);
                    for (std::size_t o = 0; o < outer; ++o) {
                        const T* src = g.ptr() + o * ototal + off;
                        T* dst = gx.ptr() + o * len;
                        for (std::size_t i = 0; i < len; ++i) dst[i] += src[i];
                    }
                }
                off += len;
            }
        });
        return out;
    }

    int slice(int x, int axis, int start, int len) {
        const Shape& s = value(x).shape;
        const int rank = static_cast<int>(s.size());
        if (axis < 0 || axis >= rank) throw ShapeError("slice axis out of range");
        if (start < 0 || len < 1 || start + len > s[static_cast<std::size_t>(axis)])
            throw ShapeError("slice range out of bounds");
        std::size_t outer = 1, inner = 1;
        for (int d = 0; d < axis; ++d) outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(d)]);
        for (int d = axis + 1; d < rank; ++d)
            inner *= static_cast<std::size_t>(s[static_cast<std::size_t>(d)]);
        const std::size_t stride = static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]) * inner;

        Shape out_shape = s;
        out_shape[static_cast<std::size_t>(axis)] = len;
        Tensor<T> y(out_shape);
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(value(x).ptr() + o * stride + static_cast<std::size_t>(start) * inner,
                      value(x).ptr() + o * stride + static_cast<std::size_t>(start + len) * inner,
                      y.ptr() + o * static_cast<std::size_t>(len) * inner);
        const int out = push_value(std::move(y), needs_grad(x));
        register_backward(out, [x, start, len, outer, inner, stride, out](Tape& t) {
            if (!t.needs_grad(x)) return;
            Tensor<T>& gx = t.grad_buf(x);
            const Tensor<T>& g = t.grad(out);
            for (std::size_t o = 0; o < outer; ++o) {
                const T* src = g.ptr() + o * static_cast<std::size_t>(len) * inner;
                T* dst = gx.ptr() + o * stride + static_cast<std::size_t>(start) * inner;
                for (std::size_t i = 0; i < static_cast<std::size_t>(len) * inner; ++i)
                    dst[i] += src[i];
            }
        });
        return out;
    }

    // [N,C,H,W] -> [N*gh*gw, C, ph, pw], patches in (n, gy, gx) row-major order.
    int patchify(int x, int ph, int pw) {
        const Tensor<T>& v = value(x);
        if (v.rank() != 4) throw ShapeError("patchify expects NCHW");
        const int N = v.dim(0), C = v.dim(1), H = v.dim(2), W = v.dim(3);
        if (H % ph != 0 || W % pw != 0)
            throw ShapeError("patchify requires exact tiling of " + shape_str(v.shape));
        const int gh = H / ph, gw = W / pw;
        Tensor<T> y({N * gh * gw, C, ph, pw});
        for (int n = 0; n < N; ++n)
            for (int gy = 0; gy < gh; ++gy)
                for (int gx = 0; gx < gw; ++gx) {
                    const int p = (n * gh + gy) * gw + gx;
                    for (int c = 0; c < C; ++c)
                        for (int yy = 0; yy < ph; ++yy) {
                            const T* src = v.ptr() +
                                           ((static_cast<std::size_t>(n) * C + c) * H +
                                            (gy * ph + yy)) * W + gx * pw;
                            T* dst = y.ptr() + ((static_cast<std::size_t>(p) * C + c) * ph + yy) * pw;
                            std::copy(src, src + pw, dst);
                        }
                }
        const int out = push_value(std::move(y), needs_grad(x));
        register_backward(out, [x, ph, pw, N, C, H, W, gh, gw, out](Tape& t) {
            if (!t.needs_grad(x)) return;
            Tensor<T>& gx_t = t.grad_buf(x);
            const Tensor<T>& g = t.grad(out);
            for (int n = 0; n < N; ++n)
                for (int gy = 0; gy < gh; ++gy)
                    for (int gxi = 0; gxi < gw; ++gxi) {
                        const int p = (n * gh + gy) * gw + gxi;
                        for (int c = 0; c < C; ++c)
                            for (int yy = 0; yy < ph; ++yy) {
                                const T* src =
                                    g.ptr() + ((static_cast<std::size_t>(p) * C + c) * ph + yy) * pw;
                                T* dst = gx_t.ptr() +
                                         ((static_cast<std::size_t>(n) * C + c) * H +
                                          (gy * ph + yy)) * W + gxi * pw;
                                for (int xx = 0; xx < pw; ++xx) dst[xx] += src[xx];
                            }
                    }
        });
        return out;
    }

    // [P,C,h,w] -> [P,C] spatial average.
    int spatial_mean(int x) {
        const Tensor<T>& v = value(x);
        if (v.rank() != 4) throw ShapeError("spatial_mean expects NCHW");
        const int P = v.dim(0), C = v.dim(1), h = v.dim(2), w = v.dim(3);
        const std::size_t plane = static_cast<std::size_t>(h) * w;
        Tensor<T> y({P, C});
        for (int p = 0; p < P; ++p)
            for (int c = 0; c < C; ++c) {
                const T* src = v.ptr() + (static_cast<std::size_t>(p) * C + c) * plane;
                T acc = T(0);
                for (std::size_t i = 0; i < plane; ++i) acc += src[i];
                y.at(p, c) = acc / static_cast<T>(plane);
            }
        const int out = push_value(std::move(y), needs_grad(x));
        register_backward(out, [x, P, C, plane, out](Tape& t) {
            if (!t.needs_grad(x)) return;
            Tensor<T>& gx = t.grad_buf(x);
            const Tensor<T>& g = t.grad(out);
            for (int p = 0; p < P; ++p)
                for (int c = 0; c < C; ++c) {
                    const T gv = g.at(p, c) / static_cast<T>(plane);
                    T* dst = gx.ptr() + (static_cast<std::size_t>(p) * C + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) dst[i] += gv;
                }
        });
        return out;
    }

    // Row gather from [M,C] by index list (duplicates allowed).
    int gather_rows(int x, std::vector<int> rows) {
        const Tensor<T>& v = value(x);
        if (v.rank() != 2) throw ShapeError("gather_rows expects a row matrix");
        const int M = v.dim(0), C = v.dim(1);
        for (int r : rows)
            if (r < 0 || r >= M) throw ShapeError("gather_rows index out of range");
        Tensor<T> y({static_cast<int>(rows.size()), C});
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy(v.ptr() + static_cast<std::size_t>(rows[i]) * C,
                      v.ptr() + static_cast<std::size_t>(rows[i] + 1) * C, y.ptr() + i * C);
        const int out = push_value(std::move(y), needs_grad(x));
        register_backward(out, [x, rows = std::move(rows), C, out](Tape& t) {
            if (!t.needs_grad(x)) return;
            Tensor<T>& gx = t.grad_buf(x);
            const Tensor<T>& g = t.grad(out);
            for (std::size_t i = 0; i < rows.size(); ++i) {
                const T* src = g.ptr() + i * C;
                T* dst = gx.ptr() + static_cast<std::size_t>(rows[i]) * C;
                for (int c = 0; c < C; ++c) dst[c] += src[c];
            }
        });
        return out;
    }

    // Sample a [C,H,W] feature map at fixed continuous points -> [L,C].
    // The points are control data (no gradient flows into them).
    int sample_points(int feat, std::vector<Vec2<T>> pts) {
        const Tensor<T>& v = value(feat);
        if (v.rank() != 3) throw ShapeError("sample_points expects CHW");
        const int C = v.dim(0), H = v.dim(1), W = v.dim(2);
        Tensor<T> y({static_cast<int>(pts.size()), C});
        for (std::size_t i = 0; i < pts.size(); ++i)
            bilinear_sample(v.ptr(), C, H, W, pts[i], y.ptr() + i * C);
        const int out = push_value(std::move(y), needs_grad(feat));
        register_backward(out, [feat, pts = std::move(pts), C, H, W, out](Tape& t) {
            if (!t.needs_grad(feat)) return;
            Tensor<T>& gf = t.grad_buf(feat);
            const Tensor<T>& g = t.grad(out);
            for (std::size_t i = 0; i < pts.size(); ++i)
                bilinear_sample_backward(gf.ptr(), C, H, W, pts[i], g.ptr() + i * C);
        });
        return out;
    }

    // Sample a scalar [H,W] map at fixed points -> [L].
    int sample_scalars(int map, std::vector<Vec2<T>> pts) {
        const Tensor<T>& v = value(map);
        if (v.rank() != 2) throw ShapeError("sample_scalars expects HW");
        const int H = v.dim(0), W = v.dim(1);
        Tensor<T> y({static_cast<int>(pts.size())});
        for (std::size_t i = 0; i < pts.size(); ++i)
            bilinear_sample(v.ptr(), 1, H, W, pts[i], y.ptr() + i);
        const int out = push_value(std::move(y), needs_grad(map));
        register_backward(out, [map, pts = std::move(pts), H, W, out](Tape& t) {
            if (!t.needs_grad(map)) return;
            Tensor<T>& gm = t.grad_buf(map);
            const Tensor<T>& g = t.grad(out);
            for (std::size_t i = 0; i < pts.size(); ++i)
                bilinear_sample_backward(gm.ptr(), 1, H, W, pts[i], g.ptr() + i);
        });
        return out;
    }

    int sum_all(int x) {
        T acc = T(0);
        for (std::size_t i = 0; i < value(x).numel(); ++i) acc += value(x)[i];
        Tensor<T> y({1});
        y[0] = acc;
        const int out = push_value(std::move(y), needs_grad(x));
        register_backward(out, [x, out](Tape& t) {
            if (!t.needs_grad(x)) return;
            Tensor<T>& gx = t.grad_buf(x);
            const T g = t.grad(out)[0];
            for (std::size_t i = 0; i < gx.numel(); ++i) gx[i] += g;
        });
        return out;
    }

    int mean_all(int x) {
        return scale(sum_all(x), T(1) / static_cast<T>(value(x).numel()));
    }

  private:
    struct Entry {
        Tensor<T> value;
        Tensor<T> grad;
        bool needs_grad = false;
        bool has_grad = false;
    };
    std::vector<Entry> entries_;
    std::vector<std::pair<int, std::function<void(Tape&)>>> back_;
};

}  // namespace traceseg
