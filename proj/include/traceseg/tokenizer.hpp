#pragma once

// Hierarchical image tokenization: the image is tiled into coarse regions
// ("sentences"), each subdivided into finer cells ("words"). A small conv
// stem embeds every word; sentence embeddings pool their words. Continuous
// feature-grid points can be mapped back to the word/sentence that covers
// them.

#include <cmath>
#include <string>
#include <vector>

#include "traceseg/common.hpp"
#include "traceseg/tape.hpp"
#include "traceseg/tensor.hpp"

namespace traceseg {

struct TokenGrid {
    int H = 0, W = 0;          // image size in pixels
    int n = 0, m = 0;          // sentence count, words per sentence
    int sn = 0, sm = 0;        // √n, √m (grid sides)
    int h_s = 0, w_s = 0;      // sentence box size
    int h_w = 0, w_w = 0;      // word box size
};

namespace detail {
inline int exact_sqrt(int v, const char* what) {
    const int r = static_cast<int>(std::lround(std::sqrt(static_cast<double>(v))));
    if (v < 1 || r * r != v)
        throw ConfigError(std::string(what) + " " + std::to_string(v) +
                          " must be a positive perfect square");
    return r;
}
}  // namespace detail

inline TokenGrid make_token_grid(int H, int W, int n, int m) {
    TokenGrid g;
    g.H = H;
    g.W = W;
    g.n = n;
    g.m = m;
    g.sn = detail::exact_sqrt(n, "sentence count");
    g.sm = detail::exact_sqrt(m, "word count");
    const int div = g.sn * g.sm;
    if (H % div != 0)
        throw ConfigError("image height " + std::to_string(H) + " is not divisible by " +
                          std::to_string(div));
    if (W % div != 0)
        throw ConfigError("image width " + std::to_string(W) + " is not divisible by " +
                          std::to_string(div));
    g.h_s = H / g.sn;
    g.w_s = W / g.sn;
    g.h_w = g.h_s / g.sm;
    g.w_w = g.w_s / g.sm;
    return g;
}

struct WordBox {
    int sentence = 0, word = 0;
    int x0 = 0, y0 = 0, w = 0, h = 0;
};

// All word boxes in deterministic order: sentences row-major over the
// sentence grid, words row-major within each sentence.
inline std::vector<WordBox> partition_boxes(const TokenGrid& g) {
    std::vector<WordBox> boxes;
    boxes.reserve(static_cast<std::size_t>(g.n) * g.m);
    for (int sy = 0; sy < g.sn; ++sy)
        for (int sx = 0; sx < g.sn; ++sx)
            for (int wy = 0; wy < g.sm; ++wy)
                for (int wx = 0; wx < g.sm; ++wx) {
                    WordBox b;
                    b.sentence = sy * g.sn + sx;
                    b.word = wy * g.sm + wx;
                    b.x0 = sx * g.w_s + wx * g.w_w;
                    b.y0 = sy * g.h_s + wy * g.h_w;
                    b.w = g.w_w;
                    b.h = g.h_w;
                    boxes.push_back(b);
                }
    return boxes;
}

// ---------------------------------------------------------------------------
// Point -> box membership. Boxes are closed intervals in continuous image
// coordinates; a point exactly on a shared edge belongs to the box with the
// lower index (floor division adjusted downward on exact boundaries).
// Out-of-range points clamp to the nearest box.
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
int box_coord(T v, int size, int count) {
    const T hi = static_cast<T>(size) * count;
    T c = v < T(0) ? T(0) : (v > hi ? hi : v);
    int k = static_cast<int>(std::floor(c / static_cast<T>(size)));
    k = clampi(k, 0, count - 1);
    if (k > 0 && c == static_cast<T>(k) * static_cast<T>(size)) --k;
    return k;
}
}  // namespace detail

struct WordRef {
    int sentence = 0;
    int word = 0;
};

template <typename T>
WordRef locate_image_point(const TokenGrid& g, T x, T y) {
    const auto clampT = [](T v, T lo, T hi) { return v < lo ? lo : (v > hi ? hi : v); };
    const T cx = clampT(x, T(0), static_cast<T>(g.W));
    const T cy = clampT(y, T(0), static_cast<T>(g.H));
    const int sx = detail::box_coord(cx, g.w_s, g.sn);
    const int sy = detail::box_coord(cy, g.h_s, g.sn);
    const int wx = detail::box_coord(cx - static_cast<T>(sx) * g.w_s, g.w_w, g.sm);
    const int wy = detail::box_coord(cy - static_cast<T>(sy) * g.h_s, g.h_w, g.sm);
    WordRef r;
    r.sentence = sy * g.sn + sx;
    r.word = wy * g.sm + wx;
    return r;
}

// Stage-l feature coordinates map to image coordinates through the total
// downsampling factor stem_stride * 2^(l-1).
inline int stage_scale(int level, int stem_stride) {
    return stem_stride << (level - 1);
}

template <typename T>
WordRef locate_stage_point(const TokenGrid& g, T x, T y, int level, int stem_stride) {
    const T s = static_cast<T>(stage_scale(level, stem_stride));
    return locate_image_point(g, x * s, y * s);
}

// ---------------------------------------------------------------------------
// Word embedding. The stem is a 3x3 conv (stride 1, zero padding 1) followed
// by batch normalization and GELU; each word embedding is the spatial mean of
// the stem output over its box, and each sentence embedding is the mean of
// its word embeddings.
// ---------------------------------------------------------------------------

// Mean over fixed-size consecutive row groups: [G*m, C] -> [G, C].
template <typename T>
int group_mean_rows(Tape<T>& tape, int x, int m) {
    const Tensor<T>& v = tape.value(x);
    if (v.rank() != 2 || v.dim(0) % m != 0) throw ShapeError("group_mean_rows shape mismatch");
    const int G = v.dim(0) / m, C = v.dim(1);
    Tensor<T> y({G, C});
    for (int g = 0; g < G; ++g)
        for (int c = 0; c < C; ++c) {
            T acc = T(0);
            for (int j = 0; j < m; ++j) acc += v.at(g * m + j, c);
            y.at(g, c) = acc / static_cast<T>(m);
        }
    const int out = tape.push_value(std::move(y), tape.needs_grad(x));
    tape.register_backward(out, [x, m, G, C, out](Tape<T>& t) {
        if (!t.needs_grad(x)) return;
        Tensor<T>& gx = t.grad_buf(x);
        const Tensor<T>& g = t.grad(out);
        for (int gi = 0; gi < G; ++gi)
            for (int c = 0; c < C; ++c)
                for (int j = 0; j < m; ++j)
                    gx.at(gi * m + j, c) += g.at(gi, c) / static_cast<T>(m);
    });
    return out;
}

struct StemIds {
    int w = -1, b = -1, gamma = -1, beta = -1;
};

struct EmbeddingIds {
    int F_w = -1;  // [n*m, C_w] rows ordered (sentence, word)
    int F_s = -1;  // [n, C_s]
};

template <typename T>
EmbeddingIds embed_words(Tape<T>& tape, int image, const TokenGrid& g, const StemIds& stem,
                         Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                         T momentum, T eps) {
    const Tensor<T>& img = tape.value(image);
    if (img.rank() != 3 || img.dim(1) != g.H || img.dim(2) != g.W)
        throw ShapeError("embed_words image does not match the token grid");
    const int Cin = img.dim(0);
    const int batched = tape.reshape(image, {1, Cin, g.H, g.W});
    const int patches = tape.patchify(batched, g.h_w, g.w_w);  // [P, Cin, h_w, w_w], grid order
    const int conv = tape.conv2d(patches, stem.w, stem.b, 1, 1, PadMode::zero);
    const int bn = tape.batch_norm(conv, stem.gamma, stem.beta, running_mean, running_var,
                                   training, momentum, eps);
    const int act = tape.gelu(bn);
    const int rows = tape.spatial_mean(act);  // [P, C_w] in patch-grid row-major order

    // Reorder patch-grid rows (word rows scanning the whole image) into
    // (sentence, word) order.
    const int gw = g.W / g.w_w;
    std::vector<int> perm(static_cast<std::size_t>(g.n) * g.m);
    for (int sy = 0; sy < g.sn; ++sy)
        for (int sx = 0; sx < g.sn; ++sx)
            for (int wy = 0; wy < g.sm; ++wy)
                for (int wx = 0; wx < g.sm; ++wx) {
                    const int sentence = sy * g.sn + sx;
                    const int word = wy * g.sm + wx;
                    const int gy = sy * g.sm + wy;
                    const int gx = sx * g.sm + wx;
                    perm[static_cast<std::size_t>(sentence) * g.m + word] = gy * gw + gx;
                }
    EmbeddingIds out;
    out.F_w = tape.gather_rows(rows, perm);
    out.F_s = group_mean_rows(tape, out.F_w, g.m);
    return out;
}

}  // namespace traceseg
