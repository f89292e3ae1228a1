#pragma once

// Trajectory-aware state block: runs the bottleneck scan along each feature
// trajectory, aligns every step with its local token and the word/sentence
// embeddings covering it, scatters the aligned states back onto the feature
// grid with contribution averaging, blends in a grid-level SS2D pass, and
// fuses the result into the backbone feature map.

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "traceseg/ssm.hpp"
#include "traceseg/tape.hpp"
#include "traceseg/tensor.hpp"
#include "traceseg/tokenizer.hpp"
#include "traceseg/trajectory.hpp"

namespace traceseg {

// ---------------------------------------------------------------------------
// Scatter with contribution averaging. Continuous positions round to the
// nearest pixel (ties to even); each pixel's accumulated sum divides by its
// contribution count; untouched pixels stay exactly zero. Accumulation order
// is fixed to (trajectory index, step index) so results are deterministic and
// independent of caller-side ordering.
// ---------------------------------------------------------------------------

namespace detail {
inline int round_coord(double v, int limit) {
    return clampi(static_cast<int>(std::nearbyint(v)), 0, limit - 1);
}
}  // namespace detail

template <typename T>
struct ScatterEntry {
    int traj = 0, step = 0;
    T x{}, y{};
    std::vector<T> z;  // C_l values
};

template <typename T>
Tensor<T> scatter_average(std::vector<ScatterEntry<T>> entries, int C, int H, int W) {
    std::stable_sort(entries.begin(), entries.end(),
                     [](const ScatterEntry<T>& a, const ScatterEntry<T>& b) {
                         return a.traj != b.traj ? a.traj < b.traj : a.step < b.step;
                     });
    Tensor<T> sum({C, H, W});
    Tensor<int> count({H, W});
    for (const auto& e : entries) {
        const int px = detail::round_coord(static_cast<double>(e.x), W);
        const int py = detail::round_coord(static_cast<double>(e.y), H);
        for (int c = 0; c < C; ++c)
            sum[(static_cast<std::size_t>(c) * H + py) * W + px] += e.z[static_cast<std::size_t>(c)];
        count[static_cast<std::size_t>(py) * W + px] += 1;
    }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int n = std::max(count[static_cast<std::size_t>(y) * W + x], 1);
            for (int c = 0; c < C; ++c)
                sum[(static_cast<std::size_t>(c) * H + y) * W + x] /= static_cast<T>(n);
        }
    return sum;
}

// Tape version: rows [L, C] already in canonical (trajectory, step) order,
// with one pre-rounded pixel per row.
template <typename T>
int scatter_average_rows(Tape<T>& tape, int rows, const std::vector<std::pair<int, int>>& pixels,
                         int H, int W) {
    const Tensor<T>& v = tape.value(rows);
    const int L = v.dim(0), C = v.dim(1);
    if (static_cast<std::size_t>(L) != pixels.size())
        throw ShapeError("scatter rows/pixels length mismatch");
    auto count = std::make_shared<Tensor<int>>(Shape{H, W});
    for (const auto& [px, py] : pixels) (*count)[static_cast<std::size_t>(py) * W + px] += 1;
    Tensor<T> out({C, H, W});
    for (int r = 0; r < L; ++r) {
        const auto [px, py] = pixels[static_cast<std::size_t>(r)];
        for (int c = 0; c < C; ++c)
            out[(static_cast<std::size_t>(c) * H + py) * W + px] += v.at(r, c);
    }
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const int n = std::max((*count)[static_cast<std::size_t>(y) * W + x], 1);
            for (int c = 0; c < C; ++c)
                out[(static_cast<std::size_t>(c) * H + y) * W + x] /= static_cast<T>(n);
        }
    const int id = tape.push_value(std::move(out), tape.needs_grad(rows));
    tape.register_backward(id, [rows, pixels, count, H, W, C, id](Tape<T>& t) {
        if (!t.needs_grad(rows)) return;
        Tensor<T>& gr = t.grad_buf(rows);
        const Tensor<T>& g = t.grad(id);
        for (std::size_t r = 0; r < pixels.size(); ++r) {
            const auto [px, py] = pixels[r];
            const T n = static_cast<T>((*count)[static_cast<std::size_t>(py) * W + px]);
            for (int c = 0; c < C; ++c)
                gr.at(static_cast<int>(r), c) +=
                    g[(static_cast<std::size_t>(c) * H + py) * W + px] / n;
        }
    });
    return id;
}

// ---------------------------------------------------------------------------
// Alignment and fusion.
// ---------------------------------------------------------------------------

// z rows = phi([y || f || word || sentence]) through a single linear map.
template <typename T>
int align_rows(Tape<T>& tape, int y, int f, int word, int sentence, int phi_w, int phi_b) {
    const int cat = tape.concat({y, f, word, sentence}, 1);
    if (tape.value(cat).dim(1) != tape.value(phi_w).dim(1))
        throw ConfigError("alignment projection width does not match its inputs");
    return tape.linear(cat, phi_w, phi_b);
}

// F_final = F + lambda * F_hat with a learnable scalar lambda.
template <typename T>
int fuse(Tape<T>& tape, int backbone, int enhanced, int lambda_id) {
    if (!tape.value(backbone).same_shape(tape.value(enhanced)))
        throw ShapeError("fuse expects matching shapes");
    return tape.add(backbone, tape.mul_scalar_param(enhanced, lambda_id));
}

// ---------------------------------------------------------------------------
// Full block.
// ---------------------------------------------------------------------------

struct TasbParamIds {
    Ss2dParamIds ss2d;        // grid-level contextual pass
    BottleneckParamIds traj;  // per-trajectory scan
    int phi_w = -1, phi_b = -1;
    int lambda_ = -1;  // scalar, one per stage
};

struct TasbOut {
    int fused = -1;     // F + lambda * F_hat
    int fhat = -1;      // enhancement map fed into fuse
    int ctx = -1;       // SS2D contextual map
    int scatter = -1;   // trajectory scatter map (-1 when no trajectories)
};

template <typename T>
TasbOut tasb_forward(Tape<T>& tape, int feat, const std::vector<Trajectory<T>>& trajectories,
                     const EmbeddingIds& emb, const TokenGrid& grid, int level, int stem_stride,
                     const TasbParamIds& p, const ScanFlags& flags, T ln_eps) {
    const int C = tape.value(feat).dim(0);
    const int H = tape.value(feat).dim(1);
    const int W = tape.value(feat).dim(2);
    TasbOut out;
    out.ctx = ss2d_op(tape, feat, p.ss2d, flags, ln_eps);

    if (trajectories.empty()) {
        out.fhat = out.ctx;
        out.fused = fuse(tape, feat, out.fhat, p.lambda_);
        return out;
    }

    const int m = grid.m;
    std::vector<int> zs;
    std::vector<std::pair<int, int>> pixels;
    for (const auto& traj : trajectories) {
        const int tokens = tape.sample_points(feat, traj.points);
        const int y = bottleneck_scan_op(tape, p.traj, tokens, flags);
        std::vector<int> word_rows, sentence_rows;
        word_rows.reserve(traj.points.size());
        sentence_rows.reserve(traj.points.size());
        for (const auto& pt : traj.points) {
            const WordRef ref = locate_stage_point(grid, pt.x, pt.y, level, stem_stride);
            word_rows.push_back(ref.sentence * m + ref.word);
            sentence_rows.push_back(ref.sentence);
            pixels.emplace_back(detail::round_coord(static_cast<double>(pt.x), W),
                                detail::round_coord(static_cast<double>(pt.y), H));
        }
        const int word = tape.gather_rows(emb.F_w, word_rows);
        const int sentence = tape.gather_rows(emb.F_s, sentence_rows);
        zs.push_back(align_rows(tape, y, tokens, word, sentence, p.phi_w, p.phi_b));
    }
    const int zall = zs.size() == 1 ? zs[0] : tape.concat(zs, 0);
    out.scatter = scatter_average_rows(tape, zall, pixels, H, W);
    out.fhat = tape.scale(tape.add(out.scatter, out.ctx), T(0.5));
    out.fused = fuse(tape, feat, out.fhat, p.lambda_);
    return out;
}

}  // namespace traceseg
