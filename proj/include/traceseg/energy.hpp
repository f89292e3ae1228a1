#pragma once

// Scalar perturbation-energy maps over feature maps, their spatial gradient
// fields, and seed selection at local maxima.

#include <algorithm>
#include <cmath>
#include <vector>

#include "traceseg/tape.hpp"
#include "traceseg/tensor.hpp"

namespace traceseg {

// E(x,y) = sum_c |F_c(x+1,y) - F_c(x-1,y)| + |F_c(x,y+1) - F_c(x,y-1)|,
// neighbors clamped at the border (replicate rule). feat: [C,H,W] -> [H,W].
template <typename T>
Tensor<T> energy_from_features(const Tensor<T>& feat) {
    if (feat.rank() != 3) throw ShapeError("energy expects CHW, got " + shape_str(feat.shape));
    const int C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
    if (H < 3 || W < 3) throw ShapeError("energy map needs H,W >= 3");
    Tensor<T> e({H, W});
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    for (int y = 0; y < H; ++y) {
        const int yu = y > 0 ? y - 1 : 0;
        const int yd = y < H - 1 ? y + 1 : H - 1;
        for (int x = 0; x < W; ++x) {
            const int xl = x > 0 ? x - 1 : 0;
            const int xr = x < W - 1 ? x + 1 : W - 1;
            // accumulation order (channels ascending, horizontal term before
            // vertical) is part of the contract so reruns are bit-stable
            T acc = T(0);
            for (int c = 0; c < C; ++c) {
                const T* pl = feat.ptr() + static_cast<std::size_t>(c) * plane;
                acc += std::abs(pl[y * W + xr] - pl[y * W + xl]);
                acc += std::abs(pl[yd * W + x] - pl[yu * W + x]);
            }
            e.at(y, x) = acc;
        }
    }
    return e;
}

// Gradient of the energy map w.r.t. the features. The absolute value uses the
// sign subgradient with sign(0) = 0.
template <typename T>
Tensor<T> energy_backward(const Tensor<T>& feat, const Tensor<T>& upstream) {
    const int C = feat.dim(0), H = feat.dim(1), W = feat.dim(2);
    Tensor<T> gf(feat.shape);
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    auto sgn = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
    for (int y = 0; y < H; ++y) {
        const int yu = y > 0 ? y - 1 : 0;
        const int yd = y < H - 1 ? y + 1 : H - 1;
        for (int x = 0; x < W; ++x) {
            const int xl = x > 0 ? x - 1 : 0;
            const int xr = x < W - 1 ? x + 1 : W - 1;
            const T u = upstream.at(y, x);
            if (u == T(0)) continue;
            for (int c = 0; c < C; ++c) {
                const T* pl = feat.ptr() + static_cast<std::size_t>(c) * plane;
                T* gp = gf.ptr() + static_cast<std::size_t>(c) * plane;
                const T sx = sgn(pl[y * W + xr] - pl[y * W + xl]);
                gp[y * W + xr] += sx * u;
                gp[y * W + xl] -= sx * u;
                const T sy = sgn(pl[yd * W + x] - pl[yu * W + x]);
                gp[yd * W + x] += sy * u;
                gp[yu * W + x] -= sy * u;
            }
        }
    }
    return gf;
}

// Tape node: [C,H,W] feature -> [H,W] energy map.
template <typename T>
int energy_map_op(Tape<T>& tape, int feat) {
    const int out = tape.push_value(energy_from_features(tape.value(feat)), tape.needs_grad(feat));
    tape.register_backward(out, [feat, out](Tape<T>& t) {
        t.accumulate(feat, energy_backward(t.value(feat), t.grad(out)));
    });
    return out;
}

enum class GradMode { central, sobel };

// [H,W] energy map -> [2,H,W] spatial gradient field (channel 0: d/dx,
// channel 1: d/dy), replicate boundaries. Sobel kernels are normalized by 1/8
// so both modes approximate the same derivative scale.
template <typename T>
Tensor<T> energy_gradient(const Tensor<T>& emap, GradMode mode) {
    if (emap.rank() != 2) throw ShapeError("energy_gradient expects HW");
    const int H = emap.dim(0), W = emap.dim(1);
    Tensor<T> g({2, H, W});
    auto at = [&](int y, int x) {
        y = detail::clampi(y, 0, H - 1);
        x = detail::clampi(x, 0, W - 1);
        return emap.at(y, x);
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (mode == GradMode::central) {
                g.at(0, y, x) = (at(y, x + 1) - at(y, x - 1)) / T(2);
                g.at(1, y, x) = (at(y + 1, x) - at(y - 1, x)) / T(2);
            } else {
                const T gx = (at(y - 1, x + 1) - at(y - 1, x - 1)) +
                             T(2) * (at(y, x + 1) - at(y, x - 1)) +
                             (at(y + 1, x + 1) - at(y + 1, x - 1));
                const T gy = (at(y + 1, x - 1) - at(y - 1, x - 1)) +
                             T(2) * (at(y + 1, x) - at(y - 1, x)) +
                             (at(y + 1, x + 1) - at(y - 1, x + 1));
                g.at(0, y, x) = gx / T(8);
                g.at(1, y, x) = gy / T(8);
            }
        }
    return g;
}

template <typename T>
struct Seed {
    int x, y;
    T energy;
};

// Local maxima of the energy map: a candidate is >= all 8 neighbors and
// strictly > at least one; flat plateaus contribute only their
// lexicographically smallest member. Candidates below
// min_energy_frac * max(E) are dropped, then greedy NMS with a Chebyshev
// radius keeps the strongest k_max, visiting in energy order (ties broken by
// (y,x) so the result is deterministic).
template <typename T>
std::vector<Seed<T>> select_seeds(const Tensor<T>& emap, int k_max, T min_energy_frac,
                                  int nms_radius) {
    if (emap.rank() != 2) throw ShapeError("select_seeds expects HW");
    if (k_max <= 0) return {};
    const int H = emap.dim(0), W = emap.dim(1);

    std::vector<Seed<T>> cands;
    T emax = T(0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const T v = emap.at(y, x);
            if (v > emax) emax = v;
            bool ge_all = true, gt_one = false;
            for (int dy = -1; dy <= 1 && ge_all; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    const int ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                    const T nv = emap.at(ny, nx);
                    if (v < nv) {
                        ge_all = false;
                        break;
                    }
                    if (v > nv) gt_one = true;
                }
            if (ge_all && gt_one) cands.push_back({x, y, v});
        }

    // Plateau dedupe: among equal-valued candidates that touch (8-adjacency),
    // only the first in (y,x) order survives. Candidates are generated in
    // (y,x) order already, so a union-find style sweep is unnecessary: drop a
    // candidate if an earlier-kept equal-valued candidate is adjacent to it
    // through a chain of kept equal-valued candidates. With the small k in
    // play, a direct component walk is clearest.
    std::vector<Seed<T>> dedup;
    std::vector<bool> used(cands.size(), false);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        if (used[i]) continue;
        // collect the connected equal-value component containing i
        std::vector<std::size_t> comp{i};
        used[i] = true;
        for (std::size_t qi = 0; qi < comp.size(); ++qi)
            for (std::size_t j = i + 1; j < cands.size(); ++j) {
                if (used[j] || cands[j].energy != cands[i].energy) continue;
                const int ddx = std::abs(cands[j].x - cands[comp[qi]].x);
                const int ddy = std::abs(cands[j].y - cands[comp[qi]].y);
                if (std::max(ddx, ddy) <= 1) {
                    used[j] = true;
                    comp.push_back(j);
                }
            }
        // comp[0] is the lexicographically smallest (generation order)
        dedup.push_back(cands[comp[0]]);
    }

    const T thresh = min_energy_frac * emax;
    std::vector<Seed<T>> strong;
    for (const auto& s : dedup)
        if (s.energy >= thresh && s.energy > T(0)) strong.push_back(s);

    std::sort(strong.begin(), strong.end(), [](const Seed<T>& a, const Seed<T>& b) {
        if (a.energy != b.energy) return a.energy > b.energy;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });

    std::vector<Seed<T>> out;
    for (const auto& s : strong) {
        bool ok = true;
        for (const auto& k : out)
            if (std::max(std::abs(s.x - k.x), std::abs(s.y - k.y)) <= nms_radius) {
                ok = false;
                break;
            }
        if (ok) {
            out.push_back(s);
            if (static_cast<int>(out.size()) == k_max) break;
        }
    }
    return out;
}

}  // namespace traceseg
