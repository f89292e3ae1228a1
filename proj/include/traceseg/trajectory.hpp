#pragma once

// Gradient-following trajectory tracing over an energy map, plus token
// sampling along the traced points.

#include <cmath>
#include <vector>

#include "traceseg/energy.hpp"
#include "traceseg/kernels.hpp"
#include "traceseg/tensor.hpp"

namespace traceseg {

template <typename T>
struct TraceConfig {
    T eta = T(1);             // step size in pixels
    T epsilon = T(1e-6);      // stabilizer in the normalized step
    int l_max = 16;           // maximum trajectory length
    T decay_ratio = T(0.2);   // stop when energy falls below this fraction of the seed energy
};

template <typename T>
struct Trajectory {
    std::vector<Vec2<T>> points;  // stage-level continuous coordinates
    Tensor<T> tokens;             // [L, C] sampled feature rows
    T seed_energy = T(0);
    int stage = 0;
};

// One normalized-gradient ascent walk from `seed`.
//
//   p_{j+1} = p_j + eta * g(p_j) / (||g(p_j)|| + epsilon),  g bilinear in grad2
//
// clamped to the map box. Stops at l_max; when the interpolated gradient is
// stationary (||g|| < epsilon); when the candidate's energy decays below
// decay_ratio of the seed energy; or when the candidate fails to keep the
// ascent budget E(p_next) >= E(p_j) - eta*epsilon — the adaptive reading of
// the energy-decay stop, which also makes per-step ascent a structural
// guarantee.
template <typename T>
std::vector<Vec2<T>> trace(const Tensor<T>& emap, const Tensor<T>& grad2, Vec2<T> seed,
                           const TraceConfig<T>& cfg) {
    const int H = emap.dim(0), W = emap.dim(1);
    auto clamp_pt = [&](Vec2<T> p) {
        if (p.x < T(0)) p.x = T(0);
        if (p.x > static_cast<T>(W - 1)) p.x = static_cast<T>(W - 1);
        if (p.y < T(0)) p.y = T(0);
        if (p.y > static_cast<T>(H - 1)) p.y = static_cast<T>(H - 1);
        return p;
    };
    auto energy_at = [&](Vec2<T> p) {
        T e;
        bilinear_sample(emap.ptr(), 1, H, W, p, &e);
        return e;
    };

    std::vector<Vec2<T>> pts;
    Vec2<T> p = clamp_pt(seed);
    pts.push_back(p);
    const T e_seed = energy_at(p);
    T e_cur = e_seed;

    while (static_cast<int>(pts.size()) < cfg.l_max) {
        T g[2];
        bilinear_sample(grad2.ptr(), 2, H, W, p, g);
        const T norm = std::sqrt(g[0] * g[0] + g[1] * g[1]);
        if (norm < cfg.epsilon) break;  // stationary point
        const T step = cfg.eta / (norm + cfg.epsilon);
        Vec2<T> cand = clamp_pt({p.x + step * g[0], p.y + step * g[1]});
        const T e_next = energy_at(cand);
        if (e_next < cfg.decay_ratio * e_seed) break;          // energy decayed away
        if (e_next < e_cur - cfg.eta * cfg.epsilon) break;     // would descend
        p = cand;
        e_cur = e_next;
        pts.push_back(p);
    }
    return pts;
}

// Row j = bilinear sample of `feature` at points[j]. feature: [C,H,W].
template <typename T>
Tensor<T> sample_tokens(const Tensor<T>& feature, const std::vector<Vec2<T>>& points) {
    if (points.empty()) throw ShapeError("sample_tokens needs at least one point");
    const int C = feature.dim(0), H = feature.dim(1), W = feature.dim(2);
    Tensor<T> out({static_cast<int>(points.size()), C});
    for (std::size_t i = 0; i < points.size(); ++i)
        bilinear_sample(feature.ptr(), C, H, W, points[i], out.ptr() + i * C);
    return out;
}

// Trace every seed (already in energy-descending order) and attach token rows.
template <typename T>
std::vector<Trajectory<T>> extract_all(const Tensor<T>& feature, const Tensor<T>& emap,
                                       const Tensor<T>& grad2, const std::vector<Seed<T>>& seeds,
                                       const TraceConfig<T>& cfg, int stage) {
    std::vector<Trajectory<T>> out;
    out.reserve(seeds.size());
    for (const auto& s : seeds) {
        Trajectory<T> tr;
        tr.points = trace(emap, grad2, Vec2<T>{static_cast<T>(s.x), static_cast<T>(s.y)}, cfg);
        tr.tokens = sample_tokens(feature, tr.points);
        tr.seed_energy = s.energy;
        tr.stage = stage;
        out.push_back(std::move(tr));
    }
    return out;
}

}  // namespace traceseg
