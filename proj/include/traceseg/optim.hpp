#pragma once

// Optimizers over the model's named-parameter map: Adam (default) and SGD
// with momentum, optional cosine learning-rate decay and global-norm gradient
// clipping. The state is keyed by parameter name so it serializes alongside
// checkpoints and restores exactly.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#include "traceseg/network.hpp"

namespace traceseg {

enum class OptKind { adam, sgd };

struct OptConfig {
    OptKind kind = OptKind::adam;
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;  // adam
    double momentum = 0.9;                          // sgd
    bool cosine = true;
    int total_steps = 1;     // cosine horizon
    double clip_norm = 5.0;  // 0 disables clipping
};

inline void validate(const OptConfig& c) {
    if (c.lr < 0.0) throw ConfigError("optimizer lr must be >= 0");
    if (c.total_steps < 1) throw ConfigError("optimizer total_steps must be >= 1");
    if (c.clip_norm < 0.0) throw ConfigError("optimizer clip_norm must be >= 0");
}

template <typename T>
struct OptState {
    std::uint64_t t = 0;                   // completed steps
    std::map<std::string, Tensor<T>> m;    // first moment / velocity
    std::map<std::string, Tensor<T>> v;    // second moment (adam only)
};

template <typename T>
double lr_at(const OptConfig& cfg, std::uint64_t step) {
    if (!cfg.cosine) return cfg.lr;
    const double frac =
        std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.total_steps));
    return cfg.lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

// In-place global-norm clip; returns the pre-clip norm.
template <typename T>
double clip_gradients(std::map<std::string, Tensor<T>>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads)
        for (std::size_t i = 0; i < g.numel(); ++i) {
            const double v = static_cast<double>(g.ptr()[i]);
            sq += v * v;
        }
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const T s = static_cast<T>(max_norm / norm);
        for (auto& [name, g] : grads)
            for (std::size_t i = 0; i < g.numel(); ++i) g.ptr()[i] *= s;
    }
    return norm;
}

// One update over every parameter that has a gradient entry.
template <typename T>
void optimizer_step(Model<T>& model, std::map<std::string, Tensor<T>>& grads, OptState<T>& state,
                    const OptConfig& cfg) {
    validate(cfg);
    if (cfg.clip_norm > 0.0) clip_gradients(grads, cfg.clip_norm);
    const double lr = lr_at<T>(cfg, state.t);

    for (auto& [name, p] : model.params) {
        const auto git = grads.find(name);
        if (git == grads.end()) continue;
        const Tensor<T>& g = git->second;
        if (!g.same_shape(p))
            throw ShapeError("gradient shape mismatch for '" + name + "'");

        Tensor<T>& m = state.m.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
        if (cfg.kind == OptKind::adam) {
            Tensor<T>& v = state.v.try_emplace(name, Tensor<T>::zeros(p.shape)).first->second;
            const double b1 = cfg.beta1, b2 = cfg.beta2;
            const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t + 1));
            const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t + 1));
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double gv = static_cast<double>(g.ptr()[i]);
                const double mv = b1 * static_cast<double>(m.ptr()[i]) + (1.0 - b1) * gv;
                const double vv = b2 * static_cast<double>(v.ptr()[i]) + (1.0 - b2) * gv * gv;
                m.ptr()[i] = static_cast<T>(mv);
                v.ptr()[i] = static_cast<T>(vv);
                const double mh = mv / bc1, vh = vv / bc2;
                p.ptr()[i] -= static_cast<T>(lr * mh / (std::sqrt(vh) + cfg.eps));
            }
        } else {
            for (std::size_t i = 0; i < p.numel(); ++i) {
                const double vel = cfg.momentum * static_cast<double>(m.ptr()[i]) -
                                   lr * static_cast<double>(g.ptr()[i]);
                m.ptr()[i] = static_cast<T>(vel);
                p.ptr()[i] += static_cast<T>(vel);
            }
        }
    }
    ++state.t;
    ++model.step;
}

}  // namespace traceseg
