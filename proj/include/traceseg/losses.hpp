#pragma once

// Training losses as fused tape operations: a BCE-with-logits + soft-Dice
// segmentation loss and a clamped BCE-on-probabilities auxiliary loss.
// Per-element accumulation runs in double regardless of the working precision
// so the reductions stay deterministic and accurate.

#include <cmath>
#include <memory>

#include "traceseg/tape.hpp"

namespace traceseg {

// mean BCE(sigmoid(z), t) + alpha * (1 - (2*sum(p t)+1)/(sum p + sum t + 1))
template <typename T>
int seg_loss_op(Tape<T>& tape, int logits, const Tensor<T>& target, T alpha) {
    const Tensor<T>& z = tape.value(logits);
    if (!z.same_shape(target))
        throw ShapeError("seg_loss target shape " + shape_str(target.shape) +
                         " does not match logits " + shape_str(z.shape));
    const std::size_t n = z.numel();
    if (n == 0) throw ShapeError("seg_loss on an empty tensor");

    auto probs = std::make_shared<Tensor<T>>(z.shape);
    double bce = 0.0, inter = 0.0, psum = 0.0, tsum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double zv = static_cast<double>(z.ptr()[i]);
        const double tv = static_cast<double>(target.ptr()[i]);
        bce += std::max(zv, 0.0) - zv * tv + std::log1p(std::exp(-std::abs(zv)));
        const double p = 1.0 / (1.0 + std::exp(-zv));
        probs->ptr()[i] = static_cast<T>(p);
        inter += p * tv;
        psum += p;
        tsum += tv;
    }
    const double denom = psum + tsum + 1.0;
    const double dice = 1.0 - (2.0 * inter + 1.0) / denom;
    const double loss = bce / static_cast<double>(n) + static_cast<double>(alpha) * dice;

    Tensor<T> y({1});
    y.ptr()[0] = static_cast<T>(loss);
    const int out = tape.push_value(std::move(y), tape.needs_grad(logits));
    if (tape.needs_grad(logits)) {
        auto tgt = std::make_shared<Tensor<T>>(target);
        tape.register_backward(out, [logits, out, probs, tgt, alpha, n, inter, denom](Tape<T>& t) {
            const T g = t.grad(out).ptr()[0];
            Tensor<T>& gz = t.grad_buf(logits);
            const double inv_n = 1.0 / static_cast<double>(n);
            const double num = 2.0 * inter + 1.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double p = static_cast<double>(probs->ptr()[i]);
                const double tv = static_cast<double>(tgt->ptr()[i]);
                // d(mean BCE)/dz = (p - t)/n
                double d = (p - tv) * inv_n;
                // d(dice score)/dp, then chain through dp/dz = p(1-p)
                const double ds_dp = (2.0 * tv * denom - num) / (denom * denom);
                d += static_cast<double>(alpha) * (-ds_dp) * p * (1.0 - p);
                gz.ptr()[i] += g * static_cast<T>(d);
            }
        });
    }
    return out;
}

// mean BCE(clamp(p), t) with probabilities clamped to [lo, 1-lo].
template <typename T>
int prob_bce_loss_op(Tape<T>& tape, int probs, const Tensor<T>& target, T lo = T(1e-7)) {
    const Tensor<T>& p = tape.value(probs);
    if (!p.same_shape(target))
        throw ShapeError("prob_bce_loss target shape " + shape_str(target.shape) +
                         " does not match probabilities " + shape_str(p.shape));
    const std::size_t n = p.numel();
    if (n == 0) throw ShapeError("prob_bce_loss on an empty tensor");

    const double lod = static_cast<double>(lo), hid = 1.0 - lod;
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double pv =
            std::min(std::max(static_cast<double>(p.ptr()[i]), lod), hid);
        const double tv = static_cast<double>(target.ptr()[i]);
        acc += -(tv * std::log(pv) + (1.0 - tv) * std::log(1.0 - pv));
    }
    Tensor<T> y({1});
    y.ptr()[0] = static_cast<T>(acc / static_cast<double>(n));
    const bool ng = tape.needs_grad(probs);
    // copy the probabilities before push_value: the push can reallocate the
    // tape's storage and invalidate the `p` reference
    std::shared_ptr<Tensor<T>> pin;
    if (ng) pin = std::make_shared<Tensor<T>>(p);
    const int out = tape.push_value(std::move(y), ng);
    if (ng) {
        auto tgt = std::make_shared<Tensor<T>>(target);
        tape.register_backward(out, [probs, out, pin, tgt, lod, hid, n](Tape<T>& t) {
            const T g = t.grad(out).ptr()[0];
            Tensor<T>& gp = t.grad_buf(probs);
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double pv = static_cast<double>(pin->ptr()[i]);
                if (pv <= lod || pv >= hid) continue;  // clamped: flat region
                const double tv = static_cast<double>(tgt->ptr()[i]);
                const double d = (pv - tv) / (pv * (1.0 - pv)) * inv_n;
                gp.ptr()[i] += g * static_cast<T>(d);
            }
        });
    }
    return out;
}

}  // namespace traceseg
