#pragma once

// Segmentation quality metrics: whole-set IoU, per-target normalized IoU,
// detection probability via centroid matching, and false-alarm rate.
// Components use 8-connectivity.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "traceseg/tensor.hpp"

namespace traceseg {

struct Component {
    std::vector<int> pixels;  // flat y*W + x indices
    double cx = 0.0, cy = 0.0;
};

// 8-connected components of the nonzero pixels of a binary [H,W] view.
inline std::vector<Component> connected_components(const std::vector<std::uint8_t>& mask, int H,
                                                   int W) {
    std::vector<Component> comps;
    std::vector<int> label(static_cast<std::size_t>(H) * W, -1);
    std::vector<int> queue;
    for (int y0 = 0; y0 < H; ++y0)
        for (int x0 = 0; x0 < W; ++x0) {
            const int start = y0 * W + x0;
            if (!mask[static_cast<std::size_t>(start)] || label[static_cast<std::size_t>(start)] >= 0)
                continue;
            const int id = static_cast<int>(comps.size());
            comps.emplace_back();
            queue.clear();
            queue.push_back(start);
            label[static_cast<std::size_t>(start)] = id;
            for (std::size_t qi = 0; qi < queue.size(); ++qi) {
                const int cur = queue[qi];
                const int cy = cur / W, cx = cur % W;
                comps[static_cast<std::size_t>(id)].pixels.push_back(cur);
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) {
                        if (dy == 0 && dx == 0) continue;
                        const int ny = cy + dy, nx = cx + dx;
                        if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                        const int ni = ny * W + nx;
                        if (!mask[static_cast<std::size_t>(ni)] ||
                            label[static_cast<std::size_t>(ni)] >= 0)
                            continue;
                        label[static_cast<std::size_t>(ni)] = id;
                        queue.push_back(ni);
                    }
            }
        }
    for (auto& c : comps) {
        double sx = 0.0, sy = 0.0;
        for (const int p : c.pixels) {
            sx += p % W;
            sy += p / W;
        }
        c.cx = sx / static_cast<double>(c.pixels.size());
        c.cy = sy / static_cast<double>(c.pixels.size());
    }
    return comps;
}

struct MetricReport {
    double iou = 0.0, niou = 0.0, pd = 0.0, fa = 0.0;  // fractions in [0,1]
    std::uint64_t tp = 0, fp = 0, fn = 0;              // pixel counts
    int targets_total = 0, targets_detected = 0;
    std::uint64_t fa_pixels = 0;

    std::string text() const {
        char buf[512];
        std::snprintf(buf, sizeof(buf),
                      "IoU        %8.4f %%\n"
                      "nIoU       %8.4f %%\n"
                      "Pd         %8.4f %%\n"
                      "Fa         %8.6f %%\n"
                      "pixels     TP=%llu FP=%llu FN=%llu\n"
                      "targets    detected=%d / %d\n"
                      "false-alarm pixels %llu\n",
                      iou * 100.0, niou * 100.0, pd * 100.0, fa * 100.0,
                      static_cast<unsigned long long>(tp), static_cast<unsigned long long>(fp),
                      static_cast<unsigned long long>(fn), targets_detected, targets_total,
                      static_cast<unsigned long long>(fa_pixels));
        return std::string(buf);
    }
};

// Accumulates matched pixel/target counts across a dataset, then reports.
struct MetricAccum {
    std::uint64_t tp = 0, fp = 0, fn = 0, total_pixels = 0;
    int targets_total = 0, targets_detected = 0;
    double niou_sum = 0.0;
    int niou_terms = 0;
    bool any_pred_on_empty = false;
    double match_radius = 3.0;

    // pred: probabilities, gt: {0,1}; both [H,W] or [1,H,W].
    template <typename T>
    void add(const Tensor<T>& pred, const Tensor<T>& gt, T threshold) {
        auto hw = [](const Tensor<T>& t) {
            if (t.rank() == 3 && t.dim(0) == 1) return std::pair<int, int>{t.dim(1), t.dim(2)};
            if (t.rank() == 2) return std::pair<int, int>{t.dim(0), t.dim(1)};
            throw ShapeError("metrics expect [H,W] or [1,H,W], got " + shape_str(t.shape));
        };
        const auto [H, W] = hw(pred);
        const auto [Hg, Wg] = hw(gt);
        if (H != Hg || W != Wg)
            throw ShapeError("metrics size mismatch: " + shape_str(pred.shape) + " vs " +
                             shape_str(gt.shape));

        const std::size_t n = static_cast<std::size_t>(H) * W;
        std::vector<std::uint8_t> pm(n), gm(n);
        for (std::size_t i = 0; i < n; ++i) {
            pm[i] = pred.ptr()[i] > threshold ? 1 : 0;
            gm[i] = gt.ptr()[i] > T(0.5) ? 1 : 0;
            if (pm[i] && gm[i]) ++tp;
            else if (pm[i]) ++fp;
            else if (gm[i]) ++fn;
        }
        total_pixels += n;

        const auto gcomps = connected_components(gm, H, W);
        const auto pcomps = connected_components(pm, H, W);
        targets_total += static_cast<int>(gcomps.size());
        if (gcomps.empty() && !pcomps.empty()) any_pred_on_empty = true;

        // pixel -> predicted component id
        std::vector<int> plabel(n, -1);
        for (std::size_t c = 0; c < pcomps.size(); ++c)
            for (const int p : pcomps[c].pixels) plabel[static_cast<std::size_t>(p)] = static_cast<int>(c);

        for (const auto& g : gcomps) {
            // union of predicted components overlapping this target
            std::vector<std::uint8_t> in_union(pcomps.size(), 0);
            for (const int p : g.pixels) {
                const int pc = plabel[static_cast<std::size_t>(p)];
                if (pc >= 0) in_union[static_cast<std::size_t>(pc)] = 1;
            }
            std::uint64_t upix = 0, ipix = 0;
            for (std::size_t c = 0; c < pcomps.size(); ++c)
                if (in_union[c]) upix += pcomps[c].pixels.size();
            for (const int p : g.pixels) {
                const int pc = plabel[static_cast<std::size_t>(p)];
                if (pc >= 0 && in_union[static_cast<std::size_t>(pc)]) ++ipix;
            }
            const std::uint64_t uni = upix + g.pixels.size() - ipix;
            niou_sum += uni == 0 ? 0.0 : static_cast<double>(ipix) / static_cast<double>(uni);
            ++niou_terms;

            // centroid match within the radius
            bool hit = false;
            for (const auto& p : pcomps) {
                const double dx = p.cx - g.cx, dy = p.cy - g.cy;
                if (std::sqrt(dx * dx + dy * dy) <= match_radius) {
                    hit = true;
                    break;
                }
            }
            if (hit) ++targets_detected;
        }
    }

    MetricReport report() const {
        MetricReport r;
        r.tp = tp;
        r.fp = fp;
        r.fn = fn;
        const std::uint64_t uni = tp + fp + fn;
        r.iou = uni == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(uni);
        r.niou = niou_terms > 0 ? niou_sum / niou_terms : (any_pred_on_empty ? 0.0 : 1.0);
        r.targets_total = targets_total;
        r.targets_detected = targets_detected;
        r.pd = targets_total > 0 ? static_cast<double>(targets_detected) / targets_total
                                 : (any_pred_on_empty ? 0.0 : 1.0);
        r.fa_pixels = fp;
        r.fa = total_pixels == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(total_pixels);
        return r;
    }
};

template <typename T>
MetricReport compute_metrics(const Tensor<T>& pred, const Tensor<T>& gt, T threshold) {
    MetricAccum acc;
    acc.add(pred, gt, threshold);
    return acc.report();
}

}  // namespace traceseg
