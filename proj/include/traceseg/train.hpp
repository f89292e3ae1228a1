#pragma once

// Training loop: shuffled mini-batches, combined segmentation + response
// loss, Adam/SGD updates with cosine decay, per-epoch evaluation and
// checkpointing. Everything is driven by explicit seeds so two runs with the
// same configuration produce bit-identical loss curves.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "traceseg/checkpoint.hpp"
#include "traceseg/losses.hpp"
#include "traceseg/metrics.hpp"
#include "traceseg/network.hpp"
#include "traceseg/optim.hpp"
#include "traceseg/synth.hpp"

namespace traceseg {

struct TrainConfig {
    double alpha = 0.5;         // area-overlap term weight inside the segmentation loss
    double beta = 0.1;          // response-loss weight in the total
    OptConfig opt;              // optimizer; total_steps is overwritten by train()
    int epochs = 30;
    int batch_size = 8;
    std::uint64_t seed = 0;     // shuffle stream
    std::string out_dir;        // empty: keep everything in memory, write nothing
    bool save_epochs = true;    // write epoch_NNN.ckpt after each epoch
    double eval_threshold = 0.5;
};

inline void validate(const TrainConfig& cfg) {
    if (cfg.alpha < 0.0 || cfg.beta < 0.0)
        throw ConfigError("loss weights must be non-negative, got alpha=" +
                          std::to_string(cfg.alpha) + " beta=" + std::to_string(cfg.beta));
    if (cfg.epochs < 1) throw ConfigError("epochs must be >= 1");
    if (cfg.batch_size < 1) throw ConfigError("batch size must be >= 1");
    validate(cfg.opt);
}

struct TrainResult {
    std::vector<double> loss_curve;      // one entry per optimizer step
    std::vector<MetricReport> reports;   // one entry per completed epoch
    int start_epoch = 0;                 // first epoch this call actually ran
};

namespace detail {

// Stack sample images/masks into one [N,3,H,W] / [N,1,H,W] pair.
template <typename T>
void stack_batch(const std::vector<Sample>& set, const std::vector<int>& order, std::size_t lo,
                 std::size_t hi, Tensor<T>& images, Tensor<T>& masks) {
    const int n = static_cast<int>(hi - lo);
    const auto& first = set[static_cast<std::size_t>(order[lo])];
    const int H = first.image.dim(1), W = first.image.dim(2);
    images = Tensor<T>({n, 3, H, W});
    masks = Tensor<T>({n, 1, H, W});
    for (int i = 0; i < n; ++i) {
        const Sample& s = set[static_cast<std::size_t>(order[lo + static_cast<std::size_t>(i)])];
        if (s.image.shape != first.image.shape || s.mask.shape != Shape({1, H, W}))
            throw ShapeError("all samples in a batch must share one size, got " +
                             shape_str(s.image.shape) + " after " + shape_str(first.image.shape));
        for (std::size_t j = 0; j < s.image.numel(); ++j)
            images.data[static_cast<std::size_t>(i) * s.image.numel() + j] =
                static_cast<T>(s.image.data[j]);
        for (std::size_t j = 0; j < s.mask.numel(); ++j)
            masks.data[static_cast<std::size_t>(i) * s.mask.numel() + j] =
                static_cast<T>(s.mask.data[j]);
    }
}

}  // namespace detail

// One combined forward/loss evaluation. Returns the loss node id; the caller
// decides whether to run backward.
template <typename T>
int total_loss_op(Tape<T>& tape, Model<T>& model, const Tensor<T>& images, const Tensor<T>& masks,
                  const TrainConfig& cfg, bool training, ForwardResult<T>* out_fr = nullptr) {
    ForwardResult<T> fr = model_forward(tape, model, tape.constant(images), training);
    int loss = seg_loss_op(tape, fr.logits, masks, static_cast<T>(cfg.alpha));
    if (model.cfg.use_pgm && cfg.beta > 0.0) {
        const int pgm = prob_bce_loss_op(tape, fr.response, masks);
        loss = tape.add_scaled(loss, pgm, static_cast<T>(cfg.beta));
    }
    if (out_fr) *out_fr = std::move(fr);
    return loss;
}

// Segmentation metrics of the current model over a sample set; forward passes
// run in inference mode, so calling this never changes the model.
template <typename T>
MetricReport evaluate(Model<T>& model, const std::vector<Sample>& set, double threshold = 0.5) {
    MetricAccum acc;
    for (const Sample& s : set) {
        Tensor<T> img({1, s.image.dim(0), s.image.dim(1), s.image.dim(2)});
        for (std::size_t j = 0; j < s.image.numel(); ++j)
            img.data[j] = static_cast<T>(s.image.data[j]);
        Tape<T> tape;
        const ForwardResult<T> fr =
            model_forward(tape, model, tape.constant(std::move(img)), /*training=*/false);
        const Tensor<T>& logits = tape.value(fr.logits);
        Tensor<float> prob({s.image.dim(1), s.image.dim(2)});
        for (std::size_t j = 0; j < prob.numel(); ++j)
            prob.data[j] =
                static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[j]))));
        acc.add(prob, s.mask, static_cast<float>(threshold));
    }
    return acc.report();
}

// Runs (the remainder of) a training schedule. When `state` carries a
// non-zero step count from a loaded checkpoint, the completed epochs are
// inferred from it and training resumes at the next one; the loss curve and
// reports then cover only the epochs this call executed.
template <typename T>
TrainResult train(Model<T>& model, const std::vector<Sample>& train_set,
                  const std::vector<Sample>& eval_set, const TrainConfig& cfg,
                  OptState<T>* state = nullptr) {
    validate(cfg);
    if (train_set.empty()) throw DataError("training set is empty");

    OptState<T> local;
    OptState<T>& opt_state = state ? *state : local;

    const std::size_t n = train_set.size();
    const std::size_t steps_per_epoch = (n + static_cast<std::size_t>(cfg.batch_size) - 1) /
                                        static_cast<std::size_t>(cfg.batch_size);
    OptConfig oc = cfg.opt;
    oc.total_steps = cfg.epochs * static_cast<int>(steps_per_epoch);

    TrainResult result;
    result.start_epoch = static_cast<int>(opt_state.t / steps_per_epoch);
    if (result.start_epoch > cfg.epochs)
        throw ConfigError("checkpoint has completed " + std::to_string(result.start_epoch) +
                          " epochs but the schedule only has " + std::to_string(cfg.epochs));

    if (!cfg.out_dir.empty()) std::filesystem::create_directories(cfg.out_dir);

    std::vector<int> order(n);

    for (int epoch = result.start_epoch; epoch < cfg.epochs; ++epoch) {
        // deterministic per-epoch shuffle, independent of how we got here:
        // rebuild the identity order first so the permutation is a function of
        // (seed, epoch) alone, not of which epochs this call happened to run
        for (std::size_t i = 0; i < n; ++i) order[i] = static_cast<int>(i);
        Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch)));
        std::shuffle(order.begin(), order.end(), shuffle_rng.engine);

        for (std::size_t lo = 0, batch = 0; lo < n; lo += static_cast<std::size_t>(cfg.batch_size), ++batch) {
            const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch_size));
            Tensor<T> images, masks;
            detail::stack_batch(train_set, order, lo, hi, images, masks);

            Tape<T> tape;
            ForwardResult<T> fr;
            const int loss = total_loss_op(tape, model, images, masks, cfg, /*training=*/true, &fr);
            const double loss_val = static_cast<double>(tape.value(loss).data[0]);
            if (!std::isfinite(loss_val))
                throw NumericError("non-finite loss " + std::to_string(loss_val) + " at epoch " +
                                   std::to_string(epoch) + ", batch " + std::to_string(batch));
            tape.backward(loss);

            // parameters the graph never touched simply get no update
            std::map<std::string, Tensor<T>> grads;
            for (const auto& [name, id] : fr.param_ids)
                if (tape.has_grad(id)) grads.emplace(name, tape.grad(id));

            optimizer_step(model, grads, opt_state, oc);
            result.loss_curve.push_back(loss_val);
        }

        result.reports.push_back(evaluate(model, eval_set, cfg.eval_threshold));

        if (!cfg.out_dir.empty() && cfg.save_epochs) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "epoch_%03d.ckpt", epoch + 1);
            save_checkpoint(model, cfg.out_dir + "/" + buf, &opt_state);
        }
    }

    if (!cfg.out_dir.empty()) save_checkpoint(model, cfg.out_dir + "/final.ckpt", &opt_state);
    return result;
}

}  // namespace traceseg
