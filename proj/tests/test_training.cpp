#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <numeric>

#include "traceseg/train.hpp"
#include "test_util.hpp"

using namespace traceseg;
using Catch::Matchers::WithinAbs;

namespace ref {

// Independent metrics oracle built on union-find instead of BFS so the two
// implementations cannot share a labeling bug.
struct Dsu {
    std::vector<int> parent;
    explicit Dsu(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int a) { return parent[a] == a ? a : parent[a] = find(parent[a]); }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};

struct Comp {
    std::vector<int> pix;
    double cx = 0, cy = 0;
};

std::vector<Comp> components(const std::vector<std::uint8_t>& m, int H, int W) {
    Dsu dsu(H * W);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            if (!m[y * W + x]) continue;
            const int off[8][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1},
                                   {0, 1},  {1, -1}, {1, 0},  {1, 1}};
            for (const auto& d : off) {
                const int ny = y + d[0], nx = x + d[1];
                if (ny < 0 || ny >= H || nx < 0 || nx >= W || !m[ny * W + nx]) continue;
                dsu.unite(y * W + x, ny * W + nx);
            }
        }
    std::map<int, Comp> by_root;
    for (int i = 0; i < H * W; ++i)
        if (m[i]) by_root[dsu.find(i)].pix.push_back(i);
    std::vector<Comp> out;
    for (auto& [root, c] : by_root) {
        for (int p : c.pix) {
            c.cx += p % W;
            c.cy += p / W;
        }
        c.cx /= c.pix.size();
        c.cy /= c.pix.size();
        out.push_back(std::move(c));
    }
    return out;
}

struct Metrics {
    double iou, niou, pd, fa;
};

Metrics metrics(const std::vector<std::uint8_t>& pm, const std::vector<std::uint8_t>& gm, int H,
                int W) {
    long tp = 0, fp = 0, fn = 0;
    for (int i = 0; i < H * W; ++i) {
        tp += pm[i] && gm[i];
        fp += pm[i] && !gm[i];
        fn += !pm[i] && gm[i];
    }
    const auto gc = components(gm, H, W), pc = components(pm, H, W);

    Metrics r{};
    r.iou = (tp + fp + fn) == 0 ? 1.0 : double(tp) / double(tp + fp + fn);
    r.fa = double(fp) / (H * W);

    if (gc.empty()) {
        r.niou = pc.empty() ? 1.0 : 0.0;
        r.pd = pc.empty() ? 1.0 : 0.0;
        return r;
    }
    double niou_sum = 0.0;
    int detected = 0;
    for (const auto& g : gc) {
        std::set<int> gset(g.pix.begin(), g.pix.end());
        long ipix = 0, upix_pred = 0;
        for (const auto& p : pc) {
            bool overlaps = false;
            long inter = 0;
            for (int q : p.pix)
                if (gset.count(q)) {
                    overlaps = true;
                    ++inter;
                }
            if (overlaps) {
                ipix += inter;
                upix_pred += static_cast<long>(p.pix.size());
            }
        }
        const long uni = upix_pred + static_cast<long>(g.pix.size()) - ipix;
        niou_sum += uni == 0 ? 0.0 : double(ipix) / double(uni);
        for (const auto& p : pc) {
            const double dx = p.cx - g.cx, dy = p.cy - g.cy;
            if (std::sqrt(dx * dx + dy * dy) <= 3.0) {
                ++detected;
                break;
            }
        }
    }
    r.niou = niou_sum / static_cast<double>(gc.size());
    r.pd = double(detected) / static_cast<double>(gc.size());
    return r;
}

}  // namespace ref

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.height = 16;
    cfg.width = 16;
    cfg.channels = {4, 4, 8, 8};
    cfg.blocks_per_stage = 1;
    cfg.ssm_state = 4;
    cfg.ssm_ratio = 2;
    cfg.token_n = 4;
    cfg.token_m = 4;
    cfg.token_channels = 4;
    cfg.seed_k_max = 2;
    for (auto& t : cfg.trace) t.l_max = 3;
    return cfg;
}

Tensor<float> binary_tensor(const std::vector<std::uint8_t>& m, int H, int W) {
    Tensor<float> t({H, W});
    for (int i = 0; i < H * W; ++i) t[i] = m[i] ? 1.0f : 0.0f;
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses.
// ---------------------------------------------------------------------------

TEST_CASE("a confident correct prediction has near-zero segmentation loss") {
    Tape<float> tape;
    Tensor<float> target({1, 1, 6, 6});
    Tensor<float> z({1, 1, 6, 6});
    Rng rng(4);
    for (std::size_t i = 0; i < target.numel(); ++i) {
        target[i] = rng.uniform() < 0.4 ? 1.0f : 0.0f;
        z[i] = target[i] > 0.5f ? 20.0f : -20.0f;
    }
    const int zi = tape.leaf(std::move(z), false);
    const int loss = seg_loss_op(tape, zi, target, 0.5f);
    CHECK(tape.value(loss)[0] < 1e-5f);
}

TEST_CASE("zero logits on a half-ones target give exactly ln 2 of cross-entropy") {
    Tape<double> tape;
    Tensor<double> z({1, 1, 4, 4});  // all zeros -> p = 0.5 everywhere
    Tensor<double> t({1, 1, 4, 4});
    for (int i = 0; i < 8; ++i) t[i] = 1.0;
    const int zi = tape.leaf(std::move(z), false);
    const int loss = seg_loss_op(tape, zi, t, 0.0);
    CHECK_THAT(tape.value(loss)[0], WithinAbs(std::log(2.0), 1e-14));
}

TEST_CASE("segmentation loss matches an independent transcription") {
    Rng rng(9);
    Tensor<double> z({64});
    Tensor<double> t({64});
    for (int i = 0; i < 64; ++i) {
        z[i] = rng.uniform(-3.0, 3.0);
        t[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    const double alpha = 0.7;

    double bce = 0, inter = 0, ps = 0, ts = 0;
    for (int i = 0; i < 64; ++i) {
        const double p = 1.0 / (1.0 + std::exp(-z[i]));
        bce += -(t[i] * std::log(p) + (1.0 - t[i]) * std::log(1.0 - p));
        inter += p * t[i];
        ps += p;
        ts += t[i];
    }
    const double want = bce / 64.0 + alpha * (1.0 - (2.0 * inter + 1.0) / (ps + ts + 1.0));

    Tape<double> tape;
    const int zi = tape.leaf(z, false);
    const int loss = seg_loss_op(tape, zi, t, alpha);
    CHECK_THAT(tape.value(loss)[0], WithinAbs(want, 1e-12));
}

TEST_CASE("segmentation loss gradient agrees with finite differences") {
    Rng rng(10);
    Tensor<double> z({40});
    Tensor<double> t({40});
    for (int i = 0; i < 40; ++i) {
        z[i] = rng.uniform(-2.0, 2.0);
        t[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    Tape<double> tape;
    const int zi = tape.leaf(z, true);
    const int loss = seg_loss_op(tape, zi, t, 0.5);
    tape.backward(loss);
    const Tensor<double> analytic = tape.grad(zi);

    const Tensor<double> fd = tst::fd_grad(z, 1e-6, [&]() {
        Tape<double> tp;
        const int id = tp.leaf(z, false);
        return tp.value(seg_loss_op(tp, id, t, 0.5))[0];
    });
    CHECK(tst::grad_rel_err(analytic, fd) < 1e-7);
}

TEST_CASE("probability cross-entropy handles clamped endpoints") {
    Tape<double> tape;
    Tensor<double> p({3});
    p[0] = 0.8;
    p[1] = 1.0;  // clamps to 1 - 1e-7
    p[2] = 0.0;  // clamps to 1e-7
    Tensor<double> t({3});
    t[0] = 1.0;
    t[1] = 0.0;
    t[2] = 1.0;
    const int pi = tape.leaf(p, true);
    const int loss = prob_bce_loss_op(tape, pi, t);
    const double want =
        (-std::log(0.8) - std::log(1.0 - (1.0 - 1e-7)) - std::log(1e-7)) / 3.0;
    CHECK_THAT(tape.value(loss)[0], WithinAbs(want, 1e-9));

    tape.backward(loss);
    const Tensor<double>& g = tape.grad(pi);
    // interior element: (p - t) / (p (1-p)) / n
    CHECK_THAT(g[0], WithinAbs((0.8 - 1.0) / (0.8 * 0.2) / 3.0, 1e-12));
    // clamped elements sit on a flat region
    CHECK(g[1] == 0.0);
    CHECK(g[2] == 0.0);
}

TEST_CASE("probability cross-entropy gradient agrees with finite differences") {
    Rng rng(11);
    Tensor<double> p({30});
    Tensor<double> t({30});
    for (int i = 0; i < 30; ++i) {
        p[i] = rng.uniform(0.05, 0.95);
        t[i] = rng.uniform() < 0.5 ? 1.0 : 0.0;
    }
    Tape<double> tape;
    const int pi = tape.leaf(p, true);
    const int loss = prob_bce_loss_op(tape, pi, t);
    tape.backward(loss);
    const Tensor<double> analytic = tape.grad(pi);

    const Tensor<double> fd = tst::fd_grad(p, 1e-6, [&]() {
        Tape<double> tp;
        return tp.value(prob_bce_loss_op(tp, tp.leaf(p, false), t))[0];
    });
    CHECK(tst::grad_rel_err(analytic, fd) < 1e-7);
}

TEST_CASE("the total loss is the segmentation term plus beta times the response term") {
    const ModelConfig cfg = tiny_cfg();
    Model<float> model(cfg, 31);
    const Dataset ds = make_dataset(3, 16, 0.2, 5);  // 2 train + 1 test
    REQUIRE(ds.train.size() == 2);
    Tensor<float> images, masks;
    std::vector<int> order{0, 1};
    detail::stack_batch(ds.train, order, 0, 2, images, masks);

    TrainConfig tc;
    tc.alpha = 0.5;

    auto loss_at = [&](double beta) {
        TrainConfig c = tc;
        c.beta = beta;
        Tape<float> tape;
        return static_cast<double>(
            tape.value(total_loss_op(tape, model, images, masks, c, false))[0]);
    };
    const double seg_only = loss_at(0.0);

    // isolate the response term with a direct forward pass
    Tape<float> tape;
    const ForwardResult<float> fr = model_forward(tape, model, tape.constant(images), false);
    const double pgm_only =
        static_cast<double>(tape.value(prob_bce_loss_op(tape, fr.response, masks))[0]);

    CHECK_THAT(loss_at(0.3), WithinAbs(seg_only + 0.3 * pgm_only, 1e-6));
    CHECK_THAT(loss_at(1.0), WithinAbs(seg_only + pgm_only, 1e-6));
}

TEST_CASE("loss shape mismatches are rejected") {
    Tape<float> tape;
    Tensor<float> z({2, 2});
    const int zi = tape.leaf(z, false);
    Tensor<float> bad({3, 2});
    CHECK_THROWS_AS(seg_loss_op(tape, zi, bad, 0.5f), ShapeError);
    CHECK_THROWS_AS(prob_bce_loss_op(tape, zi, bad), ShapeError);
}

// ---------------------------------------------------------------------------
// Metrics.
// ---------------------------------------------------------------------------

TEST_CASE("a perfect prediction scores perfectly") {
    std::vector<std::uint8_t> m(9 * 9, 0);
    for (int y = 3; y <= 5; ++y)
        for (int x = 3; x <= 5; ++x) m[y * 9 + x] = 1;
    const Tensor<float> t = binary_tensor(m, 9, 9);
    const MetricReport r = compute_metrics(t, t, 0.5f);
    CHECK(r.iou == 1.0);
    CHECK(r.niou == 1.0);
    CHECK(r.pd == 1.0);
    CHECK(r.fa == 0.0);
    CHECK(r.targets_total == 1);
    CHECK(r.targets_detected == 1);
}

TEST_CASE("an empty prediction misses everything without false alarms") {
    std::vector<std::uint8_t> gm(8 * 8, 0);
    gm[3 * 8 + 3] = 1;
    const Tensor<float> pred = binary_tensor(std::vector<std::uint8_t>(64, 0), 8, 8);
    const Tensor<float> gt = binary_tensor(gm, 8, 8);
    const MetricReport r = compute_metrics(pred, gt, 0.5f);
    CHECK(r.iou == 0.0);
    CHECK(r.niou == 0.0);
    CHECK(r.pd == 0.0);
    CHECK(r.fa == 0.0);
}

TEST_CASE("predictions on an empty scene are pure false alarm") {
    std::vector<std::uint8_t> pm(8 * 8, 0);
    pm[9] = pm[10] = 1;
    const MetricReport r =
        compute_metrics(binary_tensor(pm, 8, 8), binary_tensor(std::vector<std::uint8_t>(64, 0), 8, 8), 0.5f);
    CHECK(r.iou == 0.0);
    CHECK(r.niou == 0.0);
    CHECK(r.pd == 0.0);
    CHECK_THAT(r.fa, WithinAbs(2.0 / 64.0, 1e-15));
}

TEST_CASE("both empty counts as a perfect score") {
    const Tensor<float> zero = binary_tensor(std::vector<std::uint8_t>(64, 0), 8, 8);
    const MetricReport r = compute_metrics(zero, zero, 0.5f);
    CHECK(r.iou == 1.0);
    CHECK(r.niou == 1.0);
    CHECK(r.pd == 1.0);
    CHECK(r.fa == 0.0);
}

TEST_CASE("binarization uses strict thresholds") {
    Tensor<float> pred({1, 2});
    pred[0] = 0.5f;   // == threshold: negative
    pred[1] = 0.51f;  // positive
    Tensor<float> gt({1, 2});
    gt[0] = 0.4f;  // not a target
    gt[1] = 0.6f;  // target
    const MetricReport r = compute_metrics(pred, gt, 0.5f);
    CHECK(r.tp == 1);
    CHECK(r.fp == 0);
    CHECK(r.fn == 0);
    CHECK(r.iou == 1.0);
}

TEST_CASE("the two-target fixture scores half detection and five alarm pixels") {
    const int H = 64, W = 64;
    std::vector<std::uint8_t> gm(H * W, 0), pm(H * W, 0);
    // two 3x3 targets
    for (int y = 10; y <= 12; ++y)
        for (int x = 10; x <= 12; ++x) gm[y * W + x] = 1;
    for (int y = 40; y <= 42; ++y)
        for (int x = 50; x <= 52; ++x) gm[y * W + x] = 1;
    // the first is found exactly; five stray pixels far from both
    for (int y = 10; y <= 12; ++y)
        for (int x = 10; x <= 12; ++x) pm[y * W + x] = 1;
    for (int x = 0; x < 5; ++x) pm[60 * W + x] = 1;

    const MetricReport r = compute_metrics(binary_tensor(pm, H, W), binary_tensor(gm, H, W), 0.5f);
    CHECK_THAT(r.pd, WithinAbs(0.5, 1e-15));
    CHECK_THAT(r.fa, WithinAbs(5.0 / 4096.0, 1e-15));
    CHECK(r.fa_pixels == 5);
    CHECK_THAT(r.niou, WithinAbs(0.5, 1e-15));          // 1.0 and 0.0 averaged
    CHECK_THAT(r.iou, WithinAbs(9.0 / 23.0, 1e-15));    // 9 TP, 5 FP, 9 FN
    CHECK(r.targets_total == 2);
    CHECK(r.targets_detected == 1);
}

TEST_CASE("metrics agree exactly with a union-find oracle on random scenes") {
    Rng rng(31);
    for (int trial = 0; trial < 60; ++trial) {
        const int H = 16, W = 16;
        std::vector<std::uint8_t> pm(H * W), gm(H * W);
        const double dp = rng.uniform(0.05, 0.5), dg = rng.uniform(0.05, 0.5);
        for (int i = 0; i < H * W; ++i) {
            pm[i] = rng.uniform() < dp;
            gm[i] = rng.uniform() < dg;
        }
        const ref::Metrics want = ref::metrics(pm, gm, H, W);
        const MetricReport got =
            compute_metrics(binary_tensor(pm, H, W), binary_tensor(gm, H, W), 0.5f);
        INFO("trial " << trial);
        CHECK_THAT(got.iou, WithinAbs(want.iou, 1e-12));
        CHECK_THAT(got.niou, WithinAbs(want.niou, 1e-12));
        CHECK_THAT(got.pd, WithinAbs(want.pd, 1e-12));
        CHECK_THAT(got.fa, WithinAbs(want.fa, 1e-12));
    }
}

TEST_CASE("metric accumulation pools pixel and target counts across images") {
    std::vector<std::uint8_t> a_g(16, 0), a_p(16, 0);
    a_g[5] = a_p[5] = 1;           // image A (4x4): one hit
    std::vector<std::uint8_t> b_g(64, 0), b_p(64, 0);
    b_g[6 * 8 + 6] = 1;            // image B (8x8): one miss at (6,6)
    b_p[0] = 1;                    // plus one false pixel beyond the match radius
    MetricAccum acc;
    acc.add(binary_tensor(a_p, 4, 4), binary_tensor(a_g, 4, 4), 0.5f);
    acc.add(binary_tensor(b_p, 8, 8), binary_tensor(b_g, 8, 8), 0.5f);
    const MetricReport r = acc.report();
    CHECK(r.targets_total == 2);
    CHECK(r.targets_detected == 1);
    CHECK_THAT(r.fa, WithinAbs(1.0 / 80.0, 1e-15));
    CHECK_THAT(r.iou, WithinAbs(1.0 / 3.0, 1e-15));  // tp=1 fp=1 fn=1
}

TEST_CASE("metric shape errors are diagnosed") {
    Tensor<float> a({4, 4}), c({2, 4, 4}), d({5, 4});
    MetricAccum acc;
    CHECK_THROWS_AS(acc.add(a, d, 0.5f), ShapeError);
    CHECK_THROWS_AS(acc.add(c, a, 0.5f), ShapeError);
    Tensor<float> ok1({1, 4, 4});
    acc.add(ok1, a, 0.5f);  // [1,H,W] against [H,W] is fine
    CHECK(acc.total_pixels == 16);
}

// ---------------------------------------------------------------------------
// Optimizer.
// ---------------------------------------------------------------------------

TEST_CASE("one Adam step matches the closed form") {
    ModelConfig cfg = tiny_cfg();
    Model<float> model(cfg, 1);
    OptState<float> st;
    OptConfig oc;
    oc.lr = 0.01;
    oc.cosine = false;
    oc.clip_norm = 0.0;

    const std::string name = "pgm.scale";
    const double p0 = model.params.at(name)[0];
    std::map<std::string, Tensor<float>> grads;
    Tensor<float> g = Tensor<float>::full(model.params.at(name).shape, 0.5f);
    grads.emplace(name, g);
    optimizer_step(model, grads, st, oc);

    const double m1 = 0.1 * 0.5, v1 = 0.001 * 0.25;
    const double mh = m1 / (1.0 - 0.9), vh = v1 / (1.0 - 0.999);
    const double want = p0 - 0.01 * mh / (std::sqrt(vh) + 1e-8);
    CHECK_THAT(model.params.at(name)[0], WithinAbs(want, 1e-7));
    CHECK(st.t == 1);
    CHECK(model.step == 1);

    // second step keeps compounding the moments
    grads.clear();
    grads.emplace(name, g);
    optimizer_step(model, grads, st, oc);
    const double m2 = 0.9 * m1 + 0.1 * 0.5, v2 = 0.999 * v1 + 0.001 * 0.25;
    const double mh2 = m2 / (1.0 - 0.9 * 0.9), vh2 = v2 / (1.0 - 0.999 * 0.999);
    const double want2 = want - 0.01 * mh2 / (std::sqrt(vh2) + 1e-8);
    CHECK_THAT(model.params.at(name)[0], WithinAbs(want2, 1e-7));
}

TEST_CASE("two SGD momentum steps match the closed form") {
    ModelConfig cfg = tiny_cfg();
    Model<float> model(cfg, 2);
    OptState<float> st;
    OptConfig oc;
    oc.kind = OptKind::sgd;
    oc.lr = 0.1;
    oc.momentum = 0.9;
    oc.cosine = false;
    oc.clip_norm = 0.0;

    const std::string name = "pgm.scale";
    const double p0 = model.params.at(name)[0];
    std::map<std::string, Tensor<float>> grads;
    grads.emplace(name, Tensor<float>::full({1}, 1.0f));
    optimizer_step(model, grads, st, oc);
    const double v1 = -0.1;  // 0.9*0 - 0.1*1
    CHECK_THAT(model.params.at(name)[0], WithinAbs(p0 + v1, 1e-7));

    grads.clear();
    grads.emplace(name, Tensor<float>::full({1}, 1.0f));
    optimizer_step(model, grads, st, oc);
    const double v2 = 0.9 * v1 - 0.1;
    CHECK_THAT(model.params.at(name)[0], WithinAbs(p0 + v1 + v2, 1e-6));
}

TEST_CASE("gradient clipping rescales to the norm budget") {
    std::map<std::string, Tensor<float>> grads;
    Tensor<float> a({4});
    for (int i = 0; i < 4; ++i) a[i] = 3.0f;  // norm contribution 36
    Tensor<float> b({4});
    for (int i = 0; i < 4; ++i) b[i] = 4.0f;  // norm contribution 64 -> total 10
    grads.emplace("a", a);
    grads.emplace("b", b);
    const double norm = clip_gradients(grads, 5.0);
    CHECK_THAT(norm, WithinAbs(10.0, 1e-12));
    CHECK_THAT(grads.at("a")[0], WithinAbs(1.5, 1e-6));
    CHECK_THAT(grads.at("b")[0], WithinAbs(2.0, 1e-6));

    // under the budget: untouched
    std::map<std::string, Tensor<float>> small;
    small.emplace("a", Tensor<float>::full({2}, 0.1f));
    const double n2 = clip_gradients(small, 5.0);
    CHECK_THAT(n2, WithinAbs(0.1 * std::sqrt(2.0), 1e-6));
    CHECK(small.at("a")[0] == 0.1f);
}

TEST_CASE("the cosine schedule anneals from full rate to zero") {
    OptConfig oc;
    oc.lr = 0.4;
    oc.total_steps = 100;
    CHECK_THAT(lr_at<float>(oc, 0), WithinAbs(0.4, 1e-15));
    CHECK_THAT(lr_at<float>(oc, 50), WithinAbs(0.2, 1e-12));
    CHECK_THAT(lr_at<float>(oc, 100), WithinAbs(0.0, 1e-12));
    CHECK_THAT(lr_at<float>(oc, 250), WithinAbs(0.0, 1e-12));  // clamps past the horizon
    oc.cosine = false;
    CHECK(lr_at<float>(oc, 77) == 0.4);
}

TEST_CASE("optimizer configuration is validated") {
    OptConfig oc;
    oc.lr = -1.0;
    CHECK_THROWS_AS(validate(oc), ConfigError);
    oc = OptConfig{};
    oc.total_steps = 0;
    CHECK_THROWS_AS(validate(oc), ConfigError);
    oc = OptConfig{};
    oc.clip_norm = -0.1;
    CHECK_THROWS_AS(validate(oc), ConfigError);

    TrainConfig tc;
    tc.alpha = -0.5;
    CHECK_THROWS_AS(validate(tc), ConfigError);
    tc = TrainConfig{};
    tc.beta = -0.1;
    CHECK_THROWS_AS(validate(tc), ConfigError);
    tc = TrainConfig{};
    tc.batch_size = 0;
    CHECK_THROWS_AS(validate(tc), ConfigError);
}

// ---------------------------------------------------------------------------
// Training loop.
// ---------------------------------------------------------------------------

TEST_CASE("a zero learning rate leaves every parameter untouched") {
    Model<float> model(tiny_cfg(), 3);
    const auto before = model.params;
    const Dataset ds = make_dataset(3, 16, 0.2, 6);

    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    tc.opt.lr = 0.0;
    train(model, ds.train, ds.test, tc);
    for (const auto& [name, p] : model.params) {
        const auto& b = before.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == b[i]);
    }
}

TEST_CASE("training a single scene drives the loss down") {
    Model<float> model(tiny_cfg(), 7);
    const Dataset ds = make_dataset(2, 16, 0.1, 17);
    std::vector<Sample> one{ds.train[0]};

    TrainConfig tc;
    tc.epochs = 40;
    tc.batch_size = 1;
    tc.opt.lr = 3e-3;
    tc.seed = 1;
    const TrainResult r = train(model, one, one, tc);
    REQUIRE(r.loss_curve.size() == 40);
    const double head =
        std::accumulate(r.loss_curve.begin(), r.loss_curve.begin() + 5, 0.0) / 5.0;
    const double tail = std::accumulate(r.loss_curve.end() - 5, r.loss_curve.end(), 0.0) / 5.0;
    INFO("head " << head << " tail " << tail);
    CHECK(tail < head * 0.8);
}

TEST_CASE("identical seeds give bitwise identical loss curves") {
    const Dataset ds = make_dataset(4, 16, 0.2, 23);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    tc.seed = 5;
    tc.opt.lr = 1e-3;

    Model<float> m1(tiny_cfg(), 41);
    const TrainResult r1 = train(m1, ds.train, ds.test, tc);
    Model<float> m2(tiny_cfg(), 41);
    const TrainResult r2 = train(m2, ds.train, ds.test, tc);

    REQUIRE(r1.loss_curve.size() == r2.loss_curve.size());
    for (std::size_t i = 0; i < r1.loss_curve.size(); ++i)
        REQUIRE(r1.loss_curve[i] == r2.loss_curve[i]);
    for (const auto& [name, p] : m1.params) {
        const auto& q = m2.params.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == q[i]);
    }
}

TEST_CASE("a poisoned parameter aborts training with the batch location") {
    Model<float> model(tiny_cfg(), 3);
    model.params.at("head.conv.w")[0] = std::numeric_limits<float>::quiet_NaN();
    const Dataset ds = make_dataset(2, 16, 0.2, 6);
    TrainConfig tc;
    tc.epochs = 1;
    tc.batch_size = 2;
    try {
        train(model, ds.train, ds.test, tc);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("epoch 0") != std::string::npos);
        CHECK(msg.find("batch 0") != std::string::npos);
    }
}

TEST_CASE("resuming from a checkpoint reproduces the uninterrupted run") {
    const Dataset ds = make_dataset(4, 16, 0.2, 29);
    const std::string dir = "train_test_resume";
    std::filesystem::remove_all(dir);

    TrainConfig tc;
    tc.epochs = 4;
    tc.batch_size = 2;
    tc.seed = 3;
    tc.opt.lr = 1e-3;
    tc.out_dir = dir;

    // the uninterrupted run, leaving a checkpoint after every epoch
    Model<float> a(tiny_cfg(), 77);
    const TrainResult ra = train(a, ds.train, ds.test, tc);
    REQUIRE(ra.loss_curve.size() == 8);
    REQUIRE(std::filesystem::exists(dir + "/epoch_001.ckpt"));
    REQUIRE(std::filesystem::exists(dir + "/epoch_002.ckpt"));
    REQUIRE(std::filesystem::exists(dir + "/final.ckpt"));

    // pick up the halfway checkpoint and finish the same schedule
    OptState<float> st;
    Model<float> c = load_checkpoint<float>(dir + "/epoch_002.ckpt", &st);
    REQUIRE(st.t == 4);
    TrainConfig tc_resume = tc;
    tc_resume.out_dir.clear();  // keep run A's checkpoints intact
    const TrainResult rb2 = train(c, ds.train, ds.test, tc_resume, &st);
    CHECK(rb2.start_epoch == 2);
    REQUIRE(rb2.loss_curve.size() == 4);

    // the resumed second half retraces the uninterrupted run exactly
    for (int i = 0; i < 4; ++i) REQUIRE(rb2.loss_curve[i] == ra.loss_curve[4 + i]);
    for (const auto& [name, p] : a.params) {
        const auto& q = c.params.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == q[i]);
    }
    for (const auto& [name, p] : a.buffers) {
        const auto& q = c.buffers.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == q[i]);
    }
    std::filesystem::remove_all(dir);
}

TEST_CASE("evaluation does not disturb the model") {
    Model<float> model(tiny_cfg(), 9);
    const Dataset ds = make_dataset(2, 16, 0.2, 12);
    const auto params = model.params;
    const auto buffers = model.buffers;
    const MetricReport r1 = evaluate(model, ds.test);
    const MetricReport r2 = evaluate(model, ds.test);
    CHECK(r1.iou == r2.iou);
    CHECK(r1.pd == r2.pd);
    CHECK(r1.fa == r2.fa);
    for (const auto& [name, p] : model.params) {
        const auto& b = params.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == b[i]);
    }
    for (const auto& [name, p] : model.buffers) {
        const auto& b = buffers.at(name);
        for (std::size_t i = 0; i < p.numel(); ++i) REQUIRE(p[i] == b[i]);
    }
}

TEST_CASE("training reports one metric row per epoch and validates inputs") {
    Model<float> model(tiny_cfg(), 10);
    const Dataset ds = make_dataset(3, 16, 0.2, 8);
    TrainConfig tc;
    tc.epochs = 2;
    tc.batch_size = 2;
    const TrainResult r = train(model, ds.train, ds.test, tc);
    CHECK(r.reports.size() == 2);
    CHECK(r.start_epoch == 0);
    // 2 train scenes -> 1 batch per epoch
    CHECK(r.loss_curve.size() == 2);

    CHECK_THROWS_AS(train(model, {}, ds.test, tc), DataError);
    TrainConfig bad = tc;
    bad.epochs = 0;
    CHECK_THROWS_AS(train(model, ds.train, ds.test, bad), ConfigError);
}
