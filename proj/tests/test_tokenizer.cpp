#include <algorithm>
#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <numeric>
#include <vector>

#include "test_util.hpp"
#include "traceseg/tape.hpp"
#include "traceseg/tensor.hpp"
#include "traceseg/tokenizer.hpp"

using namespace traceseg;
using Catch::Matchers::ContainsSubstring;

namespace ref {

// 64-bit per-patch stem: 3x3 conv (stride 1, zero pad 1), frozen-statistics
// batch norm, tanh-form GELU, then the spatial mean.
inline std::vector<double> stem_patch(const Tensor<double>& patch, const Tensor<double>& w,
                                      const Tensor<double>& b, const Tensor<double>& gamma,
                                      const Tensor<double>& beta, const Tensor<double>& rm,
                                      const Tensor<double>& rv, double eps) {
    const int Cin = patch.dim(0), h = patch.dim(1), wd = patch.dim(2);
    const int Cout = w.dim(0);
    std::vector<double> out(static_cast<std::size_t>(Cout), 0.0);
    for (int o = 0; o < Cout; ++o) {
        double sum = 0.0;
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < wd; ++x) {
                double acc = b[o];
                for (int ci = 0; ci < Cin; ++ci)
                    for (int ky = -1; ky <= 1; ++ky)
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int sy = y + ky, sx = x + kx;
                            if (sy < 0 || sy >= h || sx < 0 || sx >= wd) continue;
                            acc += patch.at(ci, sy, sx) * w.at(o, ci, ky + 1, kx + 1);
                        }
                const double normed =
                    (acc - rm[o]) / std::sqrt(rv[o] + eps) * gamma[o] + beta[o];
                const double c = 0.7978845608;
                const double v = normed;
                sum += 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
            }
        out[static_cast<std::size_t>(o)] = sum / (h * wd);
    }
    return out;
}

// First closed box (in (sentence, word) order) containing the clamped point.
template <typename T>
WordRef first_hit(const TokenGrid& g, T x, T y) {
    const double cx = std::clamp(static_cast<double>(x), 0.0, static_cast<double>(g.W));
    const double cy = std::clamp(static_cast<double>(y), 0.0, static_cast<double>(g.H));
    for (const WordBox& b : partition_boxes(g))
        if (cx >= b.x0 && cx <= b.x0 + b.w && cy >= b.y0 && cy <= b.y0 + b.h)
            return WordRef{b.sentence, b.word};
    FAIL("no box contains the point");
    return {};
}

}  // namespace ref

namespace {

struct StemFixture {
    Tensor<float> w, b, gamma, beta, rm, rv;
    StemFixture(int Cw, Rng& rng)
        : w({Cw, 3, 3, 3}), b({Cw}), gamma({Cw}), beta({Cw}), rm({Cw}), rv({Cw}) {
        fill_normal(w, rng, 0.0, 0.3);
        fill_normal(b, rng, 0.0, 0.3);
        fill_uniform(gamma, rng, 0.5, 1.5);
        fill_uniform(beta, rng, -0.5, 0.5);
        fill_uniform(rm, rng, -0.3, 0.3);
        fill_uniform(rv, rng, 0.5, 2.0);
    }
};

struct EmbedRun {
    Tape<float> tape;
    EmbeddingIds emb;
    Tensor<float> rm, rv;
    EmbedRun(const Tensor<float>& image, const TokenGrid& g, const StemFixture& s,
             bool training)
        : rm(s.rm), rv(s.rv) {
        StemIds ids;
        ids.w = tape.leaf(s.w);
        ids.b = tape.leaf(s.b);
        ids.gamma = tape.leaf(s.gamma);
        ids.beta = tape.leaf(s.beta);
        emb = embed_words(tape, tape.constant(image), g, ids, rm, rv, training, 0.1f, 1e-5f);
    }
    const Tensor<float>& F_w() const { return tape.value(emb.F_w); }
    const Tensor<float>& F_s() const { return tape.value(emb.F_s); }
};

}  // namespace

TEST_CASE("token grid arithmetic for a 64x64 image") {
    const TokenGrid g = make_token_grid(64, 64, 4, 4);
    REQUIRE(g.sn == 2);
    REQUIRE(g.sm == 2);
    REQUIRE(g.h_s == 32);
    REQUIRE(g.w_s == 32);
    REQUIRE(g.h_w == 16);
    REQUIRE(g.w_w == 16);
    const auto boxes = partition_boxes(g);
    REQUIRE(boxes.size() == 16);
    for (const auto& b : boxes) {
        REQUIRE(b.w == 16);
        REQUIRE(b.h == 16);
    }
}

TEST_CASE("degenerate grid is one box covering the whole image") {
    const TokenGrid g = make_token_grid(24, 40, 1, 1);
    const auto boxes = partition_boxes(g);
    REQUIRE(boxes.size() == 1);
    REQUIRE(boxes[0].x0 == 0);
    REQUIRE(boxes[0].y0 == 0);
    REQUIRE(boxes[0].w == 40);
    REQUIRE(boxes[0].h == 24);
}

TEST_CASE("boxes tile every pixel exactly once") {
    Rng rng(61);
    for (int trial = 0; trial < 20; ++trial) {
        const int sn = rng.uniform_int(1, 4), sm = rng.uniform_int(1, 3);
        const int H = sn * sm * rng.uniform_int(1, 6);
        const int W = sn * sm * rng.uniform_int(1, 6);
        const TokenGrid g = make_token_grid(H, W, sn * sn, sm * sm);
        std::vector<int> cover(static_cast<std::size_t>(H) * W, 0);
        std::vector<int> seen_pair(static_cast<std::size_t>(g.n) * g.m, 0);
        for (const auto& b : partition_boxes(g)) {
            seen_pair[static_cast<std::size_t>(b.sentence) * g.m + b.word] += 1;
            for (int y = b.y0; y < b.y0 + b.h; ++y)
                for (int x = b.x0; x < b.x0 + b.w; ++x)
                    cover[static_cast<std::size_t>(y) * W + x] += 1;
        }
        REQUIRE(std::all_of(cover.begin(), cover.end(), [](int v) { return v == 1; }));
        REQUIRE(std::all_of(seen_pair.begin(), seen_pair.end(), [](int v) { return v == 1; }));
    }
}

TEST_CASE("invalid grid configurations name the offending quantity") {
    REQUIRE_THROWS_WITH(make_token_grid(65, 64, 4, 4), ContainsSubstring("65"));
    REQUIRE_THROWS_WITH(make_token_grid(64, 63, 4, 4), ContainsSubstring("63"));
    REQUIRE_THROWS_WITH(make_token_grid(64, 64, 5, 4), ContainsSubstring("5"));
    REQUIRE_THROWS_WITH(make_token_grid(64, 64, 4, 8), ContainsSubstring("8"));
    REQUIRE_THROWS_AS(make_token_grid(65, 64, 4, 4), ConfigError);
}

TEST_CASE("identical patches give identical word embeddings") {
    Rng rng(62);
    const TokenGrid g = make_token_grid(16, 16, 4, 4);
    Tensor<float> cell({3, g.h_w, g.w_w});
    fill_normal(cell, rng, 0.0, 1.0);
    Tensor<float> image({3, 16, 16});
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                image.at(c, y, x) = cell.at(c, y % g.h_w, x % g.w_w);
    const StemFixture s(6, rng);
    EmbedRun run(image, g, s, true);
    const Tensor<float>& fw = run.F_w();
    for (int r = 1; r < g.n * g.m; ++r)
        for (int c = 0; c < 6; ++c) REQUIRE(fw.at(r, c) == fw.at(0, c));
}

TEST_CASE("sentence embeddings are the mean of their word embeddings") {
    Rng rng(63);
    const TokenGrid g = make_token_grid(24, 24, 4, 9);
    Tensor<float> image({3, 24, 24});
    fill_normal(image, rng, 0.0, 1.0);
    const StemFixture s(5, rng);
    EmbedRun run(image, g, s, true);
    const Tensor<float>& fw = run.F_w();
    const Tensor<float>& fs = run.F_s();
    for (int i = 0; i < g.n; ++i)
        for (int c = 0; c < 5; ++c) {
            double mean = 0.0;
            for (int j = 0; j < g.m; ++j) mean += fw.at(i * g.m + j, c);
            mean /= g.m;
            REQUIRE(std::abs(fs.at(i, c) - mean) < 1e-6);
        }
}

TEST_CASE("word embeddings match a per-patch oracle with frozen statistics") {
    Rng rng(64);
    const TokenGrid g = make_token_grid(16, 16, 4, 4);
    Tensor<float> image({3, 16, 16});
    fill_normal(image, rng, 0.0, 1.0);
    const StemFixture s(6, rng);
    EmbedRun run(image, g, s, false);

    const Tensor<double> id = image.cast<double>();
    for (const auto& b : partition_boxes(g)) {
        Tensor<double> patch({3, b.h, b.w});
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < b.h; ++y)
                for (int x = 0; x < b.w; ++x)
                    patch.at(c, y, x) = id.at(c, b.y0 + y, b.x0 + x);
        const auto e = ref::stem_patch(patch, s.w.cast<double>(), s.b.cast<double>(),
                                       s.gamma.cast<double>(), s.beta.cast<double>(),
                                       s.rm.cast<double>(), s.rv.cast<double>(), 1e-5);
        for (int c = 0; c < 6; ++c)
            REQUIRE(std::abs(run.F_w().at(b.sentence * g.m + b.word, c) -
                             e[static_cast<std::size_t>(c)]) < 1e-5);
    }
}

TEST_CASE("permuting sentence blocks permutes embedding rows identically") {
    Rng rng(65);
    const TokenGrid g = make_token_grid(16, 16, 4, 4);
    Tensor<float> image({3, 16, 16});
    fill_normal(image, rng, 0.0, 1.0);
    std::vector<int> sigma(static_cast<std::size_t>(g.n));
    std::iota(sigma.begin(), sigma.end(), 0);
    std::shuffle(sigma.begin(), sigma.end(), rng.engine);

    // image2 sentence block i holds the content of block sigma[i]
    Tensor<float> image2({3, 16, 16});
    for (int i = 0; i < g.n; ++i) {
        const int dy = (i / g.sn) * g.h_s, dx = (i % g.sn) * g.w_s;
        const int syx = sigma[static_cast<std::size_t>(i)];
        const int oy = (syx / g.sn) * g.h_s, ox = (syx % g.sn) * g.w_s;
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < g.h_s; ++y)
                for (int x = 0; x < g.w_s; ++x)
                    image2.at(c, dy + y, dx + x) = image.at(c, oy + y, ox + x);
    }
    const StemFixture s(4, rng);
    EmbedRun a(image, g, s, false), b(image2, g, s, false);
    for (int i = 0; i < g.n; ++i) {
        for (int j = 0; j < g.m; ++j)
            for (int c = 0; c < 4; ++c)
                REQUIRE(b.F_w().at(i * g.m + j, c) ==
                        a.F_w().at(sigma[static_cast<std::size_t>(i)] * g.m + j, c));
        for (int c = 0; c < 4; ++c)
            REQUIRE(b.F_s().at(i, c) == a.F_s().at(sigma[static_cast<std::size_t>(i)], c));
    }

    // training mode couples patches only through permutation-invariant batch
    // statistics, so rows still permute (to rounding)
    EmbedRun at(image, g, s, true), bt(image2, g, s, true);
    for (int i = 0; i < g.n; ++i)
        for (int j = 0; j < g.m; ++j)
            for (int c = 0; c < 4; ++c)
                REQUIRE(std::abs(bt.F_w().at(i * g.m + j, c) -
                                 at.F_w().at(sigma[static_cast<std::size_t>(i)] * g.m + j, c)) <
                        1e-6f);
}

TEST_CASE("the image center belongs to the lower-index boxes") {
    const TokenGrid g = make_token_grid(64, 64, 4, 4);
    const WordRef r = locate_image_point(g, 32.0f, 32.0f);
    REQUIRE(r.sentence == 0);
    REQUIRE(r.word == 3);  // bottom-right word of the top-left sentence
}

TEST_CASE("out-of-bounds points clamp to the nearest box") {
    const TokenGrid g = make_token_grid(64, 64, 4, 4);
    const WordRef lo = locate_image_point(g, -5.0f, -7.5f);
    REQUIRE(lo.sentence == 0);
    REQUIRE(lo.word == 0);
    const WordRef hi = locate_image_point(g, 70.0f, 64.0f);
    REQUIRE(hi.sentence == 3);
    REQUIRE(hi.word == 3);
}

TEST_CASE("membership matches a first-hit scan over all boxes") {
    Rng rng(66);
    const int cfg[3][4] = {{64, 64, 4, 4}, {48, 96, 16, 4}, {36, 36, 9, 9}};
    for (const auto& c : cfg) {
        const TokenGrid g = make_token_grid(c[0], c[1], c[2], c[3]);
        for (int t = 0; t < 50; ++t) {
            const float x = static_cast<float>(rng.uniform(-2.0, c[1] + 2.0));
            const float y = static_cast<float>(rng.uniform(-2.0, c[0] + 2.0));
            const WordRef got = locate_image_point(g, x, y);
            const WordRef want = ref::first_hit(g, x, y);
            REQUIRE(got.sentence == want.sentence);
            REQUIRE(got.word == want.word);
        }
        // boundary points (exact multiples of box sizes) too
        for (int t = 0; t < 30; ++t) {
            const float x = static_cast<float>(g.w_w * rng.uniform_int(0, g.sn * g.sm));
            const float y = static_cast<float>(g.h_w * rng.uniform_int(0, g.sn * g.sm));
            const WordRef got = locate_image_point(g, x, y);
            const WordRef want = ref::first_hit(g, x, y);
            REQUIRE(got.sentence == want.sentence);
            REQUIRE(got.word == want.word);
        }
    }
}

TEST_CASE("every interior point of a box maps to that box") {
    Rng rng(67);
    const TokenGrid g = make_token_grid(48, 48, 4, 9);
    const auto boxes = partition_boxes(g);
    for (int t = 0; t < 40; ++t) {
        const auto& b = boxes[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<int>(boxes.size()) - 1))];
        const float x = static_cast<float>(rng.uniform(b.x0 + 0.01, b.x0 + b.w - 0.01));
        const float y = static_cast<float>(rng.uniform(b.y0 + 0.01, b.y0 + b.h - 0.01));
        const WordRef r = locate_image_point(g, x, y);
        REQUIRE(r.sentence == b.sentence);
        REQUIRE(r.word == b.word);
    }
}

TEST_CASE("stage coordinates scale by the downsampling factor") {
    Rng rng(68);
    const TokenGrid g = make_token_grid(64, 64, 16, 4);
    for (int level = 1; level <= 4; ++level) {
        const int scale = stage_scale(level, 2);
        REQUIRE(scale == (2 << (level - 1)));
        for (int t = 0; t < 20; ++t) {
            const float x = static_cast<float>(rng.uniform(0.0, 64.0 / scale));
            const float y = static_cast<float>(rng.uniform(0.0, 64.0 / scale));
            const WordRef a = locate_stage_point(g, x, y, level, 2);
            const WordRef b = locate_image_point(g, x * scale, y * scale);
            REQUIRE(a.sentence == b.sentence);
            REQUIRE(a.word == b.word);
        }
    }
}
