#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <fstream>
#include <set>

#include "traceseg/synth.hpp"
#include "test_util.hpp"

using namespace traceseg;
using Catch::Matchers::WithinAbs;

namespace {

// Scene with an essentially flat background so target profiles can be isolated
// by differencing against a twin scene generated without targets.
SceneSpec flat_spec(int size, std::uint64_t seed) {
    SceneSpec spec;
    spec.height = size;
    spec.width = size;
    spec.bg_lo = 0.05;
    spec.bg_hi = 0.0501;
    spec.noise_level = 0.0;
    spec.seed = seed;
    return spec;
}

std::string tmp_path(const std::string& name) {
    return std::string("synth_test_") + name;
}

}  // namespace

TEST_CASE("radius-2 target marks exactly the 13-pixel half-peak disk") {
    SceneSpec spec = flat_spec(32, 7);
    spec.targets.push_back({16.0, 16.0, 2, 0.4});
    const Sample s = generate(spec);

    // offsets with dx^2+dy^2 <= 4
    std::set<std::pair<int, int>> disk;
    for (int dy = -2; dy <= 2; ++dy)
        for (int dx = -2; dx <= 2; ++dx)
            if (dx * dx + dy * dy <= 4) disk.insert({dy, dx});
    REQUIRE(disk.size() == 13);

    int ones = 0;
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const bool in = disk.count({y - 16, x - 16}) > 0;
            INFO("pixel (" << y << "," << x << ")");
            CHECK(s.mask.at(0, y, x) == (in ? 1.0f : 0.0f));
            ones += s.mask.at(0, y, x) > 0.5f;
        }
    CHECK(ones == 13);
}

TEST_CASE("target profile halves exactly at its nominal radius") {
    // difference against the same scene without the target to isolate the
    // additive profile
    for (int radius = 1; radius <= 4; ++radius) {
        SceneSpec with = flat_spec(48, 99);
        with.targets.push_back({24.0, 24.0, radius, 0.5});
        SceneSpec without = flat_spec(48, 99);
        const Sample a = generate(with);
        const Sample b = generate(without);

        const double peak = a.image.at(0, 24, 24) - b.image.at(0, 24, 24);
        REQUIRE(peak > 0.2);
        const double at_r = a.image.at(0, 24, 24 + radius) - b.image.at(0, 24, 24 + radius);
        CHECK_THAT(at_r / peak, WithinAbs(0.5, 1e-4));
        // requested 0.5 is above the margin and fits: amplitude honored
        CHECK_THAT(peak, WithinAbs(0.5, 1e-4));
    }
}

TEST_CASE("dim contrast requests are lifted to the guaranteed margin") {
    SceneSpec spec = flat_spec(32, 3);
    spec.targets.push_back({16.0, 16.0, 2, 0.01});
    SceneSpec bare = flat_spec(32, 3);
    const double peak =
        generate(spec).image.at(0, 16, 16) - generate(bare).image.at(0, 16, 16);
    CHECK_THAT(peak, WithinAbs(0.3, 1e-4));
}

TEST_CASE("no targets means an all-zero mask and a valid-range image") {
    SceneSpec spec;
    spec.height = 40;
    spec.width = 56;
    spec.noise_level = 0.08;
    spec.clutter.push_back({20.0, 20.0, 4.0, 0.1});
    spec.seed = 11;
    const Sample s = generate(spec);
    REQUIRE(s.image.shape == Shape({3, 40, 56}));
    REQUIRE(s.mask.shape == Shape({1, 40, 56}));
    for (std::size_t i = 0; i < s.mask.numel(); ++i) CHECK(s.mask[i] == 0.0f);
    for (std::size_t i = 0; i < s.image.numel(); ++i) {
        CHECK(s.image[i] >= 0.0f);
        CHECK(s.image[i] <= 1.0f);
    }
    // channels are replicated grayscale
    for (int y = 0; y < 40; ++y)
        for (int x = 0; x < 56; ++x) {
            CHECK(s.image.at(0, y, x) == s.image.at(1, y, x));
            CHECK(s.image.at(0, y, x) == s.image.at(2, y, x));
        }
}

TEST_CASE("scene validation rejects bad parameters") {
    SceneSpec spec = flat_spec(32, 1);
    spec.targets.push_back({40.0, 16.0, 2, 0.4});
    CHECK_THROWS_AS(generate(spec), ConfigError);

    spec = flat_spec(32, 1);
    spec.targets.push_back({16.0, 16.0, 5, 0.4});
    CHECK_THROWS_AS(generate(spec), ConfigError);
    spec.targets.back().radius = 0;
    CHECK_THROWS_AS(generate(spec), ConfigError);

    spec = flat_spec(32, 1);
    spec.noise_level = 0.5;
    CHECK_THROWS_AS(generate(spec), ConfigError);

    spec = flat_spec(4, 1);
    CHECK_THROWS_AS(generate(spec), ConfigError);

    Rng rng(1);
    CHECK_THROWS_AS(make_scene_spec(64, 1.5, rng), ConfigError);
    CHECK_THROWS_AS(make_scene_spec(64, -0.1, rng), ConfigError);
    CHECK_THROWS_AS(make_dataset(0, 64, 0.5, 1), ConfigError);
}

TEST_CASE("identical seeds reproduce scenes bitwise") {
    Rng rng_a(42), rng_b(42);
    const SceneSpec sa = make_scene_spec(64, 0.6, rng_a);
    const SceneSpec sb = make_scene_spec(64, 0.6, rng_b);
    REQUIRE(sa.targets.size() == sb.targets.size());
    const Sample a = generate(sa), b = generate(sb);
    REQUIRE(a.image.shape == b.image.shape);
    for (std::size_t i = 0; i < a.image.numel(); ++i) REQUIRE(a.image[i] == b.image[i]);
    for (std::size_t i = 0; i < a.mask.numel(); ++i) REQUIRE(a.mask[i] == b.mask[i]);
}

TEST_CASE("every generated target center is a strict 8-neighborhood maximum") {
    Rng rng(1234);
    int targets_seen = 0;
    for (int n = 0; n < 100; ++n) {
        const SceneSpec spec = make_scene_spec(64, rng.uniform(0.0, 1.0), rng);
        const Sample s = generate(spec);
        for (const auto& t : spec.targets) {
            ++targets_seen;
            const int cx = static_cast<int>(std::lround(t.x));
            const int cy = static_cast<int>(std::lround(t.y));
            const float c = s.image.at(0, cy, cx);
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    if (dy == 0 && dx == 0) continue;
                    INFO("scene " << n << " target at (" << cy << "," << cx << ") offset ("
                                  << dy << "," << dx << ")");
                    CHECK(s.image.at(0, cy + dy, cx + dx) < c);
                }
        }
    }
    REQUIRE(targets_seen > 100);
}

TEST_CASE("generated targets keep their pairwise separation") {
    Rng rng(777);
    for (int n = 0; n < 200; ++n) {
        const SceneSpec spec = make_scene_spec(64, 0.5, rng);
        for (std::size_t i = 0; i < spec.targets.size(); ++i)
            for (std::size_t j = i + 1; j < spec.targets.size(); ++j) {
                const auto& a = spec.targets[i];
                const auto& b = spec.targets[j];
                const double dx = a.x - b.x, dy = a.y - b.y;
                const double need = a.radius + b.radius + 6.0;
                CHECK(dx * dx + dy * dy >= need * need);
            }
    }
}

TEST_CASE("target counts are roughly uniform over {1,2,3}") {
    Rng rng(5);
    int hist[4] = {0, 0, 0, 0};
    const int n = 1000;
    for (int i = 0; i < n; ++i) {
        const SceneSpec spec = make_scene_spec(64, 0.5, rng);
        REQUIRE(spec.targets.size() >= 1);
        REQUIRE(spec.targets.size() <= 3);
        ++hist[spec.targets.size()];
    }
    for (int k = 1; k <= 3; ++k) {
        INFO("count " << k << " occurred " << hist[k] << " times");
        CHECK(hist[k] >= n / 4);
        CHECK(hist[k] <= n * 42 / 100);
    }
}

TEST_CASE("dataset splits 80/20 by scene order") {
    const Dataset ds = make_dataset(10, 32, 0.3, 9);
    CHECK(ds.train.size() == 8);
    CHECK(ds.test.size() == 2);
    CHECK(ds.train_specs.size() == 8);
    CHECK(ds.test_specs.size() == 2);
    for (const auto& s : ds.train) {
        REQUIRE(s.image.shape == Shape({3, 32, 32}));
        REQUIRE(s.mask.shape == Shape({1, 32, 32}));
    }
    // same seed, same data; train and test scenes differ
    const Dataset again = make_dataset(10, 32, 0.3, 9);
    for (std::size_t i = 0; i < ds.train[0].image.numel(); ++i)
        REQUIRE(ds.train[0].image[i] == again.train[0].image[i]);
    bool differ = false;
    for (std::size_t i = 0; i < ds.train[0].image.numel() && !differ; ++i)
        differ = ds.train[0].image[i] != ds.test[0].image[i];
    CHECK(differ);
}

// ---------------------------------------------------------------------------
// Image IO.
// ---------------------------------------------------------------------------

TEST_CASE("grayscale PGM round-trips within 8-bit quantization") {
    Rng rng(21);
    Tensor<float> img({17, 23});
    fill_uniform(img, rng, 0.0, 1.0);
    const std::string path = tmp_path("a.pgm");
    save_pgm(path, img);
    const Tensor<float> back = load_gray(path);
    REQUIRE(back.shape == Shape({17, 23}));
    for (std::size_t i = 0; i < img.numel(); ++i)
        REQUIRE_THAT(back[i], WithinAbs(img[i], 0.5 / 255.0 + 1e-6));
    std::remove(path.c_str());
}

TEST_CASE("grayscale PNG round-trips bit-exactly against its own quantization") {
    Rng rng(22);
    Tensor<float> img({31, 19});
    fill_uniform(img, rng, 0.0, 1.0);
    const std::string path = tmp_path("b.png");
    save_png_gray(path, img);
    const Tensor<float> back = load_gray(path);
    REQUIRE(back.shape == Shape({31, 19}));
    for (std::size_t i = 0; i < img.numel(); ++i) {
        const float q = to_byte(img[i]) / 255.0f;
        REQUIRE(back[i] == q);
    }
    std::remove(path.c_str());
}

TEST_CASE("a [1,H,W] tensor saves the same bytes as its [H,W] view") {
    Tensor<float> a({5, 6});
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] = static_cast<float>(i) / 30.0f;
    Tensor<float> b({1, 5, 6});
    b.data = a.data;
    save_pgm(tmp_path("c1.pgm"), a);
    save_pgm(tmp_path("c2.pgm"), b);
    std::ifstream f1(tmp_path("c1.pgm"), std::ios::binary), f2(tmp_path("c2.pgm"), std::ios::binary);
    const std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(s1 == s2);
    std::remove(tmp_path("c1.pgm").c_str());
    std::remove(tmp_path("c2.pgm").c_str());
}

TEST_CASE("image loading rejects malformed files") {
    CHECK_THROWS_AS(load_gray("does_not_exist.pgm"), DataError);

    {
        std::ofstream f(tmp_path("bad.txt"), std::ios::binary);
        f << "hello world, not an image";
    }
    CHECK_THROWS_AS(load_gray(tmp_path("bad.txt")), DataError);
    std::remove(tmp_path("bad.txt").c_str());

    // truncated PGM payload
    {
        std::ofstream f(tmp_path("short.pgm"), std::ios::binary);
        f << "P5\n4 4\n255\nab";
    }
    CHECK_THROWS_AS(load_gray(tmp_path("short.pgm")), DataError);
    std::remove(tmp_path("short.pgm").c_str());

    // 16-bit PGM is unsupported
    {
        std::ofstream f(tmp_path("deep.pgm"), std::ios::binary);
        f << "P5\n2 2\n65535\n";
        f.write("\0\0\0\0\0\0\0\0", 8);
    }
    CHECK_THROWS_AS(load_gray(tmp_path("deep.pgm")), DataError);
    std::remove(tmp_path("deep.pgm").c_str());

    // PNG signature followed by garbage
    {
        std::ofstream f(tmp_path("trunc.png"), std::ios::binary);
        const unsigned char sig[8] = {137, 'P', 'N', 'G', '\r', '\n', 26, '\n'};
        f.write(reinterpret_cast<const char*>(sig), 8);
        f << "xxxx";
    }
    CHECK_THROWS_AS(load_gray(tmp_path("trunc.png")), DataError);
    std::remove(tmp_path("trunc.png").c_str());
}

TEST_CASE("PGM comments and whitespace are tolerated in the header") {
    {
        std::ofstream f(tmp_path("cmt.pgm"), std::ios::binary);
        f << "P5\n# a comment line\n3 # trailing comment\n2\n255\n";
        f.write("\x00\x40\x80\xc0\xff\x20", 6);
    }
    const Tensor<float> t = load_gray(tmp_path("cmt.pgm"));
    REQUIRE(t.shape == Shape({2, 3}));
    CHECK_THAT(t.at(0, 0), WithinAbs(0.0, 1e-6));
    CHECK_THAT(t.at(1, 1), WithinAbs(255.0 / 255.0, 1e-6));
    std::remove(tmp_path("cmt.pgm").c_str());
}

TEST_CASE("image/mask pairs load with binarized masks and replicated channels") {
    SceneSpec spec = flat_spec(24, 13);
    spec.targets.push_back({12.0, 12.0, 2, 0.5});
    const Sample s = generate(spec);
    const std::string ip = tmp_path("pair_img.png"), mp = tmp_path("pair_mask.pgm");
    CHECK_THROWS_AS(save_png_gray(ip, s.image), ShapeError);  // [3,H,W] has no gray view
    Tensor<float> chan0({24, 24});
    for (std::size_t i = 0; i < chan0.numel(); ++i) chan0[i] = s.image[i];
    save_png_gray(ip, chan0);
    save_pgm(mp, s.mask);

    const Sample back = load_pair(ip, mp);
    REQUIRE(back.image.shape == Shape({3, 24, 24}));
    REQUIRE(back.mask.shape == Shape({1, 24, 24}));
    for (std::size_t i = 0; i < back.mask.numel(); ++i)
        REQUIRE(back.mask[i] == s.mask[i]);
    for (std::size_t i = 0; i < chan0.numel(); ++i) {
        REQUIRE_THAT(back.image[i], WithinAbs(chan0[i], 0.5 / 255.0 + 1e-6));
        REQUIRE(back.image[i] == back.image[i + chan0.numel()]);
        REQUIRE(back.image[i] == back.image[i + 2 * chan0.numel()]);
    }

    // mismatched sizes are a data error
    Tensor<float> small({8, 8});
    save_pgm(tmp_path("small.pgm"), small);
    CHECK_THROWS_AS(load_pair(ip, tmp_path("small.pgm")), DataError);
    std::remove(ip.c_str());
    std::remove(mp.c_str());
    std::remove(tmp_path("small.pgm").c_str());
}

TEST_CASE("manifests resolve paths relative to their own directory") {
    {
        std::ofstream f(tmp_path("manifest.txt"));
        f << "# comment line\n";
        f << "img0.png mask0.png train\n";
        f << "\n";
        f << "/abs/img1.png /abs/mask1.png test\n";
    }
    const auto entries = load_manifest(tmp_path("manifest.txt"));
    REQUIRE(entries.size() == 2);
    CHECK(entries[0].image == "./img0.png");
    CHECK(entries[0].mask == "./mask0.png");
    CHECK(entries[0].split == "train");
    CHECK(entries[1].image == "/abs/img1.png");
    CHECK(entries[1].split == "test");
    std::remove(tmp_path("manifest.txt").c_str());

    {
        std::ofstream f(tmp_path("manifest_bad.txt"));
        f << "img.png mask.png validation\n";
    }
    CHECK_THROWS_AS(load_manifest(tmp_path("manifest_bad.txt")), DataError);
    std::remove(tmp_path("manifest_bad.txt").c_str());

    {
        std::ofstream f(tmp_path("manifest_short.txt"));
        f << "only_two fields\n";
    }
    CHECK_THROWS_AS(load_manifest(tmp_path("manifest_short.txt")), DataError);
    std::remove(tmp_path("manifest_short.txt").c_str());

    CHECK_THROWS_AS(load_manifest("no_such_manifest.txt"), DataError);
}
