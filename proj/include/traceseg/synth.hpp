#pragma once

// Synthetic small-target scenes: a smooth gradient background with two-octave
// value noise and optional soft clutter blobs, plus compact Gaussian targets.
// A target of radius r uses sigma = r / sqrt(2 ln 2) so its half-peak contour
// lies exactly at distance r; the ground-truth mask is the half-peak disk
// d^2 <= r^2 (boundary inclusive).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "traceseg/imageio.hpp"
#include "traceseg/tensor.hpp"

namespace traceseg {

struct TargetSpec {
    double x = 0.0, y = 0.0;  // center, pixel coordinates
    int radius = 2;           // half-peak radius in pixels, 1..4
    double contrast = 0.3;    // requested peak amplitude above the local background
};

struct ClutterSpec {
    double x = 0.0, y = 0.0;
    double sigma = 4.0;
    double amp = 0.08;
};

struct SceneSpec {
    int height = 64, width = 64;
    double bg_lo = 0.05, bg_hi = 0.5;   // gradient band
    double noise_level = 0.04;          // value-noise amplitude
    double contrast_margin = 0.3;       // guaranteed peak-over-background floor
    std::vector<ClutterSpec> clutter;
    std::vector<TargetSpec> targets;
    std::uint64_t seed = 0;
};

struct Sample {
    Tensor<float> image;  // [3,H,W], grayscale replicated
    Tensor<float> mask;   // [1,H,W], {0,1}
};

namespace detail {

// Two octaves of bilinear value noise (lattice spacings 4 and 8 pixels,
// second octave at half amplitude), normalized into [-1, 1].
inline Tensor<float> value_noise(int H, int W, Rng& rng) {
    Tensor<float> out = Tensor<float>::zeros({H, W});
    const int spacing[2] = {4, 8};
    const float amp[2] = {1.0f, 0.5f};
    for (int oct = 0; oct < 2; ++oct) {
        const int s = spacing[oct];
        const int gw = W / s + 2, gh = H / s + 2;
        std::vector<float> lat(static_cast<std::size_t>(gw) * gh);
        for (auto& v : lat) v = static_cast<float>(rng.uniform(-1.0, 1.0));
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const float fx = static_cast<float>(x) / s, fy = static_cast<float>(y) / s;
                const int x0 = static_cast<int>(fx), y0 = static_cast<int>(fy);
                const float tx = fx - x0, ty = fy - y0;
                auto at = [&](int yy, int xx) { return lat[static_cast<std::size_t>(yy) * gw + xx]; };
                const float v = (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x0 + 1)) +
                                ty * ((1 - tx) * at(y0 + 1, x0) + tx * at(y0 + 1, x0 + 1));
                out.at(y, x) += amp[oct] * v;
            }
    }
    for (std::size_t i = 0; i < out.numel(); ++i) out.ptr()[i] /= 1.5f;
    return out;
}

}  // namespace detail

inline void validate(const SceneSpec& spec) {
    if (spec.height < 8 || spec.width < 8)
        throw ConfigError("scene size must be at least 8x8, got " + std::to_string(spec.height) +
                          "x" + std::to_string(spec.width));
    if (spec.noise_level < 0.0 || spec.noise_level > 0.2)
        throw ConfigError("scene noise level must lie in [0, 0.2]");
    if (spec.bg_lo < 0.0 || spec.bg_hi > 0.62 || spec.bg_lo >= spec.bg_hi)
        throw ConfigError("scene background band must satisfy 0 <= lo < hi <= 0.62");
    if (spec.contrast_margin < 0.05 || spec.contrast_margin > 0.35)
        throw ConfigError("contrast margin must lie in [0.05, 0.35]");
    for (const auto& t : spec.targets) {
        if (t.radius < 1 || t.radius > 4)
            throw ConfigError("target radius must lie in [1,4], got " + std::to_string(t.radius));
        if (t.x < 0.0 || t.x > spec.width - 1.0 || t.y < 0.0 || t.y > spec.height - 1.0)
            throw ConfigError("target center (" + std::to_string(t.x) + "," + std::to_string(t.y) +
                              ") lies outside the " + std::to_string(spec.width) + "x" +
                              std::to_string(spec.height) + " image");
    }
}

inline Sample generate(const SceneSpec& spec) {
    validate(spec);
    const int H = spec.height, W = spec.width;
    Rng rng(mix_seed(spec.seed, 0x7363656e65ull));  // scene-noise stream

    // background: linear gradient inside the band ...
    Tensor<float> base({H, W});
    const double g0 = rng.uniform(spec.bg_lo, spec.bg_hi);
    const double g1 = rng.uniform(spec.bg_lo, spec.bg_hi);
    const double g2 = rng.uniform(spec.bg_lo, spec.bg_hi);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const double u = static_cast<double>(x) / std::max(1, W - 1);
            const double v = static_cast<double>(y) / std::max(1, H - 1);
            base.at(y, x) = static_cast<float>(g0 + (g1 - g0) * u + (g2 - g0) * v);
        }

    // ... plus band-limited noise and soft clutter blobs
    const Tensor<float> noise = detail::value_noise(H, W, rng);
    for (std::size_t i = 0; i < base.numel(); ++i)
        base.ptr()[i] += static_cast<float>(spec.noise_level) * noise.ptr()[i];
    for (const auto& c : spec.clutter) {
        const double inv = 1.0 / (2.0 * c.sigma * c.sigma);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double d2 = (x - c.x) * (x - c.x) + (y - c.y) * (y - c.y);
                base.at(y, x) += static_cast<float>(c.amp * std::exp(-d2 * inv));
            }
    }

    // cap the background so every target can sit margin-above it without
    // saturating the [0,1] range
    for (std::size_t i = 0; i < base.numel(); ++i)
        base.ptr()[i] = std::min(std::max(base.ptr()[i], 0.02f), 0.62f);

    // targets: Gaussian profiles whose amplitude clears the local background
    // by at least the contrast margin
    Tensor<float> img = base;
    Tensor<float> mask = Tensor<float>::zeros({1, H, W});
    for (const auto& t : spec.targets) {
        const double sigma = t.radius / std::sqrt(2.0 * std::log(2.0));
        const double inv = 1.0 / (2.0 * sigma * sigma);
        const int cx = static_cast<int>(std::lround(t.x)), cy = static_cast<int>(std::lround(t.y));
        const double local = base.at(std::min(std::max(cy, 0), H - 1),
                                     std::min(std::max(cx, 0), W - 1));
        const double amp =
            std::min(std::max(t.contrast, spec.contrast_margin), 0.97 - local);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const double d2 = (x - t.x) * (x - t.x) + (y - t.y) * (y - t.y);
                img.at(y, x) += static_cast<float>(amp * std::exp(-d2 * inv));
                if (d2 <= static_cast<double>(t.radius) * t.radius) mask.at(0, y, x) = 1.0f;
            }
    }

    // enforce a strict local maximum at each (non-overlapping) target center
    for (const auto& t : spec.targets) {
        const int cx = static_cast<int>(std::lround(t.x)), cy = static_cast<int>(std::lround(t.y));
        if (cx < 0 || cx >= W || cy < 0 || cy >= H) continue;
        float nbr = -1.0f;
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if (dy == 0 && dx == 0) continue;
                const int ny = cy + dy, nx = cx + dx;
                if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
                nbr = std::max(nbr, img.at(ny, nx));
            }
        if (img.at(cy, cx) <= nbr) img.at(cy, cx) = nbr + 0.004f;
    }

    Sample s;
    s.image = Tensor<float>({3, H, W});
    for (std::size_t i = 0; i < img.numel(); ++i) {
        const float v = std::min(std::max(img.ptr()[i], 0.0f), 1.0f);
        s.image.ptr()[i] = v;
        s.image.ptr()[i + img.numel()] = v;
        s.image.ptr()[i + 2 * img.numel()] = v;
    }
    s.mask = std::move(mask);
    return s;
}

// ---------------------------------------------------------------------------
// Dataset assembly.
// ---------------------------------------------------------------------------

// Scene parameters drawn for one scene at the given difficulty in [0,1]:
// harder scenes carry more noise, more clutter, and dimmer targets.
inline SceneSpec make_scene_spec(int size, double difficulty, Rng& rng) {
    if (size < 16) throw ConfigError("scene size must be at least 16");
    if (difficulty < 0.0 || difficulty > 1.0)
        throw ConfigError("difficulty must lie in [0,1], got " + std::to_string(difficulty));
    SceneSpec spec;
    spec.height = size;
    spec.width = size;
    spec.noise_level = 0.02 + 0.06 * difficulty;
    spec.contrast_margin = 0.3;
    spec.seed = rng.engine();

    const int n_clutter = rng.uniform_int(0, 1 + static_cast<int>(std::lround(3 * difficulty)));
    for (int i = 0; i < n_clutter; ++i) {
        ClutterSpec c;
        c.x = rng.uniform(0.0, size - 1.0);
        c.y = rng.uniform(0.0, size - 1.0);
        c.sigma = rng.uniform(2.5, 6.0);
        c.amp = rng.uniform(0.03, 0.12);
        spec.clutter.push_back(c);
    }

    const int n_targets = rng.uniform_int(1, 3);
    for (int i = 0; i < n_targets; ++i) {
        TargetSpec t;
        t.radius = rng.uniform_int(1, 4);
        t.contrast = 0.3 + rng.uniform(0.0, 0.05 + 0.25 * (1.0 - difficulty));
        const int margin = t.radius + 3;
        bool placed = false;
        for (int tries = 0; tries < 100 && !placed; ++tries) {
            t.x = static_cast<double>(rng.uniform_int(margin, size - 1 - margin));
            t.y = static_cast<double>(rng.uniform_int(margin, size - 1 - margin));
            placed = true;
            for (const auto& other : spec.targets) {
                const double need = t.radius + other.radius + 6.0;
                const double dx = t.x - other.x, dy = t.y - other.y;
                if (dx * dx + dy * dy < need * need) {
                    placed = false;
                    break;
                }
            }
        }
        if (placed) spec.targets.push_back(t);
    }
    return spec;
}

struct Dataset {
    std::vector<Sample> train, test;
    std::vector<SceneSpec> train_specs, test_specs;
};

// Deterministic 80/20 split by scene index: the first floor(0.8*count)
// scenes train, the rest test.
inline Dataset make_dataset(int count, int size, double difficulty, std::uint64_t seed) {
    if (count < 1) throw ConfigError("dataset count must be >= 1");
    Rng rng(mix_seed(seed, 0x64617461736574ull));  // dataset stream
    const int n_train = count * 8 / 10;
    Dataset ds;
    for (int i = 0; i < count; ++i) {
        SceneSpec spec = make_scene_spec(size, difficulty, rng);
        Sample s = generate(spec);
        if (i < n_train) {
            ds.train.push_back(std::move(s));
            ds.train_specs.push_back(std::move(spec));
        } else {
            ds.test.push_back(std::move(s));
            ds.test_specs.push_back(std::move(spec));
        }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// On-disk pairs and manifests.
// ---------------------------------------------------------------------------

struct ManifestEntry {
    std::string image, mask, split;
};

// image: any supported grayscale file, normalized to [0,1], replicated to 3
// channels; mask: {0,255} grayscale binarized at 128 (>= 128 reads as 1).
inline Sample load_pair(const std::string& image_path, const std::string& mask_path) {
    const Tensor<float> img = load_gray(image_path);
    const Tensor<float> msk = load_gray(mask_path);
    if (!(img.dim(0) == msk.dim(0) && img.dim(1) == msk.dim(1)))
        throw DataError("image '" + image_path + "' is " + shape_str(img.shape) + " but mask '" +
                        mask_path + "' is " + shape_str(msk.shape));
    const int H = img.dim(0), W = img.dim(1);
    Sample s;
    s.image = Tensor<float>({3, H, W});
    for (std::size_t i = 0; i < img.numel(); ++i) {
        s.image.ptr()[i] = img.ptr()[i];
        s.image.ptr()[i + img.numel()] = img.ptr()[i];
        s.image.ptr()[i + 2 * img.numel()] = img.ptr()[i];
    }
    s.mask = Tensor<float>({1, H, W});
    for (std::size_t i = 0; i < msk.numel(); ++i)
        s.mask.ptr()[i] = msk.ptr()[i] >= 128.0f / 255.0f ? 1.0f : 0.0f;
    return s;
}

inline std::string dir_of(const std::string& path) {
    const auto slash = path.find_last_of('/');
    return slash == std::string::npos ? std::string(".") : path.substr(0, slash);
}

inline std::vector<ManifestEntry> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open manifest '" + path + "'");
    const std::string base = dir_of(path);
    auto resolve = [&](const std::string& p) {
        return p.empty() || p[0] == '/' ? p : base + "/" + p;
    };
    std::vector<ManifestEntry> entries;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ss(line);
        ManifestEntry e;
        if (!(ss >> e.image >> e.mask >> e.split))
            throw DataError("manifest line " + std::to_string(lineno) +
                            " needs 'image mask split', got '" + line + "'");
        if (e.split != "train" && e.split != "test")
            throw DataError("manifest line " + std::to_string(lineno) + " has unknown split '" +
                            e.split + "'");
        e.image = resolve(e.image);
        e.mask = resolve(e.mask);
        entries.push_back(std::move(e));
    }
    return entries;
}

}  // namespace traceseg
