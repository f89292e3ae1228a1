#pragma once

// The full segmentation network: a four-stage encoder of strided-conv
// downsamplers and SS2D blocks, per-stage energy-guided trajectory extraction
// with a trajectory-aware enhancement block, a U-Net style decoder with skip
// connections, and an auxiliary perturbation-response map built by scattering
// trajectory-point energies back to image resolution.

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "traceseg/config.hpp"
#include "traceseg/energy.hpp"
#include "traceseg/ssm.hpp"
#include "traceseg/tape.hpp"
#include "traceseg/tasb.hpp"
#include "traceseg/tokenizer.hpp"
#include "traceseg/trajectory.hpp"

namespace traceseg {

// ---------------------------------------------------------------------------
// Configuration.
// ---------------------------------------------------------------------------

enum class TasbVariant { tasb, resblock, bottleneck };
enum class PgmVariant { energy_only, energy_traj, full };

inline std::string to_string(TasbVariant v) {
    switch (v) {
        case TasbVariant::tasb: return "tasb";
        case TasbVariant::resblock: return "resblock";
        default: return "bottleneck";
    }
}

inline std::string to_string(PgmVariant v) {
    switch (v) {
        case PgmVariant::energy_only: return "energy_only";
        case PgmVariant::energy_traj: return "energy_traj";
        default: return "full";
    }
}

inline TasbVariant tasb_variant_from(const std::string& s) {
    if (s == "tasb") return TasbVariant::tasb;
    if (s == "resblock") return TasbVariant::resblock;
    if (s == "bottleneck") return TasbVariant::bottleneck;
    throw ConfigError("unknown enhancement variant '" + s +
                      "' (expected tasb, resblock, or bottleneck)");
}

inline PgmVariant pgm_variant_from(const std::string& s) {
    if (s == "energy_only") return PgmVariant::energy_only;
    if (s == "energy_traj") return PgmVariant::energy_traj;
    if (s == "full") return PgmVariant::full;
    throw ConfigError("unknown path-module variant '" + s +
                      "' (expected energy_only, energy_traj, or full)");
}

// Plain-double trace settings so the config stays non-template; converted to
// TraceConfig<T> per stage inside the forward pass.
struct TraceSettings {
    double eta = 1.0;
    double epsilon = 1e-6;
    int l_max = 12;
    double decay_ratio = 0.2;
};

struct ModelConfig {
    int height = 64, width = 64;
    int in_channels = 3;
    std::array<int, 4> channels{32, 64, 128, 256};
    int blocks_per_stage = 2;  // SS2D blocks per encoder stage
    int stem_stride = 2;       // stage-1 downsampling factor

    // state-space scan
    int ssm_state = 16;
    int ssm_ratio = 4;
    bool ssm_selective = false;
    bool ssm_zoh = false;

    // hierarchical tokenizer
    int token_n = 16, token_m = 16, token_channels = 32;

    // module toggles
    bool use_pgm = true;
    bool use_tasb = true;
    PgmVariant pgm_variant = PgmVariant::full;
    TasbVariant tasb_variant = TasbVariant::tasb;

    // seed selection (shared across stages)
    int seed_k_max = 8;
    double seed_min_frac = 0.2;
    int seed_nms_radius = 2;

    std::array<TraceSettings, 4> trace{};
};

// Total spatial reduction of the deepest encoder stage.
inline int total_downsampling(const ModelConfig& cfg) { return cfg.stem_stride * 8; }

inline void validate(const ModelConfig& cfg) {
    auto positive = [](int v, const char* what) {
        if (v <= 0) throw ConfigError(std::string(what) + " must be positive, got " +
                                      std::to_string(v));
    };
    positive(cfg.height, "model.height");
    positive(cfg.width, "model.width");
    positive(cfg.in_channels, "model.in_channels");
    positive(cfg.blocks_per_stage, "model.blocks_per_stage");
    positive(cfg.ssm_state, "ssm.state");
    positive(cfg.token_channels, "token.channels");
    if (cfg.stem_stride != 2)
        throw ConfigError("model.stem_stride must be 2, got " + std::to_string(cfg.stem_stride));

    const int ds = total_downsampling(cfg);
    if (cfg.height % ds != 0)
        throw ConfigError("image height " + std::to_string(cfg.height) +
                          " is not divisible by the total downsampling " + std::to_string(ds));
    if (cfg.width % ds != 0)
        throw ConfigError("image width " + std::to_string(cfg.width) +
                          " is not divisible by the total downsampling " + std::to_string(ds));

    for (int l = 0; l < 4; ++l) {
        positive(cfg.channels[static_cast<std::size_t>(l)], "stage channel count");
        bottleneck_width(cfg.channels[static_cast<std::size_t>(l)], cfg.ssm_ratio);
        if (l > 0 && cfg.channels[static_cast<std::size_t>(l)] <
                         cfg.channels[static_cast<std::size_t>(l - 1)])
            throw ConfigError("stage channels must be non-decreasing, got " +
                              std::to_string(cfg.channels[static_cast<std::size_t>(l - 1)]) +
                              " then " + std::to_string(cfg.channels[static_cast<std::size_t>(l)]));
        if (cfg.trace[static_cast<std::size_t>(l)].l_max < 1)
            throw ConfigError("trace.l_max must be >= 1");
    }
    if (cfg.seed_k_max < 0) throw ConfigError("seeds.k_max must be >= 0");

    // The token grid must tile the input image exactly.
    make_token_grid(cfg.height, cfg.width, cfg.token_n, cfg.token_m);
}

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

inline KvMap model_config_to_map(const ModelConfig& c) {
    KvMap kv;
    kv["model.height"] = std::to_string(c.height);
    kv["model.width"] = std::to_string(c.width);
    kv["model.in_channels"] = std::to_string(c.in_channels);
    kv["model.channels"] = std::to_string(c.channels[0]) + "," + std::to_string(c.channels[1]) +
                           "," + std::to_string(c.channels[2]) + "," + std::to_string(c.channels[3]);
    kv["model.blocks_per_stage"] = std::to_string(c.blocks_per_stage);
    kv["model.stem_stride"] = std::to_string(c.stem_stride);
    kv["ssm.state"] = std::to_string(c.ssm_state);
    kv["ssm.ratio"] = std::to_string(c.ssm_ratio);
    kv["ssm.selective"] = c.ssm_selective ? "true" : "false";
    kv["ssm.zoh"] = c.ssm_zoh ? "true" : "false";
    kv["token.n"] = std::to_string(c.token_n);
    kv["token.m"] = std::to_string(c.token_m);
    kv["token.channels"] = std::to_string(c.token_channels);
    kv["pgm.enabled"] = c.use_pgm ? "true" : "false";
    kv["pgm.variant"] = to_string(c.pgm_variant);
    kv["tasb.enabled"] = c.use_tasb ? "true" : "false";
    kv["tasb.variant"] = to_string(c.tasb_variant);
    kv["seeds.k_max"] = std::to_string(c.seed_k_max);
    kv["seeds.min_frac"] = fmt_double(c.seed_min_frac);
    kv["seeds.nms_radius"] = std::to_string(c.seed_nms_radius);
    // Stages share one set of trace settings; serialized once.
    kv["trace.eta"] = fmt_double(c.trace[0].eta);
    kv["trace.epsilon"] = fmt_double(c.trace[0].epsilon);
    kv["trace.l_max"] = std::to_string(c.trace[0].l_max);
    kv["trace.decay_ratio"] = fmt_double(c.trace[0].decay_ratio);
    return kv;
}

inline ModelConfig model_config_from_map(const KvMap& kv) {
    ModelConfig c;
    c.height = kv_int(kv, "model.height", c.height);
    c.width = kv_int(kv, "model.width", c.width);
    c.in_channels = kv_int(kv, "model.in_channels", c.in_channels);
    if (auto it = kv.find("model.channels"); it != kv.end()) {
        std::array<int, 4> ch{};
        std::istringstream ss(it->second);
        std::string tok;
        int i = 0;
        while (std::getline(ss, tok, ',')) {
            if (i >= 4) break;
            try {
                ch[static_cast<std::size_t>(i++)] = std::stoi(trim(tok));
            } catch (const std::exception&) {
                throw ConfigError("model.channels expects four comma-separated integers, got '" +
                                  it->second + "'");
            }
        }
        if (i != 4)
            throw ConfigError("model.channels expects four comma-separated integers, got '" +
                              it->second + "'");
        c.channels = ch;
    }
    c.blocks_per_stage = kv_int(kv, "model.blocks_per_stage", c.blocks_per_stage);
    c.stem_stride = kv_int(kv, "model.stem_stride", c.stem_stride);
    c.ssm_state = kv_int(kv, "ssm.state", c.ssm_state);
    c.ssm_ratio = kv_int(kv, "ssm.ratio", c.ssm_ratio);
    c.ssm_selective = kv_bool(kv, "ssm.selective", c.ssm_selective);
    c.ssm_zoh = kv_bool(kv, "ssm.zoh", c.ssm_zoh);
    c.token_n = kv_int(kv, "token.n", c.token_n);
    c.token_m = kv_int(kv, "token.m", c.token_m);
    c.token_channels = kv_int(kv, "token.channels", c.token_channels);
    c.use_pgm = kv_bool(kv, "pgm.enabled", c.use_pgm);
    c.pgm_variant = pgm_variant_from(kv_str(kv, "pgm.variant", to_string(c.pgm_variant)));
    c.use_tasb = kv_bool(kv, "tasb.enabled", c.use_tasb);
    c.tasb_variant = tasb_variant_from(kv_str(kv, "tasb.variant", to_string(c.tasb_variant)));
    c.seed_k_max = kv_int(kv, "seeds.k_max", c.seed_k_max);
    c.seed_min_frac = kv_double(kv, "seeds.min_frac", c.seed_min_frac);
    c.seed_nms_radius = kv_int(kv, "seeds.nms_radius", c.seed_nms_radius);
    TraceSettings t;
    t.eta = kv_double(kv, "trace.eta", t.eta);
    t.epsilon = kv_double(kv, "trace.epsilon", t.epsilon);
    t.l_max = kv_int(kv, "trace.l_max", t.l_max);
    t.decay_ratio = kv_double(kv, "trace.decay_ratio", t.decay_ratio);
    c.trace = {t, t, t, t};
    return c;
}

// ---------------------------------------------------------------------------
// Model: named parameter and buffer registry.
// ---------------------------------------------------------------------------

template <typename T>
struct Model {
    ModelConfig cfg;
    std::map<std::string, Tensor<T>> params;   // learnable tensors
    std::map<std::string, Tensor<T>> buffers;  // batch-norm running statistics
    std::uint64_t step = 0;                    // optimizer steps applied so far

    Model() = default;
    Model(const ModelConfig& c, std::uint64_t seed) : cfg(c) { init(seed); }

   private:
    void add(const std::string& name, Tensor<T> t) {
        if (!params.emplace(name, std::move(t)).second)
            throw ConfigError("duplicate parameter name '" + name + "'");
    }
    void add_buf(const std::string& name, Tensor<T> t) {
        if (!buffers.emplace(name, std::move(t)).second)
            throw ConfigError("duplicate buffer name '" + name + "'");
    }

    Tensor<T> randn(Rng& rng, Shape s, double stddev) {
        Tensor<T> t(s);
        for (std::size_t i = 0; i < t.numel(); ++i)
            t.ptr()[i] = static_cast<T>(rng.normal(0.0, stddev));
        return t;
    }
    Tensor<T> randu(Rng& rng, Shape s, double lo, double hi) {
        Tensor<T> t(s);
        for (std::size_t i = 0; i < t.numel(); ++i)
            t.ptr()[i] = static_cast<T>(rng.uniform(lo, hi));
        return t;
    }

    // conv (He-style fan-in init) + batch-norm parameter/buffer group
    void add_conv(Rng& rng, const std::string& prefix, int cout, int cin, int k) {
        const double stddev = std::sqrt(2.0 / (static_cast<double>(cin) * k * k));
        add(prefix + ".conv.w", randn(rng, {cout, cin, k, k}, stddev));
        add(prefix + ".conv.b", Tensor<T>::zeros({cout}));
    }
    void add_bn(Rng&, const std::string& prefix, int c) {
        add(prefix + ".bn.g", Tensor<T>::full({c}, T(1)));
        add(prefix + ".bn.b", Tensor<T>::zeros({c}));
        add_buf(prefix + ".bn.rm", Tensor<T>::zeros({c}));
        add_buf(prefix + ".bn.rv", Tensor<T>::full({c}, T(1)));
    }

    // one scan direction inside a bottleneck block
    void add_scan_dir(Rng& rng, const std::string& prefix, int channels) {
        const int inner = bottleneck_width(channels, cfg.ssm_ratio);
        const int S = cfg.ssm_state;
        const double sin = std::sqrt(1.0 / static_cast<double>(inner));
        const double sch = std::sqrt(1.0 / static_cast<double>(channels));
        const double sst = std::sqrt(1.0 / static_cast<double>(S));
        add(prefix + ".a_raw", randu(rng, {S}, 0.2, 1.5));
        add(prefix + ".delta_raw", randu(rng, {S}, -2.3, -0.5));
        add(prefix + ".B", randn(rng, {S, inner}, sin));
        add(prefix + ".C", randn(rng, {inner, S}, sst));
        add(prefix + ".D", randn(rng, {inner, inner}, sin));
        add(prefix + ".Wd", Tensor<T>::zeros({S, inner}));
        add(prefix + ".reduce.w", randn(rng, {inner, channels}, sch));
        add(prefix + ".reduce.b", Tensor<T>::zeros({inner}));
        add(prefix + ".expand.w", randn(rng, {channels, inner}, sin));
        add(prefix + ".expand.b", Tensor<T>::zeros({channels}));
    }

    void add_ss2d(Rng& rng, const std::string& prefix, int channels) {
        for (int d = 0; d < 4; ++d) add_scan_dir(rng, prefix + ".dir" + std::to_string(d), channels);
        add(prefix + ".ln.g", Tensor<T>::full({channels}, T(1)));
        add(prefix + ".ln.b", Tensor<T>::zeros({channels}));
    }

    void init(std::uint64_t seed) {
        validate(cfg);
        Rng rng(mix_seed(seed, 0x6d6f64656cull));  // model-init stream

        const int cw = cfg.token_channels;

        // stem: in_channels -> C1 at stride 2
        add_conv(rng, "stem", cfg.channels[0], cfg.in_channels, 3);
        add_bn(rng, "stem", cfg.channels[0]);

        for (int l = 0; l < 4; ++l) {
            const std::string enc = "enc" + std::to_string(l + 1);
            const int cl = cfg.channels[static_cast<std::size_t>(l)];
            if (l > 0) {
                add_conv(rng, enc + ".down", cl, cfg.channels[static_cast<std::size_t>(l - 1)], 3);
                add_bn(rng, enc + ".down", cl);
            }
            for (int b = 0; b < cfg.blocks_per_stage; ++b)
                add_ss2d(rng, enc + ".blk" + std::to_string(b), cl);

            // per-stage enhancement blocks; every variant's parameters are
            // allocated so the checkpoint layout does not depend on toggles
            const std::string tb = "tasb" + std::to_string(l + 1);
            add_ss2d(rng, tb + ".ss2d", cl);
            add_scan_dir(rng, tb + ".traj", cl);
            const int zw = 2 * cl + 2 * cw;
            add(tb + ".phi.w", randn(rng, {cl, zw}, std::sqrt(1.0 / static_cast<double>(zw))));
            add(tb + ".phi.b", Tensor<T>::zeros({cl}));
            add(tb + ".lambda", Tensor<T>::full({1}, T(0.1)));

            add_conv(rng, tb + ".res.c1", cl, cl, 3);
            add_bn(rng, tb + ".res.c1", cl);
            add_conv(rng, tb + ".res.c2", cl, cl, 3);
            add_bn(rng, tb + ".res.c2", cl);

            const int bw = bottleneck_width(cl, cfg.ssm_ratio);
            add_conv(rng, tb + ".bneck.c1", bw, cl, 1);
            add_bn(rng, tb + ".bneck.c1", bw);
            add_conv(rng, tb + ".bneck.c2", bw, bw, 3);
            add_bn(rng, tb + ".bneck.c2", bw);
            add_conv(rng, tb + ".bneck.c3", cl, bw, 1);
            add_bn(rng, tb + ".bneck.c3", cl);
        }

        // tokenizer stem (shared across stages)
        add_conv(rng, "tok.stem", cw, cfg.in_channels, 3);
        add_bn(rng, "tok.stem", cw);

        // decoder: three upsampling stages with skip concatenation
        for (int k = 3; k >= 1; --k) {
            const std::string dec = "dec" + std::to_string(k);
            const int cin = cfg.channels[static_cast<std::size_t>(k)] +
                            cfg.channels[static_cast<std::size_t>(k - 1)];
            const int cout = cfg.channels[static_cast<std::size_t>(k - 1)];
            add_conv(rng, dec, cout, cin, 3);
            add_bn(rng, dec, cout);
        }
        add_conv(rng, "head", 1, cfg.channels[0], 1);

        // perturbation-response temperature
        add("pgm.scale", Tensor<T>::full({1}, T(1)));
    }
};

// ---------------------------------------------------------------------------
// Forward pass.
// ---------------------------------------------------------------------------

template <typename T>
struct StageDiag {
    Tensor<T> energy;                     // [H_l, W_l] energy map (empty when pgm off)
    std::vector<Trajectory<T>> trajs;     // stage-level trajectories
};

template <typename T>
struct ImageDiag {
    std::array<StageDiag<T>, 4> stages;
};

template <typename T>
struct ForwardResult {
    int logits = -1;    // [N,1,H,W]
    int response = -1;  // [N,1,H,W] perturbation-response probabilities; -1 when pgm off
    std::vector<ImageDiag<T>> diag;      // one entry per batch image
    std::map<std::string, int> param_ids;  // tape leaf id per parameter name
};

namespace detail {

template <typename T>
class Binder {
   public:
    Binder(Tape<T>& tape, Model<T>& m) : tape_(tape), model_(m) {
        for (auto& [name, t] : m.params) ids_[name] = tape.leaf(t, true);
    }
    int operator()(const std::string& name) const {
        const auto it = ids_.find(name);
        if (it == ids_.end()) throw ConfigError("unknown parameter name '" + name + "'");
        return it->second;
    }
    Tensor<T>& buf(const std::string& name) const {
        const auto it = model_.buffers.find(name);
        if (it == model_.buffers.end()) throw ConfigError("unknown buffer name '" + name + "'");
        return it->second;
    }
    const std::map<std::string, int>& ids() const { return ids_; }

    ScanParamIds scan_dir(const std::string& p) const {
        ScanParamIds s;
        s.a_raw = (*this)(p + ".a_raw");
        s.delta_raw = (*this)(p + ".delta_raw");
        s.B = (*this)(p + ".B");
        s.C = (*this)(p + ".C");
        s.D = (*this)(p + ".D");
        s.Wd = (*this)(p + ".Wd");
        return s;
    }
    BottleneckParamIds bneck_dir(const std::string& p) const {
        BottleneckParamIds b;
        b.scan = scan_dir(p);
        b.reduce_w = (*this)(p + ".reduce.w");
        b.reduce_b = (*this)(p + ".reduce.b");
        b.expand_w = (*this)(p + ".expand.w");
        b.expand_b = (*this)(p + ".expand.b");
        return b;
    }
    Ss2dParamIds ss2d(const std::string& p) const {
        Ss2dParamIds s;
        for (int d = 0; d < 4; ++d)
            s.dir[static_cast<std::size_t>(d)] = bneck_dir(p + ".dir" + std::to_string(d));
        s.ln_gamma = (*this)(p + ".ln.g");
        s.ln_beta = (*this)(p + ".ln.b");
        return s;
    }
    TasbParamIds tasb(const std::string& p) const {
        TasbParamIds t;
        t.ss2d = ss2d(p + ".ss2d");
        t.traj = bneck_dir(p + ".traj");
        t.phi_w = (*this)(p + ".phi.w");
        t.phi_b = (*this)(p + ".phi.b");
        t.lambda_ = (*this)(p + ".lambda");
        return t;
    }

   private:
    Tape<T>& tape_;
    Model<T>& model_;
    std::map<std::string, int> ids_;
};

}  // namespace detail

// conv -> batch norm -> activation, the downsampler/decoder building block
template <typename T>
int conv_bn_act(Tape<T>& tape, const detail::Binder<T>& P, const std::string& prefix, int x,
                int stride, bool training, bool use_gelu) {
    const int conv = tape.conv2d(x, P(prefix + ".conv.w"), P(prefix + ".conv.b"), stride, 1,
                                 PadMode::zero);
    const int bn = tape.batch_norm(conv, P(prefix + ".bn.g"), P(prefix + ".bn.b"),
                                   P.buf(prefix + ".bn.rm"), P.buf(prefix + ".bn.rv"), training,
                                   T(0.1), T(1e-5));
    return use_gelu ? tape.gelu(bn) : tape.relu(bn);
}

// Trajectory geometry (seed positions, traced points, scatter pixels) enters
// the graph as control data: gradients flow through the values sampled at the
// points, not through the point coordinates. Passing `pinned` replays a fixed
// geometry from an earlier forward instead of re-deriving it from the current
// energy maps, which makes the parameters-to-loss map smooth — numerical
// differencing of the full model depends on that.
template <typename T>
ForwardResult<T> model_forward(Tape<T>& tape, Model<T>& model, int image, bool training,
                               const std::vector<ImageDiag<T>>* pinned = nullptr) {
    const ModelConfig& cfg = model.cfg;
    validate(cfg);

    const Tensor<T>& img = tape.value(image);
    if (img.rank() != 4 || img.dim(1) != cfg.in_channels || img.dim(2) != cfg.height ||
        img.dim(3) != cfg.width)
        throw ShapeError("model_forward expects [N," + std::to_string(cfg.in_channels) + "," +
                         std::to_string(cfg.height) + "," + std::to_string(cfg.width) +
                         "] input, got " + shape_str(img.shape));
    const int N = img.dim(0);

    detail::Binder<T> P(tape, model);
    ForwardResult<T> out;
    out.param_ids = P.ids();
    out.diag.resize(static_cast<std::size_t>(N));

    const ScanFlags flags{cfg.ssm_selective, cfg.ssm_zoh};
    const T ln_eps = T(1e-5);

    // Trajectories feed the enhancement block only in the full path-module
    // variant; the other variants keep the context-only enhancement.
    const bool tasb_gets_trajs = cfg.use_tasb && cfg.tasb_variant == TasbVariant::tasb &&
                                 cfg.use_pgm && cfg.pgm_variant == PgmVariant::full;

    TokenGrid grid{};
    std::vector<EmbeddingIds> emb(static_cast<std::size_t>(N));
    if (tasb_gets_trajs) {
        grid = make_token_grid(cfg.height, cfg.width, cfg.token_n, cfg.token_m);
        const StemIds tok{P("tok.stem.conv.w"), P("tok.stem.conv.b"), P("tok.stem.bn.g"),
                          P("tok.stem.bn.b")};
        for (int n = 0; n < N; ++n) {
            const int one = tape.reshape(tape.slice(image, 0, n, 1),
                                         {cfg.in_channels, cfg.height, cfg.width});
            emb[static_cast<std::size_t>(n)] =
                embed_words(tape, one, grid, tok, P.buf("tok.stem.bn.rm"),
                            P.buf("tok.stem.bn.rv"), training, T(0.1), T(1e-5));
        }
    }

    // Per-image response-map accumulators: sampled energy rows plus the image
    // pixel each trajectory point lands on.
    std::vector<std::vector<int>> resp_rows(static_cast<std::size_t>(N));
    std::vector<std::vector<std::pair<int, int>>> resp_pixels(static_cast<std::size_t>(N));

    int x = conv_bn_act(tape, P, "stem", image, cfg.stem_stride, training, true);
    std::array<int, 4> skips{-1, -1, -1, -1};

    for (int l = 0; l < 4; ++l) {
        const std::string enc = "enc" + std::to_string(l + 1);
        const std::string tb = "tasb" + std::to_string(l + 1);
        const int cl = cfg.channels[static_cast<std::size_t>(l)];
        if (l > 0) x = conv_bn_act(tape, P, enc + ".down", x, 2, training, true);
        const int hl = tape.value(x).dim(2), wl = tape.value(x).dim(3);

        // SS2D blocks run per image (no cross-image coupling inside a block)
        std::vector<int> per_img(static_cast<std::size_t>(N));
        for (int n = 0; n < N; ++n) {
            int xi = tape.reshape(tape.slice(x, 0, n, 1), {cl, hl, wl});
            for (int b = 0; b < cfg.blocks_per_stage; ++b)
                xi = ss2d_op(tape, xi, P.ss2d(enc + ".blk" + std::to_string(b)), flags, ln_eps);
            per_img[static_cast<std::size_t>(n)] = xi;
        }

        // Energy-guided trajectory extraction per image. The energy operator
        // needs at least a 3x3 map, so stages downsampled below that simply
        // contribute no trajectories.
        std::vector<std::vector<Trajectory<T>>> trajs(static_cast<std::size_t>(N));
        if (cfg.use_pgm && hl >= 3 && wl >= 3) {
            const TraceSettings& ts = cfg.trace[static_cast<std::size_t>(l)];
            TraceConfig<T> tc;
            tc.eta = static_cast<T>(ts.eta);
            tc.epsilon = static_cast<T>(ts.epsilon);
            tc.l_max = ts.l_max;
            tc.decay_ratio = static_cast<T>(ts.decay_ratio);
            const int scale = stage_scale(l + 1, cfg.stem_stride);
            for (int n = 0; n < N; ++n) {
                const int xi = per_img[static_cast<std::size_t>(n)];
                const int emap_id = energy_map_op(tape, xi);
                const Tensor<T> emap = tape.value(emap_id);  // copy: tape may reallocate
                std::vector<Trajectory<T>>& tr = trajs[static_cast<std::size_t>(n)];
                if (pinned) {
                    tr = (*pinned)[static_cast<std::size_t>(n)]
                             .stages[static_cast<std::size_t>(l)]
                             .trajs;
                } else if (cfg.pgm_variant == PgmVariant::energy_only) {
                    // seeds only: single-point trajectories, no gradient walk
                    const auto seeds =
                        select_seeds(emap, cfg.seed_k_max, static_cast<T>(cfg.seed_min_frac),
                                     cfg.seed_nms_radius);
                    for (const auto& s : seeds) {
                        Trajectory<T> t;
                        t.points = {Vec2<T>{static_cast<T>(s.x), static_cast<T>(s.y)}};
                        t.tokens = sample_tokens(tape.value(xi), t.points);
                        t.seed_energy = s.energy;
                        t.stage = l + 1;
                        tr.push_back(std::move(t));
                    }
                } else {
                    const auto seeds =
                        select_seeds(emap, cfg.seed_k_max, static_cast<T>(cfg.seed_min_frac),
                                     cfg.seed_nms_radius);
                    const Tensor<T> grad2 = energy_gradient(emap, GradMode::central);
                    tr = extract_all(tape.value(xi), emap, grad2, seeds, tc, l + 1);
                }

                auto& diag = out.diag[static_cast<std::size_t>(n)]
                                 .stages[static_cast<std::size_t>(l)];
                diag.energy = emap;
                diag.trajs = tr;

                // response-map contributions: sampled energies on the tape,
                // trajectory points scaled up to image coordinates
                for (const auto& t : tr) {
                    const int rows = tape.reshape(tape.sample_scalars(emap_id, t.points),
                                                  {static_cast<int>(t.points.size()), 1});
                    resp_rows[static_cast<std::size_t>(n)].push_back(rows);
                    for (const auto& pt : t.points)
                        resp_pixels[static_cast<std::size_t>(n)].emplace_back(
                            detail::round_coord(static_cast<double>(pt.x) * scale, cfg.width),
                            detail::round_coord(static_cast<double>(pt.y) * scale, cfg.height));
                }
            }
        }

        // Enhancement.
        if (cfg.use_tasb && cfg.tasb_variant == TasbVariant::tasb) {
            const TasbParamIds tp = P.tasb(tb);
            static const std::vector<Trajectory<T>> kNone;
            for (int n = 0; n < N; ++n) {
                const auto& feed = tasb_gets_trajs ? trajs[static_cast<std::size_t>(n)] : kNone;
                per_img[static_cast<std::size_t>(n)] =
                    tasb_forward(tape, per_img[static_cast<std::size_t>(n)], feed,
                                 emb[static_cast<std::size_t>(n)], grid, l + 1, cfg.stem_stride,
                                 tp, flags, ln_eps)
                        .fused;
            }
        }

        std::vector<int> lifted(static_cast<std::size_t>(N));
        for (int n = 0; n < N; ++n)
            lifted[static_cast<std::size_t>(n)] =
                tape.reshape(per_img[static_cast<std::size_t>(n)], {1, cl, hl, wl});
        x = N == 1 ? lifted[0] : tape.concat(lifted, 0);

        if (cfg.use_tasb && cfg.tasb_variant == TasbVariant::resblock) {
            const int c1 = conv_bn_act(tape, P, tb + ".res.c1", x, 1, training, false);
            const int conv2 = tape.conv2d(c1, P(tb + ".res.c2.conv.w"), P(tb + ".res.c2.conv.b"),
                                          1, 1, PadMode::zero);
            const int bn2 = tape.batch_norm(conv2, P(tb + ".res.c2.bn.g"), P(tb + ".res.c2.bn.b"),
                                            P.buf(tb + ".res.c2.bn.rm"),
                                            P.buf(tb + ".res.c2.bn.rv"), training, T(0.1),
                                            T(1e-5));
            x = tape.relu(tape.add(x, bn2));
        } else if (cfg.use_tasb && cfg.tasb_variant == TasbVariant::bottleneck) {
            const int c1 = tape.conv2d(x, P(tb + ".bneck.c1.conv.w"), P(tb + ".bneck.c1.conv.b"),
                                       1, 0, PadMode::zero);
            const int b1 = tape.batch_norm(c1, P(tb + ".bneck.c1.bn.g"), P(tb + ".bneck.c1.bn.b"),
                                           P.buf(tb + ".bneck.c1.bn.rm"),
                                           P.buf(tb + ".bneck.c1.bn.rv"), training, T(0.1),
                                           T(1e-5));
            const int r1 = tape.relu(b1);
            const int c2 = conv_bn_act(tape, P, tb + ".bneck.c2", r1, 1, training, false);
            const int c3 = tape.conv2d(c2, P(tb + ".bneck.c3.conv.w"), P(tb + ".bneck.c3.conv.b"),
                                       1, 0, PadMode::zero);
            const int b3 = tape.batch_norm(c3, P(tb + ".bneck.c3.bn.g"), P(tb + ".bneck.c3.bn.b"),
                                           P.buf(tb + ".bneck.c3.bn.rm"),
                                           P.buf(tb + ".bneck.c3.bn.rv"), training, T(0.1),
                                           T(1e-5));
            x = tape.relu(tape.add(x, b3));
        }

        skips[static_cast<std::size_t>(l)] = x;
    }

    // Decoder: upsample, concatenate the skip, fuse with conv-bn-relu.
    int y = skips[3];
    for (int k = 3; k >= 1; --k) {
        const int sk = skips[static_cast<std::size_t>(k - 1)];
        const int th = tape.value(sk).dim(2), tw = tape.value(sk).dim(3);
        const int up = tape.bilinear_resize(y, th, tw);
        const int cat = tape.concat({up, sk}, 1);
        y = conv_bn_act(tape, P, "dec" + std::to_string(k), cat, 1, training, false);
    }
    const int head = tape.conv2d(y, P("head.conv.w"), P("head.conv.b"), 1, 0, PadMode::zero);
    out.logits = tape.bilinear_resize(head, cfg.height, cfg.width);

    // Perturbation-response map: average scattered trajectory-point energies,
    // squash through a learnable temperature; pixels no trajectory touched
    // stay exactly zero.
    if (cfg.use_pgm) {
        const int scale_id = P("pgm.scale");
        std::vector<int> resp(static_cast<std::size_t>(N));
        for (int n = 0; n < N; ++n) {
            const auto& rows = resp_rows[static_cast<std::size_t>(n)];
            const auto& pixels = resp_pixels[static_cast<std::size_t>(n)];
            if (rows.empty()) {
                resp[static_cast<std::size_t>(n)] =
                    tape.constant(Tensor<T>::zeros({1, 1, cfg.height, cfg.width}));
                continue;
            }
            const int all = rows.size() == 1 ? rows[0] : tape.concat(rows, 0);
            const int scat = scatter_average_rows(tape, all, pixels, cfg.height, cfg.width);
            const int sig = tape.sigmoid(tape.mul_scalar_param(scat, scale_id));
            Tensor<T> ind = Tensor<T>::zeros({1, cfg.height, cfg.width});
            for (const auto& [px, py] : pixels)
                ind.at(0, py, px) = T(1);
            const int masked = tape.mul(sig, tape.constant(std::move(ind)));
            resp[static_cast<std::size_t>(n)] =
                tape.reshape(masked, {1, 1, cfg.height, cfg.width});
        }
        out.response = N == 1 ? resp[0] : tape.concat(resp, 0);
    }

    return out;
}

}  // namespace traceseg
