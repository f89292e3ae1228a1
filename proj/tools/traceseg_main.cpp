// traceseg: synthetic-scene generation, training, evaluation, and inference
// for the trajectory-aware small-target segmentation network.
//
// Exit codes: 0 success; 1 usage or configuration error; 2 data error
// (unreadable/malformed files); 3 numeric failure (non-finite loss).

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "traceseg/config.hpp"
#include "traceseg/network.hpp"
#include "traceseg/synth.hpp"
#include "traceseg/trace_io.hpp"
#include "traceseg/train.hpp"

namespace ts = traceseg;

namespace {

std::string header_line(const ts::KvMap& cfg) {
    return std::string("# ") + ts::kToolName + " " + ts::kToolVersion +
           " config=" + ts::config_hash(cfg) + "\n";
}

std::ofstream open_out(const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ts::DataError("cannot open '" + path + "' for writing");
    return out;
}

ts::Tensor<float> first_channel(const ts::Tensor<float>& img) {
    const int H = img.dim(1), W = img.dim(2);
    ts::Tensor<float> g({H, W});
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = img[i];
    return g;
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

int run_gen(int count, int size, double difficulty, std::uint64_t seed,
            const std::string& out_dir) {
    const ts::Dataset ds = ts::make_dataset(count, size, difficulty, seed);
    std::filesystem::create_directories(out_dir);

    ts::KvMap cfg;
    cfg["gen.count"] = std::to_string(count);
    cfg["gen.size"] = std::to_string(size);
    cfg["gen.difficulty"] = std::to_string(difficulty);
    cfg["gen.seed"] = std::to_string(seed);

    std::ofstream manifest = open_out(out_dir + "/manifest.txt");
    manifest << header_line(cfg);
    auto emit = [&](const std::vector<ts::Sample>& samples, const std::string& tag) {
        for (std::size_t i = 0; i < samples.size(); ++i) {
            char base[64];
            std::snprintf(base, sizeof(base), "%s_%03zu", tag.c_str(), i);
            const std::string img_name = std::string(base) + ".png";
            const std::string mask_name = std::string(base) + "_mask.png";
            ts::save_png_gray(out_dir + "/" + img_name, first_channel(samples[i].image));
            ts::save_png_gray(out_dir + "/" + mask_name, samples[i].mask);
            manifest << img_name << ' ' << mask_name << ' ' << tag << '\n';
        }
    };
    emit(ds.train, "train");
    emit(ds.test, "test");
    std::printf("wrote %zu train + %zu test pairs to %s\n", ds.train.size(), ds.test.size(),
                out_dir.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// shared config plumbing
// ---------------------------------------------------------------------------

struct RunSettings {
    ts::ModelConfig model;
    ts::TrainConfig train;
    ts::KvMap raw;  // canonical key=value view for provenance headers
};

RunSettings settings_from_map(const ts::KvMap& kv) {
    RunSettings s;
    s.model = ts::model_config_from_map(kv);
    s.train.alpha = ts::kv_double(kv, "train.alpha", s.train.alpha);
    s.train.beta = ts::kv_double(kv, "train.beta", s.train.beta);
    s.train.epochs = ts::kv_int(kv, "train.epochs", s.train.epochs);
    s.train.batch_size = ts::kv_int(kv, "train.batch_size", s.train.batch_size);
    s.train.seed = static_cast<std::uint64_t>(
        ts::kv_int(kv, "train.seed", static_cast<int>(s.train.seed)));
    s.train.eval_threshold = ts::kv_double(kv, "eval.threshold", s.train.eval_threshold);
    const std::string kind = ts::kv_str(kv, "opt.kind", "adam");
    if (kind == "adam") s.train.opt.kind = ts::OptKind::adam;
    else if (kind == "sgd") s.train.opt.kind = ts::OptKind::sgd;
    else throw ts::ConfigError("opt.kind must be 'adam' or 'sgd', got '" + kind + "'");
    s.train.opt.lr = ts::kv_double(kv, "opt.lr", s.train.opt.lr);
    s.train.opt.beta1 = ts::kv_double(kv, "opt.beta1", s.train.opt.beta1);
    s.train.opt.beta2 = ts::kv_double(kv, "opt.beta2", s.train.opt.beta2);
    s.train.opt.eps = ts::kv_double(kv, "opt.eps", s.train.opt.eps);
    s.train.opt.momentum = ts::kv_double(kv, "opt.momentum", s.train.opt.momentum);
    s.train.opt.cosine = ts::kv_bool(kv, "opt.cosine", s.train.opt.cosine);
    s.train.opt.clip_norm = ts::kv_double(kv, "opt.clip_norm", s.train.opt.clip_norm);
    return s;
}

ts::KvMap settings_to_map(const RunSettings& s) {
    ts::KvMap kv = ts::model_config_to_map(s.model);
    kv["train.alpha"] = ts::fmt_double(s.train.alpha);
    kv["train.beta"] = ts::fmt_double(s.train.beta);
    kv["train.epochs"] = std::to_string(s.train.epochs);
    kv["train.batch_size"] = std::to_string(s.train.batch_size);
    kv["train.seed"] = std::to_string(s.train.seed);
    kv["eval.threshold"] = ts::fmt_double(s.train.eval_threshold);
    kv["opt.kind"] = s.train.opt.kind == ts::OptKind::adam ? "adam" : "sgd";
    kv["opt.lr"] = ts::fmt_double(s.train.opt.lr);
    kv["opt.beta1"] = ts::fmt_double(s.train.opt.beta1);
    kv["opt.beta2"] = ts::fmt_double(s.train.opt.beta2);
    kv["opt.eps"] = ts::fmt_double(s.train.opt.eps);
    kv["opt.momentum"] = ts::fmt_double(s.train.opt.momentum);
    kv["opt.cosine"] = s.train.opt.cosine ? "true" : "false";
    kv["opt.clip_norm"] = ts::fmt_double(s.train.opt.clip_norm);
    return kv;
}

RunSettings load_settings(const std::string& config_path) {
    ts::KvMap kv;
    if (!config_path.empty()) {
        std::ifstream in(config_path);
        if (!in) throw ts::DataError("cannot open config '" + config_path + "'");
        std::ostringstream ss;
        ss << in.rdbuf();
        kv = ts::parse_kv_text(ss.str());
    }
    RunSettings s = settings_from_map(kv);
    s.raw = settings_to_map(s);
    return s;
}

struct LoadedData {
    std::vector<ts::Sample> train, test;
};

LoadedData load_samples(const std::string& manifest_path) {
    LoadedData d;
    for (const auto& e : ts::load_manifest(manifest_path)) {
        ts::Sample s = ts::load_pair(e.image, e.mask);
        (e.split == "train" ? d.train : d.test).push_back(std::move(s));
    }
    return d;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

void write_metric_block(std::ostream& out, const std::string& prefix,
                        const ts::MetricReport& r) {
    out << prefix << ".iou=" << r.iou << '\n'
        << prefix << ".niou=" << r.niou << '\n'
        << prefix << ".pd=" << r.pd << '\n'
        << prefix << ".fa=" << r.fa << '\n'
        << prefix << ".targets_total=" << r.targets_total << '\n'
        << prefix << ".targets_detected=" << r.targets_detected << '\n'
        << prefix << ".fa_pixels=" << r.fa_pixels << '\n';
}

int run_train(const std::string& manifest, const std::string& config_path,
              std::optional<int> epochs, std::optional<std::uint64_t> seed,
              const std::string& out_dir, const std::string& resume) {
    RunSettings s = load_settings(config_path);
    if (epochs) s.train.epochs = *epochs;
    if (seed) s.train.seed = *seed;
    s.train.out_dir = out_dir;
    s.raw = settings_to_map(s);

    const LoadedData data = load_samples(manifest);
    if (data.train.empty()) throw ts::DataError("manifest '" + manifest + "' has no train entries");
    const std::vector<ts::Sample>& eval_set = data.test.empty() ? data.train : data.test;

    ts::Model<float> model(s.model, s.train.seed);
    ts::OptState<float> opt_state;
    if (!resume.empty()) {
        model = ts::load_checkpoint<float>(resume, &opt_state);
        s.model = model.cfg;  // the checkpoint's architecture wins on resume
        s.raw = settings_to_map(s);
    }

    const ts::TrainResult r = ts::train(model, data.train, eval_set, s.train, &opt_state);

    std::ofstream curve = open_out(out_dir + "/loss_curve.txt");
    curve << header_line(s.raw);
    curve << "# step loss\n";
    curve.precision(17);
    for (std::size_t i = 0; i < r.loss_curve.size(); ++i)
        curve << i << ' ' << r.loss_curve[i] << '\n';

    std::ofstream metrics = open_out(out_dir + "/metrics.txt");
    metrics << header_line(s.raw);
    metrics.precision(10);
    for (std::size_t i = 0; i < r.reports.size(); ++i) {
        char prefix[32];
        std::snprintf(prefix, sizeof(prefix), "epoch_%03d",
                      r.start_epoch + static_cast<int>(i) + 1);
        write_metric_block(metrics, prefix, r.reports[i]);
    }

    if (!r.reports.empty()) {
        const ts::MetricReport& last = r.reports.back();
        std::printf("trained %zu steps; final eval IoU %.4f Pd %.4f Fa %.6f\n",
                    r.loss_curve.size(), last.iou, last.pd, last.fa);
    } else {
        std::printf("nothing to do: checkpoint already covers %d epochs\n", r.start_epoch);
    }
    return 0;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

int run_eval(const std::string& manifest, const std::string& checkpoint, double threshold,
             const std::string& roc_path, const std::string& report_path) {
    ts::Model<float> model = ts::load_checkpoint<float>(checkpoint);
    const auto entries = ts::load_manifest(manifest);
    if (entries.empty()) throw ts::DataError("manifest '" + manifest + "' is empty");

    // probability maps are computed once and reused across thresholds
    struct Scored {
        ts::Tensor<float> prob;
        ts::Tensor<float> gt;
        std::string split;
    };
    std::vector<Scored> scored;
    for (const auto& e : entries) {
        const ts::Sample s = ts::load_pair(e.image, e.mask);
        const int H = s.image.dim(1), W = s.image.dim(2);
        ts::Tensor<float> img({1, 3, H, W});
        img.data = s.image.data;
        ts::Tape<float> tape;
        const auto fr = ts::model_forward(tape, model, tape.constant(std::move(img)), false);
        const ts::Tensor<float>& logits = tape.value(fr.logits);
        Scored sc;
        sc.prob = ts::Tensor<float>({H, W});
        for (std::size_t i = 0; i < sc.prob.numel(); ++i)
            sc.prob[i] = static_cast<float>(
                1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[i]))));
        sc.gt = s.mask;
        sc.split = e.split;
        scored.push_back(std::move(sc));
    }

    auto accumulate = [&](const std::string& split, float thr) {
        ts::MetricAccum acc;
        for (const auto& sc : scored)
            if (split == "all" || sc.split == split) acc.add(sc.prob, sc.gt, thr);
        return acc;
    };

    const ts::KvMap cfg = ts::model_config_to_map(model.cfg);
    std::ostringstream report;
    report << header_line(cfg);
    report << "threshold=" << threshold << '\n';
    bool has_train = false, has_test = false;
    for (const auto& e : entries) (e.split == "train" ? has_train : has_test) = true;
    write_metric_block(report, "all", accumulate("all", static_cast<float>(threshold)).report());
    if (has_train && has_test) {
        write_metric_block(report, "train",
                           accumulate("train", static_cast<float>(threshold)).report());
        write_metric_block(report, "test",
                           accumulate("test", static_cast<float>(threshold)).report());
    }

    if (report_path.empty()) {
        std::fputs(report.str().c_str(), stdout);
    } else {
        std::ofstream out = open_out(report_path);
        out << report.str();
    }

    if (!roc_path.empty()) {
        std::ofstream roc = open_out(roc_path);
        roc << header_line(cfg);
        roc << "# fpr tpr (thresholds 0.05..0.95 step 0.05)\n";
        roc.precision(10);
        for (int i = 1; i <= 19; ++i) {
            const float thr = static_cast<float>(i) * 0.05f;
            const ts::MetricAccum acc = accumulate("all", thr);
            const std::uint64_t tn = acc.total_pixels - acc.tp - acc.fp - acc.fn;
            const double fpr =
                acc.fp + tn == 0 ? 0.0 : static_cast<double>(acc.fp) / static_cast<double>(acc.fp + tn);
            const double tpr =
                acc.tp + acc.fn == 0 ? 1.0 : static_cast<double>(acc.tp) / static_cast<double>(acc.tp + acc.fn);
            roc << fpr << ' ' << tpr << '\n';
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// infer
// ---------------------------------------------------------------------------

int run_infer(const std::string& image_path, const std::string& checkpoint,
              const std::string& out_mask, const std::string& diag_dir, double threshold) {
    ts::Model<float> model = ts::load_checkpoint<float>(checkpoint);
    const ts::Tensor<float> gray = ts::load_gray(image_path);
    const int H = gray.dim(0), W = gray.dim(1);
    ts::Tensor<float> img({1, 3, H, W});
    for (std::size_t i = 0; i < gray.numel(); ++i)
        img.data[i] = img.data[i + gray.numel()] = img.data[i + 2 * gray.numel()] = gray.data[i];

    ts::Tape<float> tape;
    const auto fr = ts::model_forward(tape, model, tape.constant(std::move(img)), false);
    const ts::Tensor<float>& logits = tape.value(fr.logits);

    ts::Tensor<float> mask({H, W});
    for (std::size_t i = 0; i < mask.numel(); ++i)
        mask[i] = 1.0 / (1.0 + std::exp(-static_cast<double>(logits.data[i]))) > threshold
                      ? 1.0f
                      : 0.0f;
    ts::save_png_gray(out_mask, mask);
    std::printf("wrote %dx%d mask to %s\n", W, H, out_mask.c_str());

    if (!diag_dir.empty()) {
        std::filesystem::create_directories(diag_dir + "/energy");
        std::filesystem::create_directories(diag_dir + "/traj");
        const ts::KvMap cfg = ts::model_config_to_map(model.cfg);
        const ts::ImageDiag<float>& diag = fr.diag.at(0);
        for (int l = 0; l < 4; ++l) {
            const ts::StageDiag<float>& st = diag.stages[static_cast<std::size_t>(l)];
            const std::string suffix = "stage" + std::to_string(l + 1);
            if (st.energy.numel() > 0) {
                // scale to [0,1] for the image file; raw maxima are unbounded
                ts::Tensor<float> vis = st.energy;
                float mx = 0.0f;
                for (std::size_t i = 0; i < vis.numel(); ++i) mx = std::max(mx, vis[i]);
                if (mx > 0.0f)
                    for (std::size_t i = 0; i < vis.numel(); ++i) vis[i] /= mx;
                ts::save_png_gray(diag_dir + "/energy/" + suffix + ".png", vis);
            }
            std::ofstream traj = open_out(diag_dir + "/traj/" + suffix + ".txt");
            traj << header_line(cfg);
            for (const auto& tr : st.trajs) traj << ts::trajectory_line(tr) << '\n';
        }
        if (fr.response >= 0) {
            const ts::Tensor<float>& resp = tape.value(fr.response);
            ts::Tensor<float> flat({H, W});
            for (std::size_t i = 0; i < flat.numel(); ++i) flat[i] = resp.data[i];
            ts::save_png_gray(diag_dir + "/response.png", flat);
        }
        std::printf("diagnostics in %s\n", diag_dir.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{std::string(ts::kToolName) + " " + ts::kToolVersion +
                 " — trajectory-aware small-target segmentation"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate synthetic scenes + manifest");
    int g_count = 10, g_size = 64;
    double g_difficulty = 0.5;
    std::uint64_t g_seed = 0;
    std::string g_out = "data";
    gen->add_option("--count", g_count, "number of scenes (80/20 train/test split)");
    gen->add_option("--size", g_size, "square image size in pixels");
    gen->add_option("--difficulty", g_difficulty, "0 (easy) .. 1 (hard)");
    gen->add_option("--seed", g_seed, "generation seed");
    gen->add_option("--out-dir", g_out, "output directory");

    // train
    auto* train_cmd = app.add_subcommand("train", "train a model from a manifest");
    std::string t_manifest, t_config, t_out = "train_out", t_resume;
    std::optional<int> t_epochs;
    std::optional<std::uint64_t> t_seed;
    train_cmd->add_option("--manifest", t_manifest, "dataset manifest")->required();
    train_cmd->add_option("--config", t_config, "key=value config file");
    train_cmd->add_option("--epochs", t_epochs, "override train.epochs");
    train_cmd->add_option("--seed", t_seed, "override train.seed");
    train_cmd->add_option("--out", t_out, "output directory (checkpoints, curves, metrics)");
    train_cmd->add_option("--resume", t_resume, "checkpoint to resume from");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
    std::string e_manifest, e_checkpoint, e_roc, e_report;
    double e_threshold = 0.5;
    eval_cmd->add_option("--manifest", e_manifest, "dataset manifest")->required();
    eval_cmd->add_option("--checkpoint", e_checkpoint, "model checkpoint")->required();
    eval_cmd->add_option("--threshold", e_threshold, "binarization threshold");
    eval_cmd->add_option("--roc", e_roc, "write an FPR/TPR sweep table here");
    eval_cmd->add_option("--report", e_report, "write the metric report here (default stdout)");

    // infer
    auto* infer_cmd = app.add_subcommand("infer", "run one image through a checkpoint");
    std::string i_image, i_checkpoint, i_mask = "mask.png", i_diag;
    double i_threshold = 0.5;
    infer_cmd->add_option("--image", i_image, "input image (PGM or grayscale PNG)")->required();
    infer_cmd->add_option("--checkpoint", i_checkpoint, "model checkpoint")->required();
    infer_cmd->add_option("--out-mask", i_mask, "output binary mask path");
    infer_cmd->add_option("--threshold", i_threshold, "binarization threshold");
    infer_cmd->add_option("--dump-diagnostics", i_diag,
                          "directory for energy maps, trajectories, and the response map");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;  // any parse failure is a usage error
    }

    try {
        if (gen->parsed()) return run_gen(g_count, g_size, g_difficulty, g_seed, g_out);
        if (train_cmd->parsed())
            return run_train(t_manifest, t_config, t_epochs, t_seed, t_out, t_resume);
        if (eval_cmd->parsed())
            return run_eval(e_manifest, e_checkpoint, e_threshold, e_roc, e_report);
        if (infer_cmd->parsed())
            return run_infer(i_image, i_checkpoint, i_mask, i_diag, i_threshold);
    } catch (const ts::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const ts::ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return 1;
    } catch (const ts::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const ts::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 3;
    }
    return 1;
}
