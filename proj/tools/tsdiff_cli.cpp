#include "tsdiff/config.hpp"
#include "tsdiff/dataset.hpp"
#include "tsdiff/errors.hpp"
#include "tsdiff/sampler.hpp"
#include "tsdiff/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace tsdiff;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
};

RunConfig effective_config(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::load(c.config);
    cfg.apply_env_overrides();
    if (c.seed) cfg.train.seed = *c.seed;
    cfg.validate();
    return cfg;
}

std::optional<std::size_t> parse_camera(const std::string& text) {
    if (text.empty() || text == "random") return std::nullopt;
    std::size_t used = 0;
    long long v = -1;
    try {
        v = std::stoll(text, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used != text.size() || v < 1) throw std::out_of_range("--camera must be a positive index or 'random', got '" + text + "'");
    return static_cast<std::size_t>(v);
}

void log_line(const std::string& s) {
    std::cerr << s << '\n';
    std::cerr.flush();
}

void require_compatible(const CheckpointBundle& b, const RunConfig& cfg, const fs::path& path) {
    if (!(b.train == cfg.train) || !(b.model.config() == cfg.denoiser) || !(b.cc.config() == cfg.cc) ||
        b.schedule_steps != cfg.steps || b.alpha_first != cfg.alpha_first || b.alpha_last != cfg.alpha_last)
        throw DataError("resume: " + path.string() +
                        " was written with a different configuration; pass --fresh to start over");
}

template <class Stage>
void run_with_checkpoints(CheckpointBundle& b, const RunConfig& cfg, int total, const fs::path& out, Stage stage) {
    const int chunk = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : -1;
    const StepLogger log = [&](int it, const StepResult& r) {
        if (it % cfg.log_every == 0 || it == total) log_line(format_step(it, r));
    };
    while (b.iteration < total) {
        stage(log, chunk);
        save_checkpoint(b, out);
        log_line("checkpoint " + out.string() + " iteration=" + std::to_string(b.iteration));
    }
}

fs::path default_checkpoint(const RunConfig& cfg, const char* name) { return fs::path(cfg.checkpoint_dir) / name; }
fs::path data_path(const RunConfig& cfg, const char* rel) { return fs::path(cfg.data_dir) / rel; }

int cmd_pretrain(const Common& c, const std::string& out_arg, const std::string& scenes_arg, bool fresh) {
    const RunConfig cfg = effective_config(c);
    const fs::path out = out_arg.empty() ? default_checkpoint(cfg, "pretrain.ckpt") : fs::path(out_arg);
    const fs::path scenes = scenes_arg.empty() ? data_path(cfg, "scenes") : fs::path(scenes_arg);
    const NoiseSpace space = cfg.load_noise_space();
    const auto corpus = load_scenes(scenes);

    CheckpointBundle b = fresh_bundle(cfg, corpus.front().planes.dim(1));
    if (!fresh && fs::exists(out)) {
        b = load_checkpoint(out);
        if (b.model.mode() != DenoiserMode::pretrain)
            throw ModeError("pretrain: " + out.string() + " is a " + std::string(to_string(b.model.mode())) +
                            " checkpoint; choose another --out or pass --fresh");
        require_compatible(b, cfg, out);
        log_line("resuming " + out.string() + " at iteration " + std::to_string(b.iteration));
    }
    if (b.iteration >= cfg.train.pretrain_iterations) {
        log_line("pretrain: already complete (" + std::to_string(b.iteration) + " iterations)");
        return 0;
    }
    run_with_checkpoints(b, cfg, cfg.train.pretrain_iterations, out,
                         [&](const StepLogger& log, int chunk) { run_pretraining(b, corpus, space, log, chunk); });
    return 0;
}

int cmd_align(const Common& c, const std::string& ckpt, const std::string& out_arg, const std::string& pairs_arg,
              bool fresh) {
    const RunConfig cfg = effective_config(c);
    const fs::path in = ckpt.empty() ? default_checkpoint(cfg, "pretrain.ckpt") : fs::path(ckpt);
    const fs::path out = out_arg.empty() ? default_checkpoint(cfg, "aligned.ckpt") : fs::path(out_arg);
    const fs::path manifest = pairs_arg.empty() ? data_path(cfg, "align/manifest.txt") : fs::path(pairs_arg);

    std::optional<CheckpointBundle> resumed;
    if (!fresh && fs::exists(out)) {
        resumed = load_checkpoint(out);
        if (resumed->model.mode() != DenoiserMode::aligned) resumed.reset();
    }
    if (!fs::exists(in) && !resumed) throw DataError("align: checkpoint " + in.string() + " not found; run pretrain first");
    const auto pairs = to_align_pairs(load_pairs(manifest));

    CheckpointBundle b = resumed ? std::move(*resumed) : load_checkpoint(in);
    if (resumed) {
        log_line("resuming " + out.string() + " at iteration " + std::to_string(b.iteration));
    } else {
        if (b.model.mode() == DenoiserMode::merged)
            throw ModeError("align: " + in.string() + " is a merged checkpoint; aligning needs a pretrain checkpoint");
        if (b.model.mode() == DenoiserMode::aligned)
            throw ModeError("align: " + in.string() + " is already aligned; pass it as --out to resume, or use the pretrain checkpoint");
        if (b.iteration < b.train.pretrain_iterations)
            log_line("align: warning: pretraining stopped at iteration " + std::to_string(b.iteration) + " of " +
                     std::to_string(b.train.pretrain_iterations));
        b.train.align_iterations = cfg.train.align_iterations;
        b.train.align_learning_rate = cfg.train.align_learning_rate;
        b.train.seed = cfg.train.seed;
        begin_aligning(b);
    }
    if (b.iteration >= b.train.align_iterations) {
        log_line("align: already complete (" + std::to_string(b.iteration) + " iterations)");
        return 0;
    }
    run_with_checkpoints(b, cfg, b.train.align_iterations, out,
                         [&](const StepLogger& log, int chunk) { run_aligning(b, pairs, log, chunk); });
    return 0;
}

int cmd_reparam(const Common& c, const std::string& ckpt, const std::string& out_arg) {
    const RunConfig cfg = effective_config(c);
    const fs::path in = ckpt.empty() ? default_checkpoint(cfg, "aligned.ckpt") : fs::path(ckpt);
    const fs::path out = out_arg.empty() ? default_checkpoint(cfg, "merged.ckpt") : fs::path(out_arg);
    if (!fs::exists(in)) throw DataError("reparam: checkpoint " + in.string() + " not found; run align first");
    CheckpointBundle b = load_checkpoint(in);
    if (b.model.mode() != DenoiserMode::aligned)
        throw ModeError("reparam: " + in.string() + " is a " + std::string(to_string(b.model.mode())) +
                        " checkpoint; reparameterization needs an aligned checkpoint");
    reparameterize(b);
    save_checkpoint(b, out);
    log_line("merged checkpoint " + out.string());
    return 0;
}

Route pick_route(const DenoiserModel& model, std::optional<std::size_t> camera) {
    if (model.mode() == DenoiserMode::pretrain) {
        if (!camera) throw ModeError("pretrain checkpoints have no target pathway; pass --camera <index>");
        return Route::camera(*camera);
    }
    if (camera) throw ModeError("--camera applies only to pretrain checkpoints");
    return Route::target();
}

CheckpointBundle load_for_inference(const RunConfig& cfg, const std::string& ckpt) {
    const fs::path in = ckpt.empty() ? default_checkpoint(cfg, "merged.ckpt") : fs::path(ckpt);
    if (!fs::exists(in)) throw DataError("checkpoint " + in.string() + " not found");
    return load_checkpoint(in);
}

struct InferenceArgs {
    std::string checkpoint;
    std::string camera;
    double eta = 0.0;
    bool no_cc = false;
};

int cmd_enhance(const Common& c, const InferenceArgs& a, const std::string& in, const std::string& out,
                std::optional<double> ratio, const std::string& preview) {
    const RunConfig cfg = effective_config(c);
    const CheckpointBundle b = load_for_inference(cfg, a.checkpoint);
    const Route route = pick_route(b.model, parse_camera(a.camera));
    const PackedRaw noisy = pack(read_r4(in));
    Rng rng(cfg.train.seed);
    const PackedRaw result = enhance(noisy, ratio ? *ratio : noisy.meta.exposure_ratio, b.model, a.no_cc ? nullptr : &b.cc,
                                     b.schedule(a.eta), rng, route);
    write_r4(unpack(result), out);
    if (!preview.empty()) write_preview(result.planes, preview);
    return 0;
}

int cmd_eval(const Common& c, const InferenceArgs& a, const std::string& pairs_arg, const std::string& out) {
    const RunConfig cfg = effective_config(c);
    const CheckpointBundle b = load_for_inference(cfg, a.checkpoint);
    EvalOptions opt;
    opt.seed = cfg.train.seed;
    opt.color_correction = !a.no_cc;
    opt.route = pick_route(b.model, parse_camera(a.camera));
    opt.threads = cfg.eval_threads;
    const auto data = load_pairs(pairs_arg.empty() ? data_path(cfg, "test/manifest.txt") : fs::path(pairs_arg));
    const EnhanceReport report = evaluate(data, b.model, b.cc, b.schedule(a.eta), opt);
    const std::string text = format_report(report);
    std::cout << text;
    if (!out.empty()) {
        std::ofstream f(out, std::ios::trunc);
        if (!(f << text)) throw DataError("eval: cannot write " + out);
    }
    char buf[64];
    std::snprintf(buf, sizeof buf, "runtime_seconds=%.2f", report.runtime_seconds);
    log_line(buf);
    return 0;
}

int cmd_synth(const Common& c, const std::string& space_arg, std::optional<std::size_t> cameras,
              const std::string& camera_arg, std::optional<double> ratio, const std::string& in, const std::string& out) {
    RunConfig cfg = effective_config(c);
    if (!space_arg.empty()) cfg.noise_space = space_arg;
    const NoiseSpace space = cfg.load_noise_space();
    const auto cams = partition(space, cameras ? *cameras : cfg.denoiser.cameras);
    Rng rng(cfg.train.seed);
    const auto camera = parse_camera(camera_arg);
    std::size_t index = camera ? *camera : static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(cams.size())));
    if (index > cams.size())
        throw std::out_of_range("--camera " + std::to_string(index) + " outside 1.." + std::to_string(cams.size()));
    NoiseParams params = sample_params(cams[index - 1], space, rng);
    if (ratio) params.ratio = *ratio;
    PackedRaw noisy = synthesize(pack(read_r4(in)), params, rng);
    noisy.meta.camera_id = "virtual" + std::to_string(index);
    write_r4(unpack(noisy), out);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Two-stage diffusion enhancement of low-light RAW images"};
    app.require_subcommand(1);
    Common common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config, "run configuration file")->check(CLI::ExistingFile);
        sub->add_option_function<std::uint64_t>("--seed", [&](const std::uint64_t& s) { common.seed = s; },
                                                "seed override");
    };

    auto* gen = app.add_subcommand("gen-scenes", "write procedural clean scenes");
    std::size_t gen_count = 200, gen_size = 64;
    std::string gen_out;
    gen->add_option("--count", gen_count, "number of scenes")->check(CLI::PositiveNumber);
    gen->add_option("--size", gen_size, "Bayer side length, divisible by 4");
    gen->add_option("--out", gen_out, "output directory (default <data_dir>/scenes)");
    add_common(gen);

    auto* synth = app.add_subcommand("synth", "add virtual-camera noise to a clean .r4");
    std::string synth_space, synth_camera = "random", synth_in, synth_out;
    std::optional<double> synth_ratio;
    std::optional<std::size_t> synth_cameras;
    synth->add_option("--space", synth_space, "noise space file");
    synth->add_option("--cameras", synth_cameras, "number of virtual cameras");
    synth->add_option("--camera", synth_camera, "camera index or 'random'");
    synth->add_option("--ratio", synth_ratio, "exposure ratio");
    synth->add_option("--in", synth_in, "clean .r4 input")->required();
    synth->add_option("--out", synth_out, "noisy .r4 output")->required();
    add_common(synth);

    auto* pairs = app.add_subcommand("make-pairs", "write a (noisy, clean, ratio) pair set with manifest");
    std::string pairs_space, pairs_camera = "random", pairs_out;
    std::optional<double> pairs_ratio;
    std::optional<std::size_t> pairs_cameras;
    std::size_t pairs_count = 20, pairs_size = 64;
    pairs->add_option("--space", pairs_space, "noise space file");
    pairs->add_option("--cameras", pairs_cameras, "number of virtual cameras");
    pairs->add_option("--camera", pairs_camera, "camera index or 'random'");
    pairs->add_option("--ratio", pairs_ratio, "fixed exposure ratio");
    pairs->add_option("--count", pairs_count, "number of pairs")->check(CLI::PositiveNumber);
    pairs->add_option("--size", pairs_size, "Bayer side length, divisible by 4");
    pairs->add_option("--out", pairs_out, "output directory (clean/, noisy/, manifest.txt)")->required();
    add_common(pairs);

    auto* pre = app.add_subcommand("pretrain", "pretrain on synthesized noise (resumes from --out)");
    std::string pre_out, pre_scenes;
    bool pre_fresh = false;
    pre->add_option("--out", pre_out, "checkpoint (default <checkpoint_dir>/pretrain.ckpt)");
    pre->add_option("--scenes", pre_scenes, "scene directory (default <data_dir>/scenes)");
    pre->add_flag("--fresh", pre_fresh, "ignore an existing checkpoint at --out");
    add_common(pre);

    auto* align = app.add_subcommand("align", "align a pretrained model to target-camera pairs (resumes from --out)");
    std::string align_ckpt, align_out, align_pairs;
    bool align_fresh = false;
    align->add_option("--checkpoint", align_ckpt, "pretrain checkpoint");
    align->add_option("--out", align_out, "checkpoint (default <checkpoint_dir>/aligned.ckpt)");
    align->add_option("--pairs", align_pairs, "manifest (default <data_dir>/align/manifest.txt)");
    align->add_flag("--fresh", align_fresh, "ignore an existing checkpoint at --out");
    add_common(align);

    auto* rep = app.add_subcommand("reparam", "merge the target pathway into the convolutions");
    std::string rep_ckpt, rep_out;
    rep->add_option("--checkpoint", rep_ckpt, "aligned checkpoint");
    rep->add_option("--out", rep_out, "checkpoint (default <checkpoint_dir>/merged.ckpt)");
    add_common(rep);

    InferenceArgs inf;
    auto add_inference = [&](CLI::App* sub) {
        sub->add_option("--checkpoint", inf.checkpoint, "checkpoint (default <checkpoint_dir>/merged.ckpt)");
        sub->add_option("--camera", inf.camera, "camera pathway (pretrain checkpoints only)");
        sub->add_option("--eta", inf.eta, "sampler stochasticity");
        sub->add_flag("--no-cc", inf.no_cc, "disable the color corrector");
        add_common(sub);
    };

    auto* enh = app.add_subcommand("enhance", "enhance one noisy .r4");
    std::string enh_in, enh_out, enh_preview;
    std::optional<double> enh_ratio;
    enh->add_option("--in", enh_in, "noisy .r4 input")->required();
    enh->add_option("--out", enh_out, "enhanced .r4 output")->required();
    enh->add_option("--ratio", enh_ratio, "exposure ratio (default: from the file header)");
    enh->add_option("--preview", enh_preview, "PNG preview path");
    add_inference(enh);

    auto* ev = app.add_subcommand("eval", "enhance and score a pair set");
    std::string ev_pairs, ev_out;
    ev->add_option("--pairs", ev_pairs, "manifest (default <data_dir>/test/manifest.txt)");
    ev->add_option("--out", ev_out, "report file");
    add_inference(ev);

    auto* pc = app.add_subcommand("print-config", "print the effective configuration");
    add_common(pc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        if (*gen) {
            const RunConfig cfg = effective_config(common);
            const fs::path out = gen_out.empty() ? data_path(cfg, "scenes") : fs::path(gen_out);
            write_scenes(gen_count, gen_size, cfg.train.seed, out);
            log_line("wrote " + std::to_string(gen_count) + " scenes to " + out.string());
            return 0;
        }
        if (*synth) return cmd_synth(common, synth_space, synth_cameras, synth_camera, synth_ratio, synth_in, synth_out);
        if (*pairs) {
            RunConfig cfg = effective_config(common);
            if (!pairs_space.empty()) cfg.noise_space = pairs_space;
            const auto manifest = make_pair_set(cfg.load_noise_space(), pairs_cameras ? *pairs_cameras : cfg.denoiser.cameras,
                                                parse_camera(pairs_camera), pairs_count, pairs_size, cfg.train.seed,
                                                pairs_ratio, pairs_out);
            log_line("wrote " + manifest.string());
            return 0;
        }
        if (*pre) return cmd_pretrain(common, pre_out, pre_scenes, pre_fresh);
        if (*align) return cmd_align(common, align_ckpt, align_out, align_pairs, align_fresh);
        if (*rep) return cmd_reparam(common, rep_ckpt, rep_out);
        if (*enh) return cmd_enhance(common, inf, enh_in, enh_out, enh_ratio, enh_preview);
        if (*ev) return cmd_eval(common, inf, ev_pairs, ev_out);
        if (*pc) {
            std::cout << effective_config(common).to_text();
            return 0;
        }
    } catch (const ModeError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::out_of_range& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << '\n';
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
