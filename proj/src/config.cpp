#include "tsdiff/config.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/kvfile.hpp"

#include <cstdlib>

namespace tsdiff {

void RunConfig::validate() const {
    denoiser.validate();
    cc.validate();
    train.validate();
    schedule();
    if (cc.channels != denoiser.image_channels)
        throw std::invalid_argument("config: color corrector channels must equal image channels");
    if (eval_threads == 0) throw std::invalid_argument("config: eval_threads must be >= 1");
    if (log_every < 1 || checkpoint_every < 0) throw std::invalid_argument("config: need log_every >= 1, checkpoint_every >= 0");
}

DiffusionSchedule RunConfig::schedule() const { return DiffusionSchedule::build(steps, alpha_first, alpha_last, eta); }

NoiseSpace RunConfig::load_noise_space() const {
    return noise_space.empty() ? NoiseSpace::defaults() : NoiseSpace::load(noise_space);
}

std::vector<std::pair<std::string, std::string>> RunConfig::entries() const {
    auto n = [](double v) { return format_double(v); };
    auto z = [](std::size_t v) { return std::to_string(v); };
    std::string milestones;
    for (std::size_t i = 0; i < train.milestones.size(); ++i)
        milestones += (i ? ", " : "") + std::to_string(train.milestones[i]);
    return {
        {"schema", std::to_string(kRunConfigSchema)},
        {"noise_space", noise_space},
        {"data_dir", data_dir},
        {"checkpoint_dir", checkpoint_dir},
        {"steps", std::to_string(steps)},
        {"alpha_first", n(alpha_first)},
        {"alpha_last", n(alpha_last)},
        {"eta", n(eta)},
        {"cameras", z(denoiser.cameras)},
        {"base_width", z(denoiser.base_width)},
        {"time_dim", z(denoiser.time_dim)},
        {"cc_width", z(cc.width)},
        {"cc_cond_width", z(cc.cond_width)},
        {"batch_size", z(train.batch_size)},
        {"crop", z(train.crop)},
        {"learning_rate", n(train.learning_rate)},
        {"align_learning_rate", n(train.align_learning_rate)},
        {"milestones", milestones},
        {"beta1", n(train.beta1)},
        {"beta2", n(train.beta2)},
        {"adam_eps", n(train.adam_eps)},
        {"lambda_img", n(train.lambda_img)},
        {"pretrain_iterations", std::to_string(train.pretrain_iterations)},
        {"align_iterations", std::to_string(train.align_iterations)},
        {"prefetch", z(train.prefetch)},
        {"seed", std::to_string(train.seed)},
        {"eval_threads", z(eval_threads)},
        {"log_every", std::to_string(log_every)},
        {"checkpoint_every", std::to_string(checkpoint_every)},
    };
}

std::string RunConfig::to_text() const {
    std::string out = "# tsdiff run configuration\n";
    for (const auto& [k, v] : entries()) out += k + " = " + v + "\n";
    return out;
}

namespace {

std::size_t get_size(const KeyValueFile& kv, std::string_view key, std::size_t fallback) {
    if (!kv.contains(key)) return fallback;
    const auto v = kv.get_int(key);
    if (v < 0) throw DataError(kv.source() + ": '" + std::string(key) + "' must be >= 0");
    return static_cast<std::size_t>(v);
}

int get_int(const KeyValueFile& kv, std::string_view key, int fallback) {
    return kv.contains(key) ? static_cast<int>(kv.get_int(key)) : fallback;
}

double get_double(const KeyValueFile& kv, std::string_view key, double fallback) {
    return kv.contains(key) ? kv.get_double(key) : fallback;
}

RunConfig from_kv(const KeyValueFile& kv) {
    RunConfig c;
    const auto defaults = c.entries();
    std::vector<std::string_view> known;
    for (const auto& e : defaults) known.push_back(e.first);
    kv.reject_unknown(known);
    if (!kv.contains("schema")) throw DataError(kv.source() + ": missing 'schema' (expected " + std::to_string(kRunConfigSchema) + ")");
    if (kv.get_int("schema") != kRunConfigSchema)
        throw DataError(kv.source() + ": unsupported config schema " + kv.get("schema"));

    if (kv.contains("noise_space")) c.noise_space = kv.get("noise_space");
    if (kv.contains("data_dir")) c.data_dir = kv.get("data_dir");
    if (kv.contains("checkpoint_dir")) c.checkpoint_dir = kv.get("checkpoint_dir");
    c.steps = get_int(kv, "steps", c.steps);
    c.alpha_first = get_double(kv, "alpha_first", c.alpha_first);
    c.alpha_last = get_double(kv, "alpha_last", c.alpha_last);
    c.eta = get_double(kv, "eta", c.eta);
    c.denoiser.cameras = get_size(kv, "cameras", c.denoiser.cameras);
    c.denoiser.base_width = get_size(kv, "base_width", c.denoiser.base_width);
    c.denoiser.time_dim = get_size(kv, "time_dim", c.denoiser.time_dim);
    c.cc.width = get_size(kv, "cc_width", c.cc.width);
    c.cc.cond_width = get_size(kv, "cc_cond_width", c.cc.cond_width);
    c.train.batch_size = get_size(kv, "batch_size", c.train.batch_size);
    c.train.crop = get_size(kv, "crop", c.train.crop);
    c.train.learning_rate = get_double(kv, "learning_rate", c.train.learning_rate);
    c.train.align_learning_rate = get_double(kv, "align_learning_rate", c.train.align_learning_rate);
    if (kv.contains("milestones")) {
        c.train.milestones.clear();
        if (!kv.get("milestones").empty())
            for (double m : kv.get_double_list("milestones")) c.train.milestones.push_back(static_cast<int>(m));
    }
    c.train.beta1 = get_double(kv, "beta1", c.train.beta1);
    c.train.beta2 = get_double(kv, "beta2", c.train.beta2);
    c.train.adam_eps = get_double(kv, "adam_eps", c.train.adam_eps);
    c.train.lambda_img = get_double(kv, "lambda_img", c.train.lambda_img);
    c.train.pretrain_iterations = get_int(kv, "pretrain_iterations", c.train.pretrain_iterations);
    c.train.align_iterations = get_int(kv, "align_iterations", c.train.align_iterations);
    c.train.prefetch = get_size(kv, "prefetch", c.train.prefetch);
    if (kv.contains("seed")) c.train.seed = static_cast<std::uint64_t>(kv.get_int("seed"));
    c.eval_threads = get_size(kv, "eval_threads", c.eval_threads);
    c.log_every = get_int(kv, "log_every", c.log_every);
    c.checkpoint_every = get_int(kv, "checkpoint_every", c.checkpoint_every);
    try {
        c.validate();
    } catch (const std::invalid_argument& e) {
        throw DataError(kv.source() + ": " + e.what());
    }
    return c;
}

} // namespace

RunConfig RunConfig::parse(std::string_view text, const std::string& source) {
    return from_kv(KeyValueFile::parse(text, source));
}

RunConfig RunConfig::load(const std::filesystem::path& path) { return from_kv(KeyValueFile::load(path)); }

void RunConfig::apply_env_overrides() {
    if (const char* v = std::getenv("TSDIFF_DATA_DIR"); v && *v) data_dir = v;
    if (const char* v = std::getenv("TSDIFF_CHECKPOINT_DIR"); v && *v) checkpoint_dir = v;
    if (const char* v = std::getenv("TSDIFF_NOISE_SPACE"); v && *v) noise_space = v;
}

CheckpointBundle fresh_bundle(const RunConfig& cfg, std::size_t scene_size) {
    CheckpointBundle b{.model = DenoiserModel(cfg.denoiser, cfg.train.seed),
                       .cc = ColorCorrector(cfg.cc, cfg.train.seed ^ 0x6363ULL)};
    b.schedule_steps = cfg.steps;
    b.alpha_first = cfg.alpha_first;
    b.alpha_last = cfg.alpha_last;
    b.train = cfg.train;
    b.scene_size = scene_size;
    b.optimizer = Adam(cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps);
    b.provenance = cfg.entries();
    return b;
}

} // namespace tsdiff
