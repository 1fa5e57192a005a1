#pragma once

// Run configuration: a versioned "key = value" file covering paths, the
// diffusion schedule, network sizes and training hyperparameters.

#include "tsdiff/color_corrector.hpp"
#include "tsdiff/denoiser.hpp"
#include "tsdiff/noisespace.hpp"
#include "tsdiff/schedule.hpp"
#include "tsdiff/trainer.hpp"

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace tsdiff {

struct RunConfig {
    std::string noise_space;  // empty: built-in defaults
    std::string data_dir = "data";
    std::string checkpoint_dir = "checkpoints";

    int steps = 200;
    double alpha_first = 0.999999;
    double alpha_last = 0.9;
    double eta = 0.0;

    DenoiserConfig denoiser;
    ColorCorrectorConfig cc;
    TrainConfig train;

    std::size_t eval_threads = 1;
    int log_every = 50;
    int checkpoint_every = 500;  // 0 saves only at the end of a stage

    void validate() const;
    DiffusionSchedule schedule() const;
    NoiseSpace load_noise_space() const;

    static RunConfig parse(std::string_view text, const std::string& source = "<string>");
    static RunConfig load(const std::filesystem::path& path);
    /// Ordered (key, value) pairs; to_text() and checkpoint provenance use these.
    std::vector<std::pair<std::string, std::string>> entries() const;
    std::string to_text() const;

    /// TSDIFF_DATA_DIR, TSDIFF_CHECKPOINT_DIR and TSDIFF_NOISE_SPACE replace the
    /// corresponding paths when set.
    void apply_env_overrides();

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

inline constexpr int kRunConfigSchema = 1;

/// Untrained model, corrector and optimizer set up from cfg; provenance is cfg.entries().
CheckpointBundle fresh_bundle(const RunConfig& cfg, std::size_t scene_size = 0);

} // namespace tsdiff
