#pragma once

// Calibrated noise-parameter space, its even partition into virtual cameras,
// and physics-based synthesis of low-light RAW captures.

#include "tsdiff/rawproc.hpp"
#include "tsdiff/rng.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace tsdiff {

struct NoiseParams {
    double gain = 1.0;        // K, DN per electron
    double read_sigma = 0.0;  // DN
    double row_sigma = 0.0;   // DN, one draw per mosaic row
    double quant_step = 1.0;  // DN
    double ratio = 1.0;       // exposure amplification

    void validate() const;
};

/// log(sigma) = slope * log(K) + intercept + N(0, spread^2)
struct LogLinearModel {
    double slope = 0.0;
    double intercept = 0.0;
    double spread = 0.0;

    friend bool operator==(const LogLinearModel&, const LogLinearModel&) = default;
};

struct NoiseSpace {
    double log_gain_min = 0.0;
    double log_gain_max = 0.0;
    LogLinearModel read;
    LogLinearModel row;
    double quant_step = 1.0;
    double ratio_min = 1.0;
    double ratio_max = 1.0;

    void validate() const;

    /// log K in [log 0.1, log 10], ratio in [50, 300].
    static NoiseSpace defaults();
    static NoiseSpace parse(std::string_view text, const std::string& source = "<string>");
    static NoiseSpace load(const std::filesystem::path& path);
    std::string to_text() const;

    friend bool operator==(const NoiseSpace&, const NoiseSpace&) = default;
};

struct VirtualCamera {
    std::size_t index = 1;  // 1-based
    double log_gain_min = 0.0;
    double log_gain_max = 0.0;
};

/// Splits the log-gain axis into n equal sub-ranges that tile it exactly.
std::vector<VirtualCamera> partition(const NoiseSpace& space, std::size_t n);

NoiseParams sample_params(const VirtualCamera& camera, const NoiseSpace& space, Rng& rng);

/// Rounds to the nearest multiple of `step` (ties away from zero).
double quantize(double value, double step);

/// Simulates a short exposure of `clean` (normalized, long-exposure reference):
/// scene scaled by 1/ratio, Poisson shot noise, Gaussian read noise, per-row
/// Gaussian offsets, ADC quantization, clip to [0, D], renormalize by 1/D.
/// The result is NOT amplified; see amplify().
PackedRaw synthesize(const PackedRaw& clean, const NoiseParams& params, Rng& rng);

} // namespace tsdiff
