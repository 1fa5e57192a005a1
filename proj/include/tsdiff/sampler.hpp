#pragma once

// Reverse-process enhancement and packed-RAW quality metrics.

#include "tsdiff/color_corrector.hpp"
#include "tsdiff/denoiser.hpp"
#include "tsdiff/rawproc.hpp"
#include "tsdiff/schedule.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace tsdiff {

/// eps_hat for x_t at step t; cond is already at the resolution of x_t.
using EpsPredictor = std::function<Tensor(const Tensor& x_t, const Tensor& cond, int t)>;
/// Maps the (clipped) clean estimate to its corrected version.
using X0Corrector = std::function<Tensor(const Tensor& x0_hat, int t)>;

/// Runs t = T..1 from x_T ~ N(0, I) at the coarsest resolution. At each step
/// x0_hat = clip(predict_x0(...), 0, 1) is passed through `correct` (if set)
/// before the reverse update. cond is [N,10,H,W] at full resolution; returns
/// the final clean estimate [N,4,H,W] clipped to [0,1].
Tensor reverse_process(const Tensor& cond, std::size_t image_channels, const DiffusionSchedule& sched,
                       const EpsPredictor& predict, const X0Corrector& correct, Rng& rng);

/// Full enhancement of one unamplified capture. `cc` may be null (no color
/// correction). Throws ShapeError unless h and w are divisible by 2 * max r.
PackedRaw enhance(const PackedRaw& noisy, double ratio, const DenoiserModel& model, const ColorCorrector* cc,
                  const DiffusionSchedule& sched, Rng& rng, Route route = Route::target());

/// 10 log10(1 / MSE) for data on [0,1]; identical inputs give kPsnrCap.
inline constexpr double kPsnrCap = 100.0;
double psnr(const Tensor& a, const Tensor& b);
double psnr(const PackedRaw& a, const PackedRaw& b);

/// Single-scale SSIM of [C,H,W] (or [H,W]) data with a uniform 7x7 window,
/// sample covariances, data range 1, averaged over the valid window positions
/// of each channel and then over channels.
double ssim(const Tensor& a, const Tensor& b);
double ssim(const PackedRaw& a, const PackedRaw& b);

/// Mean over channels of |mean(a_c) - mean(b_c)| for [C,H,W] data.
double color_error(const Tensor& a, const Tensor& b);

struct EvalSample {
    std::string name;
    PackedRaw noisy;
    PackedRaw clean;
    double ratio = 1.0;
};

struct ImageScore {
    std::string name;
    double psnr = 0.0;
    double ssim = 0.0;
    double color_error = 0.0;
    double input_psnr = 0.0;  // amplified input vs reference
    double input_ssim = 0.0;
};

struct EnhanceReport {
    std::vector<ImageScore> images;
    double psnr_mean = 0.0, psnr_std = 0.0;
    double ssim_mean = 0.0, ssim_std = 0.0;
    double color_error_mean = 0.0;
    double input_psnr_mean = 0.0;
    double runtime_seconds = 0.0;  // not part of format_report()
};

struct EvalOptions {
    std::uint64_t seed = 0;
    bool color_correction = true;
    Route route = Route::target();
    std::size_t threads = 1;
    std::vector<Tensor>* outputs = nullptr;  // receives the enhanced planes if set
};

/// Image i is enhanced with Rng::stream(seed, i), so results do not depend on
/// the thread count. Stds are population standard deviations.
EnhanceReport evaluate(const std::vector<EvalSample>& data, const DenoiserModel& model, const ColorCorrector& cc,
                       const DiffusionSchedule& sched, const EvalOptions& options = {});

/// Line-delimited records: one "image ..." line per sample then one "summary ..." line.
std::string format_report(const EnhanceReport& report);

/// Gamma-mapped RGB preview (R, mean(G1,G2), B) of packed planes, written as 8-bit PNG.
void write_preview(const Tensor& planes, const std::filesystem::path& path);

} // namespace tsdiff
