#pragma once

// Noise and resolution schedules for pyramid diffusion, plus the closed-form
// forward process and the conditional DDIM-family reverse update.

#include "tsdiff/tensor.hpp"

#include <vector>

namespace tsdiff {

class DiffusionSchedule {
public:
    /// alpha_t linear in t from alpha_first to alpha_last; r_t = 1 for
    /// t <= ceil(T/2), 2 afterwards. eta in [0,1] scales sigma_t.
    static DiffusionSchedule build(int steps, double alpha_first, double alpha_last, double eta = 0.0);

    int steps() const noexcept { return static_cast<int>(alpha_.size()); }
    double alpha_first() const noexcept { return alpha_.front(); }
    double alpha_last() const noexcept { return alpha_.back(); }
    double eta() const noexcept { return eta_; }

    double alpha(int t) const;
    double beta(int t) const { return 1.0 - alpha(t); }
    /// Cumulative product; alpha_bar(0) == 1.
    double alpha_bar(int t) const;
    /// Downsampling factor r_t; factor(0) == factor(1).
    std::size_t factor(int t) const;
    std::size_t max_factor() const { return factor(steps()); }
    /// eta * sqrt((1 - abar_{t-1}) / (1 - abar_t)) * sqrt(1 - abar_t / abar_{t-1}); zero at t == 1.
    double sigma(int t) const;

    /// Same schedule with a different stochasticity knob.
    DiffusionSchedule with_eta(double eta) const;

private:
    void check_step(int t, int lowest) const;

    std::vector<double> alpha_;
    std::vector<double> alpha_bar_;
    std::vector<std::size_t> factor_;
    double eta_ = 0.0;
};

/// x_t = sqrt(abar_t) * x_rt0 + sqrt(1 - abar_t) * eps
Tensor forward_sample(const Tensor& x_rt0, int t, const Tensor& eps, const DiffusionSchedule& sched);

/// x0_hat = (x_t - sqrt(1 - abar_t) * eps_hat) / sqrt(abar_t)
Tensor predict_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const DiffusionSchedule& sched);

/// One reverse update from step t to t-1. When r_t > r_{t-1} the clean
/// estimate is upsampled and re-noised with z; otherwise the deterministic
/// DDIM update plus sigma_t * z. z must have the shape of x_{t-1}.
Tensor reverse_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& x0_hat, const Tensor& z,
                    const DiffusionSchedule& sched);

} // namespace tsdiff
