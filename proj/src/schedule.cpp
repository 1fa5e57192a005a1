#include "tsdiff/schedule.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/rawproc.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tsdiff {

DiffusionSchedule DiffusionSchedule::build(int steps, double alpha_first, double alpha_last, double eta) {
    if (steps < 2) throw std::invalid_argument("schedule: need at least 2 steps, got " + std::to_string(steps));
    if (!(alpha_last > 0.0 && alpha_last <= alpha_first && alpha_first <= 1.0))
        throw std::invalid_argument("schedule: need 0 < alpha_T <= alpha_1 <= 1");
    if (!(eta >= 0.0 && eta <= 1.0)) throw std::invalid_argument("schedule: eta must lie in [0,1]");

    DiffusionSchedule s;
    s.eta_ = eta;
    const auto T = static_cast<std::size_t>(steps);
    s.alpha_.resize(T);
    s.alpha_bar_.resize(T);
    s.factor_.resize(T);
    const std::size_t half = (T + 1) / 2;
    double running = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
        s.alpha_[i] = alpha_first + static_cast<double>(i) / static_cast<double>(T - 1) * (alpha_last - alpha_first);
        running *= s.alpha_[i];
        s.alpha_bar_[i] = running;
        s.factor_[i] = i + 1 <= half ? 1 : 2;
    }
    for (int t = 2; t <= steps; ++t) {
        if (!(s.alpha_bar(t) < s.alpha_bar(t - 1)))
            throw std::invalid_argument("schedule: alpha_bar must be strictly decreasing");
        const double sig = s.sigma(t);
        if (1.0 - s.alpha_bar(t - 1) - sig * sig < -1e-15)
            throw std::invalid_argument("schedule: 1 - abar_{t-1} - sigma_t^2 < 0 at t=" + std::to_string(t));
    }
    return s;
}

DiffusionSchedule DiffusionSchedule::with_eta(double eta) const {
    return build(steps(), alpha_first(), alpha_last(), eta);
}

void DiffusionSchedule::check_step(int t, int lowest) const {
    if (t < lowest || t > steps())
        throw std::out_of_range("schedule: step " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                                std::to_string(steps()) + "]");
}

double DiffusionSchedule::alpha(int t) const {
    check_step(t, 1);
    return alpha_[static_cast<std::size_t>(t - 1)];
}

double DiffusionSchedule::alpha_bar(int t) const {
    check_step(t, 0);
    return t == 0 ? 1.0 : alpha_bar_[static_cast<std::size_t>(t - 1)];
}

std::size_t DiffusionSchedule::factor(int t) const {
    check_step(t, 0);
    return factor_[static_cast<std::size_t>(t == 0 ? 0 : t - 1)];
}

double DiffusionSchedule::sigma(int t) const {
    check_step(t, 1);
    if (t == 1 || eta_ == 0.0) return 0.0;
    const double prev = alpha_bar(t - 1), cur = alpha_bar(t);
    return eta_ * std::sqrt((1.0 - prev) / (1.0 - cur)) * std::sqrt(std::max(0.0, 1.0 - cur / prev));
}

Tensor forward_sample(const Tensor& x_rt0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
    require_same_shape(x_rt0, eps, "forward_sample");
    const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
    Tensor out(x_rt0.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(a * x_rt0[i] + b * eps[i]);
    return out;
}

Tensor predict_x0(const Tensor& x_t, int t, const Tensor& eps_hat, const DiffusionSchedule& sched) {
    require_same_shape(x_t, eps_hat, "predict_x0");
    const double a = std::sqrt(sched.alpha_bar(t)), b = std::sqrt(1.0 - sched.alpha_bar(t));
    Tensor out(x_t.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>((x_t[i] - b * eps_hat[i]) / a);
    return out;
}

Tensor reverse_step(const Tensor& x_t, int t, const Tensor& eps_hat, const Tensor& x0_hat, const Tensor& z,
                    const DiffusionSchedule& sched) {
    require_same_shape(x_t, eps_hat, "reverse_step");
    require_same_shape(x_t, x0_hat, "reverse_step");
    const std::size_t r_now = sched.factor(t), r_prev = sched.factor(t - 1);
    if (r_now < r_prev) throw std::logic_error("reverse_step: downsampling factor decreases with t");
    const double abar_prev = sched.alpha_bar(t - 1);
    Tensor out;
    if (r_now == r_prev) {
        require_same_shape(x_t, z, "reverse_step");
        const double sig = sched.sigma(t);
        const double a = std::sqrt(abar_prev), b = std::sqrt(std::max(0.0, 1.0 - abar_prev - sig * sig));
        out = Tensor(x_t.shape());
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = static_cast<Scalar>(a * x0_hat[i] + b * eps_hat[i] + sig * z[i]);
    } else {
        out = upsample(x0_hat, r_now / r_prev);
        require_same_shape(out, z, "reverse_step");
        const double a = std::sqrt(abar_prev), b = std::sqrt(1.0 - abar_prev);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Scalar>(a * out[i] + b * z[i]);
    }
    return out;
}

} // namespace tsdiff
