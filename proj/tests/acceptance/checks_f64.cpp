#include "outcome.hpp"

#include "../support/gradcheck.hpp"

#include <cstdio>

using namespace tsdiff;

namespace acceptance {

namespace {

std::string fmt(const char* f, double a, double b = 0.0) {
    char buf[160];
    std::snprintf(buf, sizeof buf, f, a, b);
    return buf;
}

} // namespace

Outcome reparam_exactness_f64() {
    Rng rng(101);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t ci = 1 + trial % 4, co = 1 + (trial / 4) % 3;
        const std::size_t h = 8 + (trial * 3) % 25, w = 8 + (trial * 11) % 25;
        const Tensor x = rng.normal_tensor({2, ci, h, w});
        const Tensor cw = rng.normal_tensor({ci}), cb = rng.normal_tensor({ci});
        const Tensor k = rng.normal_tensor({co, ci, 3, 3}), c = rng.normal_tensor({co});
        ad::Graph g(ad::GradMode::disabled);
        const Tensor unmerged =
            ad::conv2d(ad::channel_affine(g.constant(x), g.constant(cw), g.constant(cb)), g.constant(k), g.constant(c))
                .value();
        worst = std::max(worst, static_cast<double>(max_abs_diff(apply_merged(x, merge_cfi_conv(cw, cb, k, c, h, w)), unmerged)));
    }
    return {worst <= 1e-5, fmt("float64 library: merged vs channel_affine+conv2d max diff %.3g", worst)};
}

Outcome gradient_checks_f64(int seeds) {
    gradcheck::Result prim, comp;
    for (int s = 0; s < seeds; ++s) {
        for (const auto& [name, r] : gradcheck::check_all_primitives(static_cast<std::uint64_t>(s))) prim.merge(r);
        comp.merge(gradcheck::check_composite(static_cast<std::uint64_t>(s)));
    }
    const bool pass = prim.worst < 1e-3 && comp.worst < 1e-3 && prim.skipped == 0 &&
                      comp.skipped * 100 <= comp.checked + comp.skipped;
    const std::string d = "primitives: " + std::to_string(prim.checked) + " checks, worst rel err " + fmt("%.3g", prim.worst) + " at " +
        prim.worst_at + "; denoiser+corrector: " + std::to_string(comp.checked) + " directions (" +
        std::to_string(comp.skipped) + " skipped at relu kinks), worst rel err " + fmt("%.3g", comp.worst) + " at " +
        comp.worst_at;
    return {pass, d};
}

} // namespace acceptance
