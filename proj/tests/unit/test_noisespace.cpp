#include "../support/helpers.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/noisespace.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace tsdiff;
using namespace tsdiff::testing;

namespace {

PackedRaw flat(std::size_t h, std::size_t w, double level) {
    return {Tensor({4, h, w}, static_cast<Scalar>(level)), RawMeta{}};
}

struct Moments {
    double mean = 0.0, var = 0.0;
};

Moments moments_dn(const Tensor& t, double range) {
    double s = 0.0, ss = 0.0;
    for (Scalar v : t.values()) s += v * range;
    const double mean = s / t.size();
    for (Scalar v : t.values()) ss += (v * range - mean) * (v * range - mean);
    return {mean, ss / (t.size() - 1)};
}

} // namespace

TEST_CASE("partition tiles the log-gain axis exactly") {
    const NoiseSpace space = NoiseSpace::defaults();
    for (std::size_t n : {1, 3, 5, 7}) {
        const auto cams = partition(space, n);
        REQUIRE(cams.size() == n);
        CHECK(cams.front().log_gain_min == space.log_gain_min);
        CHECK(cams.back().log_gain_max == space.log_gain_max);
        for (std::size_t i = 0; i < n; ++i) {
            CHECK(cams[i].index == i + 1);
            CHECK(cams[i].log_gain_max - cams[i].log_gain_min ==
                  doctest::Approx((space.log_gain_max - space.log_gain_min) / n));
            if (i) CHECK(cams[i].log_gain_min == cams[i - 1].log_gain_max);
        }
    }
    CHECK_THROWS_AS(partition(space, 0), std::invalid_argument);
}

TEST_CASE("sampled parameters stay inside their camera and are reproducible") {
    const NoiseSpace space = NoiseSpace::defaults();
    const auto cams = partition(space, 5);
    for (const auto& cam : cams) {
        Rng rng(cam.index), again(cam.index);
        for (int i = 0; i < 200; ++i) {
            const NoiseParams p = sample_params(cam, space, rng);
            const NoiseParams q = sample_params(cam, space, again);
            CHECK(std::log(p.gain) >= cam.log_gain_min);
            CHECK(std::log(p.gain) <= cam.log_gain_max);
            CHECK(p.ratio >= space.ratio_min);
            CHECK(p.ratio <= space.ratio_max);
            CHECK(p.read_sigma > 0.0);
            CHECK(p.gain == q.gain);
            CHECK(p.read_sigma == q.read_sigma);
        }
    }
    // Higher-index cameras have larger K on average.
    Rng rng(1);
    double lo = 0, hi = 0;
    for (int i = 0; i < 500; ++i) {
        lo += sample_params(cams[0], space, rng).gain;
        hi += sample_params(cams[4], space, rng).gain;
    }
    CHECK(hi > 10 * lo);
}

TEST_CASE("shot noise variance equals K times the mean in DN") {
    for (double k : {0.5, 2.0, 6.0}) {
        NoiseParams p;
        p.gain = k;
        p.quant_step = 1e-6;
        p.ratio = 1.0;
        for (double level : {0.02, 0.1}) {
            Rng rng(static_cast<std::uint64_t>(k * 1000 + level * 100));
            const PackedRaw noisy = synthesize(flat(125, 200, level), p, rng);  // 1e5 samples
            const Moments m = moments_dn(noisy.planes, RawMeta{}.dynamic_range());
            CAPTURE(k);
            CAPTURE(level);
            CHECK(m.mean == doctest::Approx(level * RawMeta{}.dynamic_range()).epsilon(0.01));
            CHECK(m.var / m.mean == doctest::Approx(k).epsilon(0.03));
        }
    }
}

TEST_CASE("row offsets are shared along mosaic rows") {
    NoiseParams p;
    p.gain = 1.0;
    p.read_sigma = 2.0;
    p.row_sigma = 4.0;
    p.quant_step = 1e-6;
    p.ratio = 1.0;
    Rng rng(5);
    const std::size_t h = 4000, w = 32;
    const PackedRaw noisy = synthesize(flat(h, w, 0.02), p, rng);
    const double range = RawMeta{}.dynamic_range();
    // Mosaic row 2y holds R and G1, row 2y+1 holds B and G2.
    std::vector<double> row_means, within;
    for (std::size_t y = 0; y < h; ++y)
        for (auto pair : {std::array<std::size_t, 2>{0, 1}, std::array<std::size_t, 2>{2, 3}}) {
            double s = 0, ss = 0;
            for (std::size_t c : pair)
                for (std::size_t x = 0; x < w; ++x) s += noisy.planes.at(c, y, x) * range;
            const double mean = s / (2 * w);
            for (std::size_t c : pair)
                for (std::size_t x = 0; x < w; ++x) {
                    const double d = noisy.planes.at(c, y, x) * range - mean;
                    ss += d * d;
                }
            row_means.push_back(mean);
            within.push_back(ss / (2 * w - 1));
        }
    const double grand = std::accumulate(row_means.begin(), row_means.end(), 0.0) / row_means.size();
    double var_means = 0;
    for (double m : row_means) var_means += (m - grand) * (m - grand);
    var_means /= row_means.size() - 1;
    const double within_mean = std::accumulate(within.begin(), within.end(), 0.0) / within.size();
    const double row_var = var_means - within_mean / (2 * w);
    CHECK(row_var == doctest::Approx(p.row_sigma * p.row_sigma).epsilon(0.05));
    // Within-row spread is shot plus read noise only.
    const double expected_within = p.gain * 0.02 * range + p.read_sigma * p.read_sigma;
    CHECK(within_mean == doctest::Approx(expected_within).epsilon(0.03));
}

TEST_CASE("quantization error never exceeds half a step") {
    Rng rng(2);
    for (int i = 0; i < 100000; ++i) {
        const double step = rng.uniform(0.1, 8.0);
        const double v = rng.uniform(-1000.0, 1000.0);
        const double q = quantize(v, step);
        REQUIRE(std::abs(q - v) <= step / 2);
        REQUIRE(std::abs(q / step - std::round(q / step)) < 1e-9);
    }
    NoiseParams p;
    p.gain = 1.3;
    p.read_sigma = 3.0;
    p.quant_step = 4.0;
    p.ratio = 2.0;
    const PackedRaw noisy = synthesize(flat(16, 16, 0.3), p, rng);
    const double range = RawMeta{}.dynamic_range();
    for (Scalar v : noisy.planes.values()) {
        const double dn = static_cast<double>(v) * range;
        CHECK(std::abs(dn / 4.0 - std::round(dn / 4.0)) < 1e-3);
    }
}

TEST_CASE("synthesis darkens by the exposure ratio and records it") {
    Rng rng(9);
    const PackedRaw clean{uniform_tensor(rng, {4, 16, 16}, 0.2, 0.8), RawMeta{}};
    NoiseParams p;
    p.gain = 1.0;
    p.read_sigma = 1.0;
    p.ratio = 100.0;
    const PackedRaw noisy = synthesize(clean, p, rng);
    CHECK(noisy.meta.exposure_ratio == 100.0);
    double cs = 0, ns = 0;
    for (std::size_t i = 0; i < clean.planes.size(); ++i) {
        cs += clean.planes[i];
        ns += noisy.planes[i];
    }
    CHECK(ns * 100.0 / cs == doctest::Approx(1.0).epsilon(0.05));
    for (Scalar v : noisy.planes.values()) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    Rng a(4), b(4);
    CHECK(bitwise_equal(synthesize(clean, p, a).planes, synthesize(clean, p, b).planes));

    NoiseParams bad = p;
    bad.gain = 0.0;
    CHECK_THROWS_AS(synthesize(clean, bad, rng), std::invalid_argument);
    bad = p;
    bad.read_sigma = std::nan("");
    CHECK_THROWS_AS(synthesize(clean, bad, rng), NumericError);
}

TEST_CASE("noise space files round-trip and report the offending line") {
    const NoiseSpace s = NoiseSpace::defaults();
    CHECK(NoiseSpace::parse(s.to_text()) == s);

    std::string text = s.to_text();
    text.replace(text.find("ratio_min = 50"), 14, "ratio_min = fifty");
    try {
        NoiseSpace::parse(text, "space.kv");
        FAIL("expected a parse error");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("space.kv:12") != std::string::npos);
    }
    CHECK_THROWS_AS(NoiseSpace::parse(s.to_text() + "bogus = 1\n"), DataError);
    CHECK_THROWS_AS(NoiseSpace::parse("schema = 1\n"), DataError);
    std::string inverted = s.to_text();
    inverted.replace(inverted.find("ratio_max = 300"), 15, "ratio_max = 10");
    CHECK_THROWS_AS(NoiseSpace::parse(inverted), DataError);
}
