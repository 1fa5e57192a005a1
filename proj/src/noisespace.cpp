#include "tsdiff/noisespace.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/kvfile.hpp"

#include <algorithm>
#include <cmath>

namespace tsdiff {

void NoiseParams::validate() const {
    const bool finite = std::isfinite(gain) && std::isfinite(read_sigma) && std::isfinite(row_sigma) &&
                        std::isfinite(quant_step) && std::isfinite(ratio);
    if (!finite) throw NumericError("noise params: non-finite value");
    if (!(gain > 0.0) || read_sigma < 0.0 || row_sigma < 0.0 || !(quant_step > 0.0) || ratio < 1.0)
        throw std::invalid_argument("noise params: need K>0, sigmas>=0, q_step>0, ratio>=1");
}

void NoiseSpace::validate() const {
    if (!(log_gain_min < log_gain_max)) throw DataError("noise space: log_gain_min must be < log_gain_max");
    if (read.spread < 0.0 || row.spread < 0.0) throw DataError("noise space: spreads must be >= 0");
    if (!(quant_step > 0.0)) throw DataError("noise space: quant_step must be > 0");
    if (!(ratio_min >= 1.0 && ratio_min <= ratio_max)) throw DataError("noise space: need 1 <= ratio_min <= ratio_max");
}

NoiseSpace NoiseSpace::defaults() {
    NoiseSpace s;
    s.log_gain_min = std::log(0.1);
    s.log_gain_max = std::log(10.0);
    s.read = {0.85, 0.6, 0.15};
    s.row = {0.85, -1.4, 0.15};
    s.quant_step = 1.0;
    s.ratio_min = 50.0;
    s.ratio_max = 300.0;
    return s;
}

namespace {

NoiseSpace from_kv(const KeyValueFile& kv) {
    kv.reject_unknown({"schema", "log_gain_min", "log_gain_max", "read_slope", "read_intercept", "read_spread",
                       "row_slope", "row_intercept", "row_spread", "quant_step", "ratio_min", "ratio_max"});
    if (kv.get_int("schema") != 1) throw DataError(kv.source() + ": unsupported noise space schema " + kv.get("schema"));
    NoiseSpace s;
    s.log_gain_min = kv.get_double("log_gain_min");
    s.log_gain_max = kv.get_double("log_gain_max");
    s.read = {kv.get_double("read_slope"), kv.get_double("read_intercept"), kv.get_double("read_spread")};
    s.row = {kv.get_double("row_slope"), kv.get_double("row_intercept"), kv.get_double("row_spread")};
    s.quant_step = kv.get_double("quant_step");
    s.ratio_min = kv.get_double("ratio_min");
    s.ratio_max = kv.get_double("ratio_max");
    try {
        s.validate();
    } catch (const DataError& e) {
        throw DataError(kv.source() + ": " + e.what());
    }
    return s;
}

} // namespace

NoiseSpace NoiseSpace::parse(std::string_view text, const std::string& source) {
    return from_kv(KeyValueFile::parse(text, source));
}

NoiseSpace NoiseSpace::load(const std::filesystem::path& path) { return from_kv(KeyValueFile::load(path)); }

std::string NoiseSpace::to_text() const {
    std::string out = "# noise space: log-gain range plus log-linear read/row noise models\n";
    out += "schema = 1\n";
    out += "log_gain_min = " + format_double(log_gain_min) + "\n";
    out += "log_gain_max = " + format_double(log_gain_max) + "\n";
    out += "read_slope = " + format_double(read.slope) + "\n";
    out += "read_intercept = " + format_double(read.intercept) + "\n";
    out += "read_spread = " + format_double(read.spread) + "\n";
    out += "row_slope = " + format_double(row.slope) + "\n";
    out += "row_intercept = " + format_double(row.intercept) + "\n";
    out += "row_spread = " + format_double(row.spread) + "\n";
    out += "quant_step = " + format_double(quant_step) + "\n";
    out += "ratio_min = " + format_double(ratio_min) + "\n";
    out += "ratio_max = " + format_double(ratio_max) + "\n";
    return out;
}

std::vector<VirtualCamera> partition(const NoiseSpace& space, std::size_t n) {
    if (n == 0) throw std::invalid_argument("partition: need at least one virtual camera");
    space.validate();
    const double width = (space.log_gain_max - space.log_gain_min) / static_cast<double>(n);
    std::vector<VirtualCamera> cams(n);
    for (std::size_t i = 0; i < n; ++i) {
        cams[i].index = i + 1;
        cams[i].log_gain_min = i == 0 ? space.log_gain_min : cams[i - 1].log_gain_max;
        cams[i].log_gain_max =
            i + 1 == n ? space.log_gain_max : space.log_gain_min + static_cast<double>(i + 1) * width;
    }
    return cams;
}

NoiseParams sample_params(const VirtualCamera& camera, const NoiseSpace& space, Rng& rng) {
    const double log_k = rng.uniform(camera.log_gain_min, camera.log_gain_max);
    NoiseParams p;
    p.gain = std::exp(log_k);
    p.read_sigma = std::exp(space.read.slope * log_k + space.read.intercept + space.read.spread * rng.normal());
    p.row_sigma = std::exp(space.row.slope * log_k + space.row.intercept + space.row.spread * rng.normal());
    p.quant_step = space.quant_step;
    p.ratio = rng.uniform(space.ratio_min, space.ratio_max);
    return p;
}

double quantize(double value, double step) { return step * std::round(value / step); }

PackedRaw synthesize(const PackedRaw& clean, const NoiseParams& params, Rng& rng) {
    params.validate();
    const auto& s = clean.planes.shape();
    if (s.size() != 3 || s[0] != kPackedChannels)
        throw ShapeError("synthesize: expected [4,h,w] planes, got " + to_string(s));
    const std::size_t h = s[1], w = s[2];
    const double range = clean.meta.dynamic_range();
    const double electrons_per_unit = range / (params.ratio * params.gain);

    // Each packed row covers two mosaic rows: {R, G1} and {B, G2}.
    std::vector<double> row_offset(2 * h);
    for (double& r : row_offset) r = params.row_sigma > 0.0 ? rng.normal(0.0, params.row_sigma) : 0.0;
    auto mosaic_row = [](std::size_t c, std::size_t y) { return 2 * y + (c == 0 || c == 1 ? 0 : 1); };

    PackedRaw out{Tensor(s), clean.meta};
    out.meta.exposure_ratio = std::max(1.0, params.ratio);
    for (std::size_t c = 0; c < kPackedChannels; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double expected = std::max(0.0, static_cast<double>(clean.planes.at(c, y, x))) * electrons_per_unit;
                double dn = params.gain * static_cast<double>(rng.poisson(expected));
                if (params.read_sigma > 0.0) dn += rng.normal(0.0, params.read_sigma);
                dn += row_offset[mosaic_row(c, y)];
                dn = quantize(dn, params.quant_step);
                out.planes.at(c, y, x) = static_cast<Scalar>(std::clamp(dn, 0.0, range) / range);
            }
    return out;
}

} // namespace tsdiff
