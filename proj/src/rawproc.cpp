#include "tsdiff/rawproc.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/kvfile.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iterator>

namespace tsdiff {

std::string_view to_string(BayerPattern p) {
    switch (p) {
    case BayerPattern::rggb: return "rggb";
    case BayerPattern::bggr: return "bggr";
    case BayerPattern::grbg: return "grbg";
    case BayerPattern::gbrg: return "gbrg";
    }
    return "?";
}

BayerPattern parse_bayer_pattern(std::string_view text) {
    for (auto p : {BayerPattern::rggb, BayerPattern::bggr, BayerPattern::grbg, BayerPattern::gbrg})
        if (to_string(p) == text) return p;
    throw DataError("unknown Bayer pattern '" + std::string(text) + "'");
}

void RawMeta::validate() const {
    if (black_level < 0 || white_level > 65535 || black_level >= white_level)
        throw DataError("raw: need 0 <= black_level < white_level <= 65535, got " + std::to_string(black_level) +
                        "/" + std::to_string(white_level));
    if (!(exposure_ratio >= 1.0) || !std::isfinite(exposure_ratio))
        throw DataError("raw: exposure ratio must be finite and >= 1, got " + format_double(exposure_ratio));
}

void RawImage::validate() const {
    meta.validate();
    if (width == 0 || height == 0 || width % 2 || height % 2)
        throw DataError("raw: dimensions must be even and non-zero, got " + std::to_string(width) + "x" +
                        std::to_string(height));
    if (mosaic.size() != width * height)
        throw DataError("raw: mosaic holds " + std::to_string(mosaic.size()) + " samples, expected " +
                        std::to_string(width * height));
    for (auto s : mosaic)
        if (s > meta.white_level)
            throw DataError("raw: sample " + std::to_string(s) + " exceeds white level " +
                            std::to_string(meta.white_level));
}

namespace {

struct Offset {
    std::size_t dy, dx;
};

// Mosaic offsets of the R, G1, B, G2 sites within a 2x2 cell.
std::array<Offset, 4> channel_offsets(BayerPattern p) {
    switch (p) {
    case BayerPattern::rggb: return {{{0, 0}, {0, 1}, {1, 1}, {1, 0}}};
    case BayerPattern::bggr: return {{{1, 1}, {1, 0}, {0, 0}, {0, 1}}};
    case BayerPattern::grbg: return {{{0, 1}, {0, 0}, {1, 0}, {1, 1}}};
    case BayerPattern::gbrg: return {{{1, 0}, {1, 1}, {0, 1}, {0, 0}}};
    }
    return {};
}

} // namespace

PackedRaw pack(const RawImage& raw) {
    if (raw.width % 2 || raw.height % 2)
        throw DataError("pack: odd dimensions " + std::to_string(raw.width) + "x" + std::to_string(raw.height));
    raw.validate();
    const std::size_t h = raw.height / 2, w = raw.width / 2;
    const auto offsets = channel_offsets(raw.meta.pattern);
    const auto range = static_cast<Scalar>(raw.meta.dynamic_range());
    PackedRaw out{Tensor({kPackedChannels, h, w}), raw.meta};
    for (std::size_t c = 0; c < kPackedChannels; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const int s = raw.mosaic[(2 * y + offsets[c].dy) * raw.width + 2 * x + offsets[c].dx];
                const int above = std::max(s - raw.meta.black_level, 0);
                out.planes.at(c, y, x) = static_cast<Scalar>(above) / range;
            }
    return out;
}

RawImage unpack(const PackedRaw& packed) {
    packed.meta.validate();
    const auto& s = packed.planes.shape();
    if (s.size() != 3 || s[0] != kPackedChannels)
        throw ShapeError("unpack: expected [4,h,w] planes, got " + to_string(s));
    RawImage raw;
    raw.height = 2 * s[1];
    raw.width = 2 * s[2];
    raw.meta = packed.meta;
    raw.mosaic.assign(raw.width * raw.height, 0);
    const auto offsets = channel_offsets(packed.meta.pattern);
    const double range = packed.meta.dynamic_range();
    for (std::size_t c = 0; c < kPackedChannels; ++c)
        for (std::size_t y = 0; y < s[1]; ++y)
            for (std::size_t x = 0; x < s[2]; ++x) {
                const double v = std::clamp(static_cast<double>(packed.planes.at(c, y, x)), 0.0, 1.0);
                const auto dn = static_cast<long>(std::lround(v * range)) + packed.meta.black_level;
                raw.mosaic[(2 * y + offsets[c].dy) * raw.width + 2 * x + offsets[c].dx] =
                    static_cast<std::uint16_t>(dn);
            }
    return raw;
}

Tensor hist_equalize(const Tensor& x) {
    Tensor out(x.shape(), 0.0f);
    const auto [lo, hi] = std::minmax_element(x.values().begin(), x.values().end());
    if (*lo == *hi || !(*hi > 0.0f)) return out;
    const double top = *hi;
    auto bin_of = [&](Scalar v) {
        const double b = std::floor(std::max(0.0, static_cast<double>(v)) / top * kHistogramBins);
        return static_cast<std::size_t>(std::min(b, static_cast<double>(kHistogramBins - 1)));
    };
    std::vector<std::size_t> counts(kHistogramBins, 0);
    for (Scalar v : x.values()) ++counts[bin_of(v)];
    std::vector<Scalar> cdf(kHistogramBins);
    std::size_t running = 0;
    for (std::size_t b = 0; b < kHistogramBins; ++b) {
        running += counts[b];
        cdf[b] = static_cast<Scalar>(static_cast<double>(running) / static_cast<double>(x.size()));
    }
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = cdf[bin_of(x[i])];
    return out;
}

PackedRaw hist_equalize(const PackedRaw& p) { return {hist_equalize(p.planes), p.meta}; }

Tensor position_encoding(std::size_t h, std::size_t w) {
    Tensor out({2, h, w});
    const double hs = static_cast<double>(std::max<std::size_t>(h - 1, 1));
    const double ws = static_cast<double>(std::max<std::size_t>(w - 1, 1));
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
            out.at(0, y, x) = static_cast<Scalar>(static_cast<double>(y) / hs);
            out.at(1, y, x) = static_cast<Scalar>(static_cast<double>(x) / ws);
        }
    return out;
}

Tensor build_condition(const Tensor& packed) {
    const auto& s = packed.shape();
    if (s.size() != 3 || s[0] != kPackedChannels)
        throw ShapeError("build_condition: expected [4,h,w], got " + to_string(s));
    const std::size_t plane = s[1] * s[2];
    Tensor out({kConditionChannels, s[1], s[2]});
    const Tensor pos = position_encoding(s[1], s[2]);
    const Tensor eq = hist_equalize(packed);
    std::copy_n(packed.data(), 4 * plane, out.data());
    std::copy_n(pos.data(), 2 * plane, out.data() + 4 * plane);
    std::copy_n(eq.data(), 4 * plane, out.data() + 6 * plane);
    return out;
}

Tensor amplify(const Tensor& noisy, double ratio) {
    Tensor out = noisy;
    for (Scalar& v : out.values()) v = static_cast<Scalar>(std::clamp(static_cast<double>(v) * ratio, 0.0, 1.0));
    return out;
}

namespace {

void check_factor(const Tensor& x, std::size_t r, const char* op) {
    if (r != 1 && r != 2) throw ShapeError(std::string(op) + ": factor must be 1 or 2, got " + std::to_string(r));
    if (x.rank() != 3 && x.rank() != 4)
        throw ShapeError(std::string(op) + ": expected rank 3 or 4, got " + to_string(x.shape()));
}

} // namespace

Tensor downsample(const Tensor& x, std::size_t r) {
    check_factor(x, r, "downsample");
    if (r == 1) return x;
    const std::size_t rank = x.rank();
    const std::size_t H = x.dim(rank - 2), W = x.dim(rank - 1);
    if (H % r || W % r)
        throw ShapeError("downsample: dims " + to_string(x.shape()) + " not divisible by " + std::to_string(r));
    Shape shape = x.shape();
    shape[rank - 2] = H / r;
    shape[rank - 1] = W / r;
    Tensor out(shape);
    const std::size_t planes = x.size() / (H * W), Ho = H / r, Wo = W / r;
    const double inv = 1.0 / static_cast<double>(r * r);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx) {
                double acc = 0.0;
                for (std::size_t dy = 0; dy < r; ++dy)
                    for (std::size_t dx = 0; dx < r; ++dx) acc += x[(p * H + y * r + dy) * W + xx * r + dx];
                out[(p * Ho + y) * Wo + xx] = static_cast<Scalar>(acc * inv);
            }
    return out;
}

Tensor upsample(const Tensor& x, std::size_t r) {
    check_factor(x, r, "upsample");
    if (r == 1) return x;
    const std::size_t rank = x.rank();
    const std::size_t H = x.dim(rank - 2), W = x.dim(rank - 1);
    Shape shape = x.shape();
    shape[rank - 2] = H * r;
    shape[rank - 1] = W * r;
    Tensor out(shape);
    const std::size_t planes = x.size() / (H * W), Ho = H * r, Wo = W * r;
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t y = 0; y < Ho; ++y)
            for (std::size_t xx = 0; xx < Wo; ++xx) out[(p * Ho + y) * Wo + xx] = x[(p * H + y / r) * W + xx / r];
    return out;
}

namespace {

void check_crop(const PackedRaw& p, std::size_t size) {
    if (size == 0 || size > std::min(p.height(), p.width()))
        throw ShapeError("crop: size " + std::to_string(size) + " exceeds image " + to_string(p.planes.shape()));
}

} // namespace

PackedRaw crop_at(const PackedRaw& p, std::size_t size, std::size_t y0, std::size_t x0) {
    check_crop(p, size);
    if (y0 + size > p.height() || x0 + size > p.width())
        throw ShapeError("crop: window at (" + std::to_string(y0) + "," + std::to_string(x0) + ") of size " +
                         std::to_string(size) + " exceeds image " + to_string(p.planes.shape()));
    PackedRaw out{Tensor({p.planes.dim(0), size, size}), p.meta};
    for (std::size_t c = 0; c < p.planes.dim(0); ++c)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) out.planes.at(c, y, x) = p.planes.at(c, y0 + y, x0 + x);
    return out;
}

PackedRaw crop_center(const PackedRaw& p, std::size_t size) {
    check_crop(p, size);
    return crop_at(p, size, (p.height() - size) / 2, (p.width() - size) / 2);
}

PackedRaw crop_random(const PackedRaw& p, std::size_t size, Rng& rng) {
    check_crop(p, size);
    const auto y0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.height() - size)));
    const auto x0 = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(p.width() - size)));
    return crop_at(p, size, y0, x0);
}

// ---------------------------------------------------------------------------
// .r4 container

std::vector<std::uint8_t> encode_r4(const RawImage& raw) {
    raw.validate();
    if (raw.meta.camera_id.empty() || raw.meta.camera_id.find_first_of(" \t\r\n=") != std::string::npos)
        throw DataError("r4: camera id must be non-empty without whitespace or '='");
    std::string header = "R4\n";
    header += "w=" + std::to_string(raw.width) + "\n";
    header += "h=" + std::to_string(raw.height) + "\n";
    header += "pattern=" + std::string(to_string(raw.meta.pattern)) + "\n";
    header += "black=" + std::to_string(raw.meta.black_level) + "\n";
    header += "white=" + std::to_string(raw.meta.white_level) + "\n";
    header += "ratio=" + format_double(raw.meta.exposure_ratio) + "\n";
    header += "camera=" + raw.meta.camera_id + "\n";
    if (header.size() > kR4HeaderSize - 1) throw DataError("r4: header fields exceed 128 bytes");
    header.resize(kR4HeaderSize - 1, ' ');
    header += '\n';
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.reserve(kR4HeaderSize + 2 * raw.mosaic.size());
    for (auto s : raw.mosaic) {
        bytes.push_back(static_cast<std::uint8_t>(s & 0xff));
        bytes.push_back(static_cast<std::uint8_t>(s >> 8));
    }
    return bytes;
}

RawImage decode_r4(const std::vector<std::uint8_t>& bytes, const std::string& source) {
    if (bytes.size() < kR4HeaderSize) throw DataError(source + ": truncated r4 header");
    const std::string header(bytes.begin(), bytes.begin() + kR4HeaderSize);
    if (header.compare(0, 3, "R4\n") != 0) throw DataError(source + ": bad r4 magic");
    if (header.back() != '\n') throw DataError(source + ": r4 header not terminated at byte 127");
    const auto kv = KeyValueFile::parse(std::string_view(header).substr(3), source);
    kv.reject_unknown({"w", "h", "pattern", "black", "white", "ratio", "camera"});
    RawImage raw;
    raw.width = static_cast<std::size_t>(kv.get_int("w"));
    raw.height = static_cast<std::size_t>(kv.get_int("h"));
    raw.meta.pattern = parse_bayer_pattern(kv.get("pattern"));
    raw.meta.black_level = static_cast<int>(kv.get_int("black"));
    raw.meta.white_level = static_cast<int>(kv.get_int("white"));
    raw.meta.exposure_ratio = kv.get_double("ratio");
    raw.meta.camera_id = kv.get("camera");
    const std::size_t expected = kR4HeaderSize + 2 * raw.width * raw.height;
    if (bytes.size() != expected)
        throw DataError(source + ": r4 payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                        std::to_string(expected));
    raw.mosaic.resize(raw.width * raw.height);
    for (std::size_t i = 0; i < raw.mosaic.size(); ++i)
        raw.mosaic[i] = static_cast<std::uint16_t>(bytes[kR4HeaderSize + 2 * i] |
                                                   (bytes[kR4HeaderSize + 2 * i + 1] << 8));
    raw.validate();
    return raw;
}

void write_r4(const RawImage& raw, const std::filesystem::path& path) {
    const auto bytes = encode_r4(raw);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + path.string());
}

RawImage read_r4(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return decode_r4(bytes, path.string());
}

} // namespace tsdiff
