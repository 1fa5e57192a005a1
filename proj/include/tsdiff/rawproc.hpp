#pragma once

// Bayer RAW data model, RGBG packing, and the conditioning stack fed to the
// denoiser (packed planes | positional encoding | histogram equalization).

#include "tsdiff/rng.hpp"
#include "tsdiff/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace tsdiff {

enum class BayerPattern { rggb, bggr, grbg, gbrg };

std::string_view to_string(BayerPattern p);
BayerPattern parse_bayer_pattern(std::string_view text);

struct RawMeta {
    BayerPattern pattern = BayerPattern::rggb;
    int black_level = 512;
    int white_level = 16383;
    double exposure_ratio = 1.0;
    std::string camera_id = "unknown";

    /// Signal range in DN above the black level.
    int dynamic_range() const noexcept { return white_level - black_level; }
    void validate() const;

    friend bool operator==(const RawMeta&, const RawMeta&) = default;
};

struct RawImage {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint16_t> mosaic;
    RawMeta meta;

    /// Throws DataError unless dims are even and samples lie in [0, white_level].
    void validate() const;

    friend bool operator==(const RawImage&, const RawImage&) = default;
};

/// Packed R,G1,B,G2 planes [4, H/2, W/2] normalized by the DN range.
/// G1 shares a mosaic row with R; G2 shares a row with B.
struct PackedRaw {
    Tensor planes;
    RawMeta meta;

    std::size_t height() const { return planes.dim(1); }
    std::size_t width() const { return planes.dim(2); }
};

inline constexpr std::size_t kPackedChannels = 4;
inline constexpr std::size_t kConditionChannels = 10;
inline constexpr std::size_t kHistogramBins = 4096;

PackedRaw pack(const RawImage& raw);
/// Inverse of pack up to DN quantization; values are clipped to [0,1] first.
RawImage unpack(const PackedRaw& packed);

/// Joint CDF remap of all channels onto [0,1] using kHistogramBins bins over
/// [0, max]. A constant image maps to zeros. Accepts any-rank tensors.
Tensor hist_equalize(const Tensor& x);
PackedRaw hist_equalize(const PackedRaw& p);

/// [2, h, w]: normalized row and column coordinates.
Tensor position_encoding(std::size_t h, std::size_t w);

/// [10, h, w] = [packed(4) | position_encoding(2) | hist_equalize(4)].
Tensor build_condition(const Tensor& packed);

/// clip(noisy * ratio, 0, 1): the amplified low-light input used for conditioning.
Tensor amplify(const Tensor& noisy, double ratio);

/// Non-overlapping r x r mean / nearest-neighbor replication over the last two
/// axes of a rank-3 or rank-4 tensor; r in {1,2}.
Tensor downsample(const Tensor& x, std::size_t r);
Tensor upsample(const Tensor& x, std::size_t r);

/// size x size window with top-left corner (y0, x0).
PackedRaw crop_at(const PackedRaw& p, std::size_t size, std::size_t y0, std::size_t x0);
PackedRaw crop_center(const PackedRaw& p, std::size_t size);
PackedRaw crop_random(const PackedRaw& p, std::size_t size, Rng& rng);

// .r4 container: 128-byte ASCII header followed by little-endian uint16 samples.
//   "R4\n" then one "key=value\n" line each for w, h, pattern, black, white,
//   ratio, camera (in that order), padded with spaces up to byte 127, which is '\n'.
inline constexpr std::size_t kR4HeaderSize = 128;

std::vector<std::uint8_t> encode_r4(const RawImage& raw);
RawImage decode_r4(const std::vector<std::uint8_t>& bytes, const std::string& source = "<memory>");
void write_r4(const RawImage& raw, const std::filesystem::path& path);
RawImage read_r4(const std::filesystem::path& path);

} // namespace tsdiff
