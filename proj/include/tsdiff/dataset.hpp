#pragma once

// Procedural clean scenes and flat-directory datasets of .r4 files.
//
// Pair manifests list one "noisy clean ratio" triple per line; paths are
// relative to the manifest's directory and '#' starts a comment.

#include "tsdiff/noisespace.hpp"
#include "tsdiff/rawproc.hpp"
#include "tsdiff/sampler.hpp"
#include "tsdiff/trainer.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace tsdiff {

/// Smooth two-color gradient plus random rectangles and disks, lit by a random
/// global level and rendered with a sensor-like white balance (green
/// strongest). mosaic_size is the Bayer side length and must be divisible by 4.
RawImage generate_scene(std::size_t mosaic_size, Rng& rng);

/// Writes scene_0000.r4 ... to out_dir; scene k uses Rng::stream(seed, k).
std::vector<std::filesystem::path> write_scenes(std::size_t count, std::size_t mosaic_size, std::uint64_t seed,
                                                const std::filesystem::path& out_dir);

/// Every *.r4 in dir, sorted by file name, packed.
std::vector<PackedRaw> load_scenes(const std::filesystem::path& dir);

struct PairRecord {
    std::filesystem::path noisy;
    std::filesystem::path clean;
    double ratio = 1.0;
};

std::vector<PairRecord> read_pair_manifest(const std::filesystem::path& manifest);
void write_pair_manifest(const std::filesystem::path& manifest, const std::vector<PairRecord>& records);

std::vector<EvalSample> load_pairs(const std::filesystem::path& manifest);
std::vector<AlignPair> to_align_pairs(const std::vector<EvalSample>& samples);

/// Generates `count` clean scenes and noisy captures under parameters drawn
/// from `camera` (or from a uniformly chosen camera of the partition when
/// unset), writes clean/ and noisy/ .r4 files plus manifest.txt to out_dir.
/// A fixed `ratio` overrides the sampled exposure ratio.
std::filesystem::path make_pair_set(const NoiseSpace& space, std::size_t cameras, std::optional<std::size_t> camera,
                                    std::size_t count, std::size_t mosaic_size, std::uint64_t seed,
                                    std::optional<double> ratio, const std::filesystem::path& out_dir);

} // namespace tsdiff
