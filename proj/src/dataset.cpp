#include "tsdiff/dataset.hpp"

#include "tsdiff/errors.hpp"
#include "tsdiff/kvfile.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace tsdiff {

namespace {

using Rgb = std::array<double, 3>;

Rgb random_color(Rng& rng) { return {rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0), rng.uniform(0.05, 1.0)}; }

std::string numbered(const char* stem, std::size_t k) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%04zu.r4", stem, k);
    return buf;
}

} // namespace

RawImage generate_scene(std::size_t mosaic_size, Rng& rng) {
    if (mosaic_size == 0 || mosaic_size % 4)
        throw std::invalid_argument("generate_scene: size must be a positive multiple of 4, got " +
                                    std::to_string(mosaic_size));
    const std::size_t n = mosaic_size / 2;
    const double level = std::exp(rng.uniform(std::log(0.1), std::log(0.9)));
    const double wb_r = rng.uniform(0.4, 0.75), wb_b = rng.uniform(0.5, 0.85);

    const Rgb c0 = random_color(rng), c1 = random_color(rng);
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const double ca = std::cos(angle), sa = std::sin(angle);
    std::vector<Rgb> refl(n * n);
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / n - 0.5, v = (static_cast<double>(y) + 0.5) / n - 0.5;
            const double s = std::clamp(0.5 + (u * ca + v * sa), 0.0, 1.0);
            for (int c = 0; c < 3; ++c) refl[y * n + x][c] = (1.0 - s) * c0[c] + s * c1[c];
        }

    const auto shapes = rng.uniform_int(3, 8);
    for (std::int64_t k = 0; k < shapes; ++k) {
        const Rgb color = random_color(rng);
        const double cx = rng.uniform(0.0, n), cy = rng.uniform(0.0, n);
        const double rx = rng.uniform(0.05, 0.3) * n, ry = rng.uniform(0.05, 0.3) * n;
        const bool disk = rng.uniform() < 0.5;
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) {
                const double dx = (static_cast<double>(x) + 0.5 - cx) / rx, dy = (static_cast<double>(y) + 0.5 - cy) / ry;
                const bool inside = disk ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
                if (inside) refl[y * n + x] = color;
            }
    }

    PackedRaw packed{Tensor({kPackedChannels, n, n}), RawMeta{}};
    packed.meta.camera_id = "procedural";
    for (std::size_t y = 0; y < n; ++y)
        for (std::size_t x = 0; x < n; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / n - 0.5, v = (static_cast<double>(y) + 0.5) / n - 0.5;
            const double shade = level * (1.0 - 0.4 * (u * u + v * v));
            const Rgb& r = refl[y * n + x];
            packed.planes.at(0, y, x) = static_cast<Scalar>(std::clamp(shade * r[0] * wb_r, 0.0, 1.0));
            packed.planes.at(1, y, x) = static_cast<Scalar>(std::clamp(shade * r[1], 0.0, 1.0));
            packed.planes.at(2, y, x) = static_cast<Scalar>(std::clamp(shade * r[2] * wb_b, 0.0, 1.0));
            packed.planes.at(3, y, x) = packed.planes.at(1, y, x);
        }
    return unpack(packed);
}

std::vector<std::filesystem::path> write_scenes(std::size_t count, std::size_t mosaic_size, std::uint64_t seed,
                                                const std::filesystem::path& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw DataError("gen-scenes: cannot create " + out_dir.string() + ": " + ec.message());
    std::vector<std::filesystem::path> paths;
    for (std::size_t k = 0; k < count; ++k) {
        Rng rng = Rng::stream(seed, k);
        const auto path = out_dir / numbered("scene", k);
        write_r4(generate_scene(mosaic_size, rng), path);
        paths.push_back(path);
    }
    return paths;
}

std::vector<PackedRaw> load_scenes(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("scenes: no such directory " + dir.string());
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".r4") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DataError("scenes: no .r4 files in " + dir.string());
    std::vector<PackedRaw> out;
    for (const auto& f : files) out.push_back(pack(read_r4(f)));
    return out;
}

std::vector<PairRecord> read_pair_manifest(const std::filesystem::path& manifest) {
    std::ifstream in(manifest);
    if (!in) throw DataError("manifest: cannot open " + manifest.string());
    const auto base = manifest.parent_path();
    std::vector<PairRecord> out;
    std::string line;
    for (int line_no = 1; std::getline(in, line); ++line_no) {
        if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        std::istringstream fields(line);
        std::string noisy, clean, ratio_text, extra;
        if (!(fields >> noisy)) continue;
        if (!(fields >> clean >> ratio_text) || (fields >> extra))
            throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": expected 'noisy clean ratio'");
        double ratio = 0.0;
        try {
            std::size_t used = 0;
            ratio = std::stod(ratio_text, &used);
            if (used != ratio_text.size()) throw std::invalid_argument(ratio_text);
        } catch (const std::exception&) {
            throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": bad ratio '" + ratio_text + "'");
        }
        if (!(ratio >= 1.0) || !std::isfinite(ratio))
            throw DataError(manifest.string() + ":" + std::to_string(line_no) + ": ratio must be >= 1");
        out.push_back({base / noisy, base / clean, ratio});
    }
    if (out.empty()) throw DataError("manifest: no pairs in " + manifest.string());
    return out;
}

void write_pair_manifest(const std::filesystem::path& manifest, const std::vector<PairRecord>& records) {
    std::ofstream out(manifest, std::ios::trunc);
    if (!out) throw DataError("manifest: cannot write " + manifest.string());
    out << "# noisy clean ratio\n";
    const auto base = manifest.parent_path();
    for (const auto& r : records) {
        out << std::filesystem::relative(r.noisy, base).generic_string() << ' '
            << std::filesystem::relative(r.clean, base).generic_string() << ' ' << format_double(r.ratio) << '\n';
    }
}

std::vector<EvalSample> load_pairs(const std::filesystem::path& manifest) {
    std::vector<EvalSample> out;
    for (const auto& r : read_pair_manifest(manifest)) {
        EvalSample s{r.noisy.stem().string(), pack(read_r4(r.noisy)), pack(read_r4(r.clean)), r.ratio};
        if (s.noisy.planes.shape() != s.clean.planes.shape())
            throw DataError("manifest: " + r.noisy.string() + " and " + r.clean.string() + " differ in size");
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<AlignPair> to_align_pairs(const std::vector<EvalSample>& samples) {
    std::vector<AlignPair> out;
    for (const auto& s : samples) out.push_back({s.noisy, s.clean, s.ratio});
    return out;
}

std::filesystem::path make_pair_set(const NoiseSpace& space, std::size_t cameras, std::optional<std::size_t> camera,
                                    std::size_t count, std::size_t mosaic_size, std::uint64_t seed,
                                    std::optional<double> ratio, const std::filesystem::path& out_dir) {
    const auto cams = partition(space, cameras);
    if (camera && (*camera < 1 || *camera > cams.size()))
        throw std::out_of_range("pairs: camera " + std::to_string(*camera) + " outside 1.." + std::to_string(cams.size()));
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "clean", ec);
    std::filesystem::create_directories(out_dir / "noisy", ec);
    if (ec) throw DataError("pairs: cannot create " + out_dir.string() + ": " + ec.message());

    std::vector<PairRecord> records;
    for (std::size_t k = 0; k < count; ++k) {
        Rng rng = Rng::stream(seed, k);
        const RawImage clean_raw = generate_scene(mosaic_size, rng);
        const PackedRaw clean = pack(clean_raw);
        const std::size_t index =
            camera ? *camera : static_cast<std::size_t>(rng.uniform_int(1, static_cast<std::int64_t>(cams.size())));
        NoiseParams params = sample_params(cams[index - 1], space, rng);
        if (ratio) params.ratio = *ratio;
        PackedRaw noisy = synthesize(clean, params, rng);
        noisy.meta.camera_id = "virtual" + std::to_string(index);
        const auto clean_path = out_dir / "clean" / numbered("pair", k);
        const auto noisy_path = out_dir / "noisy" / numbered("pair", k);
        write_r4(clean_raw, clean_path);
        write_r4(unpack(noisy), noisy_path);
        records.push_back({noisy_path, clean_path, noisy.meta.exposure_ratio});
    }
    const auto manifest = out_dir / "manifest.txt";
    write_pair_manifest(manifest, records);
    return manifest;
}

} // namespace tsdiff
