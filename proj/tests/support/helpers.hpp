#pragma once

#include "tsdiff/rawproc.hpp"
#include "tsdiff/rng.hpp"
#include "tsdiff/tensor.hpp"

#include <filesystem>
#include <fstream>
#include <string>

namespace tsdiff::testing {

inline Tensor uniform_tensor(Rng& rng, Shape shape, double lo = 0.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (Scalar& v : t.values()) v = static_cast<Scalar>(rng.uniform(lo, hi));
    return t;
}

inline PackedRaw packed_from(Tensor planes) {
    PackedRaw p;
    p.planes = std::move(planes);
    return p;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("tsdiff-" + tag + "-" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

inline std::string read_text(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

#ifndef TSDIFF_GOLDEN_DIR
#define TSDIFF_GOLDEN_DIR "tests/golden"
#endif

inline std::filesystem::path golden(const std::string& name) { return std::filesystem::path(TSDIFF_GOLDEN_DIR) / name; }

} // namespace tsdiff::testing
