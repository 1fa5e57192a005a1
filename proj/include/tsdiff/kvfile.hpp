#pragma once

// Line-oriented "key = value" text files with '#' comments. Used for the noise
// space definition, run configuration and checkpoint manifests.

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

namespace tsdiff {

class KeyValueFile {
public:
    struct Entry {
        std::string key;
        std::string value;
        int line = 0;
    };

    static KeyValueFile parse(std::string_view text, std::string source = "<string>");
    static KeyValueFile load(const std::filesystem::path& path);

    const std::string& source() const noexcept { return source_; }
    const std::vector<Entry>& entries() const noexcept { return entries_; }
    bool contains(std::string_view key) const { return find(key) != nullptr; }

    const std::string& get(std::string_view key) const;
    double get_double(std::string_view key) const;
    std::int64_t get_int(std::string_view key) const;
    std::vector<double> get_double_list(std::string_view key) const;

    /// Throws DataError naming the first key (and its line) not in `known`.
    void reject_unknown(const std::vector<std::string_view>& known) const;

private:
    const Entry* find(std::string_view key) const;
    [[noreturn]] void fail(const Entry& e, const std::string& message) const;

    std::string source_;
    std::vector<Entry> entries_;
};

/// Shortest decimal text that parses back to exactly `value`.
std::string format_double(double value);
std::string format_double_list(const std::vector<double>& values);

} // namespace tsdiff
