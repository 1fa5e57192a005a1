#include "tsdiff/kvfile.hpp"

#include "tsdiff/errors.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace tsdiff {

namespace {

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

bool parse_double(std::string_view text, double& out) {
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc() && ptr == end;
}

} // namespace

KeyValueFile KeyValueFile::parse(std::string_view text, std::string source) {
    KeyValueFile file;
    file.source_ = std::move(source);
    int line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos)
            throw DataError(file.source_ + ":" + std::to_string(line_no) + ": expected 'key = value'");
        Entry e{std::string(trim(line.substr(0, eq))), std::string(trim(line.substr(eq + 1))), line_no};
        if (e.key.empty()) throw DataError(file.source_ + ":" + std::to_string(line_no) + ": empty key");
        if (file.find(e.key))
            throw DataError(file.source_ + ":" + std::to_string(line_no) + ": duplicate key '" + e.key + "'");
        file.entries_.push_back(std::move(e));
    }
    return file;
}

KeyValueFile KeyValueFile::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse(buf.str(), path.string());
}

const KeyValueFile::Entry* KeyValueFile::find(std::string_view key) const {
    for (const auto& e : entries_)
        if (e.key == key) return &e;
    return nullptr;
}

void KeyValueFile::fail(const Entry& e, const std::string& message) const {
    throw DataError(source_ + ":" + std::to_string(e.line) + ": " + message);
}

const std::string& KeyValueFile::get(std::string_view key) const {
    const Entry* e = find(key);
    if (!e) throw DataError(source_ + ": missing key '" + std::string(key) + "'");
    return e->value;
}

double KeyValueFile::get_double(std::string_view key) const {
    get(key);
    const Entry& e = *find(key);
    double v = 0.0;
    if (!parse_double(e.value, v)) fail(e, "'" + e.key + "' is not a number: '" + e.value + "'");
    return v;
}

std::int64_t KeyValueFile::get_int(std::string_view key) const {
    get(key);
    const Entry& e = *find(key);
    std::int64_t v = 0;
    const char* end = e.value.data() + e.value.size();
    auto [ptr, ec] = std::from_chars(e.value.data(), end, v);
    if (ec != std::errc() || ptr != end) fail(e, "'" + e.key + "' is not an integer: '" + e.value + "'");
    return v;
}

std::vector<double> KeyValueFile::get_double_list(std::string_view key) const {
    get(key);
    const Entry& e = *find(key);
    std::vector<double> out;
    std::string_view rest = e.value;
    while (!trim(rest).empty()) {
        const auto comma = rest.find(',');
        const std::string_view item = trim(rest.substr(0, comma));
        double v = 0.0;
        if (!parse_double(item, v)) fail(e, "'" + e.key + "' has a non-numeric item '" + std::string(item) + "'");
        out.push_back(v);
        if (comma == std::string_view::npos) break;
        rest = rest.substr(comma + 1);
    }
    return out;
}

void KeyValueFile::reject_unknown(const std::vector<std::string_view>& known) const {
    for (const auto& e : entries_)
        if (std::find(known.begin(), known.end(), e.key) == known.end()) fail(e, "unknown key '" + e.key + "'");
}

std::string format_double(double value) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, ptr);
}

std::string format_double_list(const std::vector<double>& values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (i) out += ", ";
        out += format_double(values[i]);
    }
    return out;
}

} // namespace tsdiff
