#include "psrlab/runio.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "psrlab/common.hpp"

namespace psrlab {

std::uint64_t fnv1a64(const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string fnv1a64_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(bytes.data(), bytes.size())));
    return buf;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot open file for write: " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        if (!out) throw DataError("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open file: " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

std::string git_describe() {
    FILE* pipe = popen("git describe --always --dirty 2>/dev/null", "r");
    if (!pipe) return "unknown";
    char buf[256];
    std::string out;
    while (fgets(buf, sizeof(buf), pipe)) out += buf;
    pclose(pipe);
    while (!out.empty() && (out.back() == '\n' || out.back() == '\r')) out.pop_back();
    return out.empty() ? "unknown" : out;
}

void write_effective_config(const std::string& path, const std::map<std::string, std::string>& kv) {
    std::ostringstream ss;
    ss << "# effective configuration\n";
    ss << "# provenance: " << git_describe() << "\n";
    for (const auto& [k, v] : kv) ss << k << "=" << v << "\n";
    write_text_atomic(path, ss.str());
}

std::map<std::string, std::string> parse_config_file(const std::string& path) {
    std::map<std::string, std::string> kv;
    for (std::string line : read_lines(path)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config: expected key=value, got: " + line);
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("config: empty key in line: " + line);
        kv[key] = value;
    }
    return kv;
}

}  // namespace psrlab
