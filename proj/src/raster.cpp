#include "psrlab/raster.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "psrlab/common.hpp"

namespace psrlab {

Raster Raster::clamped01() const {
    Raster out = *this;
    for (auto& v : out.data) v = std::clamp(v, 0.0, 1.0);
    return out;
}

Hsv rgb_to_hsv(double r, double g, double b) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double d = mx - mn;
    Hsv out;
    out.v = mx;
    out.s = mx > 0.0 ? d / mx : 0.0;
    if (d <= 0.0) {
        out.h = 0.0;
    } else if (mx == r) {
        out.h = std::fmod((g - b) / d / 6.0 + 1.0, 1.0);
    } else if (mx == g) {
        out.h = std::fmod(((b - r) / d + 2.0) / 6.0, 1.0);
    } else {
        out.h = std::fmod(((r - g) / d + 4.0) / 6.0, 1.0);
    }
    return out;
}

void hsv_to_rgb(const Hsv& c, double& r, double& g, double& b) {
    const double h6 = c.h * 6.0;
    const int sector = static_cast<int>(std::floor(h6)) % 6;
    const double f = h6 - std::floor(h6);
    const double p = c.v * (1.0 - c.s);
    const double q = c.v * (1.0 - c.s * f);
    const double t = c.v * (1.0 - c.s * (1.0 - f));
    switch (sector) {
        case 0: r = c.v; g = t; b = p; break;
        case 1: r = q; g = c.v; b = p; break;
        case 2: r = p; g = c.v; b = t; break;
        case 3: r = p; g = q; b = c.v; break;
        case 4: r = t; g = p; b = c.v; break;
        default: r = c.v; g = p; b = q; break;
    }
}

double hue_distance(double a, double b) {
    double d = std::fabs(a - b);
    d = std::fmod(d, 1.0);
    return std::min(d, 1.0 - d);
}

namespace {

constexpr char kRasterMagic[8] = {'P', 'S', 'R', 'L', 'R', 'A', 'S', 'T'};

template <typename T>
void write_pod(std::ofstream& out, T v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw DataError("raster: truncated file");
    return v;
}

void append_u32be(std::vector<unsigned char>& v, std::uint32_t x) {
    v.push_back(static_cast<unsigned char>((x >> 24) & 0xff));
    v.push_back(static_cast<unsigned char>((x >> 16) & 0xff));
    v.push_back(static_cast<unsigned char>((x >> 8) & 0xff));
    v.push_back(static_cast<unsigned char>(x & 0xff));
}

void append_chunk(std::vector<unsigned char>& out, const char* type, const std::vector<unsigned char>& payload) {
    append_u32be(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc =
        crc32(0L, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    append_u32be(out, static_cast<std::uint32_t>(crc));
}

}  // namespace

void save_raster(const std::string& path, const Raster& r) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("raster: cannot open for write: " + tmp);
        out.write(kRasterMagic, sizeof(kRasterMagic));
        write_pod<std::uint32_t>(out, 1u);
        write_pod<std::uint64_t>(out, r.height);
        write_pod<std::uint64_t>(out, r.width);
        write_pod<std::uint64_t>(out, r.channels);
        out.write(reinterpret_cast<const char*>(r.data.data()),
                  static_cast<std::streamsize>(r.data.size() * sizeof(double)));
        if (!out) throw DataError("raster: write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Raster load_raster(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("raster: cannot open: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kRasterMagic, sizeof(kRasterMagic)) != 0)
        throw DataError("raster: bad magic in " + path);
    const auto version = read_pod<std::uint32_t>(in);
    if (version != 1u) throw DataError("raster: unsupported version in " + path);
    Raster r;
    r.height = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    r.width = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    r.channels = static_cast<std::size_t>(read_pod<std::uint64_t>(in));
    r.data.resize(r.height * r.width * r.channels);
    in.read(reinterpret_cast<char*>(r.data.data()), static_cast<std::streamsize>(r.data.size() * sizeof(double)));
    if (!in) throw DataError("raster: truncated data in " + path);
    return r;
}

void save_png(const std::string& path, const Raster& r) {
    if (r.channels != 3) throw DataError("png: only 3-channel rasters supported");
    // Filter byte 0 per scanline, 8-bit RGB.
    std::vector<unsigned char> scanlines;
    scanlines.reserve(r.height * (1 + r.width * 3));
    for (std::size_t y = 0; y < r.height; ++y) {
        scanlines.push_back(0);
        for (std::size_t x = 0; x < r.width; ++x)
            for (std::size_t c = 0; c < 3; ++c) {
                const double v = std::clamp(r.at(y, x, c), 0.0, 1.0);
                scanlines.push_back(static_cast<unsigned char>(std::lround(v * 255.0)));
            }
    }
    uLongf comp_bound = compressBound(static_cast<uLong>(scanlines.size()));
    std::vector<unsigned char> compressed(comp_bound);
    if (compress2(compressed.data(), &comp_bound, scanlines.data(), static_cast<uLong>(scanlines.size()), 6) != Z_OK)
        throw DataError("png: zlib compression failed");
    compressed.resize(comp_bound);

    std::vector<unsigned char> png = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<unsigned char> ihdr;
    append_u32be(ihdr, static_cast<std::uint32_t>(r.width));
    append_u32be(ihdr, static_cast<std::uint32_t>(r.height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    append_chunk(png, "IHDR", ihdr);
    append_chunk(png, "IDAT", compressed);
    append_chunk(png, "IEND", {});

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("png: cannot open for write: " + tmp);
        out.write(reinterpret_cast<const char*>(png.data()), static_cast<std::streamsize>(png.size()));
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace psrlab
