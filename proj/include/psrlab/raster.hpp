#ifndef PSRLAB_RASTER_HPP_
#define PSRLAB_RASTER_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace psrlab {

// H x W x C grid of reals in [0,1]; the universal image representation for
// references, targets and model samples. Channel order is RGB.
struct Raster {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<double> data;  // row-major, channel-interleaved

    Raster() = default;
    Raster(std::size_t h, std::size_t w, std::size_t c = 3) : height(h), width(w), channels(c), data(h * w * c, 0.0) {}

    double& at(std::size_t r, std::size_t c, std::size_t ch) { return data[(r * width + c) * channels + ch]; }
    double at(std::size_t r, std::size_t c, std::size_t ch) const { return data[(r * width + c) * channels + ch]; }

    std::size_t numel() const { return data.size(); }
    bool same_dims(const Raster& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    Raster clamped01() const;
};

struct Hsv {
    double h = 0.0;  // [0,1) circular
    double s = 0.0;
    double v = 0.0;
};

Hsv rgb_to_hsv(double r, double g, double b);
void hsv_to_rgb(const Hsv& c, double& r, double& g, double& b);

// Circular distance between hues in [0,1).
double hue_distance(double a, double b);

// Raw raster format: char[8] "PSRLRAST", u32 version, u64 h, u64 w, u64 c,
// then f64 row-major data. Bit-exact round-trip.
void save_raster(const std::string& path, const Raster& r);
Raster load_raster(const std::string& path);

// 8-bit RGB PNG for human inspection (values clamped to [0,1] first).
void save_png(const std::string& path, const Raster& r);

}  // namespace psrlab

#endif  // PSRLAB_RASTER_HPP_
