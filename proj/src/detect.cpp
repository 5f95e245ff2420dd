#include "psrlab/detect.hpp"

#include <algorithm>
#include <nlohmann/json.hpp>
#include <queue>

#include "psrlab/common.hpp"

namespace psrlab {

DetectionSet detect(const Raster& input, int category) {
    const Raster raster = input.clamped01();
    const double band_center = category_band_center(category);
    const std::size_t h = raster.height, w = raster.width;

    // Pixel classification into the reserved band.
    std::vector<std::uint8_t> in_band(h * w, 0);
    std::vector<std::uint8_t> in_half(h * w, 0);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c) {
            const Hsv px = rgb_to_hsv(raster.at(r, c, 0), raster.at(r, c, 1), raster.at(r, c, 2));
            if (px.s < kDetectMinSaturation || px.v < kDetectMinValue) continue;
            const double d = hue_distance(px.h, band_center);
            if (d <= kDetectHueTolerance) {
                in_band[r * w + c] = 1;
                if (d <= kDetectHueTolerance / 2.0) in_half[r * w + c] = 1;
            }
        }

    // 8-connected components.
    DetectionSet out;
    std::vector<std::uint8_t> seen(h * w, 0);
    std::vector<std::size_t> stack;
    for (std::size_t start = 0; start < h * w; ++start) {
        if (!in_band[start] || seen[start]) continue;
        stack.assign(1, start);
        seen[start] = 1;
        std::vector<std::size_t> component;
        while (!stack.empty()) {
            const std::size_t idx = stack.back();
            stack.pop_back();
            component.push_back(idx);
            const auto r = static_cast<std::ptrdiff_t>(idx / w);
            const auto c = static_cast<std::ptrdiff_t>(idx % w);
            for (std::ptrdiff_t dr = -1; dr <= 1; ++dr)
                for (std::ptrdiff_t dc = -1; dc <= 1; ++dc) {
                    if (dr == 0 && dc == 0) continue;
                    const std::ptrdiff_t nr = r + dr, nc = c + dc;
                    if (nr < 0 || nc < 0 || nr >= static_cast<std::ptrdiff_t>(h) ||
                        nc >= static_cast<std::ptrdiff_t>(w))
                        continue;
                    const std::size_t nidx = static_cast<std::size_t>(nr) * w + static_cast<std::size_t>(nc);
                    if (in_band[nidx] && !seen[nidx]) {
                        seen[nidx] = 1;
                        stack.push_back(nidx);
                    }
                }
        }
        if (static_cast<int>(component.size()) < kDetectMinArea) continue;

        Detection det;
        det.category = category;
        det.area = static_cast<int>(component.size());
        int rmin = static_cast<int>(h), rmax = -1, cmin = static_cast<int>(w), cmax = -1;
        std::size_t half_hits = 0;
        double sum_r = 0.0, sum_c = 0.0;
        for (std::size_t idx : component) {
            const int r = static_cast<int>(idx / w);
            const int c = static_cast<int>(idx % w);
            rmin = std::min(rmin, r);
            rmax = std::max(rmax, r);
            cmin = std::min(cmin, c);
            cmax = std::max(cmax, c);
            sum_r += r;
            sum_c += c;
            half_hits += in_half[idx];
        }
        det.bbox = BBox{rmin, cmin, rmax, cmax};
        det.score = static_cast<double>(half_hits) / static_cast<double>(component.size());
        det.centroid_row = sum_r / static_cast<double>(component.size());
        det.centroid_col = sum_c / static_cast<double>(component.size());
        out.detections.push_back(det);
    }

    std::sort(out.detections.begin(), out.detections.end(), [](const Detection& a, const Detection& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.area != b.area) return a.area > b.area;
        return a.bbox.row_min < b.bbox.row_min;
    });
    return out;
}

Raster crop(const Raster& raster, const BBox& bbox) {
    if (bbox.row_min < 0 || bbox.col_min < 0 || bbox.row_max < bbox.row_min || bbox.col_max < bbox.col_min ||
        bbox.row_max >= static_cast<int>(raster.height) || bbox.col_max >= static_cast<int>(raster.width))
        throw DataError("crop: bbox out of raster bounds");
    Raster out(static_cast<std::size_t>(bbox.row_max - bbox.row_min + 1),
               static_cast<std::size_t>(bbox.col_max - bbox.col_min + 1), raster.channels);
    for (std::size_t r = 0; r < out.height; ++r)
        for (std::size_t c = 0; c < out.width; ++c)
            for (std::size_t ch = 0; ch < raster.channels; ++ch)
                out.at(r, c, ch) = raster.at(static_cast<std::size_t>(bbox.row_min) + r,
                                             static_cast<std::size_t>(bbox.col_min) + c, ch);
    return out;
}

nlohmann::json detection_to_json(const Detection& d) {
    return {{"category", category_name(d.category)},
            {"bbox", {d.bbox.row_min, d.bbox.col_min, d.bbox.row_max, d.bbox.col_max}},
            {"score", d.score},
            {"centroid", {d.centroid_row, d.centroid_col}},
            {"area", d.area}};
}

}  // namespace psrlab
