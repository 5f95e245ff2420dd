#ifndef PSRLAB_DETECT_HPP_
#define PSRLAB_DETECT_HPP_

#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "psrlab/raster.hpp"
#include "psrlab/scene.hpp"

namespace psrlab {

// Hue-band classification tolerance and speckle floor. The band tolerance is
// a third of the reserved band width; components below A_min pixels are
// discarded so noise cannot produce detections.
constexpr double kDetectHueTolerance = kHueBandWidth / 3.0;
constexpr double kDetectMinSaturation = 0.40;
constexpr double kDetectMinValue = 0.20;
constexpr int kDetectMinArea = 4;

struct Detection {
    BBox bbox;
    double score = 0.0;  // fraction of component pixels within half tolerance of the band center
    int category = 0;
    double centroid_row = 0.0;  // component mass center, used for positional checks
    double centroid_col = 0.0;
    int area = 0;
};

// Detections sorted by descending score; ties broken by larger area, then
// smaller row_min. The first entry is the pairing choice downstream.
struct DetectionSet {
    std::vector<Detection> detections;

    bool empty() const { return detections.empty(); }
    const Detection& top() const { return detections.front(); }
};

// Category-conditional grounding oracle: classifies pixels into the
// category's reserved hue band and returns 8-connected components.
// Input values are clamped to [0,1] on entry.
DetectionSet detect(const Raster& raster, int category);

// Sub-raster copy over an inclusive bbox.
Raster crop(const Raster& raster, const BBox& bbox);

nlohmann::json detection_to_json(const Detection& d);

}  // namespace psrlab

#endif  // PSRLAB_DETECT_HPP_
