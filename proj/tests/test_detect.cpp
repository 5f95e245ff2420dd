#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "psrlab/common.hpp"
#include "psrlab/detect.hpp"
#include "psrlab/rng.hpp"
#include "psrlab/scene.hpp"

using namespace psrlab;

namespace {

std::vector<int> full_pool() {
    std::vector<int> pool(kNumCategories);
    for (int i = 0; i < kNumCategories; ++i) pool[static_cast<std::size_t>(i)] = i;
    return pool;
}

Raster noise_raster(Rng& rng, std::size_t side = 32) {
    Raster r(side, side, 3);
    for (auto& v : r.data) v = rng.uniform();
    return r;
}

}  // namespace

TEST_CASE("background-only raster yields an empty detection set") {
    Scene s;
    s.background = 4;
    const Raster img = render(s);
    for (int cat = 0; cat < kNumCategories; ++cat) CHECK(detect(img, cat).empty());
}

TEST_CASE("rendered single-subject scenes detect with IoU >= 0.9 against the analytic bbox") {
    // Every category, several seeds; exactly one detection each.
    for (int cat = 0; cat < kNumCategories; ++cat)
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            const Scene s = sample_scene(seed * 31 + static_cast<std::uint64_t>(cat), 1, {cat});
            const Raster img = render(s);
            const DetectionSet det = detect(img, cat);
            REQUIRE_FALSE(det.empty());
            CHECK(det.detections.size() == 1);
            CHECK(det.top().score > 0.99);
            CHECK(bbox_iou(det.top().bbox, analytic_bbox(s.subjects[0])) >= 0.9);
        }
}

TEST_CASE("uniform-noise rasters never produce sub-minimum-area detections") {
    Rng rng(17);
    int detections = 0;
    for (int i = 0; i < 100; ++i) {
        const Raster img = noise_raster(rng);
        for (int cat = 0; cat < kNumCategories; ++cat) {
            const DetectionSet det = detect(img, cat);
            for (const auto& d : det.detections) {
                CHECK(d.area >= kDetectMinArea);
                CHECK(d.score >= 0.0);
                CHECK(d.score <= 1.0);
                ++detections;
            }
        }
    }
    INFO("noise detections observed: " << detections);
}

TEST_CASE("values outside [0,1] are clamped on entry") {
    Scene s = sample_scene(3, 1, {2});
    Raster img = render(s);
    for (auto& v : img.data) v = v * 3.0 - 1.0;  // push far out of range
    CHECK_NOTHROW(detect(img, 2));
}

TEST_CASE("crop: full-raster bbox copies; 1x1 bbox is a single pixel; bounds checked") {
    const Scene s = sample_scene(9, 2, full_pool());
    const Raster img = render(s);
    const Raster full = crop(img, BBox{0, 0, 31, 31});
    CHECK(full.data == img.data);
    const Raster px = crop(img, BBox{5, 7, 5, 7});
    CHECK(px.height == 1);
    CHECK(px.width == 1);
    CHECK(px.at(0, 0, 0) == img.at(5, 7, 0));
    CHECK_THROWS_AS(crop(img, BBox{0, 0, 32, 31}), DataError);
    CHECK_THROWS_AS(crop(img, BBox{3, 3, 2, 5}), DataError);
}

TEST_CASE("crop of the detected bbox contains at least 90% of the painted subject pixels") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const Scene s = sample_scene(400 + seed, 2, full_pool());
        const RenderDetail detail = render_with_masks(s);
        for (std::size_t i = 0; i < s.subjects.size(); ++i) {
            const DetectionSet det = detect(detail.raster, s.subjects[i].category);
            REQUIRE_FALSE(det.empty());
            const BBox b = det.top().bbox;
            int painted = 0, inside = 0;
            for (int r = 0; r < 32; ++r)
                for (int c = 0; c < 32; ++c)
                    if (detail.subject_masks[i][static_cast<std::size_t>(r * 32 + c)]) {
                        ++painted;
                        if (r >= b.row_min && r <= b.row_max && c >= b.col_min && c <= b.col_max) ++inside;
                    }
            REQUIRE(painted > 0);
            CHECK(static_cast<double>(inside) / painted >= 0.9);
        }
    }
}

TEST_CASE("translation equivariance: shifting a subject shifts its bbox exactly") {
    Scene s;
    s.background = 2;
    SubjectSpec sub;
    sub.category = 5;
    sub.color = {category_band_center(5), category_base_saturation(5), kBodyValue};
    sub.size = 4;
    sub.center_row = 12;
    sub.center_col = 10;
    sub.pose_deg = 90;
    sub.attribute = Attribute::kScarfBand;
    s.subjects.push_back(sub);
    const DetectionSet base = detect(render(s), 5);
    REQUIRE_FALSE(base.empty());
    for (const auto [dr, dc] : {std::pair<int, int>{3, 7}, {7, -2}, {-4, 9}, {0, 12}}) {
        Scene moved = s;
        moved.subjects[0].center_row += dr;
        moved.subjects[0].center_col += dc;
        const DetectionSet det = detect(render(moved), 5);
        REQUIRE_FALSE(det.empty());
        CHECK(det.top().bbox.row_min == base.top().bbox.row_min + dr);
        CHECK(det.top().bbox.col_min == base.top().bbox.col_min + dc);
        CHECK(det.top().bbox.row_max == base.top().bbox.row_max + dr);
        CHECK(det.top().bbox.col_max == base.top().bbox.col_max + dc);
    }
}

TEST_CASE("mean top score never increases with added pixel noise (one-sided, 50+ seeds)") {
    // Coupled design: one noise field per seed, scaled up by the amplitude.
    const std::vector<double> amplitudes = {0.0, 0.05, 0.1, 0.2, 0.4};
    const int n_seeds = 100;
    std::vector<double> level_means(amplitudes.size(), 0.0);
    for (std::uint64_t seed = 0; seed < n_seeds; ++seed) {
        const Scene s = sample_scene(700 + seed, 1, {static_cast<int>(seed % kNumCategories)});
        const Raster clean = render(s);
        Rng rng(seed);
        std::vector<double> field(clean.data.size());
        for (auto& v : field) v = (rng.uniform() - 0.5) * 2.0;
        for (std::size_t li = 0; li < amplitudes.size(); ++li) {
            Raster noisy = clean;
            for (std::size_t i = 0; i < noisy.data.size(); ++i) noisy.data[i] += amplitudes[li] * field[i];
            const DetectionSet det = detect(noisy, s.subjects[0].category);
            level_means[li] += (det.empty() ? 0.0 : det.top().score) / n_seeds;
        }
    }
    // One-sided statistical check: adjacent means within noise slack, strong
    // decrease end to end.
    for (std::size_t li = 1; li < level_means.size(); ++li) {
        INFO("amplitude " << amplitudes[li] << " mean " << level_means[li] << " prev " << level_means[li - 1]);
        CHECK(level_means[li] <= level_means[li - 1] + 0.01);
    }
    CHECK(level_means.back() < level_means.front() - 0.2);
}

TEST_CASE("multi-instance rule: the higher-score component comes first") {
    // Two same-category subjects, one with hue pushed to the tolerance edge
    // so its half-tolerance fraction drops.
    Scene s;
    s.background = 1;
    SubjectSpec a;
    a.category = 8;
    a.color = {category_band_center(8), 0.92, kBodyValue};
    a.size = 4;
    a.center_row = 9;
    a.center_col = 9;
    SubjectSpec b = a;
    b.color.h = category_band_center(8) + kDetectHueTolerance * 0.9;  // in band, outside half tolerance
    b.center_row = 22;
    b.center_col = 22;
    s.subjects = {a, b};
    const DetectionSet det = detect(render(s), 8);
    REQUIRE(det.detections.size() == 2);
    CHECK(det.detections[0].score >= det.detections[1].score);
    CHECK(det.detections[0].bbox.row_min == analytic_bbox(a).row_min);
    CHECK(det.detections[0].centroid_row < det.detections[1].centroid_row);
}

TEST_CASE("detections serialize into the report schema") {
    const Scene s = sample_scene(11, 1, {3});
    const DetectionSet det = detect(render(s), 3);
    REQUIRE_FALSE(det.empty());
    const auto j = detection_to_json(det.top());
    CHECK(j.at("category").get<std::string>() == category_name(3));
    CHECK(j.at("bbox").size() == 4);
    CHECK(j.at("score").get<double>() >= 0.0);
}
