#include "psrlab/rewards.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "psrlab/common.hpp"
#include "psrlab/embed.hpp"

namespace psrlab {

namespace {

constexpr double kNeutralMaxSaturation = 0.25;
constexpr double kNeutralMinValue = 0.93;
constexpr double kSubjectMinSaturation = 0.40;
constexpr double kWedgeValueSplit = 0.75;

// Mean rendered RGB of each background class (texture averages out to the
// flat tone at this precision); computed once on a blank render.
const std::array<std::array<double, 3>, kNumBackgrounds>& background_mean_rgb() {
    static const auto means = [] {
        std::array<std::array<double, 3>, kNumBackgrounds> out{};
        for (int bg = 0; bg < kNumBackgrounds; ++bg) {
            Scene s;
            s.background = bg;
            s.height = 32;
            s.width = 32;
            const Raster img = render(s);
            double acc[3] = {0.0, 0.0, 0.0};
            for (std::size_t i = 0; i < img.data.size(); i += 3)
                for (int c = 0; c < 3; ++c) acc[c] += img.data[i + static_cast<std::size_t>(c)];
            const double n = static_cast<double>(img.height * img.width);
            for (int c = 0; c < 3; ++c) out[static_cast<std::size_t>(bg)][static_cast<std::size_t>(c)] = acc[c] / n;
        }
        return out;
    }();
    return means;
}

bool inside(const BBox& b, int r, int c) {
    return r >= b.row_min && r <= b.row_max && c >= b.col_min && c <= b.col_max;
}

BBox expand(const BBox& b, int margin, const Raster& raster) {
    BBox out = b;
    out.row_min = std::max(0, b.row_min - margin);
    out.col_min = std::max(0, b.col_min - margin);
    out.row_max = std::min(static_cast<int>(raster.height) - 1, b.row_max + margin);
    out.col_max = std::min(static_cast<int>(raster.width) - 1, b.col_max + margin);
    return out;
}

int count_components(const std::vector<std::pair<int, int>>& pixels) {
    // 8-connectivity on a small pixel list.
    std::vector<int> label(pixels.size(), -1);
    int next = 0;
    for (std::size_t i = 0; i < pixels.size(); ++i) {
        if (label[i] >= 0) continue;
        label[i] = next;
        std::vector<std::size_t> stack = {i};
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            for (std::size_t j = 0; j < pixels.size(); ++j) {
                if (label[j] >= 0) continue;
                if (std::abs(pixels[cur].first - pixels[j].first) <= 1 &&
                    std::abs(pixels[cur].second - pixels[j].second) <= 1) {
                    label[j] = next;
                    stack.push_back(j);
                }
            }
        }
        ++next;
    }
    return next;
}

}  // namespace

PsrResult psr_reward(const Raster& output, const std::vector<Raster>& refs, const std::vector<int>& categories) {
    if (refs.size() != categories.size() || refs.empty())
        throw DataError("psr_reward: refs and categories must align and be non-empty");
    PsrResult out;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const int cat = categories[i];
        const DetectionSet ref_det = detect(refs[i], cat);
        if (ref_det.empty())
            throw DataError("psr_reward: category '" + category_name(cat) +
                            "' not detectable in its reference (malformed reference)");
        const Embedding ref_emb = embed(crop(refs[i], ref_det.top().bbox));

        PerSubjectSimilarity entry;
        entry.category = cat;
        const DetectionSet out_det = detect(output, cat);
        if (out_det.empty()) {
            entry.similarity = 0.0;
            entry.matched = false;
        } else {
            const Embedding out_emb = embed(crop(output, out_det.top().bbox));
            entry.similarity = similarity01(ref_emb, out_emb);
            entry.matched = true;
        }
        out.per_subject.push_back(entry);
    }
    // Summing in sorted order keeps the mean exactly invariant under joint
    // permutations of (refs, categories).
    std::vector<double> sims;
    sims.reserve(out.per_subject.size());
    for (const auto& p : out.per_subject) sims.push_back(p.similarity);
    std::sort(sims.begin(), sims.end());
    double acc = 0.0;
    for (double s : sims) acc += s;
    out.psr = acc / static_cast<double>(refs.size());
    return out;
}

int classify_background(const Raster& input, const std::vector<BBox>& subject_boxes) {
    const Raster raster = input.clamped01();
    std::vector<BBox> expanded;
    expanded.reserve(subject_boxes.size());
    for (const auto& b : subject_boxes) expanded.push_back(expand(b, 3, raster));
    double acc[3] = {0.0, 0.0, 0.0};
    std::size_t n = 0;
    for (int r = 0; r < static_cast<int>(raster.height); ++r)
        for (int c = 0; c < static_cast<int>(raster.width); ++c) {
            bool masked = false;
            for (const auto& b : expanded)
                if (inside(b, r, c)) {
                    masked = true;
                    break;
                }
            if (masked) continue;
            const auto ur = static_cast<std::size_t>(r);
            const auto uc = static_cast<std::size_t>(c);
            const Hsv px = rgb_to_hsv(raster.at(ur, uc, 0), raster.at(ur, uc, 1), raster.at(ur, uc, 2));
            if (px.s >= kSubjectMinSaturation) continue;  // stray subject-like pixels
            acc[0] += raster.at(ur, uc, 0);
            acc[1] += raster.at(ur, uc, 1);
            acc[2] += raster.at(ur, uc, 2);
            ++n;
        }
    if (n == 0) return -1;
    for (double& v : acc) v /= static_cast<double>(n);
    const auto& means = background_mean_rgb();
    int best = 0;
    double best_d = 1e300;
    for (int bg = 0; bg < kNumBackgrounds; ++bg) {
        double d = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double diff = acc[c] - means[static_cast<std::size_t>(bg)][static_cast<std::size_t>(c)];
            d += diff * diff;
        }
        if (d < best_d) {
            best_d = d;
            best = bg;
        }
    }
    return best;
}

Attribute classify_attribute(const Raster& input, const BBox& bbox) {
    const Raster raster = input.clamped01();
    // Decorations live within Chebyshev size+2 of the subject center; a
    // tighter scan keeps a neighbor's decorations out of the window.
    const int size_est = std::max(bbox.row_max - bbox.row_min, bbox.col_max - bbox.col_min) / 2;
    const double center_r = 0.5 * (bbox.row_min + bbox.row_max);
    const double center_c = 0.5 * (bbox.col_min + bbox.col_max);
    const BBox region = expand(bbox, 2, raster);
    std::vector<std::pair<int, int>> above, below;
    int left = 0, right = 0, above_n = 0, below_n = 0, total = 0;
    for (int r = region.row_min; r <= region.row_max; ++r)
        for (int c = region.col_min; c <= region.col_max; ++c) {
            if (std::max(std::fabs(r - center_r), std::fabs(c - center_c)) > size_est + 2) continue;
            const auto ur = static_cast<std::size_t>(r);
            const auto uc = static_cast<std::size_t>(c);
            const Hsv px = rgb_to_hsv(raster.at(ur, uc, 0), raster.at(ur, uc, 1), raster.at(ur, uc, 2));
            if (px.s > kNeutralMaxSaturation || px.v < kNeutralMinValue) continue;
            if (inside(bbox, r, c)) continue;  // decorations sit outside the shape
            ++total;
            if (r < bbox.row_min) {
                ++above_n;
                above.emplace_back(r, c);
            } else if (r > bbox.row_max) {
                ++below_n;
                below.emplace_back(r, c);
            }
            if (c < bbox.col_min) ++left;
            if (c > bbox.col_max) ++right;
        }
    if (total < 2) return Attribute::kNone;
    const bool has_above = above_n > 0, has_below = below_n > 0;
    if (has_above && has_below && left > 0 && right > 0) return Attribute::kCollarRing;
    if (has_below && !has_above) return Attribute::kScarfBand;
    if (has_above && !has_below) return count_components(above) >= 2 ? Attribute::kCrownSpikes : Attribute::kHatNotch;
    // Ambiguous spread without full coverage: call it a collar if wide.
    if (left > 0 && right > 0) return Attribute::kCollarRing;
    return Attribute::kNone;
}

int estimate_pose(const Raster& input, const BBox& bbox, int category) {
    const Raster raster = input.clamped01();
    const double band = category_band_center(category);
    double bright_r = 0.0, bright_c = 0.0, dark_r = 0.0, dark_c = 0.0;
    int bright_n = 0, dark_n = 0;
    for (int r = bbox.row_min; r <= bbox.row_max; ++r)
        for (int c = bbox.col_min; c <= bbox.col_max; ++c) {
            const auto ur = static_cast<std::size_t>(r);
            const auto uc = static_cast<std::size_t>(c);
            const Hsv px = rgb_to_hsv(raster.at(ur, uc, 0), raster.at(ur, uc, 1), raster.at(ur, uc, 2));
            if (px.s < kSubjectMinSaturation || px.v < kDetectMinValue) continue;
            if (hue_distance(px.h, band) > kDetectHueTolerance) continue;
            if (px.v >= kWedgeValueSplit) {
                bright_r += r;
                bright_c += c;
                ++bright_n;
            } else {
                dark_r += r;
                dark_c += c;
                ++dark_n;
            }
        }
    if (bright_n == 0 || dark_n == 0) return -1;
    const double dr = dark_r / dark_n - bright_r / bright_n;
    const double dc = dark_c / dark_n - bright_c / bright_n;
    if (dr == 0.0 && dc == 0.0) return -1;
    double angle = std::atan2(-dr, dc) * 180.0 / M_PI;  // pose 0 = +col, 90 = -row
    if (angle < 0.0) angle += 360.0;
    const int quantized = static_cast<int>(std::lround(angle / 90.0)) % 4;
    return kPoseAngles[static_cast<std::size_t>(quantized)];
}

namespace {

struct DetectedSubjects {
    std::vector<DetectionSet> sets;  // aligned with instruction subjects
    std::vector<BBox> boxes;         // top boxes of detected subjects only
    int detected_count = 0;
};

DetectedSubjects detect_instruction_subjects(const Instruction& ins, const Raster& output) {
    DetectedSubjects out;
    for (const auto& s : ins.subjects) {
        out.sets.push_back(detect(output, s.category));
        if (!out.sets.back().empty()) {
            out.boxes.push_back(out.sets.back().top().bbox);
            ++out.detected_count;
        }
    }
    return out;
}

double background_score(const Instruction& ins, const Raster& output, const DetectedSubjects& det) {
    if (!ins.target_background) return 1.0;
    return classify_background(output, det.boxes) == *ins.target_background ? 1.0 : 0.0;
}

double position_score(const Instruction& ins, const DetectedSubjects& det) {
    if (ins.relations.empty()) return 1.0;
    double acc = 0.0;
    for (const auto& rel : ins.relations) {
        const auto& sa = det.sets[static_cast<std::size_t>(rel.subject_a)];
        const auto& sb = det.sets[static_cast<std::size_t>(rel.subject_b)];
        if (sa.empty() || sb.empty()) continue;  // missing subject scores 0 for this relation
        const double ar = sa.top().centroid_row, ac = sa.top().centroid_col;
        const double br = sb.top().centroid_row, bc = sb.top().centroid_col;
        bool ok = false;
        switch (rel.rel) {
            case Relation::kLeftOf: ok = ac <= bc - kRelationMarginPx; break;
            case Relation::kRightOf: ok = ac >= bc + kRelationMarginPx; break;
            case Relation::kAbove: ok = ar <= br - kRelationMarginPx; break;
            case Relation::kBelow: ok = ar >= br + kRelationMarginPx; break;
        }
        if (ok) acc += 1.0;
    }
    return acc / static_cast<double>(ins.relations.size());
}

double attribute_score(const Instruction& ins, const Raster& output, const DetectedSubjects& det) {
    int constrained = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < ins.subjects.size(); ++i) {
        if (!ins.subjects[i].attribute) continue;
        ++constrained;
        if (det.sets[i].empty()) continue;
        if (classify_attribute(output, det.sets[i].top().bbox) == *ins.subjects[i].attribute) acc += 1.0;
    }
    return constrained == 0 ? 1.0 : acc / static_cast<double>(constrained);
}

double action_score(const Instruction& ins, const Raster& output, const DetectedSubjects& det) {
    int constrained = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < ins.subjects.size(); ++i) {
        if (!ins.subjects[i].pose_deg) continue;
        ++constrained;
        if (det.sets[i].empty()) continue;
        if (estimate_pose(output, det.sets[i].top().bbox, ins.subjects[i].category) == *ins.subjects[i].pose_deg)
            acc += 1.0;
    }
    return constrained == 0 ? 1.0 : acc / static_cast<double>(constrained);
}

double all_present_score(const DetectedSubjects& det, std::size_t n) {
    return det.detected_count == static_cast<int>(n) ? 1.0 : 0.0;
}

}  // namespace

double semantic_reward(const Instruction& ins, const Raster& output) {
    if (ins.subjects.empty()) throw DataError("semantic_reward: instruction has no structured subjects");
    const DetectedSubjects det = detect_instruction_subjects(ins, output);
    if (det.detected_count == 0) return 0.0;
    switch (ins.kind) {
        case TaskKind::kBackground:
            return background_score(ins, output, det);
        case TaskKind::kPosition:
            return position_score(ins, det);
        case TaskKind::kAttribute:
            return attribute_score(ins, output, det);
        case TaskKind::kAction:
            return action_score(ins, output, det);
        case TaskKind::kComplex: {
            const double parts =
                background_score(ins, output, det) + position_score(ins, det) + attribute_score(ins, output, det);
            return parts / 3.0;
        }
        case TaskKind::kThree:
        case TaskKind::kFour:
            return (background_score(ins, output, det) + all_present_score(det, ins.subjects.size())) / 2.0;
    }
    return 0.0;
}

double semantic_check_scene(const Instruction& ins, const Scene& scene) {
    // Index scene subjects by category (categories are pairwise distinct).
    auto find_subject = [&](int category) -> const SubjectSpec* {
        for (const auto& s : scene.subjects)
            if (s.category == category) return &s;
        return nullptr;
    };
    auto bg_score = [&]() {
        if (!ins.target_background) return 1.0;
        return scene.background == *ins.target_background ? 1.0 : 0.0;
    };
    auto pos_score = [&]() {
        if (ins.relations.empty()) return 1.0;
        double acc = 0.0;
        for (const auto& rel : ins.relations) {
            const SubjectSpec* a = find_subject(ins.subjects[static_cast<std::size_t>(rel.subject_a)].category);
            const SubjectSpec* b = find_subject(ins.subjects[static_cast<std::size_t>(rel.subject_b)].category);
            if (!a || !b) continue;
            bool ok = false;
            switch (rel.rel) {
                case Relation::kLeftOf: ok = a->center_col <= b->center_col - kRelationMarginPx; break;
                case Relation::kRightOf: ok = a->center_col >= b->center_col + kRelationMarginPx; break;
                case Relation::kAbove: ok = a->center_row <= b->center_row - kRelationMarginPx; break;
                case Relation::kBelow: ok = a->center_row >= b->center_row + kRelationMarginPx; break;
            }
            if (ok) acc += 1.0;
        }
        return acc / static_cast<double>(ins.relations.size());
    };
    auto attr_score = [&]() {
        int constrained = 0;
        double acc = 0.0;
        for (const auto& sc : ins.subjects) {
            if (!sc.attribute) continue;
            ++constrained;
            const SubjectSpec* s = find_subject(sc.category);
            if (s && s->attribute == *sc.attribute) acc += 1.0;
        }
        return constrained == 0 ? 1.0 : acc / static_cast<double>(constrained);
    };
    auto act_score = [&]() {
        int constrained = 0;
        double acc = 0.0;
        for (const auto& sc : ins.subjects) {
            if (!sc.pose_deg) continue;
            ++constrained;
            const SubjectSpec* s = find_subject(sc.category);
            if (s && s->pose_deg == *sc.pose_deg) acc += 1.0;
        }
        return constrained == 0 ? 1.0 : acc / static_cast<double>(constrained);
    };
    auto present_score = [&]() {
        for (const auto& sc : ins.subjects)
            if (!find_subject(sc.category)) return 0.0;
        return 1.0;
    };
    switch (ins.kind) {
        case TaskKind::kBackground: return bg_score();
        case TaskKind::kPosition: return pos_score();
        case TaskKind::kAttribute: return attr_score();
        case TaskKind::kAction: return act_score();
        case TaskKind::kComplex: return (bg_score() + pos_score() + attr_score()) / 3.0;
        case TaskKind::kThree:
        case TaskKind::kFour: return (bg_score() + present_score()) / 2.0;
    }
    return 0.0;
}

double mean_squared_laplacian(const Raster& input) {
    const Raster raster = input.clamped01();
    if (raster.height < 3 || raster.width < 3) return 0.0;
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t r = 1; r + 1 < raster.height; ++r)
        for (std::size_t c = 1; c + 1 < raster.width; ++c)
            for (std::size_t ch = 0; ch < raster.channels; ++ch) {
                const double l = raster.at(r - 1, c, ch) + raster.at(r + 1, c, ch) + raster.at(r, c - 1, ch) +
                                 raster.at(r, c + 1, ch) - 4.0 * raster.at(r, c, ch);
                acc += l * l;
                ++n;
            }
    return n == 0 ? 0.0 : acc / static_cast<double>(n);
}

double aesthetic_reward(const Raster& output) {
    std::size_t clipped = 0;
    for (double v : output.data)
        if (v < 0.0 || v > 1.0) ++clipped;
    const double clip_fraction = output.data.empty() ? 0.0 : static_cast<double>(clipped) /
                                                              static_cast<double>(output.data.size());
    const double noise = std::min(1.0, mean_squared_laplacian(output) * kAestheticNoiseScale);
    return 1.0 - 0.5 * clip_fraction - 0.5 * noise;
}

double aggregate_reward(const RewardBreakdown& b, const RewardWeights& w) {
    if (w.w_psr < 0.0 || w.w_semantic < 0.0 || w.w_aesthetic < 0.0)
        throw ConfigError("aggregate_reward: negative reward weight");
    return w.w_psr * b.psr + w.w_semantic * b.semantic + w.w_aesthetic * b.aesthetic;
}

RewardBreakdown evaluate_rewards(const Raster& output, const Raster& output_preclamp,
                                 const std::vector<Raster>& refs, const std::vector<int>& categories,
                                 const Instruction& instruction, const RewardWeights& weights) {
    RewardBreakdown b;
    const PsrResult psr = psr_reward(output, refs, categories);
    b.psr = psr.psr;
    b.per_subject = psr.per_subject;
    b.semantic = semantic_reward(instruction, output);
    b.aesthetic = aesthetic_reward(output_preclamp);
    b.aggregate = aggregate_reward(b, weights);
    return b;
}

nlohmann::json reward_to_json(const RewardBreakdown& b) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& p : b.per_subject)
        per.push_back({{"category", category_name(p.category)},
                       {"similarity", p.similarity},
                       {"matched", p.matched}});
    return {{"psr", b.psr},
            {"semantic", b.semantic},
            {"aesthetic", b.aesthetic},
            {"aggregate", b.aggregate},
            {"per_subject", per}};
}

}  // namespace psrlab
