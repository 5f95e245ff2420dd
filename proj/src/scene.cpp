#include "psrlab/scene.hpp"

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "psrlab/common.hpp"

namespace psrlab {

namespace {

const std::array<std::string, kNumCategories> kCategoryNames = {
    "fox", "frog", "crab", "bee", "owl", "carp", "snail", "moth",
    "deer", "toad", "wasp", "finch", "mole", "newt", "pike", "lark"};

const std::array<std::string, kNumBackgrounds> kBackgroundNames = {
    "meadow", "night sky", "desert", "ocean", "forest", "snowfield", "dusk haze", "cave"};

const std::array<Hsv, kNumBackgrounds> kBackgroundTones = {{
    {0.30, 0.18, 0.55},  // meadow
    {0.65, 0.15, 0.25},  // night sky
    {0.12, 0.20, 0.75},  // desert
    {0.55, 0.20, 0.45},  // ocean
    {0.35, 0.18, 0.35},  // forest
    {0.00, 0.04, 0.85},  // snowfield
    {0.08, 0.15, 0.55},  // dusk haze
    {0.75, 0.08, 0.30},  // cave
}};

const std::array<std::string, 5> kAttributeNames = {"none", "hat-notch", "crown-spikes", "scarf-band", "collar-ring"};
const std::array<std::string, 5> kAttributeDisplay = {"nothing", "pointed hat", "spiked crown", "knitted scarf",
                                                      "round collar"};
const std::array<std::string, 4> kPoseAliases = {"sit", "run", "jump", "sleep"};

const std::array<std::string, 7> kTaskNames = {"attribute", "background", "action", "position",
                                               "complex", "three", "four"};
const std::array<std::string, 4> kRelationNames = {"left-of", "right-of", "above", "below"};

std::uint64_t pixel_hash(int bg, std::size_t r, std::size_t c) {
    return mix64((static_cast<std::uint64_t>(bg) << 48) ^ (static_cast<std::uint64_t>(r) << 24) ^
                 static_cast<std::uint64_t>(c));
}

// Deterministic per-class texture: small value modulation only, so the
// background never enters a subject hue band at detection saturation.
double background_value_offset(int bg, std::size_t r, std::size_t c, std::size_t h) {
    switch (bg) {
        case 0: return 0.03 * std::sin(2.0 * M_PI * static_cast<double>(r) / 4.0);
        case 1: return (pixel_hash(bg, r, c) % 17 == 0) ? 0.05 : 0.0;
        case 2: return 0.03 * std::sin(2.0 * M_PI * static_cast<double>(r + c) / 6.0);
        case 3: return 0.03 * std::sin(2.0 * M_PI * static_cast<double>(c) / 4.0);
        case 4: return (((r / 2) + (c / 2)) % 2 == 0) ? 0.02 : -0.02;
        case 5: return (pixel_hash(bg, r, c) % 23 == 0) ? 0.06 : 0.0;
        case 6: return 0.06 * static_cast<double>(r) / static_cast<double>(h) - 0.03;
        default: return (pixel_hash(bg, r, c) % 13 == 0) ? -0.05 : 0.0;
    }
}

bool in_base_shape(Shape shape, int dr, int dc, int s) {
    const int a2 = dr * dr + dc * dc;
    switch (shape) {
        case Shape::kDisc: return a2 <= s * s;
        case Shape::kSquare: return true;
        case Shape::kTriangle: return 2 * std::abs(dc) <= dr + s;
        case Shape::kRing: return a2 <= s * s && 4 * a2 > s * s;
        case Shape::kCross: {
            const int w = std::max(1, (s + 1) / 3);
            return std::abs(dr) <= w || std::abs(dc) <= w;
        }
        case Shape::kDiamond: return std::abs(dr) + std::abs(dc) <= s;
        case Shape::kUBar: return !(dr <= 0 && std::abs(dc) <= s - 2);
        case Shape::kStar: {
            const int w = std::max(1, s / 4);
            return (std::abs(dr) + std::abs(dc) <= s) && (std::abs(dr) <= w || std::abs(dc) <= w);
        }
    }
    return false;
}

// Rotate the query point into the unrotated shape frame (exact for
// multiples of 90 degrees).
void unrotate(int pose_deg, int dr, int dc, int& ur, int& uc) {
    switch (((pose_deg % 360) + 360) % 360) {
        case 0: ur = dr; uc = dc; break;
        case 90: ur = -dc; uc = dr; break;
        case 180: ur = -dr; uc = -dc; break;
        default: ur = dc; uc = -dr; break;  // 270
    }
}

// Pose wedge: pixels whose direction from the center lies within 45 degrees
// of the pose direction. Pose 0 points along +col (east), 90 along -row
// (north), 180 west, 270 south.
bool in_pose_wedge(int pose_deg, int dr, int dc) {
    if (dr == 0 && dc == 0) return false;
    int pr = 0, pc = 0;
    switch (((pose_deg % 360) + 360) % 360) {
        case 0: pr = 0; pc = 1; break;
        case 90: pr = -1; pc = 0; break;
        case 180: pr = 0; pc = -1; break;
        default: pr = 1; pc = 0; break;
    }
    const int proj = dr * pr + dc * pc;
    const int perp = dr * pc - dc * pr;
    return proj >= std::abs(perp);
}

bool in_decoration(Attribute a, int dr, int dc, int s) {
    switch (a) {
        case Attribute::kNone: return false;
        case Attribute::kHatNotch:
            if (dr == -s - 1 && std::abs(dc) <= 1) return true;
            if (dr == -s - 2 && dc == 0) return true;
            return false;
        case Attribute::kCrownSpikes: {
            const int sp = std::max(2, s - 1);
            if (dr != -s - 1 && dr != -s - 2) return false;
            return dc == -sp || dc == 0 || dc == sp;
        }
        case Attribute::kScarfBand: return dr == s + 1 && std::abs(dc) <= s;
        case Attribute::kCollarRing: {
            const double dist = std::sqrt(static_cast<double>(dr * dr + dc * dc));
            return std::lround(dist) == s + 2;
        }
    }
    return false;
}

constexpr int kDecorationReach = 2;  // max pixels a decoration extends past the shape

}  // namespace

const std::string& category_name(int id) {
    if (id < 0 || id >= kNumCategories) throw DataError("category id out of range: " + std::to_string(id));
    return kCategoryNames[static_cast<std::size_t>(id)];
}

int category_by_name(const std::string& name) {
    for (int i = 0; i < kNumCategories; ++i)
        if (kCategoryNames[static_cast<std::size_t>(i)] == name) return i;
    throw DataError("unknown category: " + name);
}

double category_band_center(int id) { return (static_cast<double>(id) + 0.5) * kHueBandWidth; }

double category_base_saturation(int id) { return id % 2 == 0 ? 0.92 : 0.62; }

Shape category_shape(int id) { return static_cast<Shape>(id % 8); }

const std::string& background_name(int id) {
    if (id < 0 || id >= kNumBackgrounds) throw DataError("background id out of range: " + std::to_string(id));
    return kBackgroundNames[static_cast<std::size_t>(id)];
}

int background_by_name(const std::string& name) {
    for (int i = 0; i < kNumBackgrounds; ++i)
        if (kBackgroundNames[static_cast<std::size_t>(i)] == name) return i;
    throw DataError("unknown background: " + name);
}

Hsv background_tone(int id) {
    if (id < 0 || id >= kNumBackgrounds) throw DataError("background id out of range: " + std::to_string(id));
    return kBackgroundTones[static_cast<std::size_t>(id)];
}

const std::string& attribute_name(Attribute a) { return kAttributeNames[static_cast<std::size_t>(a)]; }
const std::string& attribute_display_name(Attribute a) { return kAttributeDisplay[static_cast<std::size_t>(a)]; }

Attribute attribute_by_name(const std::string& name) {
    for (std::size_t i = 0; i < kAttributeNames.size(); ++i)
        if (kAttributeNames[i] == name) return static_cast<Attribute>(i);
    throw DataError("unknown attribute: " + name);
}

const std::string& pose_alias(int angle) {
    for (std::size_t i = 0; i < kPoseAngles.size(); ++i)
        if (kPoseAngles[i] == angle) return kPoseAliases[i];
    throw DataError("pose must be one of 0/90/180/270, got " + std::to_string(angle));
}

int pose_by_alias(const std::string& alias) {
    for (std::size_t i = 0; i < kPoseAliases.size(); ++i)
        if (kPoseAliases[i] == alias) return kPoseAngles[i];
    throw DataError("unknown pose alias: " + alias);
}

const std::string& task_kind_name(TaskKind k) { return kTaskNames[static_cast<std::size_t>(k)]; }

TaskKind task_kind_by_name(const std::string& name) {
    for (std::size_t i = 0; i < kTaskNames.size(); ++i)
        if (kTaskNames[i] == name) return static_cast<TaskKind>(i);
    throw DataError("unknown task kind: " + name);
}

const std::string& relation_name(Relation r) { return kRelationNames[static_cast<std::size_t>(r)]; }

Relation relation_by_name(const std::string& name) {
    for (std::size_t i = 0; i < kRelationNames.size(); ++i)
        if (kRelationNames[i] == name) return static_cast<Relation>(i);
    throw DataError("unknown relation: " + name);
}

Scene sample_scene(std::uint64_t seed, int n_subjects, const std::vector<int>& category_pool, std::size_t height,
                   std::size_t width, const SceneSampleOptions& opts) {
    if (n_subjects < 1 || n_subjects > 4)
        throw ConfigError("sample_scene: n_subjects must be in [1,4], got " + std::to_string(n_subjects));
    if (static_cast<int>(category_pool.size()) < n_subjects)
        throw ConfigError("sample_scene: category pool smaller than subject count");
    const int max_size = std::min<int>(5, (static_cast<int>(std::min(height, width)) - 8) / 4);
    if (max_size < 3)
        throw DataError("sample_scene: resolution " + std::to_string(height) + "x" + std::to_string(width) +
                        " cannot fit subjects (max feasible size " + std::to_string(max_size) + " < 3)");

    Rng rng(seed);
    Scene scene;
    scene.height = height;
    scene.width = width;
    scene.background = static_cast<int>(rng.uniform_int(0, kNumBackgrounds - 1));

    std::vector<int> pool = category_pool;
    rng.shuffle(pool);
    pool.resize(static_cast<std::size_t>(n_subjects));

    for (int attempt = 0; attempt < opts.retry_budget; ++attempt) {
        scene.subjects.clear();
        bool ok = true;
        for (int i = 0; i < n_subjects && ok; ++i) {
            bool placed = false;
            for (int t = 0; t < 50 && !placed; ++t) {
                const int size = static_cast<int>(rng.uniform_int(3, max_size));
                const int margin = size + kDecorationReach + 1;
                if (static_cast<int>(height) - 1 - margin < margin || static_cast<int>(width) - 1 - margin < margin)
                    continue;
                const int r = static_cast<int>(rng.uniform_int(margin, static_cast<int>(height) - 1 - margin));
                const int c = static_cast<int>(rng.uniform_int(margin, static_cast<int>(width) - 1 - margin));
                bool clear = true;
                for (const auto& prev : scene.subjects) {
                    const double dr = static_cast<double>(r - prev.center_row);
                    const double dc = static_cast<double>(c - prev.center_col);
                    // Euclidean non-overlap (the scene invariant) plus
                    // Chebyshev clearance so decorations never touch a
                    // neighboring subject.
                    const bool euclid_ok = std::sqrt(dr * dr + dc * dc) >= static_cast<double>(size + prev.size);
                    const bool cheb_ok = std::max(std::fabs(dr), std::fabs(dc)) >=
                                         static_cast<double>(size + prev.size + 2 * kDecorationReach + 1);
                    if (!euclid_ok || !cheb_ok) {
                        clear = false;
                        break;
                    }
                }
                if (!clear) continue;
                SubjectSpec s;
                s.category = pool[static_cast<std::size_t>(i)];
                s.size = size;
                s.center_row = r;
                s.center_col = c;
                s.color.h = category_band_center(s.category) + rng.uniform(-kHueSampleJitter, kHueSampleJitter);
                s.color.h = std::fmod(s.color.h + 1.0, 1.0);
                s.color.s = category_base_saturation(s.category) + rng.uniform(-0.02, 0.02);
                s.color.v = kBodyValue;
                s.attribute = rng.uniform() < opts.attribute_probability
                                  ? static_cast<Attribute>(rng.uniform_int(1, kNumAttributeKinds))
                                  : Attribute::kNone;
                s.pose_deg = kPoseAngles[static_cast<std::size_t>(rng.uniform_int(0, 3))];
                scene.subjects.push_back(s);
                placed = true;
            }
            if (!placed) ok = false;
        }
        if (ok) return scene;
    }
    throw DataError("sample_scene: retry budget (" + std::to_string(opts.retry_budget) +
                    ") exhausted placing " + std::to_string(n_subjects) + " subjects at " + std::to_string(height) +
                    "x" + std::to_string(width) + " with max size " + std::to_string(max_size));
}

RenderDetail render_with_masks(const Scene& scene) {
    RenderDetail out;
    out.raster = Raster(scene.height, scene.width, 3);
    Raster& img = out.raster;
    const Hsv tone = background_tone(scene.background);
    for (std::size_t r = 0; r < scene.height; ++r)
        for (std::size_t c = 0; c < scene.width; ++c) {
            Hsv px = tone;
            px.v = std::clamp(px.v + background_value_offset(scene.background, r, c, scene.height), 0.0, 1.0);
            hsv_to_rgb(px, img.at(r, c, 0), img.at(r, c, 1), img.at(r, c, 2));
        }

    out.subject_masks.assign(scene.subjects.size(),
                             std::vector<std::uint8_t>(scene.height * scene.width, 0));

    // Decorations first, shapes second: body pixels are never occluded by a
    // decoration (neither their own nor a neighbor's). Within each layer the
    // list order paints back-to-front.
    for (const SubjectSpec& s : scene.subjects) {
        if (s.attribute == Attribute::kNone) continue;
        const int reach = s.size + kDecorationReach;
        for (int dr = -reach; dr <= reach; ++dr)
            for (int dc = -reach; dc <= reach; ++dc) {
                const int r = s.center_row + dr;
                const int c = s.center_col + dc;
                if (r < 0 || c < 0 || r >= static_cast<int>(scene.height) || c >= static_cast<int>(scene.width))
                    continue;
                if (!in_decoration(s.attribute, dr, dc, s.size)) continue;
                img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), 0) = 1.0;
                img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), 1) = 1.0;
                img.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), 2) = 1.0;
            }
    }
    for (std::size_t si = 0; si < scene.subjects.size(); ++si) {
        const SubjectSpec& s = scene.subjects[si];
        const Shape shape = category_shape(s.category);
        for (int dr = -s.size; dr <= s.size; ++dr)
            for (int dc = -s.size; dc <= s.size; ++dc) {
                const int r = s.center_row + dr;
                const int c = s.center_col + dc;
                if (r < 0 || c < 0 || r >= static_cast<int>(scene.height) || c >= static_cast<int>(scene.width))
                    continue;
                int br = 0, bc = 0;
                unrotate(s.pose_deg, dr, dc, br, bc);
                if (!in_base_shape(shape, br, bc, s.size)) continue;
                const auto ur = static_cast<std::size_t>(r);
                const auto uc = static_cast<std::size_t>(c);
                Hsv px = s.color;
                px.v = in_pose_wedge(s.pose_deg, dr, dc) ? kWedgeValue : kBodyValue;
                hsv_to_rgb(px, img.at(ur, uc, 0), img.at(ur, uc, 1), img.at(ur, uc, 2));
                for (std::size_t sj = 0; sj < si; ++sj) out.subject_masks[sj][ur * scene.width + uc] = 0;
                out.subject_masks[si][ur * scene.width + uc] = 1;
            }
    }
    return out;
}

Raster render(const Scene& scene) { return render_with_masks(scene).raster; }

BBox analytic_bbox(const SubjectSpec& s) {
    return BBox{s.center_row - s.size, s.center_col - s.size, s.center_row + s.size, s.center_col + s.size};
}

double bbox_iou(const BBox& a, const BBox& b) {
    const int ir0 = std::max(a.row_min, b.row_min);
    const int ic0 = std::max(a.col_min, b.col_min);
    const int ir1 = std::min(a.row_max, b.row_max);
    const int ic1 = std::min(a.col_max, b.col_max);
    if (ir1 < ir0 || ic1 < ic0) return 0.0;
    const double inter = static_cast<double>((ir1 - ir0 + 1) * (ic1 - ic0 + 1));
    return inter / (static_cast<double>(a.area()) + static_cast<double>(b.area()) - inter);
}

namespace {

std::string the(int category) { return "the " + category_name(category); }

std::string join_clauses(const std::vector<std::string>& parts, const std::string& last_sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) out += (i + 1 == parts.size()) ? last_sep : ", ";
        out += parts[i];
    }
    return out;
}

std::string category_list(const Scene& scene) {
    std::vector<std::string> names;
    names.reserve(scene.subjects.size());
    for (const auto& s : scene.subjects) names.push_back(category_name(s.category));
    return join_clauses(names, " and ");
}

std::string relation_phrase(Relation r) {
    switch (r) {
        case Relation::kLeftOf: return "to the left of";
        case Relation::kRightOf: return "to the right of";
        case Relation::kAbove: return "above";
        case Relation::kBelow: return "below";
    }
    return "";
}

std::string verb_s(const std::string& verb) { return verb + "s"; }

std::string render_background_text(const Scene& scene, int bg, std::size_t tmpl) {
    const std::string& b = background_name(bg);
    const std::string cats = category_list(scene);
    switch (tmpl % 6) {
        case 0: return "Place them in the " + b + ".";
        case 1: return "Show the " + cats + " together in the " + b + ".";
        case 2: return "Move them so they appear in the " + b + ".";
        case 3: return "Put the " + cats + " in the " + b + " and keep their look.";
        case 4: return "They should be standing in the " + b + ".";
        default: return "Render the " + cats + " within the " + b + ".";
    }
}

std::string render_attribute_text(const std::vector<SubjectConstraint>& subs, std::size_t tmpl) {
    std::vector<std::string> give, wear, get, add;
    for (const auto& s : subs) {
        const std::string& attr = attribute_display_name(*s.attribute);
        give.push_back(the(s.category) + " a " + attr);
        wear.push_back(the(s.category) + " wear a " + attr);
        get.push_back(the(s.category) + " gets a " + attr);
        add.push_back("a " + attr + " to " + the(s.category));
    }
    switch (tmpl % 5) {
        case 0: return "Give " + join_clauses(give, " and ") + ".";
        case 1: return "Let " + join_clauses(wear, " and ") + ".";
        case 2: return "Dress them up: " + join_clauses(get, " and ") + ".";
        case 3: return "Keep them as they are, but give " + join_clauses(give, " and ") + ".";
        default: return "Add " + join_clauses(add, " and ") + ".";
    }
}

std::string render_action_text(const std::vector<SubjectConstraint>& subs, std::size_t tmpl) {
    std::vector<std::string> plain, third, should, as_it;
    for (const auto& s : subs) {
        const std::string& verb = pose_alias(*s.pose_deg);
        plain.push_back(the(s.category) + " " + verb);
        third.push_back(the(s.category) + " " + verb_s(verb));
        should.push_back(the(s.category) + " should " + verb);
        as_it.push_back(the(s.category) + " as it " + verb_s(verb));
    }
    switch (tmpl % 5) {
        case 0: return "Make " + join_clauses(plain, " and ") + ".";
        case 1: return "Let " + join_clauses(third, " while ") + ".";
        case 2: return join_clauses(should, " and ") + ".";
        case 3: return "Show " + join_clauses(as_it, " and ") + ".";
        default: return "Have " + join_clauses(plain, " and ") + ".";
    }
}

std::string render_position_text(const Instruction& ins, std::size_t tmpl) {
    const RelationConstraint& rc = ins.relations.front();
    const std::string a = the(ins.subjects[static_cast<std::size_t>(rc.subject_a)].category);
    const std::string b = the(ins.subjects[static_cast<std::size_t>(rc.subject_b)].category);
    const std::string rel = relation_phrase(rc.rel);
    switch (tmpl % 5) {
        case 0: return "Put " + a + " " + rel + " " + b + ".";
        case 1: return "Place " + a + " " + rel + " " + b + " and keep both visible.";
        case 2: return "Arrange them with " + a + " " + rel + " " + b + ".";
        case 3: return "Move " + a + " so it is " + rel + " " + b + ".";
        default: return a + " belongs " + rel + " " + b + ".";
    }
}

std::string render_complex_text(const Instruction& ins, std::size_t tmpl) {
    const std::string& bg = background_name(*ins.target_background);
    const RelationConstraint& rc = ins.relations.front();
    const std::string a = the(ins.subjects[static_cast<std::size_t>(rc.subject_a)].category);
    const std::string b = the(ins.subjects[static_cast<std::size_t>(rc.subject_b)].category);
    const std::string rel = relation_phrase(rc.rel);
    std::string c, attr;
    for (const auto& s : ins.subjects)
        if (s.attribute) {
            c = the(s.category);
            attr = attribute_display_name(*s.attribute);
        }
    switch (tmpl % 5) {
        case 0: return "Place them in the " + bg + ", put " + a + " " + rel + " " + b + ", and give " + c + " a " +
                       attr + ".";
        case 1: return "In the " + bg + ", " + a + " stays " + rel + " " + b + " while " + c + " wears a " + attr +
                       ".";
        case 2: return "Show them in the " + bg + "; keep " + a + " " + rel + " " + b + "; add a " + attr + " to " +
                       c + ".";
        case 3: return "Set the scene in the " + bg + ", with " + a + " " + rel + " " + b + " and a " + attr +
                       " on " + c + ".";
        default: return "They meet in the " + bg + ": " + a + " goes " + rel + " " + b + ", and " + c + " gets a " +
                        attr + ".";
    }
}

std::string render_group_text(const Scene& scene, int bg, bool three, std::size_t tmpl) {
    const std::string& b = background_name(bg);
    const std::string count = three ? "three" : "four";
    const std::string cats = category_list(scene);
    switch (tmpl % 5) {
        case 0: return "Show all " + count + " of them in the " + b + ".";
        case 1: return "Place the " + count + " of them in the " + b + ".";
        case 2: return "The " + cats + " gather in the " + b + ".";
        case 3: return "Bring all " + count + " of them into the " + b + ".";
        default: return "All " + count + " should appear in the " + b + ".";
    }
}

// Picks the widest-separated axis relation between two subjects; non-overlap
// guarantees at least one axis clears the margin.
Relation describe_relation(const SubjectSpec& a, const SubjectSpec& b) {
    const int drow = a.center_row - b.center_row;
    const int dcol = a.center_col - b.center_col;
    if (std::abs(dcol) >= std::abs(drow)) return dcol < 0 ? Relation::kLeftOf : Relation::kRightOf;
    return drow < 0 ? Relation::kAbove : Relation::kBelow;
}

}  // namespace

Instruction make_instruction(const Scene& scene, TaskKind kind, std::uint64_t seed) {
    const int n = static_cast<int>(scene.subjects.size());
    if (kind == TaskKind::kThree && n != 3) throw ConfigError("make_instruction: 'three' task needs 3 subjects");
    if (kind == TaskKind::kFour && n != 4) throw ConfigError("make_instruction: 'four' task needs 4 subjects");
    if ((kind == TaskKind::kPosition || kind == TaskKind::kComplex) && n < 2)
        throw ConfigError("make_instruction: positional tasks need at least 2 subjects");
    if (n < 1) throw ConfigError("make_instruction: scene has no subjects");

    Rng rng(mix64(seed ^ 0x9e3779b97f4a7c15ULL));
    Instruction ins;
    ins.kind = kind;
    for (const auto& s : scene.subjects) {
        SubjectConstraint c;
        c.category = s.category;
        ins.subjects.push_back(c);
    }
    const auto tmpl = static_cast<std::size_t>(rng.uniform_int(0, 9));

    switch (kind) {
        case TaskKind::kAttribute: {
            // Distinct sampled target attributes, one per subject.
            std::vector<int> kinds = {1, 2, 3, 4};
            rng.shuffle(kinds);
            for (int i = 0; i < n; ++i)
                ins.subjects[static_cast<std::size_t>(i)].attribute =
                    static_cast<Attribute>(kinds[static_cast<std::size_t>(i)]);
            ins.text = render_attribute_text(ins.subjects, tmpl);
            break;
        }
        case TaskKind::kBackground: {
            ins.target_background = scene.background;
            ins.text = render_background_text(scene, scene.background, tmpl);
            break;
        }
        case TaskKind::kAction: {
            std::vector<int> poses(kPoseAngles.begin(), kPoseAngles.end());
            rng.shuffle(poses);
            for (int i = 0; i < n; ++i)
                ins.subjects[static_cast<std::size_t>(i)].pose_deg = poses[static_cast<std::size_t>(i)];
            ins.text = render_action_text(ins.subjects, tmpl);
            break;
        }
        case TaskKind::kPosition: {
            int a = static_cast<int>(rng.uniform_int(0, n - 1));
            int b = static_cast<int>(rng.uniform_int(0, n - 2));
            if (b >= a) ++b;
            RelationConstraint rc;
            rc.subject_a = a;
            rc.subject_b = b;
            rc.rel = describe_relation(scene.subjects[static_cast<std::size_t>(a)],
                                       scene.subjects[static_cast<std::size_t>(b)]);
            ins.relations.push_back(rc);
            ins.text = render_position_text(ins, tmpl);
            break;
        }
        case TaskKind::kComplex: {
            ins.target_background = scene.background;
            int a = static_cast<int>(rng.uniform_int(0, n - 1));
            int b = static_cast<int>(rng.uniform_int(0, n - 2));
            if (b >= a) ++b;
            RelationConstraint rc;
            rc.subject_a = a;
            rc.subject_b = b;
            rc.rel = describe_relation(scene.subjects[static_cast<std::size_t>(a)],
                                       scene.subjects[static_cast<std::size_t>(b)]);
            ins.relations.push_back(rc);
            const int attr_subject = static_cast<int>(rng.uniform_int(0, n - 1));
            ins.subjects[static_cast<std::size_t>(attr_subject)].attribute =
                static_cast<Attribute>(rng.uniform_int(1, kNumAttributeKinds));
            ins.text = render_complex_text(ins, tmpl);
            break;
        }
        case TaskKind::kThree: {
            ins.target_background = scene.background;
            ins.text = render_group_text(scene, scene.background, true, tmpl);
            break;
        }
        case TaskKind::kFour: {
            ins.target_background = scene.background;
            ins.text = render_group_text(scene, scene.background, false, tmpl);
            break;
        }
    }
    return ins;
}

const std::vector<std::string>& appearance_lexicon() {
    static const std::vector<std::string> words = {
        // colors
        "red", "orange", "yellow", "green", "cyan", "blue", "purple", "violet", "magenta", "pink", "brown",
        "beige", "gray", "grey", "black", "white", "golden", "silver", "crimson", "teal", "maroon",
        // brightness / appearance
        "dark", "bright", "light", "pale", "colorful", "shiny", "dim",
        // sizes
        "big", "small", "large", "tiny", "huge", "little", "giant", "wide", "narrow", "tall", "short",
        "thick", "thin",
    };
    return words;
}

std::optional<std::string> scan_for_lexicon_hit(const std::string& text) {
    std::string lower(text.size(), '\0');
    std::transform(text.begin(), text.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
    auto is_word_char = [](char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; };
    for (const auto& word : appearance_lexicon()) {
        std::size_t pos = 0;
        while ((pos = lower.find(word, pos)) != std::string::npos) {
            const bool left_ok = pos == 0 || !is_word_char(lower[pos - 1]);
            const std::size_t end = pos + word.size();
            const bool right_ok = end >= lower.size() || !is_word_char(lower[end]);
            if (left_ok && right_ok) return word;
            ++pos;
        }
    }
    return std::nullopt;
}

nlohmann::json scene_to_json(const Scene& s) {
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& sub : s.subjects) {
        subjects.push_back({{"category", category_name(sub.category)},
                            {"color", {{"h", sub.color.h}, {"s", sub.color.s}, {"v", sub.color.v}}},
                            {"size", sub.size},
                            {"center", {sub.center_row, sub.center_col}},
                            {"attribute", attribute_name(sub.attribute)},
                            {"pose_deg", sub.pose_deg}});
    }
    return {{"background", background_name(s.background)},
            {"resolution", {s.height, s.width}},
            {"subjects", subjects}};
}

Scene scene_from_json(const nlohmann::json& j) {
    Scene s;
    s.background = background_by_name(j.at("background").get<std::string>());
    s.height = j.at("resolution").at(0).get<std::size_t>();
    s.width = j.at("resolution").at(1).get<std::size_t>();
    for (const auto& js : j.at("subjects")) {
        SubjectSpec sub;
        sub.category = category_by_name(js.at("category").get<std::string>());
        sub.color.h = js.at("color").at("h").get<double>();
        sub.color.s = js.at("color").at("s").get<double>();
        sub.color.v = js.at("color").at("v").get<double>();
        sub.size = js.at("size").get<int>();
        sub.center_row = js.at("center").at(0).get<int>();
        sub.center_col = js.at("center").at(1).get<int>();
        sub.attribute = attribute_by_name(js.at("attribute").get<std::string>());
        sub.pose_deg = js.at("pose_deg").get<int>();
        s.subjects.push_back(sub);
    }
    return s;
}

nlohmann::json instruction_to_json(const Instruction& ins) {
    nlohmann::json subjects = nlohmann::json::array();
    for (const auto& s : ins.subjects) {
        nlohmann::json js = {{"category", category_name(s.category)}};
        if (s.attribute) js["attribute"] = attribute_name(*s.attribute);
        if (s.pose_deg) js["pose"] = pose_alias(*s.pose_deg);
        subjects.push_back(js);
    }
    nlohmann::json relations = nlohmann::json::array();
    for (const auto& r : ins.relations)
        relations.push_back({{"a", r.subject_a}, {"b", r.subject_b}, {"rel", relation_name(r.rel)}});
    nlohmann::json j = {{"task", task_kind_name(ins.kind)},
                        {"subjects", subjects},
                        {"relations", relations},
                        {"text", ins.text}};
    if (ins.target_background) j["target_background"] = background_name(*ins.target_background);
    return j;
}

Instruction instruction_from_json(const nlohmann::json& j) {
    Instruction ins;
    ins.kind = task_kind_by_name(j.at("task").get<std::string>());
    if (j.contains("target_background"))
        ins.target_background = background_by_name(j.at("target_background").get<std::string>());
    for (const auto& js : j.at("subjects")) {
        SubjectConstraint s;
        s.category = category_by_name(js.at("category").get<std::string>());
        if (js.contains("attribute")) s.attribute = attribute_by_name(js.at("attribute").get<std::string>());
        if (js.contains("pose")) s.pose_deg = pose_by_alias(js.at("pose").get<std::string>());
        ins.subjects.push_back(s);
    }
    for (const auto& jr : j.at("relations")) {
        RelationConstraint r;
        r.subject_a = jr.at("a").get<int>();
        r.subject_b = jr.at("b").get<int>();
        r.rel = relation_by_name(jr.at("rel").get<std::string>());
        ins.relations.push_back(r);
    }
    ins.text = j.at("text").get<std::string>();
    return ins;
}

}  // namespace psrlab
