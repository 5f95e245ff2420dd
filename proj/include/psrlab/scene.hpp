#ifndef PSRLAB_SCENE_HPP_
#define PSRLAB_SCENE_HPP_

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "psrlab/raster.hpp"
#include "psrlab/rng.hpp"

namespace psrlab {

// ---------------------------------------------------------------------------
// Category / background pools
// ---------------------------------------------------------------------------

constexpr int kNumCategories = 16;
constexpr int kNumBackgrounds = 8;

// Hue circle is split into 16 reserved bands, one per category.
constexpr double kHueBandWidth = 1.0 / kNumCategories;

enum class Shape { kDisc, kSquare, kTriangle, kRing, kCross, kDiamond, kUBar, kStar };

const std::string& category_name(int id);
int category_by_name(const std::string& name);
double category_band_center(int id);
double category_base_saturation(int id);
Shape category_shape(int id);

const std::string& background_name(int id);
int background_by_name(const std::string& name);
Hsv background_tone(int id);

enum class Attribute { kNone, kHatNotch, kCrownSpikes, kScarfBand, kCollarRing };
constexpr int kNumAttributeKinds = 4;  // excluding kNone

const std::string& attribute_name(Attribute a);         // identifier, e.g. "hat-notch"
const std::string& attribute_display_name(Attribute a); // instruction text, e.g. "pointed hat"
Attribute attribute_by_name(const std::string& name);

// Poses quantize "action" to four compass directions with named aliases.
constexpr std::array<int, 4> kPoseAngles = {0, 90, 180, 270};
const std::string& pose_alias(int angle);  // sit / run / jump / sleep
int pose_by_alias(const std::string& alias);

// ---------------------------------------------------------------------------
// Scene model
// ---------------------------------------------------------------------------

struct SubjectSpec {
    int category = 0;
    Hsv color;           // hue inside the category band; value is body brightness
    int size = 3;        // radius in pixels; the shape fills center +/- size
    int center_row = 0;
    int center_col = 0;
    Attribute attribute = Attribute::kNone;
    int pose_deg = 0;    // one of kPoseAngles
};

struct Scene {
    int background = 0;
    std::vector<SubjectSpec> subjects;
    std::size_t height = 32;
    std::size_t width = 32;
};

// Brightness of the in-shape pose wedge relative to the body; the wedge is
// the visible "action" marker and shares the subject hue.
constexpr double kBodyValue = 0.95;
constexpr double kWedgeValue = 0.55;

// Subjects keep their hue within half of the detector tolerance of the band
// center so clean renders score 1.0 in the detector; reference jitter of the
// same width stays within the full tolerance.
constexpr double kHueSampleJitter = kHueBandWidth / 6.0;

struct SceneSampleOptions {
    int retry_budget = 1000;
    double attribute_probability = 0.5;  // per subject, chance of carrying one
};

// Procedural stand-in for T2I generation: rejection-samples a valid scene.
Scene sample_scene(std::uint64_t seed, int n_subjects, const std::vector<int>& category_pool,
                   std::size_t height = 32, std::size_t width = 32, const SceneSampleOptions& opts = {});

Raster render(const Scene& scene);

// Renderer with per-subject shape masks (hue-carrying pixels) exposed for
// oracle tests and the semantic checks' calibration.
struct RenderDetail {
    Raster raster;
    std::vector<std::vector<std::uint8_t>> subject_masks;  // H*W booleans per subject
};
RenderDetail render_with_masks(const Scene& scene);

struct BBox {
    int row_min = 0, col_min = 0, row_max = 0, col_max = 0;
    int area() const { return (row_max - row_min + 1) * (col_max - col_min + 1); }
};
BBox analytic_bbox(const SubjectSpec& s);
double bbox_iou(const BBox& a, const BBox& b);

// ---------------------------------------------------------------------------
// Instructions
// ---------------------------------------------------------------------------

enum class TaskKind { kAttribute, kBackground, kAction, kPosition, kComplex, kThree, kFour };

const std::string& task_kind_name(TaskKind k);
TaskKind task_kind_by_name(const std::string& name);

enum class Relation { kLeftOf, kRightOf, kAbove, kBelow };
const std::string& relation_name(Relation r);
Relation relation_by_name(const std::string& name);

struct SubjectConstraint {
    int category = 0;
    std::optional<Attribute> attribute;
    std::optional<int> pose_deg;
};

struct RelationConstraint {
    int subject_a = 0;  // index into the instruction's subject list
    int subject_b = 1;
    Relation rel = Relation::kLeftOf;
};

// Structured fields fully determine the semantics; the text is a rendered
// template that refers to subjects only by category name or pronoun.
struct Instruction {
    TaskKind kind = TaskKind::kBackground;
    std::optional<int> target_background;
    std::vector<SubjectConstraint> subjects;
    std::vector<RelationConstraint> relations;
    std::string text;
};

// Minimum axis separation (pixels) for a relation to be asserted or scored.
constexpr int kRelationMarginPx = 2;

// Builds an instruction for the scene. Attribute and action targets are
// sampled fresh (the desired outcome, possibly differing from the scene);
// background and position describe the scene as it stands.
Instruction make_instruction(const Scene& scene, TaskKind kind, std::uint64_t seed);

// Words that must never appear in instruction text (appearance leakage).
const std::vector<std::string>& appearance_lexicon();

// Case-insensitive whole-word scan; returns the offending word if any.
std::optional<std::string> scan_for_lexicon_hit(const std::string& text);

// JSON schemas (field names are part of the documented interface).
nlohmann::json scene_to_json(const Scene& s);
Scene scene_from_json(const nlohmann::json& j);
nlohmann::json instruction_to_json(const Instruction& ins);
Instruction instruction_from_json(const nlohmann::json& j);

}  // namespace psrlab

#endif  // PSRLAB_SCENE_HPP_
