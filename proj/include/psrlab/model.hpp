#ifndef PSRLAB_MODEL_HPP_
#define PSRLAB_MODEL_HPP_

#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "psrlab/optim.hpp"
#include "psrlab/raster.hpp"
#include "psrlab/scene.hpp"
#include "psrlab/tape.hpp"

namespace psrlab {

// How reference-image tokens are offset relative to the noise latent's grid.
//   kFrame: only the virtual frame index changes, (i, h, w).
//   kHw:    rows and cols both offset; each reference starts at the previous
//           reference's terminal position (the first one shares the latent grid).
//   kW:     column offsets only.
//   kH:     row offsets only.
enum class EncodingVariant { kFrame, kHw, kW, kH };

const std::string& encoding_variant_name(EncodingVariant v);
EncodingVariant encoding_variant_by_name(const std::string& name);

struct TokenPosition {
    int frame = 0;
    int row = 0;
    int col = 0;
    bool operator==(const TokenPosition&) const = default;
};

struct ModelConfig {
    int patch = 4;
    int d_model = 128;
    int heads = 4;
    int layers = 4;
    int n_max_refs = 4;
    EncodingVariant encoding = EncodingVariant::kFrame;
    int time_dim = 32;
    std::size_t raster_h = 32;
    std::size_t raster_w = 32;
    std::size_t raster_c = 3;
    double rope_theta = 100.0;
    double init_std = 0.05;

    int head_dim() const { return d_model / heads; }
    int patch_dim() const { return patch * patch * static_cast<int>(raster_c); }
    int grid_h() const { return static_cast<int>(raster_h) / patch; }
    int grid_w() const { return static_cast<int>(raster_w) / patch; }
    int tokens_per_image() const { return grid_h() * grid_w(); }
    int state_dim() const { return tokens_per_image() * patch_dim(); }
    int text_frame() const { return n_max_refs + 1; }

    void validate() const;
};

nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);
void save_model_config(const std::string& path, const ModelConfig& cfg);
ModelConfig load_model_config(const std::string& path);

// Instruction tokens: one task/background token, one relation token, and one
// slot token per possible reference.
constexpr int kInstrFixedTokens = 2;

// ---------------------------------------------------------------------------
// Patch space
// ---------------------------------------------------------------------------

// Rasters map to patch tokens with values centered to [-1,1]; this is the
// model's state space ("z" space). unpatchify inverts; the clamp to [0,1]
// happens only at the output boundary.
Tensor patchify(const Raster& r, int patch);
Raster unpatchify(const Tensor& tokens, const ModelConfig& cfg, bool clamp01);

// Flatten helpers between [tokens, patch_dim] and a flat state vector.
std::vector<double> tokens_to_state(const Tensor& tokens);
Tensor state_to_tokens(const std::vector<double>& state, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

struct InstructionIds {
    std::size_t task = 0;
    std::size_t background = 0;   // kNumBackgrounds = none
    std::size_t relation = 0;     // 4 = none
    std::size_t rel_cat_a = 0;    // kNumCategories = none
    std::size_t rel_cat_b = 0;
    std::vector<std::size_t> slot_category;   // n_max_refs entries, kNumCategories = none
    std::vector<std::size_t> slot_attribute;  // Attribute enum; kNone for unset
    std::vector<std::size_t> slot_pose;       // 0..3 pose index, 4 = none
};

InstructionIds instruction_ids(const Instruction& ins, const ModelConfig& cfg);

struct TokenLayout {
    Tensor noise_patches;              // [tokens_per_image, patch_dim]
    std::vector<Tensor> ref_patches;   // per reference
    InstructionIds instr;
    std::vector<TokenPosition> positions;  // noise tokens, then refs, then instruction tokens
    std::size_t noise_tokens = 0;
    std::size_t total_tokens = 0;
};

TokenLayout tokenize(const Tensor& noise_patch_tokens, const std::vector<Raster>& refs,
                     const Instruction& instruction, const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

// Rotary phases for one token: head_dim/2 angles laid out as
// [frame block | row block | col block] with the frame axis taking a quarter
// of the head dim and each spatial axis three eighths.
std::vector<double> positional_encode(const TokenPosition& pos, int head_dim, double theta);

// ---------------------------------------------------------------------------
// Velocity field
// ---------------------------------------------------------------------------

ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed);

// Builds the forward graph and returns the node holding the velocity over
// the noise tokens ([tokens_per_image, patch_dim]).
int build_velocity_graph(Tape& tape, const ParamMap& params, const ModelConfig& cfg, const TokenLayout& layout,
                         double t);

// Plain forward pass (no gradients kept by the caller).
Tensor velocity_forward(const ParamMap& params, const ModelConfig& cfg, const TokenLayout& layout, double t);

}  // namespace psrlab

#endif  // PSRLAB_MODEL_HPP_
