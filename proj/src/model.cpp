#include "psrlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "psrlab/common.hpp"
#include "psrlab/rng.hpp"
#include "psrlab/runio.hpp"

namespace psrlab {

namespace {

const std::array<std::string, 4> kVariantNames = {"frame", "hw", "w", "h"};

std::size_t pose_index(int pose_deg) {
    for (std::size_t i = 0; i < kPoseAngles.size(); ++i)
        if (kPoseAngles[i] == pose_deg) return i;
    throw DataError("model: pose must be one of 0/90/180/270");
}

}  // namespace

const std::string& encoding_variant_name(EncodingVariant v) {
    return kVariantNames[static_cast<std::size_t>(v)];
}

EncodingVariant encoding_variant_by_name(const std::string& name) {
    for (std::size_t i = 0; i < kVariantNames.size(); ++i)
        if (kVariantNames[i] == name) return static_cast<EncodingVariant>(i);
    throw ConfigError("unknown encoding variant: " + name + " (expected frame|hw|w|h)");
}

void ModelConfig::validate() const {
    if (d_model <= 0 || heads <= 0 || layers <= 0 || patch <= 0 || n_max_refs <= 0 || time_dim <= 0)
        throw ConfigError("model config: dimensions must be positive");
    if (d_model % (2 * heads) != 0) throw ConfigError("model config: d_model must be divisible by 2*heads");
    if (head_dim() % 16 != 0)
        throw ConfigError("model config: head dim " + std::to_string(head_dim()) +
                          " must be a multiple of 16 for the 3-axis rotary split");
    if (raster_h % static_cast<std::size_t>(patch) != 0 || raster_w % static_cast<std::size_t>(patch) != 0)
        throw ConfigError("model config: raster not divisible by patch size");
    if (time_dim % 2 != 0) throw ConfigError("model config: time_dim must be even");
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
    return {{"patch", cfg.patch},
            {"d_model", cfg.d_model},
            {"heads", cfg.heads},
            {"layers", cfg.layers},
            {"n_max_refs", cfg.n_max_refs},
            {"encoding", encoding_variant_name(cfg.encoding)},
            {"time_dim", cfg.time_dim},
            {"raster", {cfg.raster_h, cfg.raster_w, cfg.raster_c}},
            {"rope_theta", cfg.rope_theta},
            {"init_std", cfg.init_std}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    cfg.patch = j.at("patch").get<int>();
    cfg.d_model = j.at("d_model").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.layers = j.at("layers").get<int>();
    cfg.n_max_refs = j.at("n_max_refs").get<int>();
    cfg.encoding = encoding_variant_by_name(j.at("encoding").get<std::string>());
    cfg.time_dim = j.at("time_dim").get<int>();
    cfg.raster_h = j.at("raster").at(0).get<std::size_t>();
    cfg.raster_w = j.at("raster").at(1).get<std::size_t>();
    cfg.raster_c = j.at("raster").at(2).get<std::size_t>();
    cfg.rope_theta = j.at("rope_theta").get<double>();
    cfg.init_std = j.at("init_std").get<double>();
    cfg.validate();
    return cfg;
}

void save_model_config(const std::string& path, const ModelConfig& cfg) {
    write_text_atomic(path, model_config_to_json(cfg).dump(2) + "\n");
}

ModelConfig load_model_config(const std::string& path) {
    return model_config_from_json(nlohmann::json::parse(read_text_file(path)));
}

Tensor patchify(const Raster& r, int patch) {
    if (r.height % static_cast<std::size_t>(patch) != 0 || r.width % static_cast<std::size_t>(patch) != 0)
        throw DataError("patchify: raster not divisible by patch size");
    const std::size_t gh = r.height / static_cast<std::size_t>(patch);
    const std::size_t gw = r.width / static_cast<std::size_t>(patch);
    const std::size_t pd = static_cast<std::size_t>(patch) * static_cast<std::size_t>(patch) * r.channels;
    Tensor out({gh * gw, pd});
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            double* dst = out.data.data() + (py * gw + px) * pd;
            std::size_t k = 0;
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (std::size_t c = 0; c < r.channels; ++c)
                        dst[k++] = 2.0 * r.at(py * static_cast<std::size_t>(patch) + static_cast<std::size_t>(dy),
                                              px * static_cast<std::size_t>(patch) + static_cast<std::size_t>(dx),
                                              c) -
                                   1.0;
        }
    return out;
}

Raster unpatchify(const Tensor& tokens, const ModelConfig& cfg, bool clamp01) {
    const std::size_t gh = static_cast<std::size_t>(cfg.grid_h());
    const std::size_t gw = static_cast<std::size_t>(cfg.grid_w());
    const std::size_t pd = static_cast<std::size_t>(cfg.patch_dim());
    if (tokens.rank() != 2 || tokens.shape[0] != gh * gw || tokens.shape[1] != pd)
        throw DataError("unpatchify: token shape mismatch");
    Raster r(cfg.raster_h, cfg.raster_w, cfg.raster_c);
    for (std::size_t py = 0; py < gh; ++py)
        for (std::size_t px = 0; px < gw; ++px) {
            const double* src = tokens.data.data() + (py * gw + px) * pd;
            std::size_t k = 0;
            for (int dy = 0; dy < cfg.patch; ++dy)
                for (int dx = 0; dx < cfg.patch; ++dx)
                    for (std::size_t c = 0; c < r.channels; ++c) {
                        double v = (src[k++] + 1.0) / 2.0;
                        if (clamp01) v = std::clamp(v, 0.0, 1.0);
                        r.at(py * static_cast<std::size_t>(cfg.patch) + static_cast<std::size_t>(dy),
                             px * static_cast<std::size_t>(cfg.patch) + static_cast<std::size_t>(dx), c) = v;
                    }
        }
    return r;
}

std::vector<double> tokens_to_state(const Tensor& tokens) { return tokens.data; }

Tensor state_to_tokens(const std::vector<double>& state, const ModelConfig& cfg) {
    const std::size_t n = static_cast<std::size_t>(cfg.tokens_per_image());
    const std::size_t pd = static_cast<std::size_t>(cfg.patch_dim());
    if (state.size() != n * pd) throw DataError("state_to_tokens: state size mismatch");
    return Tensor({n, pd}, state);
}

InstructionIds instruction_ids(const Instruction& ins, const ModelConfig& cfg) {
    InstructionIds ids;
    ids.task = static_cast<std::size_t>(ins.kind);
    ids.background = ins.target_background ? static_cast<std::size_t>(*ins.target_background)
                                           : static_cast<std::size_t>(kNumBackgrounds);
    if (!ins.relations.empty()) {
        const auto& rel = ins.relations.front();
        ids.relation = static_cast<std::size_t>(rel.rel);
        ids.rel_cat_a = static_cast<std::size_t>(ins.subjects[static_cast<std::size_t>(rel.subject_a)].category);
        ids.rel_cat_b = static_cast<std::size_t>(ins.subjects[static_cast<std::size_t>(rel.subject_b)].category);
    } else {
        ids.relation = 4;
        ids.rel_cat_a = static_cast<std::size_t>(kNumCategories);
        ids.rel_cat_b = static_cast<std::size_t>(kNumCategories);
    }
    const auto slots = static_cast<std::size_t>(cfg.n_max_refs);
    ids.slot_category.assign(slots, static_cast<std::size_t>(kNumCategories));
    ids.slot_attribute.assign(slots, static_cast<std::size_t>(Attribute::kNone));
    ids.slot_pose.assign(slots, 4);
    for (std::size_t i = 0; i < ins.subjects.size() && i < slots; ++i) {
        ids.slot_category[i] = static_cast<std::size_t>(ins.subjects[i].category);
        if (ins.subjects[i].attribute) ids.slot_attribute[i] = static_cast<std::size_t>(*ins.subjects[i].attribute);
        if (ins.subjects[i].pose_deg) ids.slot_pose[i] = pose_index(*ins.subjects[i].pose_deg);
    }
    return ids;
}

TokenLayout tokenize(const Tensor& noise_patch_tokens, const std::vector<Raster>& refs,
                     const Instruction& instruction, const ModelConfig& cfg) {
    if (static_cast<int>(refs.size()) > cfg.n_max_refs)
        throw ConfigError("tokenize: " + std::to_string(refs.size()) + " references exceed n_max_refs=" +
                          std::to_string(cfg.n_max_refs));
    const std::size_t n_tokens = static_cast<std::size_t>(cfg.tokens_per_image());
    if (noise_patch_tokens.rank() != 2 || noise_patch_tokens.shape[0] != n_tokens ||
        noise_patch_tokens.shape[1] != static_cast<std::size_t>(cfg.patch_dim()))
        throw DataError("tokenize: noise token shape mismatch");

    TokenLayout layout;
    layout.noise_patches = noise_patch_tokens;
    layout.noise_tokens = n_tokens;

    const int gh = cfg.grid_h();
    const int gw = cfg.grid_w();
    for (int r = 0; r < gh; ++r)
        for (int c = 0; c < gw; ++c) layout.positions.push_back(TokenPosition{0, r, c});

    // Reference tokens. Under the hw/w/h variants each reference's spatial
    // index starts at the terminal position of the previous reference; the
    // first reference shares the latent grid's positions.
    int row_off = 0;
    int col_off = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        layout.ref_patches.push_back(patchify(refs[i], cfg.patch));
        const int frame = static_cast<int>(i) + 1;
        for (int r = 0; r < gh; ++r)
            for (int c = 0; c < gw; ++c) {
                switch (cfg.encoding) {
                    case EncodingVariant::kFrame:
                        layout.positions.push_back(TokenPosition{frame, r, c});
                        break;
                    case EncodingVariant::kHw:
                        layout.positions.push_back(TokenPosition{0, r + row_off, c + col_off});
                        break;
                    case EncodingVariant::kW:
                        layout.positions.push_back(TokenPosition{0, r, c + col_off});
                        break;
                    case EncodingVariant::kH:
                        layout.positions.push_back(TokenPosition{0, r + row_off, c});
                        break;
                }
            }
        row_off += gh;
        col_off += gw;
    }

    layout.instr = instruction_ids(instruction, cfg);
    const int instr_tokens = kInstrFixedTokens + cfg.n_max_refs;
    for (int k = 0; k < instr_tokens; ++k)
        layout.positions.push_back(TokenPosition{cfg.text_frame(), 0, k});

    layout.total_tokens = layout.positions.size();
    return layout;
}

std::vector<double> positional_encode(const TokenPosition& pos, int head_dim, double theta) {
    if (head_dim % 16 != 0) throw ConfigError("positional_encode: head_dim must be a multiple of 16");
    const int frame_pairs = head_dim / 8;
    const int row_pairs = 3 * head_dim / 16;
    const int col_pairs = row_pairs;
    std::vector<double> phases;
    phases.reserve(static_cast<std::size_t>(head_dim / 2));
    auto block = [&](int value, int pairs) {
        for (int j = 0; j < pairs; ++j) {
            const double omega = std::pow(theta, -static_cast<double>(j) / static_cast<double>(pairs));
            phases.push_back(static_cast<double>(value) * omega);
        }
    };
    block(pos.frame, frame_pairs);
    block(pos.row, row_pairs);
    block(pos.col, col_pairs);
    return phases;
}

namespace {

// cos/sin matrices [S, d_model] plus the pair-rotation matrix used to apply
// the rotary transform with elementwise ops and one constant matmul.
struct RopeConstants {
    Tensor cos_mat;
    Tensor sin_mat;
    Tensor rot;  // (x @ rot) maps pairs (x0,x1) -> (-x1, x0)
};

RopeConstants rope_constants(const std::vector<TokenPosition>& positions, const ModelConfig& cfg) {
    const std::size_t s = positions.size();
    const std::size_t d = static_cast<std::size_t>(cfg.d_model);
    const int hd = cfg.head_dim();
    RopeConstants out;
    out.cos_mat = Tensor({s, d});
    out.sin_mat = Tensor({s, d});
    for (std::size_t i = 0; i < s; ++i) {
        const std::vector<double> phases = positional_encode(positions[i], hd, cfg.rope_theta);
        for (int h = 0; h < cfg.heads; ++h)
            for (int m = 0; m < hd / 2; ++m) {
                const double c = std::cos(phases[static_cast<std::size_t>(m)]);
                const double sn = std::sin(phases[static_cast<std::size_t>(m)]);
                const std::size_t base = i * d + static_cast<std::size_t>(h * hd + 2 * m);
                out.cos_mat.data[base] = c;
                out.cos_mat.data[base + 1] = c;
                out.sin_mat.data[base] = sn;
                out.sin_mat.data[base + 1] = sn;
            }
    }
    out.rot = Tensor({d, d});
    for (std::size_t m = 0; m < d / 2; ++m) {
        out.rot.data[(2 * m + 1) * d + 2 * m] = -1.0;
        out.rot.data[2 * m * d + (2 * m + 1)] = 1.0;
    }
    return out;
}

Tensor time_features(double t, int time_dim) {
    Tensor out({1, static_cast<std::size_t>(time_dim)});
    const int half = time_dim / 2;
    for (int k = 0; k < half; ++k) {
        const double omega =
            std::pow(1000.0, half > 1 ? static_cast<double>(k) / static_cast<double>(half - 1) : 0.0);
        out.data[static_cast<std::size_t>(2 * k)] = std::sin(t * omega);
        out.data[static_cast<std::size_t>(2 * k + 1)] = std::cos(t * omega);
    }
    return out;
}

}  // namespace

ParamMap init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(mix64(seed ^ 0x6d6f64656c696e69ULL));
    ParamMap p;
    const auto d = static_cast<std::size_t>(cfg.d_model);
    const auto pd = static_cast<std::size_t>(cfg.patch_dim());
    auto randn = [&](std::vector<std::size_t> shape) {
        Tensor t(std::move(shape));
        for (auto& v : t.data) v = rng.normal() * cfg.init_std;
        return t;
    };
    auto zeros = [&](std::vector<std::size_t> shape) { return Tensor(std::move(shape)); };
    auto ones = [&](std::vector<std::size_t> shape) { return Tensor::full(std::move(shape), 1.0); };

    p.emplace("patch_proj.w", randn({pd, d}));
    p.emplace("patch_proj.b", zeros({d}));
    p.emplace("time_mlp.w", randn({static_cast<std::size_t>(cfg.time_dim), d}));
    p.emplace("time_mlp.b", zeros({d}));
    p.emplace("embed.ref_marker", randn({d}));
    p.emplace("embed.task", randn({7, d}));
    p.emplace("embed.background", randn({static_cast<std::size_t>(kNumBackgrounds) + 1, d}));
    p.emplace("embed.relation", randn({5, d}));
    p.emplace("embed.rel_cat_a", randn({static_cast<std::size_t>(kNumCategories) + 1, d}));
    p.emplace("embed.rel_cat_b", randn({static_cast<std::size_t>(kNumCategories) + 1, d}));
    p.emplace("embed.subj_cat", randn({static_cast<std::size_t>(kNumCategories) + 1, d}));
    p.emplace("embed.subj_attr", randn({5, d}));
    p.emplace("embed.subj_pose", randn({5, d}));
    p.emplace("embed.slot", randn({static_cast<std::size_t>(cfg.n_max_refs), d}));

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        p.emplace(pre + "ln1.gain", ones({d}));
        p.emplace(pre + "ln1.bias", zeros({d}));
        p.emplace(pre + "attn.wq", randn({d, d}));
        p.emplace(pre + "attn.bq", zeros({d}));
        p.emplace(pre + "attn.wk", randn({d, d}));
        p.emplace(pre + "attn.bk", zeros({d}));
        p.emplace(pre + "attn.wv", randn({d, d}));
        p.emplace(pre + "attn.bv", zeros({d}));
        p.emplace(pre + "attn.wo", randn({d, d}));
        p.emplace(pre + "attn.bo", zeros({d}));
        p.emplace(pre + "ln2.gain", ones({d}));
        p.emplace(pre + "ln2.bias", zeros({d}));
        p.emplace(pre + "mlp.w1", randn({d, 4 * d}));
        p.emplace(pre + "mlp.b1", zeros({4 * d}));
        p.emplace(pre + "mlp.w2", randn({4 * d, d}));
        p.emplace(pre + "mlp.b2", zeros({d}));
    }
    p.emplace("ln_f.gain", ones({d}));
    p.emplace("ln_f.bias", zeros({d}));
    // Zero-initialized output head: the velocity field starts at v == 0.
    p.emplace("head.w", zeros({d, pd}));
    p.emplace("head.b", zeros({pd}));
    return p;
}

int build_velocity_graph(Tape& tape, const ParamMap& params, const ModelConfig& cfg, const TokenLayout& layout,
                         double t) {
    if (t < 0.0 || t > 1.0) throw ConfigError("velocity forward: t must lie in [0,1]");
    auto param = [&](const std::string& name) {
        const auto it = params.find(name);
        if (it == params.end()) throw DataError("velocity forward: missing parameter " + name);
        return tape.param(name, it->second);
    };

    int stage = -1;  // -1: embedding, 0..layers-1: blocks, layers: head
    try {
        const int pw = param("patch_proj.w");
        const int pb = param("patch_proj.b");

        // Noise tokens carry the time embedding.
        int x = tape.bias_add(tape.matmul(tape.constant(layout.noise_patches), pw), pb);
        const int tfeat = tape.constant(time_features(t, cfg.time_dim));
        const int temb =
            tape.reshape(tape.bias_add(tape.matmul(tfeat, param("time_mlp.w")), param("time_mlp.b")),
                         {static_cast<std::size_t>(cfg.d_model)});
        x = tape.bias_add(x, temb);

        const int marker = param("embed.ref_marker");
        for (const auto& ref : layout.ref_patches) {
            int xr = tape.bias_add(tape.matmul(tape.constant(ref), pw), pb);
            xr = tape.bias_add(xr, marker);
            x = tape.concat(x, xr, 0);
        }

        // Instruction tokens from structured-field embeddings.
        const auto& ids = layout.instr;
        int t0 = tape.add(tape.gather_rows(param("embed.task"), {ids.task}),
                          tape.gather_rows(param("embed.background"), {ids.background}));
        int t1 = tape.add(tape.gather_rows(param("embed.relation"), {ids.relation}),
                          tape.add(tape.gather_rows(param("embed.rel_cat_a"), {ids.rel_cat_a}),
                                   tape.gather_rows(param("embed.rel_cat_b"), {ids.rel_cat_b})));
        std::vector<std::size_t> slot_ids(static_cast<std::size_t>(cfg.n_max_refs));
        for (std::size_t i = 0; i < slot_ids.size(); ++i) slot_ids[i] = i;
        int slots = tape.add(tape.gather_rows(param("embed.subj_cat"), ids.slot_category),
                             tape.add(tape.gather_rows(param("embed.subj_attr"), ids.slot_attribute),
                                      tape.add(tape.gather_rows(param("embed.subj_pose"), ids.slot_pose),
                                               tape.gather_rows(param("embed.slot"), slot_ids))));
        x = tape.concat(x, tape.concat(tape.concat(t0, t1, 0), slots, 0), 0);

        const RopeConstants rope = rope_constants(layout.positions, cfg);
        const int cos_node = tape.constant(rope.cos_mat);
        const int sin_node = tape.constant(rope.sin_mat);
        const int rot_node = tape.constant(rope.rot);
        auto apply_rope = [&](int q) {
            return tape.add(tape.mul(q, cos_node), tape.mul(tape.matmul(q, rot_node), sin_node));
        };

        const std::size_t s_total = layout.total_tokens;
        const auto d = static_cast<std::size_t>(cfg.d_model);
        const auto nh = static_cast<std::size_t>(cfg.heads);
        const auto hd = static_cast<std::size_t>(cfg.head_dim());
        auto split_heads = [&](int m) {
            return tape.transpose(tape.reshape(m, {s_total, nh, hd}), 0, 1);  // [H,S,hd]
        };

        for (int l = 0; l < cfg.layers; ++l) {
            stage = l;
            const std::string pre = "layer" + std::to_string(l) + ".";
            const int ln1 = tape.layer_norm(x, param(pre + "ln1.gain"), param(pre + "ln1.bias"));
            int q = tape.bias_add(tape.matmul(ln1, param(pre + "attn.wq")), param(pre + "attn.bq"));
            int k = tape.bias_add(tape.matmul(ln1, param(pre + "attn.wk")), param(pre + "attn.bk"));
            const int v = tape.bias_add(tape.matmul(ln1, param(pre + "attn.wv")), param(pre + "attn.bv"));
            q = apply_rope(q);
            k = apply_rope(k);
            const int q3 = split_heads(q);
            const int k3t = tape.transpose(split_heads(k), 1, 2);  // [H,hd,S]
            const int logits = tape.scalar_mul(tape.matmul(q3, k3t), 1.0 / std::sqrt(static_cast<double>(hd)));
            const int att = tape.softmax_last(logits);
            const int ctx = tape.matmul(att, split_heads(v));                       // [H,S,hd]
            const int merged = tape.reshape(tape.transpose(ctx, 0, 1), {s_total, d});  // [S,d]
            const int att_out =
                tape.bias_add(tape.matmul(merged, param(pre + "attn.wo")), param(pre + "attn.bo"));
            x = tape.add(x, att_out);

            const int ln2 = tape.layer_norm(x, param(pre + "ln2.gain"), param(pre + "ln2.bias"));
            const int h1 = tape.gelu(tape.bias_add(tape.matmul(ln2, param(pre + "mlp.w1")), param(pre + "mlp.b1")));
            const int h2 = tape.bias_add(tape.matmul(h1, param(pre + "mlp.w2")), param(pre + "mlp.b2"));
            x = tape.add(x, h2);
        }

        stage = cfg.layers;
        const int xf = tape.layer_norm(x, param("ln_f.gain"), param("ln_f.bias"));
        const int noise_block = tape.slice(xf, 0, 0, layout.noise_tokens);
        return tape.bias_add(tape.matmul(noise_block, param("head.w")), param("head.b"));
    } catch (const NumericError& e) {
        const std::string where = stage < 0 ? "embedding" : (stage >= cfg.layers ? "head" : "layer " +
                                                             std::to_string(stage));
        throw NumericError("velocity forward: non-finite activation in " + where + ": " + e.what());
    }
}

Tensor velocity_forward(const ParamMap& params, const ModelConfig& cfg, const TokenLayout& layout, double t) {
    Tape tape;
    const int node = build_velocity_graph(tape, params, cfg, layout, t);
    return tape.value(node);
}

}  // namespace psrlab
