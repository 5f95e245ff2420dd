#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <nlohmann/json.hpp>

#include "psrlab/common.hpp"
#include "psrlab/datagen.hpp"
#include "psrlab/model.hpp"
#include "psrlab/rng.hpp"
#include "test_support.hpp"

using namespace psrlab;

namespace {

ModelConfig tiny_config(EncodingVariant variant = EncodingVariant::kFrame) {
    ModelConfig cfg;
    cfg.patch = 8;
    cfg.d_model = 32;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.n_max_refs = 4;
    cfg.time_dim = 8;
    cfg.encoding = variant;
    cfg.validate();
    return cfg;
}

PairedSample sample_with_instruction(std::uint64_t seed, int n = 2) {
    PairedSample s = stage1_generate(seed, n);
    return stage2_instruction(std::move(s), TaskKind::kBackground, seed + 1);
}

Tensor noise_tokens(const ModelConfig& cfg, Rng& rng) {
    Tensor t({static_cast<std::size_t>(cfg.tokens_per_image()), static_cast<std::size_t>(cfg.patch_dim())});
    for (auto& v : t.data) v = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("model config validation") {
    ModelConfig cfg = tiny_config();
    CHECK_NOTHROW(cfg.validate());
    cfg.d_model = 33;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.heads = 3;  // head_dim not a multiple of 16
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = tiny_config();
    cfg.patch = 5;  // 32 not divisible
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("config JSON round-trip reproduces identical forward outputs") {
    const ModelConfig cfg = tiny_config();
    const std::string path = (std::filesystem::temp_directory_path() / "psrlab_model_cfg.json").string();
    save_model_config(path, cfg);
    const ModelConfig cfg2 = load_model_config(path);
    CHECK(model_config_to_json(cfg).dump() == model_config_to_json(cfg2).dump());

    Rng rng(3);
    const ParamMap params = init_params(cfg, 5);
    const PairedSample s = sample_with_instruction(2);
    const Tensor z = noise_tokens(cfg, rng);
    const TokenLayout layout = tokenize(z, s.refs, s.instruction, cfg);
    const Tensor a = velocity_forward(params, cfg, layout, 0.3);
    const Tensor b = velocity_forward(params, cfg2, layout, 0.3);
    CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
    std::filesystem::remove(path);
}

TEST_CASE("patchify and unpatchify are inverse maps") {
    const ModelConfig cfg = tiny_config();
    const PairedSample s = sample_with_instruction(4);
    const Tensor tokens = patchify(s.target, cfg.patch);
    const Raster back = unpatchify(tokens, cfg, false);
    REQUIRE(back.data.size() == s.target.data.size());
    for (std::size_t i = 0; i < back.data.size(); ++i)
        CHECK(back.data[i] == doctest::Approx(s.target.data[i]).epsilon(1e-12));
}

TEST_CASE("tokenize: zero references leaves noise plus instruction tokens") {
    const ModelConfig cfg = tiny_config();
    Rng rng(1);
    const PairedSample s = sample_with_instruction(5);
    const TokenLayout layout = tokenize(noise_tokens(cfg, rng), {}, s.instruction, cfg);
    CHECK(layout.total_tokens ==
          static_cast<std::size_t>(cfg.tokens_per_image() + kInstrFixedTokens + cfg.n_max_refs));
    for (std::size_t i = 0; i < static_cast<std::size_t>(cfg.tokens_per_image()); ++i)
        CHECK(layout.positions[i].frame == 0);
    for (std::size_t i = static_cast<std::size_t>(cfg.tokens_per_image()); i < layout.total_tokens; ++i)
        CHECK(layout.positions[i].frame == cfg.text_frame());
}

TEST_CASE("tokenize: frame variant gives references identical grids distinguished only by frame") {
    const ModelConfig cfg = tiny_config(EncodingVariant::kFrame);
    Rng rng(2);
    const PairedSample s = sample_with_instruction(6);
    REQUIRE(s.refs.size() == 2);
    const TokenLayout layout = tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg);
    const std::size_t n = static_cast<std::size_t>(cfg.tokens_per_image());
    for (std::size_t i = 0; i < n; ++i) {
        const TokenPosition& noise = layout.positions[i];
        const TokenPosition& r1 = layout.positions[n + i];
        const TokenPosition& r2 = layout.positions[2 * n + i];
        CHECK(r1.frame == 1);
        CHECK(r2.frame == 2);
        CHECK(r1.row == noise.row);
        CHECK(r1.col == noise.col);
        CHECK(r2.row == r1.row);
        CHECK(r2.col == r1.col);
    }
}

TEST_CASE("tokenize: hw variant offsets each reference to the previous terminal position") {
    // 32x32 rasters with patch 4 -> 8-row grids; the second reference's rows
    // start at 8, mirroring the stacked-offset scheme.
    ModelConfig cfg = tiny_config(EncodingVariant::kHw);
    cfg.patch = 4;
    cfg.d_model = 32;
    cfg.validate();
    Rng rng(3);
    const PairedSample s = sample_with_instruction(7);
    const TokenLayout layout = tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg);
    const std::size_t n = static_cast<std::size_t>(cfg.tokens_per_image());
    CHECK(layout.positions[n].frame == 0);
    CHECK(layout.positions[n].row == 0);  // first reference shares the latent grid
    CHECK(layout.positions[n].col == 0);
    CHECK(layout.positions[2 * n].row == 8);  // second reference starts at ref-1's terminal row
    CHECK(layout.positions[2 * n].col == 8);

    cfg.encoding = EncodingVariant::kW;
    const TokenLayout lw = tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg);
    CHECK(lw.positions[2 * n].row == 0);
    CHECK(lw.positions[2 * n].col == 8);
    cfg.encoding = EncodingVariant::kH;
    const TokenLayout lh = tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg);
    CHECK(lh.positions[2 * n].row == 8);
    CHECK(lh.positions[2 * n].col == 0);
}

TEST_CASE("tokenize: swapping references swaps frames under the frame variant but moves spatial offsets under hw") {
    ModelConfig cfg = tiny_config(EncodingVariant::kFrame);
    Rng rng(4);
    const PairedSample s = sample_with_instruction(8);
    REQUIRE(s.refs.size() == 2);
    std::vector<Raster> swapped = {s.refs[1], s.refs[0]};
    const Tensor z = noise_tokens(cfg, rng);
    const TokenLayout a = tokenize(z, s.refs, s.instruction, cfg);
    const TokenLayout b = tokenize(z, swapped, s.instruction, cfg);
    // Positions are identical lists; only the token contents moved.
    for (std::size_t i = 0; i < a.positions.size(); ++i) CHECK(a.positions[i] == b.positions[i]);

    cfg.encoding = EncodingVariant::kHw;
    const TokenLayout c = tokenize(z, s.refs, s.instruction, cfg);
    // Under hw the first reference's tokens sit at offset 0 and the second at
    // the terminal offset, so swapping changes which content receives which
    // spatial offset: the content-to-position binding is asymmetric.
    const std::size_t n = static_cast<std::size_t>(cfg.tokens_per_image());
    CHECK(c.positions[n].row == 0);
    CHECK(c.positions[2 * n].row == static_cast<int>(cfg.grid_h()));
}

TEST_CASE("tokenize rejects more references than n_max_refs") {
    ModelConfig cfg = tiny_config();
    cfg.n_max_refs = 1;
    Rng rng(5);
    const PairedSample s = sample_with_instruction(9);
    CHECK_THROWS_AS(tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg), ConfigError);
}

TEST_CASE("positional encoding: origin gives identity rotation, equal positions equal phases") {
    const auto zero = positional_encode(TokenPosition{0, 0, 0}, 32, 100.0);
    for (double p : zero) CHECK(p == 0.0);
    const auto a = positional_encode(TokenPosition{2, 5, 7}, 32, 100.0);
    const auto b = positional_encode(TokenPosition{2, 5, 7}, 32, 100.0);
    CHECK(a == b);
    CHECK(a.size() == 16);
    CHECK_THROWS_AS(positional_encode(TokenPosition{0, 0, 0}, 24, 100.0), ConfigError);
}

TEST_CASE("rotary property: attention logits depend only on per-axis position differences") {
    // Rotate random q/k at positions p and p+shift; the dot product must be
    // invariant to a common shift on every axis.
    Rng rng(6);
    const int hd = 32;
    auto rotate = [&](const std::vector<double>& x, const TokenPosition& pos) {
        const auto phases = positional_encode(pos, hd, 100.0);
        std::vector<double> out(static_cast<std::size_t>(hd));
        for (int m = 0; m < hd / 2; ++m) {
            const double c = std::cos(phases[static_cast<std::size_t>(m)]);
            const double s = std::sin(phases[static_cast<std::size_t>(m)]);
            const double x0 = x[static_cast<std::size_t>(2 * m)];
            const double x1 = x[static_cast<std::size_t>(2 * m + 1)];
            out[static_cast<std::size_t>(2 * m)] = x0 * c - x1 * s;
            out[static_cast<std::size_t>(2 * m + 1)] = x0 * s + x1 * c;
        }
        return out;
    };
    auto dot = [](const std::vector<double>& a, const std::vector<double>& b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
        return acc;
    };
    for (int rep = 0; rep < 50; ++rep) {
        std::vector<double> q(static_cast<std::size_t>(hd)), k(static_cast<std::size_t>(hd));
        for (auto& v : q) v = rng.normal();
        for (auto& v : k) v = rng.normal();
        const TokenPosition pq{static_cast<int>(rng.uniform_int(0, 4)), static_cast<int>(rng.uniform_int(0, 7)),
                               static_cast<int>(rng.uniform_int(0, 7))};
        const TokenPosition pk{static_cast<int>(rng.uniform_int(0, 4)), static_cast<int>(rng.uniform_int(0, 7)),
                               static_cast<int>(rng.uniform_int(0, 7))};
        const TokenPosition shift{static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 5)),
                                  static_cast<int>(rng.uniform_int(0, 5))};
        const double base = dot(rotate(q, pq), rotate(k, pk));
        const TokenPosition pq2{pq.frame + shift.frame, pq.row + shift.row, pq.col + shift.col};
        const TokenPosition pk2{pk.frame + shift.frame, pk.row + shift.row, pk.col + shift.col};
        const double shifted = dot(rotate(q, pq2), rotate(k, pk2));
        CHECK(base == doctest::Approx(shifted).epsilon(1e-10));
    }
}

TEST_CASE("forward: output shape, zero-init head, determinism") {
    const ModelConfig cfg = tiny_config();
    const ParamMap params = init_params(cfg, 1);
    Rng rng(7);
    const PairedSample s = sample_with_instruction(10);
    const TokenLayout layout = tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg);
    const Tensor v = velocity_forward(params, cfg, layout, 0.5);
    CHECK(v.shape[0] == static_cast<std::size_t>(cfg.tokens_per_image()));
    CHECK(v.shape[1] == static_cast<std::size_t>(cfg.patch_dim()));
    for (double x : v.data) CHECK(x == 0.0);  // zero-initialized output head

    const Tensor v2 = velocity_forward(params, cfg, layout, 0.5);
    CHECK(std::memcmp(v.data.data(), v2.data.data(), v.data.size() * sizeof(double)) == 0);
    CHECK_THROWS_AS(velocity_forward(params, cfg, layout, 1.5), ConfigError);
}

TEST_CASE("forward: time embedding makes the velocity depend on t") {
    const ModelConfig cfg = tiny_config();
    ParamMap params = init_params(cfg, 2);
    // Break the zero head so the output is informative.
    Rng prng(8);
    for (auto& v : params.at("head.w").data) v = prng.normal() * 0.05;
    Rng rng(9);
    const PairedSample s = sample_with_instruction(11);
    const TokenLayout layout = tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg);
    const Tensor a = velocity_forward(params, cfg, layout, 0.1);
    const Tensor b = velocity_forward(params, cfg, layout, 0.9);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i) diff += std::fabs(a.data[i] - b.data[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("forward: gradient of mean output matches finite differences at rel tol 1e-4") {
    ModelConfig cfg = tiny_config();
    cfg.layers = 1;
    ParamMap params = init_params(cfg, 3);
    Rng prng(10);
    for (auto& v : params.at("head.w").data) v = prng.normal() * 0.05;
    Rng rng(11);
    const PairedSample s = sample_with_instruction(12);
    const TokenLayout layout = tokenize(noise_tokens(cfg, rng), s.refs, s.instruction, cfg);

    auto loss = [&](const ParamMap& p) {
        Tape tape;
        const int node = build_velocity_graph(tape, p, cfg, layout, 0.35);
        return tape.value(tape.mean_all(node)).data[0];
    };
    Tape tape;
    const int node = build_velocity_graph(tape, params, cfg, layout, 0.35);
    const auto grads = tape.backward(tape.mean_all(node));
    Rng pick(12);
    const auto report = test::fd_compare(loss, params, grads, 2, pick);
    INFO("checked " << report.checked << " entries, max rel err " << report.max_rel_err);
    CHECK(report.max_rel_err < 1e-4);
}
