#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>

#include "psrlab/common.hpp"
#include "psrlab/datagen.hpp"
#include "psrlab/detect.hpp"
#include "psrlab/rewards.hpp"
#include "psrlab/rng.hpp"
#include "test_support.hpp"

using namespace psrlab;

namespace {

// Pastes each reference's detected crop into a background canvas at the
// target scene's subject centers (guaranteed non-overlapping): the output
// then contains the exact reference pixels.
Raster composite_from_refs(const PairedSample& s) {
    Scene canvas;
    canvas.background = s.target_scene.background;
    Raster out = render(canvas);
    for (std::size_t i = 0; i < s.refs.size(); ++i) {
        const DetectionSet det = detect(s.refs[i], s.categories[i]);
        REQUIRE_FALSE(det.empty());
        const BBox b = det.top().bbox;
        const auto& subject = s.target_scene.subjects[i];
        const int dr = subject.center_row - (b.row_min + b.row_max) / 2;
        const int dc = subject.center_col - (b.col_min + b.col_max) / 2;
        for (int r = b.row_min; r <= b.row_max; ++r)
            for (int c = b.col_min; c <= b.col_max; ++c) {
                const int tr = r + dr, tc = c + dc;
                if (tr < 0 || tc < 0 || tr >= static_cast<int>(out.height) || tc >= static_cast<int>(out.width))
                    continue;
                for (std::size_t ch = 0; ch < 3; ++ch)
                    out.at(static_cast<std::size_t>(tr), static_cast<std::size_t>(tc), ch) =
                        s.refs[i].at(static_cast<std::size_t>(r), static_cast<std::size_t>(c), ch);
            }
    }
    return out;
}

}  // namespace

TEST_CASE("psr: output composited from the exact reference crops scores 1") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const PairedSample s = stage1_generate(seed, 2);
        const Raster out = composite_from_refs(s);
        const PsrResult r = psr_reward(out, s.refs, s.categories);
        CHECK(r.psr == doctest::Approx(1.0).epsilon(1e-9));
        for (const auto& p : r.per_subject) CHECK(p.matched);
    }
}

TEST_CASE("psr: a missing subject bounds the reward by (N-1)/N") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const PairedSample s = stage1_generate(seed, 3);
        // Render only the first two subjects: the third is omitted.
        Scene partial = s.target_scene;
        partial.subjects.pop_back();
        const Raster out = render(partial);
        const PsrResult r = psr_reward(out, s.refs, s.categories);
        CHECK(r.psr <= 2.0 / 3.0 + 1e-12);
        CHECK_FALSE(r.per_subject.back().matched);
        CHECK(r.per_subject.back().similarity == 0.0);
    }
}

TEST_CASE("psr: invariant under joint permutation of refs and categories (1000 cases)") {
    Rng rng(5);
    for (int rep = 0; rep < 50; ++rep) {
        const PairedSample s = stage1_generate(static_cast<std::uint64_t>(rep), 2 + rep % 3);
        const double base = psr_reward(s.target, s.refs, s.categories).psr;
        for (int shuffle = 0; shuffle < 20; ++shuffle) {
            std::vector<std::size_t> order(s.refs.size());
            for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
            rng.shuffle(order);
            std::vector<Raster> refs;
            std::vector<int> cats;
            for (std::size_t i : order) {
                refs.push_back(s.refs[i]);
                cats.push_back(s.categories[i]);
            }
            CHECK(psr_reward(s.target, refs, cats).psr == base);
        }
    }
}

TEST_CASE("psr: undetectable reference is rejected as malformed") {
    const PairedSample s = stage1_generate(3, 2);
    std::vector<Raster> refs = s.refs;
    Scene empty;
    empty.background = 0;
    refs[0] = render(empty);  // background only: reference has no subject
    CHECK_THROWS_AS(psr_reward(s.target, refs, s.categories), DataError);
}

TEST_CASE("psr: replacing a reference background shifts the reward by < 0.05") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const PairedSample s = stage1_generate(seed, 2);
        const double base = psr_reward(s.target, s.refs, s.categories).psr;
        std::vector<Raster> refs = s.refs;
        for (std::size_t i = 0; i < refs.size(); ++i) {
            Scene rs = s.ref_scenes[i];
            rs.background = (rs.background + 3) % kNumBackgrounds;
            refs[i] = render(rs);
        }
        CHECK(std::fabs(psr_reward(s.target, refs, s.categories).psr - base) < 0.05);
    }
}

TEST_CASE("semantic: a render of a scene satisfying the instruction scores 1") {
    const TaskKind kinds[5] = {TaskKind::kAttribute, TaskKind::kBackground, TaskKind::kAction, TaskKind::kPosition,
                               TaskKind::kComplex};
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        PairedSample s = stage1_generate(seed, 2);
        s = stage2_instruction(std::move(s), kinds[seed % 5], seed * 13 + 1);
        INFO(task_kind_name(s.instruction.kind) << " seed " << seed);
        CHECK(semantic_reward(s.instruction, s.target) == 1.0);
    }
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        PairedSample s3 = stage1_generate(500 + seed, 3);
        s3 = stage2_instruction(std::move(s3), TaskKind::kThree, seed);
        CHECK(semantic_reward(s3.instruction, s3.target) == 1.0);
        PairedSample s4 = stage1_generate(600 + seed, 4);
        s4 = stage2_instruction(std::move(s4), TaskKind::kFour, seed);
        CHECK(semantic_reward(s4.instruction, s4.target) == 1.0);
    }
}

TEST_CASE("semantic: position term drops to 0 when the subjects swap sides") {
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 20 && seed < 200; ++seed) {
        PairedSample s = stage1_generate(seed, 2);
        s = stage2_instruction(std::move(s), TaskKind::kPosition, seed);
        Scene swapped = s.target_scene;
        std::swap(swapped.subjects[0].center_row, swapped.subjects[1].center_row);
        std::swap(swapped.subjects[0].center_col, swapped.subjects[1].center_col);
        const double score = semantic_reward(s.instruction, render(swapped));
        CHECK(score == 0.0);
        ++checked;
    }
    CHECK(checked == 20);
}

TEST_CASE("semantic: no detections at all scores 0") {
    PairedSample s = stage1_generate(7, 2);
    s = stage2_instruction(std::move(s), TaskKind::kBackground, 1);
    Scene empty;
    empty.background = (s.target_scene.background + 1) % kNumBackgrounds;
    CHECK(semantic_reward(s.instruction, render(empty)) == 0.0);
}

TEST_CASE("semantic: raster oracle agrees with the scene-parameter check on >= 95% of 1000 cases") {
    const TaskKind kinds[5] = {TaskKind::kAttribute, TaskKind::kBackground, TaskKind::kAction, TaskKind::kPosition,
                               TaskKind::kComplex};
    int agree = 0, total = 0;
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        // Instruction sampled for the scene (attribute/action targets may
        // differ from it), evaluated against the unedited render.
        const PairedSample s = stage1_generate(seed, 2);
        const Instruction ins = make_instruction(s.target_scene, kinds[seed % 5], seed * 31 + 5);
        const double raster_score = semantic_reward(ins, s.target);
        const double scene_score = semantic_check_scene(ins, s.target_scene);
        if (raster_score == scene_score) ++agree;
        ++total;
    }
    INFO("agreement " << agree << "/" << total);
    CHECK(static_cast<double>(agree) / total >= 0.95);
}

TEST_CASE("aesthetic: clean renders score >= 0.9; garbage noise scores <= 0.3 (calibration)") {
    std::vector<int> pool(kNumCategories);
    for (int i = 0; i < kNumCategories; ++i) pool[static_cast<std::size_t>(i)] = i;
    double clean_min = 1.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const Scene sc = sample_scene(seed, static_cast<int>(1 + seed % 4), pool);
        clean_min = std::min(clean_min, aesthetic_reward(render(sc)));
    }
    INFO("clean min " << clean_min);
    CHECK(clean_min >= 0.9);

    Rng rng(2);
    double garbage_max = 0.0;
    for (int i = 0; i < 100; ++i) {
        Raster noise(32, 32, 3);
        for (auto& v : noise.data) v = rng.uniform(-1.5, 2.5);
        garbage_max = std::max(garbage_max, aesthetic_reward(noise));
    }
    INFO("garbage max " << garbage_max);
    CHECK(garbage_max <= 0.3);
}

TEST_CASE("aesthetic: adding zero noise leaves the score unchanged") {
    const Scene sc = sample_scene(9, 2, {0, 1, 2, 3});
    const Raster img = render(sc);
    Raster same = img;
    for (auto& v : same.data) v += 0.0;
    CHECK(aesthetic_reward(img) == aesthetic_reward(same));
}

TEST_CASE("aesthetic: more clipping or more noise never raises the score (coupled)") {
    Rng rng(3);
    const Scene sc = sample_scene(11, 2, {4, 5, 6, 7});
    const Raster img = render(sc);
    std::vector<double> field(img.data.size());
    for (auto& v : field) v = (rng.uniform() - 0.5) * 2.0;
    double prev = 1.0;
    for (const double amp : {0.0, 0.1, 0.3, 0.6, 1.0, 1.5}) {
        Raster noisy = img;
        for (std::size_t i = 0; i < field.size(); ++i) noisy.data[i] += amp * field[i];
        const double score = aesthetic_reward(noisy);
        CHECK(score <= prev + 1e-12);
        prev = score;
    }
}

TEST_CASE("aggregate: exact weighted sum with validated weights") {
    RewardBreakdown b;
    b.psr = 1.0;
    b.semantic = 1.0;
    b.aesthetic = 1.0;
    CHECK(aggregate_reward(b, RewardWeights{0.4, 0.4, 0.2}) == doctest::Approx(1.0).epsilon(1e-15));
    b.psr = 0.37;
    b.semantic = 0.81;
    b.aesthetic = 0.55;
    CHECK(aggregate_reward(b, RewardWeights{1.0, 0.0, 0.0}) == 0.37);
    b.psr = 0.0;
    b.semantic = 0.0;
    b.aesthetic = 0.0;
    CHECK(aggregate_reward(b, RewardWeights{0.4, 0.4, 0.2}) == 0.0);
    CHECK_THROWS_AS(aggregate_reward(b, RewardWeights{-0.1, 0.4, 0.2}), ConfigError);
}

TEST_CASE("reward breakdown is deterministic and serializes") {
    PairedSample s = stage1_generate(21, 2);
    s = stage2_instruction(std::move(s), TaskKind::kComplex, 4);
    const RewardWeights w;
    const RewardBreakdown a = evaluate_rewards(s.target, s.target, s.refs, s.categories, s.instruction, w);
    const RewardBreakdown b = evaluate_rewards(s.target, s.target, s.refs, s.categories, s.instruction, w);
    CHECK(a.psr == b.psr);
    CHECK(a.semantic == b.semantic);
    CHECK(a.aesthetic == b.aesthetic);
    CHECK(a.aggregate == b.aggregate);
    CHECK(a.aggregate == doctest::Approx(w.w_psr * a.psr + w.w_semantic * a.semantic + w.w_aesthetic * a.aesthetic)
                             .epsilon(1e-15));
    const auto j = reward_to_json(a);
    CHECK(j.at("per_subject").size() == 2);
    CHECK(j.at("psr").get<double>() == a.psr);
}
