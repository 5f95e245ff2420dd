#include "psrlab/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "psrlab/common.hpp"
#include "psrlab/detect.hpp"
#include "psrlab/runio.hpp"

namespace fs = std::filesystem;

namespace psrlab {

namespace {

// Clamp a jittered hue back into the category's reserved band.
double clamp_into_band(double hue, int category) {
    const double center = category_band_center(category);
    const double lo = center - kHueBandWidth / 2.0;
    const double hi = center + kHueBandWidth / 2.0;
    // Work in an unwrapped frame around the center.
    double h = hue;
    if (h - center > 0.5) h -= 1.0;
    if (center - h > 0.5) h += 1.0;
    h = std::clamp(h, lo, hi);
    return std::fmod(h + 1.0, 1.0);
}

int max_size_for(std::size_t resolution) { return std::min<int>(5, (static_cast<int>(resolution) - 8) / 4); }

}  // namespace

PairedSample stage1_generate(std::uint64_t seed, int n_subjects, const Stage1Options& opts) {
    if (n_subjects < 2 || n_subjects > 4)
        throw ConfigError("stage1_generate: n_subjects must be in [2,4], got " + std::to_string(n_subjects));
    Rng rng(mix64(seed ^ 0x517cc1b727220a95ULL));

    PairedSample out;
    out.seed = seed;
    const int max_size = max_size_for(opts.resolution);

    for (int regen = 0; regen < 100; ++regen) {
        out.regenerated = regen;
        out.refs.clear();
        out.ref_scenes.clear();
        out.categories.clear();

        std::vector<int> pool(kNumCategories);
        for (int i = 0; i < kNumCategories; ++i) pool[static_cast<std::size_t>(i)] = i;
        const std::uint64_t scene_seed = rng.next_u64();
        out.target_scene = sample_scene(scene_seed, n_subjects, pool, opts.resolution, opts.resolution);
        out.target = render(out.target_scene);

        // Detect and crop every category in the rendered target; the crops
        // are the single-subject intermediates the references are built from.
        bool ok = true;
        for (const auto& subject : out.target_scene.subjects) {
            const DetectionSet det = detect(out.target, subject.category);
            if (det.empty()) {
                ok = false;
                break;
            }
            (void)crop(out.target, det.top().bbox);
        }
        if (!ok) continue;

        for (const auto& subject : out.target_scene.subjects) {
            SubjectSpec spec = subject;
            spec.color.h = clamp_into_band(spec.color.h + rng.uniform(-opts.hue_jitter, opts.hue_jitter),
                                           spec.category);
            if (opts.size_jitter > 0) {
                const int delta = static_cast<int>(rng.uniform_int(-opts.size_jitter, opts.size_jitter));
                spec.size = std::clamp(spec.size + delta, 3, max_size);
            }
            if (opts.free_pose)
                spec.pose_deg = kPoseAngles[static_cast<std::size_t>(rng.uniform_int(0, 3))];

            Scene ref_scene;
            ref_scene.height = opts.resolution;
            ref_scene.width = opts.resolution;
            ref_scene.background = opts.same_background
                                       ? out.target_scene.background
                                       : static_cast<int>((out.target_scene.background + 1 +
                                                           rng.uniform_int(0, kNumBackgrounds - 2)) %
                                                          kNumBackgrounds);
            if (!opts.same_center) {
                const int margin = spec.size + 3;
                spec.center_row =
                    static_cast<int>(rng.uniform_int(margin, static_cast<int>(opts.resolution) - 1 - margin));
                spec.center_col =
                    static_cast<int>(rng.uniform_int(margin, static_cast<int>(opts.resolution) - 1 - margin));
            }
            ref_scene.subjects.push_back(spec);

            const Raster ref = render(ref_scene);
            if (detect(ref, spec.category).empty()) {
                ok = false;
                break;
            }
            out.refs.push_back(ref);
            out.ref_scenes.push_back(ref_scene);
            out.categories.push_back(spec.category);
        }
        if (!ok) continue;
        return out;
    }
    throw DataError("stage1_generate: exceeded regeneration budget (detection kept failing)");
}

PairedSample stage2_instruction(PairedSample sample, TaskKind kind, std::uint64_t seed) {
    const int n = static_cast<int>(sample.target_scene.subjects.size());
    if (kind == TaskKind::kThree && n != 3)
        throw ConfigError("stage2_instruction: 'three' task needs a 3-subject sample");
    if (kind == TaskKind::kFour && n != 4)
        throw ConfigError("stage2_instruction: 'four' task needs a 4-subject sample");
    if ((kind == TaskKind::kPosition || kind == TaskKind::kComplex) && n < 2)
        throw ConfigError("stage2_instruction: positional tasks need at least 2 subjects");

    sample.stage2_seed = seed;
    sample.instruction = make_instruction(sample.target_scene, kind, seed);
    sample.instruction_set = true;

    // Re-editing: apply sampled attribute/pose targets to the scene so the
    // pair stays consistent, then re-render.
    bool edited = false;
    for (std::size_t i = 0; i < sample.instruction.subjects.size(); ++i) {
        const auto& constraint = sample.instruction.subjects[i];
        auto& subject = sample.target_scene.subjects[i];
        if (constraint.attribute && subject.attribute != *constraint.attribute) {
            subject.attribute = *constraint.attribute;
            edited = true;
        }
        if (constraint.pose_deg && subject.pose_deg != *constraint.pose_deg) {
            subject.pose_deg = *constraint.pose_deg;
            edited = true;
        }
    }
    if (edited) sample.target = render(sample.target_scene);
    return sample;
}

std::pair<std::vector<PairedSample>, CleanReport> clean(const std::vector<PairedSample>& samples, double tau_sim,
                                                        double tau_sem) {
    CleanReport report;
    report.tau_sim = tau_sim;
    report.tau_sem = tau_sem;
    std::vector<PairedSample> kept;
    for (const auto& s : samples) {
        const PsrResult psr = psr_reward(s.target, s.refs, s.categories);
        if (psr.psr < tau_sim) {
            ++report.dropped_consistency;
            continue;
        }
        if (s.instruction_set) {
            const double sem = semantic_reward(s.instruction, s.target);
            if (sem < tau_sem) {
                ++report.dropped_semantic;
                continue;
            }
        }
        ++report.kept;
        kept.push_back(s);
    }
    return {std::move(kept), report};
}

nlohmann::json clean_report_to_json(const CleanReport& r) {
    return {{"kept", r.kept},
            {"dropped_consistency", r.dropped_consistency},
            {"dropped_semantic", r.dropped_semantic},
            {"tau_sim", r.tau_sim},
            {"tau_sem", r.tau_sem}};
}

PairedSample generate_sample(const DatagenConfig& cfg, std::int64_t index) {
    Rng rng = Rng(cfg.master_seed).derive(static_cast<std::uint64_t>(index));

    std::vector<double> sw;
    sw.reserve(cfg.subject_mix.size());
    for (const auto& m : cfg.subject_mix) sw.push_back(m.weight);
    const int n = cfg.subject_mix[rng.categorical(sw)].count;

    TaskKind kind;
    if (n == 3) {
        kind = TaskKind::kThree;
    } else if (n == 4) {
        kind = TaskKind::kFour;
    } else {
        std::vector<double> tw;
        tw.reserve(cfg.task_mix.size());
        for (const auto& m : cfg.task_mix) tw.push_back(m.weight);
        kind = cfg.task_mix[rng.categorical(tw)].kind;
    }

    Stage1Options opts;
    opts.resolution = cfg.resolution;
    PairedSample sample = stage1_generate(rng.next_u64(), n, opts);
    sample = stage2_instruction(std::move(sample), kind, rng.next_u64());
    sample.id = index;
    return sample;
}

namespace {

nlohmann::json sample_manifest_entry(const PairedSample& s, const std::string& target_path,
                                     const std::vector<std::string>& ref_paths) {
    nlohmann::json cats = nlohmann::json::array();
    for (int c : s.categories) cats.push_back(category_name(c));
    nlohmann::json refs = nlohmann::json::array();
    for (const auto& p : ref_paths) refs.push_back(p);
    nlohmann::json ref_scenes = nlohmann::json::array();
    for (const auto& sc : s.ref_scenes) ref_scenes.push_back(scene_to_json(sc));
    nlohmann::json j = {{"id", s.id},
                        {"seed", s.seed},
                        {"stage2_seed", s.stage2_seed},
                        {"regenerated", s.regenerated},
                        {"categories", cats},
                        {"target", target_path},
                        {"refs", refs},
                        {"target_scene", scene_to_json(s.target_scene)},
                        {"ref_scenes", ref_scenes}};
    if (s.instruction_set) j["instruction"] = instruction_to_json(s.instruction);
    return j;
}

std::string sample_stem(std::int64_t id) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(id));
    return buf;
}

}  // namespace

DatasetSummary write_dataset(const std::string& dir, const std::vector<PairedSample>& samples, bool write_png) {
    fs::create_directories(fs::path(dir) / "rasters");
    std::ostringstream manifest;
    DatasetSummary summary;
    for (const auto& s : samples) {
        const std::string stem = sample_stem(s.id);
        const std::string target_rel = "rasters/" + stem + "_target.psr";
        save_raster((fs::path(dir) / target_rel).string(), s.target);
        if (write_png) save_png((fs::path(dir) / ("rasters/" + stem + "_target.png")).string(), s.target);
        std::vector<std::string> ref_paths;
        for (std::size_t k = 0; k < s.refs.size(); ++k) {
            const std::string rel = "rasters/" + stem + "_ref" + std::to_string(k) + ".psr";
            save_raster((fs::path(dir) / rel).string(), s.refs[k]);
            if (write_png)
                save_png((fs::path(dir) / ("rasters/" + stem + "_ref" + std::to_string(k) + ".png")).string(),
                         s.refs[k]);
            ref_paths.push_back(rel);
        }
        manifest << sample_manifest_entry(s, target_rel, ref_paths).dump() << "\n";
        summary.samples += 1;
        summary.regenerated += s.regenerated;
    }
    write_text_atomic((fs::path(dir) / "manifest.jsonl").string(), manifest.str());
    summary.manifest_hash = fnv1a64_hex(manifest.str());
    write_text_atomic((fs::path(dir) / "manifest.hash").string(), summary.manifest_hash + "\n");
    return summary;
}

DatasetSummary generate_dataset(const std::string& dir, const DatagenConfig& cfg) {
    std::vector<PairedSample> samples;
    samples.reserve(static_cast<std::size_t>(cfg.num_samples));
    for (std::int64_t i = 0; i < cfg.num_samples; ++i) samples.push_back(generate_sample(cfg, i));
    return write_dataset(dir, samples, cfg.write_png);
}

std::vector<PairedSample> load_dataset(const std::string& dir) {
    const std::string manifest_path = (fs::path(dir) / "manifest.jsonl").string();
    std::vector<PairedSample> samples;
    for (const auto& line : read_lines(manifest_path)) {
        const nlohmann::json j = nlohmann::json::parse(line);
        PairedSample s;
        s.id = j.at("id").get<std::int64_t>();
        s.seed = j.at("seed").get<std::uint64_t>();
        s.stage2_seed = j.at("stage2_seed").get<std::uint64_t>();
        s.regenerated = j.at("regenerated").get<int>();
        for (const auto& c : j.at("categories")) s.categories.push_back(category_by_name(c.get<std::string>()));
        s.target = load_raster((fs::path(dir) / j.at("target").get<std::string>()).string());
        for (const auto& p : j.at("refs"))
            s.refs.push_back(load_raster((fs::path(dir) / p.get<std::string>()).string()));
        s.target_scene = scene_from_json(j.at("target_scene"));
        for (const auto& sc : j.at("ref_scenes")) s.ref_scenes.push_back(scene_from_json(sc));
        if (j.contains("instruction")) {
            s.instruction = instruction_from_json(j.at("instruction"));
            s.instruction_set = true;
        }
        if (s.refs.size() != s.categories.size())
            throw DataError("dataset: sample " + std::to_string(s.id) + " refs/categories mismatch");
        samples.push_back(std::move(s));
    }
    if (samples.empty()) throw DataError("dataset: empty manifest in " + dir);
    return samples;
}

std::string dataset_manifest_hash(const std::string& dir) {
    return fnv1a64_hex(read_text_file((fs::path(dir) / "manifest.jsonl").string()));
}

}  // namespace psrlab
