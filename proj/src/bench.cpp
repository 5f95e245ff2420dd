#include "psrlab/bench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>

#include "psrlab/common.hpp"
#include "psrlab/runio.hpp"

namespace fs = std::filesystem;

namespace psrlab {

namespace {

int subset_subject_count(TaskKind k) {
    if (k == TaskKind::kThree) return 3;
    if (k == TaskKind::kFour) return 4;
    return 2;
}

}  // namespace

std::vector<BenchCase> build_bench(std::uint64_t seed, int cases_per_subset) {
    if (cases_per_subset < 1) throw ConfigError("build_bench: cases_per_subset must be >= 1");
    std::vector<BenchCase> cases;
    Rng root(mix64(seed ^ 0x62656e6368726f6fULL));
    for (std::size_t si = 0; si < kBenchSubsets.size(); ++si) {
        const TaskKind subset = kBenchSubsets[si];
        for (int j = 0; j < cases_per_subset; ++j) {
            Rng rng = root.derive(si * 100000ULL + static_cast<std::uint64_t>(j));
            const std::uint64_t stage1_seed = rng.next_u64();
            const std::uint64_t stage2_seed = rng.next_u64();
            PairedSample sample = stage1_generate(stage1_seed, subset_subject_count(subset));
            sample = stage2_instruction(std::move(sample), subset, stage2_seed);
            BenchCase c;
            c.subset = subset;
            c.condition = condition_of(sample);
            c.gt_scene = sample.target_scene;
            c.seed = stage1_seed;
            c.index = j;
            cases.push_back(std::move(c));
        }
    }
    return cases;
}

void save_bench(const std::string& dir, const std::vector<BenchCase>& cases) {
    fs::create_directories(fs::path(dir) / "rasters");
    std::ostringstream manifest;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        const BenchCase& c = cases[i];
        char stem[32];
        std::snprintf(stem, sizeof(stem), "%s_%04d", task_kind_name(c.subset).c_str(), c.index);
        nlohmann::json refs = nlohmann::json::array();
        for (std::size_t k = 0; k < c.condition.refs.size(); ++k) {
            const std::string rel = "rasters/" + std::string(stem) + "_ref" + std::to_string(k) + ".psr";
            save_raster((fs::path(dir) / rel).string(), c.condition.refs[k]);
            refs.push_back(rel);
        }
        nlohmann::json cats = nlohmann::json::array();
        for (int cat : c.condition.categories) cats.push_back(category_name(cat));
        manifest << nlohmann::json{{"subset", task_kind_name(c.subset)},
                                   {"index", c.index},
                                   {"seed", c.seed},
                                   {"categories", cats},
                                   {"refs", refs},
                                   {"instruction", instruction_to_json(c.condition.instruction)},
                                   {"gt_scene", scene_to_json(c.gt_scene)}}
                        .dump()
                 << "\n";
    }
    write_text_atomic((fs::path(dir) / "manifest.jsonl").string(), manifest.str());
    write_text_atomic((fs::path(dir) / "manifest.hash").string(), fnv1a64_hex(manifest.str()) + "\n");
}

std::vector<BenchCase> load_bench(const std::string& dir) {
    std::vector<BenchCase> cases;
    for (const auto& line : read_lines((fs::path(dir) / "manifest.jsonl").string())) {
        const nlohmann::json j = nlohmann::json::parse(line);
        BenchCase c;
        c.subset = task_kind_by_name(j.at("subset").get<std::string>());
        c.index = j.at("index").get<int>();
        c.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& cat : j.at("categories"))
            c.condition.categories.push_back(category_by_name(cat.get<std::string>()));
        for (const auto& p : j.at("refs"))
            c.condition.refs.push_back(load_raster((fs::path(dir) / p.get<std::string>()).string()));
        c.condition.instruction = instruction_from_json(j.at("instruction"));
        c.gt_scene = scene_from_json(j.at("gt_scene"));
        cases.push_back(std::move(c));
    }
    if (cases.empty()) throw DataError("bench: empty manifest in " + dir);
    return cases;
}

std::string bench_manifest_hash(const std::string& dir) {
    return fnv1a64_hex(read_text_file((fs::path(dir) / "manifest.jsonl").string()));
}

SamplerKind sampler_by_name(const std::string& name) {
    if (name == "ode") return SamplerKind::kOde;
    if (name == "sde") return SamplerKind::kSde;
    throw ConfigError("unknown sampler: " + name + " (expected ode|sde)");
}

const std::string& sampler_name(SamplerKind k) {
    static const std::string ode = "ode", sde = "sde";
    return k == SamplerKind::kOde ? ode : sde;
}

Report evaluate(const ParamMap& params, const ModelConfig& cfg, const std::vector<BenchCase>& bench,
                const EvalOptions& opts) {
    if (bench.empty()) throw DataError("evaluate: empty bench");
    if (opts.samples_per_case < 1) throw ConfigError("evaluate: samples_per_case must be >= 1");

    Report report;
    report.sampler = sampler_name(opts.sampler);
    report.seed = opts.seed;
    report.cases.resize(bench.size());

    Rng root(mix64(opts.seed ^ 0x6576616c726e6773ULL));
    std::vector<Rng> case_rngs;
    case_rngs.reserve(bench.size());
    for (std::size_t i = 0; i < bench.size(); ++i) case_rngs.push_back(root.derive(i));

    auto eval_case = [&](std::size_t i) {
        const BenchCase& c = bench[i];
        CaseScore score;
        score.subset = c.subset;
        score.index = c.index;
        Rng rng = case_rngs[i];
        double sc = 0.0, sem = 0.0, aes = 0.0;
        try {
            for (int s = 0; s < opts.samples_per_case; ++s) {
                SampleResult sample;
                if (opts.sampler == SamplerKind::kOde) {
                    sample = ode_sample(params, cfg, c.condition, opts.grid, rng);
                } else {
                    ModelTrajectory t = sde_sample(params, cfg, c.condition, opts.grid, opts.noise_level, rng);
                    sample.raster = std::move(t.final_raster);
                    sample.preclamp = std::move(t.final_preclamp);
                }
                // Same computation as the PSR reward: one implementation,
                // two call sites.
                sc += psr_reward(sample.raster, c.condition.refs, c.condition.categories).psr;
                sem += semantic_reward(c.condition.instruction, sample.raster);
                aes += aesthetic_reward(sample.preclamp);
            }
            const double inv = 1.0 / static_cast<double>(opts.samples_per_case);
            score.subject_consistency = sc * inv;
            score.semantic = sem * inv;
            score.aesthetic = aes * inv;
        } catch (const std::exception&) {
            score.subject_consistency = 0.0;
            score.semantic = 0.0;
            score.aesthetic = 0.0;
            score.flagged = true;
        }
        report.cases[i] = score;
    };

    if (opts.threads <= 1) {
        for (std::size_t i = 0; i < bench.size(); ++i) eval_case(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        const std::size_t n_threads = std::min<std::size_t>(static_cast<std::size_t>(opts.threads), bench.size());
        for (std::size_t w = 0; w < n_threads; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < bench.size(); i = next.fetch_add(1)) eval_case(i);
            });
        for (auto& th : pool) th.join();
    }

    for (const auto& score : report.cases) {
        SubsetStats& st = report.subsets[task_kind_name(score.subset)];
        st.subject_consistency += score.subject_consistency;
        st.semantic += score.semantic;
        st.aesthetic += score.aesthetic;
        st.cases += 1;
        st.flagged += score.flagged ? 1 : 0;
    }
    for (auto& [name, st] : report.subsets) {
        st.subject_consistency /= st.cases;
        st.semantic /= st.cases;
        st.aesthetic /= st.cases;
        report.overall.subject_consistency += st.subject_consistency;
        report.overall.semantic += st.semantic;
        report.overall.aesthetic += st.aesthetic;
        report.overall.cases += st.cases;
        report.overall.flagged += st.flagged;
    }
    const double n_subsets = static_cast<double>(report.subsets.size());
    report.overall.subject_consistency /= n_subsets;
    report.overall.semantic /= n_subsets;
    report.overall.aesthetic /= n_subsets;
    return report;
}

nlohmann::json report_to_json(const Report& r) {
    nlohmann::json subsets;
    for (const auto& [name, st] : r.subsets)
        subsets[name] = {{"subject_consistency", st.subject_consistency},
                         {"semantic", st.semantic},
                         {"aesthetic", st.aesthetic},
                         {"cases", st.cases},
                         {"flagged", st.flagged}};
    nlohmann::json cases = nlohmann::json::array();
    for (const auto& c : r.cases)
        cases.push_back({{"subset", task_kind_name(c.subset)},
                         {"index", c.index},
                         {"subject_consistency", c.subject_consistency},
                         {"semantic", c.semantic},
                         {"aesthetic", c.aesthetic},
                         {"flagged", c.flagged}});
    return {{"header",
             {{"bench_hash", r.bench_hash},
              {"checkpoint", r.checkpoint},
              {"sampler", r.sampler},
              {"seed", r.seed},
              {"overall_definition", "unweighted arithmetic mean of subset means"}}},
            {"overall",
             {{"subject_consistency", r.overall.subject_consistency},
              {"semantic", r.overall.semantic},
              {"aesthetic", r.overall.aesthetic},
              {"cases", r.overall.cases},
              {"flagged", r.overall.flagged}}},
            {"subsets", subsets},
            {"cases", cases}};
}

std::string report_to_table(const Report& r) {
    std::ostringstream ss;
    char line[256];
    ss << "metric                ";
    for (const auto& subset : kBenchSubsets) {
        std::snprintf(line, sizeof(line), " %10s", task_kind_name(subset).c_str());
        ss << line;
    }
    ss << "    overall\n";
    auto row = [&](const char* name, auto pick) {
        std::snprintf(line, sizeof(line), "%-22s", name);
        ss << line;
        for (const auto& subset : kBenchSubsets) {
            const auto it = r.subsets.find(task_kind_name(subset));
            std::snprintf(line, sizeof(line), " %10.3f", it == r.subsets.end() ? 0.0 : pick(it->second));
            ss << line;
        }
        std::snprintf(line, sizeof(line), " %10.3f\n", pick(r.overall));
        ss << line;
    };
    row("subject_consistency", [](const SubsetStats& s) { return s.subject_consistency; });
    row("semantic", [](const SubsetStats& s) { return s.semantic; });
    row("aesthetic", [](const SubsetStats& s) { return s.aesthetic; });
    return ss.str();
}

AblationTable ablate_positional(const ModelConfig& base_cfg, const std::vector<PairedSample>& data,
                                const std::vector<BenchCase>& bench, const AblationOptions& opts) {
    if (opts.variants.empty()) throw ConfigError("ablate: no variants requested");
    AblationTable table;
    for (const EncodingVariant variant : opts.variants) {
        ModelConfig cfg = base_cfg;
        cfg.encoding = variant;
        ParamMap params = init_params(cfg, opts.init_seed);
        sft_train(params, cfg, data, opts.train, nullptr);
        const Report report = evaluate(params, cfg, bench, opts.eval);

        AblationRow row;
        row.variant = variant;
        double two_acc = 0.0;
        int two_n = 0;
        for (const auto& subset : {TaskKind::kAttribute, TaskKind::kBackground, TaskKind::kAction,
                                   TaskKind::kPosition, TaskKind::kComplex}) {
            const auto it = report.subsets.find(task_kind_name(subset));
            if (it != report.subsets.end()) {
                two_acc += it->second.semantic;
                ++two_n;
            }
        }
        row.two_subjects = two_n > 0 ? two_acc / two_n : 0.0;
        if (const auto it = report.subsets.find(task_kind_name(TaskKind::kThree)); it != report.subsets.end())
            row.three_subjects = it->second.semantic;
        if (const auto it = report.subsets.find(task_kind_name(TaskKind::kFour)); it != report.subsets.end())
            row.four_subjects = it->second.semantic;
        if (const auto it = report.subsets.find(task_kind_name(TaskKind::kPosition)); it != report.subsets.end())
            row.position = it->second.semantic;
        table.rows.push_back(row);
    }
    return table;
}

nlohmann::json ablation_to_json(const AblationTable& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : t.rows)
        rows.push_back({{"variant", encoding_variant_name(r.variant)},
                        {"2_subjects", r.two_subjects},
                        {"3_subjects", r.three_subjects},
                        {"4_subjects", r.four_subjects},
                        {"position", r.position}});
    return {{"columns", {"2 subjects", "3 subjects", "4 subjects", "Position"}}, {"rows", rows}};
}

std::string ablation_to_table(const AblationTable& t) {
    std::ostringstream ss;
    char line[160];
    std::snprintf(line, sizeof(line), "%-10s %11s %11s %11s %11s\n", "variant", "2 subjects", "3 subjects",
                  "4 subjects", "Position");
    ss << line;
    for (const auto& r : t.rows) {
        std::snprintf(line, sizeof(line), "%-10s %11.3f %11.3f %11.3f %11.3f\n",
                      encoding_variant_name(r.variant).c_str(), r.two_subjects, r.three_subjects, r.four_subjects,
                      r.position);
        ss << line;
    }
    return ss.str();
}

}  // namespace psrlab
