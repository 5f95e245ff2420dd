#ifndef PSRLAB_BENCH_HPP_
#define PSRLAB_BENCH_HPP_

#include <array>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "psrlab/flow.hpp"
#include "psrlab/grpo.hpp"
#include "psrlab/rewards.hpp"

namespace psrlab {

constexpr std::array<TaskKind, 7> kBenchSubsets = {TaskKind::kAttribute, TaskKind::kBackground, TaskKind::kAction,
                                                   TaskKind::kPosition, TaskKind::kComplex, TaskKind::kThree,
                                                   TaskKind::kFour};

struct BenchCase {
    TaskKind subset = TaskKind::kAttribute;
    Condition condition;
    Scene gt_scene;  // the ground-truth target scene behind the instruction
    std::uint64_t seed = 0;
    int index = 0;
};

// Deterministic benchmark builder: references come from the stage-1 pipeline,
// instructions from stage 2. Three/Four subsets carry 3/4 references, the
// rest carry 2.
std::vector<BenchCase> build_bench(std::uint64_t seed, int cases_per_subset);

void save_bench(const std::string& dir, const std::vector<BenchCase>& cases);
std::vector<BenchCase> load_bench(const std::string& dir);
std::string bench_manifest_hash(const std::string& dir);

enum class SamplerKind { kOde, kSde };
SamplerKind sampler_by_name(const std::string& name);
const std::string& sampler_name(SamplerKind k);

struct CaseScore {
    TaskKind subset;
    int index = 0;
    double subject_consistency = 0.0;
    double semantic = 0.0;
    double aesthetic = 0.0;
    bool flagged = false;  // sampling or scoring failure; scored (0,0,0)
};

struct SubsetStats {
    double subject_consistency = 0.0;
    double semantic = 0.0;
    double aesthetic = 0.0;
    int cases = 0;
    int flagged = 0;
};

struct Report {
    std::map<std::string, SubsetStats> subsets;
    SubsetStats overall;  // unweighted arithmetic mean of subset means
    std::vector<CaseScore> cases;
    std::string bench_hash;
    std::string checkpoint;
    std::string sampler;
    std::uint64_t seed = 0;
};

struct EvalOptions {
    SamplerKind sampler = SamplerKind::kOde;
    std::uint64_t seed = 0;
    TimeGrid grid = {28, 1e-3};
    double noise_level = 0.7;  // only used by the SDE sampler
    int samples_per_case = 1;  // >1 averages repeated samples (variance studies)
    int threads = 1;
    RewardWeights weights;
};

Report evaluate(const ParamMap& params, const ModelConfig& cfg, const std::vector<BenchCase>& bench,
                const EvalOptions& opts);

nlohmann::json report_to_json(const Report& r);
std::string report_to_table(const Report& r);

// ---------------------------------------------------------------------------
// Positional-encoding ablation
// ---------------------------------------------------------------------------

struct AblationRow {
    EncodingVariant variant = EncodingVariant::kFrame;
    double two_subjects = 0.0;   // mean semantic over the five 2-subject subsets
    double three_subjects = 0.0;
    double four_subjects = 0.0;
    double position = 0.0;       // Position subset semantic
};

struct AblationTable {
    std::vector<AblationRow> rows;
};

struct AblationOptions {
    std::vector<EncodingVariant> variants = {EncodingVariant::kFrame, EncodingVariant::kHw, EncodingVariant::kW,
                                             EncodingVariant::kH};
    SftConfig train;
    std::uint64_t init_seed = 0;
    EvalOptions eval;
};

// Trains one model per encoding variant with identical data, seed and budget,
// then reports the semantic metric per subject-count split and the Position
// subset, shaped like the offset-strategy comparison table.
AblationTable ablate_positional(const ModelConfig& base_cfg, const std::vector<PairedSample>& data,
                                const std::vector<BenchCase>& bench, const AblationOptions& opts);

nlohmann::json ablation_to_json(const AblationTable& t);
std::string ablation_to_table(const AblationTable& t);

}  // namespace psrlab

#endif  // PSRLAB_BENCH_HPP_
