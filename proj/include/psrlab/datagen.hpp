#ifndef PSRLAB_DATAGEN_HPP_
#define PSRLAB_DATAGEN_HPP_

#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "psrlab/raster.hpp"
#include "psrlab/rewards.hpp"
#include "psrlab/scene.hpp"

namespace psrlab {

// One dataset record: per-subject reference renders, the target render, the
// ground-truth scenes behind them, and the task instruction.
struct PairedSample {
    std::vector<Raster> refs;
    Raster target;
    std::vector<Scene> ref_scenes;
    Scene target_scene;
    Instruction instruction;
    bool instruction_set = false;
    std::vector<int> categories;
    std::uint64_t seed = 0;         // stage-1 seed
    std::uint64_t stage2_seed = 0;  // instruction / re-edit seed
    int regenerated = 0;            // discarded-and-retried count during stage 1
    std::int64_t id = -1;
};

struct Stage1Options {
    double hue_jitter = kHueSampleJitter;  // +/- around the subject's sampled hue, clamped into the band
    int size_jitter = 1;
    bool same_background = false;  // reference keeps the target's background class
    bool same_center = false;      // reference keeps the subject's center
    bool free_pose = true;         // reference pose is resampled
    std::size_t resolution = 32;
};

// Stage 1: sample a multi-subject target scene, render it, detect and crop
// every category, then re-render each subject alone in a fresh background
// with bounded jitter. A detection failure discards and regenerates the
// sample (counted in `regenerated`).
PairedSample stage1_generate(std::uint64_t seed, int n_subjects, const Stage1Options& opts = {});

// Stage 2: attach a task instruction. Attribute and action targets (and the
// complex task's attribute clause) are sampled and applied to the target
// scene, which is re-rendered; background and positional facts describe the
// target scene as it stands, so every pair is consistent by construction.
PairedSample stage2_instruction(PairedSample sample, TaskKind kind, std::uint64_t seed);

struct CleanReport {
    int kept = 0;
    int dropped_consistency = 0;
    int dropped_semantic = 0;
    double tau_sim = 0.0;
    double tau_sem = 0.0;
};

// Drops samples whose target-vs-reference consistency (computed exactly as
// R_PSR) falls below tau_sim, then those whose semantic-oracle score falls
// below tau_sem.
std::pair<std::vector<PairedSample>, CleanReport> clean(const std::vector<PairedSample>& samples, double tau_sim,
                                                        double tau_sem);

nlohmann::json clean_report_to_json(const CleanReport& r);

// ---------------------------------------------------------------------------
// Dataset directory: manifest.jsonl + rasters/ subtree
// ---------------------------------------------------------------------------

struct TaskMixEntry {
    TaskKind kind;
    double weight = 0.0;
};

struct SubjectMixEntry {
    int count = 2;
    double weight = 0.0;
};

struct DatagenConfig {
    int num_samples = 1000;
    std::uint64_t master_seed = 0;
    std::vector<SubjectMixEntry> subject_mix = {{2, 0.9}, {3, 0.05}, {4, 0.05}};
    std::vector<TaskMixEntry> task_mix = {{TaskKind::kAttribute, 0.2},
                                          {TaskKind::kBackground, 0.2},
                                          {TaskKind::kAction, 0.2},
                                          {TaskKind::kPosition, 0.2},
                                          {TaskKind::kComplex, 0.2}};
    std::size_t resolution = 32;
    bool write_png = false;
};

// Builds one full sample for the given index under the master seed.
PairedSample generate_sample(const DatagenConfig& cfg, std::int64_t index);

struct DatasetSummary {
    int samples = 0;
    int regenerated = 0;
    std::string manifest_hash;
};

DatasetSummary generate_dataset(const std::string& dir, const DatagenConfig& cfg);

// Writes an already-materialized sample list (used by `clean`).
DatasetSummary write_dataset(const std::string& dir, const std::vector<PairedSample>& samples, bool write_png);

std::vector<PairedSample> load_dataset(const std::string& dir);

// FNV-1a 64-bit hex digest of the manifest bytes; the dataset identity.
std::string dataset_manifest_hash(const std::string& dir);

}  // namespace psrlab

#endif  // PSRLAB_DATAGEN_HPP_
