#ifndef PSRLAB_GRPO_HPP_
#define PSRLAB_GRPO_HPP_

#include <string>
#include <vector>

#include "psrlab/flow.hpp"
#include "psrlab/rewards.hpp"

namespace psrlab {

struct GrpoConfig {
    int group_size = 6;
    double clip = 0.2;
    double kl_coef = 0.0;
    double noise_level = 0.7;  // SDE a; must be > 0 for a defined ratio
    TimeGrid grid = {28, 1e-3};
    double lr = 1e-5;
    int prompts_per_batch = 1;
    int iterations = 100;
    std::uint64_t seed = 0;
    double adv_std_floor = 1e-6;  // delta: below this reward spread, advantages are zeroed
    int checkpoint_every = 0;     // 0 = final only
    int step_subsample = 0;       // experimental: >0 trains on every n-th step
    int threads = 1;

    void validate() const;
};

struct GroupBatch {
    Condition condition;
    std::vector<ModelTrajectory> trajectories;
    std::vector<RewardBreakdown> rewards;
    std::vector<double> advantages;  // empty until advantages() is applied
};

// Samples G independent SDE trajectories from one frozen parameter snapshot
// and scores their final rasters. A non-finite rollout is resampled once;
// a second failure rejects the whole group.
GroupBatch rollout_group(const ParamMap& snapshot, const ModelConfig& cfg, const Condition& condition,
                         const GrpoConfig& grpo, const RewardWeights& weights, Rng& rng);

// Within-group normalization: (R - mean) / std when std > delta, else all
// zeros. Uses the population standard deviation.
std::vector<double> advantages(const std::vector<double>& rewards, double delta);

struct GrpoLossResult {
    double loss = 0.0;
    ParamMap grads;
    double mean_ratio = 1.0;
    int steps_used = 0;
};

// Clipped likelihood-ratio objective summed over per-step SDE transitions:
// -min(r A, clip(r, 1-eps, 1+eps) A) averaged over steps and group members,
// plus kl_coef * mean squared log-ratio.
GrpoLossResult grpo_loss(const ParamMap& params, const ModelConfig& cfg, const GroupBatch& batch,
                         const GrpoConfig& grpo);

struct GrpoIterationLog {
    int iter = 0;
    double mean_psr = 0.0;
    double mean_semantic = 0.0;
    double mean_aesthetic = 0.0;
    double mean_aggregate = 0.0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

struct GrpoTrainResult {
    int iterations_done = 0;
    bool halted_nonfinite = false;
    std::vector<GrpoIterationLog> log;
};

// Online RL loop: sample prompt conditions from the dataset, roll out a
// group per prompt, normalize advantages, take one Adam step. Writes the
// metrics log (JSONL, one record per iteration) and checkpoints under
// out_dir. A non-finite loss halts the run; the last good checkpoint is kept.
GrpoTrainResult grpo_train(ParamMap& params, const ModelConfig& cfg, const std::vector<PairedSample>& prompts,
                           const GrpoConfig& grpo, const RewardWeights& weights, const std::string& out_dir);

}  // namespace psrlab

#endif  // PSRLAB_GRPO_HPP_
