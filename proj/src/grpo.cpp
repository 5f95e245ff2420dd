#include "psrlab/grpo.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "psrlab/common.hpp"

namespace fs = std::filesystem;

namespace psrlab {

void GrpoConfig::validate() const {
    if (group_size < 2) throw ConfigError("grpo: group size must be >= 2");
    if (!(clip > 0.0)) throw ConfigError("grpo: clip must be > 0");
    if (grid.steps < 2) throw ConfigError("grpo: grid must have at least 2 steps");
    grid.validate();
    if (noise_level < 0.0) throw ConfigError("grpo: noise level must be >= 0");
    if (prompts_per_batch < 1) throw ConfigError("grpo: prompts_per_batch must be >= 1");
    if (iterations < 0) throw ConfigError("grpo: iterations must be >= 0");
    if (threads < 1) throw ConfigError("grpo: threads must be >= 1");
}

GroupBatch rollout_group(const ParamMap& snapshot, const ModelConfig& cfg, const Condition& condition,
                         const GrpoConfig& grpo, const RewardWeights& weights, Rng& rng) {
    grpo.validate();
    GroupBatch batch;
    batch.condition = condition;
    batch.trajectories.resize(static_cast<std::size_t>(grpo.group_size));
    batch.rewards.resize(static_cast<std::size_t>(grpo.group_size));

    std::vector<Rng> streams;
    streams.reserve(static_cast<std::size_t>(grpo.group_size) * 2);
    for (int g = 0; g < grpo.group_size; ++g) {
        streams.push_back(rng.derive(static_cast<std::uint64_t>(2 * g)));
        streams.push_back(rng.derive(static_cast<std::uint64_t>(2 * g + 1)));  // retry stream
    }

    auto roll_member = [&](int g) {
        Rng member_rng = streams[static_cast<std::size_t>(2 * g)];
        try {
            batch.trajectories[static_cast<std::size_t>(g)] =
                sde_sample(snapshot, cfg, condition, grpo.grid, grpo.noise_level, member_rng);
        } catch (const NumericError&) {
            Rng retry_rng = streams[static_cast<std::size_t>(2 * g + 1)];
            try {
                batch.trajectories[static_cast<std::size_t>(g)] =
                    sde_sample(snapshot, cfg, condition, grpo.grid, grpo.noise_level, retry_rng);
            } catch (const NumericError& e) {
                throw NumericError("rollout_group: member " + std::to_string(g) +
                                   " non-finite after one resample; group rejected: " + e.what());
            }
        }
        const auto& traj = batch.trajectories[static_cast<std::size_t>(g)];
        batch.rewards[static_cast<std::size_t>(g)] =
            evaluate_rewards(traj.final_raster, traj.final_preclamp, condition.refs, condition.categories,
                             condition.instruction, weights);
    };

    if (grpo.threads <= 1 || grpo.group_size <= 1) {
        for (int g = 0; g < grpo.group_size; ++g) roll_member(g);
    } else {
        // Members are independent; results land in preassigned slots so the
        // outcome is identical to the sequential order.
        std::vector<std::thread> pool;
        std::atomic<int> next{0};
        std::vector<std::string> errors(static_cast<std::size_t>(grpo.group_size));
        const int n_threads = std::min(grpo.threads, grpo.group_size);
        for (int w = 0; w < n_threads; ++w)
            pool.emplace_back([&] {
                for (int g = next.fetch_add(1); g < grpo.group_size; g = next.fetch_add(1)) {
                    try {
                        roll_member(g);
                    } catch (const std::exception& e) {
                        errors[static_cast<std::size_t>(g)] = e.what();
                    }
                }
            });
        for (auto& th : pool) th.join();
        for (const auto& err : errors)
            if (!err.empty()) throw NumericError(err);
    }
    return batch;
}

std::vector<double> advantages(const std::vector<double>& rewards, double delta) {
    if (rewards.size() < 2) throw ConfigError("advantages: need a group of at least 2");
    const double n = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double std_dev = std::sqrt(var / n);
    std::vector<double> out(rewards.size(), 0.0);
    if (std_dev <= delta) return out;
    for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / std_dev;
    return out;
}

namespace {

struct StepTask {
    std::size_t traj = 0;
    std::size_t step = 0;
    double advantage = 0.0;
};

struct StepOutcome {
    double loss = 0.0;
    double ratio = 1.0;
    ParamMap grads;
};

StepOutcome eval_step(const ParamMap& params, const ModelConfig& cfg, const GroupBatch& batch,
                      const GrpoConfig& grpo, const StepTask& task, double inv_count) {
    const TrajectoryStep& step = batch.trajectories[task.traj].traj.steps[task.step];
    if (step.sigma == 0.0)
        throw ConfigError("grpo_loss: sigma = 0 step encountered; noise level a must be > 0 in RL");

    StepOutcome out;
    const double a_i = task.advantage;
    if (a_i == 0.0 && grpo.kl_coef == 0.0) return out;  // no signal and no KL: contribution is exactly 0

    Tape tape;
    const int logp_node = build_transition_logprob(tape, params, cfg, batch.condition, step, grpo.noise_level);
    const double logp_new = tape.value(logp_node).data[0];
    const double delta_val = logp_new - step.log_prob;
    const double ratio = std::exp(delta_val);
    out.ratio = ratio;

    const double lo = 1.0 - grpo.clip;
    const double hi = 1.0 + grpo.clip;
    const double clipped_ratio = std::clamp(ratio, lo, hi);
    const double unclipped = ratio * a_i;
    const double clipped = clipped_ratio * a_i;
    const double objective = std::min(unclipped, clipped);
    out.loss = -objective + grpo.kl_coef * delta_val * delta_val;

    // Gradient flows through the ratio only when the min selects the
    // unclipped branch or the clip is inactive.
    const bool grad_through_ratio = a_i != 0.0 && (unclipped <= clipped || (ratio > lo && ratio < hi));
    const bool grad_through_kl = grpo.kl_coef != 0.0;
    if (!grad_through_ratio && !grad_through_kl) return out;

    const int delta_node = tape.sub(logp_node, tape.constant(Tensor::scalar(step.log_prob)));
    int loss_node = -1;
    if (grad_through_ratio) loss_node = tape.scalar_mul(tape.exp(delta_node), -a_i);
    if (grad_through_kl) {
        const int kl_node = tape.scalar_mul(tape.mul(delta_node, delta_node), grpo.kl_coef);
        loss_node = loss_node < 0 ? kl_node : tape.add(loss_node, kl_node);
    }
    out.grads = tape.backward(loss_node, Tensor::scalar(inv_count));
    return out;
}

void accumulate(ParamMap& into, const ParamMap& grads) {
    for (const auto& [name, g] : grads) {
        auto it = into.find(name);
        if (it == into.end()) {
            into.emplace(name, g);
        } else {
            for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
        }
    }
}

}  // namespace

GrpoLossResult grpo_loss(const ParamMap& params, const ModelConfig& cfg, const GroupBatch& batch,
                         const GrpoConfig& grpo) {
    if (batch.advantages.size() != batch.trajectories.size())
        throw ConfigError("grpo_loss: advantages not set on the batch");

    std::vector<StepTask> tasks;
    const int stride = grpo.step_subsample > 1 ? grpo.step_subsample : 1;
    for (std::size_t i = 0; i < batch.trajectories.size(); ++i)
        for (std::size_t k = 0; k < batch.trajectories[i].traj.steps.size(); k += static_cast<std::size_t>(stride))
            tasks.push_back(StepTask{i, k, batch.advantages[i]});

    GrpoLossResult result;
    result.steps_used = static_cast<int>(tasks.size());
    if (tasks.empty()) return result;
    const double inv_count = 1.0 / static_cast<double>(tasks.size());

    std::vector<StepOutcome> outcomes(tasks.size());
    if (grpo.threads <= 1) {
        for (std::size_t i = 0; i < tasks.size(); ++i)
            outcomes[i] = eval_step(params, cfg, batch, grpo, tasks[i], inv_count);
    } else {
        std::vector<std::thread> pool;
        std::atomic<std::size_t> next{0};
        std::vector<std::string> errors(tasks.size());
        const int n_threads = std::min<std::size_t>(static_cast<std::size_t>(grpo.threads), tasks.size());
        for (int w = 0; w < n_threads; ++w)
            pool.emplace_back([&] {
                for (std::size_t i = next.fetch_add(1); i < tasks.size(); i = next.fetch_add(1)) {
                    try {
                        outcomes[i] = eval_step(params, cfg, batch, grpo, tasks[i], inv_count);
                    } catch (const std::exception& e) {
                        errors[i] = e.what();
                    }
                }
            });
        for (auto& th : pool) th.join();
        for (const auto& err : errors)
            if (!err.empty()) throw ConfigError(err);
    }

    double ratio_acc = 0.0;
    for (const auto& o : outcomes) {
        result.loss += o.loss * inv_count;
        ratio_acc += o.ratio;
        accumulate(result.grads, o.grads);
    }
    result.mean_ratio = ratio_acc * inv_count;
    return result;
}

GrpoTrainResult grpo_train(ParamMap& params, const ModelConfig& cfg, const std::vector<PairedSample>& prompts,
                           const GrpoConfig& grpo, const RewardWeights& weights, const std::string& out_dir) {
    grpo.validate();
    if (prompts.empty()) throw DataError("grpo_train: empty prompt dataset");
    if (!(grpo.noise_level > 0.0)) throw ConfigError("grpo_train: noise level a must be > 0 for RL");

    fs::create_directories(out_dir);
    std::ofstream metrics((fs::path(out_dir) / "metrics.jsonl").string(), std::ios::trunc);
    if (!metrics) throw DataError("grpo_train: cannot write metrics log in " + out_dir);

    Rng rng(mix64(grpo.seed ^ 0x6772706f5f726e67ULL));
    AdamConfig adam_cfg;
    adam_cfg.lr = grpo.lr;
    AdamState adam_state;

    GrpoTrainResult result;
    for (int iter = 0; iter < grpo.iterations; ++iter) {
        Rng iter_rng = rng.derive(static_cast<std::uint64_t>(iter));
        // One frozen snapshot per iteration: rollouts and old log-probs never
        // see the parameters updated later in the same iteration.
        const ParamMap snapshot = params;

        ParamMap grads;
        GrpoIterationLog log;
        log.iter = iter;
        bool nonfinite = false;
        for (int p = 0; p < grpo.prompts_per_batch; ++p) {
            Rng prompt_rng = iter_rng.derive(static_cast<std::uint64_t>(p));
            const auto& prompt = prompts[static_cast<std::size_t>(
                prompt_rng.uniform_int(0, static_cast<std::int64_t>(prompts.size()) - 1))];
            GroupBatch batch = rollout_group(snapshot, cfg, condition_of(prompt), grpo, weights, prompt_rng);

            std::vector<double> agg;
            agg.reserve(batch.rewards.size());
            for (const auto& r : batch.rewards) agg.push_back(r.aggregate);
            batch.advantages = advantages(agg, grpo.adv_std_floor);

            const GrpoLossResult lr = grpo_loss(params, cfg, batch, grpo);
            if (!std::isfinite(lr.loss)) {
                nonfinite = true;
                break;
            }
            const double inv_p = 1.0 / static_cast<double>(grpo.prompts_per_batch);
            log.loss += lr.loss * inv_p;
            for (const auto& r : batch.rewards) {
                const double inv = inv_p / static_cast<double>(batch.rewards.size());
                log.mean_psr += r.psr * inv;
                log.mean_semantic += r.semantic * inv;
                log.mean_aesthetic += r.aesthetic * inv;
                log.mean_aggregate += r.aggregate * inv;
            }
            ParamMap scaled = lr.grads;
            for (auto& [name, g] : scaled)
                for (auto& v : g.data) v *= inv_p;
            accumulate(grads, scaled);
        }
        if (nonfinite) {
            result.halted_nonfinite = true;
            metrics << "{\"iter\":" << iter << ",\"event\":\"halted_nonfinite_loss\"}\n";
            break;
        }
        log.grad_norm = grad_norm(grads);
        if (adam_step(params, grads, adam_state, adam_cfg) == AdamResult::kRejectedNonFinite)
            metrics << "{\"iter\":" << iter << ",\"event\":\"rejected_nonfinite_grad\"}\n";

        metrics << "{\"iter\":" << log.iter << ",\"mean_psr\":" << log.mean_psr
                << ",\"mean_semantic\":" << log.mean_semantic << ",\"mean_aesthetic\":" << log.mean_aesthetic
                << ",\"mean_aggregate\":" << log.mean_aggregate << ",\"loss\":" << log.loss
                << ",\"grad_norm\":" << log.grad_norm << ",\"seed\":" << grpo.seed << "}\n";
        metrics.flush();
        result.log.push_back(log);
        result.iterations_done = iter + 1;

        if (grpo.checkpoint_every > 0 && (iter + 1) % grpo.checkpoint_every == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "checkpoint_%06d.ckpt", iter + 1);
            save_checkpoint((fs::path(out_dir) / name).string(), params);
        }
    }
    save_checkpoint((fs::path(out_dir) / "checkpoint_final.ckpt").string(), params);
    save_model_config((fs::path(out_dir) / "model_config.json").string(), cfg);
    return result;
}

}  // namespace psrlab
