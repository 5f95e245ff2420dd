#include "psrlab/flow.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>
#include <sstream>

#include "psrlab/common.hpp"

namespace psrlab {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

}  // namespace

void TimeGrid::validate() const {
    if (steps < 1) throw ConfigError("time grid: steps must be >= 1");
    if (!(epsilon > 0.0) || !(epsilon < 0.5)) throw ConfigError("time grid: epsilon must lie in (0, 0.5)");
}

double sde_sigma(double t, double a) {
    if (a < 0.0) throw ConfigError("sde_sigma: noise level a must be >= 0");
    if (!(t > 0.0) || !(t < 1.0)) throw ConfigError("sde_sigma: t must lie in (0,1)");
    return a * std::sqrt((1.0 - t) / t);
}

Tensor ode_integrate(const VelocityFn& velocity, Tensor x, const TimeGrid& grid) {
    grid.validate();
    const double dt = grid.dt();
    for (int k = 0; k < grid.steps; ++k) {
        const double t = grid.point(k);
        const Tensor v = velocity(x, t);
        if (!v.same_shape(x)) throw DataError("ode_integrate: velocity shape mismatch");
        for (std::size_t i = 0; i < x.data.size(); ++i) x.data[i] += v.data[i] * dt;
        if (!x.all_finite())
            throw NumericError("ode_integrate: non-finite state after step " + std::to_string(k));
    }
    return x;
}

Trajectory sde_integrate(const VelocityFn& velocity, std::vector<double> x0, const TimeGrid& grid, double a,
                         Rng& rng) {
    grid.validate();
    if (a < 0.0) throw ConfigError("sde_integrate: noise level a must be >= 0");
    const double dt = grid.dt();
    const std::size_t dim = x0.size();

    Trajectory traj;
    traj.steps.reserve(static_cast<std::size_t>(grid.steps));
    std::vector<double> x = std::move(x0);

    for (int k = 0; k < grid.steps; ++k) {
        TrajectoryStep step;
        step.t = grid.point(k);
        step.dt = dt;
        step.state = x;

        Tensor xin({1, dim}, x);
        const Tensor v = velocity(xin, step.t);
        if (v.numel() != dim) throw DataError("sde_integrate: velocity shape mismatch");
        step.velocity = v.data;

        // Marginal-preserving drift: the correction pulls the state toward
        // t*v so the extra diffusion does not widen the flow's marginals.
        step.drift_mean.resize(dim);
        if (a == 0.0) {
            // Same expression as the Euler ODE step, so the a = 0 trajectory
            // is bit-identical to the ODE path.
            for (std::size_t i = 0; i < dim; ++i) step.drift_mean[i] = x[i] + step.velocity[i] * dt;
        } else {
            const double coef = a * a / (2.0 * step.t);  // sigma^2 / (2 (1-t))
            const double state_scale = 1.0 - coef * dt;
            const double vel_scale = dt * (1.0 + coef * step.t);
            for (std::size_t i = 0; i < dim; ++i)
                step.drift_mean[i] = x[i] * state_scale + step.velocity[i] * vel_scale;
        }

        step.sigma = a == 0.0 ? 0.0 : sde_sigma(step.t, a);
        step.noise_scale = step.sigma * std::sqrt(dt);
        step.next_state.resize(dim);
        if (a == 0.0) {
            step.next_state = step.drift_mean;
            step.log_prob = 0.0;  // deterministic transition; GRPO rejects these
        } else {
            const double var = step.noise_scale * step.noise_scale;
            double sq = 0.0;
            for (std::size_t i = 0; i < dim; ++i) {
                const double noise = step.noise_scale * rng.normal();
                step.next_state[i] = step.drift_mean[i] + noise;
                sq += noise * noise;
            }
            step.log_prob =
                -0.5 * static_cast<double>(dim) * std::log(kTwoPi * var) - sq / (2.0 * var);
        }

        x = step.next_state;
        bool finite = std::isfinite(step.log_prob);
        for (double val : x)
            if (!std::isfinite(val)) finite = false;
        if (!finite) throw NumericError("sde_integrate: non-finite state after step " + std::to_string(k));
        traj.total_log_prob += step.log_prob;
        traj.steps.push_back(std::move(step));
    }
    traj.final_state = x;
    return traj;
}

Condition condition_of(const PairedSample& s) {
    if (!s.instruction_set) throw DataError("condition_of: sample has no instruction");
    return Condition{s.refs, s.instruction, s.categories};
}

VelocityFn model_velocity_fn(const ParamMap& params, const ModelConfig& cfg, const Condition& cond) {
    // Reference patchification and positions depend only on the condition;
    // build the layout once and swap the noise tokens per call.
    auto layout = std::make_shared<TokenLayout>(
        tokenize(Tensor({static_cast<std::size_t>(cfg.tokens_per_image()),
                         static_cast<std::size_t>(cfg.patch_dim())}),
                 cond.refs, cond.instruction, cfg));
    const ParamMap* p = &params;
    const ModelConfig* c = &cfg;
    return [layout, p, c](const Tensor& states, double t) {
        if (states.rank() != 2 || states.shape[1] != static_cast<std::size_t>(c->state_dim()))
            throw DataError("model velocity: expected [B, state_dim] input");
        Tensor out(states.shape);
        for (std::size_t b = 0; b < states.shape[0]; ++b) {
            std::vector<double> row(states.data.begin() + static_cast<std::ptrdiff_t>(b * states.shape[1]),
                                    states.data.begin() + static_cast<std::ptrdiff_t>((b + 1) * states.shape[1]));
            layout->noise_patches = state_to_tokens(row, *c);
            const Tensor v = velocity_forward(*p, *c, *layout, t);
            std::copy(v.data.begin(), v.data.end(),
                      out.data.begin() + static_cast<std::ptrdiff_t>(b * states.shape[1]));
        }
        return out;
    };
}

SampleResult ode_sample(const ParamMap& params, const ModelConfig& cfg, const Condition& cond, const TimeGrid& grid,
                        Rng& rng) {
    const auto dim = static_cast<std::size_t>(cfg.state_dim());
    Tensor x({1, dim}, rng.normal_vec(dim));
    x = ode_integrate(model_velocity_fn(params, cfg, cond), std::move(x), grid);
    const Tensor tokens = state_to_tokens(x.data, cfg);
    SampleResult out;
    out.preclamp = unpatchify(tokens, cfg, false);
    out.raster = unpatchify(tokens, cfg, true);
    return out;
}

ModelTrajectory sde_sample(const ParamMap& params, const ModelConfig& cfg, const Condition& cond,
                           const TimeGrid& grid, double a, Rng& rng) {
    const auto dim = static_cast<std::size_t>(cfg.state_dim());
    ModelTrajectory out;
    out.traj = sde_integrate(model_velocity_fn(params, cfg, cond), rng.normal_vec(dim), grid, a, rng);
    const Tensor tokens = state_to_tokens(out.traj.final_state, cfg);
    out.final_preclamp = unpatchify(tokens, cfg, false);
    out.final_raster = unpatchify(tokens, cfg, true);
    return out;
}

int build_transition_logprob(Tape& tape, const ParamMap& params, const ModelConfig& cfg, const Condition& cond,
                             const TrajectoryStep& step, double a) {
    if (step.state.empty() || step.next_state.empty())
        throw DataError("transition_logprob: step fields not populated");
    if (step.sigma == 0.0 || a == 0.0)
        throw ConfigError("transition_logprob: sigma = 0 step has no density (a must be > 0)");

    TokenLayout layout = tokenize(state_to_tokens(step.state, cfg), cond.refs, cond.instruction, cfg);
    const int v_node = build_velocity_graph(tape, params, cfg, layout, step.t);

    const double coef = a * a / (2.0 * step.t);
    const double state_scale = 1.0 - coef * step.dt;
    const double vel_scale = step.dt * (1.0 + coef * step.t);

    const std::size_t dim = step.state.size();
    Tensor scaled_state({static_cast<std::size_t>(cfg.tokens_per_image()),
                         static_cast<std::size_t>(cfg.patch_dim())});
    for (std::size_t i = 0; i < dim; ++i) scaled_state.data[i] = step.state[i] * state_scale;
    Tensor next = state_to_tokens(step.next_state, cfg);

    const int mean_node = tape.add(tape.constant(std::move(scaled_state)), tape.scalar_mul(v_node, vel_scale));
    const int diff = tape.sub(tape.constant(std::move(next)), mean_node);
    const int sq_sum = tape.sum_all(tape.mul(diff, diff));
    const double var = step.noise_scale * step.noise_scale;
    const double log_norm = -0.5 * static_cast<double>(dim) * std::log(kTwoPi * var);
    return tape.add(tape.scalar_mul(sq_sum, -1.0 / (2.0 * var)), tape.constant(Tensor::scalar(log_norm)));
}

double transition_logprob(const ParamMap& params, const ModelConfig& cfg, const Condition& cond,
                          const TrajectoryStep& step, double a) {
    Tape tape;
    return tape.value(build_transition_logprob(tape, params, cfg, cond, step, a)).data[0];
}

FmLossResult fm_loss(const ParamMap& params, const ModelConfig& cfg,
                     const std::vector<const PairedSample*>& batch, Rng& rng) {
    if (batch.empty()) throw ConfigError("fm_loss: empty batch");
    FmLossResult out;
    const double inv_b = 1.0 / static_cast<double>(batch.size());
    for (const PairedSample* sample : batch) {
        const Tensor z1 = patchify(sample->target, cfg.patch);
        Tensor z0(z1.shape);
        for (auto& v : z0.data) v = rng.normal();
        const double t = rng.uniform();
        Tensor zt(z1.shape);
        Tensor target(z1.shape);
        for (std::size_t i = 0; i < z1.data.size(); ++i) {
            zt.data[i] = (1.0 - t) * z0.data[i] + t * z1.data[i];
            target.data[i] = z1.data[i] - z0.data[i];
        }
        TokenLayout layout = tokenize(zt, sample->refs, sample->instruction, cfg);
        Tape tape;
        const int v_node = build_velocity_graph(tape, params, cfg, layout, t);
        const int diff = tape.sub(tape.constant(std::move(target)), v_node);
        const int loss_node = tape.mean_all(tape.mul(diff, diff));
        out.loss += tape.value(loss_node).data[0] * inv_b;
        auto grads = tape.backward(loss_node, Tensor::scalar(inv_b));
        for (auto& [name, g] : grads) {
            auto it = out.grads.find(name);
            if (it == out.grads.end()) {
                out.grads.emplace(name, std::move(g));
            } else {
                for (std::size_t i = 0; i < g.data.size(); ++i) it->second.data[i] += g.data[i];
            }
        }
    }
    return out;
}

SftResult sft_train(ParamMap& params, const ModelConfig& cfg, const std::vector<PairedSample>& data,
                    const SftConfig& cfg_sft, std::ostream* metrics) {
    if (cfg_sft.steps < 0) throw ConfigError("sft: steps must be >= 0");
    if (cfg_sft.batch < 1) throw ConfigError("sft: batch must be >= 1");

    // Bucket the dataset by reference count.
    std::array<std::vector<const PairedSample*>, 3> buckets;  // counts 2, 3, 4
    for (const auto& s : data) {
        const int n = static_cast<int>(s.refs.size());
        if (n >= 2 && n <= 4) buckets[static_cast<std::size_t>(n - 2)].push_back(&s);
    }
    for (std::size_t i = 0; i < buckets.size(); ++i)
        if (cfg_sft.ref_count_probs[i] > 0.0 && buckets[i].empty())
            throw ConfigError("sft: dataset has no samples with " + std::to_string(i + 2) +
                              " references but its sampling probability is positive");

    Rng rng(mix64(cfg_sft.seed ^ 0x7366745f74726169ULL));
    AdamConfig adam_cfg;
    adam_cfg.lr = cfg_sft.lr;
    AdamState adam_state;

    SftResult result;
    double window_loss = 0.0;
    int window_count = 0;
    const std::vector<double> probs(cfg_sft.ref_count_probs.begin(), cfg_sft.ref_count_probs.end());
    for (int step = 0; step < cfg_sft.steps; ++step) {
        std::vector<const PairedSample*> batch;
        batch.reserve(static_cast<std::size_t>(cfg_sft.batch));
        for (int b = 0; b < cfg_sft.batch; ++b) {
            const auto& bucket = buckets[rng.categorical(probs)];
            batch.push_back(bucket[static_cast<std::size_t>(rng.uniform_int(
                0, static_cast<std::int64_t>(bucket.size()) - 1))]);
        }
        const FmLossResult fm = fm_loss(params, cfg, batch, rng);
        if (adam_step(params, fm.grads, adam_state, adam_cfg) == AdamResult::kRejectedNonFinite && metrics)
            (*metrics) << "{\"step\":" << step << ",\"event\":\"rejected_nonfinite_grad\"}\n";
        window_loss += fm.loss;
        ++window_count;
        if (metrics && cfg_sft.log_every > 0 && (step + 1) % cfg_sft.log_every == 0) {
            (*metrics) << "{\"step\":" << step + 1 << ",\"loss\":" << window_loss / window_count << "}\n";
            result.mean_recent_loss = window_loss / window_count;
            window_loss = 0.0;
            window_count = 0;
        }
        result.steps_done = step + 1;
    }
    if (window_count > 0) result.mean_recent_loss = window_loss / window_count;
    return result;
}

}  // namespace psrlab
