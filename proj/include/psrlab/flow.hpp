#ifndef PSRLAB_FLOW_HPP_
#define PSRLAB_FLOW_HPP_

#include <array>
#include <functional>
#include <iosfwd>
#include <vector>

#include "psrlab/datagen.hpp"
#include "psrlab/model.hpp"
#include "psrlab/optim.hpp"
#include "psrlab/rng.hpp"

namespace psrlab {

// Time runs from noise (t = 0) to data (t = 1). The grid is clipped away
// from both endpoints: sigma_t diverges at the noise end and the drift
// correction is singular at the data end.
struct TimeGrid {
    int steps = 28;
    double epsilon = 1e-3;

    void validate() const;
    double dt() const { return (1.0 - 2.0 * epsilon) / static_cast<double>(steps); }
    double point(int k) const { return epsilon + static_cast<double>(k) * dt(); }
};

// Noise scale of the marginal-preserving SDE: a * sqrt((1-t)/t). Large where
// the state is still noise, vanishing as the state approaches data, so the
// stochastic sampler explores early and refines deterministically.
double sde_sigma(double t, double a);

// Velocity field over a batch of flat states: [B, D] x t -> [B, D].
using VelocityFn = std::function<Tensor(const Tensor& states, double t)>;

struct TrajectoryStep {
    double t = 0.0;
    double dt = 0.0;
    double sigma = 0.0;        // sde_sigma(t, a)
    double noise_scale = 0.0;  // sigma * sqrt(dt)
    double log_prob = 0.0;     // Gaussian log-density of next_state under N(mean, noise_scale^2 I)
    std::vector<double> state;
    std::vector<double> velocity;
    std::vector<double> drift_mean;
    std::vector<double> next_state;
};

struct Trajectory {
    std::vector<TrajectoryStep> steps;
    double total_log_prob = 0.0;
    std::vector<double> final_state;
};

// Euler integration of the velocity field from t = eps to 1 - eps.
Tensor ode_integrate(const VelocityFn& velocity, Tensor x, const TimeGrid& grid);

// Euler-Maruyama integration; with a = 0 the states reduce to the ODE path
// bit-for-bit (the per-step log_prob is 0 in that degenerate case).
Trajectory sde_integrate(const VelocityFn& velocity, std::vector<double> x0, const TimeGrid& grid, double a,
                         Rng& rng);

// ---------------------------------------------------------------------------
// Conditioned wrappers over the velocity model
// ---------------------------------------------------------------------------

struct Condition {
    std::vector<Raster> refs;
    Instruction instruction;
    std::vector<int> categories;
};

Condition condition_of(const PairedSample& s);

VelocityFn model_velocity_fn(const ParamMap& params, const ModelConfig& cfg, const Condition& cond);

struct SampleResult {
    Raster raster;    // clamped to [0,1]
    Raster preclamp;  // raw values, used by the aesthetic proxy
};

SampleResult ode_sample(const ParamMap& params, const ModelConfig& cfg, const Condition& cond, const TimeGrid& grid,
                        Rng& rng);

struct ModelTrajectory {
    Trajectory traj;
    Raster final_raster;
    Raster final_preclamp;
};

ModelTrajectory sde_sample(const ParamMap& params, const ModelConfig& cfg, const Condition& cond,
                           const TimeGrid& grid, double a, Rng& rng);

// Rebuilds the transition mean of a recorded step under the current
// parameters and returns the node holding the Gaussian log-density of the
// recorded next_state. Rejects sigma = 0 steps (the ratio is undefined).
int build_transition_logprob(Tape& tape, const ParamMap& params, const ModelConfig& cfg, const Condition& cond,
                             const TrajectoryStep& step, double a);

double transition_logprob(const ParamMap& params, const ModelConfig& cfg, const Condition& cond,
                          const TrajectoryStep& step, double a);

// ---------------------------------------------------------------------------
// Flow-matching loss and SFT
// ---------------------------------------------------------------------------

struct FmLossResult {
    double loss = 0.0;
    ParamMap grads;
};

// Per sample: z1 = patch-space target, z0 ~ N(0, I), t ~ U(0,1),
// z_t = (1-t) z0 + t z1, residual = (z1 - z0) - v(z_t, t | refs, instruction).
// Loss is the mean squared residual entry, averaged over the batch.
FmLossResult fm_loss(const ParamMap& params, const ModelConfig& cfg,
                     const std::vector<const PairedSample*>& batch, Rng& rng);

struct SftConfig {
    int steps = 5000;
    int batch = 4;
    double lr = 1e-4;
    std::uint64_t seed = 0;
    // Reference-count sampling probabilities for 2, 3 and 4 references.
    std::array<double, 3> ref_count_probs = {0.9, 0.05, 0.05};
    int log_every = 200;
};

struct SftResult {
    int steps_done = 0;
    double mean_recent_loss = 0.0;  // mean loss over the last log window
};

// First-stage training: flow-matching loss with the multi-reference count
// mix; one Adam step per batch. Metrics (JSONL) are written per log window.
SftResult sft_train(ParamMap& params, const ModelConfig& cfg, const std::vector<PairedSample>& data,
                    const SftConfig& cfg_sft, std::ostream* metrics);

}  // namespace psrlab

#endif  // PSRLAB_FLOW_HPP_
