#ifndef PSRLAB_OPTIM_HPP_
#define PSRLAB_OPTIM_HPP_

#include <cstdint>
#include <map>
#include <string>

#include "psrlab/tensor.hpp"

namespace psrlab {

// Named parameter snapshot. std::map keeps iteration (and therefore
// serialization and update order) deterministic.
using ParamMap = std::map<std::string, Tensor>;

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    ParamMap first_moment;
    ParamMap second_moment;
    std::int64_t step = 0;
};

enum class AdamResult { kApplied, kRejectedNonFinite };

// Standard Adam with bias correction. A non-finite gradient rejects the
// whole step: params and state stay untouched and the caller logs the event.
AdamResult adam_step(ParamMap& params, const ParamMap& grads, AdamState& state, const AdamConfig& cfg);

double grad_norm(const ParamMap& grads);

// Checkpoint binary format (little-endian):
//   char[8]  magic "PSRLCKPT"
//   u32      version (1)
//   u32      embed_seed (projection seed used by the reward embedder)
//   u64      param count
//   per parameter, sorted by name:
//     u32 name length, name bytes, u32 rank, u64 dims[rank], f64 data[]
// Round-trips bit-exactly.
void save_checkpoint(const std::string& path, const ParamMap& params);
ParamMap load_checkpoint(const std::string& path);

constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kEmbedProjectionSeed = 42;

}  // namespace psrlab

#endif  // PSRLAB_OPTIM_HPP_
