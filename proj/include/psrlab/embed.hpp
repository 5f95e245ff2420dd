#ifndef PSRLAB_EMBED_HPP_
#define PSRLAB_EMBED_HPP_

#include <array>

#include "psrlab/raster.hpp"

namespace psrlab {

constexpr int kEmbedDim = 64;

// Unit-norm crop descriptor used for all similarity scoring.
struct Embedding {
    std::array<double, kEmbedDim> vector{};
};

// Deterministic crop embedding: hue/saturation histogram, log-scaled Hu
// moments of the dominant-hue mask, and an 8x8 bilinear grayscale patch,
// projected by a fixed seeded random matrix and L2-normalized.
Embedding embed(const Raster& crop);

// Plain dot product; both inputs are unit-norm so the result is in [-1,1].
double similarity(const Embedding& a, const Embedding& b);

// Cosine clamped to [0,1] as used by the reward stack.
double similarity01(const Embedding& a, const Embedding& b);

}  // namespace psrlab

#endif  // PSRLAB_EMBED_HPP_
