#include "psrlab/embed.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "psrlab/common.hpp"
#include "psrlab/optim.hpp"
#include "psrlab/rng.hpp"

namespace psrlab {

namespace {

constexpr int kHueBins = 12;
constexpr int kSatBins = 4;
constexpr int kHistDim = kHueBins * kSatBins;
constexpr int kMomentDim = 7;
constexpr int kPatchSide = 8;
constexpr int kPatchDim = kPatchSide * kPatchSide;
constexpr int kFeatureDim = kHistDim + kMomentDim + kPatchDim;

// Block weights frozen after the separation / background-invariance
// calibration runs (see tests): hue-sat statistics dominate, the raw gray
// patch contributes weakly so backgrounds cannot swing the similarity.
constexpr double kHistWeight = 2.0;
constexpr double kMomentWeight = 1.0;
constexpr double kPatchWeight = 0.35;

const std::vector<double>& projection_matrix() {
    static const std::vector<double> proj = [] {
        Rng rng(kEmbedProjectionSeed);
        std::vector<double> m(static_cast<std::size_t>(kEmbedDim) * kFeatureDim);
        const double scale = 1.0 / std::sqrt(static_cast<double>(kFeatureDim));
        for (auto& v : m) v = rng.normal() * scale;
        return m;
    }();
    return proj;
}

void hu_moments(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w, double* out7) {
    double m00 = 0.0, m10 = 0.0, m01 = 0.0;
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            if (mask[r * w + c]) {
                m00 += 1.0;
                m10 += static_cast<double>(r);
                m01 += static_cast<double>(c);
            }
    if (m00 <= 0.0) {
        std::fill(out7, out7 + 7, 0.0);
        return;
    }
    const double cr = m10 / m00, cc = m01 / m00;
    double mu[4][4] = {};
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            if (mask[r * w + c]) {
                const double x = static_cast<double>(r) - cr;
                const double y = static_cast<double>(c) - cc;
                double xp = 1.0;
                for (int p = 0; p <= 3; ++p) {
                    double yq = 1.0;
                    for (int q = 0; q <= 3 - p; ++q) {
                        mu[p][q] += xp * yq;
                        yq *= y;
                    }
                    xp *= x;
                }
            }
    auto eta = [&](int p, int q) {
        const double gamma = 1.0 + static_cast<double>(p + q) / 2.0;
        return mu[p][q] / std::pow(m00, gamma);
    };
    const double n20 = eta(2, 0), n02 = eta(0, 2), n11 = eta(1, 1);
    const double n30 = eta(3, 0), n03 = eta(0, 3), n12 = eta(1, 2), n21 = eta(2, 1);
    out7[0] = n20 + n02;
    out7[1] = (n20 - n02) * (n20 - n02) + 4.0 * n11 * n11;
    out7[2] = (n30 - 3.0 * n12) * (n30 - 3.0 * n12) + (3.0 * n21 - n03) * (3.0 * n21 - n03);
    out7[3] = (n30 + n12) * (n30 + n12) + (n21 + n03) * (n21 + n03);
    out7[4] = (n30 - 3.0 * n12) * (n30 + n12) *
                  ((n30 + n12) * (n30 + n12) - 3.0 * (n21 + n03) * (n21 + n03)) +
              (3.0 * n21 - n03) * (n21 + n03) *
                  (3.0 * (n30 + n12) * (n30 + n12) - (n21 + n03) * (n21 + n03));
    out7[5] = (n20 - n02) * ((n30 + n12) * (n30 + n12) - (n21 + n03) * (n21 + n03)) +
              4.0 * n11 * (n30 + n12) * (n21 + n03);
    out7[6] = (3.0 * n21 - n03) * (n30 + n12) *
                  ((n30 + n12) * (n30 + n12) - 3.0 * (n21 + n03) * (n21 + n03)) -
              (n30 - 3.0 * n12) * (n21 + n03) *
                  (3.0 * (n30 + n12) * (n30 + n12) - (n21 + n03) * (n21 + n03));
    // Log-rescale so all seven live on comparable scales.
    for (int i = 0; i < 7; ++i) out7[i] = std::copysign(std::log1p(std::fabs(out7[i]) * 1e3) / 10.0, out7[i]);
}

}  // namespace

Embedding embed(const Raster& input) {
    if (input.height == 0 || input.width == 0 || input.numel() == 0) throw DataError("embed: empty crop");
    const Raster cropped = input.clamped01();
    const std::size_t h = cropped.height, w = cropped.width;

    std::vector<double> features(kFeatureDim, 0.0);

    // (a) hue x saturation histogram. Contributions are weighted by
    // saturation^2 so the near-neutral background and decoration pixels
    // inside the crop barely register.
    std::vector<Hsv> hsv(h * w);
    for (std::size_t r = 0; r < h; ++r)
        for (std::size_t c = 0; c < w; ++c)
            hsv[r * w + c] = rgb_to_hsv(cropped.at(r, c, 0), cropped.at(r, c, 1), cropped.at(r, c, 2));
    double weight_total = 0.0;
    for (const auto& px : hsv) {
        int hb = static_cast<int>(px.h * kHueBins);
        hb = std::clamp(hb, 0, kHueBins - 1);
        int sb = static_cast<int>(px.s * kSatBins);
        sb = std::clamp(sb, 0, kSatBins - 1);
        const double weight = px.s * px.s;
        features[static_cast<std::size_t>(hb * kSatBins + sb)] += weight;
        weight_total += weight;
    }
    const double inv_n = 1.0 / std::max(weight_total, 1e-9);
    for (int i = 0; i < kHistDim; ++i) features[static_cast<std::size_t>(i)] *= inv_n * kHistWeight;

    // (b) Hu moments of the dominant-hue mask (saturated pixels only).
    std::array<double, kHueBins> bin_counts{};
    for (const auto& px : hsv)
        if (px.s >= 0.4 && px.v >= 0.2) {
            int hb = std::clamp(static_cast<int>(px.h * kHueBins), 0, kHueBins - 1);
            bin_counts[static_cast<std::size_t>(hb)] += 1.0;
        }
    const int dominant =
        static_cast<int>(std::max_element(bin_counts.begin(), bin_counts.end()) - bin_counts.begin());
    std::vector<std::uint8_t> mask(h * w, 0);
    if (bin_counts[static_cast<std::size_t>(dominant)] > 0.0)
        for (std::size_t i = 0; i < hsv.size(); ++i) {
            const auto& px = hsv[i];
            mask[i] = px.s >= 0.4 && px.v >= 0.2 &&
                      std::clamp(static_cast<int>(px.h * kHueBins), 0, kHueBins - 1) == dominant;
        }
    double hu[7];
    hu_moments(mask, h, w, hu);
    for (int i = 0; i < kMomentDim; ++i) features[static_cast<std::size_t>(kHistDim + i)] = hu[i] * kMomentWeight;

    // (c) 8x8 bilinear-downsampled grayscale.
    for (int pr = 0; pr < kPatchSide; ++pr)
        for (int pc = 0; pc < kPatchSide; ++pc) {
            const double src_r = (static_cast<double>(pr) + 0.5) / kPatchSide * static_cast<double>(h) - 0.5;
            const double src_c = (static_cast<double>(pc) + 0.5) / kPatchSide * static_cast<double>(w) - 0.5;
            const double fr = std::clamp(src_r, 0.0, static_cast<double>(h - 1));
            const double fc = std::clamp(src_c, 0.0, static_cast<double>(w - 1));
            const std::size_t r0 = static_cast<std::size_t>(fr);
            const std::size_t c0 = static_cast<std::size_t>(fc);
            const std::size_t r1 = std::min(r0 + 1, h - 1);
            const std::size_t c1 = std::min(c0 + 1, w - 1);
            const double ar = fr - static_cast<double>(r0);
            const double ac = fc - static_cast<double>(c0);
            auto gray = [&](std::size_t r, std::size_t c) {
                return 0.299 * cropped.at(r, c, 0) + 0.587 * cropped.at(r, c, 1) + 0.114 * cropped.at(r, c, 2);
            };
            const double g = (1.0 - ar) * ((1.0 - ac) * gray(r0, c0) + ac * gray(r0, c1)) +
                             ar * ((1.0 - ac) * gray(r1, c0) + ac * gray(r1, c1));
            features[static_cast<std::size_t>(kHistDim + kMomentDim + pr * kPatchSide + pc)] = g * kPatchWeight;
        }

    // Fixed seeded projection, then L2 normalization with a zero guard.
    const auto& proj = projection_matrix();
    Embedding out;
    for (int i = 0; i < kEmbedDim; ++i) {
        double acc = 0.0;
        const double* row = proj.data() + static_cast<std::size_t>(i) * kFeatureDim;
        for (int j = 0; j < kFeatureDim; ++j) acc += row[j] * features[static_cast<std::size_t>(j)];
        out.vector[static_cast<std::size_t>(i)] = acc;
    }
    double norm = 0.0;
    for (double v : out.vector) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        out.vector.fill(0.0);
        out.vector[0] = 1.0;
        return out;
    }
    for (double& v : out.vector) v /= norm;
    return out;
}

double similarity(const Embedding& a, const Embedding& b) {
    double acc = 0.0;
    for (int i = 0; i < kEmbedDim; ++i)
        acc += a.vector[static_cast<std::size_t>(i)] * b.vector[static_cast<std::size_t>(i)];
    return std::clamp(acc, -1.0, 1.0);
}

double similarity01(const Embedding& a, const Embedding& b) { return std::max(0.0, similarity(a, b)); }

}  // namespace psrlab
