#ifndef PSRLAB_TEST_SUPPORT_HPP_
#define PSRLAB_TEST_SUPPORT_HPP_

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "psrlab/optim.hpp"
#include "psrlab/rng.hpp"

namespace psrlab::test {

// Central-difference gradient oracle. Kept independent of the tape: it only
// re-evaluates the loss value under perturbed parameters.
inline double fd_gradient(const std::function<double(const ParamMap&)>& loss, ParamMap params,
                          const std::string& name, std::size_t index, double step) {
    params.at(name).data.at(index) += step;
    const double up = loss(params);
    params.at(name).data.at(index) -= 2.0 * step;
    const double down = loss(params);
    return (up - down) / (2.0 * step);
}

inline double rel_err(double analytic, double numeric) {
    const double scale = std::max({std::fabs(analytic), std::fabs(numeric), 1e-3});
    return std::fabs(analytic - numeric) / scale;
}

struct FdReport {
    double max_rel_err = 0.0;
    int checked = 0;
};

// Compares analytic gradients against central differences on a sample of
// parameter entries.
inline FdReport fd_compare(const std::function<double(const ParamMap&)>& loss, const ParamMap& params,
                           const ParamMap& analytic, int entries_per_param, Rng& rng, double step = 1e-5) {
    FdReport report;
    for (const auto& [name, grad] : analytic) {
        const std::size_t n = grad.numel();
        for (int e = 0; e < entries_per_param; ++e) {
            const std::size_t idx =
                n == 1 ? 0 : static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(n) - 1));
            const double numeric = fd_gradient(loss, params, name, idx, step);
            report.max_rel_err = std::max(report.max_rel_err, rel_err(grad.data[idx], numeric));
            ++report.checked;
        }
    }
    return report;
}

inline double mean_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x;
    return v.empty() ? 0.0 : acc / static_cast<double>(v.size());
}

}  // namespace psrlab::test

#endif  // PSRLAB_TEST_SUPPORT_HPP_
