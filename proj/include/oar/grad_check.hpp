#pragma once

#include <cmath>
#include <functional>

#include "oar/params.hpp"

namespace oar {

// Central-difference check of analytic gradients. `forward` must run the
// forward pass, call backward, accumulate gradients into `params`, and
// return the scalar loss. Gradients are zeroed around finite-difference
// evaluations so FD probes stay clean.
inline double grad_check(ParamSet<double>& params,
                         const std::function<double()>& forward,
                         double step) {
    params.zero_grads();
    const double base = forward();
    if (!std::isfinite(base)) throw Error("grad_check: non-finite loss at evaluation point");

    // Snapshot analytic gradients.
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params.params()) analytic.push_back(p.grad.data);

    double max_rel = 0.0;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params.params()[pi];
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value.data[i];
            p.value.data[i] = orig + step;
            params.zero_grads();
            const double up = forward();
            p.value.data[i] = orig - step;
            params.zero_grads();
            const double down = forward();
            p.value.data[i] = orig;
            if (!std::isfinite(up) || !std::isfinite(down)) {
                throw Error("grad_check: non-finite loss during finite differences");
            }
            const double fd = (up - down) / (2.0 * step);
            const double an = analytic[pi][i];
            const double denom = std::max({std::abs(an), std::abs(fd), 1e-8});
            max_rel = std::max(max_rel, std::abs(an - fd) / denom);
        }
    }
    params.zero_grads();
    return max_rel;
}

}  // namespace oar
