#pragma once

#include <cmath>
#include <functional>

#include "arlab/optim.hpp"
#include "arlab/rng.hpp"

namespace testutil {

// Central-difference check of analytic parameter gradients against a scalar
// loss recomputation. Checks every entry of every parameter (use stride to
// subsample large stores).
inline double fd_max_rel_err(const std::function<double(const arlab::ParamStore&)>& loss,
                             arlab::ParamStore& params, const arlab::NamedTensors& analytic,
                             double h = 1e-5, int64_t stride = 1, double atol = 0.0) {
    double max_err = 0;
    int64_t counter = 0;
    for (auto& name : params.names()) {
        auto it = analytic.find(name);
        if (it == analytic.end()) continue;
        arlab::Tensor& p = params.value(name);
        for (int64_t i = 0; i < p.numel(); ++i) {
            if (counter++ % stride) continue;
            double keep = p[i];
            p[i] = keep + h;
            double fp = loss(params);
            p[i] = keep - h;
            double fm = loss(params);
            p[i] = keep;
            double numeric = (fp - fm) / (2 * h);
            double a = it->second[i];
            if (std::abs(a - numeric) <= atol) continue;  // below the FD noise floor
            double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

// Replaces every parameter with small random values, including those that
// are zero-initialized, so gradient checks exercise all paths.
inline void randomize(arlab::ParamStore& params, arlab::RngStream rng, double scale = 0.1) {
    for (auto& name : params.names()) {
        arlab::Tensor& p = params.value(name);
        for (int64_t i = 0; i < p.numel(); ++i) p[i] = rng.normal() * scale;
    }
}

}  // namespace testutil
