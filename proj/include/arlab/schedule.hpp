#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace arlab {

// Per-iteration token counts for K masked-AR iterations over T tokens.
// remaining(k) = ceil(T * cos(pi/2 * k/K)) with remaining(K) forced to 0;
// zero-count iterations are dropped, so counts are positive and sum to T.
inline std::vector<int64_t> cosine_plan(int64_t ar_iters, int64_t total_tokens) {
    if (ar_iters < 1 || ar_iters > total_tokens)
        throw std::runtime_error("cosine_plan: need 1 <= K <= T, got K=" + std::to_string(ar_iters) +
                                 " T=" + std::to_string(total_tokens));
    std::vector<int64_t> counts;
    int64_t prev = total_tokens;
    for (int64_t k = 1; k <= ar_iters; ++k) {
        int64_t remaining = 0;
        if (k < ar_iters) {
            double angle = 0.5 * std::numbers::pi * double(k) / double(ar_iters);
            remaining = int64_t(std::ceil(double(total_tokens) * std::cos(angle)));
        }
        if (remaining > prev) remaining = prev;
        int64_t count = prev - remaining;
        if (count > 0) counts.push_back(count);
        prev = remaining;
    }
    return counts;
}

// Effective classifier-free guidance weight as a function of generation
// progress in [0, 1]. The linear kind ramps from 1 at the start to the
// terminal weight at the end.
struct CfgSchedule {
    double terminal = 1.0;
    enum class Kind { Linear, Constant } kind = Kind::Linear;

    void validate() const {
        if (terminal < 1.0) throw std::runtime_error("cfg terminal weight must be >= 1");
    }

    double weight_at(double progress) const {
        if (kind == Kind::Constant) return terminal;
        return 1.0 + (terminal - 1.0) * progress;
    }

    bool active() const { return terminal != 1.0; }
};

}  // namespace arlab
