#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "arlab/rng.hpp"
#include "arlab/tensor.hpp"

namespace arlab {
namespace toylab {

using EMat = Eigen::MatrixXd;
using EVec = Eigen::VectorXd;

// Jointly Gaussian token field over a grid. Scalar index layout is
// (position, channel) -> position * token_dim + channel, matching the
// raster-flattened [N, token_dim] token matrix. The analytic conditionals
// of this field stand in for a real data distribution.
struct GaussianFieldSpec {
    int64_t grid_h = 4;
    int64_t grid_w = 4;
    int64_t token_dim = 2;
    EVec mean;  // [dim]
    EMat cov;   // [dim, dim], symmetric positive definite

    int64_t tokens() const { return grid_h * grid_w; }
    int64_t dim() const { return tokens() * token_dim; }

    // Squared-exponential spatial kernel over grid distance, channels
    // independent, unit marginal variances.
    static GaussianFieldSpec squared_exponential(int64_t h, int64_t w, int64_t token_dim,
                                                 double length_scale = 1.5) {
        GaussianFieldSpec spec;
        spec.grid_h = h;
        spec.grid_w = w;
        spec.token_dim = token_dim;
        const int64_t n = spec.dim();
        spec.mean = EVec::Zero(n);
        spec.cov = EMat::Zero(n, n);
        for (int64_t p = 0; p < spec.tokens(); ++p) {
            for (int64_t q = 0; q < spec.tokens(); ++q) {
                double dr = double(p / w - q / w);
                double dc = double(p % w - q % w);
                double k = std::exp(-(dr * dr + dc * dc) / (2.0 * length_scale * length_scale));
                for (int64_t ch = 0; ch < token_dim; ++ch)
                    spec.cov(p * token_dim + ch, q * token_dim + ch) = k;
            }
        }
        return spec;
    }
};

namespace detail {

inline Eigen::LLT<EMat> cholesky_or_throw(const EMat& m, const char* what) {
    Eigen::LLT<EMat> llt(m);
    if (llt.info() != Eigen::Success)
        throw std::runtime_error(std::string(what) + ": matrix is not positive definite");
    return llt;
}

}  // namespace detail

// Exact multivariate normal draws via the Cholesky factor; one [N, token_dim]
// grid per sample.
inline std::vector<Tensor> sample_field(const GaussianFieldSpec& spec, RngStream& rng, int64_t n) {
    auto llt = detail::cholesky_or_throw(spec.cov, "sample_field");
    EMat L = llt.matrixL();
    std::vector<Tensor> out;
    out.reserve(size_t(n));
    const int64_t d = spec.dim();
    EVec eps(d);
    for (int64_t s = 0; s < n; ++s) {
        for (int64_t i = 0; i < d; ++i) eps(i) = rng.normal();
        EVec x = spec.mean + L * eps;
        Tensor t({spec.tokens(), spec.token_dim});
        for (int64_t i = 0; i < d; ++i) t[i] = x(i);
        out.push_back(std::move(t));
    }
    return out;
}

// Gaussian conditional over the complement of the clamped scalar set:
//   mean = mu_M + S_MU S_UU^{-1} (x_U - mu_U)
//   cov  = S_MM - S_MU S_UU^{-1} S_UM
struct ConditionalGaussian {
    std::vector<int64_t> free_indices;  // scalar indices of the conditioned-on complement
    EVec mean;
    EMat cov;
};

inline ConditionalGaussian analytic_conditional(const GaussianFieldSpec& spec,
                                                const std::vector<int64_t>& clamped_indices,
                                                const EVec& clamped_values) {
    const int64_t d = spec.dim();
    std::vector<bool> is_clamped(size_t(d), false);
    for (int64_t ix : clamped_indices) {
        if (ix < 0 || ix >= d) throw std::runtime_error("analytic_conditional: index out of range");
        is_clamped[size_t(ix)] = true;
    }
    if (int64_t(clamped_indices.size()) != clamped_values.size())
        throw std::runtime_error("analytic_conditional: values/indices length mismatch");

    ConditionalGaussian out;
    for (int64_t i = 0; i < d; ++i)
        if (!is_clamped[size_t(i)]) out.free_indices.push_back(i);
    const int64_t nm = int64_t(out.free_indices.size());
    const int64_t nu = int64_t(clamped_indices.size());
    if (nu == 0) {
        out.mean = spec.mean;
        out.cov = spec.cov;
        return out;
    }

    EMat s_uu(nu, nu), s_mu(nm, nu), s_mm(nm, nm);
    EVec mu_u(nu), mu_m(nm), delta(nu);
    for (int64_t a = 0; a < nu; ++a) {
        mu_u(a) = spec.mean(clamped_indices[size_t(a)]);
        delta(a) = clamped_values(a) - mu_u(a);
        for (int64_t b = 0; b < nu; ++b)
            s_uu(a, b) = spec.cov(clamped_indices[size_t(a)], clamped_indices[size_t(b)]);
    }
    for (int64_t a = 0; a < nm; ++a) {
        mu_m(a) = spec.mean(out.free_indices[size_t(a)]);
        for (int64_t b = 0; b < nu; ++b)
            s_mu(a, b) = spec.cov(out.free_indices[size_t(a)], clamped_indices[size_t(b)]);
        for (int64_t b = 0; b < nm; ++b)
            s_mm(a, b) = spec.cov(out.free_indices[size_t(a)], out.free_indices[size_t(b)]);
    }
    auto llt = detail::cholesky_or_throw(s_uu, "analytic_conditional (singular clamp block)");
    EMat gain = llt.solve(s_mu.transpose()).transpose();  // S_MU S_UU^{-1}
    out.mean = mu_m + gain * delta;
    out.cov = s_mm - gain * s_mu.transpose();
    return out;
}

// Class-conditional 2-d Gaussian mixture; component means sit on a circle.
// A label selects a subset of components (uniform weights within it); the
// default single label covers all of them.
struct Mixture2dSpec {
    int64_t num_components = 8;
    double radius = 2.0;
    double sigma = 0.3;
    std::vector<std::vector<int64_t>> class_components = {{}};  // empty set = all

    int64_t num_classes() const { return int64_t(class_components.size()); }

    std::vector<int64_t> components_for(int64_t label) const {
        if (label < 0 || label >= num_classes()) throw std::runtime_error("mixture: unknown label");
        if (class_components[size_t(label)].empty()) {
            std::vector<int64_t> all(static_cast<size_t>(num_components));
            for (int64_t i = 0; i < num_components; ++i) all[size_t(i)] = i;
            return all;
        }
        return class_components[size_t(label)];
    }

    void component_mean(int64_t i, double& x, double& y) const {
        double a = 2.0 * std::numbers::pi * double(i) / double(num_components);
        x = radius * std::cos(a);
        y = radius * std::sin(a);
    }

    Tensor sample_batch(int64_t label, int64_t n, RngStream& rng) const {
        auto comps = components_for(label);
        Tensor out({n, 2});
        for (int64_t s = 0; s < n; ++s) {
            int64_t c = comps[rng.uniform_index(comps.size())];
            double mx, my;
            component_mean(c, mx, my);
            out.at(s, 0) = mx + sigma * rng.normal();
            out.at(s, 1) = my + sigma * rng.normal();
        }
        return out;
    }
};

// Energy distance between two sample sets (rows are points):
//   2 E||a-b|| - E||a-a'|| - E||b-b'||, all pairs (V-statistic).
inline double energy_distance(const Tensor& a, const Tensor& b) {
    if (a.numel() == 0 || b.numel() == 0) throw std::runtime_error("energy_distance: empty sample set");
    if (a.cols() != b.cols()) throw ShapeError("energy_distance: dimension mismatch");
    const int64_t d = a.cols();
    auto pair_mean = [d](const Tensor& x, const Tensor& y) {
        double sum = 0;
        for (int64_t i = 0; i < x.rows(); ++i)
            for (int64_t j = 0; j < y.rows(); ++j) {
                double sq = 0;
                for (int64_t c = 0; c < d; ++c) {
                    double diff = x.at(i, c) - y.at(j, c);
                    sq += diff * diff;
                }
                sum += std::sqrt(sq);
            }
        return sum / (double(x.rows()) * double(y.rows()));
    };
    return 2.0 * pair_mean(a, b) - pair_mean(a, a) - pair_mean(b, b);
}

struct MetricReport {
    double energy = 0;    // filled by callers that also compare sample sets
    double mean_err = 0;  // max-abs error of the empirical mean
    double cov_err = 0;   // max-abs error of the empirical covariance
    int64_t samples = 0;
};

// Max-abs first/second moment errors of samples (rows) against a target.
inline MetricReport moment_error(const Tensor& samples, const EVec& target_mean, const EMat& target_cov) {
    const int64_t n = samples.rows(), d = samples.cols();
    if (n < 2) throw std::runtime_error("moment_error: need at least 2 samples");
    if (target_mean.size() != d || target_cov.rows() != d || target_cov.cols() != d)
        throw ShapeError("moment_error: target dimensions");
    EVec mean = EVec::Zero(d);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t c = 0; c < d; ++c) mean(c) += samples.at(i, c);
    mean /= double(n);
    EMat cov = EMat::Zero(d, d);
    for (int64_t i = 0; i < n; ++i)
        for (int64_t r = 0; r < d; ++r)
            for (int64_t c = 0; c < d; ++c)
                cov(r, c) += (samples.at(i, r) - mean(r)) * (samples.at(i, c) - mean(c));
    cov /= double(n - 1);

    MetricReport rep;
    rep.samples = n;
    for (int64_t c = 0; c < d; ++c) rep.mean_err = std::max(rep.mean_err, std::abs(mean(c) - target_mean(c)));
    for (int64_t r = 0; r < d; ++r)
        for (int64_t c = 0; c < d; ++c) rep.cov_err = std::max(rep.cov_err, std::abs(cov(r, c) - target_cov(r, c)));
    return rep;
}

}  // namespace toylab
}  // namespace arlab
