#include <catch2/catch_amalgamated.hpp>

#include "arlab/toylab.hpp"

#include <cmath>

using namespace arlab;
using namespace arlab::toylab;

namespace {

// Plain Gauss-Jordan inverse, independent of Eigen's solvers.
EMat gauss_jordan_inverse(EMat m) {
    const int64_t n = m.rows();
    EMat inv = EMat::Identity(n, n);
    for (int64_t col = 0; col < n; ++col) {
        int64_t pivot = col;
        for (int64_t r = col + 1; r < n; ++r)
            if (std::abs(m(r, col)) > std::abs(m(pivot, col))) pivot = r;
        m.row(col).swap(m.row(pivot));
        inv.row(col).swap(inv.row(pivot));
        double p = m(col, col);
        m.row(col) /= p;
        inv.row(col) /= p;
        for (int64_t r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = m(r, col);
            m.row(r) -= f * m.row(col);
            inv.row(r) -= f * inv.row(col);
        }
    }
    return inv;
}

Tensor stack_samples(const std::vector<Tensor>& grids) {
    const int64_t n = int64_t(grids.size());
    const int64_t d = grids[0].numel();
    Tensor out({n, d});
    for (int64_t s = 0; s < n; ++s)
        for (int64_t i = 0; i < d; ++i) out.at(s, i) = grids[size_t(s)][i];
    return out;
}

}  // namespace

TEST_CASE("field sampler matches identity covariance") {
    GaussianFieldSpec spec;
    spec.grid_h = 2;
    spec.grid_w = 2;
    spec.token_dim = 2;
    spec.mean = EVec::Zero(8);
    spec.cov = EMat::Identity(8, 8);

    RngStream rng(101, "field");
    auto grids = sample_field(spec, rng, 100000);
    Tensor s = stack_samples(grids);
    MetricReport rep = moment_error(s, spec.mean, spec.cov);
    REQUIRE(rep.mean_err < 0.02);
    REQUIRE(rep.cov_err < 0.05);  // off-diagonals near 0, variances near 1
}

TEST_CASE("field sampler reproduces a shifted mean") {
    GaussianFieldSpec spec;
    spec.grid_h = 1;
    spec.grid_w = 2;
    spec.token_dim = 1;
    spec.mean = EVec(2);
    spec.mean << 1.5, -0.5;
    spec.cov = EMat::Identity(2, 2);
    RngStream rng(102, "field");
    auto grids = sample_field(spec, rng, 100000);
    Tensor s = stack_samples(grids);
    MetricReport rep = moment_error(s, spec.mean, spec.cov);
    REQUIRE(rep.mean_err < 0.02);
}

TEST_CASE("squared-exponential field has unit variances and PD covariance") {
    GaussianFieldSpec spec = GaussianFieldSpec::squared_exponential(4, 4, 2, 1.5);
    for (int64_t i = 0; i < spec.dim(); ++i) REQUIRE(spec.cov(i, i) == 1.0);
    Eigen::LLT<EMat> llt(spec.cov);
    REQUIRE(llt.info() == Eigen::Success);
    // cross-channel entries are zero
    REQUIRE(spec.cov(0, 1) == 0.0);
    REQUIRE(spec.cov(0, 2) > 0.0);  // neighboring position, same channel
}

TEST_CASE("empirical covariance of the SE field converges") {
    GaussianFieldSpec spec = GaussianFieldSpec::squared_exponential(2, 2, 1, 1.5);
    RngStream rng(103, "field");
    auto grids = sample_field(spec, rng, 100000);
    MetricReport rep = moment_error(stack_samples(grids), spec.mean, spec.cov);
    REQUIRE(rep.cov_err < 0.05);
}

TEST_CASE("sampler rejects a non-PD covariance") {
    GaussianFieldSpec spec;
    spec.grid_h = 1;
    spec.grid_w = 2;
    spec.token_dim = 1;
    spec.mean = EVec::Zero(2);
    spec.cov = EMat(2, 2);
    spec.cov << 1.0, 2.0, 2.0, 1.0;  // indefinite
    RngStream rng(104, "field");
    REQUIRE_THROWS(sample_field(spec, rng, 1));
}

TEST_CASE("diagonal covariance makes conditionals equal marginals") {
    GaussianFieldSpec spec;
    spec.grid_h = 2;
    spec.grid_w = 2;
    spec.token_dim = 1;
    spec.mean = EVec(4);
    spec.mean << 0.5, -1.0, 2.0, 0.0;
    spec.cov = EMat::Identity(4, 4) * 1.7;

    EVec clamp(2);
    clamp << 9.0, -9.0;
    ConditionalGaussian cond = analytic_conditional(spec, {1, 3}, clamp);
    REQUIRE(cond.free_indices == std::vector<int64_t>{0, 2});
    REQUIRE(cond.mean(0) == Catch::Approx(0.5).margin(1e-12));
    REQUIRE(cond.mean(1) == Catch::Approx(2.0).margin(1e-12));
    REQUIRE(cond.cov(0, 0) == Catch::Approx(1.7).margin(1e-12));
    REQUIRE(cond.cov(0, 1) == Catch::Approx(0.0).margin(1e-12));
}

TEST_CASE("bivariate conditional closed form") {
    const double rho = 0.6, a = 1.3;
    GaussianFieldSpec spec;
    spec.grid_h = 1;
    spec.grid_w = 2;
    spec.token_dim = 1;
    spec.mean = EVec::Zero(2);
    spec.cov = EMat(2, 2);
    spec.cov << 1.0, rho, rho, 1.0;

    EVec clamp(1);
    clamp << a;
    ConditionalGaussian cond = analytic_conditional(spec, {0}, clamp);
    REQUIRE(cond.mean(0) == Catch::Approx(rho * a).epsilon(1e-12));
    REQUIRE(cond.cov(0, 0) == Catch::Approx(1.0 - rho * rho).epsilon(1e-12));
}

TEST_CASE("conditional matches an independent dense-solve oracle") {
    GaussianFieldSpec spec = GaussianFieldSpec::squared_exponential(2, 3, 1, 1.2);
    RngStream rng(105, "clamp");
    EVec clamp(3);
    clamp << rng.normal(), rng.normal(), rng.normal();
    std::vector<int64_t> u{0, 2, 5};
    ConditionalGaussian got = analytic_conditional(spec, u, clamp);

    // oracle: explicit inverse of the clamped block
    EMat s_uu(3, 3);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) s_uu(i, j) = spec.cov(u[size_t(i)], u[size_t(j)]);
    EMat inv = gauss_jordan_inverse(s_uu);
    std::vector<int64_t> m{1, 3, 4};
    EMat s_mu(3, 3), s_mm(3, 3);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j) {
            s_mu(i, j) = spec.cov(m[size_t(i)], u[size_t(j)]);
            s_mm(i, j) = spec.cov(m[size_t(i)], m[size_t(j)]);
        }
    EVec mean = s_mu * inv * clamp;
    EMat cov = s_mm - s_mu * inv * s_mu.transpose();
    for (int64_t i = 0; i < 3; ++i) {
        REQUIRE(got.mean(i) == Catch::Approx(mean(i)).margin(1e-10));
        for (int64_t j = 0; j < 3; ++j) REQUIRE(got.cov(i, j) == Catch::Approx(cov(i, j)).margin(1e-10));
    }
}

TEST_CASE("singular clamp block is an error") {
    GaussianFieldSpec spec;
    spec.grid_h = 1;
    spec.grid_w = 3;
    spec.token_dim = 1;
    spec.mean = EVec::Zero(3);
    spec.cov = EMat(3, 3);
    spec.cov << 1, 1, 0, 1, 1, 0, 0, 0, 1;  // positions 0 and 1 perfectly correlated
    EVec clamp(2);
    clamp << 1.0, 1.0;
    REQUIRE_THROWS_WITH(analytic_conditional(spec, {0, 1}, clamp),
                        Catch::Matchers::ContainsSubstring("singular"));
}

TEST_CASE("energy distance basics") {
    RngStream rng(106, "ed");
    Tensor a = Tensor::randn({50, 3}, rng);
    REQUIRE(energy_distance(a, a) == Catch::Approx(0.0).margin(1e-12));

    Tensor p({1, 2}, {0.0, 0.0});
    Tensor q({1, 2}, {3.0, 4.0});
    REQUIRE(energy_distance(p, q) == Catch::Approx(10.0).epsilon(1e-12));  // 2r with r=5

    Tensor b = Tensor::randn({40, 3}, rng);
    REQUIRE(energy_distance(a, b) == Catch::Approx(energy_distance(b, a)).epsilon(1e-12));
    REQUIRE(energy_distance(a, b) >= 0.0);
}

TEST_CASE("energy distance of N(0,1) vs N(3,1) matches the closed form") {
    // closed form via folded normals: E|X-Y| with X-Y ~ N(3, 2), E|X-X'| with
    // difference ~ N(0, 2)
    auto folded_mean = [](double mu, double sigma) {
        return sigma * std::sqrt(2.0 / std::numbers::pi) * std::exp(-mu * mu / (2 * sigma * sigma)) +
               mu * std::erf(mu / (sigma * std::sqrt(2.0)));
    };
    double expect = 2.0 * folded_mean(3.0, std::sqrt(2.0)) - 2.0 * folded_mean(0.0, std::sqrt(2.0));

    RngStream rng(107, "ed2");
    const int n = 10000;
    Tensor a({n, 1}), b({n, 1});
    for (int i = 0; i < n; ++i) {
        a[i] = rng.normal();
        b[i] = 3.0 + rng.normal();
    }
    REQUIRE(energy_distance(a, b) == Catch::Approx(expect).epsilon(0.02));
}

TEST_CASE("moment_error degenerate cases") {
    EVec mean = EVec::Zero(2);
    EMat cov = EMat::Identity(2, 2) * 0.5;

    Tensor constant({3, 2});  // all points exactly at the target mean
    MetricReport rep = moment_error(constant, mean, cov);
    REQUIRE(rep.mean_err == 0.0);
    REQUIRE(rep.cov_err == 0.5);  // empirical covariance is zero

    Tensor shifted({4, 2});
    for (int64_t i = 0; i < 4; ++i) {
        shifted.at(i, 0) = 0.25;
        shifted.at(i, 1) = 0.25;
    }
    REQUIRE(moment_error(shifted, mean, cov).mean_err == Catch::Approx(0.25).margin(1e-12));

    Tensor one({1, 2});
    REQUIRE_THROWS(moment_error(one, mean, cov));
}

TEST_CASE("mixture spec samples land near their component set") {
    Mixture2dSpec spec;
    spec.num_components = 8;
    spec.radius = 2.0;
    spec.sigma = 0.1;
    spec.class_components = {{}, {0}, {4}};  // label 0 = all, labels 1/2 pinned

    RngStream rng(108, "mix");
    Tensor pinned = spec.sample_batch(1, 2000, rng);
    double mx = 0, my = 0;
    for (int64_t i = 0; i < pinned.rows(); ++i) {
        mx += pinned.at(i, 0);
        my += pinned.at(i, 1);
    }
    mx /= double(pinned.rows());
    my /= double(pinned.rows());
    REQUIRE(mx == Catch::Approx(2.0).margin(0.02));  // component 0 mean is (r, 0)
    REQUIRE(my == Catch::Approx(0.0).margin(0.02));

    Tensor all = spec.sample_batch(0, 4000, rng);
    double radius_mean = 0;
    for (int64_t i = 0; i < all.rows(); ++i)
        radius_mean += std::sqrt(all.at(i, 0) * all.at(i, 0) + all.at(i, 1) * all.at(i, 1));
    radius_mean /= double(all.rows());
    REQUIRE(radius_mean == Catch::Approx(2.0).margin(0.05));

    REQUIRE_THROWS(spec.sample_batch(9, 1, rng));
}
