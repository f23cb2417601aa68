#include <catch2/catch_amalgamated.hpp>

#include "arlab/cvae_head.hpp"
#include "test_util.hpp"

#include <cstring>

using namespace arlab;

namespace {

CvaeConfig tiny_cvae() {
    CvaeConfig cfg;
    cfg.token_dim = 2;
    cfg.cond_dim = 3;
    cfg.latent_dim = 2;
    cfg.hidden_width = 8;
    cfg.encoder_depth = 3;
    cfg.decoder_depth = 3;
    return cfg;
}

}  // namespace

TEST_CASE("encoder is deterministic and zero-initialized to the unit prior") {
    CvaeConfig cfg = tiny_cvae();
    ParamStore params;
    RngStream init(150, "init");
    cvae::init_params(params, cfg, init);

    RngStream rng(151, "in");
    Tensor z = Tensor::randn({4, 2}, rng);
    Tensor c = Tensor::randn({4, 3}, rng);
    auto a = cvae::encode(cfg, params, z, c);
    auto b = cvae::encode(cfg, params, z, c);
    REQUIRE(std::memcmp(a.mu.data(), b.mu.data(), size_t(a.mu.numel()) * sizeof(double)) == 0);
    REQUIRE(std::memcmp(a.logvar.data(), b.logvar.data(), size_t(a.logvar.numel()) * sizeof(double)) == 0);

    for (int64_t i = 0; i < a.mu.numel(); ++i) {
        REQUIRE(a.mu[i] == 0.0);  // zero-initialized output projection
        REQUIRE(a.logvar[i] == 0.0);
    }
}

TEST_CASE("encoder jacobian matches finite differences") {
    CvaeConfig cfg = tiny_cvae();
    cfg.encoder_depth = 2;
    ParamStore params;
    RngStream init(152, "init");
    cvae::init_params(params, cfg, init);
    testutil::randomize(params, RngStream(153, "rand"), 0.2);

    RngStream rng(154, "in");
    Tensor z = Tensor::randn({3, 2}, rng);
    Tensor c = Tensor::randn({3, 3}, rng);
    Tensor probe = Tensor::randn({3, 4}, rng);

    Tape tape;
    ParamLeaves P(tape, params);
    NodeId enc = cvae::encode_node(tape, cfg, P, tape.constant(z), tape.constant(c));
    tape.backward(tape.sum_all(tape.mul(enc, tape.constant(probe))));
    NamedTensors grads;
    for (auto& [name, id] : tape.trainable_leaves()) grads[name] = tape.grad(id);

    auto obj = [&](const ParamStore& p) {
        Tape t;
        ParamLeaves pl(t, p, false);
        NodeId e = cvae::encode_node(t, cfg, pl, t.constant(z), t.constant(c));
        const Tensor& v = t.value(e);
        double s = 0;
        for (int64_t i = 0; i < v.numel(); ++i) s += v[i] * probe[i];
        return s;
    };
    REQUIRE(testutil::fd_max_rel_err(obj, params, grads, 1e-5, /*stride=*/7, /*atol=*/1e-9) < 1e-4);
}

TEST_CASE("reparameterization closed forms and variance") {
    Tensor mu({1, 2}, {0.5, -1.0});
    Tensor logvar({1, 2}, {0.0, 1.2});
    Tensor eps0({1, 2});
    Tensor got = cvae::reparameterize(mu, logvar, eps0);
    REQUIRE(got[0] == 0.5);  // eps = 0 passes mu through
    REQUIRE(got[1] == -1.0);

    Tensor eps({1, 2}, {0.3, -0.4});
    Tensor zero_lv({1, 2});
    Tensor shifted = cvae::reparameterize(mu, zero_lv, eps);
    REQUIRE(shifted[0] == Catch::Approx(0.8).margin(1e-15));
    REQUIRE(shifted[1] == Catch::Approx(-1.4).margin(1e-15));

    // sample variance tracks exp(logvar)
    RngStream rng(155, "var");
    const int n = 100000;
    double lv = 0.7;
    double sum = 0, sq = 0;
    for (int i = 0; i < n; ++i) {
        Tensor e({1, 1}, {rng.normal()});
        Tensor m({1, 1}), l({1, 1}, {lv});
        double x = cvae::reparameterize(m, l, e)[0];
        sum += x;
        sq += x * x;
    }
    double var = sq / n - (sum / n) * (sum / n);
    REQUIRE(var == Catch::Approx(std::exp(lv)).epsilon(0.05));
}

TEST_CASE("kl closed form: zero at the prior, exact for unit shifts") {
    Tensor mu0({1, 1}), lv0({1, 1});
    REQUIRE(cvae::kl_closed_form(mu0, lv0) == 0.0);

    Tensor mu1({1, 1}, {1.0});
    REQUIRE(cvae::kl_closed_form(mu1, lv0) == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("kl is nonnegative and zero only at the prior") {
    RngStream rng(156, "kl");
    for (int trial = 0; trial < 200; ++trial) {
        Tensor mu = Tensor::randn({2, 3}, rng);
        Tensor lv = Tensor::randn({2, 3}, rng);
        double kl = cvae::kl_closed_form(mu, lv);
        REQUIRE(kl >= 0.0);
        double mass = 0;
        for (int64_t i = 0; i < mu.numel(); ++i) mass += std::abs(mu[i]) + std::abs(lv[i]);
        if (mass > 1e-6) REQUIRE(kl > 0.0);
    }
}

TEST_CASE("loss decomposition: total = recon + w * kl") {
    CvaeConfig cfg = tiny_cvae();
    ParamStore params;
    RngStream init(157, "init");
    cvae::init_params(params, cfg, init);
    testutil::randomize(params, RngStream(158, "rand"), 0.2);

    RngStream rng(159, "in");
    Tensor z = Tensor::randn({5, 2}, rng);
    Tensor c = Tensor::randn({5, 3}, rng);
    Tensor eps = Tensor::randn({5, 2}, rng);
    for (double w : {0.1, 0.003, 1.7}) {
        auto rep = cvae::loss(cfg, params, z, c, eps, w);
        REQUIRE(rep.total == Catch::Approx(rep.recon + w * rep.kl).margin(1e-12));
        REQUIRE(rep.kl >= 0.0);
    }

    // kl reported by the loss equals the closed form on the encoder outputs
    auto enc = cvae::encode(cfg, params, z, c);
    auto rep = cvae::loss(cfg, params, z, c, eps, 0.01);
    REQUIRE(rep.kl == Catch::Approx(cvae::kl_closed_form(enc.mu, enc.logvar)).epsilon(1e-12));
}

TEST_CASE("full cvae loss gradient passes finite differences") {
    CvaeConfig cfg = tiny_cvae();
    cfg.encoder_depth = 2;
    cfg.decoder_depth = 2;
    ParamStore params;
    RngStream init(160, "init");
    cvae::init_params(params, cfg, init);
    testutil::randomize(params, RngStream(161, "rand"), 0.2);

    RngStream rng(162, "in");
    Tensor z = Tensor::randn({3, 2}, rng);
    Tensor c = Tensor::randn({3, 3}, rng);
    Tensor eps = Tensor::randn({3, 2}, rng);

    auto rep = cvae::loss(cfg, params, z, c, eps, 0.05);
    auto obj = [&](const ParamStore& p) { return cvae::loss(cfg, p, z, c, eps, 0.05).total; };
    REQUIRE(testutil::fd_max_rel_err(obj, params, rep.grads, 1e-5, /*stride=*/5, /*atol=*/1e-9) < 1e-4);
}

TEST_CASE("prior sampling decodes exactly once per token batch and reproduces") {
    CvaeConfig cfg = tiny_cvae();
    ParamStore params;
    RngStream init(163, "init");
    cvae::init_params(params, cfg, init);
    testutil::randomize(params, RngStream(164, "rand"), 0.2);

    RngStream rng(165, "in");
    Tensor c = Tensor::randn({4, 3}, rng);
    int64_t calls = 0;
    RngStream s1(166, "sample"), s2(166, "sample");
    Tensor a = cvae::sample(cfg, params, c, s1, &calls);
    REQUIRE(calls == 1);
    Tensor b = cvae::sample(cfg, params, c, s2);
    REQUIRE(std::memcmp(a.data(), b.data(), size_t(a.numel()) * sizeof(double)) == 0);
    REQUIRE(a.rows() == 4);
    REQUIRE(a.cols() == 2);
}

TEST_CASE("cvae config validation") {
    CvaeConfig cfg = tiny_cvae();
    cfg.kl_weight = 0.0;
    REQUIRE_THROWS(cfg.validate());
    cfg = tiny_cvae();
    cfg.encoder_depth = 0;
    REQUIRE_THROWS(cfg.validate());
}
