#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "arlab/autodiff.hpp"
#include "arlab/optim.hpp"
#include "arlab/rng.hpp"
#include "arlab/shortcut_head.hpp"
#include "arlab/tensor.hpp"

namespace arlab {

// Conditional VAE head: one-step alternative to the velocity head. MLP
// encoder/decoder with the same AdaLN condition injection; the KL term pulls
// the latent toward the unit Gaussian so inference can discard the encoder
// and decode prior noise in a single call per token.
struct CvaeConfig {
    int64_t token_dim = 2;
    int64_t cond_dim = 64;
    int64_t latent_dim = 2;  // defaults to token_dim
    int64_t hidden_width = 64;
    int64_t encoder_depth = 3;
    int64_t decoder_depth = 3;
    double kl_weight = 0.01;

    void validate() const {
        if (token_dim < 1 || cond_dim < 1 || latent_dim < 1 || hidden_width < 1)
            throw std::runtime_error("cvae dims must be positive");
        if (encoder_depth < 1 || decoder_depth < 1) throw std::runtime_error("cvae depths must be >= 1");
        if (!(kl_weight > 0.0)) throw std::runtime_error("cvae kl_weight must be positive");
    }
};

namespace cvae {

inline void init_params(ParamStore& params, const CvaeConfig& cfg, RngStream& rng,
                        const std::string& prefix = "cvae.") {
    cfg.validate();
    auto w = [&](const std::string& name, Shape shape) {
        params.add(prefix + name, Tensor::randn(shape, rng, shortcut::fan_scaled_std(shape)), true);
    };
    auto zero = [&](const std::string& name, Shape shape) {
        params.add(prefix + name, Tensor(std::move(shape)), true);
    };
    const int64_t W = cfg.hidden_width;
    auto stack = [&](const std::string& side, int64_t in_dim, int64_t depth, int64_t out_dim) {
        w(side + ".in.w", {in_dim, W});
        zero(side + ".in.b", {W});
        w(side + ".cond.w", {cfg.cond_dim, W});
        zero(side + ".cond.b", {W});
        for (int64_t l = 0; l < depth; ++l) {
            std::string b = side + ".blk" + std::to_string(l) + ".";
            zero(b + "mod.w", {W, 3 * W});
            zero(b + "mod.b", {3 * W});
            w(b + "mlp.w1", {W, W});
            zero(b + "mlp.b1", {W});
            w(b + "mlp.w2", {W, W});
            zero(b + "mlp.b2", {W});
        }
        zero(side + ".final.mod.w", {W, 2 * W});
        zero(side + ".final.mod.b", {2 * W});
        zero(side + ".out.w", {W, out_dim});  // zero init: mu = logvar = 0 at start
        zero(side + ".out.b", {out_dim});
    };
    stack("enc", cfg.token_dim, cfg.encoder_depth, 2 * cfg.latent_dim);
    stack("dec", cfg.latent_dim, cfg.decoder_depth, cfg.token_dim);
}

namespace detail {

// AdaLN-modulated MLP stack shared by encoder and decoder.
inline NodeId stack_node(Tape& t, const CvaeConfig& cfg, ParamLeaves& P, const std::string& side,
                         int64_t depth, NodeId x, NodeId cond, const std::string& prefix) {
    auto pp = [&](const std::string& n) { return P(prefix + side + "." + n); };
    auto linear = [&](NodeId v, const std::string& n) {
        return t.add_rowvec(t.matmul(v, pp(n + ".w")), pp(n + ".b"));
    };
    NodeId y = t.silu(linear(cond, "cond"));
    NodeId h = linear(x, "in");
    const int64_t W = cfg.hidden_width;
    for (int64_t l = 0; l < depth; ++l) {
        std::string b = "blk" + std::to_string(l) + ".";
        NodeId mod = t.add_rowvec(t.matmul(y, pp(b + "mod.w")), pp(b + "mod.b"));
        NodeId shift = t.slice_cols(mod, 0, W);
        NodeId scale = t.slice_cols(mod, W, 2 * W);
        NodeId gate = t.slice_cols(mod, 2 * W, 3 * W);
        NodeId hn = t.add(t.mul(t.layer_norm(h), t.affine(scale, 1.0, 1.0)), shift);
        NodeId m1 = t.add_rowvec(t.matmul(hn, pp(b + "mlp.w1")), pp(b + "mlp.b1"));
        NodeId m2 = t.add_rowvec(t.matmul(t.silu(m1), pp(b + "mlp.w2")), pp(b + "mlp.b2"));
        h = t.add(h, t.mul(gate, m2));
    }
    NodeId fmod = t.add_rowvec(t.matmul(y, pp("final.mod.w")), pp("final.mod.b"));
    NodeId fshift = t.slice_cols(fmod, 0, W);
    NodeId fscale = t.slice_cols(fmod, W, 2 * W);
    NodeId hn = t.add(t.mul(t.layer_norm(h), t.affine(fscale, 1.0, 1.0)), fshift);
    return linear(hn, "out");
}

}  // namespace detail

// Encoder pass on the tape: returns the [B, 2*latent_dim] (mu ++ logvar) rows.
inline NodeId encode_node(Tape& t, const CvaeConfig& cfg, ParamLeaves& P, NodeId z, NodeId cond,
                          const std::string& prefix = "cvae.") {
    if (t.value(z).cols() != cfg.token_dim) throw ShapeError("cvae_encode: token dim");
    if (t.value(cond).cols() != cfg.cond_dim) throw ShapeError("cvae_encode: cond dim");
    if (t.value(z).rows() != t.value(cond).rows()) throw ShapeError("cvae_encode: batch mismatch");
    return detail::stack_node(t, cfg, P, "enc", cfg.encoder_depth, z, cond, prefix);
}

inline NodeId decode_node(Tape& t, const CvaeConfig& cfg, ParamLeaves& P, NodeId latent, NodeId cond,
                          const std::string& prefix = "cvae.") {
    return detail::stack_node(t, cfg, P, "dec", cfg.decoder_depth, latent, cond, prefix);
}

struct EncodeResult {
    Tensor mu;      // [B, latent_dim]
    Tensor logvar;  // [B, latent_dim]
};

inline EncodeResult encode(const CvaeConfig& cfg, const ParamStore& params, const Tensor& z,
                           const Tensor& cond, const std::string& prefix = "cvae.") {
    Tape t;
    ParamLeaves P(t, params, false);
    NodeId out = encode_node(t, cfg, P, t.constant(z), t.constant(cond), prefix);
    const Tensor& v = t.value(out);
    EncodeResult r;
    r.mu = Tensor({v.rows(), cfg.latent_dim});
    r.logvar = Tensor({v.rows(), cfg.latent_dim});
    for (int64_t i = 0; i < v.rows(); ++i)
        for (int64_t j = 0; j < cfg.latent_dim; ++j) {
            r.mu.at(i, j) = v.at(i, j);
            r.logvar.at(i, j) = v.at(i, cfg.latent_dim + j);
        }
    return r;
}

// latent = mu + exp(logvar / 2) * eps
inline Tensor reparameterize(const Tensor& mu, const Tensor& logvar, const Tensor& eps) {
    if (!mu.same_shape(logvar) || !mu.same_shape(eps)) throw ShapeError("reparameterize: shape mismatch");
    Tensor out(mu.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = mu[i] + std::exp(0.5 * logvar[i]) * eps[i];
    return out;
}

struct LossReport {
    double recon = 0;
    double kl = 0;
    double total = 0;
    NamedTensors grads;
};

// Tape-level loss given an eps draw: recon = elementwise MSE of the decoded
// token; kl = -0.5 sum(1 + logvar - mu^2 - exp(logvar)) averaged over the
// batch; total = recon + kl_weight * kl.
struct LossNodes {
    NodeId recon;
    NodeId kl;
    NodeId total;
};

inline LossNodes loss_nodes(Tape& t, const CvaeConfig& cfg, ParamLeaves& P, const Tensor& z1,
                            NodeId cond, const Tensor& eps, double kl_weight,
                            const std::string& prefix = "cvae.") {
    const int64_t B = z1.rows();
    if (eps.rows() != B || eps.cols() != cfg.latent_dim) throw ShapeError("cvae loss: eps shape");
    NodeId enc = encode_node(t, cfg, P, t.constant(z1), cond, prefix);
    NodeId mu = t.slice_cols(enc, 0, cfg.latent_dim);
    NodeId logvar = t.slice_cols(enc, cfg.latent_dim, 2 * cfg.latent_dim);
    NodeId latent = t.add(mu, t.mul(t.exp_(t.scale(logvar, 0.5)), t.constant(eps)));
    NodeId pred = decode_node(t, cfg, P, latent, cond, prefix);

    LossNodes out;
    out.recon = t.mse(pred, t.constant(z1));
    // 1 + logvar - mu^2 - exp(logvar), summed, scaled by -0.5/B
    NodeId inner = t.sub(t.sub(t.affine(logvar, 1.0, 1.0), t.square(mu)), t.exp_(logvar));
    out.kl = t.scale(t.sum_all(inner), -0.5 / double(B));
    out.total = t.add(out.recon, t.scale(out.kl, kl_weight));
    return out;
}

inline LossReport loss(const CvaeConfig& cfg, const ParamStore& params, const Tensor& z1,
                       const Tensor& cond, const Tensor& eps, double kl_weight,
                       const std::string& prefix = "cvae.") {
    Tape t;
    ParamLeaves P(t, params);
    LossNodes nodes = loss_nodes(t, cfg, P, z1, t.constant(cond), eps, kl_weight, prefix);
    t.backward(nodes.total);
    LossReport rep;
    rep.recon = t.value(nodes.recon).item();
    rep.kl = t.value(nodes.kl).item();
    rep.total = t.value(nodes.total).item();
    if (!std::isfinite(rep.total)) throw NonFiniteError("cvae loss: non-finite");
    for (auto& [name, id] : t.trainable_leaves()) rep.grads[name] = t.grad(id);
    return rep;
}

// Closed-form KL of a diagonal Gaussian against the unit prior, averaged
// over rows.
inline double kl_closed_form(const Tensor& mu, const Tensor& logvar) {
    if (!mu.same_shape(logvar)) throw ShapeError("kl: shape mismatch");
    double s = 0;
    for (int64_t i = 0; i < mu.numel(); ++i)
        s += 1.0 + logvar[i] - mu[i] * mu[i] - std::exp(logvar[i]);
    return -0.5 * s / double(mu.rows());
}

// Prior sampling: latent ~ N(0, I), one decoder call per token; the encoder
// is never touched.
inline Tensor sample(const CvaeConfig& cfg, const ParamStore& params, const Tensor& cond,
                     RngStream& rng, int64_t* decoder_calls = nullptr,
                     const std::string& prefix = "cvae.") {
    const int64_t B = cond.rows();
    Tensor eps = Tensor::randn({B, cfg.latent_dim}, rng);
    Tape t;
    ParamLeaves P(t, params, false);
    NodeId out = decode_node(t, cfg, P, t.constant(eps), t.constant(cond), prefix);
    if (decoder_calls) *decoder_calls += 1;
    return t.value(out);
}

}  // namespace cvae

}  // namespace arlab
