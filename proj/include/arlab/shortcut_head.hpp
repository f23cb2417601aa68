#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arlab/autodiff.hpp"
#include "arlab/optim.hpp"
#include "arlab/rng.hpp"
#include "arlab/tensor.hpp"

namespace arlab {

// Velocity-field head conditioned on (noisy token, timestep, desired step
// size, backbone condition). With step size 0 it behaves as a plain flow
// matching head; nonzero step sizes are trained by self-distillation against
// an EMA teacher, which is what makes 1-8 step sampling work.
struct HeadConfig {
    int64_t token_dim = 2;
    int64_t cond_dim = 64;
    int64_t hidden_width = 96;
    int64_t depth = 6;  // MLP blocks; the small ablation variant uses 3
    int64_t t_embed_dim = 32;
    int64_t d_embed_dim = 32;
    double sigma_min = 1e-5;

    void validate() const {
        if (depth < 1) throw std::runtime_error("head depth must be >= 1");
        if (token_dim < 1 || cond_dim < 1 || hidden_width < 1 || t_embed_dim < 2 || d_embed_dim < 2)
            throw std::runtime_error("head dims must be positive (embed dims >= 2)");
        if (!(sigma_min >= 0.0 && sigma_min <= 1e-3))
            throw std::runtime_error("sigma_min must lie in [0, 1e-3]");
    }
};

// Euler sampler settings. The step-size conditioning value follows the
// published rule: d = 1/N for N <= 16, d = 0 beyond that.
struct SamplerSpec {
    int64_t steps = 8;
    double cfg_weight = 1.0;
    enum class CfgKind { Linear, Constant } cfg_kind = CfgKind::Linear;

    double d_rule() const {
        if (steps < 1) throw std::runtime_error("sampler steps must be >= 1");
        return steps <= 16 ? 1.0 / double(steps) : 0.0;
    }
};

// One (z0, z1, t, d) draw with its interpolant and regression target.
struct FlowPoint {
    Tensor z0;
    Tensor z1;
    double t = 0;
    double d = 0;
    Tensor z_t;
    Tensor v;
};

// z_t = t*z1 + (1 - (1 - sigma_min)*t) * z0
inline Tensor interpolate(const Tensor& z0, const Tensor& z1, double t, double sigma_min) {
    if (!z0.same_shape(z1)) throw ShapeError("interpolate: z0 " + shape_str(z0.shape()) + " vs z1 " + shape_str(z1.shape()));
    if (!(t >= 0.0 && t <= 1.0)) throw std::runtime_error("interpolate: t outside [0,1]");
    Tensor out(z0.shape());
    double a = 1.0 - (1.0 - sigma_min) * t;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = t * z1[i] + a * z0[i];
    return out;
}

// v = z1 - (1 - sigma_min) * z0
inline Tensor velocity_target(const Tensor& z0, const Tensor& z1, double sigma_min) {
    if (!z0.same_shape(z1)) throw ShapeError("velocity_target: shape mismatch");
    Tensor out(z0.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = z1[i] - (1.0 - sigma_min) * z0[i];
    return out;
}

inline FlowPoint make_flow_point(Tensor z0, Tensor z1, double t, double d, double sigma_min) {
    FlowPoint p;
    p.z_t = interpolate(z0, z1, t, sigma_min);
    p.v = velocity_target(z0, z1, sigma_min);
    p.z0 = std::move(z0);
    p.z1 = std::move(z1);
    p.t = t;
    p.d = d;
    return p;
}

// d = min(u, 1 - t) with u ~ U(0,1), so t + d never exceeds 1.
inline double sample_step_size(double t, RngStream& rng) {
    if (!(t >= 0.0 && t <= 1.0)) throw std::runtime_error("sample_step_size: t outside [0,1]");
    return std::min(rng.uniform(), 1.0 - t);
}

// v_uncond + w * (v_cond - v_uncond); w = 1 and w = 0 return the inputs
// unchanged so guided sampling at weight 1 is bit-identical to unguided.
inline Tensor cfg_combine(const Tensor& v_cond, const Tensor& v_uncond, double w_eff) {
    if (w_eff == 1.0) return v_cond;
    if (w_eff == 0.0) return v_uncond;
    if (!v_cond.same_shape(v_uncond)) throw ShapeError("cfg_combine: shape mismatch");
    Tensor out(v_cond.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = v_uncond[i] + w_eff * (v_cond[i] - v_uncond[i]);
    return out;
}

namespace detail {

// Sinusoidal features of a scalar in [0,1] at geometrically spaced angular
// frequencies in [1, 40]; first half sines, second half cosines. The cap
// keeps the field smooth in t at the widths used here.
inline void sinusoid_features(double x, int64_t dim, double* out) {
    int64_t half = dim / 2;
    for (int64_t i = 0; i < half; ++i) {
        double freq = std::exp(std::log(40.0) * double(i) / double(std::max<int64_t>(half - 1, 1)));
        out[i] = std::sin(freq * x);
        out[half + i] = std::cos(freq * x);
    }
    if (dim % 2) out[dim - 1] = x;
}

inline Tensor sinusoid_batch(std::span<const double> xs, int64_t dim) {
    Tensor out({int64_t(xs.size()), dim});
    for (size_t r = 0; r < xs.size(); ++r) sinusoid_features(xs[r], dim, out.data() + int64_t(r) * dim);
    return out;
}

}  // namespace detail

// Caches one tape leaf per parameter so repeated use (e.g. the two loss
// branches) accumulates gradients into a single node.
class ParamLeaves {
public:
    ParamLeaves(Tape& tape, const ParamStore& store, bool trainable = true)
        : tape_(tape), store_(store), trainable_(trainable) {}

    NodeId operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        NodeId id = tape_.leaf_ref(&store_.value(name), trainable_, name);
        cache_.emplace(name, id);
        return id;
    }

    const ParamStore& store() const { return store_; }

private:
    Tape& tape_;
    const ParamStore& store_;
    bool trainable_;
    std::map<std::string, NodeId> cache_;
};

namespace shortcut {

inline double fan_scaled_std(const Shape& shape) {
    return std::sqrt(2.0 / double(shape[0] + shape[1]));
}

// Every head parameter is weight-decay exempt (the backbone is not).
inline void init_params(ParamStore& params, const HeadConfig& cfg, RngStream& rng,
                        const std::string& prefix = "head.") {
    cfg.validate();
    auto w = [&](const std::string& name, Shape shape) {
        double ws = fan_scaled_std(shape);
        params.add(prefix + name, Tensor::randn(std::move(shape), rng, ws), true);
    };
    auto zero = [&](const std::string& name, Shape shape) {
        params.add(prefix + name, Tensor(std::move(shape)), true);
    };
    const int64_t W = cfg.hidden_width;
    w("in.w", {cfg.token_dim, W});
    zero("in.b", {W});
    w("cond.w", {cfg.cond_dim, W});
    zero("cond.b", {W});
    w("temb.w1", {cfg.t_embed_dim, W});
    zero("temb.b1", {W});
    w("temb.w2", {W, W});
    zero("temb.b2", {W});
    w("demb.w1", {cfg.d_embed_dim, W});
    zero("demb.b1", {W});
    w("demb.w2", {W, W});
    zero("demb.b2", {W});
    for (int64_t l = 0; l < cfg.depth; ++l) {
        std::string b = "blk" + std::to_string(l) + ".";
        w(b + "mod.w", {W, 3 * W});
        zero(b + "mod.b", {3 * W});
        w(b + "mlp.w1", {W, W});
        zero(b + "mlp.b1", {W});
        w(b + "mlp.w2", {W, W});
        zero(b + "mlp.b2", {W});
    }
    w("final.mod.w", {W, 2 * W});
    zero("final.mod.b", {2 * W});
    zero("out.w", {W, cfg.token_dim});  // zero init: the initial field is 0
    zero("out.b", {cfg.token_dim});
}

// Tape-level forward for a batch of rows. z: [B, token_dim] node,
// cond: [B, cond_dim] node, t/d: per-row scalars in [0,1].
inline NodeId forward_node(Tape& tape, const HeadConfig& cfg, ParamLeaves& P, NodeId z,
                           std::span<const double> t, std::span<const double> d, NodeId cond,
                           const std::string& prefix = "head.") {
    const Tensor& zv = tape.value(z);
    const int64_t B = zv.rows();
    if (zv.cols() != cfg.token_dim) throw ShapeError("head: token dim " + std::to_string(zv.cols()));
    if (tape.value(cond).rows() != B || tape.value(cond).cols() != cfg.cond_dim)
        throw ShapeError("head: cond shape " + shape_str(tape.value(cond).shape()));
    if (int64_t(t.size()) != B || int64_t(d.size()) != B) throw ShapeError("head: t/d length mismatch");
    for (int64_t i = 0; i < B; ++i) {
        if (!(t[size_t(i)] >= 0.0 && t[size_t(i)] <= 1.0))
            throw std::runtime_error("head: t outside [0,1] at row " + std::to_string(i));
        if (!(d[size_t(i)] >= 0.0 && d[size_t(i)] <= 1.0))
            throw std::runtime_error("head: d outside [0,1] at row " + std::to_string(i));
    }

    auto pp = [&](const std::string& n) { return P(prefix + n); };
    auto linear = [&](NodeId x, const std::string& n) {
        return tape.add_rowvec(tape.matmul(x, pp(n + ".w")), pp(n + ".b"));
    };

    NodeId temb = tape.constant(detail::sinusoid_batch(t, cfg.t_embed_dim));
    NodeId demb = tape.constant(detail::sinusoid_batch(d, cfg.d_embed_dim));
    // conditioning vector y = t_mlp + d_mlp + cond projection
    NodeId t_h = tape.add_rowvec(tape.matmul(tape.silu(tape.add_rowvec(tape.matmul(temb, pp("temb.w1")), pp("temb.b1"))), pp("temb.w2")), pp("temb.b2"));
    NodeId d_h = tape.add_rowvec(tape.matmul(tape.silu(tape.add_rowvec(tape.matmul(demb, pp("demb.w1")), pp("demb.b1"))), pp("demb.w2")), pp("demb.b2"));
    NodeId c_h = linear(cond, "cond");
    NodeId y = tape.add(tape.add(t_h, d_h), c_h);
    NodeId y_act = tape.silu(y);

    NodeId h = linear(z, "in");
    const int64_t W = cfg.hidden_width;
    for (int64_t l = 0; l < cfg.depth; ++l) {
        std::string b = "blk" + std::to_string(l) + ".";
        NodeId mod = tape.add_rowvec(tape.matmul(y_act, pp(b + "mod.w")), pp(b + "mod.b"));
        NodeId shift = tape.slice_cols(mod, 0, W);
        NodeId scale = tape.slice_cols(mod, W, 2 * W);
        NodeId gate = tape.slice_cols(mod, 2 * W, 3 * W);
        NodeId hn = tape.add(tape.mul(tape.layer_norm(h), tape.affine(scale, 1.0, 1.0)), shift);
        NodeId m = tape.add_rowvec(
            tape.matmul(tape.silu(tape.add_rowvec(tape.matmul(hn, pp(b + "mlp.w1")), pp(b + "mlp.b1"))),
                        pp(b + "mlp.w2")),
            pp(b + "mlp.b2"));
        h = tape.add(h, tape.mul(gate, m));
    }
    NodeId fmod = tape.add_rowvec(tape.matmul(y_act, pp("final.mod.w")), pp("final.mod.b"));
    NodeId fshift = tape.slice_cols(fmod, 0, W);
    NodeId fscale = tape.slice_cols(fmod, W, 2 * W);
    NodeId hn = tape.add(tape.mul(tape.layer_norm(h), tape.affine(fscale, 1.0, 1.0)), fshift);
    return linear(hn, "out");
}

// Plain evaluation (no gradients); same computation as forward_node.
inline Tensor eval(const HeadConfig& cfg, const ParamStore& params, const Tensor& z,
                   std::span<const double> t, std::span<const double> d, const Tensor& cond,
                   const std::string& prefix = "head.") {
    Tape tape;
    ParamLeaves P(tape, params, /*trainable=*/false);
    NodeId out = forward_node(tape, cfg, P, tape.constant(z), t, d, tape.constant(cond), prefix);
    return tape.value(out);
}

// Single-row convenience with scalar t, d.
inline Tensor eval_one(const HeadConfig& cfg, const ParamStore& params, const Tensor& z, double t,
                       double d, const Tensor& cond, const std::string& prefix = "head.") {
    Tensor zr({1, cfg.token_dim});
    for (int64_t i = 0; i < cfg.token_dim; ++i) zr[i] = z[i];
    Tensor cr({1, cfg.cond_dim});
    for (int64_t i = 0; i < cfg.cond_dim; ++i) cr[i] = cond[i];
    double ts[1] = {t}, ds[1] = {d};
    Tensor out = eval(cfg, params, zr, ts, ds, cr, prefix);
    Tensor flat({cfg.token_dim});
    for (int64_t i = 0; i < cfg.token_dim; ++i) flat[i] = out[i];
    return flat;
}

// Batch velocity field bound to fixed conditions: (z, t, d) -> v.
using VelocityField = std::function<Tensor(const Tensor& z, std::span<const double> t, std::span<const double> d)>;

inline VelocityField bind_field(const HeadConfig& cfg, const ParamStore& params, Tensor cond,
                                const std::string& prefix = "head.") {
    return [cfg, &params, cond = std::move(cond), prefix](const Tensor& z, std::span<const double> t,
                                                          std::span<const double> d) {
        return eval(cfg, params, z, t, d, cond, prefix);
    };
}

// Average of two EMA-teacher half-steps of size d/2, evaluated without any
// gradient tracking:
//   v_t     = f(z_t, t, d/2)
//   z~      = z_t + (d/2) v_t
//   v_{t+d/2} = f(z~, t + d/2, d/2)
// returns (v_t + v_{t+d/2}) / 2.
inline Tensor consistency_target(const VelocityField& teacher, const Tensor& z_t,
                                 std::span<const double> t, std::span<const double> d) {
    const int64_t B = z_t.rows();
    std::vector<double> half(static_cast<size_t>(B)), t2(static_cast<size_t>(B));
    for (int64_t i = 0; i < B; ++i) {
        if (t[size_t(i)] + d[size_t(i)] > 1.0 + 1e-12)
            throw std::runtime_error("consistency_target: t + d exceeds 1 at row " + std::to_string(i));
        half[size_t(i)] = d[size_t(i)] / 2.0;
        t2[size_t(i)] = t[size_t(i)] + d[size_t(i)] / 2.0;
    }
    Tensor v_t = teacher(z_t, t, half);
    Tensor z_mid(z_t.shape());
    for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < z_t.cols(); ++c)
            z_mid.at(r, c) = z_t.at(r, c) + half[size_t(r)] * v_t.at(r, c);
    Tensor v_mid = teacher(z_mid, t2, half);
    Tensor out(z_t.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 0.5 * (v_t[i] + v_mid[i]);
    return out;
}

inline Tensor consistency_target(const HeadConfig& cfg, const ParamStore& ema_params,
                                 const Tensor& z_t, const Tensor& cond, std::span<const double> t,
                                 std::span<const double> d, const std::string& prefix = "head.") {
    return consistency_target(bind_field(cfg, ema_params, cond, prefix), z_t, t, d);
}

// Per-batch draws shared by both loss branches.
struct LossDraws {
    Tensor z0;              // [B, token_dim]
    std::vector<double> t;  // U(0,1) per row
    std::vector<double> d;  // min(U(0,1), 1-t) per row (consistency branch)
};

inline LossDraws draw_losses(int64_t batch, int64_t token_dim, RngStream& rng) {
    LossDraws out;
    out.z0 = Tensor::randn({batch, token_dim}, rng);
    out.t.resize(size_t(batch));
    out.d.resize(size_t(batch));
    for (int64_t i = 0; i < batch; ++i) {
        out.t[size_t(i)] = rng.uniform();
        out.d[size_t(i)] = sample_step_size(out.t[size_t(i)], rng);
    }
    return out;
}

namespace detail_loss {

// mean over rows of the squared L2 norm of (a - b)
inline NodeId row_sq_error(Tape& tape, NodeId a, NodeId b) {
    return tape.scale(tape.mse(a, b), double(tape.value(a).cols()));
}

inline void check_batch(const Tensor& z1, const Tensor& cond) {
    if (z1.rows() < 1) throw std::runtime_error("loss: empty batch");
    if (z1.rows() != cond.rows()) throw ShapeError("loss: z1 rows vs cond rows");
    for (int64_t r = 0; r < z1.rows(); ++r) {
        for (int64_t c = 0; c < z1.cols(); ++c)
            if (!std::isfinite(z1.at(r, c)))
                throw NonFiniteError("loss: non-finite token at batch index " + std::to_string(r));
        for (int64_t c = 0; c < cond.cols(); ++c)
            if (!std::isfinite(cond.at(r, c)))
                throw NonFiniteError("loss: non-finite condition at batch index " + std::to_string(r));
    }
}

}  // namespace detail_loss

// Flow matching branch on the tape: d input is exactly 0, targets are the
// closed-form velocities. z1 is data; cond may be a network output.
inline NodeId fm_loss_node(Tape& tape, const HeadConfig& cfg, ParamLeaves& P, const Tensor& z1,
                           NodeId cond, const LossDraws& draws, const std::string& prefix = "head.") {
    const int64_t B = z1.rows();
    Tensor z_t({B, cfg.token_dim}), v({B, cfg.token_dim});
    for (int64_t r = 0; r < B; ++r) {
        double t = draws.t[size_t(r)];
        for (int64_t c = 0; c < cfg.token_dim; ++c) {
            double a0 = draws.z0.at(r, c), a1 = z1.at(r, c);
            z_t.at(r, c) = t * a1 + (1.0 - (1.0 - cfg.sigma_min) * t) * a0;
            v.at(r, c) = a1 - (1.0 - cfg.sigma_min) * a0;
        }
    }
    std::vector<double> zero_d(size_t(B), 0.0);
    NodeId pred = forward_node(tape, cfg, P, tape.constant(z_t), draws.t, zero_d, cond, prefix);
    return detail_loss::row_sq_error(tape, pred, tape.constant(v));
}

// Consistency branch: student predicts at (t, d); target is the stopped
// two-half-step EMA average at the same points.
inline NodeId consistency_loss_node(Tape& tape, const HeadConfig& cfg, ParamLeaves& P,
                                    const Tensor& z1, NodeId cond, const ParamStore& ema_params,
                                    const LossDraws& draws, const std::string& prefix = "head.") {
    const int64_t B = z1.rows();
    Tensor z_t({B, cfg.token_dim});
    for (int64_t r = 0; r < B; ++r) {
        double t = draws.t[size_t(r)];
        for (int64_t c = 0; c < cfg.token_dim; ++c)
            z_t.at(r, c) = t * z1.at(r, c) + (1.0 - (1.0 - cfg.sigma_min) * t) * draws.z0.at(r, c);
    }
    Tensor v_star = consistency_target(cfg, ema_params, z_t, tape.value(cond), draws.t, draws.d, prefix);
    NodeId pred = forward_node(tape, cfg, P, tape.constant(z_t), draws.t, draws.d, cond, prefix);
    return detail_loss::row_sq_error(tape, pred, tape.constant(v_star));
}

struct LossReport {
    double fm = 0;
    double consistency = 0;
    double total = 0;
    NamedTensors grads;
};

// L = L_FM + L_Consist on the same batch, gradients w.r.t. head parameters.
inline LossReport total_loss(const HeadConfig& cfg, const ParamStore& params,
                             const ParamStore& ema_params, const Tensor& z1, const Tensor& cond,
                             RngStream& rng, bool with_consistency = true,
                             const std::string& prefix = "head.") {
    detail_loss::check_batch(z1, cond);
    Tape tape;
    ParamLeaves P(tape, params);
    LossDraws draws = draw_losses(z1.rows(), cfg.token_dim, rng);
    NodeId c = tape.constant(cond);
    NodeId fm = fm_loss_node(tape, cfg, P, z1, c, draws, prefix);
    LossReport rep;
    NodeId obj = fm;
    if (with_consistency) {
        NodeId cons = consistency_loss_node(tape, cfg, P, z1, c, ema_params, draws, prefix);
        obj = tape.add(fm, cons);
        rep.consistency = tape.value(cons).item();
    }
    tape.backward(obj);
    rep.fm = tape.value(fm).item();
    rep.total = tape.value(obj).item();
    if (!std::isfinite(rep.total)) throw NonFiniteError("total_loss: non-finite loss");
    for (auto& [name, id] : tape.trainable_leaves()) rep.grads[name] = tape.grad(id);
    return rep;
}

inline LossReport fm_loss(const HeadConfig& cfg, const ParamStore& params, const Tensor& z1,
                          const Tensor& cond, RngStream& rng, const std::string& prefix = "head.") {
    ParamStore unused;
    return total_loss(cfg, params, unused, z1, cond, rng, /*with_consistency=*/false, prefix);
}

inline LossReport consistency_loss(const HeadConfig& cfg, const ParamStore& params,
                                   const ParamStore& ema_params, const Tensor& z1, const Tensor& cond,
                                   RngStream& rng, const std::string& prefix = "head.") {
    detail_loss::check_batch(z1, cond);
    Tape tape;
    ParamLeaves P(tape, params);
    LossDraws draws = draw_losses(z1.rows(), cfg.token_dim, rng);
    NodeId c = tape.constant(cond);
    NodeId cons = consistency_loss_node(tape, cfg, P, z1, c, ema_params, draws, prefix);
    tape.backward(cons);
    LossReport rep;
    rep.consistency = rep.total = tape.value(cons).item();
    if (!std::isfinite(rep.total)) throw NonFiniteError("consistency_loss: non-finite loss");
    for (auto& [name, id] : tape.trainable_leaves()) rep.grads[name] = tape.grad(id);
    return rep;
}

// N uniform Euler steps from h0 ~ N(0, I); t walks {0, 1/N, ..., (N-1)/N}
// and the d input follows SamplerSpec::d_rule(). Returns h1, one token per
// row of the bound field.
inline Tensor euler_sample(const VelocityField& field, int64_t rows, int64_t token_dim,
                           const SamplerSpec& spec, RngStream& rng) {
    const int64_t N = spec.steps;
    if (N < 1) throw std::runtime_error("euler_sample: steps must be >= 1");
    const double d = spec.d_rule();
    Tensor h = Tensor::randn({rows, token_dim}, rng);
    std::vector<double> ts(static_cast<size_t>(rows));
    std::vector<double> ds(static_cast<size_t>(rows), d);
    for (int64_t k = 0; k < N; ++k) {
        std::fill(ts.begin(), ts.end(), double(k) / double(N));
        Tensor v = field(h, ts, ds);
        if (!v.same_shape(h)) throw ShapeError("euler_sample: field output shape");
        for (int64_t i = 0; i < h.numel(); ++i) h[i] += v[i] / double(N);
    }
    return h;
}

// Head-bound form: one token for condition c.
inline Tensor euler_sample(const HeadConfig& cfg, const ParamStore& params, const Tensor& cond,
                           const SamplerSpec& spec, RngStream& rng, const std::string& prefix = "head.") {
    Tensor c({1, cfg.cond_dim});
    for (int64_t i = 0; i < cfg.cond_dim; ++i) c[i] = cond[i];
    Tensor out = euler_sample(bind_field(cfg, params, c, prefix), 1, cfg.token_dim, spec, rng);
    Tensor flat({cfg.token_dim});
    for (int64_t i = 0; i < cfg.token_dim; ++i) flat[i] = out[i];
    return flat;
}

}  // namespace shortcut

}  // namespace arlab
