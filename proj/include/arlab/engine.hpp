#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "arlab/conditioner.hpp"
#include "arlab/cvae_head.hpp"
#include "arlab/optim.hpp"
#include "arlab/rng.hpp"
#include "arlab/schedule.hpp"
#include "arlab/shortcut_head.hpp"
#include "arlab/tensor.hpp"

namespace arlab {
namespace engine {

enum class HeadKind { Shortcut, FlowMatchingOnly, Cvae };

struct EngineConfig {
    BackboneConfig backbone;
    HeadConfig head;
    HeadKind head_kind = HeadKind::Shortcut;
    CvaeConfig cvae;
    double mask_ratio_lo = 0.7;
    double mask_ratio_hi = 1.0;
    double label_dropout = 0.1;          // probability of training on the null condition
    double consistency_fraction = 1.0;   // fraction of masked rows fed to the consistency branch
    int threads = 2;

    bool with_consistency() const { return head_kind == HeadKind::Shortcut; }

    void validate() const {
        backbone.validate();
        if (head_kind == HeadKind::Cvae) {
            cvae.validate();
            if (cvae.cond_dim != backbone.embed_dim)
                throw std::runtime_error("engine: cvae cond_dim must equal backbone embed_dim");
            if (cvae.token_dim != backbone.token_dim)
                throw std::runtime_error("engine: cvae/backbone token_dim mismatch");
        } else {
            head.validate();
            if (head.cond_dim != backbone.embed_dim)
                throw std::runtime_error("engine: head cond_dim must equal backbone embed_dim");
            if (head.token_dim != backbone.token_dim)
                throw std::runtime_error("engine: head/backbone token_dim mismatch");
        }
        if (!(consistency_fraction >= 0.0 && consistency_fraction <= 1.0))
            throw std::runtime_error("engine: consistency_fraction in [0,1]");
    }
};

inline void init_params(ParamStore& params, const EngineConfig& ec, RngStream& rng) {
    ec.validate();
    if (ec.backbone.kind == BackboneConfig::Kind::Masked)
        masked::init_params(params, ec.backbone, rng);
    else
        causal::init_params(params, ec.backbone, rng);
    if (ec.head_kind == HeadKind::Cvae)
        cvae::init_params(params, ec.cvae, rng);
    else
        shortcut::init_params(params, ec.head, rng);
}

struct StepReport {
    double fm = 0;           // flow matching term (velocity heads)
    double consistency = 0;  // consistency term (shortcut head)
    double recon = 0;        // reconstruction term (cvae head)
    double kl = 0;           // kl term (cvae head)
    double total = 0;
    double grad_norm = 0;  // pre-clip global norm
};

namespace detail {

inline shortcut::LossDraws take_rows(const shortcut::LossDraws& draws, int64_t n) {
    shortcut::LossDraws out;
    out.z0 = Tensor({n, draws.z0.cols()});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = 0; c < draws.z0.cols(); ++c) out.z0.at(r, c) = draws.z0.at(r, c);
    out.t.assign(draws.t.begin(), draws.t.begin() + n);
    out.d.assign(draws.d.begin(), draws.d.begin() + n);
    return out;
}

inline Tensor gather_token_rows(const Tensor& grid, const std::vector<int64_t>& rows) {
    Tensor out({int64_t(rows.size()), grid.cols()});
    for (size_t i = 0; i < rows.size(); ++i)
        for (int64_t c = 0; c < grid.cols(); ++c) out.at(int64_t(i), c) = grid.at(rows[i], c);
    return out;
}

// Runs fn(i) for i in [0, n) on up to `threads` workers, in contiguous
// waves. Callers reduce results strictly in index order afterwards, so the
// outcome is identical for any thread count.
inline void parallel_indexed(int64_t n, int threads, const std::function<void(int64_t)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<int64_t> next{0};
    auto worker = [&] {
        for (;;) {
            int64_t i = next.fetch_add(1);
            if (i >= n) return;
            fn(i);
        }
    };
    std::vector<std::thread> pool;
    int nt = std::min<int64_t>(threads, n);
    pool.reserve(size_t(nt));
    for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

struct SampleGrads {
    NamedTensors grads;
    double fm = 0;
    double consistency = 0;
    double recon = 0;
    double kl = 0;
    double total = 0;  // the sample's actual objective value
};

}  // namespace detail

namespace detail {

// Shared batch pass for both backbones; backward=false turns it into a pure
// evaluation. Samples are independent; the reduce is strictly index-ordered,
// so results do not depend on the thread count.
inline std::vector<SampleGrads> batch_pass(const EngineConfig& ec, const ParamStore& params,
                                           const ParamStore& teacher, const std::vector<Tensor>& grids,
                                           const std::vector<int64_t>& labels, RngStream& step_rng,
                                           bool backward) {
    const int64_t B = int64_t(grids.size());
    if (B == 0) throw std::runtime_error("train_step: empty batch");
    if (labels.size() != grids.size()) throw std::runtime_error("train_step: labels/grids mismatch");
    const int64_t N = ec.backbone.total_tokens();
    const bool is_masked = ec.backbone.kind == BackboneConfig::Kind::Masked;

    std::vector<SampleGrads> per_sample(static_cast<size_t>(B));
    parallel_indexed(B, ec.threads, [&](int64_t i) {
        RngStream rng = step_rng.child(uint64_t(i));
        int64_t label = labels[size_t(i)];
        if (rng.uniform() < ec.label_dropout) label = ec.backbone.null_label();

        Tape tape;
        ParamLeaves P(tape, params, /*trainable=*/backward);
        NodeId cond;
        Tensor z1;
        if (is_masked) {
            MaskSet mask = partition_tokens(N, ec.mask_ratio_lo, ec.mask_ratio_hi, rng);
            masked::Inputs in;
            in.m_positions = mask.masked;
            in.u_positions = mask.unmasked;
            if (!mask.unmasked.empty())
                in.u_values = gather_token_rows(grids[size_t(i)], mask.unmasked);
            in.label = label;
            cond = masked::conditions_node(tape, ec.backbone, P, in);
            z1 = gather_token_rows(grids[size_t(i)], mask.masked);
        } else {
            Tensor prefix;  // rows condition tokens 1..N, so feed tokens 1..N-1
            if (N > 1) {
                prefix = Tensor({N - 1, ec.backbone.token_dim});
                for (int64_t r = 0; r + 1 < N; ++r)
                    for (int64_t c = 0; c < ec.backbone.token_dim; ++c)
                        prefix.at(r, c) = grids[size_t(i)].at(r, c);
            }
            cond = causal::conditions_all_node(tape, ec.backbone, P, prefix, label);
            z1 = grids[size_t(i)];
        }

        const int64_t nm = z1.rows();
        SampleGrads& out = per_sample[size_t(i)];
        NodeId objective;
        if (ec.head_kind == HeadKind::Cvae) {
            Tensor eps = Tensor::randn({nm, ec.cvae.latent_dim}, rng);
            cvae::LossNodes nodes = cvae::loss_nodes(tape, ec.cvae, P, z1, cond, eps, ec.cvae.kl_weight);
            objective = nodes.total;
            out.recon = tape.value(nodes.recon).item();
            out.kl = tape.value(nodes.kl).item();
        } else {
            shortcut::LossDraws draws = shortcut::draw_losses(nm, ec.head.token_dim, rng);
            NodeId fm = shortcut::fm_loss_node(tape, ec.head, P, z1, cond, draws);
            objective = fm;
            if (ec.with_consistency()) {
                int64_t nc = std::max<int64_t>(1, int64_t(std::ceil(ec.consistency_fraction * double(nm))));
                nc = std::min(nc, nm);
                NodeId cond_c = nc == nm ? cond : tape.slice_rows(cond, 0, nc);
                Tensor z1_c = z1;
                shortcut::LossDraws draws_c = draws;
                if (nc != nm) {
                    std::vector<int64_t> rows(static_cast<size_t>(nc));
                    for (int64_t r = 0; r < nc; ++r) rows[size_t(r)] = r;
                    z1_c = gather_token_rows(z1, rows);
                    draws_c = take_rows(draws, nc);
                }
                NodeId cons =
                    shortcut::consistency_loss_node(tape, ec.head, P, z1_c, cond_c, teacher, draws_c);
                objective = tape.add(fm, cons);
                out.consistency = tape.value(cons).item();
            }
            out.fm = tape.value(fm).item();
        }
        out.total = tape.value(objective).item();
        if (backward) {
            tape.backward(objective);
            for (auto& [name, id] : tape.trainable_leaves()) out.grads[name] = tape.grad(id);
        }
    });
    return per_sample;
}

inline StepReport reduce_losses(const std::vector<SampleGrads>& per_sample) {
    StepReport rep;
    const double B = double(per_sample.size());
    for (auto& s : per_sample) {
        rep.fm += s.fm / B;
        rep.consistency += s.consistency / B;
        rep.recon += s.recon / B;
        rep.kl += s.kl / B;
        rep.total += s.total / B;
    }
    if (!std::isfinite(rep.total)) throw NonFiniteError("train_step: non-finite loss");
    return rep;
}

inline StepReport apply_updates(std::vector<SampleGrads>& per_sample, ParamStore& params, AdamW& opt,
                                Ema& ema, double lr_scale, double clip_norm) {
    StepReport rep = reduce_losses(per_sample);
    NamedTensors grads;
    for (auto& s : per_sample) {
        for (auto& [name, g] : s.grads) {
            auto it = grads.find(name);
            if (it == grads.end())
                grads.emplace(name, g);
            else
                it->second += g;
        }
    }
    for (auto& [name, g] : grads) g.scale_inplace(1.0 / double(per_sample.size()));
    rep.grad_norm = clip_global_norm(grads, clip_norm);
    opt.step(params, grads, lr_scale);
    ema.update(params);
    return rep;
}

}  // namespace detail

// One masked-AR training step over a batch of token grids: partition each
// grid, condition on the observed part, apply the head losses on the masked
// part, and update (clip -> AdamW -> EMA). Gradients flow through the head
// and the conditioner jointly.
inline StepReport train_step_masked(const EngineConfig& ec, ParamStore& params, AdamW& opt, Ema& ema,
                                    const std::vector<Tensor>& grids, const std::vector<int64_t>& labels,
                                    RngStream& step_rng, double lr_scale = 1.0, double clip_norm = 1.0) {
    ec.validate();
    if (ec.backbone.kind != BackboneConfig::Kind::Masked)
        throw std::runtime_error("train_step_masked: backbone is not masked");
    auto per_sample = detail::batch_pass(ec, params, ema.shadow(), grids, labels, step_rng, true);
    return detail::apply_updates(per_sample, params, opt, ema, lr_scale, clip_norm);
}

// Teacher-forced training step for the causal backbone: one full-sequence
// causal pass yields conditions for every position; the head losses apply
// to all of them.
inline StepReport train_step_causal(const EngineConfig& ec, ParamStore& params, AdamW& opt, Ema& ema,
                                    const std::vector<Tensor>& grids, const std::vector<int64_t>& labels,
                                    RngStream& step_rng, double lr_scale = 1.0, double clip_norm = 1.0) {
    ec.validate();
    if (ec.backbone.kind != BackboneConfig::Kind::Causal)
        throw std::runtime_error("train_step_causal: backbone is not causal");
    auto per_sample = detail::batch_pass(ec, params, ema.shadow(), grids, labels, step_rng, true);
    return detail::apply_updates(per_sample, params, opt, ema, lr_scale, clip_norm);
}

// Loss evaluation without any update (teacher = params unless given).
inline StepReport evaluate_losses(const EngineConfig& ec, const ParamStore& params,
                                  const std::vector<Tensor>& grids, const std::vector<int64_t>& labels,
                                  RngStream& rng, const ParamStore* teacher = nullptr) {
    ec.validate();
    auto per_sample =
        detail::batch_pass(ec, params, teacher ? *teacher : params, grids, labels, rng, false);
    return detail::reduce_losses(per_sample);
}

struct GenerateOptions {
    int64_t ar_iters = 8;  // K (masked pipeline only)
    SamplerSpec sampler;
    CfgSchedule cfg;
    int64_t label = 0;
    std::vector<int64_t> clamp_positions;  // observed context, never regenerated
    Tensor clamp_values;                   // [|clamp|, token_dim]
    bool kv_cache = true;                  // causal pipeline: recompute from scratch when false
    // test instrumentation
    bool force_guided_path = false;  // run the CFG branch even at weight 1
    std::function<void(double t, double d, int64_t rows)> head_observer;  // per head evaluation
};

struct GenerationResult {
    Tensor grid;  // [N, token_dim]
    int64_t head_calls = 0;     // per-token head evaluations (doubled under active CFG)
    int64_t backbone_runs = 0;  // conditioner passes (masked) or steps (causal)
    std::vector<int64_t> generation_order;
};

namespace detail {

// Velocity field for one iteration's scheduled rows, with linear CFG applied
// at the field level. At effective weight 1 the unconditional branch is
// skipped entirely, so guided and unguided sampling coincide bit for bit.
inline shortcut::VelocityField guided_field(const EngineConfig& ec, const ParamStore& params,
                                            Tensor cond, std::optional<Tensor> uncond, double w_eff,
                                            GenerationResult& result, const GenerateOptions& opt) {
    const bool combine = uncond && (w_eff != 1.0 || opt.force_guided_path);
    return [&ec, &params, cond = std::move(cond), uncond = std::move(uncond), w_eff, combine, &result,
            &opt](const Tensor& z, std::span<const double> t, std::span<const double> d) {
        Tensor v = shortcut::eval(ec.head, params, z, t, d, cond);
        result.head_calls += z.rows();
        if (opt.head_observer) opt.head_observer(t[0], d[0], z.rows());
        if (combine) {
            Tensor vu = shortcut::eval(ec.head, params, z, t, d, *uncond);
            result.head_calls += z.rows();
            v = cfg_combine(v, vu, w_eff);
        }
        return v;
    };
}

}  // namespace detail

// Masked-AR generation: iterate the cosine plan, pick pending positions
// uniformly, condition on everything known, and run the Euler sampler per
// scheduled position with its own derived stream. Clamped positions act as
// fixed context.
inline GenerationResult far_generate(const EngineConfig& ec, const ParamStore& params,
                                     const GenerateOptions& opt, RngStream& rng) {
    ec.validate();
    opt.cfg.validate();
    if (ec.head_kind == HeadKind::Cvae && opt.cfg.active())
        throw std::runtime_error("far_generate: CFG is not defined for the cvae head");
    const int64_t N = ec.backbone.total_tokens();
    GenerationResult result;
    result.grid = Tensor({N, ec.backbone.token_dim});

    std::vector<bool> known(size_t(N), false);
    std::vector<int64_t> known_list;
    if (!opt.clamp_positions.empty()) {
        if (opt.clamp_values.rows() != int64_t(opt.clamp_positions.size()))
            throw std::runtime_error("far_generate: clamp values/positions mismatch");
        for (size_t i = 0; i < opt.clamp_positions.size(); ++i) {
            int64_t p = opt.clamp_positions[i];
            if (p < 0 || p >= N) throw std::runtime_error("far_generate: clamp position out of range");
            known[size_t(p)] = true;
            known_list.push_back(p);
            for (int64_t c = 0; c < ec.backbone.token_dim; ++c)
                result.grid.at(p, c) = opt.clamp_values.at(int64_t(i), c);
        }
    }

    std::vector<int64_t> pending;
    for (int64_t p = 0; p < N; ++p)
        if (!known[size_t(p)]) pending.push_back(p);
    const int64_t to_generate = int64_t(pending.size());
    if (to_generate == 0) return result;

    const int64_t K = std::min<int64_t>(opt.ar_iters, to_generate);
    std::vector<int64_t> plan = cosine_plan(K, to_generate);
    RngStream order_rng = rng.child("order");
    const bool cfg_on = opt.cfg.active() || opt.force_guided_path;

    int64_t generated = 0;
    for (int64_t count : plan) {
        // choose this iteration's positions uniformly among pending
        std::vector<int64_t> chosen;
        for (int64_t c = 0; c < count; ++c) {
            size_t j = size_t(order_rng.uniform_index(pending.size()));
            chosen.push_back(pending[j]);
            pending.erase(pending.begin() + int64_t(j));
        }
        std::sort(chosen.begin(), chosen.end());

        // conditions for every still-unknown position (mask tokens for all of
        // them), selected rows for the scheduled subset
        std::vector<int64_t> mask_positions = chosen;
        mask_positions.insert(mask_positions.end(), pending.begin(), pending.end());
        std::sort(mask_positions.begin(), mask_positions.end());

        masked::Inputs in;
        in.u_positions = known_list;
        if (!known_list.empty()) in.u_values = detail::gather_token_rows(result.grid, known_list);
        in.m_positions = mask_positions;
        in.label = opt.label;
        Tensor cond_all = masked::conditions(ec.backbone, params, in);
        result.backbone_runs += 1;

        std::optional<Tensor> uncond_all;
        if (cfg_on) {
            masked::Inputs uin = in;
            uin.label = ec.backbone.null_label();
            uncond_all = masked::conditions(ec.backbone, params, uin);
            result.backbone_runs += 1;
        }

        const double w_eff = cfg_on ? opt.cfg.weight_at(double(generated) / double(to_generate)) : 1.0;

        const int64_t cond_dim = ec.backbone.embed_dim;
        const int64_t token_dim = ec.backbone.token_dim;
        for (int64_t p : chosen) {
            auto row_of = [&](int64_t pos) {
                auto it = std::lower_bound(mask_positions.begin(), mask_positions.end(), pos);
                return int64_t(it - mask_positions.begin());
            };
            int64_t row = row_of(p);
            Tensor c({1, cond_dim});
            for (int64_t j = 0; j < cond_dim; ++j) c[j] = cond_all.at(row, j);
            RngStream pos_rng = rng.child(uint64_t(p));
            Tensor tok;
            if (ec.head_kind == HeadKind::Cvae) {
                Tensor decoded = cvae::sample(ec.cvae, params, c, pos_rng);
                result.head_calls += 1;
                tok = Tensor({token_dim});
                for (int64_t j = 0; j < token_dim; ++j) tok[j] = decoded[j];
            } else {
                std::optional<Tensor> u;
                if (cfg_on) {
                    Tensor uc({1, cond_dim});
                    for (int64_t j = 0; j < cond_dim; ++j) uc[j] = uncond_all->at(row, j);
                    u = std::move(uc);
                }
                tok = shortcut::euler_sample(
                    detail::guided_field(ec, params, std::move(c), std::move(u), w_eff, result, opt), 1,
                    token_dim, opt.sampler, pos_rng);
            }
            for (int64_t j = 0; j < token_dim; ++j) result.grid.at(p, j) = tok[j];
            known[size_t(p)] = true;
            known_list.push_back(p);
            result.generation_order.push_back(p);
            generated += 1;
        }
        std::sort(known_list.begin(), known_list.end());
    }
    if (int64_t(result.generation_order.size()) != to_generate)
        throw std::logic_error("far_generate: ungenerated positions remain");
    return result;
}

// Strictly sequential raster-order generation with per-episode KV caches
// (a separate one for the unconditional branch when CFG is active).
inline GenerationResult causal_generate(const EngineConfig& ec, const ParamStore& params,
                                        const GenerateOptions& opt, RngStream& rng) {
    ec.validate();
    opt.cfg.validate();
    if (ec.head_kind == HeadKind::Cvae && opt.cfg.active())
        throw std::runtime_error("causal_generate: CFG is not defined for the cvae head");
    const int64_t N = ec.backbone.total_tokens();
    GenerationResult result;
    result.grid = Tensor({N, ec.backbone.token_dim});
    const bool cfg_on = opt.cfg.active() || opt.force_guided_path;

    causal::KvCache cache, uncond_cache;
    for (int64_t i = 1; i <= N; ++i) {
        Tensor prefix;
        if (i > 1) {
            prefix = Tensor({i - 1, ec.backbone.token_dim});
            for (int64_t r = 0; r < i - 1; ++r)
                for (int64_t c = 0; c < ec.backbone.token_dim; ++c) prefix.at(r, c) = result.grid.at(r, c);
        }
        Tensor c = opt.kv_cache ? causal::condition(ec.backbone, params, prefix, opt.label, cache)
                                : causal::condition_no_cache(ec.backbone, params, prefix, opt.label);
        result.backbone_runs += 1;
        std::optional<Tensor> u;
        if (cfg_on)
            u = opt.kv_cache
                    ? causal::condition(ec.backbone, params, prefix, ec.backbone.null_label(), uncond_cache)
                    : causal::condition_no_cache(ec.backbone, params, prefix, ec.backbone.null_label());

        const int64_t cond_dim = ec.backbone.embed_dim;
        const int64_t token_dim = ec.backbone.token_dim;
        Tensor crow({1, cond_dim});
        for (int64_t j = 0; j < cond_dim; ++j) crow[j] = c[j];
        RngStream pos_rng = rng.child(uint64_t(i - 1));
        Tensor tok;
        if (ec.head_kind == HeadKind::Cvae) {
            Tensor decoded = cvae::sample(ec.cvae, params, crow, pos_rng);
            result.head_calls += 1;
            tok = Tensor({token_dim});
            for (int64_t j = 0; j < token_dim; ++j) tok[j] = decoded[j];
        } else {
            std::optional<Tensor> urow;
            if (u) {
                Tensor ur({1, cond_dim});
                for (int64_t j = 0; j < cond_dim; ++j) ur[j] = (*u)[j];
                urow = std::move(ur);
            }
            const double w_eff = cfg_on ? opt.cfg.weight_at(double(i - 1) / double(N)) : 1.0;
            tok = shortcut::euler_sample(
                detail::guided_field(ec, params, std::move(crow), std::move(urow), w_eff, result, opt), 1,
                token_dim, opt.sampler, pos_rng);
        }
        for (int64_t j = 0; j < token_dim; ++j) result.grid.at(i - 1, j) = tok[j];
        result.generation_order.push_back(i - 1);
    }
    return result;
}

// Self-consistency residual of a head acting as its own teacher:
// mean ||f(z_t,c,d) - v*|| / mean ||f(z_t,c,d)|| over an evaluation set.
struct ConsistencyEvalSet {
    Tensor z_t;   // [n, token_dim]
    Tensor cond;  // [n, cond_dim]
    std::vector<double> t, d;
};

inline double self_consistency_residual(const HeadConfig& cfg, const ParamStore& params,
                                        const ConsistencyEvalSet& set) {
    Tensor pred = shortcut::eval(cfg, params, set.z_t, set.t, set.d, set.cond);
    Tensor target = shortcut::consistency_target(cfg, params, set.z_t, set.cond, set.t, set.d);
    double num = 0, den = 0;
    for (int64_t r = 0; r < pred.rows(); ++r) {
        double e = 0, f = 0;
        for (int64_t c = 0; c < pred.cols(); ++c) {
            double diff = pred.at(r, c) - target.at(r, c);
            e += diff * diff;
            f += pred.at(r, c) * pred.at(r, c);
        }
        num += std::sqrt(e);
        den += std::sqrt(f);
    }
    return num / std::max(den, 1e-12);
}

}  // namespace engine
}  // namespace arlab
