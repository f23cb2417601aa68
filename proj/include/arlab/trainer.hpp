#pragma once

#include <cinttypes>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "arlab/checkpoint.hpp"
#include "arlab/config.hpp"
#include "arlab/costmodel.hpp"
#include "arlab/engine.hpp"
#include "arlab/runio.hpp"
#include "arlab/toylab.hpp"

namespace arlab {
namespace trainer {

namespace fs = std::filesystem;

struct Batch {
    std::vector<Tensor> grids;
    std::vector<int64_t> labels;
};

// One batch of task data. Gaussian-field grids carry label 0; mixture points
// are 1x1 grids with a label drawn uniformly over the task's classes.
inline Batch draw_batch(const RunConfig& c, const toylab::GaussianFieldSpec& field, RngStream& rng,
                        int64_t n) {
    Batch b;
    b.labels.assign(size_t(n), 0);
    if (c.task == "gaussian-field") {
        b.grids = toylab::sample_field(field, rng, n);
    } else {
        b.grids.reserve(size_t(n));
        const int64_t classes = c.mixture.num_classes();
        for (int64_t i = 0; i < n; ++i) {
            int64_t label = classes > 1 ? int64_t(rng.uniform_index(uint64_t(classes))) : 0;
            b.labels[size_t(i)] = label;
            b.grids.push_back(c.mixture.sample_batch(label, 1, rng));
        }
    }
    return b;
}

struct TrainOutputs {
    std::vector<std::string> checkpoints;  // EMA checkpoints in step order
    std::vector<int64_t> checkpoint_steps;
    std::string final_checkpoint;
    std::string loss_csv;
    engine::StepReport last;
};

// Linear warmup followed by cosine decay to lr_floor_frac of the base rate.
inline double lr_schedule(int64_t step, int64_t total_steps, int64_t warmup_steps,
                          double lr_floor_frac) {
    if (warmup_steps > 0 && step < warmup_steps) return double(step + 1) / double(warmup_steps);
    if (lr_floor_frac >= 1.0) return 1.0;
    double progress = total_steps > warmup_steps
                          ? double(step - warmup_steps) / double(total_steps - warmup_steps)
                          : 1.0;
    double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return lr_floor_frac + (1.0 - lr_floor_frac) * cosine;
}

// Full training run: deterministic given (config, seed). Emits a per-step
// loss CSV, evenly spaced EMA checkpoints and a JSON manifest.
inline TrainOutputs train(const RunConfig& c, std::ostream* log = nullptr) {
    runio::RunLock lock(c.out_dir);
    const bool is_cvae = c.head_kind() == engine::HeadKind::Cvae;
    const bool is_masked = c.engine.backbone.kind == BackboneConfig::Kind::Masked;

    RngStream root(c.seed, "run");
    ParamStore params;
    RngStream init_rng = root.child("init");
    engine::init_params(params, c.engine, init_rng);
    AdamW opt(c.adam);
    Ema ema(params, c.ema_decay);
    toylab::GaussianFieldSpec field = c.field_spec();

    TrainOutputs out;
    out.loss_csv = (fs::path(c.out_dir) / "losses.csv").string();
    std::vector<std::string> header =
        is_cvae ? std::vector<std::string>{"step", "lr_scale", "recon", "kl", "total", "grad_norm"}
                : std::vector<std::string>{"step", "lr_scale", "fm", "consistency", "total", "grad_norm"};
    runio::CsvWriter csv(out.loss_csv, header);

    std::vector<int64_t> ckpt_steps;
    for (int64_t i = 1; i <= c.checkpoint_count; ++i)
        ckpt_steps.push_back(std::max<int64_t>(1, c.steps * i / c.checkpoint_count));

    for (int64_t step = 0; step < c.steps; ++step) {
        RngStream data_rng = root.child("data").child(uint64_t(step));
        Batch batch = draw_batch(c, field, data_rng, c.batch);
        RngStream step_rng = root.child("step").child(uint64_t(step));
        double lr_scale = lr_schedule(step, c.steps, c.warmup_steps, c.lr_floor_frac);
        engine::StepReport rep;
        try {
            rep = is_masked ? engine::train_step_masked(c.engine, params, opt, ema, batch.grids,
                                                        batch.labels, step_rng, lr_scale, c.clip_norm)
                            : engine::train_step_causal(c.engine, params, opt, ema, batch.grids,
                                                        batch.labels, step_rng, lr_scale, c.clip_norm);
        } catch (const NonFiniteError& e) {
            throw NonFiniteError("training aborted at step " + std::to_string(step) + ": " + e.what());
        }
        if (is_cvae)
            csv.row({runio::CsvWriter::num(step), runio::CsvWriter::num(lr_scale),
                     runio::CsvWriter::num(rep.recon), runio::CsvWriter::num(rep.kl),
                     runio::CsvWriter::num(rep.total), runio::CsvWriter::num(rep.grad_norm)});
        else
            csv.row({runio::CsvWriter::num(step), runio::CsvWriter::num(lr_scale),
                     runio::CsvWriter::num(rep.fm), runio::CsvWriter::num(rep.consistency),
                     runio::CsvWriter::num(rep.total), runio::CsvWriter::num(rep.grad_norm)});
        out.last = rep;

        if (!ckpt_steps.empty() && step + 1 == ckpt_steps.front()) {
            std::string path = (fs::path(c.out_dir) / ("ckpt_" + std::to_string(step + 1) + ".bin")).string();
            checkpoint::save(ema.shadow(), path);
            out.checkpoints.push_back(path);
            out.checkpoint_steps.push_back(step + 1);
            ckpt_steps.erase(ckpt_steps.begin());
        }
        if (log && (step % 200 == 0 || step + 1 == c.steps))
            (*log) << "step " << step << " total " << rep.total << "\n";
    }
    out.final_checkpoint = out.checkpoints.empty() ? "" : out.checkpoints.back();

    nlohmann::json manifest;
    manifest["config"] = config::to_json(c);
    manifest["checkpoints"] = out.checkpoints;
    manifest["final_checkpoint"] = out.final_checkpoint;
    runio::write_json((fs::path(c.out_dir) / "manifest.json").string(), manifest);
    return out;
}

// Generates samples from a checkpoint and writes the grid dump plus the run
// manifest: one CSV row per (sample, position) with the token components.
inline std::string sample_cmd(const RunConfig& c, const std::string& ckpt_path,
                              std::ostream* log = nullptr) {
    ParamStore params = checkpoint::load(ckpt_path);
    const int64_t token_dim = c.engine.backbone.token_dim;
    std::vector<std::string> header{"sample", "position"};
    for (int64_t d = 0; d < token_dim; ++d) header.push_back("c" + std::to_string(d));
    std::string csv_path = (fs::path(c.out_dir) / "samples.csv").string();
    runio::CsvWriter csv(csv_path, header);

    engine::GenerateOptions opt;
    opt.ar_iters = c.ar_iters;
    opt.sampler.steps = c.sample_steps;
    opt.cfg = c.cfg_schedule();
    RngStream root(c.seed, "sample");
    const bool is_masked = c.engine.backbone.kind == BackboneConfig::Kind::Masked;
    const int64_t classes = c.engine.backbone.num_classes;

    std::vector<Tensor> grids(size_t(c.num_samples));
    engine::detail::parallel_indexed(c.num_samples, c.engine.threads, [&](int64_t s) {
        RngStream rng = root.child(uint64_t(s));
        engine::GenerateOptions o = opt;
        o.label = classes > 1 ? int64_t(rng.uniform_index(uint64_t(classes))) : 0;
        grids[size_t(s)] = (is_masked ? engine::far_generate(c.engine, params, o, rng)
                                      : engine::causal_generate(c.engine, params, o, rng))
                               .grid;
    });
    for (int64_t s = 0; s < c.num_samples; ++s)
        for (int64_t p = 0; p < c.engine.backbone.total_tokens(); ++p) {
            std::vector<std::string> cells{runio::CsvWriter::num(s), runio::CsvWriter::num(p)};
            for (int64_t d = 0; d < token_dim; ++d)
                cells.push_back(runio::CsvWriter::num(grids[size_t(s)].at(p, d)));
            csv.row(cells);
        }

    nlohmann::json manifest;
    manifest["seed"] = c.seed;
    manifest["ar_iters"] = c.ar_iters;
    manifest["denoise_steps"] = c.sample_steps;
    manifest["cfg_weight"] = c.cfg_weight;
    manifest["checkpoint"] = ckpt_path;
    manifest["samples"] = c.num_samples;
    runio::write_json((fs::path(c.out_dir) / "sample_manifest.json").string(), manifest);
    if (log) (*log) << "wrote " << csv_path << "\n";
    return csv_path;
}

struct OraclePattern {
    int64_t pattern = 0;
    int64_t clamped = 0;
    int64_t runs = 0;
    double max_abs_mean_err = 0;
    double avg_abs_mean_err = 0;
};

struct OracleReport {
    std::vector<OraclePattern> patterns;
    double calibration_mean_err = 0;  // oracle sampler against its own conditional
    std::string csv_path;
};

// Clamps random token subsets of the Gaussian field, generates conditioned
// grids from the model and compares empirical conditional means against the
// Schur-complement oracle.
inline OracleReport oracle_cmd(const RunConfig& c, const std::string& ckpt_path,
                               std::ostream* log = nullptr) {
    if (c.task != "gaussian-field")
        throw std::runtime_error("oracle: only the gaussian-field task has an analytic conditional");
    ParamStore params = checkpoint::load(ckpt_path);
    toylab::GaussianFieldSpec spec = c.field_spec();
    const int64_t N = c.engine.backbone.total_tokens();
    const int64_t token_dim = c.engine.backbone.token_dim;

    OracleReport report;
    report.csv_path = (fs::path(c.out_dir) / "oracle.csv").string();
    runio::CsvWriter csv(report.csv_path,
                         {"pattern", "n_clamped", "runs", "max_abs_mean_err", "avg_abs_mean_err"});

    RngStream root(c.seed, "oracle");
    for (int64_t pat = 0; pat < c.oracle_patterns; ++pat) {
        RngStream prng = root.child("pattern").child(uint64_t(pat));
        // clamp sizes cycle over 2..4 tokens, inside the trained mask-ratio range
        int64_t n_clamp = 2 + pat % 3;
        MaskSet ms = partition_tokens(N, 1.0 - double(n_clamp) / double(N),
                                      1.0 - double(n_clamp) / double(N), prng);
        Tensor draw = toylab::sample_field(spec, prng, 1)[0];
        std::vector<int64_t> clamp = ms.unmasked;
        Tensor clamp_vals({int64_t(clamp.size()), token_dim});
        std::vector<int64_t> clamp_scalars;
        toylab::EVec vals(int64_t(clamp.size()) * token_dim);
        for (size_t i = 0; i < clamp.size(); ++i)
            for (int64_t d = 0; d < token_dim; ++d) {
                clamp_vals.at(int64_t(i), d) = draw.at(clamp[i], d);
                clamp_scalars.push_back(clamp[i] * token_dim + d);
                vals(int64_t(i) * token_dim + d) = draw.at(clamp[i], d);
            }
        toylab::ConditionalGaussian cond = toylab::analytic_conditional(spec, clamp_scalars, vals);

        engine::GenerateOptions opt;
        opt.ar_iters = c.ar_iters;
        opt.sampler.steps = c.sample_steps;
        opt.cfg = c.cfg_schedule();
        opt.clamp_positions = clamp;
        opt.clamp_values = clamp_vals;

        std::vector<Tensor> outs(size_t(c.oracle_runs));
        engine::detail::parallel_indexed(c.oracle_runs, c.engine.threads, [&](int64_t r) {
            RngStream grng = root.child("gen").child(uint64_t(pat * 1000000 + r));
            engine::GenerateOptions o = opt;
            outs[size_t(r)] = engine::far_generate(c.engine, params, o, grng).grid;
        });
        std::vector<double> sum(size_t(N * token_dim), 0.0);
        for (auto& g : outs)
            for (int64_t i = 0; i < g.numel(); ++i) sum[size_t(i)] += g[i];

        OraclePattern row;
        row.pattern = pat;
        row.clamped = n_clamp;
        row.runs = c.oracle_runs;
        for (size_t f = 0; f < cond.free_indices.size(); ++f) {
            double emp = sum[size_t(cond.free_indices[f])] / double(c.oracle_runs);
            double err = std::abs(emp - cond.mean(int64_t(f)));
            row.max_abs_mean_err = std::max(row.max_abs_mean_err, err);
            row.avg_abs_mean_err += err / double(cond.free_indices.size());
        }
        report.patterns.push_back(row);
        csv.row({runio::CsvWriter::num(row.pattern), runio::CsvWriter::num(row.clamped),
                 runio::CsvWriter::num(row.runs), runio::CsvWriter::num(row.max_abs_mean_err),
                 runio::CsvWriter::num(row.avg_abs_mean_err)});
        if (log) (*log) << "pattern " << pat << " max-abs mean err " << row.max_abs_mean_err << "\n";
    }

    // calibration: the oracle's own conditional sampler at 1e4 draws
    {
        RngStream prng = root.child("pattern").child(0);
        int64_t n_clamp = 2;
        MaskSet ms = partition_tokens(N, 1.0 - double(n_clamp) / double(N),
                                      1.0 - double(n_clamp) / double(N), prng);
        Tensor draw = toylab::sample_field(spec, prng, 1)[0];
        std::vector<int64_t> clamp_scalars;
        toylab::EVec vals(int64_t(ms.unmasked.size()) * token_dim);
        for (size_t i = 0; i < ms.unmasked.size(); ++i)
            for (int64_t d = 0; d < token_dim; ++d) {
                clamp_scalars.push_back(ms.unmasked[i] * token_dim + d);
                vals(int64_t(i) * token_dim + d) = draw.at(ms.unmasked[i], d);
            }
        toylab::ConditionalGaussian cond = toylab::analytic_conditional(spec, clamp_scalars, vals);
        Eigen::LLT<toylab::EMat> llt(cond.cov);
        toylab::EMat L = llt.matrixL();
        RngStream srng = root.child("calibration");
        const int64_t n = 10000;
        toylab::EVec mean_acc = toylab::EVec::Zero(cond.mean.size());
        for (int64_t s = 0; s < n; ++s) {
            toylab::EVec eps(cond.mean.size());
            for (int64_t i = 0; i < eps.size(); ++i) eps(i) = srng.normal();
            mean_acc += cond.mean + L * eps;
        }
        mean_acc /= double(n);
        for (int64_t i = 0; i < mean_acc.size(); ++i)
            report.calibration_mean_err = std::max(report.calibration_mean_err,
                                                   std::abs(mean_acc(i) - cond.mean(i)));
    }
    return report;
}

struct AblateRow {
    std::string head_kind;
    int64_t steps = 0;
    double energy = 0;
    double mean_err = 0;
    double cov_err = 0;
};

// Sampling-step ablation on the 2-d mixture task: for each denoising step
// count, generates from the given checkpoints and reports the energy
// distance to fresh mixture samples.
inline std::vector<AblateRow> ablate_cmd(const RunConfig& c,
                                         const std::vector<std::pair<std::string, std::string>>& kind_ckpts,
                                         std::ostream* log = nullptr) {
    if (c.task != "mixture2d") throw std::runtime_error("ablate-steps: expects the mixture2d task");
    std::string csv_path = (fs::path(c.out_dir) / "ablate_steps.csv").string();
    runio::CsvWriter csv(csv_path,
                         {"head_kind", "steps", "energy_distance", "mean_err", "cov_err", "samples"});
    RngStream root(c.seed, "ablate");

    RngStream target_rng = root.child("target");
    Tensor target = c.mixture.sample_batch(0, c.num_samples, target_rng);
    toylab::EVec tmean = toylab::EVec::Zero(2);
    toylab::EMat tcov = toylab::EMat::Zero(2, 2);
    {
        toylab::EVec m = toylab::EVec::Zero(2);
        for (int64_t i = 0; i < target.rows(); ++i)
            for (int64_t d = 0; d < 2; ++d) m(d) += target.at(i, d);
        m /= double(target.rows());
        for (int64_t i = 0; i < target.rows(); ++i)
            for (int64_t r = 0; r < 2; ++r)
                for (int64_t cc = 0; cc < 2; ++cc)
                    tcov(r, cc) += (target.at(i, r) - m(r)) * (target.at(i, cc) - m(cc));
        tcov /= double(target.rows() - 1);
        tmean = m;
    }

    std::vector<AblateRow> rows;
    for (auto& [kind, ckpt] : kind_ckpts) {
        ParamStore params = checkpoint::load(ckpt);
        RunConfig kc = c;
        kc.head = kind;
        kc.finalize();
        for (int64_t n_steps : c.ablate_steps) {
            engine::GenerateOptions opt;
            opt.ar_iters = 1;
            opt.sampler.steps = n_steps;
            opt.cfg = c.cfg_schedule();
            std::vector<Tensor> outs(size_t(c.num_samples));
            engine::detail::parallel_indexed(c.num_samples, c.engine.threads, [&](int64_t s) {
                RngStream rng = root.child(kind).child(uint64_t(n_steps)).child(uint64_t(s));
                engine::GenerateOptions o = opt;
                outs[size_t(s)] = engine::far_generate(kc.engine, params, o, rng).grid;
            });
            Tensor samples({c.num_samples, 2});
            for (int64_t s = 0; s < c.num_samples; ++s)
                for (int64_t d = 0; d < 2; ++d) samples.at(s, d) = outs[size_t(s)].at(0, d);

            AblateRow row;
            row.head_kind = kind;
            row.steps = n_steps;
            row.energy = toylab::energy_distance(samples, target);
            toylab::MetricReport mr = toylab::moment_error(samples, tmean, tcov);
            row.mean_err = mr.mean_err;
            row.cov_err = mr.cov_err;
            rows.push_back(row);
            csv.row({kind, runio::CsvWriter::num(n_steps), runio::CsvWriter::num(row.energy),
                     runio::CsvWriter::num(row.mean_err), runio::CsvWriter::num(row.cov_err),
                     runio::CsvWriter::num(c.num_samples)});
            if (log) (*log) << kind << " N=" << n_steps << " energy " << row.energy << "\n";
        }
    }
    return rows;
}

// Emits the analytic cost grid: masked MAR/FAR-style archs over the K x O
// grid plus the causal arch with and without the KV cache.
inline std::string cost_cmd(const RunConfig& c, std::ostream* log = nullptr) {
    std::string csv_path = (fs::path(c.out_dir) / "cost.csv").string();
    runio::CsvWriter csv(csv_path, {"arch_id", "K", "O", "kv_cache", "backbone_flops", "head_flops",
                                    "head_calls", "head_share"});

    costmodel::ArchSpec mar;
    mar.id = "mar-b-like";
    costmodel::ArchSpec far = mar;
    far.id = "far-b-like";
    far.head.step_size_conditioned = true;
    costmodel::ArchSpec causal;
    causal.kind = costmodel::ArchSpec::Kind::Causal;
    causal.id = "far-b-causal-like";
    causal.head.step_size_conditioned = true;

    auto emit = [&](const costmodel::CostBreakdown& b) {
        csv.row({b.arch_id, runio::CsvWriter::num(b.ar_iters), runio::CsvWriter::num(b.denoise_steps),
                 b.kv_cache ? "1" : "0", runio::CsvWriter::num(b.backbone_flops),
                 runio::CsvWriter::num(b.head_flops), runio::CsvWriter::num(b.head_calls),
                 runio::CsvWriter::num(b.head_share)});
    };
    const std::vector<int64_t> Ks{32, 64, 256};
    const std::vector<int64_t> Os{2, 8, 25, 50, 100};
    for (auto& arch : {mar, far})
        for (int64_t K : Ks)
            for (int64_t O : Os) emit(costmodel::breakdown(arch, K, O));
    for (bool cache : {true, false})
        for (int64_t O : Os) emit(costmodel::breakdown(causal, 0, O, cache));
    if (log) (*log) << "wrote " << csv_path << "\n";
    return csv_path;
}

struct GradcheckRow {
    std::string name;
    double max_rel_err = 0;
    bool pass = false;
};

// Finite-difference audit of every primitive and both head losses.
// `corrupt` flips on the deliberately wrong matmul backward rule so the
// audit itself can be shown to catch a bad derivative.
inline std::vector<GradcheckRow> gradcheck_cmd(bool corrupt = false, std::ostream* log = nullptr) {
    std::vector<GradcheckRow> rows;
    RngStream rng(7, "gradcheck");
    auto randt = [&](Shape s) { return Tensor::randn(std::move(s), rng); };

    auto check = [&](const std::string& name, const GraphFn& fn, const NamedTensors& point) {
        GradcheckRow row;
        row.name = name;
        row.max_rel_err = grad_check(
            [&, fn](Tape& t, const NamedTensors& p) {
                t.corrupt_matmul_backward = corrupt;
                return fn(t, p);
            },
            point, 1e-5);
        row.pass = row.max_rel_err < 1e-4;
        rows.push_back(row);
        if (log) (*log) << name << " " << row.max_rel_err << (row.pass ? " ok" : " FAIL") << "\n";
    };

    auto unary = [&](const std::string& name, auto apply) {
        NamedTensors point{{"x", randt({3, 5})}, {"t", randt({3, 5})}};
        check(name, [apply](Tape& t, const NamedTensors& p) {
            GraphOutputs g;
            g.objective = t.mse(apply(t, t.leaf(p.at("x"), true, "x")), t.constant(p.at("t")));
            return g;
        }, point);
    };
    check("matmul",
          [](Tape& t, const NamedTensors& p) {
              GraphOutputs g;
              g.objective = t.sum_all(
                  t.square(t.matmul(t.leaf(p.at("a"), true, "a"), t.leaf(p.at("b"), true, "b"))));
              return g;
          },
          {{"a", randt({3, 4})}, {"b", randt({4, 2})}});
    unary("add", [&](Tape& t, NodeId x) { return t.add(x, t.silu(x)); });
    unary("sub", [&](Tape& t, NodeId x) { return t.sub(t.square(x), x); });
    unary("mul", [&](Tape& t, NodeId x) { return t.mul(x, t.tanh_(x)); });
    unary("silu", [](Tape& t, NodeId x) { return t.silu(x); });
    unary("gelu", [](Tape& t, NodeId x) { return t.gelu(x); });
    unary("tanh", [](Tape& t, NodeId x) { return t.tanh_(x); });
    unary("exp", [](Tape& t, NodeId x) { return t.exp_(x); });
    unary("square", [](Tape& t, NodeId x) { return t.square(x); });
    unary("layer_norm", [](Tape& t, NodeId x) { return t.layer_norm(x); });
    unary("softmax_rows", [](Tape& t, NodeId x) { return t.softmax_rows(x); });
    unary("concat_slice", [](Tape& t, NodeId x) {
        return t.concat_rows({t.slice_rows(x, 0, 2), t.slice_rows(x, 2, 3)});
    });
    unary("gather_rows", [](Tape& t, NodeId x) { return t.gather_rows(x, {1, 0, 1}); });
    check("add_rowvec/mul_rowvec",
          [](Tape& t, const NamedTensors& p) {
              NodeId x = t.leaf(p.at("x"), true, "x");
              NodeId v = t.leaf(p.at("v"), true, "v");
              GraphOutputs g;
              g.objective = t.mean_all(t.square(t.add_rowvec(t.mul_rowvec(x, v), v)));
              return g;
          },
          {{"x", randt({3, 5})}, {"v", randt({5})}});
    {
        // stopgrad cannot be audited by finite differences (blocking a path is
        // the point); check the closed form grad(sum(sg(x) * x)) == x instead
        GradcheckRow row;
        row.name = "stopgrad";
        Tensor x = randt({2, 3});
        Tape t;
        t.corrupt_matmul_backward = corrupt;
        NodeId xi = t.leaf(x, true, "x");
        t.backward(t.sum_all(t.mul(t.stop_grad(xi), xi)));
        Tensor g = t.grad(xi);
        for (int64_t i = 0; i < g.numel(); ++i)
            row.max_rel_err = std::max(row.max_rel_err,
                                       std::abs(g[i] - x[i]) / (std::abs(x[i]) + 1e-12));
        row.pass = row.max_rel_err < 1e-12;
        rows.push_back(row);
        if (log) (*log) << row.name << " " << row.max_rel_err << (row.pass ? " ok" : " FAIL") << "\n";
    }

    // full losses over a tiny head; EMA teacher held fixed
    {
        HeadConfig hc;
        hc.token_dim = 2;
        hc.cond_dim = 3;
        hc.hidden_width = 8;
        hc.depth = 2;
        hc.t_embed_dim = 4;
        hc.d_embed_dim = 4;
        ParamStore params;
        RngStream hrng(8, "head");
        shortcut::init_params(params, hc, hrng);
        for (auto& name : params.names()) {
            Tensor& p = params.value(name);
            for (int64_t i = 0; i < p.numel(); ++i) p[i] += 0.1 * hrng.normal();
        }
        ParamStore ema_params;
        RngStream erng(9, "ema");
        shortcut::init_params(ema_params, hc, erng);
        Tensor z1 = randt({3, 2});
        Tensor cond = randt({3, 3});
        RngStream loss_rng(10, "loss");

        auto loss_check = [&](const std::string& name, auto loss_of) {
            RngStream r0 = loss_rng;
            auto rep = loss_of(params, r0);
            double max_err = 0;
            for (auto& pname : params.names()) {
                Tensor& p = params.value(pname);
                auto it = rep.grads.find(pname);
                if (it == rep.grads.end()) continue;
                for (int64_t i = 0; i < p.numel(); ++i) {
                    double keep = p[i];
                    const double h = 1e-5;
                    p[i] = keep + h;
                    RngStream rp = loss_rng;
                    double fp = loss_of(params, rp).total;
                    p[i] = keep - h;
                    RngStream rm = loss_rng;
                    double fm = loss_of(params, rm).total;
                    p[i] = keep;
                    double numeric = (fp - fm) / (2 * h);
                    double a = it->second[i];
                    if (std::abs(a - numeric) <= 1e-9) continue;
                    max_err = std::max(max_err,
                                       std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12));
                }
            }
            GradcheckRow row;
            row.name = name;
            row.max_rel_err = max_err;
            row.pass = max_err < 1e-4;
            rows.push_back(row);
            if (log) (*log) << name << " " << max_err << (row.pass ? " ok" : " FAIL") << "\n";
        };
        loss_check("fm_loss", [&](const ParamStore& p, RngStream& r) {
            ParamStore scratch;
            return shortcut::total_loss(hc, p, scratch, z1, cond, r, false);
        });
        loss_check("consistency_loss", [&](const ParamStore& p, RngStream& r) {
            return shortcut::consistency_loss(hc, p, ema_params, z1, cond, r);
        });
    }
    return rows;
}

}  // namespace trainer
}  // namespace arlab
