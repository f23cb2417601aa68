#pragma once

#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "arlab/engine.hpp"
#include "arlab/optim.hpp"
#include "arlab/toylab.hpp"

namespace arlab {

// One JSON config drives every command; CLI flags override individual keys.
// Missing keys fall back to the defaults below, so a config file only needs
// the fields it changes.
struct RunConfig {
    std::string task = "gaussian-field";  // gaussian-field | mixture2d
    std::string head = "shortcut";        // shortcut | fm | cvae
    std::string backbone = "masked";      // masked | causal
    uint64_t seed = 1;
    std::string out_dir = "runs/out";

    // training
    int64_t steps = 20000;
    int64_t batch = 64;
    int64_t warmup_steps = 500;
    double lr_floor_frac = 0.1;    // cosine decay floor as a fraction of the base lr
    int64_t checkpoint_count = 4;  // evenly spaced EMA checkpoints (>= 3 for trend checks)
    double clip_norm = 1.0;
    double ema_decay = 0.9999;
    AdamConfig adam;

    engine::EngineConfig engine;

    // task parameters
    double field_length_scale = 1.5;
    toylab::Mixture2dSpec mixture;

    // sampling / evaluation
    int64_t ar_iters = 8;
    int64_t sample_steps = 8;
    double cfg_weight = 1.0;
    std::string cfg_kind = "linear";
    int64_t num_samples = 4096;
    std::vector<int64_t> ablate_steps = {1, 2, 4, 8, 128};
    int64_t oracle_patterns = 5;
    int64_t oracle_runs = 2000;

    engine::HeadKind head_kind() const {
        if (head == "shortcut") return engine::HeadKind::Shortcut;
        if (head == "fm") return engine::HeadKind::FlowMatchingOnly;
        if (head == "cvae") return engine::HeadKind::Cvae;
        throw std::runtime_error("config: unknown head '" + head + "'");
    }

    CfgSchedule cfg_schedule() const {
        CfgSchedule s;
        s.terminal = cfg_weight;
        if (cfg_kind == "linear")
            s.kind = CfgSchedule::Kind::Linear;
        else if (cfg_kind == "constant")
            s.kind = CfgSchedule::Kind::Constant;
        else
            throw std::runtime_error("config: unknown cfg_kind '" + cfg_kind + "'");
        s.validate();
        return s;
    }

    toylab::GaussianFieldSpec field_spec() const {
        return toylab::GaussianFieldSpec::squared_exponential(
            engine.backbone.grid_h, engine.backbone.grid_w, engine.backbone.token_dim,
            field_length_scale);
    }

    // Resolves derived fields and checks consistency.
    void finalize() {
        engine.backbone.kind =
            backbone == "causal" ? BackboneConfig::Kind::Causal : BackboneConfig::Kind::Masked;
        if (backbone != "causal" && backbone != "masked")
            throw std::runtime_error("config: unknown backbone '" + backbone + "'");
        if (task != "gaussian-field" && task != "mixture2d")
            throw std::runtime_error("config: unknown task '" + task + "'");
        engine.head_kind = head_kind();
        if (task == "mixture2d") {
            engine.backbone.grid_h = 1;
            engine.backbone.grid_w = 1;
            engine.backbone.token_dim = 2;
            engine.backbone.num_classes = std::max<int64_t>(1, mixture.num_classes());
        }
        engine.head.token_dim = engine.backbone.token_dim;
        engine.head.cond_dim = engine.backbone.embed_dim;
        engine.cvae.token_dim = engine.backbone.token_dim;
        engine.cvae.cond_dim = engine.backbone.embed_dim;
        engine.validate();
    }
};

namespace config {

using nlohmann::json;

inline RunConfig from_json(const json& j) {
    RunConfig c;
    c.task = j.value("task", c.task);
    c.head = j.value("head", c.head);
    c.backbone = j.value("backbone", c.backbone);
    c.seed = j.value("seed", c.seed);
    c.out_dir = j.value("out", c.out_dir);

    if (j.contains("train")) {
        const json& t = j.at("train");
        c.steps = t.value("steps", c.steps);
        c.batch = t.value("batch", c.batch);
        c.warmup_steps = t.value("warmup_steps", c.warmup_steps);
        c.lr_floor_frac = t.value("lr_floor_frac", c.lr_floor_frac);
        c.checkpoint_count = t.value("checkpoint_count", c.checkpoint_count);
        c.clip_norm = t.value("clip_norm", c.clip_norm);
        c.ema_decay = t.value("ema_decay", c.ema_decay);
        c.adam.lr = t.value("lr", c.adam.lr);
        c.adam.beta1 = t.value("beta1", c.adam.beta1);
        c.adam.beta2 = t.value("beta2", c.adam.beta2);
        c.adam.weight_decay = t.value("weight_decay", c.adam.weight_decay);
        c.engine.label_dropout = t.value("label_dropout", c.engine.label_dropout);
        c.engine.consistency_fraction = t.value("consistency_fraction", c.engine.consistency_fraction);
        c.engine.mask_ratio_lo = t.value("mask_ratio_lo", c.engine.mask_ratio_lo);
        c.engine.mask_ratio_hi = t.value("mask_ratio_hi", c.engine.mask_ratio_hi);
        c.engine.threads = t.value("threads", c.engine.threads);
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        BackboneConfig& b = c.engine.backbone;
        b.embed_dim = m.value("embed_dim", b.embed_dim);
        b.enc_depth = m.value("enc_depth", b.enc_depth);
        b.dec_depth = m.value("dec_depth", b.dec_depth);
        b.causal_depth = m.value("causal_depth", b.causal_depth);
        b.num_heads = m.value("heads", b.num_heads);
        b.num_classes = m.value("num_classes", b.num_classes);
        b.cls_repeat = m.value("cls_repeat", b.cls_repeat);
        b.grid_h = m.value("grid_h", b.grid_h);
        b.grid_w = m.value("grid_w", b.grid_w);
        b.token_dim = m.value("token_dim", b.token_dim);
        if (m.contains("head")) {
            const json& h = m.at("head");
            c.engine.head.hidden_width = h.value("width", c.engine.head.hidden_width);
            c.engine.head.depth = h.value("depth", c.engine.head.depth);
            c.engine.head.t_embed_dim = h.value("t_embed_dim", c.engine.head.t_embed_dim);
            c.engine.head.d_embed_dim = h.value("d_embed_dim", c.engine.head.d_embed_dim);
            c.engine.head.sigma_min = h.value("sigma_min", c.engine.head.sigma_min);
        }
        if (m.contains("cvae")) {
            const json& v = m.at("cvae");
            c.engine.cvae.latent_dim = v.value("latent_dim", c.engine.cvae.latent_dim);
            c.engine.cvae.hidden_width = v.value("width", c.engine.cvae.hidden_width);
            c.engine.cvae.encoder_depth = v.value("encoder_depth", c.engine.cvae.encoder_depth);
            c.engine.cvae.decoder_depth = v.value("decoder_depth", c.engine.cvae.decoder_depth);
            c.engine.cvae.kl_weight = v.value("kl_weight", c.engine.cvae.kl_weight);
        }
    }
    if (j.contains("task_spec")) {
        const json& t = j.at("task_spec");
        c.field_length_scale = t.value("length_scale", c.field_length_scale);
        c.mixture.num_components = t.value("mixture_components", c.mixture.num_components);
        c.mixture.radius = t.value("mixture_radius", c.mixture.radius);
        c.mixture.sigma = t.value("mixture_sigma", c.mixture.sigma);
    }
    if (j.contains("sample")) {
        const json& s = j.at("sample");
        c.ar_iters = s.value("ar_iters", c.ar_iters);
        c.sample_steps = s.value("steps", c.sample_steps);
        c.cfg_weight = s.value("cfg_weight", c.cfg_weight);
        c.cfg_kind = s.value("cfg_kind", c.cfg_kind);
        c.num_samples = s.value("num_samples", c.num_samples);
        if (s.contains("ablate_steps")) c.ablate_steps = s.at("ablate_steps").get<std::vector<int64_t>>();
        c.oracle_patterns = s.value("oracle_patterns", c.oracle_patterns);
        c.oracle_runs = s.value("oracle_runs", c.oracle_runs);
    }
    c.finalize();
    return c;
}

inline RunConfig load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open '" + path + "'");
    json j = json::parse(is);
    return from_json(j);
}

inline json to_json(const RunConfig& c) {
    json j;
    j["task"] = c.task;
    j["head"] = c.head;
    j["backbone"] = c.backbone;
    j["seed"] = c.seed;
    j["out"] = c.out_dir;
    j["train"] = {{"steps", c.steps},
                  {"batch", c.batch},
                  {"warmup_steps", c.warmup_steps},
                  {"lr_floor_frac", c.lr_floor_frac},
                  {"checkpoint_count", c.checkpoint_count},
                  {"clip_norm", c.clip_norm},
                  {"ema_decay", c.ema_decay},
                  {"lr", c.adam.lr},
                  {"beta1", c.adam.beta1},
                  {"beta2", c.adam.beta2},
                  {"weight_decay", c.adam.weight_decay},
                  {"label_dropout", c.engine.label_dropout},
                  {"consistency_fraction", c.engine.consistency_fraction},
                  {"mask_ratio_lo", c.engine.mask_ratio_lo},
                  {"mask_ratio_hi", c.engine.mask_ratio_hi},
                  {"threads", c.engine.threads}};
    j["model"] = {{"embed_dim", c.engine.backbone.embed_dim},
                  {"enc_depth", c.engine.backbone.enc_depth},
                  {"dec_depth", c.engine.backbone.dec_depth},
                  {"causal_depth", c.engine.backbone.causal_depth},
                  {"heads", c.engine.backbone.num_heads},
                  {"num_classes", c.engine.backbone.num_classes},
                  {"cls_repeat", c.engine.backbone.cls_repeat},
                  {"grid_h", c.engine.backbone.grid_h},
                  {"grid_w", c.engine.backbone.grid_w},
                  {"token_dim", c.engine.backbone.token_dim},
                  {"head",
                   {{"width", c.engine.head.hidden_width},
                    {"depth", c.engine.head.depth},
                    {"t_embed_dim", c.engine.head.t_embed_dim},
                    {"d_embed_dim", c.engine.head.d_embed_dim},
                    {"sigma_min", c.engine.head.sigma_min}}},
                  {"cvae",
                   {{"latent_dim", c.engine.cvae.latent_dim},
                    {"width", c.engine.cvae.hidden_width},
                    {"encoder_depth", c.engine.cvae.encoder_depth},
                    {"decoder_depth", c.engine.cvae.decoder_depth},
                    {"kl_weight", c.engine.cvae.kl_weight}}}};
    j["task_spec"] = {{"length_scale", c.field_length_scale},
                      {"mixture_components", c.mixture.num_components},
                      {"mixture_radius", c.mixture.radius},
                      {"mixture_sigma", c.mixture.sigma}};
    j["sample"] = {{"ar_iters", c.ar_iters},      {"steps", c.sample_steps},
                   {"cfg_weight", c.cfg_weight},  {"cfg_kind", c.cfg_kind},
                   {"num_samples", c.num_samples}, {"ablate_steps", c.ablate_steps},
                   {"oracle_patterns", c.oracle_patterns}, {"oracle_runs", c.oracle_runs}};
    return j;
}

}  // namespace config

}  // namespace arlab
