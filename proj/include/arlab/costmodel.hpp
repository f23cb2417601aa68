#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "arlab/schedule.hpp"

namespace arlab {
namespace costmodel {

// Analytic FLOP accounting for the generation pipelines. Conventions, fixed
// so every tally is auditable:
//   - 2 FLOPs per multiply-add; only matmul terms are counted.
//   - Transformer block, D = embed_dim, L new tokens, Lt attended context:
//       QKV + output projections  8*L*D^2
//       MLP (expansion 4)        16*L*D^2
//       attention scores+values   4*L*Lt*D   (head count does not change it)
//   - Masked pipeline, per AR iteration of the cosine plan: the encoder
//     computes over the g tokens known so far; the decoder computes the
//     c newly scheduled rows attending over known + scheduled (g + c).
//     CLS buffer rows are not modeled. This is an incremental-decoder
//     accounting; the toy implementation recomputes all pending rows
//     instead, and wall-clock is never compared against this model.
//   - Head call: the per-token MLP with AdaLN modulation; d-embedder
//     included only for step-size-conditioned heads.

struct HeadSpec {
    int64_t depth = 6;
    int64_t width = 1024;  // assumed hidden width for MAR-B-scale emulation
    int64_t token_dim = 16;
    int64_t cond_dim = 768;
    int64_t t_embed_dim = 256;
    int64_t d_embed_dim = 256;
    bool step_size_conditioned = false;
};

struct ArchSpec {
    enum class Kind { Masked, Causal } kind = Kind::Masked;
    std::string id = "mar-b-like";
    int64_t enc_layers = 12;
    int64_t dec_layers = 12;
    int64_t causal_layers = 24;
    int64_t embed_dim = 768;
    int64_t heads = 12;
    int64_t tokens = 256;
    HeadSpec head;

    void validate() const {
        if (embed_dim < 1 || heads < 1 || tokens < 1) throw std::runtime_error("arch: bad dims");
        if (kind == Kind::Masked && (enc_layers < 0 || dec_layers < 0))
            throw std::runtime_error("arch: bad layer counts");
    }
};

struct CostBreakdown {
    std::string arch_id;
    int64_t ar_iters = 0;       // K (masked; tokens for causal)
    int64_t denoise_steps = 0;  // O
    bool kv_cache = false;
    double backbone_flops = 0;
    double head_flops = 0;
    int64_t head_calls = 0;
    double head_share = 0;  // head / (head + backbone)
};

// One transformer block. seq_len counts the newly computed rows; with a KV
// cache they attend over cached_len + seq_len rows, otherwise over seq_len.
inline double flops_attention_block(int64_t embed_dim, int64_t heads, int64_t seq_len, bool kv_cache,
                                    int64_t cached_len = 0) {
    (void)heads;  // score/value cost is head-count invariant at fixed D
    const double d = double(embed_dim);
    const double l = double(seq_len);
    const double lt = kv_cache ? double(cached_len + seq_len) : l;
    return 8.0 * l * d * d + 16.0 * l * d * d + 4.0 * l * lt * d;
}

// Per-token cost of one head evaluation. A zero-depth head means no head at
// all, costing nothing.
inline double flops_head_call(const HeadSpec& h) {
    if (h.depth == 0) return 0.0;
    const double w = double(h.width);
    double flops = 0;
    flops += 2.0 * double(h.token_dim) * w;                    // input projection
    flops += 2.0 * double(h.cond_dim) * w;                     // condition projection
    flops += 2.0 * double(h.t_embed_dim) * w + 2.0 * w * w;    // timestep embedder MLP
    if (h.step_size_conditioned)
        flops += 2.0 * double(h.d_embed_dim) * w + 2.0 * w * w;  // step-size embedder MLP
    flops += double(h.depth) * 10.0 * w * w;  // per block: 6 (AdaLN) + 4 (MLP)
    flops += 2.0 * w * 2.0 * w;               // final modulation
    flops += 2.0 * w * double(h.token_dim);   // output projection
    return flops;
}

// Whole-run accounting for one (K, O) configuration.
inline CostBreakdown breakdown(const ArchSpec& arch, int64_t ar_iters, int64_t denoise_steps,
                               bool kv_cache = true) {
    arch.validate();
    if (denoise_steps < 1) throw std::runtime_error("breakdown: O must be >= 1");
    CostBreakdown out;
    out.arch_id = arch.id;
    out.ar_iters = ar_iters;
    out.denoise_steps = denoise_steps;
    out.kv_cache = kv_cache;

    const int64_t T = arch.tokens;
    if (arch.kind == ArchSpec::Kind::Masked) {
        if (ar_iters < 1 || ar_iters > T) throw std::runtime_error("breakdown: need 1 <= K <= T");
        std::vector<int64_t> plan = cosine_plan(ar_iters, T);
        int64_t known = 0;
        for (int64_t count : plan) {
            if (known > 0)
                out.backbone_flops += double(arch.enc_layers) *
                                      flops_attention_block(arch.embed_dim, arch.heads, known, false);
            out.backbone_flops += double(arch.dec_layers) *
                                  flops_attention_block(arch.embed_dim, arch.heads, count, true, known);
            known += count;
        }
    } else {
        for (int64_t i = 1; i <= T; ++i) {
            if (kv_cache)
                out.backbone_flops += double(arch.causal_layers) *
                                      flops_attention_block(arch.embed_dim, arch.heads, 1, true, i - 1);
            else
                out.backbone_flops += double(arch.causal_layers) *
                                      flops_attention_block(arch.embed_dim, arch.heads, i, false);
        }
        out.ar_iters = T;
    }
    out.head_calls = T * denoise_steps;
    out.head_flops = double(out.head_calls) * flops_head_call(arch.head);
    out.head_share = out.head_flops / (out.head_flops + out.backbone_flops);
    return out;
}

// Causal backbone totals split by term, with and without the KV cache.
struct CausalCostTerms {
    double proj = 0;
    double mlp = 0;
    double attn = 0;
    double total() const { return proj + mlp + attn; }
};

struct KvCacheComparison {
    CausalCostTerms with_cache;
    CausalCostTerms without_cache;
};

inline KvCacheComparison kv_cache_comparison(const ArchSpec& arch, int64_t tokens) {
    const double d = double(arch.embed_dim);
    const double layers = double(arch.causal_layers);
    KvCacheComparison out;
    for (int64_t i = 1; i <= tokens; ++i) {
        out.with_cache.proj += layers * 8.0 * d * d;
        out.with_cache.mlp += layers * 16.0 * d * d;
        out.with_cache.attn += layers * 4.0 * double(i) * d;
        out.without_cache.proj += layers * 8.0 * double(i) * d * d;
        out.without_cache.mlp += layers * 16.0 * double(i) * d * d;
        out.without_cache.attn += layers * 4.0 * double(i) * double(i) * d;
    }
    return out;
}

}  // namespace costmodel
}  // namespace arlab
