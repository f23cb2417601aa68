#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "arlab/autodiff.hpp"
#include "arlab/optim.hpp"
#include "arlab/rng.hpp"
#include "arlab/shortcut_head.hpp"
#include "arlab/tensor.hpp"

namespace arlab {

// Token-grid backbone that turns observed tokens plus a class label into one
// condition vector per token to generate. Two variants share the block
// machinery: a masked bidirectional encoder-decoder and a causal stack with
// an incremental KV cache.
struct BackboneConfig {
    enum class Kind { Masked, Causal } kind = Kind::Masked;
    int64_t embed_dim = 64;
    int64_t enc_depth = 2;
    int64_t dec_depth = 2;
    int64_t causal_depth = 4;
    int64_t num_heads = 4;
    int64_t num_classes = 1;
    int64_t cls_repeat = 64;  // masked default; the causal variant uses 1
    int64_t grid_h = 4;
    int64_t grid_w = 4;
    int64_t token_dim = 2;

    int64_t total_tokens() const { return grid_h * grid_w; }
    int64_t null_label() const { return num_classes; }  // CFG null condition row

    void validate() const {
        if (embed_dim % num_heads != 0) throw std::runtime_error("embed_dim must divide into heads");
        if (cls_repeat < 1) throw std::runtime_error("cls_repeat must be >= 1");
        if (grid_h < 1 || grid_w < 1 || token_dim < 1 || num_classes < 1)
            throw std::runtime_error("backbone dims must be positive");
    }
};

// Partition of the raster-flattened grid into unmasked (observed) and masked
// (to generate) index sets.
struct MaskSet {
    int64_t total = 0;
    std::vector<int64_t> unmasked;  // U, ascending
    std::vector<int64_t> masked;    // M, ascending
    double drawn_ratio = 1.0;       // the masking ratio that produced the split
};

// Draws ratio ~ U(ratio_lo, ratio_hi), masks round(ratio * n) indices (at
// least one) chosen uniformly without replacement.
inline MaskSet partition_tokens(int64_t n, double ratio_lo, double ratio_hi, RngStream& rng) {
    if (n < 1) throw std::runtime_error("partition_tokens: n must be >= 1");
    if (!(ratio_lo <= ratio_hi)) throw std::runtime_error("partition_tokens: bad ratio range");
    MaskSet out;
    out.total = n;
    out.drawn_ratio = rng.uniform(ratio_lo, ratio_hi);
    int64_t n_masked = std::max<int64_t>(1, int64_t(std::llround(out.drawn_ratio * double(n))));
    n_masked = std::min(n_masked, n);

    std::vector<int64_t> perm(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) perm[size_t(i)] = i;
    for (int64_t i = 0; i < n_masked; ++i) {
        int64_t j = i + int64_t(rng.uniform_index(uint64_t(n - i)));
        std::swap(perm[size_t(i)], perm[size_t(j)]);
    }
    out.masked.assign(perm.begin(), perm.begin() + n_masked);
    out.unmasked.assign(perm.begin() + n_masked, perm.end());
    std::sort(out.masked.begin(), out.masked.end());
    std::sort(out.unmasked.begin(), out.unmasked.end());
    return out;
}

// Raster flattening between a [h, w, token_dim] grid and a [h*w, token_dim]
// sequence (row-major, so this is a reshape).
inline Tensor flatten_grid(const Tensor& grid) {
    if (grid.ndim() != 3) throw ShapeError("flatten_grid: expected [h, w, d]");
    Tensor out({grid.dim(0) * grid.dim(1), grid.dim(2)});
    for (int64_t i = 0; i < grid.numel(); ++i) out[i] = grid[i];
    return out;
}

inline Tensor unflatten_grid(const Tensor& seq, int64_t h, int64_t w) {
    if (seq.ndim() != 2 || seq.dim(0) != h * w) throw ShapeError("unflatten_grid: shape mismatch");
    Tensor out({h, w, seq.dim(1)});
    for (int64_t i = 0; i < seq.numel(); ++i) out[i] = seq[i];
    return out;
}

namespace backbone {

inline void init_ln(ParamStore& p, const std::string& prefix, int64_t dim) {
    p.add(prefix + ".g", Tensor::full({dim}, 1.0));
    p.add(prefix + ".b", Tensor({dim}), /*wd_exempt=*/true);
}

inline void init_block(ParamStore& p, const std::string& prefix, int64_t dim, RngStream& rng) {
    auto w = [&](const std::string& n, Shape s) {
        double ws = shortcut::fan_scaled_std(s);
        p.add(prefix + n, Tensor::randn(std::move(s), rng, ws));
    };
    auto b = [&](const std::string& n, Shape s) { p.add(prefix + n, Tensor(std::move(s)), true); };
    init_ln(p, prefix + "ln1", dim);
    w("attn.wq", {dim, dim});
    b("attn.bq", {dim});
    w("attn.wk", {dim, dim});
    b("attn.bk", {dim});
    w("attn.wv", {dim, dim});
    b("attn.bv", {dim});
    w("attn.wo", {dim, dim});
    b("attn.bo", {dim});
    init_ln(p, prefix + "ln2", dim);
    w("mlp.w1", {dim, 4 * dim});
    b("mlp.b1", {4 * dim});
    w("mlp.w2", {4 * dim, dim});
    b("mlp.b2", {dim});
}

inline NodeId ln_affine(Tape& t, ParamLeaves& P, NodeId x, const std::string& prefix) {
    return t.add_rowvec(t.mul_rowvec(t.layer_norm(x), P(prefix + ".g")), P(prefix + ".b"));
}

// Pre-LN block: x += attn(ln1(x)); x += mlp(ln2(x)). attn_mask, when
// present, is added to every head's scores before softmax.
inline NodeId block(Tape& t, ParamLeaves& P, NodeId x, const std::string& prefix, int64_t heads,
                    std::optional<NodeId> attn_mask = std::nullopt) {
    const int64_t D = t.value(x).cols();
    const int64_t Dh = D / heads;
    NodeId h = ln_affine(t, P, x, prefix + "ln1");
    NodeId q = t.add_rowvec(t.matmul(h, P(prefix + "attn.wq")), P(prefix + "attn.bq"));
    NodeId k = t.add_rowvec(t.matmul(h, P(prefix + "attn.wk")), P(prefix + "attn.bk"));
    NodeId v = t.add_rowvec(t.matmul(h, P(prefix + "attn.wv")), P(prefix + "attn.bv"));
    std::vector<NodeId> head_outs;
    for (int64_t hd = 0; hd < heads; ++hd) {
        NodeId qh = t.slice_cols(q, hd * Dh, (hd + 1) * Dh);
        NodeId kh = t.slice_cols(k, hd * Dh, (hd + 1) * Dh);
        NodeId vh = t.slice_cols(v, hd * Dh, (hd + 1) * Dh);
        NodeId scores = t.scale(t.matmul(qh, kh, false, true), 1.0 / std::sqrt(double(Dh)));
        if (attn_mask) scores = t.add(scores, *attn_mask);
        head_outs.push_back(t.matmul(t.softmax_rows(scores), vh));
    }
    NodeId attn = t.add_rowvec(
        t.matmul(t.concat_cols(std::span<const NodeId>(head_outs.data(), head_outs.size())),
                 P(prefix + "attn.wo")),
        P(prefix + "attn.bo"));
    x = t.add(x, attn);
    NodeId m = ln_affine(t, P, x, prefix + "ln2");
    m = t.add_rowvec(t.matmul(t.silu(t.add_rowvec(t.matmul(m, P(prefix + "mlp.w1")), P(prefix + "mlp.b1"))),
                              P(prefix + "mlp.w2")),
                     P(prefix + "mlp.b2"));
    return t.add(x, m);
}

// Additive causal mask: row r may attend to columns <= r.
inline Tensor causal_mask(int64_t n) {
    Tensor m({n, n});
    for (int64_t r = 0; r < n; ++r)
        for (int64_t c = r + 1; c < n; ++c) m.at(r, c) = -1e9;
    return m;
}

}  // namespace backbone

namespace masked {

inline void init_params(ParamStore& p, const BackboneConfig& cfg, RngStream& rng,
                        const std::string& prefix = "mask.") {
    cfg.validate();
    const int64_t D = cfg.embed_dim;
    const double emb = 1.0 / std::sqrt(double(D));
    p.add(prefix + "tok_in.w", Tensor::randn({cfg.token_dim, D}, rng, shortcut::fan_scaled_std({cfg.token_dim, D})));
    p.add(prefix + "tok_in.b", Tensor({D}), true);
    p.add(prefix + "cls.table", Tensor::randn({cfg.num_classes + 1, D}, rng, emb));
    p.add(prefix + "pos_enc", Tensor::randn({cfg.total_tokens(), D}, rng, emb));
    p.add(prefix + "pos_dec", Tensor::randn({cfg.total_tokens(), D}, rng, emb));
    p.add(prefix + "mask_token", Tensor::randn({1, D}, rng, emb));
    for (int64_t l = 0; l < cfg.enc_depth; ++l)
        backbone::init_block(p, prefix + "enc" + std::to_string(l) + ".", D, rng);
    backbone::init_ln(p, prefix + "enc_ln_f", D);
    for (int64_t l = 0; l < cfg.dec_depth; ++l)
        backbone::init_block(p, prefix + "dec" + std::to_string(l) + ".", D, rng);
    backbone::init_ln(p, prefix + "dec_ln_f", D);
}

struct Inputs {
    std::vector<int64_t> u_positions;  // raster indices of observed tokens
    Tensor u_values;                   // [|U|, token_dim]; ignored when U empty
    std::vector<int64_t> m_positions;  // indices needing conditions
    int64_t label = 0;
};

// Encoder over cls_repeat class tokens plus observed tokens; decoder over
// encoder output plus one mask token per requested index. Returns the
// [|M|, embed_dim] condition rows in m_positions order.
inline NodeId conditions_node(Tape& t, const BackboneConfig& cfg, ParamLeaves& P, const Inputs& in,
                              const std::string& prefix = "mask.") {
    const int64_t N = cfg.total_tokens();
    if (in.label < 0 || in.label > cfg.null_label())
        throw std::runtime_error("masked_conditions: unknown class label " + std::to_string(in.label));
    for (int64_t ix : in.u_positions)
        if (ix < 0 || ix >= N) throw std::runtime_error("masked_conditions: U position out of range");
    for (int64_t ix : in.m_positions)
        if (ix < 0 || ix >= N) throw std::runtime_error("masked_conditions: M position out of range");
    if (in.m_positions.empty()) throw std::runtime_error("masked_conditions: M must be nonempty");
    const int64_t Nu = int64_t(in.u_positions.size());
    if (Nu > 0 && (in.u_values.rows() != Nu || in.u_values.cols() != cfg.token_dim))
        throw ShapeError("masked_conditions: U values shape");

    std::vector<int64_t> cls_rows(size_t(cfg.cls_repeat), in.label);
    NodeId cls = t.gather_rows(P(prefix + "cls.table"), cls_rows);

    NodeId enc_in;
    if (Nu > 0) {
        NodeId toks = t.add_rowvec(t.matmul(t.constant(in.u_values), P(prefix + "tok_in.w")),
                                   P(prefix + "tok_in.b"));
        NodeId pos = t.gather_rows(P(prefix + "pos_enc"), in.u_positions);
        enc_in = t.concat_rows({cls, t.add(toks, pos)});
    } else {
        enc_in = cls;
    }
    NodeId h = enc_in;
    for (int64_t l = 0; l < cfg.enc_depth; ++l)
        h = backbone::block(t, P, h, prefix + "enc" + std::to_string(l) + ".", cfg.num_heads);
    h = backbone::ln_affine(t, P, h, prefix + "enc_ln_f");

    std::vector<int64_t> zeros(in.m_positions.size(), 0);
    NodeId mask_rows = t.add(t.gather_rows(P(prefix + "mask_token"), zeros),
                             t.gather_rows(P(prefix + "pos_dec"), in.m_positions));
    NodeId d = t.concat_rows({h, mask_rows});
    for (int64_t l = 0; l < cfg.dec_depth; ++l)
        d = backbone::block(t, P, d, prefix + "dec" + std::to_string(l) + ".", cfg.num_heads);
    d = backbone::ln_affine(t, P, d, prefix + "dec_ln_f");

    const int64_t rows = t.value(d).rows();
    return t.slice_rows(d, rows - int64_t(in.m_positions.size()), rows);
}

inline Tensor conditions(const BackboneConfig& cfg, const ParamStore& params, const Inputs& in,
                         const std::string& prefix = "mask.") {
    Tape t;
    ParamLeaves P(t, params, /*trainable=*/false);
    return t.value(conditions_node(t, cfg, P, in, prefix));
}

}  // namespace masked

namespace causal {

inline void init_params(ParamStore& p, const BackboneConfig& cfg, RngStream& rng,
                        const std::string& prefix = "causal.") {
    cfg.validate();
    const int64_t D = cfg.embed_dim;
    const double emb = 1.0 / std::sqrt(double(D));
    p.add(prefix + "tok_in.w", Tensor::randn({cfg.token_dim, D}, rng, shortcut::fan_scaled_std({cfg.token_dim, D})));
    p.add(prefix + "tok_in.b", Tensor({D}), true);
    p.add(prefix + "cls.table", Tensor::randn({cfg.num_classes + 1, D}, rng, emb));
    p.add(prefix + "pos", Tensor::randn({cfg.total_tokens(), D}, rng, emb));
    for (int64_t l = 0; l < cfg.causal_depth; ++l)
        backbone::init_block(p, prefix + "blk" + std::to_string(l) + ".", D, rng);
    backbone::init_ln(p, prefix + "ln_f", D);
}

// Number of token rows in a prefix; a default-constructed (empty) tensor is
// the empty prefix.
inline int64_t prefix_rows(const Tensor& prefix_tokens) {
    return prefix_tokens.numel() == 0 ? 0 : prefix_tokens.rows();
}

// Row layout: row 0 is the single CLS token, row j (j >= 1) is token z_j
// with positional embedding j-1. The output above row i-1 is c_i.
inline NodeId embed_rows_node(Tape& t, const BackboneConfig& cfg, ParamLeaves& P,
                              const Tensor& prefix_tokens, int64_t label,
                              const std::string& prefix = "causal.") {
    if (label < 0 || label > cfg.null_label())
        throw std::runtime_error("causal_condition: unknown class label");
    std::vector<int64_t> cls_row(1, label);
    NodeId cls = t.gather_rows(P(prefix + "cls.table"), cls_row);
    if (prefix_rows(prefix_tokens) == 0) return cls;
    if (prefix_tokens.rows() > cfg.total_tokens())
        throw std::runtime_error("causal_condition: prefix longer than max sequence");
    NodeId toks = t.add_rowvec(t.matmul(t.constant(prefix_tokens), P(prefix + "tok_in.w")),
                               P(prefix + "tok_in.b"));
    std::vector<int64_t> pos_ix(size_t(prefix_tokens.rows()));
    for (size_t i = 0; i < pos_ix.size(); ++i) pos_ix[i] = int64_t(i);
    NodeId pos = t.gather_rows(P(prefix + "pos"), pos_ix);
    return t.concat_rows({cls, t.add(toks, pos)});
}

// Full-sequence pass with a causal mask; returns all condition rows:
// row j of the result is c_{j+1}.
inline NodeId conditions_all_node(Tape& t, const BackboneConfig& cfg, ParamLeaves& P,
                                  const Tensor& prefix_tokens, int64_t label,
                                  const std::string& prefix = "causal.") {
    NodeId h = embed_rows_node(t, cfg, P, prefix_tokens, label, prefix);
    NodeId mask = t.constant(backbone::causal_mask(t.value(h).rows()));
    for (int64_t l = 0; l < cfg.causal_depth; ++l)
        h = backbone::block(t, P, h, prefix + "blk" + std::to_string(l) + ".", cfg.num_heads, mask);
    return backbone::ln_affine(t, P, h, prefix + "ln_f");
}

// Per-layer appended keys/values of one generation episode.
struct KvCache {
    int64_t rows = 0;  // CLS row plus one per processed token
    std::vector<Tensor> k, v;
};

// Incremental step: given the full prefix z_1..z_{i-1}, requires the cache
// to hold exactly the rows before the newest one, appends one key/value per
// layer and returns c_i.
inline Tensor condition(const BackboneConfig& cfg, const ParamStore& params,
                        const Tensor& prefix_tokens, int64_t label, KvCache& cache,
                        const std::string& prefix = "causal.") {
    const int64_t P_rows = prefix_rows(prefix_tokens);
    const int64_t expected = P_rows;  // CLS row + first P-1 tokens when P >= 1
    if (cache.rows != expected)
        throw std::runtime_error("causal_condition: cache length " + std::to_string(cache.rows) +
                                 ", expected " + std::to_string(expected));
    if (cache.k.empty()) {
        cache.k.resize(size_t(cfg.causal_depth));
        cache.v.resize(size_t(cfg.causal_depth));
    }

    Tape t;
    ParamLeaves P(t, params, /*trainable=*/false);
    auto pp = [&](const std::string& n) { return P(prefix + n); };

    // embed the newest row: CLS when the prefix is empty, else the last token
    NodeId x;
    if (P_rows == 0) {
        if (label < 0 || label > cfg.null_label())
            throw std::runtime_error("causal_condition: unknown class label");
        std::vector<int64_t> cls_row(1, label);
        x = t.gather_rows(pp("cls.table"), cls_row);
    } else {
        Tensor last({1, cfg.token_dim});
        for (int64_t ccol = 0; ccol < cfg.token_dim; ++ccol) last[ccol] = prefix_tokens.at(P_rows - 1, ccol);
        NodeId tok = t.add_rowvec(t.matmul(t.constant(last), pp("tok_in.w")), pp("tok_in.b"));
        std::vector<int64_t> pos_ix(1, P_rows - 1);
        x = t.add(tok, t.gather_rows(pp("pos"), pos_ix));
    }

    const int64_t D = cfg.embed_dim;
    const int64_t Dh = D / cfg.num_heads;
    for (int64_t l = 0; l < cfg.causal_depth; ++l) {
        std::string bp = prefix + "blk" + std::to_string(l) + ".";
        NodeId h = backbone::ln_affine(t, P, x, bp + "ln1");
        NodeId q = t.add_rowvec(t.matmul(h, P(bp + "attn.wq")), P(bp + "attn.bq"));
        NodeId k_new = t.add_rowvec(t.matmul(h, P(bp + "attn.wk")), P(bp + "attn.bk"));
        NodeId v_new = t.add_rowvec(t.matmul(h, P(bp + "attn.wv")), P(bp + "attn.bv"));
        NodeId K = cache.rows == 0 ? k_new : t.concat_rows({t.constant(cache.k[size_t(l)]), k_new});
        NodeId V = cache.rows == 0 ? v_new : t.concat_rows({t.constant(cache.v[size_t(l)]), v_new});
        std::vector<NodeId> head_outs;
        for (int64_t hd = 0; hd < cfg.num_heads; ++hd) {
            NodeId qh = t.slice_cols(q, hd * Dh, (hd + 1) * Dh);
            NodeId kh = t.slice_cols(K, hd * Dh, (hd + 1) * Dh);
            NodeId vh = t.slice_cols(V, hd * Dh, (hd + 1) * Dh);
            NodeId scores = t.scale(t.matmul(qh, kh, false, true), 1.0 / std::sqrt(double(Dh)));
            head_outs.push_back(t.matmul(t.softmax_rows(scores), vh));
        }
        NodeId attn = t.add_rowvec(
            t.matmul(t.concat_cols(std::span<const NodeId>(head_outs.data(), head_outs.size())),
                     P(bp + "attn.wo")),
            P(bp + "attn.bo"));
        x = t.add(x, attn);
        NodeId m = backbone::ln_affine(t, P, x, bp + "ln2");
        m = t.add_rowvec(
            t.matmul(t.silu(t.add_rowvec(t.matmul(m, P(bp + "mlp.w1")), P(bp + "mlp.b1"))), P(bp + "mlp.w2")),
            P(bp + "mlp.b2"));
        x = t.add(x, m);

        // persist this row's key/value
        Tensor newK = t.value(K), newV = t.value(V);
        cache.k[size_t(l)] = std::move(newK);
        cache.v[size_t(l)] = std::move(newV);
    }
    cache.rows += 1;
    NodeId out = backbone::ln_affine(t, P, x, prefix + "ln_f");
    Tensor c({cfg.embed_dim});
    const Tensor& ov = t.value(out);
    for (int64_t i = 0; i < cfg.embed_dim; ++i) c[i] = ov[i];
    return c;
}

// Reference path: recompute c_i from the whole prefix without a cache.
inline Tensor condition_no_cache(const BackboneConfig& cfg, const ParamStore& params,
                                 const Tensor& prefix_tokens, int64_t label,
                                 const std::string& prefix = "causal.") {
    Tape t;
    ParamLeaves P(t, params, /*trainable=*/false);
    NodeId all = conditions_all_node(t, cfg, P, prefix_tokens, label, prefix);
    const Tensor& av = t.value(all);
    Tensor c({cfg.embed_dim});
    int64_t last = av.rows() - 1;
    for (int64_t i = 0; i < cfg.embed_dim; ++i) c[i] = av.at(last, i);
    return c;
}

}  // namespace causal

}  // namespace arlab
