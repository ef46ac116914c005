#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stmem/errors.hpp"
#include "stmem/kernels.hpp"
#include "stmem/patchify.hpp"
#include "stmem/record.hpp"
#include "stmem/rng.hpp"

namespace stmem {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct ModelConfig {
    int embed_dim = 64;
    int encoder_depth = 4;
    int encoder_heads = 4;
    int mlp_ratio = 4;
    int decoder_dim = 32;
    int decoder_depth = 2;
    int decoder_heads = 2;
    int patch_size = 75;
    int max_leads = 12;
    int max_patches_per_lead = 64;
    bool use_sep = true;
    bool use_lead_embedding = true;
    int num_classes = 0;  // 0 = no classifier head
    std::vector<std::string> lead_names = standard_12_leads();
    std::vector<std::string> active_leads;  // empty = all of lead_names
    std::vector<std::string> label_names;

    void validate() const;
    // embedding row for a lead name; honors the active restriction
    int lead_row(const std::string& name) const;
    int tokens_per_lead(int n) const { return use_sep ? n + 2 : n; }
};

// View with forward passes limited to `subset`; embedding rows are unchanged,
// so a checkpoint trained on 12 leads drives any subset of them.
ModelConfig restrict_leads(const ModelConfig& config, const std::vector<std::string>& subset);

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

template <class Real>
struct Tensor {
    std::vector<int> shape;
    std::vector<Real> v;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) { reshape(std::move(s)); }

    void reshape(std::vector<int> s) {
        shape = std::move(s);
        std::int64_t n = 1;
        for (int d : shape) n *= d;
        v.assign(static_cast<std::size_t>(n), Real(0));
    }
    std::int64_t size() const { return static_cast<std::int64_t>(v.size()); }
    bool empty() const { return v.empty(); }
    Real* data() { return v.data(); }
    const Real* data() const { return v.data(); }
};

template <class Real>
struct BlockParams {
    Tensor<Real> ln1_g, ln1_b;
    Tensor<Real> qkv_w, qkv_b;          // D x 3D, 3D
    Tensor<Real> attn_out_w, attn_out_b;  // D x D, D
    Tensor<Real> ln2_g, ln2_b;
    Tensor<Real> fc1_w, fc1_b;          // D x H, H
    Tensor<Real> fc2_w, fc2_b;          // H x D, D
};

template <class Real>
struct ModelParams {
    Tensor<Real> proj_w, proj_b;        // p x D, D
    Tensor<Real> pos_embed;             // (max_n + 2) x D, fixed sinusoid
    Tensor<Real> lead_embed;            // max_leads x D
    Tensor<Real> sep_embed, mask_embed; // D
    std::vector<BlockParams<Real>> enc;
    Tensor<Real> enc_norm_g, enc_norm_b;
    Tensor<Real> dec_in_w, dec_in_b;    // D x dd, dd
    std::vector<BlockParams<Real>> dec;
    Tensor<Real> dec_norm_g, dec_norm_b;
    Tensor<Real> recon_w, recon_b;      // dd x p, p
    Tensor<Real> head_w, head_b;        // D x K, K (present when K >= 2)
};

// Enumerates every tensor with a stable name; `trainable` is false only for
// the sinusoidal position table. Serialization, the optimizer, and the
// gradient checker all share this order.
template <class Params, class F>
void visit_params(Params& p, F&& f) {
    f("proj_w", p.proj_w, true);
    f("proj_b", p.proj_b, true);
    f("pos_embed", p.pos_embed, false);
    f("lead_embed", p.lead_embed, true);
    f("sep_embed", p.sep_embed, true);
    f("mask_embed", p.mask_embed, true);
    auto visit_block = [&f](const std::string& prefix, auto& b) {
        f(prefix + ".ln1_g", b.ln1_g, true);
        f(prefix + ".ln1_b", b.ln1_b, true);
        f(prefix + ".qkv_w", b.qkv_w, true);
        f(prefix + ".qkv_b", b.qkv_b, true);
        f(prefix + ".attn_out_w", b.attn_out_w, true);
        f(prefix + ".attn_out_b", b.attn_out_b, true);
        f(prefix + ".ln2_g", b.ln2_g, true);
        f(prefix + ".ln2_b", b.ln2_b, true);
        f(prefix + ".fc1_w", b.fc1_w, true);
        f(prefix + ".fc1_b", b.fc1_b, true);
        f(prefix + ".fc2_w", b.fc2_w, true);
        f(prefix + ".fc2_b", b.fc2_b, true);
    };
    for (std::size_t i = 0; i < p.enc.size(); ++i) visit_block("enc." + std::to_string(i), p.enc[i]);
    f("enc_norm_g", p.enc_norm_g, true);
    f("enc_norm_b", p.enc_norm_b, true);
    f("dec_in_w", p.dec_in_w, true);
    f("dec_in_b", p.dec_in_b, true);
    for (std::size_t i = 0; i < p.dec.size(); ++i) visit_block("dec." + std::to_string(i), p.dec[i]);
    f("dec_norm_g", p.dec_norm_g, true);
    f("dec_norm_b", p.dec_norm_b, true);
    f("recon_w", p.recon_w, true);
    f("recon_b", p.recon_b, true);
    if (!p.head_w.empty()) {
        f("head_w", p.head_w, true);
        f("head_b", p.head_b, true);
    }
}

// Sinusoidal table: row t interleaves sin(t/10000^(2i/D)) and cos(...) over i.
template <class Real>
Tensor<Real> sinusoidal_pos(int n_positions, int dim) {
    if (dim % 2 != 0) fail("OddDimension", "positional embedding needs even dim");
    if (n_positions < 1) fail("InvalidArgument", "need at least one position");
    Tensor<Real> table({n_positions, dim});
    for (int t = 0; t < n_positions; ++t) {
        Real* row = table.data() + static_cast<std::int64_t>(t) * dim;
        for (int i = 0; i < dim / 2; ++i) {
            const double freq = std::pow(10000.0, 2.0 * i / dim);
            row[2 * i] = static_cast<Real>(std::sin(t / freq));
            row[2 * i + 1] = static_cast<Real>(std::cos(t / freq));
        }
    }
    return table;
}

namespace detail {

template <class Real>
void make_block(BlockParams<Real>& b, int dim, int hidden) {
    b.ln1_g.reshape({dim});
    b.ln1_b.reshape({dim});
    b.qkv_w.reshape({dim, 3 * dim});
    b.qkv_b.reshape({3 * dim});
    b.attn_out_w.reshape({dim, dim});
    b.attn_out_b.reshape({dim});
    b.ln2_g.reshape({dim});
    b.ln2_b.reshape({dim});
    b.fc1_w.reshape({dim, hidden});
    b.fc1_b.reshape({hidden});
    b.fc2_w.reshape({hidden, dim});
    b.fc2_b.reshape({dim});
}

}  // namespace detail

template <class Real>
ModelParams<Real> make_params(const ModelConfig& c) {
    c.validate();
    ModelParams<Real> p;
    p.proj_w.reshape({c.patch_size, c.embed_dim});
    p.proj_b.reshape({c.embed_dim});
    p.pos_embed = sinusoidal_pos<Real>(c.max_patches_per_lead + 2, c.embed_dim);
    p.lead_embed.reshape({c.max_leads, c.embed_dim});
    p.sep_embed.reshape({c.embed_dim});
    p.mask_embed.reshape({c.embed_dim});
    p.enc.resize(c.encoder_depth);
    for (auto& b : p.enc) detail::make_block(b, c.embed_dim, c.mlp_ratio * c.embed_dim);
    p.enc_norm_g.reshape({c.embed_dim});
    p.enc_norm_b.reshape({c.embed_dim});
    p.dec_in_w.reshape({c.embed_dim, c.decoder_dim});
    p.dec_in_b.reshape({c.decoder_dim});
    p.dec.resize(c.decoder_depth);
    for (auto& b : p.dec) detail::make_block(b, c.decoder_dim, c.mlp_ratio * c.decoder_dim);
    p.dec_norm_g.reshape({c.decoder_dim});
    p.dec_norm_b.reshape({c.decoder_dim});
    p.recon_w.reshape({c.decoder_dim, c.patch_size});
    p.recon_b.reshape({c.patch_size});
    if (c.num_classes >= 2) {
        p.head_w.reshape({c.embed_dim, c.num_classes});
        p.head_b.reshape({c.num_classes});
    }
    return p;
}

template <class Real>
ModelParams<Real> init_params(const ModelConfig& c, std::uint64_t seed) {
    ModelParams<Real> p = make_params<Real>(c);
    Rng rng(seed);
    visit_params(p, [&](const std::string& name, Tensor<Real>& t, bool trainable) {
        if (!trainable) return;  // position table stays sinusoidal
        const bool gain = name.compare(name.size() - 2, 2, "_g") == 0;
        const bool bias = name.compare(name.size() - 2, 2, "_b") == 0;
        if (gain) {
            std::fill(t.v.begin(), t.v.end(), Real(1));
        } else if (bias) {
            std::fill(t.v.begin(), t.v.end(), Real(0));
        } else {
            for (Real& x : t.v) x = static_cast<Real>(rng.normal(0.0, 0.02));
        }
    });
    return p;
}

template <class Real>
ModelParams<Real> zeros_like(const ModelParams<Real>& src) {
    ModelParams<Real> out = src;
    visit_params(out, [](const std::string&, Tensor<Real>& t, bool) {
        std::fill(t.v.begin(), t.v.end(), Real(0));
    });
    return out;
}

template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& src) {
    ModelParams<To> out;
    out.enc.resize(src.enc.size());
    out.dec.resize(src.dec.size());
    if (!src.head_w.empty()) {
        out.head_w.reshape(src.head_w.shape);
        out.head_b.reshape(src.head_b.shape);
    }
    std::vector<const Tensor<From>*> sources;
    visit_params(src, [&](const std::string&, const Tensor<From>& t, bool) { sources.push_back(&t); });
    std::size_t i = 0;
    visit_params(out, [&](const std::string&, Tensor<To>& t, bool) {
        t.reshape(sources[i]->shape);
        for (std::int64_t j = 0; j < sources[i]->size(); ++j) {
            t.v[j] = static_cast<To>(sources[i]->v[j]);
        }
        ++i;
    });
    return out;
}

// ---------------------------------------------------------------------------
// tokens
// ---------------------------------------------------------------------------

constexpr int kSepStart = -1;
constexpr int kSepEnd = -2;

struct TokenTag {
    int lead = 0;      // position in the record's lead list
    int row = 0;       // lead-embedding row
    int tpos = 0;      // temporal index, or kSepStart / kSepEnd
    bool visible = true;
};

template <class Real>
struct TokenBatch {
    int dim = 0;
    int n = 0;          // patches per lead
    int num_leads = 0;  // leads present in the record
    std::vector<Real> tokens;  // S x dim, lead-major
    std::vector<TokenTag> tags;
    std::vector<int> origin;   // indices into the pre-gather batch (empty = full)

    int seq_len() const { return static_cast<int>(tags.size()); }
    Real* token(int i) { return tokens.data() + static_cast<std::int64_t>(i) * dim; }
    const Real* token(int i) const { return tokens.data() + static_cast<std::int64_t>(i) * dim; }
};

namespace detail {

constexpr double kLnEps = 1e-5;

template <class Real>
void add_vec(Real* dst, const Real* src, std::int64_t n) {
    for (std::int64_t i = 0; i < n; ++i) dst[i] += src[i];
}

template <class Real>
void col_sums_add(Real* dst, const Real* x, int rows, int cols) {
    for (int j = 0; j < cols; ++j) {
        Real acc = Real(0);
        for (int i = 0; i < rows; ++i) acc += x[static_cast<std::int64_t>(i) * cols + j];
        dst[j] += acc;
    }
}

// patch token matrix: (L*n) x p cast of the grid, lead-major
template <class Real>
std::vector<Real> patch_matrix(const PatchGrid& grid) {
    std::vector<Real> out(grid.patches.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<Real>(grid.patches[i]);
    return out;
}

}  // namespace detail

// embed with optional mask visibility and an optional export of the cast patch
// matrix (used by the training path's backward)
template <class Real>
TokenBatch<Real> embed_tokens(const PatchGrid& grid, const ModelParams<Real>& params,
                              const ModelConfig& config, const MaskPlan* plan = nullptr,
                              std::vector<Real>* patch_matrix_out = nullptr) {
    grid.validate();
    if (grid.mode != PatchMode::SpatioTemporal) {
        fail("WrongMode", "token embedding requires a spatio-temporal grid");
    }
    if (grid.patch_size != config.patch_size) {
        fail("ShapeMismatch", "grid patch size " + std::to_string(grid.patch_size) +
                                  " != model patch size " + std::to_string(config.patch_size));
    }
    const int n = grid.patches_per_lead;
    if (n > config.max_patches_per_lead) {
        fail("PositionalCapacity", "n=" + std::to_string(n) + " exceeds capacity " +
                                       std::to_string(config.max_patches_per_lead));
    }
    const int L = grid.num_leads;
    const int D = config.embed_dim;
    std::vector<int> rows(L);
    for (int l = 0; l < L; ++l) rows[l] = config.lead_row(grid.leads[l]);

    if (plan != nullptr) {
        for (const auto& [pl, pt] : plan->masked) {
            if (pl < 0 || pl >= L || pt < 0 || pt >= n) {
                fail("PlanMismatch", "mask index outside grid");
            }
        }
    }

    std::vector<Real> pm = detail::patch_matrix<Real>(grid);
    std::vector<Real> projected(static_cast<std::size_t>(L) * n * D);
    matmul(projected.data(), pm.data(), params.proj_w.data(), L * n, config.patch_size, D);
    add_bias(projected.data(), params.proj_b.data(), L * n, D);
    if (patch_matrix_out != nullptr) *patch_matrix_out = std::move(pm);

    TokenBatch<Real> batch;
    batch.dim = D;
    batch.n = n;
    batch.num_leads = L;
    const int per_lead = config.tokens_per_lead(n);
    batch.tokens.assign(static_cast<std::size_t>(L) * per_lead * D, Real(0));
    batch.tags.resize(static_cast<std::size_t>(L) * per_lead);

    const Real* pos = params.pos_embed.data();
    for (int l = 0; l < L; ++l) {
        const Real* lead_vec =
            params.lead_embed.data() + static_cast<std::int64_t>(rows[l]) * D;
        int s = l * per_lead;
        auto put = [&](int tpos, const Real* base, int pos_row, bool visible) {
            Real* dst = batch.token(s);
            for (int d = 0; d < D; ++d) {
                dst[d] = base[d] + pos[static_cast<std::int64_t>(pos_row) * D + d];
                if (config.use_lead_embedding) dst[d] += lead_vec[d];
            }
            batch.tags[s] = TokenTag{l, rows[l], tpos, visible};
            ++s;
        };
        if (config.use_sep) put(kSepStart, params.sep_embed.data(), n, true);
        for (int t = 0; t < n; ++t) {
            const bool masked = plan != nullptr && plan->is_masked(l, t);
            put(t, projected.data() + (static_cast<std::int64_t>(l) * n + t) * D, t, !masked);
        }
        if (config.use_sep) put(kSepEnd, params.sep_embed.data(), n + 1, true);
    }
    return batch;
}

template <class Real>
TokenBatch<Real> gather_visible(const TokenBatch<Real>& batch) {
    TokenBatch<Real> out;
    out.dim = batch.dim;
    out.n = batch.n;
    out.num_leads = batch.num_leads;
    for (int i = 0; i < batch.seq_len(); ++i) {
        if (!batch.tags[i].visible) continue;
        out.origin.push_back(i);
        out.tags.push_back(batch.tags[i]);
        out.tokens.insert(out.tokens.end(), batch.token(i), batch.token(i) + batch.dim);
    }
    return out;
}

// ---------------------------------------------------------------------------
// transformer stack (shared by encoder and decoder)
// ---------------------------------------------------------------------------

enum class AttnScope { Global, PerLead };

template <class Real>
struct BlockCache {
    std::vector<Real> x_in, ln1_out, ln1_mean, ln1_rstd;
    std::vector<Real> qkv;     // S x 3D
    std::vector<Real> probs;   // heads x S x S
    std::vector<Real> ctx;     // S x D
    std::vector<Real> x_mid, ln2_out, ln2_mean, ln2_rstd;
    std::vector<Real> fc1_out, gelu_out;  // S x H
};

template <class Real>
struct StackCache {
    std::vector<BlockCache<Real>> blocks;
    std::vector<Real> final_in, final_mean, final_rstd;
};

namespace detail {

template <class Real>
void block_forward(std::vector<Real>& x, const BlockParams<Real>& bp, int dim, int heads,
                   int hidden, int S, const int* lead_of, BlockCache<Real>& c) {
    const int D = dim;
    const int dh = D / heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));

    c.x_in = x;
    c.ln1_out.resize(x.size());
    c.ln1_mean.resize(S);
    c.ln1_rstd.resize(S);
    layernorm_fwd(c.ln1_out.data(), c.ln1_mean.data(), c.ln1_rstd.data(), c.x_in.data(),
                  bp.ln1_g.data(), bp.ln1_b.data(), S, D, Real(kLnEps));

    c.qkv.resize(static_cast<std::size_t>(S) * 3 * D);
    matmul(c.qkv.data(), c.ln1_out.data(), bp.qkv_w.data(), S, D, 3 * D);
    add_bias(c.qkv.data(), bp.qkv_b.data(), S, 3 * D);

    c.probs.assign(static_cast<std::size_t>(heads) * S * S, Real(0));
    c.ctx.assign(static_cast<std::size_t>(S) * D, Real(0));
    std::vector<Real> qh(static_cast<std::size_t>(S) * dh), kh(qh.size()), vh(qh.size());
    std::vector<Real> ctxh(qh.size());
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < S; ++i) {
            const Real* src = c.qkv.data() + static_cast<std::int64_t>(i) * 3 * D;
            std::copy(src + h * dh, src + h * dh + dh, qh.begin() + static_cast<std::int64_t>(i) * dh);
            std::copy(src + D + h * dh, src + D + h * dh + dh,
                      kh.begin() + static_cast<std::int64_t>(i) * dh);
            std::copy(src + 2 * D + h * dh, src + 2 * D + h * dh + dh,
                      vh.begin() + static_cast<std::int64_t>(i) * dh);
        }
        Real* probs = c.probs.data() + static_cast<std::int64_t>(h) * S * S;
        matmul_nt(probs, qh.data(), kh.data(), S, dh, S);
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(S) * S; ++i) probs[i] *= scale;
        if (lead_of != nullptr) {
            for (int i = 0; i < S; ++i) {
                for (int j = 0; j < S; ++j) {
                    if (lead_of[i] != lead_of[j]) probs[static_cast<std::int64_t>(i) * S + j] = Real(-1e30);
                }
            }
        }
        softmax_rows(probs, S, S);
        matmul(ctxh.data(), probs, vh.data(), S, S, dh);
        for (int i = 0; i < S; ++i) {
            std::copy(ctxh.begin() + static_cast<std::int64_t>(i) * dh,
                      ctxh.begin() + static_cast<std::int64_t>(i) * dh + dh,
                      c.ctx.begin() + static_cast<std::int64_t>(i) * D + h * dh);
        }
    }

    c.x_mid.resize(x.size());
    matmul(c.x_mid.data(), c.ctx.data(), bp.attn_out_w.data(), S, D, D);
    add_bias(c.x_mid.data(), bp.attn_out_b.data(), S, D);
    detail::add_vec(c.x_mid.data(), c.x_in.data(), static_cast<std::int64_t>(S) * D);

    c.ln2_out.resize(x.size());
    c.ln2_mean.resize(S);
    c.ln2_rstd.resize(S);
    layernorm_fwd(c.ln2_out.data(), c.ln2_mean.data(), c.ln2_rstd.data(), c.x_mid.data(),
                  bp.ln2_g.data(), bp.ln2_b.data(), S, D, Real(kLnEps));

    c.fc1_out.resize(static_cast<std::size_t>(S) * hidden);
    matmul(c.fc1_out.data(), c.ln2_out.data(), bp.fc1_w.data(), S, D, hidden);
    add_bias(c.fc1_out.data(), bp.fc1_b.data(), S, hidden);
    c.gelu_out.resize(c.fc1_out.size());
    gelu_fwd(c.gelu_out.data(), c.fc1_out.data(), static_cast<std::int64_t>(c.fc1_out.size()));

    matmul(x.data(), c.gelu_out.data(), bp.fc2_w.data(), S, hidden, D);
    add_bias(x.data(), bp.fc2_b.data(), S, D);
    detail::add_vec(x.data(), c.x_mid.data(), static_cast<std::int64_t>(S) * D);
}

template <class Real>
void block_backward(std::vector<Real>& dx, const BlockParams<Real>& bp, BlockParams<Real>& gb,
                    int dim, int heads, int hidden, int S, const BlockCache<Real>& c) {
    const int D = dim;
    const int dh = D / heads;
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const std::int64_t SD = static_cast<std::int64_t>(S) * D;

    // y = x_mid + fc2(gelu(fc1(ln2(x_mid))))
    std::vector<Real> d_gelu(static_cast<std::size_t>(S) * hidden);
    matmul_nt(d_gelu.data(), dx.data(), bp.fc2_w.data(), S, D, hidden);
    {
        std::vector<Real> scratch(static_cast<std::size_t>(hidden) * D);
        matmul_tn(scratch.data(), c.gelu_out.data(), dx.data(), S, hidden, D);
        detail::add_vec(gb.fc2_w.data(), scratch.data(), gb.fc2_w.size());
        detail::col_sums_add(gb.fc2_b.data(), dx.data(), S, D);
    }
    std::vector<Real> d_fc1(d_gelu.size());
    gelu_bwd(d_fc1.data(), d_gelu.data(), c.fc1_out.data(),
             static_cast<std::int64_t>(d_fc1.size()));
    {
        std::vector<Real> scratch(static_cast<std::size_t>(D) * hidden);
        matmul_tn(scratch.data(), c.ln2_out.data(), d_fc1.data(), S, D, hidden);
        detail::add_vec(gb.fc1_w.data(), scratch.data(), gb.fc1_w.size());
        detail::col_sums_add(gb.fc1_b.data(), d_fc1.data(), S, hidden);
    }
    std::vector<Real> d_ln2(SD);
    matmul_nt(d_ln2.data(), d_fc1.data(), bp.fc1_w.data(), S, hidden, D);
    std::vector<Real> d_xmid(SD);
    layernorm_bwd(d_xmid.data(), gb.ln2_g.data(), gb.ln2_b.data(), d_ln2.data(), c.x_mid.data(),
                  c.ln2_mean.data(), c.ln2_rstd.data(), bp.ln2_g.data(), S, D);
    detail::add_vec(d_xmid.data(), dx.data(), SD);  // residual

    // x_mid = x_in + attn_out(ctx)
    std::vector<Real> d_ctx(SD);
    matmul_nt(d_ctx.data(), d_xmid.data(), bp.attn_out_w.data(), S, D, D);
    {
        std::vector<Real> scratch(static_cast<std::size_t>(D) * D);
        matmul_tn(scratch.data(), c.ctx.data(), d_xmid.data(), S, D, D);
        detail::add_vec(gb.attn_out_w.data(), scratch.data(), gb.attn_out_w.size());
        detail::col_sums_add(gb.attn_out_b.data(), d_xmid.data(), S, D);
    }

    std::vector<Real> d_qkv(static_cast<std::size_t>(S) * 3 * D, Real(0));
    std::vector<Real> qh(static_cast<std::size_t>(S) * dh), kh(qh.size()), vh(qh.size());
    std::vector<Real> d_ctxh(qh.size()), d_probs(static_cast<std::size_t>(S) * S);
    std::vector<Real> d_scores(d_probs.size()), d_qh(qh.size()), d_kh(qh.size()), d_vh(qh.size());
    for (int h = 0; h < heads; ++h) {
        for (int i = 0; i < S; ++i) {
            const Real* src = c.qkv.data() + static_cast<std::int64_t>(i) * 3 * D;
            std::copy(src + h * dh, src + h * dh + dh, qh.begin() + static_cast<std::int64_t>(i) * dh);
            std::copy(src + D + h * dh, src + D + h * dh + dh,
                      kh.begin() + static_cast<std::int64_t>(i) * dh);
            std::copy(src + 2 * D + h * dh, src + 2 * D + h * dh + dh,
                      vh.begin() + static_cast<std::int64_t>(i) * dh);
            std::copy(d_ctx.begin() + static_cast<std::int64_t>(i) * D + h * dh,
                      d_ctx.begin() + static_cast<std::int64_t>(i) * D + h * dh + dh,
                      d_ctxh.begin() + static_cast<std::int64_t>(i) * dh);
        }
        const Real* probs = c.probs.data() + static_cast<std::int64_t>(h) * S * S;
        matmul_nt(d_probs.data(), d_ctxh.data(), vh.data(), S, dh, S);
        matmul_tn(d_vh.data(), probs, d_ctxh.data(), S, S, dh);
        for (int i = 0; i < S; ++i) {
            const Real* pi = probs + static_cast<std::int64_t>(i) * S;
            const Real* dpi = d_probs.data() + static_cast<std::int64_t>(i) * S;
            Real dot = Real(0);
            for (int j = 0; j < S; ++j) dot += pi[j] * dpi[j];
            Real* dsi = d_scores.data() + static_cast<std::int64_t>(i) * S;
            for (int j = 0; j < S; ++j) dsi[j] = pi[j] * (dpi[j] - dot) * scale;
        }
        matmul(d_qh.data(), d_scores.data(), kh.data(), S, S, dh);
        matmul_tn(d_kh.data(), d_scores.data(), qh.data(), S, S, dh);
        for (int i = 0; i < S; ++i) {
            Real* dst = d_qkv.data() + static_cast<std::int64_t>(i) * 3 * D;
            detail::add_vec(dst + h * dh, d_qh.data() + static_cast<std::int64_t>(i) * dh, dh);
            detail::add_vec(dst + D + h * dh, d_kh.data() + static_cast<std::int64_t>(i) * dh, dh);
            detail::add_vec(dst + 2 * D + h * dh, d_vh.data() + static_cast<std::int64_t>(i) * dh, dh);
        }
    }

    {
        std::vector<Real> scratch(static_cast<std::size_t>(D) * 3 * D);
        matmul_tn(scratch.data(), c.ln1_out.data(), d_qkv.data(), S, D, 3 * D);
        detail::add_vec(gb.qkv_w.data(), scratch.data(), gb.qkv_w.size());
        detail::col_sums_add(gb.qkv_b.data(), d_qkv.data(), S, 3 * D);
    }
    std::vector<Real> d_ln1(SD);
    matmul_nt(d_ln1.data(), d_qkv.data(), bp.qkv_w.data(), S, 3 * D, D);
    std::vector<Real> d_xin(SD);
    layernorm_bwd(d_xin.data(), gb.ln1_g.data(), gb.ln1_b.data(), d_ln1.data(), c.x_in.data(),
                  c.ln1_mean.data(), c.ln1_rstd.data(), bp.ln1_g.data(), S, D);
    detail::add_vec(d_xin.data(), d_xmid.data(), SD);
    dx = std::move(d_xin);
}

template <class Real>
void stack_forward(std::vector<Real>& x, const std::vector<BlockParams<Real>>& blocks,
                   const Tensor<Real>& norm_g, const Tensor<Real>& norm_b, int dim, int heads,
                   int hidden, int S, const int* lead_of, StackCache<Real>& cache) {
    cache.blocks.resize(blocks.size());
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        block_forward(x, blocks[i], dim, heads, hidden, S, lead_of, cache.blocks[i]);
    }
    cache.final_in = x;
    cache.final_mean.resize(S);
    cache.final_rstd.resize(S);
    layernorm_fwd(x.data(), cache.final_mean.data(), cache.final_rstd.data(),
                  cache.final_in.data(), norm_g.data(), norm_b.data(), S, dim, Real(kLnEps));
}

template <class Real>
void stack_backward(std::vector<Real>& dx, const std::vector<BlockParams<Real>>& blocks,
                    std::vector<BlockParams<Real>>& gblocks, const Tensor<Real>& norm_g,
                    Tensor<Real>& gnorm_g, Tensor<Real>& gnorm_b, int dim, int heads, int hidden,
                    int S, const StackCache<Real>& cache) {
    std::vector<Real> d_in(dx.size());
    layernorm_bwd(d_in.data(), gnorm_g.data(), gnorm_b.data(), dx.data(), cache.final_in.data(),
                  cache.final_mean.data(), cache.final_rstd.data(), norm_g.data(), S, dim);
    dx = std::move(d_in);
    for (std::size_t i = blocks.size(); i-- > 0;) {
        block_backward(dx, blocks[i], gblocks[i], dim, heads, hidden, S, cache.blocks[i]);
    }
}

}  // namespace detail

// full bidirectional self-attention over the given tokens; PerLead restricts
// attention to same-lead pairs (the control used to demonstrate cross-lead
// information flow)
template <class Real>
TokenBatch<Real> encode(const TokenBatch<Real>& batch, const ModelParams<Real>& params,
                        const ModelConfig& config, AttnScope scope = AttnScope::Global,
                        StackCache<Real>* cache_out = nullptr) {
    if (batch.seq_len() < 1) fail("EmptyVisibleSet", "encoder needs at least one token");
    const int S = batch.seq_len();
    std::vector<int> lead_of;
    const int* lead_ptr = nullptr;
    if (scope == AttnScope::PerLead) {
        lead_of.resize(S);
        for (int i = 0; i < S; ++i) lead_of[i] = batch.tags[i].lead;
        lead_ptr = lead_of.data();
    }
    TokenBatch<Real> out = batch;
    StackCache<Real> local;
    StackCache<Real>& cache = cache_out != nullptr ? *cache_out : local;
    detail::stack_forward(out.tokens, params.enc, params.enc_norm_g, params.enc_norm_b,
                          config.embed_dim, config.encoder_heads,
                          config.mlp_ratio * config.embed_dim, S, lead_ptr, cache);
    return out;
}

// ---------------------------------------------------------------------------
// lead-wise shared decoder
// ---------------------------------------------------------------------------

template <class Real>
struct Reconstruction {
    std::vector<std::pair<int, int>> indices;  // (lead, t), plan order
    std::vector<Real> values;                  // count x p
    int patch_size = 0;

    const Real* patch(std::size_t i) const {
        return values.data() + i * static_cast<std::size_t>(patch_size);
    }
};

namespace detail {

// per-lead decoder activations kept for the backward pass
template <class Real>
struct DecodeCache {
    std::vector<std::vector<Real>> dec_in;   // per lead: seq x D assembly
    std::vector<std::vector<Real>> dec_out;  // per lead: seq x dd (post final norm)
    std::vector<StackCache<Real>> stack;     // per lead
    std::vector<std::vector<int>> slot_src;  // per lead: visible-token index or -1 (mask slot)
    int seq = 0;
};

// Assemble and run the shared decoder for every lead independently. `encoded`
// must hold the visible tokens (tags identify lead/tpos).
template <class Real>
Reconstruction<Real> decode_leadwise_impl(const TokenBatch<Real>& encoded, const MaskPlan& plan,
                                          const ModelParams<Real>& params,
                                          const ModelConfig& config, DecodeCache<Real>* cache) {
    const int D = config.embed_dim;
    const int dd = config.decoder_dim;
    const int n = encoded.n;
    const int L = encoded.num_leads;
    const int seq = config.tokens_per_lead(n);

    // visible-token lookup: (lead, tpos) -> row in encoded
    std::vector<int> lookup(static_cast<std::size_t>(L) * (n + 2), -1);
    auto slot_key = [n](int lead, int tpos) {
        const int t = tpos == kSepStart ? n : (tpos == kSepEnd ? n + 1 : tpos);
        return static_cast<std::size_t>(lead) * (n + 2) + t;
    };
    for (int i = 0; i < encoded.seq_len(); ++i) {
        const TokenTag& tag = encoded.tags[i];
        lookup[slot_key(tag.lead, tag.tpos)] = i;
    }
    for (const auto& [pl, pt] : plan.masked) {
        if (pl < 0 || pl >= L || pt < 0 || pt >= n) fail("PlanMismatch", "mask index outside grid");
        if (lookup[slot_key(pl, pt)] != -1) {
            fail("PlanMismatch", "masked position present among encoded tokens");
        }
    }

    std::vector<int> lead_rows(L, -1);
    for (int i = 0; i < encoded.seq_len(); ++i) lead_rows[encoded.tags[i].lead] = encoded.tags[i].row;

    Reconstruction<Real> rec;
    rec.indices = plan.masked;
    rec.patch_size = config.patch_size;
    rec.values.assign(plan.masked.size() * static_cast<std::size_t>(config.patch_size), Real(0));

    if (cache != nullptr) {
        cache->dec_in.resize(L);
        cache->dec_out.resize(L);
        cache->stack.resize(L);
        cache->slot_src.resize(L);
        cache->seq = seq;
    }

    const Real* pos = params.pos_embed.data();
    for (int l = 0; l < L; ++l) {
        std::vector<Real> dec_in(static_cast<std::size_t>(seq) * D, Real(0));
        std::vector<int> slot_src(seq, -1);
        int s = 0;
        auto fill_slot = [&](int tpos, int pos_row) {
            Real* dst = dec_in.data() + static_cast<std::int64_t>(s) * D;
            const int src = lookup[slot_key(l, tpos)];
            slot_src[s] = src;
            if (src >= 0) {
                std::copy(encoded.token(src), encoded.token(src) + D, dst);
            } else {
                // mask slot: shared mask embedding localized by position + lead
                const Real* lead_vec =
                    params.lead_embed.data() + static_cast<std::int64_t>(lead_rows[l]) * D;
                for (int d = 0; d < D; ++d) {
                    dst[d] = params.mask_embed.v[d] + pos[static_cast<std::int64_t>(pos_row) * D + d];
                    if (config.use_lead_embedding) dst[d] += lead_vec[d];
                }
            }
            ++s;
        };
        if (config.use_sep) fill_slot(kSepStart, n);
        for (int t = 0; t < n; ++t) fill_slot(t, t);
        if (config.use_sep) fill_slot(kSepEnd, n + 1);

        std::vector<Real> u(static_cast<std::size_t>(seq) * dd);
        matmul(u.data(), dec_in.data(), params.dec_in_w.data(), seq, D, dd);
        add_bias(u.data(), params.dec_in_b.data(), seq, dd);

        StackCache<Real> local;
        StackCache<Real>& sc = cache != nullptr ? cache->stack[l] : local;
        detail::stack_forward(u, params.dec, params.dec_norm_g, params.dec_norm_b, dd,
                              config.decoder_heads, config.mlp_ratio * dd, seq, nullptr, sc);

        const int patch_offset = config.use_sep ? 1 : 0;
        for (std::size_t m = 0; m < plan.masked.size(); ++m) {
            if (plan.masked[m].first != l) continue;
            const int t = plan.masked[m].second;
            const Real* h = u.data() + static_cast<std::int64_t>(patch_offset + t) * dd;
            Real* out = rec.values.data() + m * static_cast<std::size_t>(config.patch_size);
            detail::matmul_row(out, h, params.recon_w.data(), dd, config.patch_size);
            detail::add_vec(out, params.recon_b.data(), config.patch_size);
        }

        if (cache != nullptr) {
            cache->dec_in[l] = std::move(dec_in);
            cache->dec_out[l] = std::move(u);
            cache->slot_src[l] = std::move(slot_src);
        }
    }
    return rec;
}

}  // namespace detail

template <class Real>
Reconstruction<Real> decode_leadwise(const TokenBatch<Real>& encoded, const MaskPlan& plan,
                                     const ModelParams<Real>& params, const ModelConfig& config) {
    return detail::decode_leadwise_impl<Real>(encoded, plan, params, config, nullptr);
}

// mean over masked patches of per-patch mean squared error against the raw
// target patch values; the sum runs over the masked set only
template <class Real>
Real ssl_loss(const Reconstruction<Real>& rec, const PatchGrid& targets, const MaskPlan& plan) {
    if (plan.masked.empty()) fail("EmptyMaskSet", "loss needs at least one masked patch");
    if (rec.indices != plan.masked) fail("PlanMismatch", "reconstruction order != plan order");
    const int p = rec.patch_size;
    Real acc = Real(0);
    for (std::size_t m = 0; m < rec.indices.size(); ++m) {
        const auto& [l, t] = rec.indices[m];
        const double* target = targets.st_patch(l, t);
        const Real* r = rec.patch(m);
        for (int j = 0; j < p; ++j) {
            const Real d = r[j] - static_cast<Real>(target[j]);
            acc += d * d;
        }
    }
    return acc / (static_cast<Real>(rec.indices.size()) * static_cast<Real>(p));
}

template <class Real>
struct SslOutput {
    Real loss = Real(0);
    Reconstruction<Real> recon;
};

template <class Real>
SslOutput<Real> forward_ssl(const PatchGrid& grid, const MaskPlan& plan,
                            const ModelParams<Real>& params, const ModelConfig& config) {
    if (plan.masked.empty()) fail("EmptyMaskSet", "pretraining forward needs a non-empty mask");
    TokenBatch<Real> batch = embed_tokens(grid, params, config, &plan);
    TokenBatch<Real> visible = gather_visible(batch);
    TokenBatch<Real> encoded = encode(visible, params, config);
    SslOutput<Real> out;
    out.recon = decode_leadwise(encoded, plan, params, config);
    out.loss = ssl_loss(out.recon, grid, plan);
    return out;
}

namespace detail {

// gradients of the token assembly: projection, lead/sep embeddings
template <class Real>
void embed_backward(const std::vector<Real>& d_tokens, const TokenBatch<Real>& batch,
                    const std::vector<Real>& patch_matrix, const ModelConfig& config,
                    ModelParams<Real>& grads) {
    const int D = config.embed_dim;
    const int n = batch.n;
    const int L = batch.num_leads;

    std::vector<Real> d_proj(static_cast<std::size_t>(L) * n * D, Real(0));
    for (int i = 0; i < batch.seq_len(); ++i) {
        const TokenTag& tag = batch.tags[i];
        const Real* d = d_tokens.data() + static_cast<std::int64_t>(i) * D;
        if (tag.tpos >= 0) {
            std::copy(d, d + D,
                      d_proj.begin() + (static_cast<std::int64_t>(tag.lead) * n + tag.tpos) * D);
        } else {
            detail::add_vec(grads.sep_embed.data(), d, D);
        }
        if (config.use_lead_embedding) {
            detail::add_vec(grads.lead_embed.data() + static_cast<std::int64_t>(tag.row) * D, d, D);
        }
    }
    std::vector<Real> scratch(static_cast<std::size_t>(config.patch_size) * D);
    matmul_tn(scratch.data(), patch_matrix.data(), d_proj.data(), L * n, config.patch_size, D);
    detail::add_vec(grads.proj_w.data(), scratch.data(), grads.proj_w.size());
    detail::col_sums_add(grads.proj_b.data(), d_proj.data(), L * n, D);
}

}  // namespace detail

// Forward + backward for the self-supervised objective; accumulates
// scale * dL/dtheta into `grads`.
template <class Real>
SslOutput<Real> ssl_step(const PatchGrid& grid, const MaskPlan& plan,
                         const ModelParams<Real>& params, const ModelConfig& config,
                         ModelParams<Real>& grads, Real scale) {
    if (plan.masked.empty()) fail("EmptyMaskSet", "pretraining step needs a non-empty mask");
    const int D = config.embed_dim;
    const int dd = config.decoder_dim;
    const int p = config.patch_size;

    std::vector<Real> pm;
    TokenBatch<Real> batch = embed_tokens(grid, params, config, &plan, &pm);
    TokenBatch<Real> visible = gather_visible(batch);

    StackCache<Real> enc_cache;
    TokenBatch<Real> encoded = encode(visible, params, config, AttnScope::Global, &enc_cache);

    detail::DecodeCache<Real> dec_cache;
    SslOutput<Real> out;
    out.recon = detail::decode_leadwise_impl<Real>(encoded, plan, params, config, &dec_cache);
    out.loss = ssl_loss(out.recon, grid, plan);

    // d loss / d reconstruction
    const Real denom = static_cast<Real>(out.recon.indices.size()) * static_cast<Real>(p);
    std::vector<Real> d_rec(out.recon.values.size());
    for (std::size_t m = 0; m < out.recon.indices.size(); ++m) {
        const auto& [l, t] = out.recon.indices[m];
        const double* target = grid.st_patch(l, t);
        for (int j = 0; j < p; ++j) {
            const std::size_t idx = m * static_cast<std::size_t>(p) + j;
            d_rec[idx] = scale * Real(2) * (out.recon.values[idx] - static_cast<Real>(target[j])) / denom;
        }
    }

    const int V = encoded.seq_len();
    std::vector<Real> d_encoded(static_cast<std::size_t>(V) * D, Real(0));
    const int seq = dec_cache.seq;
    const int patch_offset = config.use_sep ? 1 : 0;

    std::vector<int> lead_rows(batch.num_leads, -1);
    for (const TokenTag& tag : visible.tags) lead_rows[tag.lead] = tag.row;

    for (int l = 0; l < batch.num_leads; ++l) {
        // reconstruction head backward into the decoder output rows
        std::vector<Real> d_u(static_cast<std::size_t>(seq) * dd, Real(0));
        bool lead_has_mask = false;
        for (std::size_t m = 0; m < out.recon.indices.size(); ++m) {
            if (out.recon.indices[m].first != l) continue;
            lead_has_mask = true;
            const int t = out.recon.indices[m].second;
            const Real* dr = d_rec.data() + m * static_cast<std::size_t>(p);
            const Real* h = dec_cache.dec_out[l].data() +
                            static_cast<std::int64_t>(patch_offset + t) * dd;
            Real* du = d_u.data() + static_cast<std::int64_t>(patch_offset + t) * dd;
            // d_u = dr * recon_w^T ; recon grads accumulate the outer product
            for (int a = 0; a < dd; ++a) {
                Real acc = Real(0);
                const Real* wrow = params.recon_w.data() + static_cast<std::int64_t>(a) * p;
                for (int j = 0; j < p; ++j) acc += dr[j] * wrow[j];
                du[a] += acc;
            }
            for (int a = 0; a < dd; ++a) {
                Real* grow = grads.recon_w.data() + static_cast<std::int64_t>(a) * p;
                for (int j = 0; j < p; ++j) grow[j] += h[a] * dr[j];
            }
            detail::add_vec(grads.recon_b.data(), dr, p);
        }
        if (!lead_has_mask) continue;  // no loss contribution through this lead's decoder run

        detail::stack_backward(d_u, params.dec, grads.dec, params.dec_norm_g, grads.dec_norm_g,
                               grads.dec_norm_b, dd, config.decoder_heads, config.mlp_ratio * dd,
                               seq, dec_cache.stack[l]);

        // adapter backward
        std::vector<Real> d_dec_in(static_cast<std::size_t>(seq) * D);
        matmul_nt(d_dec_in.data(), d_u.data(), params.dec_in_w.data(), seq, dd, D);
        {
            std::vector<Real> scratch(static_cast<std::size_t>(D) * dd);
            matmul_tn(scratch.data(), dec_cache.dec_in[l].data(), d_u.data(), seq, D, dd);
            detail::add_vec(grads.dec_in_w.data(), scratch.data(), grads.dec_in_w.size());
            detail::col_sums_add(grads.dec_in_b.data(), d_u.data(), seq, dd);
        }

        // scatter: visible slots flow to the encoder, mask slots to embeddings
        for (int s = 0; s < seq; ++s) {
            const Real* d = d_dec_in.data() + static_cast<std::int64_t>(s) * D;
            const int src = dec_cache.slot_src[l][s];
            if (src >= 0) {
                detail::add_vec(d_encoded.data() + static_cast<std::int64_t>(src) * D, d, D);
            } else {
                detail::add_vec(grads.mask_embed.data(), d, D);
                if (config.use_lead_embedding) {
                    detail::add_vec(
                        grads.lead_embed.data() + static_cast<std::int64_t>(lead_rows[l]) * D, d, D);
                }
            }
        }
    }

    detail::stack_backward(d_encoded, params.enc, grads.enc, params.enc_norm_g, grads.enc_norm_g,
                           grads.enc_norm_b, D, config.encoder_heads, config.mlp_ratio * D, V,
                           enc_cache);

    // scatter visible-token gradients back to the full token sequence
    std::vector<Real> d_tokens(batch.tokens.size(), Real(0));
    for (int i = 0; i < V; ++i) {
        std::copy(d_encoded.begin() + static_cast<std::int64_t>(i) * D,
                  d_encoded.begin() + static_cast<std::int64_t>(i) * D + D,
                  d_tokens.begin() + static_cast<std::int64_t>(visible.origin[i]) * D);
    }
    detail::embed_backward(d_tokens, batch, pm, config, grads);
    return out;
}

// ---------------------------------------------------------------------------
// classification
// ---------------------------------------------------------------------------

template <class Real>
struct ClassifyOutput {
    std::vector<Real> logits;
    std::vector<Real> probs;
    int argmax = 0;
};

namespace detail {

template <class Real>
ClassifyOutput<Real> classify_head(const TokenBatch<Real>& encoded, const ModelParams<Real>& params,
                                   const ModelConfig& config, std::vector<Real>* pooled_out,
                                   int* n_pool_out) {
    const int D = config.embed_dim;
    const int K = config.num_classes;
    std::vector<Real> pooled(D, Real(0));
    int count = 0;
    for (int i = 0; i < encoded.seq_len(); ++i) {
        if (encoded.tags[i].tpos < 0) continue;  // SEP excluded from pooling
        detail::add_vec(pooled.data(), encoded.token(i), D);
        ++count;
    }
    for (Real& x : pooled) x /= static_cast<Real>(count);

    ClassifyOutput<Real> out;
    out.logits.resize(K);
    detail::matmul_row(out.logits.data(), pooled.data(), params.head_w.data(), D, K);
    detail::add_vec(out.logits.data(), params.head_b.data(), K);
    out.probs = out.logits;
    softmax_rows(out.probs.data(), 1, K);
    out.argmax = 0;
    for (int k = 1; k < K; ++k) {
        if (out.logits[k] > out.logits[out.argmax]) out.argmax = k;
    }
    if (pooled_out != nullptr) *pooled_out = std::move(pooled);
    if (n_pool_out != nullptr) *n_pool_out = count;
    return out;
}

}  // namespace detail

template <class Real>
ClassifyOutput<Real> forward_classify(const PatchGrid& grid, const ModelParams<Real>& params,
                                      const ModelConfig& config) {
    if (params.head_w.empty()) fail("MissingHead", "model has no classifier head");
    if (config.num_classes < 2) fail("InvalidClassCount", "classification needs K >= 2");
    TokenBatch<Real> batch = embed_tokens(grid, params, config);
    TokenBatch<Real> encoded = encode(batch, params, config);
    return detail::classify_head(encoded, params, config, nullptr, nullptr);
}

// cross-entropy scaled by 1/K; accumulates scale * dL/dtheta
template <class Real>
Real classify_step(const PatchGrid& grid, int label, const ModelParams<Real>& params,
                   const ModelConfig& config, ModelParams<Real>& grads, Real scale,
                   ClassifyOutput<Real>* output = nullptr) {
    if (params.head_w.empty()) fail("MissingHead", "model has no classifier head");
    const int K = config.num_classes;
    if (K < 2) fail("InvalidClassCount", "classification needs K >= 2");
    if (label < 0 || label >= K) {
        fail("LabelRange", "label " + std::to_string(label) + " outside [0, " + std::to_string(K) + ")");
    }
    const int D = config.embed_dim;

    std::vector<Real> pm;
    TokenBatch<Real> batch = embed_tokens(grid, params, config, nullptr, &pm);
    StackCache<Real> enc_cache;
    TokenBatch<Real> encoded = encode(batch, params, config, AttnScope::Global, &enc_cache);

    std::vector<Real> pooled;
    int n_pool = 0;
    ClassifyOutput<Real> out = detail::classify_head(encoded, params, config, &pooled, &n_pool);
    const Real loss = -std::log(std::max(out.probs[label], Real(1e-30))) / static_cast<Real>(K);

    std::vector<Real> d_logits(K);
    for (int k = 0; k < K; ++k) {
        d_logits[k] = scale * (out.probs[k] - (k == label ? Real(1) : Real(0))) / static_cast<Real>(K);
    }
    std::vector<Real> d_pooled(D, Real(0));
    for (int a = 0; a < D; ++a) {
        const Real* wrow = params.head_w.data() + static_cast<std::int64_t>(a) * K;
        Real acc = Real(0);
        for (int k = 0; k < K; ++k) acc += d_logits[k] * wrow[k];
        d_pooled[a] = acc;
        Real* grow = grads.head_w.data() + static_cast<std::int64_t>(a) * K;
        for (int k = 0; k < K; ++k) grow[k] += pooled[a] * d_logits[k];
    }
    detail::add_vec(grads.head_b.data(), d_logits.data(), K);

    const int S = encoded.seq_len();
    std::vector<Real> d_encoded(static_cast<std::size_t>(S) * D, Real(0));
    for (int i = 0; i < S; ++i) {
        if (encoded.tags[i].tpos < 0) continue;
        Real* d = d_encoded.data() + static_cast<std::int64_t>(i) * D;
        for (int a = 0; a < D; ++a) d[a] = d_pooled[a] / static_cast<Real>(n_pool);
    }
    detail::stack_backward(d_encoded, params.enc, grads.enc, params.enc_norm_g, grads.enc_norm_g,
                           grads.enc_norm_b, D, config.encoder_heads, config.mlp_ratio * D, S,
                           enc_cache);
    detail::embed_backward(d_encoded, batch, pm, config, grads);
    if (output != nullptr) *output = std::move(out);
    return loss;
}

// ---------------------------------------------------------------------------
// attention analysis
// ---------------------------------------------------------------------------

// Query row of the softmaxed attention matrix, averaged over every encoder
// layer and head; length = token count, sums to 1.
template <class Real>
std::vector<Real> attention_maps(const PatchGrid& grid, const ModelParams<Real>& params,
                                 const ModelConfig& config, int query_lead, int query_t,
                                 std::vector<TokenTag>* tags_out = nullptr) {
    TokenBatch<Real> batch = embed_tokens(grid, params, config);
    StackCache<Real> cache;
    encode(batch, params, config, AttnScope::Global, &cache);

    int query = -1;
    for (int i = 0; i < batch.seq_len(); ++i) {
        if (batch.tags[i].lead == query_lead && batch.tags[i].tpos == query_t) {
            query = i;
            break;
        }
    }
    if (query < 0) fail("QueryOutOfRange", "no token at lead " + std::to_string(query_lead) +
                                               ", t " + std::to_string(query_t));

    const int S = batch.seq_len();
    const int H = config.encoder_heads;
    std::vector<Real> avg(S, Real(0));
    for (const BlockCache<Real>& bc : cache.blocks) {
        for (int h = 0; h < H; ++h) {
            const Real* row = bc.probs.data() + (static_cast<std::int64_t>(h) * S + query) * S;
            detail::add_vec(avg.data(), row, S);
        }
    }
    const Real norm = Real(1) / static_cast<Real>(cache.blocks.size() * H);
    for (Real& x : avg) x *= norm;
    if (tags_out != nullptr) *tags_out = batch.tags;
    return avg;
}

// Per-lead representation: mean of the lead's encoded patch tokens (SEP
// excluded), computed with no masking.
template <class Real>
std::vector<std::vector<Real>> lead_representations(const PatchGrid& grid,
                                                    const ModelParams<Real>& params,
                                                    const ModelConfig& config) {
    TokenBatch<Real> batch = embed_tokens(grid, params, config);
    TokenBatch<Real> encoded = encode(batch, params, config);
    const int D = config.embed_dim;
    std::vector<std::vector<Real>> out(grid.num_leads, std::vector<Real>(D, Real(0)));
    std::vector<int> counts(grid.num_leads, 0);
    for (int i = 0; i < encoded.seq_len(); ++i) {
        const TokenTag& tag = encoded.tags[i];
        if (tag.tpos < 0) continue;
        detail::add_vec(out[tag.lead].data(), encoded.token(i), D);
        ++counts[tag.lead];
    }
    for (int l = 0; l < grid.num_leads; ++l) {
        for (Real& x : out[l]) x /= static_cast<Real>(counts[l]);
    }
    return out;
}

}  // namespace stmem
