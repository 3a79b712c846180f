#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "v2flow/image.hpp"
#include "v2flow/model_config.hpp"
#include "v2flow/nn.hpp"
#include "v2flow/ops.hpp"
#include "v2flow/resampler.hpp"
#include "v2flow/vocab.hpp"

namespace v2flow {

// ---------------------------------------------------------------------------
// patches
// ---------------------------------------------------------------------------

// Non-overlapping P x P x C blocks in row-major patch order. Reassembling in
// grid order reproduces the source image exactly.
struct PatchSet {
    int rows = 0, cols = 0, patch = 0, channels = 0;
    std::vector<float> data;  // n() x patch_dim() row-major

    int n() const { return rows * cols; }
    int patch_dim() const { return patch * patch * channels; }
};

inline PatchSet patchify(const Image& img, int patch) {
    if (patch < 1 || img.height % patch != 0 || img.width % patch != 0) {
        throw ShapeError("patchify: image dims must be divisible by the patch size");
    }
    PatchSet ps;
    ps.rows = img.height / patch;
    ps.cols = img.width / patch;
    ps.patch = patch;
    ps.channels = img.channels;
    ps.data.resize(static_cast<size_t>(ps.n()) * ps.patch_dim());
    size_t w = 0;
    for (int pr = 0; pr < ps.rows; ++pr) {
        for (int pc = 0; pc < ps.cols; ++pc) {
            for (int py = 0; py < patch; ++py) {
                for (int px = 0; px < patch; ++px) {
                    for (int c = 0; c < img.channels; ++c) {
                        ps.data[w++] = img.at(pr * patch + py, pc * patch + px, c);
                    }
                }
            }
        }
    }
    return ps;
}

inline Image unpatchify(const PatchSet& ps) {
    Image img(ps.rows * ps.patch, ps.cols * ps.patch, ps.channels);
    size_t r = 0;
    for (int pr = 0; pr < ps.rows; ++pr) {
        for (int pc = 0; pc < ps.cols; ++pc) {
            for (int py = 0; py < ps.patch; ++py) {
                for (int px = 0; px < ps.patch; ++px) {
                    for (int c = 0; c < ps.channels; ++c) {
                        img.at(pr * ps.patch + py, pc * ps.patch + px, c) = ps.data[r++];
                    }
                }
            }
        }
    }
    return img;
}

// Pixels live in [0,1]; the flow operates on [-1,1].
inline float pixel_to_flow(float v) { return 2.f * v - 1.f; }
inline float flow_to_pixel(float v) { return 0.5f * (v + 1.f); }

// ---------------------------------------------------------------------------
// masking
// ---------------------------------------------------------------------------

struct MaskState {
    std::vector<int> masked;    // ascending patch indices
    std::vector<int> revealed;  // ascending complement
    double rho = 1.0;
};

// round(rho*N) distinct indices, uniform without replacement.
inline MaskState mask_from_rho(int n, double rho, Rng& rng) {
    if (n < 1) throw ContractError("mask_from_rho: need at least one patch");
    if (rho < 0.0 || rho > 1.0) throw ContractError("mask_from_rho: ratio outside [0,1]");
    const int k = static_cast<int>(std::llround(rho * n));
    MaskState ms;
    ms.rho = rho;
    std::vector<bool> is_masked(static_cast<size_t>(n), false);
    if (k > 0) {
        for (int idx : rng.sample_without_replacement(n, k)) is_masked[static_cast<size_t>(idx)] = true;
    }
    for (int i = 0; i < n; ++i) {
        (is_masked[static_cast<size_t>(i)] ? ms.masked : ms.revealed).push_back(i);
    }
    return ms;
}

// Training-time draw: rho uniform in [0.7, 1.0].
inline MaskState sample_mask(int n, Rng& rng) { return mask_from_rho(n, rng.uniform(0.7, 1.0), rng); }

// ---------------------------------------------------------------------------
// straight-line path
// ---------------------------------------------------------------------------

// z_t = (1-t)*z + t*eps. The time-derivative of this path is eps - z, which is
// the regression target for the velocity field.
template <typename T>
void make_path(const T* z, const T* eps, double t, int dim, T* out) {
    if (t < 0.0 || t > 1.0) throw ContractError("make_path: t outside [0,1]");
    const T a = static_cast<T>(1.0 - t);
    const T b = static_cast<T>(t);
    for (int i = 0; i < dim; ++i) out[i] = a * z[i] + b * eps[i];
}

template <typename T>
std::vector<T> make_path(const std::vector<T>& z, const std::vector<T>& eps, double t) {
    if (z.size() != eps.size()) throw ShapeError("make_path: size mismatch");
    std::vector<T> out(z.size());
    make_path(z.data(), eps.data(), t, static_cast<int>(z.size()), out.data());
    return out;
}

// ---------------------------------------------------------------------------
// velocity head
// ---------------------------------------------------------------------------

// Lightweight MLP over (state embedding + time embedding + condition).
template <typename T>
struct VelocityHead {
    int patch_dim = 0, t_dim = 0, model_dim = 0, hidden = 0, n_layers = 0;
    Tensor<T> wz, wt, b_in;
    std::vector<std::pair<Tensor<T>, Tensor<T>>> layers;  // (weight, bias)

    VelocityHead() = default;

    VelocityHead(int patch, int t_embed, int d_model, int hidden_mult, int layer_count, Rng& rng)
        : patch_dim(patch), t_dim(t_embed), model_dim(d_model), hidden(d_model * hidden_mult), n_layers(layer_count) {
        if (layer_count < 2) throw ConfigError("velocity head: need at least two layers");
        wz = param_normal<T>({patch, d_model}, rng, 0.02);
        wt = param_normal<T>({t_embed, d_model}, rng, 0.02);
        b_in = param_zeros<T>({d_model});
        int in = d_model;
        for (int l = 0; l < layer_count; ++l) {
            const int out = (l == layer_count - 1) ? patch : hidden;
            layers.emplace_back(param_normal<T>({in, out}, rng, 0.05), param_zeros<T>({out}));
            in = out;
        }
    }

    // z_rows {k, patch_dim}, ts per row, cond {k, d_model} -> {k, patch_dim}.
    Tensor<T> forward(const Tensor<T>& z_rows, const std::vector<double>& ts, const Tensor<T>& cond) const {
        if (static_cast<int>(ts.size()) != z_rows.dims[0]) throw ShapeError("velocity: one t per row required");
        const Tensor<T> temb = time_embedding<T>(ts, t_dim);
        Tensor<T> h = add_rowvec(add(add(matmul(z_rows, wz), matmul(temb, wt)), cond), b_in);
        for (size_t l = 0; l < layers.size(); ++l) {
            h = linear(h, layers[l].first, layers[l].second);
            if (l + 1 < layers.size()) h = gelu(h);
        }
        return h;
    }

    void collect(ParamList<T>& out, const std::string& prefix) {
        out.emplace_back(prefix + ".wz", &wz);
        out.emplace_back(prefix + ".wt", &wt);
        out.emplace_back(prefix + ".b_in", &b_in);
        for (size_t l = 0; l < layers.size(); ++l) {
            out.emplace_back(prefix + ".l" + std::to_string(l) + ".w", &layers[l].first);
            out.emplace_back(prefix + ".l" + std::to_string(l) + ".b", &layers[l].second);
        }
    }
};

// ---------------------------------------------------------------------------
// full tokenizer model
// ---------------------------------------------------------------------------

template <typename T>
struct TokenizeOut {
    Tensor<T> alpha;   // n x vocab_size
    Tensor<T> v;       // n x vocab_dim, pre-quantization
    Tensor<T> v_used;  // quantized (straight-through) or soft row values
    std::vector<int> indices;
};

template <typename T>
struct TokenizerModel {
    TokenizerConfig cfg;
    int grid_h = 0, grid_w = 0;
    int patches_per_side = 0, n_patches = 0, patch_dim = 0;

    VocabTable<T> vocab;
    ConvEncoder<T> conv;
    Resampler<T> resampler;
    Tensor<T> gen_w, gen_b;    // latent -> vocab logits
    Codebook<T> codebook;
    Tensor<T> tok_w, tok_b;    // vocab_dim -> d_model
    Tensor<T> token_pos;       // n_tokens x d_model, learned
    Tensor<T> patch_w, patch_b;  // patch_dim -> d_model
    Tensor<T> patch_pos;       // n_patches x d_model, fixed sinusoidal
    std::vector<AttnBlock<T>> enc_blocks, dec_blocks;
    Tensor<T> enc_ln_g, enc_ln_b, dec_ln_g, dec_ln_b;
    Tensor<T> mask_token;   // 1 x d_model
    Tensor<T> dummy_cond;   // 1 x d_model, unconditional condition row
    VelocityHead<T> head;

    double tau = 1.0;  // current relaxation temperature (annealed by the trainer)

    explicit TokenizerModel(const TokenizerConfig& c) : cfg(c) {
        if (c.image_size % c.downsample_q != 0) throw ConfigError("model: image size not divisible by downsample factor");
        if (c.image_size % c.patch_size != 0) throw ConfigError("model: image size not divisible by patch size");
        grid_h = c.image_size / c.downsample_q;
        grid_w = grid_h;
        patches_per_side = c.image_size / c.patch_size;
        n_patches = patches_per_side * patches_per_side;
        patch_dim = c.patch_size * c.patch_size * c.channels;
        if (c.n_tokens > grid_h * grid_w) throw ConfigError("model: token count exceeds latent grid size");
        if (c.n_tokens < 1) throw ConfigError("model: need at least one token");

        Rng rng(Rng::derive(c.seed, 0x1417));
        vocab = VocabTable<T>(c.vocab_size, c.vocab_dim, c.seed);
        conv = ConvEncoder<T>(c.channels, c.downsample_q, c.latent_dim, rng);
        resampler = Resampler<T>(c.n_tokens, c.latent_dim, c.resampler_heads, rng);
        gen_w = param_normal<T>({c.latent_dim, c.vocab_size}, rng, 0.02);
        gen_b = param_zeros<T>({c.vocab_size});
        codebook = Codebook<T>::init_from_vocab(vocab, c.codebook_size, c.ema_gamma, c.laplace_eps, c.seed);
        tok_w = param_normal<T>({c.vocab_dim, c.d_model}, rng, 0.02);
        tok_b = param_zeros<T>({c.d_model});
        token_pos = param_normal<T>({c.n_tokens, c.d_model}, rng, 0.02);
        patch_w = param_normal<T>({patch_dim, c.d_model}, rng, 0.02);
        patch_b = param_zeros<T>({c.d_model});
        patch_pos = sinusoidal_grid_positions<T>(patches_per_side, patches_per_side, c.d_model);
        for (int i = 0; i < c.enc_blocks; ++i) enc_blocks.emplace_back(c.d_model, c.heads, 4, rng);
        for (int i = 0; i < c.dec_blocks; ++i) dec_blocks.emplace_back(c.d_model, c.heads, 4, rng);
        enc_ln_g = param_ones<T>({c.d_model});
        enc_ln_b = param_zeros<T>({c.d_model});
        dec_ln_g = param_ones<T>({c.d_model});
        dec_ln_b = param_zeros<T>({c.d_model});
        mask_token = param_normal<T>({1, c.d_model}, rng, 0.02);
        dummy_cond = param_normal<T>({1, c.d_model}, rng, 0.02);
        head = VelocityHead<T>(patch_dim, c.t_embed_dim, c.d_model, c.velocity_hidden_mult, c.velocity_layers, rng);
        tau = c.gumbel_tau_start;
    }

    ParamList<T> params() {
        ParamList<T> out;
        conv.collect(out, "conv");
        resampler.collect(out, "resampler");
        out.emplace_back("gen_w", &gen_w);
        out.emplace_back("gen_b", &gen_b);
        out.emplace_back("tok_w", &tok_w);
        out.emplace_back("tok_b", &tok_b);
        out.emplace_back("token_pos", &token_pos);
        out.emplace_back("patch_w", &patch_w);
        out.emplace_back("patch_b", &patch_b);
        for (size_t i = 0; i < enc_blocks.size(); ++i) enc_blocks[i].collect(out, "enc" + std::to_string(i));
        for (size_t i = 0; i < dec_blocks.size(); ++i) dec_blocks[i].collect(out, "dec" + std::to_string(i));
        out.emplace_back("enc_ln_g", &enc_ln_g);
        out.emplace_back("enc_ln_b", &enc_ln_b);
        out.emplace_back("dec_ln_g", &dec_ln_g);
        out.emplace_back("dec_ln_b", &dec_ln_b);
        out.emplace_back("mask_token", &mask_token);
        out.emplace_back("dummy_cond", &dummy_cond);
        head.collect(out, "head");
        return out;
    }

    // --- tokenization -------------------------------------------------------

    Tensor<T> encode_image(const Image& img) const { return conv.forward(img); }

    Tensor<T> token_logits(const Image& img) const {
        return linear(resampler.forward(conv.forward(img)), gen_w, gen_b);
    }

    // Full resampling pipeline. Non-empty noise must have n_tokens*vocab_size
    // entries; empty noise means the deterministic evaluation mode.
    TokenizeOut<T> run_resampler(const Image& img, const std::vector<T>& noise, double temperature) const {
        TokenizeOut<T> out;
        const Tensor<T> logits = token_logits(img);
        std::vector<T> g = noise;
        if (g.empty()) g.assign(static_cast<size_t>(logits.numel()), T(0));
        out.alpha = gumbel_alpha(logits, g, static_cast<T>(temperature));
        out.v = embed_vocab(out.alpha, vocab);
        out.indices = codebook.quantize(out.v);
        if (cfg.soft_forward) {
            out.v_used = out.v;
        } else {
            out.v_used = straight_through(out.v, codebook.lookup(out.indices));
        }
        return out;
    }

    // Deterministic evaluation-mode tokenization: zero noise, floor temperature.
    TokenSequence<T> tokenize(const Image& img) const {
        NoGradGuard ng;
        const TokenizeOut<T> r = run_resampler(img, {}, cfg.gumbel_tau_floor);
        TokenSequence<T> seq;
        seq.indices = r.indices;
        seq.quantized_codes = codebook.lookup(r.indices);
        return seq;
    }

    // --- decoder ------------------------------------------------------------

    // Token rows (n x vocab_dim) -> encoder input rows with learned positions.
    Tensor<T> embed_tokens(const Tensor<T>& token_values) const {
        return add(linear(token_values, tok_w, tok_b), token_pos);
    }

    // Constant patch rows (flow space) for the given patch ids.
    Tensor<T> patch_rows(const PatchSet& ps, const std::vector<int>& ids) const {
        Tensor<T> out({static_cast<int>(ids.size()), patch_dim});
        for (size_t r = 0; r < ids.size(); ++r) {
            const float* src = ps.data.data() + static_cast<size_t>(ids[r]) * ps.patch_dim();
            T* dst = out.ptr() + static_cast<int64_t>(r) * patch_dim;
            for (int j = 0; j < patch_dim; ++j) dst[j] = static_cast<T>(pixel_to_flow(src[j]));
        }
        return out;
    }

    // Combined sequence of token embeddings and revealed-patch embeddings,
    // passed through the encoder stack. `revealed_values` holds flow-space
    // patch vectors aligned with `revealed_ids`.
    Tensor<T> encode_context(const Tensor<T>& token_emb, const std::vector<int>& revealed_ids,
                             const Tensor<T>& revealed_values) const {
        Tensor<T> x = token_emb;
        if (!revealed_ids.empty()) {
            Tensor<T> emb = linear(revealed_values, patch_w, patch_b);
            emb = add(emb, gather_rows(patch_pos, revealed_ids));
            x = concat_rows<T>({x, emb});
        }
        for (const auto& blk : enc_blocks) x = blk.forward(x);
        return layer_norm(x, enc_ln_g, enc_ln_b);
    }

    // Condition embeddings for the masked patches: shared mask token plus the
    // masked positions' encodings, decoded against the full context. Returns a
    // default tensor when `masked_ids` is empty.
    Tensor<T> decode_conditions(const Tensor<T>& context, const std::vector<int>& masked_ids) const {
        if (masked_ids.empty()) return Tensor<T>();
        const int k = static_cast<int>(masked_ids.size());
        Tensor<T> mask_rows = add(repeat_rows(mask_token, k), gather_rows(patch_pos, masked_ids));
        Tensor<T> x = concat_rows<T>({context, mask_rows});
        for (const auto& blk : dec_blocks) x = blk.forward(x);
        x = layer_norm(x, dec_ln_g, dec_ln_b);
        return slice_rows(x, context.dims[0], k);
    }

    Tensor<T> velocity(const Tensor<T>& z_rows, const std::vector<double>& ts, const Tensor<T>& cond) const {
        return head.forward(z_rows, ts, cond);
    }
};

// ---------------------------------------------------------------------------
// flow-matching loss
// ---------------------------------------------------------------------------

// Everything random about one image's loss evaluation, drawn up front so the
// loss itself is a deterministic function of (model, image, draws).
template <typename T>
struct FlowDraws {
    MaskState mask;
    std::vector<T> gumbel;        // n_tokens * vocab_size
    std::vector<double> ts;       // one per masked patch
    std::vector<T> eps;           // |masked| * patch_dim
    std::vector<bool> use_dummy;  // per masked patch (unconditional training)
};

template <typename T>
FlowDraws<T> draw_flow_batch(const TokenizerModel<T>& m, Rng& rng) {
    FlowDraws<T> d;
    d.mask = sample_mask(m.n_patches, rng);
    d.gumbel = draw_gumbel_noise<T>(static_cast<int64_t>(m.cfg.n_tokens) * m.cfg.vocab_size, rng);
    const size_t k = d.mask.masked.size();
    d.ts.resize(k);
    for (auto& t : d.ts) t = rng.uniform01();
    d.eps.resize(k * static_cast<size_t>(m.patch_dim));
    for (auto& e : d.eps) e = static_cast<T>(rng.normal());
    d.use_dummy.resize(k);
    for (size_t i = 0; i < k; ++i) d.use_dummy[i] = rng.uniform01() < m.cfg.cfg_dropout;
    return d;
}

template <typename T>
struct FmLossOut {
    Tensor<T> total;             // recorded scalar
    double fm = 0.0;
    double commit = 0.0;
    std::vector<int> assignments;
    std::vector<T> v_values;     // detached rows for the codebook update
};

// Noisy states and regression targets for the masked patches of one image.
template <typename T>
void assemble_path_points(const Tensor<T>& masked_values, const FlowDraws<T>& d, Tensor<T>& z_t, Tensor<T>& target) {
    const int k = masked_values.dims[0];
    const int dim = masked_values.dims[1];
    z_t = Tensor<T>({k, dim});
    target = Tensor<T>({k, dim});
    for (int r = 0; r < k; ++r) {
        const T* z = masked_values.ptr() + static_cast<int64_t>(r) * dim;
        const T* e = d.eps.data() + static_cast<int64_t>(r) * dim;
        make_path(z, e, d.ts[static_cast<size_t>(r)], dim, z_t.ptr() + static_cast<int64_t>(r) * dim);
        T* tgt = target.ptr() + static_cast<int64_t>(r) * dim;
        for (int j = 0; j < dim; ++j) tgt[j] = e[j] - z[j];
    }
}

// Velocity-regression loss over the masked patches of one image, plus the
// optional commitment term pulling v toward its assigned codes. Of the pixel
// content, only revealed patches reach the transformer encoder; `encoder_view`,
// when given, substitutes the image those revealed rows are read from (tokens
// and regression targets always come from `img`).
template <typename T>
FmLossOut<T> fm_loss_single(TokenizerModel<T>& m, const Image& img, const FlowDraws<T>& d,
                            const Image* encoder_view = nullptr) {
    if (d.mask.masked.empty()) throw ContractError("fm_loss: empty masked set");

    const TokenizeOut<T> tok = m.run_resampler(img, d.gumbel, m.tau);
    const Tensor<T> token_emb = m.embed_tokens(tok.v_used);

    const PatchSet ps = patchify(img, m.cfg.patch_size);
    const PatchSet ps_enc = encoder_view ? patchify(*encoder_view, m.cfg.patch_size) : ps;
    const Tensor<T> revealed_values = d.mask.revealed.empty() ? Tensor<T>() : m.patch_rows(ps_enc, d.mask.revealed);
    const Tensor<T> ctx = m.encode_context(token_emb, d.mask.revealed, revealed_values);
    const Tensor<T> cond = m.decode_conditions(ctx, d.mask.masked);

    // unconditional exposure: swap selected rows for the dummy condition
    const int k = static_cast<int>(d.mask.masked.size());
    bool any_dummy = false;
    for (bool u : d.use_dummy) any_dummy = any_dummy || u;
    Tensor<T> cond_used = cond;
    if (any_dummy) {
        std::vector<Tensor<T>> rows;
        rows.reserve(static_cast<size_t>(k));
        for (int i = 0; i < k; ++i) {
            rows.push_back(d.use_dummy[static_cast<size_t>(i)] ? m.dummy_cond : slice_rows(cond, i, 1));
        }
        cond_used = concat_rows(rows);
    }

    const Tensor<T> masked_values = m.patch_rows(ps, d.mask.masked);
    Tensor<T> z_t, target;
    assemble_path_points(masked_values, d, z_t, target);

    const Tensor<T> pred = m.velocity(z_t, d.ts, cond_used);
    const Tensor<T> fm = mse(pred, target);

    FmLossOut<T> out;
    out.assignments = tok.indices;
    out.v_values.assign(tok.v.ptr(), tok.v.ptr() + tok.v.numel());
    out.fm = static_cast<double>(fm.value());
    if (m.cfg.commit_beta > 0.0) {
        const Tensor<T> commit = mse(tok.v, m.codebook.lookup(tok.indices));
        out.commit = static_cast<double>(commit.value());
        out.total = add(fm, scale(commit, static_cast<T>(m.cfg.commit_beta)));
    } else {
        out.total = fm;
    }
    return out;
}

}  // namespace v2flow
