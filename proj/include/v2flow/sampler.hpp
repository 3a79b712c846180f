#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "v2flow/decoder.hpp"
#include "v2flow/model_config.hpp"

namespace v2flow {

// Reveal counts per iteration from the cosine mask schedule
// m_k = floor(N*cos(pi*k/(2K))). Zero-sized reveals merge into the following
// step, so every entry is positive and the counts sum to N. The returned list
// may therefore be shorter than K.
inline std::vector<int> cosine_schedule(int n, int k) {
    if (k < 1 || k > n) throw ConfigError("cosine_schedule: need 1 <= K <= N");
    std::vector<int> reveals;
    int m_prev = n;
    for (int i = 1; i <= k; ++i) {
        const double c = std::cos(3.141592653589793 * i / (2.0 * k));
        int m = (i == k) ? 0 : static_cast<int>(std::floor(n * c));
        m = std::max(0, std::min(m, m_prev));
        const int reveal = m_prev - m;
        if (reveal > 0) reveals.push_back(reveal);
        m_prev = m;
    }
    return reveals;
}

// Guided field: omega*v_cond + (1-omega)*v_uncond. The degenerate scales
// return the corresponding operand bit-exactly.
template <typename T>
void cfg_velocity(const T* v_cond, const T* v_uncond, double omega, int n, T* out) {
    if (omega == 1.0) {
        std::copy(v_cond, v_cond + n, out);
        return;
    }
    if (omega == 0.0) {
        std::copy(v_uncond, v_uncond + n, out);
        return;
    }
    const T w = static_cast<T>(omega);
    const T u = static_cast<T>(1.0 - omega);
    for (int i = 0; i < n; ++i) out[i] = w * v_cond[i] + u * v_uncond[i];
}

template <typename T>
std::vector<T> cfg_velocity(const std::vector<T>& v_cond, const std::vector<T>& v_uncond, double omega) {
    if (v_cond.size() != v_uncond.size()) throw ShapeError("cfg_velocity: size mismatch");
    std::vector<T> out(v_cond.size());
    cfg_velocity(v_cond.data(), v_uncond.data(), omega, static_cast<int>(v_cond.size()), out.data());
    return out;
}

// Euler integration of dz/dt = field(z, t) from t=1 down to t=0 in equal
// steps. `field` fills the velocity for the whole flattened state.
template <typename T, typename Field>
void integrate_rf(std::vector<T>& z, const Field& field, int ode_steps) {
    if (ode_steps < 1) throw ConfigError("integrate_rf: ode_steps must be at least 1");
    const double dt = 1.0 / ode_steps;
    std::vector<T> v(z.size());
    for (int s = 0; s < ode_steps; ++s) {
        const double t = 1.0 - s * dt;
        field(z, t, v);
        for (size_t i = 0; i < z.size(); ++i) z[i] -= static_cast<T>(dt) * v[i];
    }
}

// Deterministic DDIM update over the same step grid, driven by the noise
// estimate eps_hat = z_t + (1-t)*psi recovered from the velocity head. Under
// the straight-line path this is algebraically exact when psi = eps - z.
template <typename T, typename Field>
void integrate_ddim(std::vector<T>& z, const Field& field, int ode_steps) {
    if (ode_steps < 1) throw ConfigError("integrate_ddim: ode_steps must be at least 1");
    const double dt = 1.0 / ode_steps;
    std::vector<T> v(z.size());
    for (int s = 0; s < ode_steps; ++s) {
        const double t = 1.0 - s * dt;
        const double t_next = (s == ode_steps - 1) ? 0.0 : 1.0 - (s + 1) * dt;
        field(z, t, v);
        for (size_t i = 0; i < z.size(); ++i) {
            const T z0_hat = z[i] - static_cast<T>(t) * v[i];
            const T eps_hat = z[i] + static_cast<T>(1.0 - t) * v[i];
            z[i] = static_cast<T>(1.0 - t_next) * z0_hat + static_cast<T>(t_next) * eps_hat;
        }
    }
}

// Per-iteration record of the masked-AR loop, for diagnostics and tests.
struct SamplerTrace {
    std::vector<std::vector<int>> reveal_sets;  // patch ids integrated per iteration
    std::vector<int> revealed_before;           // patches already visible entering each iteration
};

namespace detail {

// Batched velocity evaluation for one reveal set: rows of z states share a
// time value; conditions are fixed per row.
template <typename T>
void eval_velocity_rows(const TokenizerModel<T>& m, const std::vector<T>& z, double t, const Tensor<T>& cond,
                        std::vector<T>& out) {
    const int rows = cond.dims[0];
    const int dim = m.patch_dim;
    Tensor<T> z_rows({rows, dim});
    std::copy(z.begin(), z.end(), z_rows.ptr());
    const std::vector<double> ts(static_cast<size_t>(rows), t);
    const Tensor<T> v = m.velocity(z_rows, ts, cond);
    out.assign(v.ptr(), v.ptr() + v.numel());
}

}  // namespace detail

// Masked autoregressive reconstruction: iterate the cosine schedule, each step
// encoding tokens plus already-reconstructed patches, decoding conditions for
// the still-masked set, and transporting a fresh noise sample to pixels for a
// randomly drawn reveal subset. Pure function of (tokens, config, model, seed).
template <typename T>
Image ar_reconstruct(const TokenizerModel<T>& m, const std::vector<int>& token_indices, const SamplerConfig& sc,
                     SamplerTrace* trace = nullptr) {
    if (static_cast<int>(token_indices.size()) != m.cfg.n_tokens) {
        throw ConfigError("ar_reconstruct: token count does not match the model");
    }
    for (int idx : token_indices) {
        if (idx < 0 || idx >= m.cfg.codebook_size) throw ConfigError("ar_reconstruct: token index out of range");
    }
    if (sc.iters < 1 || sc.iters > m.n_patches) throw ConfigError("ar_reconstruct: iteration count outside [1, N]");

    NoGradGuard ng;
    const int n = m.n_patches;
    const int dim = m.patch_dim;
    const Tensor<T> token_emb = m.embed_tokens(m.codebook.lookup(token_indices));
    const std::vector<int> schedule = cosine_schedule(n, sc.iters);

    std::vector<T> patch_values(static_cast<size_t>(n) * dim, T(0));  // flow space
    std::vector<int> revealed;
    std::vector<int> masked(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) masked[static_cast<size_t>(i)] = i;

    for (size_t step = 0; step < schedule.size(); ++step) {
        if (trace) trace->revealed_before.push_back(static_cast<int>(revealed.size()));

        Tensor<T> revealed_rows;
        if (!revealed.empty()) {
            revealed_rows = Tensor<T>({static_cast<int>(revealed.size()), dim});
            for (size_t r = 0; r < revealed.size(); ++r) {
                const T* src = patch_values.data() + static_cast<int64_t>(revealed[r]) * dim;
                std::copy(src, src + dim, revealed_rows.ptr() + static_cast<int64_t>(r) * dim);
            }
        }
        const Tensor<T> ctx = m.encode_context(token_emb, revealed, revealed_rows);
        const Tensor<T> cond_all = m.decode_conditions(ctx, masked);

        // uniform reveal subset from the still-masked set
        Rng pick_rng(Rng::derive(sc.seed, 0x5E7, step));
        const int count = schedule[step];
        std::vector<int> pick = pick_rng.sample_without_replacement(static_cast<int>(masked.size()), count);
        std::sort(pick.begin(), pick.end());
        std::vector<int> reveal_ids;
        reveal_ids.reserve(pick.size());
        for (int p : pick) reveal_ids.push_back(masked[static_cast<size_t>(p)]);
        if (trace) trace->reveal_sets.push_back(reveal_ids);

        // condition rows for the chosen subset
        std::vector<Tensor<T>> rows;
        rows.reserve(pick.size());
        for (int p : pick) rows.push_back(slice_rows(cond_all, p, 1));
        const Tensor<T> cond = rows.size() == 1 ? rows[0] : concat_rows(rows);
        const Tensor<T> uncond = repeat_rows(m.dummy_cond, count);

        // fresh noise per patch, keyed by patch id so ordering cannot matter
        std::vector<T> z(static_cast<size_t>(count) * dim);
        for (int r = 0; r < count; ++r) {
            Rng noise_rng(Rng::derive(sc.seed, 0x105E, static_cast<uint64_t>(reveal_ids[static_cast<size_t>(r)])));
            for (int j = 0; j < dim; ++j) z[static_cast<size_t>(r) * dim + j] = static_cast<T>(noise_rng.normal());
        }

        auto field = [&](const std::vector<T>& state, double t, std::vector<T>& out) {
            std::vector<T> v_cond;
            detail::eval_velocity_rows(m, state, t, cond, v_cond);
            if (sc.omega == 1.0) {
                out = v_cond;
                return;
            }
            std::vector<T> v_unc;
            detail::eval_velocity_rows(m, state, t, uncond, v_unc);
            out.resize(v_cond.size());
            cfg_velocity(v_cond.data(), v_unc.data(), sc.omega, static_cast<int>(v_cond.size()), out.data());
        };
        if (sc.method == SampleMethod::ddim) {
            integrate_ddim(z, field, sc.ode_steps);
        } else {
            integrate_rf(z, field, sc.ode_steps);
        }

        for (int r = 0; r < count; ++r) {
            std::copy(z.begin() + static_cast<int64_t>(r) * dim, z.begin() + static_cast<int64_t>(r + 1) * dim,
                      patch_values.begin() + static_cast<int64_t>(reveal_ids[static_cast<size_t>(r)]) * dim);
        }
        for (auto it = pick.rbegin(); it != pick.rend(); ++it) masked.erase(masked.begin() + *it);
        revealed.insert(revealed.end(), reveal_ids.begin(), reveal_ids.end());
        std::sort(revealed.begin(), revealed.end());
    }

    PatchSet ps;
    ps.rows = m.patches_per_side;
    ps.cols = m.patches_per_side;
    ps.patch = m.cfg.patch_size;
    ps.channels = m.cfg.channels;
    ps.data.resize(static_cast<size_t>(n) * dim);
    for (size_t i = 0; i < ps.data.size(); ++i) ps.data[i] = flow_to_pixel(static_cast<float>(patch_values[i]));
    Image img = unpatchify(ps);
    img.clamp01();
    return img;
}

}  // namespace v2flow
