#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "v2flow/ops.hpp"
#include "v2flow/rng.hpp"
#include "v2flow/tensor.hpp"

namespace v2flow {

// Fixed embedding table standing in for a pretrained language-model vocabulary.
// Rows are unit-norm random vectors; the table never changes during training.
template <typename T>
struct VocabTable {
    Tensor<T> table;  // n_entries x dim, requires_grad = false

    VocabTable() = default;

    VocabTable(int n_entries, int dim, uint64_t seed) {
        if (n_entries < 2 || dim < 1) throw ConfigError("vocab table: need at least 2 entries and dim >= 1");
        table = Tensor<T>({n_entries, dim});
        Rng rng(Rng::derive(seed, 0x70CAB));
        for (int r = 0; r < n_entries; ++r) {
            T* row = table.ptr() + static_cast<int64_t>(r) * dim;
            double norm2 = 0;
            for (int j = 0; j < dim; ++j) {
                row[j] = static_cast<T>(rng.normal());
                norm2 += static_cast<double>(row[j]) * row[j];
            }
            const T inv = static_cast<T>(1.0 / std::sqrt(std::max(norm2, 1e-12)));
            for (int j = 0; j < dim; ++j) row[j] *= inv;
        }
    }

    int entries() const { return table.dims.empty() ? 0 : table.dims[0]; }
    int dim() const { return table.dims.empty() ? 0 : table.dims[1]; }
};

// Relaxed categorical assignment: softmax((logits + noise) / tau) per row.
// Zero noise gives the deterministic evaluation mode.
template <typename T>
Tensor<T> gumbel_alpha(const Tensor<T>& logits, const std::vector<T>& noise, T tau) {
    if (tau <= T(0)) throw ConfigError("gumbel_alpha: temperature must be positive");
    if (static_cast<int64_t>(noise.size()) != logits.numel()) {
        throw ShapeError("gumbel_alpha: noise size must match logits");
    }
    Tensor<T> noise_t;
    noise_t.dims = logits.dims;
    noise_t.data = std::make_shared<std::vector<T>>(noise);
    return softmax_lastdim(scale(add(logits, noise_t), T(1) / tau));
}

template <typename T>
std::vector<T> draw_gumbel_noise(int64_t count, Rng& rng) {
    std::vector<T> out(static_cast<size_t>(count));
    for (auto& v : out) v = static_cast<T>(rng.gumbel());
    return out;
}

// v = alpha * L: each row a convex combination of vocabulary rows.
template <typename T>
Tensor<T> embed_vocab(const Tensor<T>& alpha, const VocabTable<T>& vocab) {
    return matmul(alpha, vocab.table);
}

struct CodebookStats {
    double utilization = 0.0;  // fraction of codes with at least one assignment
    double perplexity = 0.0;   // exp(entropy) of the empirical assignment distribution
};

// EMA-maintained code set in the vocabulary embedding space. Each code equals
// ema_sum / max(ema_count, laplace_eps) after every update.
template <typename T>
struct Codebook {
    Tensor<T> codes;     // n_codes x dim
    Tensor<T> ema_sums;  // n_codes x dim
    std::vector<T> ema_counts;
    double decay = 0.99;
    double laplace_eps = 1e-5;

    Codebook() = default;

    Codebook(int n_codes, int dim) {
        if (n_codes < 1) throw ConfigError("codebook: need at least one code");
        codes = Tensor<T>({n_codes, dim});
        ema_sums = Tensor<T>({n_codes, dim});
        ema_counts.assign(static_cast<size_t>(n_codes), T(1));
    }

    // Seeds codes with distinct rows of the vocabulary table.
    static Codebook init_from_vocab(const VocabTable<T>& vocab, int n_codes, double decay, double laplace_eps,
                                    uint64_t seed) {
        if (n_codes > vocab.entries()) throw ConfigError("codebook: more codes than vocabulary rows");
        Codebook cb(n_codes, vocab.dim());
        cb.decay = decay;
        cb.laplace_eps = laplace_eps;
        Rng rng(Rng::derive(seed, 0xC0DE));
        const auto rows = rng.sample_without_replacement(vocab.entries(), n_codes);
        const int d = vocab.dim();
        for (int i = 0; i < n_codes; ++i) {
            const T* src = vocab.table.ptr() + static_cast<int64_t>(rows[static_cast<size_t>(i)]) * d;
            std::copy(src, src + d, cb.codes.ptr() + static_cast<int64_t>(i) * d);
            std::copy(src, src + d, cb.ema_sums.ptr() + static_cast<int64_t>(i) * d);
        }
        return cb;
    }

    int n_codes() const { return codes.dims[0]; }
    int dim() const { return codes.dims[1]; }

    // Nearest code per row under squared Euclidean distance; ties break to the
    // lowest index.
    std::vector<int> quantize(const T* rows, int n_rows) const {
        if (n_codes() < 1) throw ConfigError("quantize: empty codebook");
        const int d = dim();
        std::vector<int> out(static_cast<size_t>(n_rows));
        for (int r = 0; r < n_rows; ++r) {
            const T* v = rows + static_cast<int64_t>(r) * d;
            double best = std::numeric_limits<double>::infinity();
            int best_i = 0;
            for (int c = 0; c < n_codes(); ++c) {
                const T* code = codes.ptr() + static_cast<int64_t>(c) * d;
                double dist = 0;
                for (int j = 0; j < d; ++j) {
                    const double diff = static_cast<double>(v[j]) - static_cast<double>(code[j]);
                    dist += diff * diff;
                }
                if (dist < best) {
                    best = dist;
                    best_i = c;
                }
            }
            out[static_cast<size_t>(r)] = best_i;
        }
        return out;
    }

    std::vector<int> quantize(const Tensor<T>& v) const { return quantize(v.ptr(), v.dims[0]); }

    // Code rows for the given indices, as a constant tensor.
    Tensor<T> lookup(const std::vector<int>& indices) const {
        const int d = dim();
        Tensor<T> out({static_cast<int>(indices.size()), d});
        for (size_t r = 0; r < indices.size(); ++r) {
            if (indices[r] < 0 || indices[r] >= n_codes()) throw ShapeError("codebook lookup: index out of range");
            const T* src = codes.ptr() + static_cast<int64_t>(indices[r]) * d;
            std::copy(src, src + d, out.ptr() + static_cast<int64_t>(r) * d);
        }
        return out;
    }

    // counts <- g*counts + (1-g)*batch_count; sums <- g*sums + (1-g)*batch_sum;
    // codes recomputed as sums / max(counts, laplace_eps).
    void ema_update(const T* rows, int n_rows, const std::vector<int>& assignments) {
        if (static_cast<int>(assignments.size()) != n_rows) throw ShapeError("ema_update: assignment count mismatch");
        const int d = dim();
        const int nc = n_codes();
        std::vector<double> batch_counts(static_cast<size_t>(nc), 0.0);
        std::vector<double> batch_sums(static_cast<size_t>(nc) * d, 0.0);
        for (int r = 0; r < n_rows; ++r) {
            const int c = assignments[static_cast<size_t>(r)];
            if (c < 0 || c >= nc) throw ShapeError("ema_update: assignment out of range");
            batch_counts[static_cast<size_t>(c)] += 1.0;
            const T* v = rows + static_cast<int64_t>(r) * d;
            double* acc = batch_sums.data() + static_cast<int64_t>(c) * d;
            for (int j = 0; j < d; ++j) acc[j] += static_cast<double>(v[j]);
        }
        const double g = decay;
        for (int c = 0; c < nc; ++c) {
            ema_counts[static_cast<size_t>(c)] =
                static_cast<T>(g * ema_counts[static_cast<size_t>(c)] + (1.0 - g) * batch_counts[static_cast<size_t>(c)]);
            T* sums = ema_sums.ptr() + static_cast<int64_t>(c) * d;
            const double* bs = batch_sums.data() + static_cast<int64_t>(c) * d;
            for (int j = 0; j < d; ++j) sums[j] = static_cast<T>(g * sums[j] + (1.0 - g) * bs[j]);
        }
        recompute_codes();
    }

    void ema_update(const Tensor<T>& v, const std::vector<int>& assignments) {
        ema_update(v.ptr(), v.dims[0], assignments);
    }

    void recompute_codes() {
        const int d = dim();
        for (int c = 0; c < n_codes(); ++c) {
            const double denom = std::max(static_cast<double>(ema_counts[static_cast<size_t>(c)]), laplace_eps);
            const T* sums = ema_sums.ptr() + static_cast<int64_t>(c) * d;
            T* code = codes.ptr() + static_cast<int64_t>(c) * d;
            for (int j = 0; j < d; ++j) code[j] = static_cast<T>(sums[j] / denom);
        }
    }

    CodebookStats stats(const std::vector<int>& recent_assignments) const {
        if (recent_assignments.empty()) throw ContractError("codebook stats: no assignments recorded");
        std::vector<int64_t> hist(static_cast<size_t>(n_codes()), 0);
        for (int a : recent_assignments) ++hist[static_cast<size_t>(a)];
        int used = 0;
        double entropy = 0.0;
        const double total = static_cast<double>(recent_assignments.size());
        for (int64_t h : hist) {
            if (h == 0) continue;
            ++used;
            const double p = static_cast<double>(h) / total;
            entropy -= p * std::log(p);
        }
        CodebookStats s;
        s.utilization = static_cast<double>(used) / n_codes();
        s.perplexity = std::exp(entropy);
        return s;
    }
};

// Token sequence emitted by the tokenizer: discrete indices plus the code rows
// they resolved to at emission time.
template <typename T>
struct TokenSequence {
    std::vector<int> indices;
    Tensor<T> quantized_codes;  // n x dim
};

}  // namespace v2flow
