#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "v2flow/nn.hpp"
#include "v2flow/optim.hpp"
#include "v2flow/vocab.hpp"

namespace v2flow {

// Instruction prefix plus the visual-token response it should produce.
// The target is visual ids followed by exactly one stop symbol.
struct ConversationSample {
    std::vector<int> prefix;
    std::vector<int> target;
};

// Decoder-only autoregressive prior over an extended vocabulary: a small base
// range of control/class symbols followed by one id per codebook entry. Visual
// rows of the embedding start at the projected codebook codes.
template <typename T>
struct PriorModel {
    PriorConfig cfg;
    int n_codes = 0;
    int total_vocab = 0;

    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kStop = 2;
    static constexpr int kClassBase = 3;

    Tensor<T> embed;      // total_vocab x dim
    Tensor<T> init_proj;  // vocab_dim -> dim map used only at construction
    Tensor<T> pos;        // context x dim
    std::vector<AttnBlock<T>> blocks;
    Tensor<T> ln_g, ln_b;
    Tensor<T> out_w, out_b;

    PriorModel() = default;

    PriorModel(const PriorConfig& c, const Codebook<T>& codebook) : cfg(c), n_codes(codebook.n_codes()) {
        if (c.base_size < kClassBase + 1) throw ConfigError("prior: base vocabulary too small for control symbols");
        if (c.dim % c.heads != 0) throw ConfigError("prior: width not divisible by heads");
        total_vocab = c.base_size + n_codes;

        Rng rng(Rng::derive(c.seed, 0x9121));
        embed = param_normal<T>({total_vocab, c.dim}, rng, 0.02);
        init_proj = Tensor<T>({codebook.dim(), c.dim});
        {
            Rng prng(Rng::derive(c.seed, 0x912A));
            const double s = 1.0 / std::sqrt(static_cast<double>(codebook.dim()));
            for (auto& v : *init_proj.data) v = static_cast<T>(prng.normal() * s);
        }
        // visual rows start at the projected code embeddings
        Tensor<T> projected({n_codes, c.dim});
        kernel::matmul(codebook.codes.ptr(), init_proj.ptr(), projected.ptr(), n_codes, codebook.dim(), c.dim);
        std::copy(projected.ptr(), projected.ptr() + projected.numel(),
                  embed.ptr() + static_cast<int64_t>(c.base_size) * c.dim);

        pos = param_normal<T>({c.context, c.dim}, rng, 0.02);
        for (int i = 0; i < c.blocks; ++i) blocks.emplace_back(c.dim, c.heads, 4, rng);
        ln_g = param_ones<T>({c.dim});
        ln_b = param_zeros<T>({c.dim});
        out_w = param_normal<T>({c.dim, total_vocab}, rng, 0.02);
        out_b = param_zeros<T>({total_vocab});
    }

    int visual_offset() const { return cfg.base_size; }
    int visual_id(int codebook_index) const { return cfg.base_size + codebook_index; }
    int codebook_index(int visual) const { return visual - cfg.base_size; }
    bool is_visual(int id) const { return id >= cfg.base_size && id < total_vocab; }

    ParamList<T> params() {
        ParamList<T> out;
        out.emplace_back("embed", &embed);
        out.emplace_back("pos", &pos);
        for (size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, "blk" + std::to_string(i));
        out.emplace_back("ln_g", &ln_g);
        out.emplace_back("ln_b", &ln_b);
        out.emplace_back("out_w", &out_w);
        out.emplace_back("out_b", &out_b);
        return out;
    }

    // Next-token logits for every position of `ids`, causal self-attention.
    Tensor<T> logits(const std::vector<int>& ids) const {
        const int s = static_cast<int>(ids.size());
        if (s < 1) throw ContractError("prior logits: empty sequence");
        if (s > cfg.context) throw ContractError("prior logits: sequence exceeds context window");
        for (int id : ids) {
            if (id < 0 || id >= total_vocab) throw ShapeError("prior logits: id out of range");
        }
        Tensor<T> x = add(gather_rows(embed, ids), slice_rows(pos, 0, s));
        Tensor<T> causal({s, s});
        for (int i = 0; i < s; ++i) {
            for (int j = i + 1; j < s; ++j) (*causal.data)[static_cast<size_t>(i) * s + j] = T(-1e30);
        }
        for (const auto& blk : blocks) x = blk.forward(x, &causal);
        x = layer_norm(x, ln_g, ln_b);
        return linear(x, out_w, out_b);
    }

    // Cross-entropy over next-token predictions, counting only positions whose
    // successor belongs to the target (prefix positions carry zero weight).
    Tensor<T> sample_loss(const ConversationSample& sample) const {
        if (sample.prefix.empty()) throw ContractError("prior loss: empty prefix");
        std::vector<int> ids = sample.prefix;
        ids.insert(ids.end(), sample.target.begin(), sample.target.end());
        if (ids.size() < 2) throw ContractError("prior loss: sample too short");
        const Tensor<T> lg = logits(ids);
        const int rows = static_cast<int>(ids.size()) - 1;
        const Tensor<T> pred_rows = slice_rows(lg, 0, rows);
        std::vector<int> next(ids.begin() + 1, ids.end());
        std::vector<T> weights(static_cast<size_t>(rows), T(0));
        for (size_t i = sample.prefix.size() - 1; i < static_cast<size_t>(rows); ++i) weights[i] = T(1);
        return masked_cross_entropy(pred_rows, next, weights);
    }

    // Teacher-forced accuracy over target positions.
    double sample_accuracy(const ConversationSample& sample) const {
        NoGradGuard ng;
        std::vector<int> ids = sample.prefix;
        ids.insert(ids.end(), sample.target.begin(), sample.target.end());
        const Tensor<T> lg = logits(ids);
        int correct = 0, counted = 0;
        for (size_t p = sample.prefix.size() - 1; p + 1 < ids.size(); ++p) {
            const T* row = lg.ptr() + static_cast<int64_t>(p) * total_vocab;
            int best = 0;
            for (int j = 1; j < total_vocab; ++j) {
                if (row[j] > row[best]) best = j;
            }
            ++counted;
            if (best == ids[p + 1]) ++correct;
        }
        return counted == 0 ? 0.0 : static_cast<double>(correct) / counted;
    }
};

struct GenerateResult {
    std::vector<int> tokens;  // codebook indices, stop symbol excluded
    std::vector<int> raw_ids;
    bool stopped = false;     // false means truncated at max_len
};

// Autoregressive sampling from the prior. Only visual ids and the stop symbol
// are reachable; temperature 0 means greedy argmax (seed-independent).
template <typename T>
GenerateResult generate(const PriorModel<T>& m, const std::vector<int>& prefix, double temperature, int max_len,
                        uint64_t seed) {
    if (temperature < 0.0) throw ContractError("generate: temperature must be >= 0");
    if (max_len < 1) throw ContractError("generate: max_len must be positive");
    if (static_cast<int>(prefix.size()) + max_len + 1 > m.cfg.context) {
        throw ContractError("generate: prefix plus max_len exceeds context window");
    }
    NoGradGuard ng;
    Rng rng(Rng::derive(seed, 0x93E2));
    GenerateResult res;
    std::vector<int> ids = prefix;
    for (int produced = 0; produced < max_len + 1; ++produced) {
        const Tensor<T> lg = m.logits(ids);
        const T* row = lg.ptr() + static_cast<int64_t>(ids.size() - 1) * m.total_vocab;
        std::vector<double> masked(static_cast<size_t>(m.total_vocab), -1e30);
        masked[PriorModel<T>::kStop] = static_cast<double>(row[PriorModel<T>::kStop]);
        for (int j = m.visual_offset(); j < m.total_vocab; ++j) masked[static_cast<size_t>(j)] = static_cast<double>(row[j]);

        int chosen;
        if (temperature == 0.0) {
            chosen = 0;
            for (int j = 1; j < m.total_vocab; ++j) {
                if (masked[static_cast<size_t>(j)] > masked[static_cast<size_t>(chosen)]) chosen = j;
            }
        } else {
            double mx = masked[0];
            for (double v : masked) mx = std::max(mx, v);
            std::vector<double> p(masked.size());
            double sum = 0;
            for (size_t j = 0; j < masked.size(); ++j) {
                p[j] = std::exp((masked[j] - mx) / temperature);
                sum += p[j];
            }
            const double u = rng.uniform01() * sum;
            double acc = 0;
            chosen = static_cast<int>(masked.size()) - 1;
            for (size_t j = 0; j < p.size(); ++j) {
                acc += p[j];
                if (u < acc) {
                    chosen = static_cast<int>(j);
                    break;
                }
            }
        }

        ids.push_back(chosen);
        if (chosen == PriorModel<T>::kStop) {
            res.stopped = true;
            break;
        }
        res.tokens.push_back(m.codebook_index(chosen));
        if (static_cast<int>(res.tokens.size()) >= max_len) break;
    }
    res.raw_ids = ids;
    return res;
}

// One Adam step over a batch of samples drawn uniformly from the corpus.
template <typename T>
class PriorTrainer {
public:
    PriorTrainer(PriorModel<T>& model, const TrainConfig& tc)
        : model_(model),
          tc_(tc),
          opt_(tc.adam_beta1, tc.adam_beta2, tc.adam_eps),
          rng_(Rng::derive(model.cfg.seed, 0x9711)),
          params_(model.params()) {}

    double step(const std::vector<ConversationSample>& corpus) {
        if (corpus.empty()) throw ContractError("prior train: empty corpus");
        zero_grads(params_);
        std::vector<Tensor<T>> losses;
        for (int b = 0; b < tc_.batch_size; ++b) {
            losses.push_back(model_.sample_loss(corpus[rng_.randint(corpus.size())]));
        }
        Tensor<T> total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
        total = scale(total, T(1) / static_cast<T>(losses.size()));
        backward(total);
        if (model_.cfg.freeze_visual_embed) {
            T* g = model_.embed.grad->data();
            const int64_t start = static_cast<int64_t>(model_.visual_offset()) * model_.cfg.dim;
            std::fill(g + start, g + model_.embed.numel(), T(0));
        }
        opt_.step(params_, cosine_lr(tc_.lr, step_, tc_.steps, tc_.warmup_frac));
        ++step_;
        return static_cast<double>(total.value());
    }

private:
    PriorModel<T>& model_;
    TrainConfig tc_;
    Adam<T> opt_;
    Rng rng_;
    ParamList<T> params_;
    int64_t step_ = 0;
};

template <typename T>
double train_prior(PriorModel<T>& model, const std::vector<ConversationSample>& corpus, const TrainConfig& tc) {
    PriorTrainer<T> trainer(model, tc);
    double last = 0;
    for (int s = 0; s < tc.steps; ++s) last = trainer.step(corpus);
    return last;
}

}  // namespace v2flow
