#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "v2flow/decoder.hpp"
#include "v2flow/optim.hpp"

namespace v2flow {

struct TrainStats {
    int64_t step = 0;
    double loss = 0.0;
    double fm = 0.0;
    double commit = 0.0;
    double lr = 0.0;
    double codebook_utilization = 0.0;
    double codebook_perplexity = 0.0;
};

// One optimizer step per call: flow-matching loss over a sampled batch,
// backward, Adam update, EMA codebook update, temperature anneal.
template <typename T>
class TokenizerTrainer {
public:
    TokenizerTrainer(TokenizerModel<T>& model, const TrainConfig& tc)
        : model_(model),
          tc_(tc),
          opt_(tc.adam_beta1, tc.adam_beta2, tc.adam_eps),
          rng_(Rng::derive(model.cfg.seed, 0x7124)),
          params_(model.params()) {}

    TrainStats step(const std::vector<Image>& corpus) {
        if (corpus.empty()) throw ContractError("train: empty corpus");
        zero_grads(params_);

        std::vector<Tensor<T>> losses;
        std::vector<T> v_rows;
        std::vector<int> assignments;
        TrainStats stats;
        for (int b = 0; b < tc_.batch_size; ++b) {
            const Image& img = corpus[rng_.randint(corpus.size())];
            const FlowDraws<T> draws = draw_flow_batch(model_, rng_);
            FmLossOut<T> out = fm_loss_single(model_, img, draws);
            stats.fm += out.fm;
            stats.commit += out.commit;
            v_rows.insert(v_rows.end(), out.v_values.begin(), out.v_values.end());
            assignments.insert(assignments.end(), out.assignments.begin(), out.assignments.end());
            losses.push_back(out.total);
        }
        Tensor<T> total = losses[0];
        for (size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
        total = scale(total, T(1) / static_cast<T>(losses.size()));
        stats.loss = static_cast<double>(total.value());
        stats.fm /= tc_.batch_size;
        stats.commit /= tc_.batch_size;

        backward(total);
        stats.lr = cosine_lr(tc_.lr, step_, tc_.steps, tc_.warmup_frac);
        opt_.step(params_, stats.lr);

        model_.codebook.ema_update(v_rows.data(), static_cast<int>(assignments.size()), assignments);
        const CodebookStats cs = model_.codebook.stats(assignments);
        stats.codebook_utilization = cs.utilization;
        stats.codebook_perplexity = cs.perplexity;

        model_.tau = std::max(model_.cfg.gumbel_tau_floor, model_.tau * model_.cfg.gumbel_tau_decay);
        ++step_;
        stats.step = step_;
        return stats;
    }

    int64_t steps_taken() const { return step_; }

private:
    TokenizerModel<T>& model_;
    TrainConfig tc_;
    Adam<T> opt_;
    Rng rng_;
    ParamList<T> params_;
    int64_t step_ = 0;
};

// Runs the configured number of steps, reporting through the optional callback.
template <typename T>
TrainStats train_tokenizer(TokenizerModel<T>& model, const std::vector<Image>& corpus, const TrainConfig& tc,
                           const std::function<void(const TrainStats&)>& report = nullptr) {
    TokenizerTrainer<T> trainer(model, tc);
    TrainStats last;
    for (int s = 0; s < tc.steps; ++s) {
        last = trainer.step(corpus);
        if (report) report(last);
    }
    return last;
}

}  // namespace v2flow
