#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "v2flow/nn.hpp"
#include "v2flow/tensor.hpp"

namespace v2flow {

// Linear warm-up followed by cosine decay to zero.
inline double cosine_lr(double base_lr, int64_t step, int64_t total_steps, double warmup_frac) {
    if (total_steps <= 0) return base_lr;
    const int64_t warmup = std::max<int64_t>(1, static_cast<int64_t>(warmup_frac * static_cast<double>(total_steps)));
    if (step < warmup) return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(std::max<int64_t>(1, total_steps - warmup));
    return base_lr * 0.5 * (1.0 + std::cos(3.141592653589793 * std::min(1.0, progress)));
}

// Adam without weight decay. Slot order is the parameter list order, which is
// fixed per model, so updates are reproducible.
template <typename T>
class Adam {
public:
    Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const ParamList<T>& params, double lr) {
        if (slots_.size() != params.size()) {
            slots_.clear();
            slots_.resize(params.size());
            for (size_t i = 0; i < params.size(); ++i) {
                slots_[i].m.assign(params[i].second->data->size(), T(0));
                slots_[i].v.assign(params[i].second->data->size(), T(0));
            }
        }
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (size_t i = 0; i < params.size(); ++i) {
            Tensor<T>& p = *params[i].second;
            if (!p.grad) continue;
            const T* g = p.grad->data();
            T* w = p.data->data();
            T* m = slots_[i].m.data();
            T* v = slots_[i].v.data();
            const size_t n = p.data->size();
            for (size_t j = 0; j < n; ++j) {
                m[j] = static_cast<T>(beta1_ * m[j] + (1.0 - beta1_) * g[j]);
                v[j] = static_cast<T>(beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j]);
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

    int64_t steps_taken() const { return t_; }

private:
    struct Slot {
        std::vector<T> m, v;
    };
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
    std::vector<Slot> slots_;
};

template <typename T>
void zero_grads(const ParamList<T>& params) {
    for (const auto& [name, p] : params) p->zero_grad();
}

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// f must be deterministic; it is re-evaluated 2 times per coordinate.
template <typename T>
double grad_check(const std::function<Tensor<T>()>& f, const std::vector<Tensor<T>*>& leaves, T h) {
    for (Tensor<T>* leaf : leaves) leaf->zero_grad();
    Tensor<T> loss = f();
    backward(loss);
    std::vector<std::vector<T>> analytic;
    analytic.reserve(leaves.size());
    for (Tensor<T>* leaf : leaves) analytic.push_back(*leaf->grad);

    double max_err = 0.0;
    for (size_t li = 0; li < leaves.size(); ++li) {
        Tensor<T>& x = *leaves[li];
        for (size_t j = 0; j < x.data->size(); ++j) {
            const T orig = (*x.data)[j];
            (*x.data)[j] = orig + h;
            double lp, lm;
            {
                NoGradGuard ng;
                lp = static_cast<double>(f().value());
                (*x.data)[j] = orig - h;
                lm = static_cast<double>(f().value());
            }
            (*x.data)[j] = orig;
            const double fd = (lp - lm) / (2.0 * static_cast<double>(h));
            const double an = static_cast<double>(analytic[li][j]);
            const double err = std::abs(an - fd) / std::max(1.0, std::abs(an));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

template <typename T>
double grad_check(const std::function<Tensor<T>()>& f, Tensor<T>& x, T h) {
    return grad_check<T>(f, std::vector<Tensor<T>*>{&x}, h);
}

}  // namespace v2flow
