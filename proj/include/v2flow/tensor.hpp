#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "v2flow/errors.hpp"

namespace v2flow {

template <typename T>
struct Tensor;

// One recorded operation. Parents are value copies sharing the underlying
// storage; the backward rule reads the output's grad buffer and accumulates
// into the parents' grad buffers.
template <typename T>
struct Node {
    std::vector<Tensor<T>> parents;
    std::function<void(const Tensor<T>& out)> backward;
};

namespace detail {
inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording for the enclosing scope (pure evaluation).
struct NoGradGuard {
    NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// Dense row-major tensor. Value-semantic: copies share storage. Gradients are
// allocated lazily when requires_grad is set. Storage T is float for training
// and double for gradient checking.
template <typename T>
struct Tensor {
    std::vector<int> dims;
    std::shared_ptr<std::vector<T>> data;
    std::shared_ptr<std::vector<T>> grad;
    std::shared_ptr<Node<T>> node;
    bool requires_grad = false;

    Tensor() = default;

    explicit Tensor(std::vector<int> d, bool rg = false) : dims(std::move(d)) {
        for (int v : dims) {
            if (v <= 0) throw ShapeError("tensor dims must be positive");
        }
        data = std::make_shared<std::vector<T>>(static_cast<size_t>(numel()), T(0));
        set_requires_grad(rg);
    }

    static Tensor zeros(std::vector<int> d, bool rg = false) { return Tensor(std::move(d), rg); }

    static Tensor full(std::vector<int> d, T value, bool rg = false) {
        Tensor t(std::move(d), rg);
        for (auto& v : *t.data) v = value;
        return t;
    }

    static Tensor from(std::vector<int> d, std::vector<T> values, bool rg = false) {
        Tensor t(std::move(d), rg);
        if (values.size() != t.data->size()) throw ShapeError("tensor init size mismatch");
        *t.data = std::move(values);
        return t;
    }

    static Tensor scalar(T value, bool rg = false) { return full({1}, value, rg); }

    void set_requires_grad(bool rg) {
        requires_grad = rg;
        if (requires_grad && !grad) {
            grad = std::make_shared<std::vector<T>>(data->size(), T(0));
        }
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int v : dims) n *= v;
        return n;
    }

    int rank() const { return static_cast<int>(dims.size()); }

    // 2-D view helpers: rows over the last axis.
    int last_dim() const { return dims.empty() ? 1 : dims.back(); }
    int64_t n_rows() const { return numel() / last_dim(); }

    T* ptr() { return data->data(); }
    const T* ptr() const { return data->data(); }
    T* gptr() { return grad ? grad->data() : nullptr; }
    const T* gptr() const { return grad ? grad->data() : nullptr; }

    T value() const {
        if (numel() != 1) throw ContractError("value(): tensor is not a scalar");
        return (*data)[0];
    }

    void zero_grad() {
        if (grad) std::fill(grad->begin(), grad->end(), T(0));
    }

    bool is_leaf() const { return requires_grad && !node; }
};

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
    for (const T v : *t.data) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw NumericError(std::string(op) + ": non-finite value in output");
        }
    }
}

template <typename T>
std::shared_ptr<Node<T>> make_node(std::vector<Tensor<T>> parents,
                                   std::function<void(const Tensor<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->parents = std::move(parents);
    n->backward = std::move(backward);
    return n;
}

// Reverse-mode sweep from a scalar loss. Interior grads are recomputed from
// scratch on every call; leaf grads accumulate across calls until zeroed.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
    if (!loss.requires_grad) throw ContractError("backward: loss does not require grad");

    if (!loss.node) {
        (*loss.grad)[0] += T(1);
        return;
    }

    // Iterative post-order DFS over the recorded DAG; each node visited once.
    std::vector<Tensor<T>> order;
    std::unordered_set<const Node<T>*> seen;
    struct Frame {
        Tensor<T> t;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss, 0});
    seen.insert(loss.node.get());
    while (!stack.empty()) {
        const size_t fi = stack.size() - 1;
        bool descended = false;
        while (stack[fi].next_parent < stack[fi].t.node->parents.size()) {
            const size_t pi = stack[fi].next_parent++;
            Tensor<T> p = stack[fi].t.node->parents[pi];
            if (p.node && !seen.count(p.node.get())) {
                seen.insert(p.node.get());
                stack.push_back({std::move(p), 0});
                descended = true;
                break;
            }
        }
        if (!descended) {
            order.push_back(stack[fi].t);
            stack.pop_back();
        }
    }

    for (auto& t : order) t.zero_grad();
    (*loss.grad)[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if (it->node->backward) it->node->backward(*it);
    }
}

}  // namespace v2flow
