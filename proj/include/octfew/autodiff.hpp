#pragma once

#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "octfew/tensor.hpp"

namespace octfew::ad {

// A value node in the dynamic computation graph. Gradients accumulate
// into `grad` during Tape::backward.
struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::string name;  // non-empty for named parameters

    void ensure_grad() {
        if (!grad.same_shape(value)) grad = Tensor::zeros(value.shape());
    }
    void zero_grad() {
        if (grad.same_shape(value))
            grad.fill(0.0);
        else
            grad = Tensor::zeros(value.shape());
    }
};

using Var = std::shared_ptr<Node>;

inline Var make_var(Tensor value, bool requires_grad = false, std::string name = "") {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    n->name = std::move(name);
    return n;
}

// Constant view of another node's value (gradient stops here).
inline Var detach(const Var& v) { return make_var(v->value, false); }

// Records one forward pass; backward() replays the registered closures in
// reverse. A Tape is built per training step and then discarded, while
// parameter nodes persist across tapes.
class Tape {
public:
    void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }

    // Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be scalar.
    void backward(const Var& loss);

    size_t size() const { return ops_.size(); }

private:
    std::vector<std::function<void()>> ops_;
};

// ---------------------------------------------------------------------------
// Op library. Every op returns a fresh Var and registers its backward
// closure on the tape. Shapes are validated eagerly with loud errors.
// ---------------------------------------------------------------------------

// x:(N,C,H,W) w:(OC,C,KH,KW) b:(OC) or null; zero padding.
Var conv2d(Tape& t, const Var& x, const Var& w, const Var& b, int stride, int pad);
// Asymmetric zero padding (pad_h rows, pad_w columns).
Var conv2d(Tape& t, const Var& x, const Var& w, const Var& b, int stride, int pad_h, int pad_w);

// Reflection padding of p pixels on all spatial sides.
Var pad_reflect(Tape& t, const Var& x, int p);

// x:(N,D) w:(O,D) b:(O) or null -> (N,O)
Var linear(Tape& t, const Var& x, const Var& w, const Var& b);

Var relu(Tape& t, const Var& x);
Var leaky_relu(Tape& t, const Var& x, double slope);
Var tanh_op(Tape& t, const Var& x);
Var sigmoid(Tape& t, const Var& x);

Var add(Tape& t, const Var& a, const Var& b);       // same shape
Var sub(Tape& t, const Var& a, const Var& b);       // same shape
Var mul(Tape& t, const Var& a, const Var& b);       // same shape, elementwise
Var scale(Tape& t, const Var& a, double k);
Var add_const(Tape& t, const Var& a, double k);

// x:(N,C,H,W) * s, s broadcast over spatial dims; s is (C) or (N,C).
Var mul_channel(Tape& t, const Var& x, const Var& s);
// x:(N,C,H,W) + b, b is (C) or (N,C), broadcast over spatial dims.
Var add_channel(Tape& t, const Var& x, const Var& b);
// x:(N,C,H,W) * m, m:(N,1,H,W) broadcast over channels.
Var mul_spatial(Tape& t, const Var& x, const Var& m);

// Per-(n,c) normalization over H*W (no affine).
Var instance_norm(Tape& t, const Var& x, double eps = 1e-5);
// Per-n normalization over C*H*W (no affine).
Var layer_norm(Tape& t, const Var& x, double eps = 1e-5);

Var global_avg_pool(Tape& t, const Var& x);  // (N,C,H,W) -> (N,C)
Var global_max_pool(Tape& t, const Var& x);  // (N,C,H,W) -> (N,C)

Var maxpool2d(Tape& t, const Var& x, int k, int stride, int pad);
Var avgpool2d(Tape& t, const Var& x, int k, int stride, int pad);

Var upsample_nearest2(Tape& t, const Var& x);

Var concat_channels(Tape& t, const std::vector<Var>& xs);

Var channel_mean(Tape& t, const Var& x);  // (N,C,H,W) -> (N,1,H,W)
Var channel_max(Tape& t, const Var& x);   // (N,C,H,W) -> (N,1,H,W)
Var sum_channels(Tape& t, const Var& x);  // (N,C,H,W) -> (N,1,H,W), plain sum

Var reshape(Tape& t, const Var& x, std::vector<int64_t> shape);

Var mean_all(Tape& t, const Var& x);  // scalar (shape {1})

// mean((x - target)^2) against a constant target value.
Var mse_to(Tape& t, const Var& x, double target);
// mean(|a - b|)
Var l1_diff(Tape& t, const Var& a, const Var& b);
// mean BCE-with-logits against a constant target in {0,1}.
Var bce_with_logits_to(Tape& t, const Var& logits, double target);

// logits:(N,K), labels in 0..K-1 -> scalar mean cross entropy.
Var softmax_cross_entropy(Tape& t, const Var& logits, const std::vector<int>& labels);

// Inference helper (no tape): row-wise softmax of (N,K).
Tensor softmax_rows(const Tensor& logits);

// ---------------------------------------------------------------------------
// Parameters and optimizer
// ---------------------------------------------------------------------------

// Named parameter registry. std::map keeps iteration deterministic.
class ParamStore {
public:
    Var create(const std::string& name, Tensor init) {
        if (params_.count(name)) throw std::invalid_argument("duplicate parameter: " + name);
        auto v = make_var(std::move(init), true, name);
        params_[name] = v;
        return v;
    }
    Var get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("no parameter named " + name);
        return it->second;
    }
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    const std::map<std::string, Var>& all() const { return params_; }
    void zero_grads() {
        for (auto& [n, v] : params_) v->zero_grad();
    }
    int64_t total_size() const {
        int64_t n = 0;
        for (const auto& [k, v] : params_) n += v->value.numel();
        return n;
    }

private:
    std::map<std::string, Var> params_;
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    // One update over all parameters in `ps` except those whose name has a
    // prefix in `frozen_prefixes`. Decoupled weight decay.
    void step(ParamStore& ps, const std::set<std::string>& frozen_prefixes = {});

    const AdamConfig& config() const { return cfg_; }

private:
    static bool is_frozen(const std::string& name, const std::set<std::string>& prefixes);
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> state_;  // name -> (m, v)
};

}  // namespace octfew::ad
