#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "arlab/autodiff.hpp"
#include "arlab/tensor.hpp"

namespace arlab {

struct Param {
    Tensor value;
    bool wd_exempt = false;  // bias and generative-head parameters skip weight decay
};

// Named trainable parameters in a stable insertion order. The order defines
// checkpoint layout and every deterministic reduction over parameters.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor init, bool wd_exempt = false) {
        if (map_.count(name)) throw std::runtime_error("duplicate parameter '" + name + "'");
        order_.push_back(name);
        auto& p = map_[name];
        p.value = std::move(init);
        p.wd_exempt = wd_exempt;
        return p.value;
    }

    bool contains(const std::string& name) const { return map_.count(name) != 0; }

    Param& param(const std::string& name) {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::runtime_error("unknown parameter '" + name + "'");
        return it->second;
    }
    const Param& param(const std::string& name) const {
        auto it = map_.find(name);
        if (it == map_.end()) throw std::runtime_error("unknown parameter '" + name + "'");
        return it->second;
    }

    Tensor& value(const std::string& name) { return param(name).value; }
    const Tensor& value(const std::string& name) const { return param(name).value; }

    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (auto& name : order_) n += param(name).value.numel();
        return n;
    }

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Param> map_;
};

// If the global L2 norm of all gradients exceeds max_norm, scales every
// gradient by max_norm / norm. Returns the pre-clip norm.
inline double clip_global_norm(NamedTensors& grads, double max_norm) {
    if (max_norm <= 0) throw std::runtime_error("clip_global_norm: max_norm must be positive");
    double sq = 0;
    for (auto& [name, g] : grads)
        for (int64_t i = 0; i < g.numel(); ++i) sq += g[i] * g[i];
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double f = max_norm / norm;
        for (auto& [name, g] : grads) g.scale_inplace(f);
    }
    return norm;
}

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.03;
};

// Adam with decoupled weight decay and bias correction. Weight decay is
// applied directly to the parameter (independent of the gradient) and
// skipped for wd-exempt parameters.
class AdamW {
public:
    explicit AdamW(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    int64_t step_count() const { return step_; }

    // lr_scale multiplies the base learning rate (warmup schedules).
    void step(ParamStore& params, const NamedTensors& grads, double lr_scale = 1.0) {
        ++step_;
        const double lr = cfg_.lr * lr_scale;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
        for (auto& name : params.names()) {
            auto it = grads.find(name);
            if (it == grads.end()) continue;
            const Tensor& g = it->second;
            Param& p = params.param(name);
            if (!p.value.same_shape(g))
                throw ShapeError("adamw_step: grad shape " + shape_str(g.shape()) +
                                 " vs param '" + name + "' " + shape_str(p.value.shape()));
            if (!g.all_finite()) throw NonFiniteError("adamw_step: non-finite gradient for '" + name + "'");
            Tensor& m = moment(m_, name, p.value.shape());
            Tensor& v = moment(v_, name, p.value.shape());
            if (!p.wd_exempt && cfg_.weight_decay != 0)
                p.value.scale_inplace(1.0 - lr * cfg_.weight_decay);
            for (int64_t i = 0; i < g.numel(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                p.value[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    Tensor& moment(std::map<std::string, Tensor>& store, const std::string& name, const Shape& shape) {
        auto it = store.find(name);
        if (it == store.end()) it = store.emplace(name, Tensor(shape)).first;
        return it->second;
    }

    AdamConfig cfg_;
    int64_t step_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// Shadow copy of the parameters, updated as shadow <- d*shadow + (1-d)*p.
class Ema {
public:
    Ema(const ParamStore& params, double decay) : decay_(decay) {
        if (!(decay > 0.0 && decay < 1.0)) throw std::runtime_error("ema decay must be in (0,1)");
        for (auto& name : params.names())
            shadow_.add(name, params.param(name).value, params.param(name).wd_exempt);
    }

    double decay() const { return decay_; }

    void update(const ParamStore& params) {
        for (auto& name : params.names()) {
            const Tensor& p = params.param(name).value;
            Tensor& s = shadow_.value(name);
            if (!s.same_shape(p))
                throw ShapeError("ema_update: shape mismatch for '" + name + "'");
            for (int64_t i = 0; i < p.numel(); ++i)
                s[i] = decay_ * s[i] + (1.0 - decay_) * p[i];
        }
    }

    const ParamStore& shadow() const { return shadow_; }
    ParamStore& shadow() { return shadow_; }

private:
    double decay_;
    ParamStore shadow_;
};

}  // namespace arlab
