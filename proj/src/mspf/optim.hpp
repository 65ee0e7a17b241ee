#pragma once

// Training arithmetic: Charbonnier loss, the AdamW parameter update with
// decoupled weight decay, and the hold-then-linear-decay learning-rate
// schedule. Optimizer moments are kept per parameter and updated in double.

#include "model.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace mspf {

// mean(sqrt((pred - gt)^2 + eps^2)). For pred == gt every element equals
// eps exactly: eps*eps is a rounded square whose correctly rounded sqrt
// returns the representable eps again.
template <typename T>
Tensor<T> charbonnier(const Tensor<T>& pred, const Tensor<T>& gt, double eps = 1e-3) {
    if (!(eps > 0)) throw ContractError("charbonnier: eps must be positive");
    if (pred.shape() != gt.shape()) throw ShapeError("charbonnier: shapes must match");
    const T e = T(eps);
    return mean(sqrt(add(square(sub(pred, gt)), e * e)));
}

struct Schedule {
    double lr0 = 7e-4;
    int hold_epochs = 250;
    int total_epochs = 600;

    void validate() const {
        if (!(lr0 > 0)) throw ConfigError("schedule: base learning rate must be positive");
        if (hold_epochs < 0) throw ConfigError("schedule: hold epochs must be >= 0");
        if (total_epochs <= hold_epochs)
            throw ConfigError("schedule: total epochs must exceed hold epochs");
    }
};

// Constant lr0 through the hold phase, then linear decay that reaches
// exactly zero at total_epochs.
inline double lr_at(int epoch, const Schedule& s) {
    s.validate();
    if (epoch < 0 || epoch > s.total_epochs)
        throw DomainError("lr_at: epoch outside [0, total_epochs]");
    if (epoch < s.hold_epochs) return s.lr0;
    const double frac = double(epoch - s.hold_epochs) / double(s.total_epochs - s.hold_epochs);
    return s.lr0 * (1.0 - frac);
}

struct AdamWHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 5e-4;

    void validate() const {
        if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
            throw ConfigError("adamw: betas must lie in [0,1)");
        if (!(eps > 0)) throw ConfigError("adamw: eps must be positive");
        if (weight_decay < 0) throw ConfigError("adamw: weight decay must be >= 0");
    }
};

template <typename T>
struct OptimState {
    std::vector<std::string> names;
    std::vector<Tensor<T>> m, v;
    uint64_t t = 0;
};

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> collect_params(Model<T>& model) {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit_params(model, [&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
}

template <typename T>
void mark_trainable(Model<T>& model) {
    visit_params(model, [](const std::string&, Tensor<T>& t) { t.set_requires_grad(true); });
}

template <typename T>
OptimState<T> init_optim(Model<T>& model) {
    OptimState<T> st;
    for (auto& [name, p] : collect_params(model)) {
        st.names.push_back(name);
        st.m.push_back(Tensor<T>::zeros(p.shape()));
        st.v.push_back(Tensor<T>::zeros(p.shape()));
    }
    return st;
}

// Global L2 norm over all parameter gradients. Parameters that were never
// touched by the backward pass contribute nothing.
template <typename T>
double grad_global_norm(Model<T>& model) {
    double acc = 0.0;
    visit_params(model, [&](const std::string&, Tensor<T>& p) {
        if (!p.has_grad()) return;
        for (const T g : p.grad()) acc += double(g) * double(g);
    });
    return std::sqrt(acc);
}

// One decoupled-weight-decay Adam step over every model parameter.
// clip_norm > 0 rescales the global gradient norm down to clip_norm first.
template <typename T>
void adamw_step(Model<T>& model, OptimState<T>& st, const AdamWHyper& hp, double lr,
                double clip_norm = 0.0) {
    hp.validate();
    if (!(lr >= 0)) throw ContractError("adamw_step: learning rate must be >= 0");
    auto params = collect_params(model);
    if (params.size() != st.m.size())
        throw ContractError("adamw_step: optimizer state does not match the model");

    double scale = 1.0;
    if (clip_norm > 0.0) {
        const double norm = grad_global_norm(model);
        if (norm > clip_norm) scale = clip_norm / norm;
    }

    st.t += 1;
    const double bc1 = 1.0 - std::pow(hp.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(hp.beta2, double(st.t));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor<T>& p = params[i].second;
        if (!p.has_grad())
            throw TrackingError("adamw_step: no gradient for parameter " + params[i].first);
        if (p.numel() != st.m[i].numel())
            throw ContractError("adamw_step: state shape mismatch at " + params[i].first);
        const std::vector<T>& g = p.grad();
        T* pv = p.data();
        T* mv = st.m[i].data();
        T* vv = st.v[i].data();
        for (int64_t k = 0; k < p.numel(); ++k) {
            const double gk = double(g[size_t(k)]) * scale;
            if (!std::isfinite(gk))
                throw NumericError("adamw_step: non-finite gradient in parameter " +
                                   params[i].first);
            const double m = hp.beta1 * double(mv[k]) + (1.0 - hp.beta1) * gk;
            const double v = hp.beta2 * double(vv[k]) + (1.0 - hp.beta2) * gk * gk;
            mv[k] = T(m);
            vv[k] = T(v);
            const double mhat = m / bc1;
            const double vhat = v / bc2;
            const double step = lr * (mhat / (std::sqrt(vhat) + hp.eps) +
                                      hp.weight_decay * double(pv[k]));
            pv[k] = T(double(pv[k]) - step);
        }
    }
}

}  // namespace mspf
