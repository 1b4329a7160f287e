#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cseg/core/tensor.hpp"
#include "cseg/nn/blocks.hpp"

namespace cseg {

/// Polynomial decay schedule lr0 * (1 - e / total_epochs)^0.9, evaluated at
/// integer epochs e in [0, total_epochs].
inline double poly_lr(std::size_t epoch, double lr0, std::size_t total_epochs) {
    check(total_epochs > 0, "poly_lr: schedule length must be positive");
    check(epoch <= total_epochs, "poly_lr: epoch " + std::to_string(epoch) +
                                     " lies beyond the schedule of " +
                                     std::to_string(total_epochs));
    return lr0 * std::pow(1.0 - double(epoch) / double(total_epochs), 0.9);
}

/// Adam accumulators for one parameter list; moment vectors mirror the
/// parameter shapes and the step counter drives bias correction.
template <typename S>
struct OptimState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<S>> m, v;

    static OptimState attach(const ParamList<S>& params) {
        OptimState st;
        st.m.reserve(params.size());
        st.v.reserve(params.size());
        for (const auto& p : params) {
            st.m.emplace_back(p.tensor.numel(), S(0));
            st.v.emplace_back(p.tensor.numel(), S(0));
        }
        return st;
    }
};

template <typename S>
void zero_grads(ParamList<S>& params) {
    for (auto& p : params) p.tensor.zero_grad();
}

/// One Adam update with bias correction at the given learning rate.
/// Parameters whose gradient buffer is absent are treated as having zero
/// gradient (their moments decay; a fresh state leaves them untouched).
template <typename S>
void adam_step(ParamList<S>& params, OptimState<S>& state, double lr) {
    check(state.m.size() == params.size() && state.v.size() == params.size(),
          "adam: optimizer state does not match the parameter list");
    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, double(state.step));

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        const std::size_t n = p.tensor.numel();
        check(state.m[i].size() == n, "adam: moment shape does not match parameter " + p.name);
        const bool has_grad = p.tensor.has_grad();
        const S* g = has_grad ? p.tensor.grad().data() : nullptr;
        S* w = p.tensor.data();
        S* m = state.m[i].data();
        S* v = state.v[i].data();
        for (std::size_t j = 0; j < n; ++j) {
            const double gj = has_grad ? double(g[j]) : 0.0;
            const double mj = state.beta1 * double(m[j]) + (1.0 - state.beta1) * gj;
            const double vj = state.beta2 * double(v[j]) + (1.0 - state.beta2) * gj * gj;
            m[j] = static_cast<S>(mj);
            v[j] = static_cast<S>(vj);
            const double mhat = mj / bc1;
            const double vhat = vj / bc2;
            w[j] = static_cast<S>(double(w[j]) - lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

}  // namespace cseg
