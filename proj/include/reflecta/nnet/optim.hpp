#pragma once

#include <cmath>
#include <string>

#include "reflecta/error.hpp"
#include "reflecta/nnet/network.hpp"

namespace reflecta::nnet {

namespace detail {

template <class Real, class F>
void for_each_param(ParamSet<Real>& params, const ParamSet<Real>& grads, ParamSet<Real>& state, Scope scope, F&& f)
{
    if (grads.size() != params.size() || state.size() != params.size())
        throw ShapeError("optimizer: parameter and gradient sets differ");
    const std::size_t first = scope == Scope::FinalLayer ? params.size() - 1 : 0;
    for (std::size_t i = first; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.w.same_shape(grads[i].w) || p.b.size() != grads[i].b.size())
            throw ShapeError("optimizer: gradient shape differs from parameter shape");
        for (std::size_t k = 0; k < p.w.size(); ++k)
            f(p.w.data[k], grads[i].w.data[k], state[i].w.data[k]);
        for (std::size_t k = 0; k < p.b.size(); ++k)
            f(p.b[k], grads[i].b[k], state[i].b[k]);
    }
}

} // namespace detail

/// v <- mu v - lr g;  w <- w + v.
template <class Real>
class SgdMomentum {
public:
    explicit SgdMomentum(const ParamSet<Real>& params, double mu = 0.6) : mu_(mu), velocity_(zeros_like(params)) {}

    void step(ParamSet<Real>& params, const ParamSet<Real>& grads, double lr, Scope scope = Scope::All)
    {
        const Real mu = Real(mu_), rate = Real(lr);
        detail::for_each_param(params, grads, velocity_, scope, [&](Real& w, Real g, Real& v) {
            v = mu * v - rate * g;
            w += v;
        });
    }

    const ParamSet<Real>& velocity() const { return velocity_; }

private:
    double mu_;
    ParamSet<Real> velocity_;
};

/// s <- decay s + (1 - decay) g^2;  w <- w - lr g / sqrt(s + eps).
template <class Real>
class RmsProp {
public:
    explicit RmsProp(const ParamSet<Real>& params, double decay = 0.9, double eps = 1e-6)
        : decay_(decay), eps_(eps), mean_square_(zeros_like(params))
    {
    }

    void step(ParamSet<Real>& params, const ParamSet<Real>& grads, double lr, Scope scope = Scope::All)
    {
        const Real d = Real(decay_), e = Real(eps_), rate = Real(lr);
        detail::for_each_param(params, grads, mean_square_, scope, [&](Real& w, Real g, Real& s) {
            s = d * s + (Real(1) - d) * g * g;
            w -= rate * g / std::sqrt(s + e);
        });
    }

private:
    double decay_, eps_;
    ParamSet<Real> mean_square_;
};

enum class OptimizerKind { SgdMomentum, RmsProp };

inline std::string to_string(OptimizerKind k) { return k == OptimizerKind::SgdMomentum ? "sgd_momentum" : "rmsprop"; }
inline OptimizerKind parse_optimizer(const std::string& s)
{
    if (s == "sgd_momentum" || s == "sgd")
        return OptimizerKind::SgdMomentum;
    if (s == "rmsprop")
        return OptimizerKind::RmsProp;
    throw FormatError("unknown optimizer '" + s + "'");
}

/// Either optimizer behind one interface.
template <class Real>
class Optimizer {
public:
    Optimizer(OptimizerKind kind, const ParamSet<Real>& params, double mu, double decay, double eps)
        : kind_(kind), sgd_(params, mu), rms_(params, decay, eps)
    {
    }

    void step(ParamSet<Real>& params, const ParamSet<Real>& grads, double lr, Scope scope)
    {
        if (kind_ == OptimizerKind::SgdMomentum)
            sgd_.step(params, grads, lr, scope);
        else
            rms_.step(params, grads, lr, scope);
    }

private:
    OptimizerKind kind_;
    SgdMomentum<Real> sgd_;
    RmsProp<Real> rms_;
};

} // namespace reflecta::nnet
