#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "reflecta/nnet/network.hpp"

namespace reflecta::nnet {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::size_t kinks = 0;  // parameters skipped because a max selection flipped within +-h
};

namespace detail {

// Hash of every maxout/maxpool winner in a forward pass.
inline std::uint64_t selection_fingerprint(const Network<double>& net, const Tensor<double>& x, std::uint64_t seed)
{
    Rng rng{seed};
    Network<double>::Cache cache;
    net.forward_logits(x, Mode::Train, &rng, &cache);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto eat = [&](const std::vector<Network<double>::LayerCache>& layers) {
        for (const auto& l : layers)
            for (auto v : l.argmax)
                h = (h ^ v) * 0x100000001b3ULL;
    };
    for (const auto& p : cache.pathways)
        eat(p);
    eat(cache.head);
    return h;
}

} // namespace detail

/// Central differences against backprop, in double precision. Dropout masks
/// are frozen by reseeding the generator for every evaluation. Up to
/// `per_block` weights and all biases of every layer are checked.
/// Relative error is |a - n| / max(|a|, |n|, 1e-7). A parameter whose +-h
/// perturbation changes any max selection sits on a kink, where central
/// differences do not estimate the derivative; it is counted in `kinks`
/// instead of being compared.
inline GradCheckResult gradient_check(Network<double> net, const Tensor<double>& x, const std::vector<int>& labels,
                                      double l1, double l2, std::uint64_t seed, std::size_t per_block = 40,
                                      double h = 1e-5, Scope scope = Scope::All)
{
    auto loss = [&](const Network<double>& n) {
        Rng rng{seed};
        ParamSet<double> g;
        return n.loss_and_gradients(x, labels, l1, l2, g, Mode::Train, &rng, scope);
    };
    ParamSet<double> analytic;
    {
        Rng rng{seed};
        net.loss_and_gradients(x, labels, l1, l2, analytic, Mode::Train, &rng, scope);
    }
    GradCheckResult res;
    const std::uint64_t base = detail::selection_fingerprint(net, x, seed);
    Rng pick{seed ^ 0x9e3779b97f4a7c15ULL};
    auto check = [&](double& param, double a) {
        const double saved = param;
        param = saved + h;
        const double up = loss(net);
        const bool kink_up = detail::selection_fingerprint(net, x, seed) != base;
        param = saved - h;
        const double down = loss(net);
        const bool kink_down = detail::selection_fingerprint(net, x, seed) != base;
        param = saved;
        if (kink_up || kink_down) {
            ++res.kinks;
            return;
        }
        const double numeric = (up - down) / (2 * h);
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-7});
        res.max_rel_error = std::max(res.max_rel_error, rel);
        ++res.checked;
    };
    const std::size_t first = scope == Scope::FinalLayer ? net.params().size() - 1 : 0;
    for (std::size_t i = first; i < net.params().size(); ++i) {
        auto& p = net.params()[i];
        std::vector<std::size_t> idx(p.w.size());
        std::iota(idx.begin(), idx.end(), std::size_t(0));
        for (std::size_t k = 0; k < std::min(per_block, idx.size()); ++k) {
            std::swap(idx[k], idx[k + uniform_index(pick, idx.size() - k)]);
            check(p.w.data[idx[k]], analytic[i].w.data[idx[k]]);
        }
        for (std::size_t k = 0; k < p.b.size(); ++k)
            check(p.b[k], analytic[i].b[k]);
    }
    return res;
}

} // namespace reflecta::nnet
