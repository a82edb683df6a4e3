#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "treemtl/layers.hpp"

namespace treemtl {

struct AdamConfig {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Per-parameter moments. `steps` counts this parameter's own updates, so a
/// frozen parameter's bias correction does not advance.
template <class T>
struct AdamSlot {
    std::vector<T> m;
    std::vector<T> v;
    std::uint64_t steps = 0;

    friend bool operator==(const AdamSlot&, const AdamSlot&) = default;
};

/// Adam over a fixed, ordered parameter list.
template <class T>
class Adam {
public:
    Adam() = default;
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    void resize(const std::vector<Parameter<T>*>& params) {
        slots_.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (slots_[i].m.size() != params[i]->size()) {
                slots_[i].m.assign(params[i]->size(), T{0});
                slots_[i].v.assign(params[i]->size(), T{0});
                slots_[i].steps = 0;
            }
        }
    }

    /// Applies one update to the parameters whose `active[i]` is set, using
    /// their accumulated gradients.
    void step(const std::vector<Parameter<T>*>& params, const std::vector<bool>& active, double lr) {
        resize(params);
        const double b1 = cfg_.beta1, b2 = cfg_.beta2;
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!active[i]) continue;
            auto& slot = slots_[i];
            ++slot.steps;
            const double c1 = 1.0 - std::pow(b1, static_cast<double>(slot.steps));
            const double c2 = 1.0 - std::pow(b2, static_cast<double>(slot.steps));
            Tensor<T>& w = params[i]->value();
            const Tensor<T>& g = params[i]->var.grad();
            for (std::size_t k = 0; k < w.size(); ++k) {
                const double gk = static_cast<double>(g[k]);
                const double m = b1 * static_cast<double>(slot.m[k]) + (1.0 - b1) * gk;
                const double v = b2 * static_cast<double>(slot.v[k]) + (1.0 - b2) * gk * gk;
                slot.m[k] = static_cast<T>(m);
                slot.v[k] = static_cast<T>(v);
                const double update = lr * (m / c1) / (std::sqrt(v / c2) + cfg_.eps);
                w[k] = static_cast<T>(static_cast<double>(w[k]) - update);
            }
        }
    }

    const AdamConfig& config() const { return cfg_; }
    std::vector<AdamSlot<T>>& slots() { return slots_; }
    const std::vector<AdamSlot<T>>& slots() const { return slots_; }

private:
    AdamConfig cfg_;
    std::vector<AdamSlot<T>> slots_;
};

/// Cosine annealing from lr0 at epoch 0 to 0 at epoch `total`.
inline double cosine_lr(double lr0, std::size_t epoch, std::size_t total, double lr_min = 0.0) {
    if (total == 0) return lr0;
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * static_cast<double>(epoch) / static_cast<double>(total)));
}

/// Everything a trainer needs to resume: counters, optimizer moments, RNG.
template <class T>
struct TrainState {
    std::size_t epoch = 0;
    std::uint64_t step = 0;
    std::uint64_t updates = 0;  // optimizer updates applied
    double lr = 0.0;
    Adam<T> optimizer;
    Rng rng;
};

}  // namespace treemtl
