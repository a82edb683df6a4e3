#pragma once

// Spatial (LANet), channel (SENet) and fused (LASE-Net) attention blocks.

#include <optional>
#include <string>

#include "treemtl/layers.hpp"

namespace treemtl {

struct LANetConfig {
    std::size_t reduction = 16;
};

struct SENetConfig {
    std::size_t reduction = 16;
};

/// Reduction actually applied for `channels`. A single channel forces r = 1.
inline std::size_t effective_reduction(std::size_t channels, std::size_t reduction, const char* who) {
    if (reduction == 0) throw ConfigError(std::string(who) + ": reduction ratio must be positive");
    if (channels == 1) return 1;
    if (channels % reduction != 0)
        throw ConfigError(std::string(who) + ": channel count " + std::to_string(channels) +
                          " is not divisible by reduction " + std::to_string(reduction));
    return reduction;
}

template <class T>
struct AttentionOutput {
    Var<T> features;   // input re-weighted by the attention, same shape as input
    Var<T> attention;  // (B,H,W,1) for LANet, (B,1,1,C) for SENet
};

/// Spatial attention: sigmoid(conv1x1(relu(conv1x1(x)))) gives an (H,W,1) map
/// that is replicated across channels and multiplied into x.
template <class T>
class LANet {
public:
    LANet() = default;
    LANet(const std::string& name, Group group, std::size_t channels, LANetConfig cfg = {})
        : channels_(channels) {
        const std::size_t hidden = channels / effective_reduction(channels, cfg.reduction, "LANet");
        reduce_ = Conv2d<T>(name + ".reduce", group, channels, hidden, {1, 1, 0}, true);
        expand_ = Conv2d<T>(name + ".expand", group, hidden, 1, {1, 1, 0}, true);
    }

    AttentionOutput<T> forward(const Var<T>& x) const {
        require_rank4(x.shape(), "LANet");
        if (x.shape()[3] != channels_)
            throw DimensionError("LANet: expected " + std::to_string(channels_) + " channels, got " +
                                 to_string(x.shape()));
        Var<T> att = ops::sigmoid(expand_(ops::relu(reduce_(x))));
        Var<T> weights = ops::dup(att, {3}, {channels_});
        return {ops::mul(weights, x), att};
    }

    void init(Rng& rng) {
        reduce_.init(rng);
        expand_.init(rng);
    }
    void collect(std::vector<Parameter<T>*>& out) {
        reduce_.collect(out);
        expand_.collect(out);
    }

    std::size_t channels() const { return channels_; }
    std::size_t hidden() const { return reduce_.out_channels(); }
    Conv2d<T>& reduce() { return reduce_; }
    Conv2d<T>& expand() { return expand_; }

private:
    std::size_t channels_ = 0;
    Conv2d<T> reduce_;
    Conv2d<T> expand_;
};

/// Channel attention: sigmoid(fc(relu(fc(avgpool(x))))) gives a (1,1,C)
/// vector replicated over H and W and multiplied into x.
template <class T>
class SENet {
public:
    SENet() = default;
    SENet(const std::string& name, Group group, std::size_t channels, SENetConfig cfg = {}) : channels_(channels) {
        const std::size_t hidden = channels / effective_reduction(channels, cfg.reduction, "SENet");
        squeeze_ = Linear<T>(name + ".squeeze", group, channels, hidden);
        excite_ = Linear<T>(name + ".excite", group, hidden, channels);
    }

    AttentionOutput<T> forward(const Var<T>& x) const {
        require_rank4(x.shape(), "SENet");
        const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
        if (x.shape()[3] != channels_)
            throw DimensionError("SENet: expected " + std::to_string(channels_) + " channels, got " +
                                 to_string(x.shape()));
        Var<T> pooled = ops::reshape(ops::global_avg_pool(x), {B, channels_});
        Var<T> att = ops::reshape(ops::sigmoid(excite_(ops::relu(squeeze_(pooled)))), {B, 1, 1, channels_});
        Var<T> weights = ops::dup(att, {1, 2}, {H, W});
        return {ops::mul(weights, x), att};
    }

    void init(Rng& rng) {
        squeeze_.init(rng);
        excite_.init(rng);
    }
    void collect(std::vector<Parameter<T>*>& out) {
        squeeze_.collect(out);
        excite_.collect(out);
    }

    std::size_t channels() const { return channels_; }
    std::size_t hidden() const { return squeeze_.out_features(); }
    Linear<T>& squeeze() { return squeeze_; }
    Linear<T>& excite() { return excite_; }

private:
    std::size_t channels_ = 0;
    Linear<T> squeeze_;
    Linear<T> excite_;
};

struct LASEConfig {
    bool use_lanet = true;
    bool use_senet = true;
    LANetConfig lanet;
    SENetConfig senet;
};

/// x + LANet(x) + SENet(x). Either attention path can be switched off for
/// ablations; with both off the block is the identity.
template <class T>
class LASENet {
public:
    LASENet() = default;
    LASENet(const std::string& name, Group group, std::size_t channels, LASEConfig cfg = {})
        : channels_(channels), cfg_(cfg) {
        if (cfg.use_lanet) lanet_.emplace(name + ".lanet", group, channels, cfg.lanet);
        if (cfg.use_senet) senet_.emplace(name + ".senet", group, channels, cfg.senet);
    }

    Var<T> forward(const Var<T>& x) const {
        Var<T> fused = x;
        if (lanet_) fused = ops::add(fused, lanet_->forward(x).features);
        if (senet_) fused = ops::add(fused, senet_->forward(x).features);
        if (fused.shape() != x.shape()) throw StateError("LASE-Net: branch output shape diverged from input");
        return fused;
    }

    void init(Rng& rng) {
        if (lanet_) lanet_->init(rng);
        if (senet_) senet_->init(rng);
    }
    void collect(std::vector<Parameter<T>*>& out) {
        if (lanet_) lanet_->collect(out);
        if (senet_) senet_->collect(out);
    }

    std::size_t channels() const { return channels_; }
    const LASEConfig& config() const { return cfg_; }
    LANet<T>* lanet() { return lanet_ ? &*lanet_ : nullptr; }
    SENet<T>* senet() { return senet_ ? &*senet_ : nullptr; }

private:
    std::size_t channels_ = 0;
    LASEConfig cfg_;
    std::optional<LANet<T>> lanet_;
    std::optional<SENet<T>> senet_;
};

}  // namespace treemtl
