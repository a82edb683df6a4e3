#pragma once

// Parameter and FLOP accounting for one forward pass of a single image.
//
// Conventions (also printed with every report):
//   conv  : 2*Ho*Wo*Cout*k*k*Cin FLOPs, plus Ho*Wo*Cout for the bias
//   fc    : 2*in*out FLOPs, plus out for the bias
//   elementwise (relu, sigmoid, product, sum, pooling input, l2 normalize
//   square and divide): one FLOP per element touched
//   replication (dup) and reshapes: free
// The ArcFace classifier bank is training-only; it is reported separately
// and excluded from the totals.

#include <array>
#include <cstdint>
#include <string>

#include "treemtl/model.hpp"

namespace treemtl {

inline constexpr const char* kFlopConvention = "1 multiply-accumulate = 2 FLOPs; elementwise ops = 1 FLOP per element";

struct CostReport {
    ImageShape input;
    std::array<std::uint64_t, 3> params{};  // indexed by Group
    std::array<std::uint64_t, 3> flops{};
    std::uint64_t classifier_params = 0;

    std::uint64_t total_params() const { return params[0] + params[1] + params[2]; }
    std::uint64_t total_flops() const { return flops[0] + flops[1] + flops[2]; }
    double params_m() const { return static_cast<double>(total_params()) / 1e6; }
    double gflops() const { return static_cast<double>(total_flops()) / 1e9; }
    std::uint64_t group_params(Group g) const { return params[static_cast<int>(g)]; }
    std::uint64_t group_flops(Group g) const { return flops[static_cast<int>(g)]; }
};

/// Accumulates costs layer by layer while tracking the running feature shape.
class CostCounter {
public:
    explicit CostCounter(CostReport& report) : r_(report) {}

    void conv(Group g, ImageShape& s, std::size_t k, std::size_t cout, std::size_t stride, std::size_t pad, bool bias) {
        ops::Conv2dGeometry geo{k, stride, pad};
        const std::uint64_t ho = geo.out_extent(s.height), wo = geo.out_extent(s.width);
        const std::uint64_t outputs = ho * wo * cout;
        add(g, k * k * s.channels * cout + (bias ? cout : 0), 2 * outputs * k * k * s.channels + (bias ? outputs : 0));
        s = {static_cast<std::size_t>(ho), static_cast<std::size_t>(wo), cout};
    }

    void fc(Group g, std::uint64_t in, std::uint64_t out, bool bias) {
        add(g, in * out + (bias ? out : 0), 2 * in * out + (bias ? out : 0));
    }

    void elementwise(Group g, std::uint64_t elements) { add(g, 0, elements); }

    void add(Group g, std::uint64_t params, std::uint64_t flops) {
        r_.params[static_cast<int>(g)] += params;
        r_.flops[static_cast<int>(g)] += flops;
    }

private:
    CostReport& r_;
};

inline std::uint64_t elements(const ImageShape& s) {
    return std::uint64_t(s.height) * s.width * s.channels;
}

inline void count_backbone(CostCounter& c, Group g, const BackboneSpec& spec) {
    spec.output_shape();
    ImageShape s = spec.input;
    for (const auto& st : spec.stages) {
        c.conv(g, s, st.kernel, st.out_channels, st.stride, st.pad(), st.bias);
        if (st.activation == Activation::Relu) c.elementwise(g, elements(s));
        if (st.pooling == Pooling::Max2) {
            c.elementwise(g, 4 * std::uint64_t(s.height / 2) * (s.width / 2) * s.channels);
            s = {s.height / 2, s.width / 2, s.channels};
        }
    }
}

inline void count_lase(CostCounter& c, Group g, const ImageShape& s, const LASEConfig& cfg) {
    const std::uint64_t hw = std::uint64_t(s.height) * s.width, C = s.channels;
    if (cfg.use_lanet) {
        const std::uint64_t hidden = C / effective_reduction(C, cfg.lanet.reduction, "LANet");
        ImageShape t = s;
        c.conv(g, t, 1, hidden, 1, 0, true);
        c.elementwise(g, hw * hidden);  // relu
        c.conv(g, t, 1, 1, 1, 0, true);
        c.elementwise(g, hw);           // sigmoid
        c.elementwise(g, hw * C);       // attention product
        c.elementwise(g, hw * C);       // fused sum
    }
    if (cfg.use_senet) {
        const std::uint64_t hidden = C / effective_reduction(C, cfg.senet.reduction, "SENet");
        c.elementwise(g, hw * C);  // global average pool
        c.fc(g, C, hidden, true);
        c.elementwise(g, hidden);  // relu
        c.fc(g, hidden, C, true);
        c.elementwise(g, C);       // sigmoid
        c.elementwise(g, hw * C);  // attention product
        c.elementwise(g, hw * C);  // fused sum
    }
}

inline CostReport count_cost(const BackboneSpec& spec) {
    CostReport r;
    r.input = spec.input;
    CostCounter c(r);
    count_backbone(c, Group::Root, spec);
    return r;
}

inline CostReport count_cost(const ModelConfig& cfg) {
    CostReport r;
    r.input = cfg.backbone.input;
    CostCounter c(r);
    const ImageShape shared = cfg.backbone.output_shape();
    if (cfg.layout == Layout::Tree) {
        count_backbone(c, Group::Root, cfg.backbone);
    } else {
        count_backbone(c, Group::Fatigue, cfg.backbone);
        count_backbone(c, Group::Face, cfg.backbone);
    }
    count_lase(c, Group::Fatigue, shared, cfg.fatigue_branch);
    c.fc(Group::Fatigue, elements(shared), 1, true);
    count_lase(c, Group::Face, shared, cfg.face_branch);
    c.fc(Group::Face, elements(shared), cfg.embedding_dim, true);
    c.elementwise(Group::Face, 2 * std::uint64_t(cfg.embedding_dim));  // l2 normalize
    r.classifier_params = std::uint64_t(cfg.embedding_dim) * cfg.face_classes * cfg.arcface.subcenters;
    return r;
}

inline CostReport count_cost(ModelConfig cfg, const ImageShape& input) {
    cfg.backbone.input = input;
    return count_cost(cfg);
}

template <class T>
CostReport count_cost(const TreeModel<T>& model) {
    return count_cost(model.config());
}

inline nlohmann::json to_json(const CostReport& r) {
    return {{"input", {r.input.height, r.input.width, r.input.channels}},
            {"params", {{"root", r.params[0]}, {"fatigue", r.params[1]}, {"face", r.params[2]}, {"total", r.total_params()}}},
            {"params_m", r.params_m()},
            {"flops", {{"root", r.flops[0]}, {"fatigue", r.flops[1]}, {"face", r.flops[2]}, {"total", r.total_flops()}}},
            {"gflops", r.gflops()},
            {"classifier_params_training_only", r.classifier_params},
            {"flop_convention", kFlopConvention}};
}

}  // namespace treemtl
