#pragma once

// Shared helpers for the unit tests and the acceptance binary: random tensors,
// a central-difference gradient checker and scalar-loop reference
// implementations written independently of the library kernels.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "treemtl/treemtl.hpp"

namespace treemtl::testing {

template <class T = double>
Tensor<T> random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Tensor<T> t(shape);
    for (auto& v : t.data()) v = static_cast<T>(d(rng));
    return t;
}

inline Tensor<double> unit_rows(std::size_t B, std::size_t D, std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    Tensor<double> t({B, D});
    for (std::size_t i = 0; i < B; ++i) {
        double ss = 0;
        for (std::size_t d = 0; d < D; ++d) ss += std::pow(t[i * D + d] = n(rng), 2);
        for (std::size_t d = 0; d < D; ++d) t[i * D + d] /= std::sqrt(ss);
    }
    return t;
}

/// sum(R * y) for a fixed random R, so every output element carries weight.
inline Var<double> project(const Var<double>& y, const Tensor<double>& r) {
    return ops::sum(ops::mul(y, Var<double>(r)));
}

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t probes = 0;
    std::string worst;  // "leaf[index]: autodiff vs numeric"
};

/// Central differences on randomly chosen elements of `leaves` (round-robin
/// over the leaves). Relative error is |a - n| / max(|a|, |n|, floor); the
/// floor keeps vanishing gradients from turning rounding noise into a ratio.
inline GradCheckReport check_gradients(std::vector<std::pair<std::string, Var<double>>> leaves,
                                       const std::function<Var<double>()>& loss, std::size_t probes, std::uint64_t seed,
                                       double h = 1e-4, double floor = 1e-3) {
    for (auto& [name, v] : leaves) v.zero_grad();
    backward(loss());
    std::vector<Tensor<double>> analytic;
    for (auto& [name, v] : leaves) analytic.push_back(v.grad());

    std::mt19937_64 rng(seed);
    GradCheckReport rep;
    for (std::size_t p = 0; p < probes; ++p) {
        const std::size_t li = p % leaves.size();
        auto& v = leaves[li].second;
        std::uniform_int_distribution<std::size_t> pick(0, v.value().size() - 1);
        const std::size_t k = pick(rng);
        double& x = v.mutable_value()[k];
        const double x0 = x;
        x = x0 + h;
        const double lp = loss().value()[0];
        x = x0 - h;
        const double lm = loss().value()[0];
        x = x0;
        const double numeric = (lp - lm) / (2 * h);
        const double a = analytic[li][k];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
        if (rel > rep.max_rel_err || rep.worst.empty()) {
            rep.max_rel_err = std::max(rel, rep.max_rel_err);
            rep.worst = leaves[li].first + "[" + std::to_string(k) + "]: " + std::to_string(a) + " vs " + std::to_string(numeric);
        }
        ++rep.probes;
    }
    return rep;
}

template <class T>
std::vector<std::pair<std::string, Var<double>>> leaves_of(std::vector<Parameter<T>*> params) {
    std::vector<std::pair<std::string, Var<double>>> out;
    for (auto* p : params) out.emplace_back(p->name, p->var);
    return out;
}

// ---- scalar references -------------------------------------------------------

inline double sigmoid_ref(double z) { return 1.0 / (1.0 + std::exp(-z)); }

/// Direct convolution over (B,H,W,Cin) with weights (k,k,Cin,Cout).
inline Tensor<double> conv_ref(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, std::size_t stride,
                               std::size_t pad) {
    const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3);
    const std::size_t k = w.dim(0), Co = w.dim(3);
    const std::size_t Ho = (H + 2 * pad - k) / stride + 1, Wo = (W + 2 * pad - k) / stride + 1;
    Tensor<double> y({B, Ho, Wo, Co});
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j)
                for (std::size_t o = 0; o < Co; ++o) {
                    double acc = b ? (*b)[o] : 0.0;
                    for (std::size_t di = 0; di < k; ++di)
                        for (std::size_t dj = 0; dj < k; ++dj) {
                            const long r = long(i * stride + di) - long(pad), c = long(j * stride + dj) - long(pad);
                            if (r < 0 || c < 0 || r >= long(H) || c >= long(W)) continue;
                            for (std::size_t ci = 0; ci < C; ++ci)
                                acc += x.at(n, std::size_t(r), std::size_t(c), ci) * w[((di * k + dj) * C + ci) * Co + o];
                        }
                    y.at(n, i, j, o) = acc;
                }
    return y;
}

/// (B,In) x (In,Out) + b
inline std::vector<double> linear_ref(const std::vector<double>& x, std::size_t B, const Tensor<double>& w, const Tensor<double>* b) {
    const std::size_t In = w.dim(0), Out = w.dim(1);
    std::vector<double> y(B * Out);
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t o = 0; o < Out; ++o) {
            double acc = b ? (*b)[o] : 0.0;
            for (std::size_t i = 0; i < In; ++i) acc += x[n * In + i] * w[i * Out + o];
            y[n * Out + o] = acc;
        }
    return y;
}

struct AttentionRef {
    Tensor<double> features;
    Tensor<double> attention;
};

inline AttentionRef lanet_ref(const Tensor<double>& x, LANet<double>& net) {
    const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3), Hd = net.hidden();
    const auto& w1 = net.reduce().weight().value();
    const auto& b1 = net.reduce().bias().value();
    const auto& w2 = net.expand().weight().value();
    const auto& b2 = net.expand().bias().value();
    AttentionRef r{Tensor<double>(x.shape()), Tensor<double>({B, H, W, 1})};
    for (std::size_t n = 0; n < B; ++n)
        for (std::size_t i = 0; i < H; ++i)
            for (std::size_t j = 0; j < W; ++j) {
                double z = b2[0];
                for (std::size_t h = 0; h < Hd; ++h) {
                    double a = b1[h];
                    for (std::size_t c = 0; c < C; ++c) a += x.at(n, i, j, c) * w1[c * Hd + h];
                    z += std::max(a, 0.0) * w2[h];
                }
                const double att = sigmoid_ref(z);
                r.attention.at(n, i, j, 0) = att;
                for (std::size_t c = 0; c < C; ++c) r.features.at(n, i, j, c) = att * x.at(n, i, j, c);
            }
    return r;
}

inline AttentionRef senet_ref(const Tensor<double>& x, SENet<double>& net) {
    const std::size_t B = x.dim(0), H = x.dim(1), W = x.dim(2), C = x.dim(3), Hd = net.hidden();
    const auto& w1 = net.squeeze().weight().value();
    const auto& b1 = net.squeeze().bias().value();
    const auto& w2 = net.excite().weight().value();
    const auto& b2 = net.excite().bias().value();
    AttentionRef r{Tensor<double>(x.shape()), Tensor<double>({B, 1, 1, C})};
    for (std::size_t n = 0; n < B; ++n) {
        std::vector<double> pooled(C, 0.0), hidden(Hd);
        for (std::size_t c = 0; c < C; ++c) {
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) pooled[c] += x.at(n, i, j, c);
            pooled[c] /= double(H * W);
        }
        for (std::size_t h = 0; h < Hd; ++h) {
            double a = b1[h];
            for (std::size_t c = 0; c < C; ++c) a += pooled[c] * w1[c * Hd + h];
            hidden[h] = std::max(a, 0.0);
        }
        for (std::size_t c = 0; c < C; ++c) {
            double z = b2[c];
            for (std::size_t h = 0; h < Hd; ++h) z += hidden[h] * w2[h * C + c];
            const double att = sigmoid_ref(z);
            r.attention.at(n, 0, 0, c) = att;
            for (std::size_t i = 0; i < H; ++i)
                for (std::size_t j = 0; j < W; ++j) r.features.at(n, i, j, c) = att * x.at(n, i, j, c);
        }
    }
    return r;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return a.size() == b.size() ? m : INFINITY;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("treemtl_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

private:
    std::filesystem::path path_;
};

/// Small model on 16x16 inputs used across tests (root: two conv stages).
inline ModelConfig tiny_config(std::size_t channels = 1) {
    ModelConfig cfg;
    cfg.backbone.input = {16, 16, channels};
    cfg.backbone.stages = {StageSpec{3, 4, 2}, StageSpec{3, 8, 2}};
    cfg.fatigue_branch.lanet.reduction = 2;
    cfg.fatigue_branch.senet.reduction = 2;
    cfg.face_branch.lanet.reduction = 4;
    cfg.face_branch.senet.reduction = 4;
    cfg.embedding_dim = 6;
    cfg.face_classes = 4;
    return cfg;
}

}  // namespace treemtl::testing
