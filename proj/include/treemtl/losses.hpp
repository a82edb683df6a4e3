#pragma once

#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "treemtl/layers.hpp"

namespace treemtl {

template <class T>
struct LossValue {
    Var<T> loss;                 // shape (1), mean of per_sample
    std::vector<double> per_sample;

    double scalar() const { return static_cast<double>(loss.value()[0]); }
};

/// Binary cross-entropy on raw logits, fused with the sigmoid:
/// per sample max(z,0) - z*y + log(1 + exp(-|z|)).
template <class T>
LossValue<T> bce_loss(const Var<T>& logits, std::span<const int> labels) {
    const auto& s = logits.shape();
    if (s.size() != 2 || s[1] != 1) throw DimensionError("bce_loss: logits must be (B,1), got " + to_string(s));
    const std::size_t B = s[0];
    if (labels.size() != B) throw InputError("bce_loss: " + std::to_string(labels.size()) + " labels for batch of " + std::to_string(B));
    for (std::size_t i = 0; i < B; ++i)
        if (labels[i] != 0 && labels[i] != 1)
            throw InputError("bce_loss: label " + std::to_string(labels[i]) + " at index " + std::to_string(i) + " is not binary");

    std::vector<double> per(B);
    T total{0};
    for (std::size_t i = 0; i < B; ++i) {
        const T z = logits.value()[i];
        const T y = static_cast<T>(labels[i]);
        const T l = std::max(z, T{0}) - z * y + std::log1p(std::exp(-std::abs(z)));
        per[i] = static_cast<double>(l);
        total += l;
    }
    std::vector<int> y(labels.begin(), labels.end());
    Var<T> loss = record<T>(Tensor<T>({1}, total / static_cast<T>(B)), {logits}, [B, y = std::move(y)](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        const T scale = self.grad[0] / static_cast<T>(B);
        for (std::size_t i = 0; i < B; ++i)
            g[i] += scale * (ops::detail::stable_sigmoid(in.value[i]) - static_cast<T>(y[i]));
    });
    return {loss, std::move(per)};
}

struct ArcFaceConfig {
    double margin = 0.5;   // additive angular margin m, radians
    double scale = 20.0;   // logit scale s
    std::size_t subcenters = 3;
};

inline constexpr double kArccosClamp = 1e-7;

/// Angular-margin classifier bank W of shape (dim, classes, subcenters). The
/// raw weights are trained; columns are L2-normalized on every use.
template <class T>
class SubcenterClassifier {
public:
    SubcenterClassifier() = default;
    SubcenterClassifier(std::size_t dim, std::size_t classes, ArcFaceConfig cfg, Group group = Group::Face)
        : cfg_(cfg), weight_("classifier.weight", group, {dim, classes, cfg.subcenters}) {
        if (!(cfg.margin >= 0.0)) throw ConfigError("arcface margin must be >= 0");
        if (!(cfg.scale > 0.0)) throw ConfigError("arcface scale must be > 0");
        if (cfg.subcenters < 1) throw ConfigError("arcface needs at least one subcenter");
        if (classes < 1 || dim < 1) throw ConfigError("arcface needs at least one class and dimension");
    }

    /// Random unit columns (normalized Gaussian).
    void init(Rng& rng) {
        std::normal_distribution<double> dist(0.0, 1.0);
        for (auto& v : weight_.value().data()) v = static_cast<T>(dist(rng));
        normalize_in_place();
    }

    void normalize_in_place() {
        auto& w = weight_.value();
        const std::size_t D = dim(), M = classes() * subcenters();
        for (std::size_t m = 0; m < M; ++m) {
            double ss = 0;
            for (std::size_t d = 0; d < D; ++d) ss += double(w[d * M + m]) * double(w[d * M + m]);
            const double n = std::max(std::sqrt(ss), 1e-12);
            for (std::size_t d = 0; d < D; ++d) w[d * M + m] = static_cast<T>(w[d * M + m] / n);
        }
    }

    void collect(std::vector<Parameter<T>*>& out) { out.push_back(&weight_); }

    std::size_t dim() const { return weight_.shape()[0]; }
    std::size_t classes() const { return weight_.shape()[1]; }
    std::size_t subcenters() const { return weight_.shape()[2]; }
    const ArcFaceConfig& config() const { return cfg_; }
    Parameter<T>& weight() { return weight_; }
    const Parameter<T>& weight() const { return weight_; }

private:
    ArcFaceConfig cfg_;
    Parameter<T> weight_;
};

namespace detail {

/// Per-sample class cosines: max over subcenters of <w_jk, x_i>.
template <class T>
void class_cosines(const Tensor<T>& x, const Tensor<T>& wn, std::size_t N, std::size_t K,
                   std::vector<T>& cos_out, std::vector<std::size_t>& arg_out) {
    const std::size_t B = x.dim(0), D = x.dim(1), M = N * K;
    AlignedVector<T> dots(B * M, T{0});
    ops::detail::MatMap<T>(dots.data(), B, M).noalias() =
        ops::detail::ConstMatMap<T>(x.data().data(), B, D) * ops::detail::ConstMatMap<T>(wn.data().data(), D, M);
    cos_out.assign(B * N, T{0});
    arg_out.assign(B * N, 0);
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t j = 0; j < N; ++j) {
            std::size_t best = 0;
            for (std::size_t k = 1; k < K; ++k)
                if (dots[i * M + j * K + k] > dots[i * M + j * K + best]) best = k;
            cos_out[i * N + j] = dots[i * M + j * K + best];
            arg_out[i * N + j] = best;
        }
}

}  // namespace detail

/// Subcenter ArcFace loss over unit-norm embeddings (B,D).
template <class T>
LossValue<T> arcface_subcenter_loss(const Var<T>& embeddings, std::span<const int> labels, const SubcenterClassifier<T>& clf) {
    const auto& s = embeddings.shape();
    if (s.size() != 2 || s[1] != clf.dim())
        throw DimensionError("arcface: embeddings " + to_string(s) + " do not match classifier dim " + std::to_string(clf.dim()));
    const std::size_t B = s[0], D = s[1], N = clf.classes(), K = clf.subcenters();
    if (labels.size() != B) throw InputError("arcface: label count does not match batch");
    for (std::size_t i = 0; i < B; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= N)
            throw InputError("arcface: label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(N) + ")");
        double ss = 0;
        for (std::size_t d = 0; d < D; ++d) ss += double(embeddings.value()[i * D + d]) * double(embeddings.value()[i * D + d]);
        if (std::abs(std::sqrt(ss) - 1.0) > 1e-3)
            throw InputError("arcface: embedding " + std::to_string(i) + " has norm " + std::to_string(std::sqrt(ss)) + ", expected 1");
    }

    Var<T> wn = ops::l2_normalize_columns(clf.weight().var);
    const T m = static_cast<T>(clf.config().margin);
    const T sc = static_cast<T>(clf.config().scale);
    const T lo = T(-1 + kArccosClamp), hi = T(1 - kArccosClamp);

    std::vector<T> cosv;
    std::vector<std::size_t> argk;
    detail::class_cosines(embeddings.value(), wn.value(), N, K, cosv, argk);

    // dlogit/dcos per (i,j) and softmax residuals, kept for the backward pass.
    std::vector<T> dlogit_dcos(B * N, T{0});
    std::vector<T> residual(B * N, T{0});
    std::vector<double> per(B);
    T total{0};
    std::vector<T> logits(N);
    for (std::size_t i = 0; i < B; ++i) {
        const std::size_t y = static_cast<std::size_t>(labels[i]);
        for (std::size_t j = 0; j < N; ++j) {
            const T raw = cosv[i * N + j];
            const T c = std::clamp(raw, lo, hi);
            const bool inside = raw > lo && raw < hi;
            if (j == y) {
                const T theta = std::acos(c);
                logits[j] = sc * std::cos(theta + m);
                dlogit_dcos[i * N + j] = inside ? sc * std::sin(theta + m) / std::sin(theta) : T{0};
            } else {
                logits[j] = sc * c;
                dlogit_dcos[i * N + j] = inside ? sc : T{0};
            }
        }
        const T mx = *std::max_element(logits.begin(), logits.end());
        T z{0};
        for (std::size_t j = 0; j < N; ++j) z += std::exp(logits[j] - mx);
        const T lse = mx + std::log(z);
        const T l = lse - logits[y];
        per[i] = static_cast<double>(l);
        total += l;
        for (std::size_t j = 0; j < N; ++j) residual[i * N + j] = std::exp(logits[j] - lse) - (j == y ? T{1} : T{0});
    }

    Var<T> loss = record<T>(
        Tensor<T>({1}, total / static_cast<T>(B)), {embeddings, wn},
        [B, D, N, K, argk = std::move(argk), dlogit_dcos = std::move(dlogit_dcos), residual = std::move(residual)](Node<T>& self) {
            Node<T>& nx = *self.inputs[0];
            Node<T>& nw = *self.inputs[1];
            const std::size_t M = N * K;
            const T g0 = self.grad[0] / static_cast<T>(B);
            // gradient w.r.t. the (B, N*K) dot-product matrix
            AlignedVector<T> gdots(B * M, T{0});
            for (std::size_t i = 0; i < B; ++i)
                for (std::size_t j = 0; j < N; ++j)
                    gdots[i * M + j * K + argk[i * N + j]] = g0 * residual[i * N + j] * dlogit_dcos[i * N + j];
            ops::detail::ConstMatMap<T> gd(gdots.data(), B, M);
            if (nx.requires_grad)
                ops::detail::MatMap<T>(nx.grad_buffer().data().data(), B, D).noalias() +=
                    gd * ops::detail::ConstMatMap<T>(nw.value.data().data(), D, M).transpose();
            if (nw.requires_grad)
                ops::detail::MatMap<T>(nw.grad_buffer().data().data(), D, M).noalias() +=
                    ops::detail::ConstMatMap<T>(nx.value.data().data(), B, D).transpose() * gd;
        });
    return {loss, std::move(per)};
}

inline void check_loss_weight(double w) {
    if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("loss weight w=" + std::to_string(w) + " outside [0,1]");
}

/// w * l_drowsy + (1 - w) * l_face
inline double combined_loss(double l_drowsy, double l_face, double w) {
    check_loss_weight(w);
    return w * l_drowsy + (1.0 - w) * l_face;
}

template <class T>
Var<T> combined_loss(const Var<T>& l_drowsy, const Var<T>& l_face, double w) {
    check_loss_weight(w);
    return ops::add(ops::scale(l_drowsy, static_cast<T>(w)), ops::scale(l_face, static_cast<T>(1.0 - w)));
}

}  // namespace treemtl
