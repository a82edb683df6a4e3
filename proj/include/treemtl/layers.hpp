#pragma once

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "treemtl/ops.hpp"

namespace treemtl {

/// Parameter groups of the tree model; training freezes whole groups.
enum class Group { Root, Fatigue, Face };

inline const char* group_name(Group g) {
    switch (g) {
        case Group::Root: return "root";
        case Group::Fatigue: return "fatigue";
        case Group::Face: return "face";
    }
    return "?";
}

inline Group parse_group(const std::string& s) {
    if (s == "root") return Group::Root;
    if (s == "fatigue") return Group::Fatigue;
    if (s == "face") return Group::Face;
    throw InputError("unknown parameter group '" + s + "'");
}

/// A trainable leaf tensor with a stable name and group tag.
template <class T>
struct Parameter {
    std::string name;
    Group group = Group::Root;
    Var<T> var;

    Parameter() = default;
    Parameter(std::string n, Group g, Shape shape) : name(std::move(n)), group(g), var(Tensor<T>(std::move(shape)), true) {}

    // Copies own their storage; a copied model never aliases the original.
    Parameter(const Parameter& o) : name(o.name), group(o.group) {
        if (o.var.defined()) var = Var<T>(o.var.value(), true);
    }
    Parameter& operator=(const Parameter& o) {
        if (this != &o) *this = Parameter(o);
        return *this;
    }
    Parameter(Parameter&&) noexcept = default;
    Parameter& operator=(Parameter&&) noexcept = default;

    Tensor<T>& value() { return var.mutable_value(); }
    const Tensor<T>& value() const { return var.value(); }
    const Shape& shape() const { return var.shape(); }
    std::size_t size() const { return var.value().size(); }
};

using Rng = std::mt19937_64;

/// He-uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
template <class T>
void he_uniform(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : w.data()) v = static_cast<T>(dist(rng));
}

template <class T>
class Conv2d {
public:
    Conv2d() = default;
    Conv2d(std::string name, Group group, std::size_t in_channels, std::size_t out_channels, ops::Conv2dGeometry geo,
           bool with_bias)
        : geo_(geo),
          weight_(name + ".weight", group, {geo.kernel, geo.kernel, in_channels, out_channels}),
          has_bias_(with_bias) {
        if (with_bias) bias_ = Parameter<T>(name + ".bias", group, {out_channels});
    }

    Var<T> operator()(const Var<T>& x) const {
        return ops::conv2d(x, weight_.var, has_bias_ ? &bias_.var : nullptr, geo_);
    }

    void init(Rng& rng) {
        he_uniform(weight_.value(), geo_.kernel * geo_.kernel * in_channels(), rng);
        if (has_bias_) bias_.value().fill(T{0});
    }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    std::size_t in_channels() const { return weight_.shape()[2]; }
    std::size_t out_channels() const { return weight_.shape()[3]; }
    const ops::Conv2dGeometry& geometry() const { return geo_; }
    bool has_bias() const { return has_bias_; }
    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }

private:
    ops::Conv2dGeometry geo_;
    Parameter<T> weight_;
    Parameter<T> bias_;
    bool has_bias_ = false;
};

template <class T>
class Linear {
public:
    Linear() = default;
    Linear(std::string name, Group group, std::size_t in, std::size_t out, bool with_bias = true)
        : weight_(name + ".weight", group, {in, out}), has_bias_(with_bias) {
        if (with_bias) bias_ = Parameter<T>(name + ".bias", group, {out});
    }

    Var<T> operator()(const Var<T>& x) const { return ops::linear(x, weight_.var, has_bias_ ? &bias_.var : nullptr); }

    void init(Rng& rng) {
        he_uniform(weight_.value(), in_features(), rng);
        if (has_bias_) bias_.value().fill(T{0});
    }

    void collect(std::vector<Parameter<T>*>& out) {
        out.push_back(&weight_);
        if (has_bias_) out.push_back(&bias_);
    }

    std::size_t in_features() const { return weight_.shape()[0]; }
    std::size_t out_features() const { return weight_.shape()[1]; }
    bool has_bias() const { return has_bias_; }
    Parameter<T>& weight() { return weight_; }
    Parameter<T>& bias() { return bias_; }

private:
    Parameter<T> weight_;
    Parameter<T> bias_;
    bool has_bias_ = false;
};

}  // namespace treemtl
