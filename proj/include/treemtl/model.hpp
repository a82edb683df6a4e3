#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treemtl/attention.hpp"
#include "treemtl/losses.hpp"

namespace treemtl {

enum class Activation { None, Relu };
enum class Pooling { None, Max2 };
enum class Task { Fatigue, Face };
enum class Layout { Tree, Split };

inline Task parse_task(const std::string& s) {
    if (s == "fatigue") return Task::Fatigue;
    if (s == "face") return Task::Face;
    throw InputError("unknown task tag '" + s + "' (expected fatigue|face)");
}
inline const char* task_name(Task t) { return t == Task::Fatigue ? "fatigue" : "face"; }

struct StageSpec {
    std::size_t kernel = 3;
    std::size_t out_channels = 16;
    std::size_t stride = 2;
    std::optional<std::size_t> padding;  // default kernel / 2
    Activation activation = Activation::Relu;
    Pooling pooling = Pooling::None;
    bool bias = true;

    std::size_t pad() const { return padding.value_or(kernel / 2); }
};

struct ImageShape {
    std::size_t height = 112;
    std::size_t width = 112;
    std::size_t channels = 1;

    friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

/// Stack of conv stages forming the shared root.
struct BackboneSpec {
    ImageShape input;
    std::vector<StageSpec> stages;

    /// (H,W,C) after every stage; throws if any extent collapses to zero.
    ImageShape output_shape() const {
        ImageShape s = input;
        for (std::size_t i = 0; i < stages.size(); ++i) {
            const auto& st = stages[i];
            if (st.kernel == 0 || st.stride == 0 || st.out_channels == 0)
                throw ConfigError("backbone stage " + std::to_string(i) + ": kernel, stride and channels must be positive");
            ops::Conv2dGeometry geo{st.kernel, st.stride, st.pad()};
            s = {geo.out_extent(s.height), geo.out_extent(s.width), st.out_channels};
            if (st.pooling == Pooling::Max2) s = {s.height / 2, s.width / 2, s.channels};
            if (s.height == 0 || s.width == 0)
                throw ConfigError("backbone stage " + std::to_string(i) + " reduces the spatial extent to zero");
        }
        return s;
    }

    /// 4 stride-2 3x3 conv stages 16->32->64->64 on 112x112x1, giving 7x7x64.
    static BackboneSpec desk_default() {
        BackboneSpec spec;
        for (std::size_t c : {16, 32, 64, 64}) spec.stages.push_back(StageSpec{3, c, 2});
        return spec;
    }
};

struct ModelConfig {
    BackboneSpec backbone = BackboneSpec::desk_default();
    LASEConfig fatigue_branch;
    LASEConfig face_branch;
    std::size_t embedding_dim = 512;
    std::size_t face_classes = 10;
    ArcFaceConfig arcface;
    Layout layout = Layout::Tree;
};

template <class T>
class Backbone {
public:
    Backbone() = default;
    Backbone(const BackboneSpec& spec, const std::string& prefix, Group group) : spec_(spec) {
        spec.output_shape();  // validates
        std::size_t cin = spec.input.channels;
        for (std::size_t i = 0; i < spec.stages.size(); ++i) {
            const auto& st = spec.stages[i];
            convs_.emplace_back(prefix + ".stage" + std::to_string(i), group, cin, st.out_channels,
                                ops::Conv2dGeometry{st.kernel, st.stride, st.pad()}, st.bias);
            cin = st.out_channels;
        }
    }

    Var<T> forward(const Var<T>& x) const {
        Var<T> h = x;
        for (std::size_t i = 0; i < convs_.size(); ++i) {
            h = convs_[i](h);
            if (spec_.stages[i].activation == Activation::Relu) h = ops::relu(h);
            if (spec_.stages[i].pooling == Pooling::Max2) h = ops::max_pool2(h);
        }
        return h;
    }

    void init(Rng& rng) {
        for (auto& c : convs_) c.init(rng);
    }
    void collect(std::vector<Parameter<T>*>& out) {
        for (auto& c : convs_) c.collect(out);
    }
    const BackboneSpec& spec() const { return spec_; }
    std::vector<Conv2d<T>>& convs() { return convs_; }

private:
    BackboneSpec spec_;
    std::vector<Conv2d<T>> convs_;
};

/// One task branch: LASE-Net followed by a fully connected head.
template <class T>
class Branch {
public:
    Branch() = default;
    Branch(const std::string& name, Group group, ImageShape in, const LASEConfig& cfg, std::size_t out_dim)
        : lase_(name + ".lase", group, in.channels, cfg),
          head_(name + ".head", group, in.height * in.width * in.channels, out_dim) {}

    struct Output {
        Var<T> features;  // LASE-Net output
        Var<T> head;      // FC output
    };

    Output forward(const Var<T>& shared) const {
        Var<T> f = lase_.forward(shared);
        return {f, head_(ops::flatten(f))};
    }

    void init(Rng& rng) {
        lase_.init(rng);
        head_.init(rng);
    }
    void collect(std::vector<Parameter<T>*>& out) {
        lase_.collect(out);
        head_.collect(out);
    }
    LASENet<T>& lase() { return lase_; }
    Linear<T>& head() { return head_; }

private:
    LASENet<T> lase_;
    Linear<T> head_;
};

template <class T>
struct ForwardOutput {
    Var<T> fatigue_logit;    // (B,1)
    Var<T> embedding;        // (B,D), unit rows
    Var<T> shared;           // root output feeding the fatigue branch
    Var<T> shared_face;      // root output feeding the face branch; same node as `shared` in tree layout
    Var<T> fatigue_features; // LASE-Net outputs
    Var<T> face_features;
};

/// Shared backbone root with a fatigue branch (one logit) and a face branch
/// (unit embedding). The split layout gives each branch its own backbone copy
/// and is the parallel baseline.
template <class T>
class TreeModel {
public:
    TreeModel() = default;
    explicit TreeModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        const ImageShape shared = cfg_.backbone.output_shape();
        if (cfg_.embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
        if (cfg_.layout == Layout::Tree) {
            roots_.emplace_back(cfg_.backbone, "root", Group::Root);
        } else {
            roots_.emplace_back(cfg_.backbone, "fatigue.root", Group::Fatigue);
            roots_.emplace_back(cfg_.backbone, "face.root", Group::Face);
        }
        fatigue_ = Branch<T>("fatigue", Group::Fatigue, shared, cfg_.fatigue_branch, 1);
        face_ = Branch<T>("face", Group::Face, shared, cfg_.face_branch, cfg_.embedding_dim);
        classifier_ = SubcenterClassifier<T>(cfg_.embedding_dim, cfg_.face_classes, cfg_.arcface, Group::Face);
    }

    /// He-uniform weights, zero biases, random unit classifier columns.
    void init(std::uint64_t seed) {
        Rng rng(seed);
        for (auto& r : roots_) r.init(rng);
        fatigue_.init(rng);
        face_.init(rng);
        classifier_.init(rng);
    }

    void check_input(const Shape& s) const {
        const auto& in = cfg_.backbone.input;
        if (s.size() != 4 || s[0] == 0 || s[1] != in.height || s[2] != in.width || s[3] != in.channels)
            throw InputError("images " + to_string(s) + " do not match model input (B," + std::to_string(in.height) + "," +
                             std::to_string(in.width) + "," + std::to_string(in.channels) + ")");
    }

    Var<T> root_forward(const Var<T>& images, Task task) const {
        check_input(images.shape());
        const Backbone<T>& r = roots_.size() == 1 || task == Task::Fatigue ? roots_.front() : roots_.back();
        return r.forward(images);
    }

    typename Branch<T>::Output fatigue_from(const Var<T>& shared) const { return fatigue_.forward(shared); }

    typename Branch<T>::Output face_from(const Var<T>& shared) const {
        auto out = face_.forward(shared);
        out.head = ops::l2_normalize_rows(out.head);
        return out;
    }

    ForwardOutput<T> forward_both(const Var<T>& images) const {
        ForwardOutput<T> out;
        out.shared = root_forward(images, Task::Fatigue);
        out.shared_face = roots_.size() == 1 ? out.shared : root_forward(images, Task::Face);
        auto fat = fatigue_from(out.shared);
        auto face = face_from(out.shared_face);
        out.fatigue_logit = fat.head;
        out.fatigue_features = fat.features;
        out.embedding = face.head;
        out.face_features = face.features;
        return out;
    }
    ForwardOutput<T> forward_both(const Tensor<T>& images) const { return forward_both(Var<T>(images)); }

    /// Fatigue logit (B,1) or unit embedding (B,D).
    Var<T> forward_task(const Var<T>& images, Task task) const {
        Var<T> shared = root_forward(images, task);
        return task == Task::Fatigue ? fatigue_from(shared).head : face_from(shared).head;
    }
    Var<T> forward_task(const Tensor<T>& images, Task task) const { return forward_task(Var<T>(images), task); }
    Var<T> forward_task(const Tensor<T>& images, const std::string& task) const { return forward_task(images, parse_task(task)); }

    /// Every parameter in a fixed order: roots, fatigue branch, face branch, classifier.
    std::vector<Parameter<T>*> parameters() {
        std::vector<Parameter<T>*> out;
        for (auto& r : roots_) r.collect(out);
        fatigue_.collect(out);
        face_.collect(out);
        classifier_.collect(out);
        return out;
    }
    std::vector<const Parameter<T>*> parameters() const {
        auto ps = const_cast<TreeModel*>(this)->parameters();
        return {ps.begin(), ps.end()};
    }
    std::vector<Parameter<T>*> parameters(Group g) {
        std::vector<Parameter<T>*> out;
        for (auto* p : parameters())
            if (p->group == g) out.push_back(p);
        return out;
    }

    void zero_grad() {
        for (auto* p : parameters()) p->var.zero_grad();
    }

    /// Sets every parameter to zero (test and ablation helper).
    void zero_parameters() {
        for (auto* p : parameters()) p->value().fill(T{0});
    }

    const ModelConfig& config() const { return cfg_; }
    Backbone<T>& root(std::size_t i = 0) { return roots_.at(i); }
    std::size_t root_count() const { return roots_.size(); }
    Branch<T>& fatigue_branch() { return fatigue_; }
    Branch<T>& face_branch() { return face_; }
    SubcenterClassifier<T>& classifier() { return classifier_; }
    const SubcenterClassifier<T>& classifier() const { return classifier_; }

private:
    ModelConfig cfg_;
    std::vector<Backbone<T>> roots_;
    Branch<T> fatigue_;
    Branch<T> face_;
    SubcenterClassifier<T> classifier_;
};

// ---- config (de)serialization ----------------------------------------------

inline nlohmann::json lase_to_json(const LASEConfig& c) {
    return {{"lanet", c.use_lanet}, {"senet", c.use_senet}, {"lanet_reduction", c.lanet.reduction},
            {"senet_reduction", c.senet.reduction}};
}

inline nlohmann::json to_json(const ModelConfig& cfg) {
    nlohmann::json stages = nlohmann::json::array();
    for (const auto& s : cfg.backbone.stages)
        stages.push_back({{"kernel", s.kernel},
                          {"channels", s.out_channels},
                          {"stride", s.stride},
                          {"padding", s.pad()},
                          {"activation", s.activation == Activation::Relu ? "relu" : "none"},
                          {"pool", s.pooling == Pooling::Max2 ? "max2" : "none"},
                          {"bias", s.bias}});
    const auto& in = cfg.backbone.input;
    return {{"input", {in.height, in.width, in.channels}},
            {"stages", stages},
            {"fatigue_branch", lase_to_json(cfg.fatigue_branch)},
            {"face_branch", lase_to_json(cfg.face_branch)},
            {"embedding_dim", cfg.embedding_dim},
            {"face_classes", cfg.face_classes},
            {"loss", {{"margin", cfg.arcface.margin}, {"scale", cfg.arcface.scale}, {"subcenters", cfg.arcface.subcenters}}},
            {"layout", cfg.layout == Layout::Tree ? "tree" : "split"}};
}

inline LASEConfig lase_from_json(const nlohmann::json& j) {
    LASEConfig c;
    c.use_lanet = j.value("lanet", true);
    c.use_senet = j.value("senet", true);
    c.lanet.reduction = j.value("lanet_reduction", std::size_t{16});
    c.senet.reduction = j.value("senet_reduction", std::size_t{16});
    return c;
}

/// Inverse of to_json(ModelConfig). Missing keys take defaults.
inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig cfg;
    if (j.contains("input")) {
        const auto& in = j.at("input");
        if (!in.is_array() || in.size() != 3) throw ConfigError("model.input must be [height, width, channels]");
        cfg.backbone.input = {in[0].get<std::size_t>(), in[1].get<std::size_t>(), in[2].get<std::size_t>()};
    }
    if (j.contains("stages")) {
        cfg.backbone.stages.clear();
        for (const auto& s : j.at("stages")) {
            StageSpec st;
            st.kernel = s.value("kernel", st.kernel);
            st.out_channels = s.at("channels").get<std::size_t>();
            st.stride = s.value("stride", st.stride);
            if (s.contains("padding")) st.padding = s.at("padding").get<std::size_t>();
            const std::string act = s.value("activation", std::string("relu"));
            if (act == "relu") st.activation = Activation::Relu;
            else if (act == "none") st.activation = Activation::None;
            else throw ConfigError("unknown activation '" + act + "'");
            const std::string pool = s.value("pool", std::string("none"));
            if (pool == "max2") st.pooling = Pooling::Max2;
            else if (pool == "none") st.pooling = Pooling::None;
            else throw ConfigError("unknown pool '" + pool + "'");
            st.bias = s.value("bias", true);
            cfg.backbone.stages.push_back(st);
        }
    }
    if (j.contains("fatigue_branch")) cfg.fatigue_branch = lase_from_json(j.at("fatigue_branch"));
    if (j.contains("face_branch")) cfg.face_branch = lase_from_json(j.at("face_branch"));
    cfg.embedding_dim = j.value("embedding_dim", cfg.embedding_dim);
    cfg.face_classes = j.value("face_classes", cfg.face_classes);
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        cfg.arcface.margin = l.value("margin", cfg.arcface.margin);
        cfg.arcface.scale = l.value("scale", cfg.arcface.scale);
        cfg.arcface.subcenters = l.value("subcenters", cfg.arcface.subcenters);
    }
    const std::string layout = j.value("layout", std::string("tree"));
    if (layout == "tree") cfg.layout = Layout::Tree;
    else if (layout == "split") cfg.layout = Layout::Split;
    else throw ConfigError("unknown layout '" + layout + "'");
    return cfg;
}

}  // namespace treemtl
