#include <gtest/gtest.h>

#include <set>

#include "support.hpp"

using namespace treemtl;
using namespace treemtl::testing;

namespace {

TreeModel<double> tiny_model(std::uint64_t seed = 1, ModelConfig cfg = tiny_config()) {
    TreeModel<double> m(cfg);
    m.init(seed);
    return m;
}

Tensor<double> relu_ref(Tensor<double> t) {
    for (auto& v : t.data()) v = std::max(v, 0.0);
    return t;
}

std::vector<double> lase_ref(const Tensor<double>& x, LASENet<double>& net) {
    auto la = lanet_ref(x, *net.lanet());
    auto se = senet_ref(x, *net.senet());
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + la.features[i] + se.features[i];
    return out;
}

}  // namespace

TEST(TreeModel, MatchesScalarReferenceForward) {
    auto m = tiny_model(3);
    std::mt19937_64 rng(4);
    auto x = random_tensor({2, 16, 16, 1}, rng);
    Tensor<double> h = x;
    for (auto& conv : m.root().convs()) h = relu_ref(conv_ref(h, conv.weight().value(), &conv.bias().value(), 2, 1));

    auto fat = lase_ref(h, m.fatigue_branch().lase());
    auto logit = linear_ref(fat, 2, m.fatigue_branch().head().weight().value(), &m.fatigue_branch().head().bias().value());
    auto face = lase_ref(h, m.face_branch().lase());
    auto emb = linear_ref(face, 2, m.face_branch().head().weight().value(), &m.face_branch().head().bias().value());
    for (std::size_t i = 0; i < 2; ++i) {
        double ss = 0;
        for (std::size_t d = 0; d < 6; ++d) ss += emb[i * 6 + d] * emb[i * 6 + d];
        for (std::size_t d = 0; d < 6; ++d) emb[i * 6 + d] /= std::sqrt(ss);
    }

    auto out = m.forward_both(x);
    EXPECT_LT(max_abs_diff(out.shared.value().data(), h.data()), 1e-12);
    EXPECT_LT(max_abs_diff(out.fatigue_logit.value().data(), logit), 1e-12);
    EXPECT_LT(max_abs_diff(out.embedding.value().data(), emb), 1e-12);
}

TEST(TreeModel, ForwardBothAgreesWithPerTaskPaths) {
    auto m = tiny_model(5);
    std::mt19937_64 rng(6);
    auto x = random_tensor({3, 16, 16, 1}, rng);
    auto both = m.forward_both(x);
    EXPECT_EQ(both.fatigue_logit.value(), m.forward_task(x, Task::Fatigue).value());
    EXPECT_EQ(both.embedding.value(), m.forward_task(x, "face").value());
    EXPECT_EQ(both.shared.node(), both.shared_face.node());
}

TEST(TreeModel, OutputShapesAndUnitEmbeddings) {
    ModelConfig cfg;  // desk default: 112x112x1, 512-d embedding
    TreeModel<float> m(cfg);
    m.init(2);
    std::mt19937_64 rng(7);
    auto x = random_tensor<float>({2, 112, 112, 1}, rng);
    auto out = m.forward_both(x);
    EXPECT_EQ(out.fatigue_logit.shape(), (Shape{2, 1}));
    ASSERT_EQ(out.embedding.shape(), (Shape{2, 512}));
    EXPECT_EQ(out.shared.shape(), (Shape{2, 7, 7, 64}));
    for (std::size_t i = 0; i < 2; ++i) {
        double ss = 0;
        for (std::size_t d = 0; d < 512; ++d) ss += double(out.embedding.value()[i * 512 + d]) * out.embedding.value()[i * 512 + d];
        EXPECT_NEAR(ss, 1.0, 1e-5);
    }
}

TEST(TreeModel, ZeroWeightsLeaveOnlyHeadBias) {
    auto m = tiny_model();
    m.zero_parameters();
    m.fatigue_branch().head().bias().value().fill(0.7);
    std::mt19937_64 rng(8);
    auto x = random_tensor({4, 16, 16, 1}, rng, -5, 5);
    const auto logits = m.forward_task(x, Task::Fatigue).value();
    for (double v : logits.data()) EXPECT_EQ(v, 0.7);
}

TEST(TreeModel, InputErrors) {
    auto m = tiny_model();
    EXPECT_THROW(m.forward_both(Tensor<double>({1, 16, 15, 1})), InputError);
    EXPECT_THROW(m.forward_both(Tensor<double>({1, 16, 16, 3})), InputError);
    EXPECT_THROW(m.forward_both(Tensor<double>({0, 16, 16, 1})), InputError);
    EXPECT_THROW(m.forward_both(Tensor<double>({16, 16, 1})), InputError);
    EXPECT_THROW(m.forward_task(Tensor<double>({1, 16, 16, 1}), "gaze"), InputError);
}

TEST(TreeModel, ConfigErrors) {
    auto cfg = tiny_config();
    cfg.fatigue_branch.lanet.reduction = 3;  // 8 channels not divisible by 3
    EXPECT_THROW(TreeModel<double>{cfg}, ConfigError);
    cfg = tiny_config();
    cfg.backbone.stages.push_back(StageSpec{7, 8, 1});  // 4x4 input, no padding
    cfg.backbone.stages.back().padding = 0;
    EXPECT_THROW(TreeModel<double>{cfg}, ConfigError);
    cfg = tiny_config();
    cfg.embedding_dim = 0;
    EXPECT_THROW(TreeModel<double>{cfg}, ConfigError);
}

TEST(TreeModel, ParameterGroupsPartitionTheModel) {
    auto m = tiny_model();
    std::set<const void*> seen;
    std::size_t total = 0;
    for (Group g : {Group::Root, Group::Fatigue, Group::Face}) {
        for (auto* p : m.parameters(g)) {
            EXPECT_TRUE(seen.insert(p).second) << p->name;
            ++total;
            if (g == Group::Root) EXPECT_EQ(p->name.rfind("root.", 0), 0u) << p->name;
            if (g == Group::Fatigue) EXPECT_EQ(p->name.rfind("fatigue.", 0), 0u) << p->name;
        }
    }
    EXPECT_EQ(total, m.parameters().size());
    auto face = m.parameters(Group::Face);
    EXPECT_TRUE(std::find(face.begin(), face.end(), &m.classifier().weight()) != face.end());
    std::set<std::string> names;
    for (auto* p : m.parameters()) EXPECT_TRUE(names.insert(p->name).second) << p->name;
}

TEST(TreeModel, FatigueLossLeavesFaceGradientsZero) {
    auto m = tiny_model(9);
    std::mt19937_64 rng(10);
    auto x = random_tensor({3, 16, 16, 1}, rng);
    m.zero_grad();
    backward(bce_loss(m.forward_task(x, Task::Fatigue), std::vector<int>{0, 1, 1}).loss);
    for (auto* p : m.parameters(Group::Face))
        for (double g : p->var.grad().data()) ASSERT_EQ(g, 0.0) << p->name;
    double root_norm = 0;
    for (auto* p : m.parameters(Group::Root))
        for (double g : p->var.grad().data()) root_norm += g * g;
    EXPECT_GT(root_norm, 0.0);

    m.zero_grad();
    backward(arcface_subcenter_loss(m.forward_task(x, Task::Face), std::vector<int>{0, 2, 3}, m.classifier()).loss);
    for (auto* p : m.parameters(Group::Fatigue))
        for (double g : p->var.grad().data()) ASSERT_EQ(g, 0.0) << p->name;
}

TEST(TreeModel, SplitLayoutHasIndependentRoots) {
    auto cfg = tiny_config();
    cfg.layout = Layout::Split;
    auto m = tiny_model(11, cfg);
    EXPECT_EQ(m.root_count(), 2u);
    EXPECT_TRUE(m.parameters(Group::Root).empty());
    auto tree = tiny_model(11);
    std::size_t split_n = 0, tree_n = 0;
    for (auto* p : m.parameters()) split_n += p->size();
    for (auto* p : tree.parameters()) tree_n += p->size();
    std::size_t root_n = 0;
    for (auto* p : tree.parameters(Group::Root)) root_n += p->size();
    EXPECT_EQ(split_n, tree_n + root_n);

    std::mt19937_64 rng(12);
    auto x = random_tensor({2, 16, 16, 1}, rng);
    auto out = m.forward_both(x);
    EXPECT_NE(out.shared.value(), out.shared_face.value());
    m.zero_grad();
    backward(bce_loss(out.fatigue_logit, std::vector<int>{1, 0}).loss);
    for (auto& conv : m.root(1).convs())
        for (double g : conv.weight().var.grad().data()) ASSERT_EQ(g, 0.0);
}

TEST(TreeModel, InitIsDeterministicPerSeed) {
    auto a = tiny_model(21), b = tiny_model(21), c = tiny_model(22);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_EQ(pa[i]->value(), pb[i]->value());
        any_diff |= !(pa[i]->value() == pc[i]->value());
    }
    EXPECT_TRUE(any_diff);
}

TEST(ModelConfig, JsonRoundTrip) {
    auto cfg = tiny_config(3);
    cfg.backbone.stages[1].pooling = Pooling::Max2;
    cfg.backbone.stages[0].bias = false;
    cfg.face_branch.use_senet = false;
    cfg.arcface = {0.3, 30.0, 2};
    cfg.layout = Layout::Split;
    const auto j = to_json(cfg);
    EXPECT_EQ(to_json(model_config_from_json(j)), j);
    EXPECT_THROW(model_config_from_json(nlohmann::json{{"layout", "forest"}}), ConfigError);
}
