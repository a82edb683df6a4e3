// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <numbers>
#include <sstream>

#include "support.hpp"
#include "treemtl/commands.hpp"

using namespace treemtl;
using namespace treemtl::testing;

namespace {

const std::filesystem::path kConfigs = std::filesystem::path(TREEMTL_SOURCE_DIR) / "configs";

struct Outcome {
    bool pass;
    std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof(buf), f, args...);
    return buf;
}

// ---- 1: finite-difference gradient suite ---------------------------------------

Outcome gradient_suite() {
    const auto t0 = std::chrono::steady_clock::now();
    constexpr std::size_t kProbes = 120;
    std::mt19937_64 rng(2024);
    std::vector<std::pair<std::string, GradCheckReport>> reports;

    {
        LANet<double> net("lanet", Group::Fatigue, 8, {4});
        Rng init(1);
        net.init(init);
        std::vector<Parameter<double>*> ps;
        net.collect(ps);
        Var<double> x(random_tensor({2, 5, 5, 8}, rng), true);
        auto leaves = leaves_of(ps);
        leaves.emplace_back("x", x);
        const auto r = random_tensor({2, 5, 5, 8}, rng);
        reports.emplace_back("LANet", check_gradients(leaves, [&] { return project(net.forward(x).features, r); }, kProbes, 11));
    }
    {
        SENet<double> net("senet", Group::Fatigue, 8, {4});
        Rng init(2);
        net.init(init);
        std::vector<Parameter<double>*> ps;
        net.collect(ps);
        Var<double> x(random_tensor({2, 4, 4, 8}, rng), true);
        auto leaves = leaves_of(ps);
        leaves.emplace_back("x", x);
        const auto r = random_tensor({2, 4, 4, 8}, rng);
        reports.emplace_back("SENet", check_gradients(leaves, [&] { return project(net.forward(x).features, r); }, kProbes, 12));
    }
    {
        LASENet<double> net("lase", Group::Face, 8, LASEConfig{true, true, {4}, {2}});
        Rng init(3);
        net.init(init);
        std::vector<Parameter<double>*> ps;
        net.collect(ps);
        Var<double> x(random_tensor({2, 4, 4, 8}, rng), true);
        auto leaves = leaves_of(ps);
        leaves.emplace_back("x", x);
        const auto r = random_tensor({2, 4, 4, 8}, rng);
        reports.emplace_back("LASE", check_gradients(leaves, [&] { return project(net.forward(x), r); }, kProbes, 13));
    }
    {
        Var<double> z(random_tensor({40, 1}, rng, -4, 4), true);
        std::vector<int> y(40);
        for (auto& v : y) v = int(rng() % 2);
        reports.emplace_back("BCE", check_gradients({{"logits", z}}, [&] { return bce_loss(z, y).loss; }, kProbes, 14));
    }
    {
        SubcenterClassifier<double> clf(8, 5, {0.5, 20.0, 3});
        Rng init(4);
        clf.init(init);
        Var<double> x(unit_rows(6, 8, rng), true);
        std::vector<int> y{0, 1, 2, 3, 4, 2};
        reports.emplace_back("ArcFace", check_gradients({{"embeddings", x}, {"W", clf.weight().var}},
                                                        [&] { return arcface_subcenter_loss(x, y, clf).loss; }, kProbes, 15));
    }

    bool ok = true;
    std::string detail;
    for (const auto& [name, rep] : reports) {
        ok = ok && rep.probes >= 100 && rep.max_rel_err <= 1e-3;
        detail += fmt("%s %zu probes max rel %.2e; ", name.c_str(), rep.probes, rep.max_rel_err);
    }
    const double secs = seconds_since(t0);
    ok = ok && secs < 120;
    return {ok, detail + fmt("%.1f s", secs)};
}

// ---- shared tiny training fixtures ----------------------------------------------

SyntheticData<double> tiny_data() {
    SyntheticSpec spec;
    spec.image = {16, 16, 1};
    spec.identities = 4;
    spec.fatigue_per_class = 10;
    spec.face_per_identity = 5;
    return generate_synthetic<double>(spec);
}

double sq_norm(const std::vector<Parameter<double>*>& ps, bool grads) {
    double s = 0;
    for (auto* p : ps)
        for (double v : (grads ? p->var.grad() : p->value()).data()) s += v * v;
    return s;
}

// ---- 2: accumulated gradient equals joint-graph gradient -----------------------

Outcome grad_accum_equivalence() {
    auto data = tiny_data();
    std::mt19937_64 rng(5);
    double worst = 0;
    for (int trial = 0; trial < 20; ++trial) {
        TreeModel<double> m(tiny_config());
        m.init(500 + trial);
        const double w = std::uniform_real_distribution<>(0, 1)(rng);
        auto fb = make_batch(*data.fatigue, batches(*data.fatigue, 6, trial, 0).front());
        auto cb = make_batch(*data.face, batches(*data.face, 6, trial + 77, 0).front());
        auto ps = m.parameters();

        m.zero_grad();
        accumulate_gradients(m, fb, cb, w);
        std::vector<Tensor<double>> acc;
        for (auto* p : ps) acc.push_back(p->var.grad());

        m.zero_grad();
        auto lf = task_loss(m, fb, Task::Fatigue);
        auto lc = task_loss(m, cb, Task::Face);
        backward(ops::add(ops::scale(lf.loss, w), ops::scale(lc.loss, 1.0 - w)));
        for (std::size_t i = 0; i < ps.size(); ++i) worst = std::max(worst, max_abs_diff(acc[i].data(), ps[i]->var.grad().data()));
    }
    return {worst <= 1e-10, fmt("20 instances, max |diff| %.2e", worst)};
}

// ---- 3: freeze invariant under alternating updation ----------------------------

Outcome freeze_invariant() {
    auto data = tiny_data();
    TreeModel<double> m(tiny_config());
    m.init(31);
    TrainingConfig cfg;
    auto state = make_train_state<double>(cfg);
    BatchStream fs(data.fatigue->size(), 6, 1, 0), cs(data.face->size(), 6, 2, 0);
    std::size_t violations = 0, root_checks = 0, sub_steps = 0;
    for (int step = 0; step < 100; ++step) {
        auto fb = make_batch(*data.fatigue, fs.next());
        auto cb = make_batch(*data.face, cs.next());
        for (Task task : {Task::Fatigue, Task::Face}) {
            const auto& batch = task == Task::Fatigue ? fb : cb;
            const Group frozen = task == Task::Fatigue ? Group::Face : Group::Fatigue;
            m.zero_grad();
            backward(task_loss(m, batch, task).loss);
            const double root_grad = sq_norm(m.parameters(Group::Root), true);
            m.zero_grad();

            std::vector<Tensor<double>> frozen_before, root_before;
            for (auto* p : m.parameters(frozen)) frozen_before.push_back(p->value());
            for (auto* p : m.parameters(Group::Root)) root_before.push_back(p->value());
            alternating_sub_step(m, batch, task, state);
            ++sub_steps;

            auto fz = m.parameters(frozen);
            for (std::size_t i = 0; i < fz.size(); ++i) violations += !(fz[i]->value() == frozen_before[i]);
            if (root_grad > 0) {
                ++root_checks;
                bool changed = false;
                auto rt = m.parameters(Group::Root);
                for (std::size_t i = 0; i < rt.size(); ++i) changed |= !(rt[i]->value() == root_before[i]);
                violations += !changed;
            }
        }
    }
    return {violations == 0 && sub_steps == 200,
            fmt("%zu sub-steps, %zu root-change checks, %zu violations", sub_steps, root_checks, violations)};
}

// ---- 4: ArcFace degenerate case and margin monotonicity ------------------------

Outcome arcface_properties() {
    std::mt19937_64 rng(6);
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t B = 1 + rng() % 6, D = 2 + rng() % 8, N = 2 + rng() % 6;
        SubcenterClassifier<double> clf(D, N, {0.0, 1.0, 1});
        Rng init(600 + trial);
        clf.init(init);
        auto x = unit_rows(B, D, rng);
        std::vector<int> y(B);
        for (auto& v : y) v = int(rng() % N);
        const double loss = arcface_subcenter_loss(Var<double>(x), y, clf).scalar();
        const auto& w = clf.weight().value();
        double ref = 0;
        for (std::size_t i = 0; i < B; ++i) {
            std::vector<double> z(N, 0.0);
            for (std::size_t j = 0; j < N; ++j)
                for (std::size_t d = 0; d < D; ++d) z[j] += w[d * N + j] * x[i * D + d];
            double mx = *std::max_element(z.begin(), z.end()), s = 0;
            for (double v : z) s += std::exp(v - mx);
            ref += mx + std::log(s) - z[y[i]];
        }
        worst = std::max(worst, std::abs(loss - ref / double(B)));
    }

    std::size_t checked = 0, violations = 0;
    for (int trial = 0; trial < 50; ++trial) {
        SubcenterClassifier<double> m0(8, 5, {0.0, 20.0, 3}), m5(8, 5, {0.5, 20.0, 3});
        Rng init(700 + trial);
        m0.init(init);
        m5.weight().value() = m0.weight().value();
        auto x = unit_rows(4, 8, rng);
        std::vector<int> y(4);
        for (auto& v : y) v = int(rng() % 5);
        const auto l0 = arcface_subcenter_loss(Var<double>(x), y, m0).per_sample;
        const auto l5 = arcface_subcenter_loss(Var<double>(x), y, m5).per_sample;
        const auto& w = m0.weight().value();
        for (std::size_t i = 0; i < 4; ++i) {
            double best = -1;
            for (std::size_t k = 0; k < 3; ++k) {
                double dot = 0;
                for (std::size_t d = 0; d < 8; ++d) dot += w[(d * 5 + y[i]) * 3 + k] * x[i * 8 + d];
                best = std::max(best, dot);
            }
            if (std::acos(std::clamp(best, -1.0, 1.0)) + 0.5 > std::numbers::pi) continue;
            ++checked;
            violations += l5[i] < l0[i];
        }
    }
    return {worst <= 1e-12 && violations == 0 && checked > 0,
            fmt("50 instances max |diff| %.2e; margin check %zu samples, %zu violations", worst, checked, violations)};
}

// ---- 5: synthetic end-to-end ------------------------------------------------------

Outcome end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, EvalReport>> results;
    for (const char* regime : {"alternating", "grad_accum"}) {
        const auto rc = load_run_config(kConfigs / "synthetic.toml", {std::string("training.regime=") + regime});
        const auto data = load_task_data(rc);
        TreeModel<float> model(rc.model);
        model.init(rc.seed);
        auto state = make_train_state<float>(rc.training);
        run_training(model, *data.fatigue_train, *data.face_train, rc.training, state);
        results.emplace_back(regime, evaluate(model, data, rc.data.eval));
        std::cerr << "  " << regime << " trained (" << rc.training.epochs << " epochs), " << seconds_since(t0) << " s elapsed\n";
    }
    const double secs = seconds_since(t0);
    bool ok = secs < 600;
    std::string detail;
    for (const auto& [name, r] : results) {
        ok = ok && r.fatigue_acc >= 0.95 && r.face_acc() >= 0.95;
        detail += fmt("%s ACC(D) %.4f ACC(F) %.4f; ", name.c_str(), r.fatigue_acc, r.face_acc());
    }
    const double gap = std::max(std::abs(results[0].second.fatigue_acc - results[1].second.fatigue_acc),
                                std::abs(results[0].second.face_acc() - results[1].second.face_acc()));
    ok = ok && gap <= 0.05;
    return {ok, detail + fmt("regime gap %.4f; %.0f s", gap, secs)};
}

// ---- 6: tree vs split parameter count ---------------------------------------------

Outcome compare_tree_split() {
    TempDir dir("accept_compare");
    std::ostringstream out, err;
    std::vector<CompareRow> rows;
    const int code = cmd_compare({kConfigs / "synthetic.toml"}, {"output_dir=" + dir.path().string()}, {.add_split = true},
                                 {out, err}, &rows);
    if (code != kExitOk || rows.size() != 2) return {false, "compare failed: " + err.str()};
    const auto tree = rows[0].cost.total_params(), split = rows[1].cost.total_params();
    return {rows[0].model.layout == Layout::Tree && rows[1].model.layout == Layout::Split && tree < split,
            fmt("tree %llu params, split %llu params", (unsigned long long)tree, (unsigned long long)split)};
}

// ---- 7: metrics against brute-force oracles -----------------------------------------

Outcome metric_oracles() {
    std::mt19937_64 rng(7);
    std::size_t auc_mismatch = 0, cm_mismatch = 0, identity_mismatch = 0;
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 2 + rng() % 199;
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = trial % 2 ? double(rng() % 9) / 8.0 : std::uniform_real_distribution<>(0, 1)(rng);
            y[i] = int(rng() % 2);
        }
        y[0] = 1;
        y[1] = 0;
        double good = 0, pairs = 0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (y[i] == 1 && y[j] == 0) {
                    pairs += 1;
                    good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
                }
        auc_mismatch += roc_auc(s, y).auc != good / pairs;

        std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const bool pred = s[i] >= 0.5;
            tp += pred && y[i];
            fp += pred && !y[i];
            tn += !pred && !y[i];
            fn += !pred && y[i];
        }
        const auto cm = confusion(s, y, 0.5);
        cm_mismatch += !(cm == ConfusionMatrix{tp, fp, tn, fn}) || accuracy(cm) != double(tp + tn) / double(n);
        identity_mismatch += std::abs(accuracy(cm) - (1.0 - double(cm.fp + cm.fn) / double(cm.total()))) > 1e-15;
    }
    return {auc_mismatch + cm_mismatch + identity_mismatch == 0,
            fmt("300 instances (n<=200): AUC mismatches %zu, confusion/ACC mismatches %zu, identity mismatches %zu", auc_mismatch,
                cm_mismatch, identity_mismatch)};
}

// ---- 8: FLOP/param counter against hand counts ----------------------------------

Outcome cost_hand_counts() {
    std::vector<std::string> bad;
    {
        BackboneSpec spec;
        spec.input = {8, 8, 4};
        StageSpec st{1, 2, 1};
        st.bias = false;
        st.activation = Activation::None;
        spec.stages = {st};
        const auto r = count_cost(spec);
        if (r.total_params() != 8 || r.total_flops() != 1024) bad.push_back("single conv");
    }
    {
        ModelConfig cfg;
        cfg.backbone.input = {4, 4, 1};
        cfg.backbone.stages = {StageSpec{3, 2, 1}};
        cfg.fatigue_branch.use_lanet = cfg.fatigue_branch.use_senet = false;
        cfg.face_branch.use_lanet = cfg.face_branch.use_senet = false;
        cfg.embedding_dim = 3;
        const auto r = count_cost(cfg);
        // conv 3x3 1->2 with bias and relu on 4x4; fc 32->1 and 32->3 with bias; l2 normalize 2*3
        const std::uint64_t params = (18 + 2) + (32 + 1) + (96 + 3);
        const std::uint64_t flops = (2 * 32 * 9 + 32 + 32) + (64 + 1) + (192 + 3 + 6);
        if (r.total_params() != params || r.total_flops() != flops) bad.push_back("conv+fc");
    }
    {
        const auto r = count_cost(ModelConfig{});
        if (r.total_params() != 1671195 || r.total_flops() != 22453109 || r.group_params(Group::Root) != 60224)
            bad.push_back("desk tree");
    }
    std::string detail = "single conv 8 params/1024 FLOPs, conv+FC, desk tree 1671195 params/22453109 FLOPs";
    for (const auto& b : bad) detail += "; mismatch: " + b;
    return {bad.empty(), detail};
}

// ---- 9: determinism and checkpoint round-trip -----------------------------------

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
    TempDir dir("accept_det");
    const std::vector<std::string> small{"model.input=[32,32,1]", "model.embedding_dim=32", "training.epochs=2",
                                         "data.synthetic.fatigue_per_class=20", "data.synthetic.face_per_identity=6",
                                         "data.synthetic.test_fatigue_per_class=10", "data.synthetic.test_face_per_identity=4",
                                         "data.eval_pairs=100"};
    std::ostringstream out, err;
    std::vector<std::string> bytes;
    for (const char* run : {"a", "b"}) {
        auto o = small;
        o.push_back("output_dir=" + (dir / run).string());
        if (cmd_train(kConfigs / "synthetic.toml", o, {out, err}) != kExitOk) return {false, "train failed: " + err.str()};
        bytes.push_back(slurp(dir / run / "model.ckpt"));
    }
    const bool same_ckpt = bytes[0] == bytes[1] && slurp(dir / "a" / "checkpoints" / "epoch_001.ckpt") ==
                                                       slurp(dir / "b" / "checkpoints" / "epoch_001.ckpt");

    auto rc = load_run_config(kConfigs / "synthetic.toml", small);
    const auto data = load_task_data(rc);
    TreeModel<float> model(rc.model);
    model.init(rc.seed);
    auto state = make_train_state<float>(rc.training);
    run_training(model, *data.fatigue_train, *data.face_train, rc.training, state);
    save_checkpoint(model, dir / "roundtrip.ckpt", &state);
    auto loaded = load_checkpoint<float>(dir / "roundtrip.ckpt", &rc.model);
    const bool same_as_cli = slurp(dir / "roundtrip.ckpt") == bytes[0];
    std::vector<std::size_t> idx(16);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    const auto batch = make_batch(*data.face_test, idx);
    const auto a = model.forward_both(batch.images), b = loaded.model.forward_both(batch.images);
    const bool same_forward =
        a.fatigue_logit.value() == b.fatigue_logit.value() && a.embedding.value() == b.embedding.value();
    return {same_ckpt && same_forward && same_as_cli,
            fmt("checkpoints identical across runs: %s; in-process run matches CLI: %s; round-trip forward bit-exact: %s",
                same_ckpt ? "yes" : "no", same_as_cli ? "yes" : "no", same_forward ? "yes" : "no")};
}

}  // namespace

int main() {
    ::unsetenv("TREEMTL_OUT");
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient finite-difference suite", gradient_suite},
        {"grad_accum equals joint-graph gradient", grad_accum_equivalence},
        {"alternating freeze invariant", freeze_invariant},
        {"ArcFace reduces to softmax-CE; margin never lowers loss", arcface_properties},
        {"synthetic end-to-end, both regimes", end_to_end},
        {"compare: tree params < split params", compare_tree_split},
        {"metrics match brute-force oracles", metric_oracles},
        {"FLOP/param counter matches hand counts", cost_hand_counts},
        {"determinism and checkpoint round-trip", determinism},
    };
    int failures = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << ": " << criteria[i].first << " (" << o.detail << ")"
                  << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
