#pragma once

#include <memory>

#include <nlohmann/json.hpp>

#include "treemtl/face_eval.hpp"

namespace treemtl {

template <class T>
struct TaskData {
    std::shared_ptr<const Dataset<T>> fatigue_train;
    std::shared_ptr<const Dataset<T>> face_train;
    std::shared_ptr<const Dataset<T>> fatigue_test;
    std::shared_ptr<const Dataset<T>> face_test;
};

struct EvalOptions {
    std::size_t pairs = 1000;
    std::uint64_t pair_seed = 7;
    double fatigue_threshold = 0.5;
    double identify_threshold = 0.5;
    std::size_t batch_size = 64;
};

struct EvalReport {
    ConfusionMatrix fatigue_cm;
    double fatigue_acc = 0.0;
    RocCurve fatigue_roc;
    VerificationResult verification;  // one-to-one pairs over the face test set
    double identification_acc = 0.0;  // gallery = per-identity mean train embedding
    std::size_t identification_unknown = 0;

    double face_acc() const { return verification.accuracy; }
    double avg_acc() const { return 0.5 * (fatigue_acc + face_acc()); }
};

/// Held-out metrics for both tasks. Face ACC is one-to-one verification
/// accuracy at the best threshold over seeded balanced pairs.
template <class T>
EvalReport evaluate(const TreeModel<T>& model, const TaskData<T>& data, const EvalOptions& opt = {}) {
    EvalReport r;
    const auto probs = fatigue_probabilities(model, *data.fatigue_test, opt.batch_size);
    const auto labels = data.fatigue_test->labels();
    r.fatigue_cm = confusion(probs, labels, opt.fatigue_threshold);
    r.fatigue_acc = accuracy(r.fatigue_cm);
    r.fatigue_roc = roc_auc(probs, labels);

    const auto face_labels = data.face_test->labels();
    const auto pairs = make_pairs(face_labels, opt.pairs, opt.pair_seed);
    r.verification = verify_pairs(model, *data.face_test, pairs, opt.batch_size);

    Gallery gallery(opt.identify_threshold);
    if (data.face_train) {
        const auto train_emb = embed_all(model, *data.face_train, opt.batch_size);
        std::map<int, std::vector<double>> sums;
        for (std::size_t i = 0; i < train_emb.size(); ++i) {
            auto& s = sums[data.face_train->label(i)];
            if (s.empty()) s.assign(train_emb[i].size(), 0.0);
            for (std::size_t d = 0; d < s.size(); ++d) s[d] += train_emb[i][d];
        }
        for (auto& [id, s] : sums) gallery.add(id, s);
        const auto test_emb = embed_all(model, *data.face_test, opt.batch_size);
        std::size_t correct = 0;
        for (std::size_t i = 0; i < test_emb.size(); ++i) {
            const auto res = identify(test_emb[i], gallery);
            if (!res.identity) ++r.identification_unknown;
            else if (*res.identity == face_labels[i]) ++correct;
        }
        r.identification_acc = test_emb.empty() ? 0.0 : static_cast<double>(correct) / test_emb.size();
    }
    return r;
}

inline nlohmann::json to_json(const EvalReport& r) {
    return {{"fatigue_acc", r.fatigue_acc},
            {"face_acc", r.face_acc()},
            {"avg_acc", r.avg_acc()},
            {"fatigue_auc", r.fatigue_roc.auc},
            {"face_auc", r.verification.roc.auc},
            {"face_verification_threshold", r.verification.threshold},
            {"face_identification_acc", r.identification_acc},
            {"face_identification_unknown", r.identification_unknown},
            {"fatigue_confusion", {{"tp", r.fatigue_cm.tp}, {"fp", r.fatigue_cm.fp}, {"tn", r.fatigue_cm.tn}, {"fn", r.fatigue_cm.fn}}}};
}

inline void write_roc_csv(const std::filesystem::path& path, const RocCurve& roc) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write ROC file: " + path.string());
    f.precision(17);
    f << "threshold,fpr,tpr\n";
    for (const auto& p : roc.points) f << p.threshold << ',' << p.fpr << ',' << p.tpr << '\n';
}

}  // namespace treemtl
