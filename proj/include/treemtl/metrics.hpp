#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <string>
#include <numeric>
#include <span>
#include <vector>

#include "treemtl/errors.hpp"

namespace treemtl {

struct ConfusionMatrix {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

    std::uint64_t total() const { return tp + fp + tn + fn; }
    friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

/// (TP + TN) / total
inline double accuracy(const ConfusionMatrix& cm) {
    if (cm.total() == 0) throw UndefinedMetricError("accuracy of an empty confusion matrix");
    return static_cast<double>(cm.tp + cm.tn) / static_cast<double>(cm.total());
}

/// Positive iff p >= threshold.
inline ConfusionMatrix confusion(std::span<const double> probabilities, std::span<const int> labels, double threshold = 0.5) {
    if (probabilities.size() != labels.size())
        throw InputError("confusion: " + std::to_string(probabilities.size()) + " scores vs " + std::to_string(labels.size()) + " labels");
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const bool pred = probabilities[i] >= threshold;
        const bool pos = labels[i] != 0;
        if (pred && pos) ++cm.tp;
        else if (pred) ++cm.fp;
        else if (pos) ++cm.fn;
        else ++cm.tn;
    }
    return cm;
}

struct RocPoint {
    double threshold;
    double fpr;
    double tpr;
};

struct RocCurve {
    std::vector<RocPoint> points;  // starts at (0,0), ends at (1,1)
    double auc = 0.0;
};

/// Threshold sweep over the distinct scores (descending), predicting positive
/// when score >= threshold. The area is the trapezoidal sum, accumulated in
/// integer units so tied scores earn exactly half credit.
inline RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw InputError("roc_auc: score/label length mismatch");
    std::uint64_t P = 0, N = 0;
    for (int y : labels) (y != 0 ? P : N) += 1;
    if (P == 0 || N == 0) throw UndefinedMetricError("roc_auc needs both positive and negative samples");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocCurve roc;
    roc.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    std::uint64_t tp = 0, fp = 0;
    unsigned __int128 twice_area = 0;  // sum of dFP * (TP_prev + TP_cur)
    for (std::size_t k = 0; k < order.size();) {
        const double s = scores[order[k]];
        const std::uint64_t tp0 = tp, fp0 = fp;
        while (k < order.size() && scores[order[k]] == s) {
            (labels[order[k]] != 0 ? tp : fp) += 1;
            ++k;
        }
        twice_area += static_cast<unsigned __int128>(fp - fp0) * (tp0 + tp);
        roc.points.push_back({s, static_cast<double>(fp) / N, static_cast<double>(tp) / P});
    }
    roc.auc = static_cast<double>(twice_area) / (2.0 * static_cast<double>(P) * static_cast<double>(N));
    return roc;
}

}  // namespace treemtl
