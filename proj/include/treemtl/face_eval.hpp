#pragma once

// Face verification (one-to-one pairs), gallery identification and raw
// branch-feature export.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treemtl/data.hpp"
#include "treemtl/metrics.hpp"

namespace treemtl {

/// Runs `fn(first_index, output)` over the dataset in inference batches.
template <class T, class Fn>
void for_each_batch(const TreeModel<T>& model, const Dataset<T>& ds, std::size_t batch_size, Task task, Fn&& fn) {
    NoGradGuard guard;
    std::vector<std::size_t> idx;
    for (std::size_t start = 0; start < ds.size(); start += batch_size) {
        idx.clear();
        for (std::size_t i = start; i < std::min(ds.size(), start + batch_size); ++i) idx.push_back(i);
        Batch<T> b = make_batch(ds, idx);
        fn(start, model.forward_task(b.images, task).value());
    }
}

/// Unit embeddings (as double) for every image of a dataset.
template <class T>
std::vector<std::vector<double>> embed_all(const TreeModel<T>& model, const Dataset<T>& ds, std::size_t batch_size = 64) {
    std::vector<std::vector<double>> out(ds.size());
    for_each_batch(model, ds, batch_size, Task::Face, [&](std::size_t start, const Tensor<T>& e) {
        const std::size_t D = e.dim(1);
        for (std::size_t b = 0; b < e.dim(0); ++b) out[start + b].assign(e.data().begin() + b * D, e.data().begin() + (b + 1) * D);
    });
    return out;
}

/// Fatigue probabilities sigmoid(logit) for every image.
template <class T>
std::vector<double> fatigue_probabilities(const TreeModel<T>& model, const Dataset<T>& ds, std::size_t batch_size = 64) {
    std::vector<double> out(ds.size());
    for_each_batch(model, ds, batch_size, Task::Fatigue, [&](std::size_t start, const Tensor<T>& z) {
        for (std::size_t b = 0; b < z.dim(0); ++b) out[start + b] = ops::detail::stable_sigmoid(static_cast<double>(z[b]));
    });
    return out;
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionError("cosine_similarity: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0 || nb == 0) return 0.0;
    return dot / std::sqrt(na * nb);
}

struct FacePair {
    std::size_t a = 0;
    std::size_t b = 0;
    bool same = false;
};

/// Balanced same/different pairs over a labeled set, seeded.
inline std::vector<FacePair> make_pairs(std::span<const int> labels, std::size_t count, std::uint64_t seed) {
    std::map<int, std::vector<std::size_t>> by_id;
    for (std::size_t i = 0; i < labels.size(); ++i) by_id[labels[i]].push_back(i);
    std::vector<int> multi;
    for (const auto& [id, v] : by_id)
        if (v.size() >= 2) multi.push_back(id);
    if (multi.empty() || by_id.size() < 2) throw ConfigError("pair generation needs two identities and one with >= 2 images");
    std::vector<int> ids;
    for (const auto& [id, v] : by_id) ids.push_back(id);

    Rng rng(seed);
    auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng() % n); };
    std::vector<FacePair> pairs;
    pairs.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        if (k % 2 == 0) {
            const auto& v = by_id[multi[pick(multi.size())]];
            const std::size_t i = pick(v.size());
            std::size_t j = pick(v.size() - 1);
            if (j >= i) ++j;
            pairs.push_back({v[i], v[j], true});
        } else {
            const std::size_t x = pick(ids.size());
            std::size_t y = pick(ids.size() - 1);
            if (y >= x) ++y;
            const auto& va = by_id[ids[x]];
            const auto& vb = by_id[ids[y]];
            pairs.push_back({va[pick(va.size())], vb[pick(vb.size())], false});
        }
    }
    return pairs;
}

struct ThresholdAccuracy {
    double threshold = 0.0;
    double accuracy = 0.0;
};

/// Best accuracy over all decision thresholds ("same" iff score >= t). Ties
/// between thresholds keep the highest one found first.
inline ThresholdAccuracy best_threshold_accuracy(std::span<const double> scores, std::span<const int> same) {
    if (scores.size() != same.size() || scores.empty()) throw InputError("threshold sweep needs equal, non-empty inputs");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::size_t negatives = 0;
    for (int s : same) negatives += s == 0;
    // threshold above every score: everything predicted "different"
    std::size_t correct = negatives;
    ThresholdAccuracy best{std::numeric_limits<double>::infinity(), static_cast<double>(correct) / scores.size()};
    for (std::size_t k = 0; k < order.size();) {
        const double t = scores[order[k]];
        while (k < order.size() && scores[order[k]] == t) {
            correct += same[order[k]] != 0 ? 1 : std::size_t(-1);
            ++k;
        }
        const double acc = static_cast<double>(correct) / scores.size();
        if (acc > best.accuracy) best = {t, acc};
    }
    return best;
}

/// Accuracy of a fixed decision threshold.
inline double accuracy_at(std::span<const double> scores, std::span<const int> same, double threshold) {
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) correct += (scores[i] >= threshold) == (same[i] != 0);
    return static_cast<double>(correct) / scores.size();
}

struct VerificationResult {
    double accuracy = 0.0;
    double threshold = 0.0;
    RocCurve roc;
    std::vector<double> scores;
};

inline VerificationResult verify_scores(std::vector<double> scores, std::span<const int> same) {
    VerificationResult r;
    const auto best = best_threshold_accuracy(scores, same);
    r.accuracy = best.accuracy;
    r.threshold = best.threshold;
    r.roc = roc_auc(scores, same);
    r.scores = std::move(scores);
    return r;
}

/// One-to-one verification: cosine similarity of the two embeddings, scored
/// at the best threshold on the pair set.
template <class T>
VerificationResult verify_pairs(const TreeModel<T>& model, const Dataset<T>& ds, std::span<const FacePair> pairs, std::size_t batch_size = 64) {
    if (pairs.empty()) throw InputError("verify_pairs: empty pair list");
    const auto emb = embed_all(model, ds, batch_size);
    std::vector<double> scores;
    std::vector<int> same;
    for (const auto& p : pairs) {
        scores.push_back(cosine_similarity(emb.at(p.a), emb.at(p.b)));
        same.push_back(p.same ? 1 : 0);
    }
    return verify_scores(std::move(scores), same);
}

/// Identity database of unit reference embeddings.
class Gallery {
public:
    explicit Gallery(double threshold = 0.5) : threshold_(threshold) {}

    /// Stores the L2-normalized embedding under `id`.
    void add(int id, std::vector<double> embedding) {
        double n = 0;
        for (double v : embedding) n += v * v;
        n = std::sqrt(n);
        if (n == 0) throw InputError("gallery: zero embedding for identity " + std::to_string(id));
        for (auto& v : embedding) v /= n;
        if (dim_ == 0) dim_ = embedding.size();
        if (embedding.size() != dim_) throw DimensionError("gallery: embedding dimension mismatch");
        entries_[id].push_back(std::move(embedding));
    }

    bool empty() const { return entries_.empty(); }
    double threshold() const { return threshold_; }
    void set_threshold(double t) { threshold_ = t; }
    const std::map<int, std::vector<std::vector<double>>>& entries() const { return entries_; }

private:
    double threshold_;
    std::size_t dim_ = 0;
    std::map<int, std::vector<std::vector<double>>> entries_;
};

struct IdentifyResult {
    std::optional<int> identity;  // empty = unknown
    double similarity = -1.0;     // best similarity found
};

/// Highest-similarity identity if it reaches the gallery threshold; equal
/// similarities resolve to the lowest id.
inline IdentifyResult identify(std::span<const double> query, const Gallery& gallery) {
    if (gallery.empty()) throw ConfigError("identify: gallery is empty");
    double n = 0;
    for (double v : query) n += v * v;
    if (std::abs(std::sqrt(n) - 1.0) > 1e-4) throw InputError("identify: query is not unit-norm");
    IdentifyResult r;
    std::optional<int> best_id;
    for (const auto& [id, refs] : gallery.entries()) {
        for (const auto& ref : refs) {
            if (ref.size() != query.size()) throw DimensionError("identify: query dimension mismatch");
            double dot = 0;
            for (std::size_t i = 0; i < ref.size(); ++i) dot += ref[i] * query[i];
            if (!best_id || dot > r.similarity) {
                r.similarity = dot;
                best_id = id;
            }
        }
    }
    if (r.similarity >= gallery.threshold()) r.identity = best_id;
    return r;
}

// ---- feature export ------------------------------------------------------------

inline constexpr char kFeatureMagic[8] = {'T', 'M', 'T', 'L', 'F', 'E', 'A', 'T'};

template <class T>
struct BranchFeatures {
    std::vector<std::string> branches;          // "fatigue", "face"
    std::vector<std::vector<Tensor<T>>> records; // [branch][sample], each (H,W,C)
};

/// Writes the LASE-Net outputs of both branches for a batch. Layout: magic,
/// u64 header length, JSON header, then per branch and sample a u64 byte
/// length followed by the raw values.
template <class T>
void export_branch_features(const TreeModel<T>& model, const Tensor<T>& images, const std::filesystem::path& path) {
    NoGradGuard guard;
    auto out = model.forward_both(images);
    const std::vector<std::pair<std::string, const Tensor<T>*>> parts{{"fatigue", &out.fatigue_features.value()},
                                                                      {"face", &out.face_features.value()}};
    nlohmann::json header{{"version", 1}, {"dtype", sizeof(T) == 4 ? "f32" : "f64"}, {"count", images.dim(0)}};
    for (const auto& [name, t] : parts) header["branches"].push_back({{"name", name}, {"shape", {t->dim(1), t->dim(2), t->dim(3)}}});

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open feature export file: " + path.string());
    const std::string text = header.dump();
    const std::uint64_t len = text.size();
    f.write(kFeatureMagic, 8);
    f.write(reinterpret_cast<const char*>(&len), 8);
    f.write(text.data(), static_cast<std::streamsize>(len));
    for (const auto& [name, t] : parts) {
        const std::size_t per = t->size() / t->dim(0);
        const std::uint64_t bytes = per * sizeof(T);
        for (std::size_t b = 0; b < t->dim(0); ++b) {
            f.write(reinterpret_cast<const char*>(&bytes), 8);
            f.write(reinterpret_cast<const char*>(t->data().data() + b * per), static_cast<std::streamsize>(bytes));
        }
    }
    if (!f) throw IoError("failed writing feature export: " + path.string());
}

template <class T>
BranchFeatures<T> read_branch_features(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open feature export file: " + path.string());
    char magic[8];
    std::uint64_t len = 0;
    if (!f.read(magic, 8) || std::memcmp(magic, kFeatureMagic, 8) != 0) throw IoError("not a feature export: " + path.string());
    if (!f.read(reinterpret_cast<char*>(&len), 8)) throw IoError("truncated feature export: " + path.string());
    std::string text(len, '\0');
    if (!f.read(text.data(), static_cast<std::streamsize>(len))) throw IoError("truncated feature export: " + path.string());
    const auto header = nlohmann::json::parse(text);
    if (header.at("dtype") != (sizeof(T) == 4 ? "f32" : "f64")) throw IoError("feature export dtype mismatch: " + path.string());
    const std::size_t count = header.at("count");
    BranchFeatures<T> out;
    for (const auto& br : header.at("branches")) {
        out.branches.push_back(br.at("name"));
        const Shape shape = br.at("shape").get<Shape>();
        auto& recs = out.records.emplace_back();
        for (std::size_t b = 0; b < count; ++b) {
            std::uint64_t bytes = 0;
            if (!f.read(reinterpret_cast<char*>(&bytes), 8) || bytes != numel(shape) * sizeof(T))
                throw IoError("corrupt feature record in " + path.string());
            Tensor<T> t(shape);
            if (!f.read(reinterpret_cast<char*>(t.data().data()), static_cast<std::streamsize>(bytes)))
                throw IoError("truncated feature record in " + path.string());
            recs.push_back(std::move(t));
        }
    }
    return out;
}

}  // namespace treemtl
