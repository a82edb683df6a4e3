#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "treemtl/model.hpp"

namespace treemtl {

/// Per-channel affine normalization applied to [0,1] pixels.
struct Normalization {
    std::vector<double> mean{0.5};
    std::vector<double> std{0.25};

    double mean_of(std::size_t c) const { return mean.size() == 1 ? mean[0] : mean.at(c); }
    double std_of(std::size_t c) const { return std.size() == 1 ? std[0] : std.at(c); }
};

template <class T>
struct Batch {
    Tensor<T> images;  // (B,H,W,C), normalized
    std::vector<int> labels;

    std::size_t size() const { return labels.size(); }
};

/// Labeled images of a single task. Images are served normalized.
template <class T>
class Dataset {
public:
    virtual ~Dataset() = default;
    virtual std::size_t size() const = 0;
    virtual int label(std::size_t i) const = 0;
    virtual ImageShape image_shape() const = 0;
    /// Raw pixels in [0,1] (nominal), HWC order.
    virtual std::span<const float> raw(std::size_t i) const = 0;
    virtual const Normalization& normalization() const = 0;
    virtual Task task() const = 0;

    void load(std::size_t i, std::span<T> out) const {
        const auto px = raw(i);
        const auto& n = normalization();
        const std::size_t C = image_shape().channels;
        for (std::size_t k = 0; k < px.size(); ++k) {
            const std::size_t c = k % C;
            out[k] = static_cast<T>((static_cast<double>(px[k]) - n.mean_of(c)) / n.std_of(c));
        }
    }

    std::vector<int> labels() const {
        std::vector<int> out(size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = label(i);
        return out;
    }
};

template <class T>
Batch<T> make_batch(const Dataset<T>& ds, std::span<const std::size_t> indices) {
    const ImageShape s = ds.image_shape();
    const std::size_t per = s.height * s.width * s.channels;
    Batch<T> b{Tensor<T>({indices.size(), s.height, s.width, s.channels}), {}};
    b.labels.reserve(indices.size());
    for (std::size_t k = 0; k < indices.size(); ++k) {
        ds.load(indices[k], b.images.data().subspan(k * per, per));
        b.labels.push_back(ds.label(indices[k]));
    }
    return b;
}

/// Images held in memory as float pixels.
template <class T>
class InMemoryDataset final : public Dataset<T> {
public:
    InMemoryDataset(Task task, ImageShape shape, Normalization norm) : task_(task), shape_(shape), norm_(std::move(norm)) {}

    void add(std::vector<float> pixels, int label) {
        if (pixels.size() != shape_.height * shape_.width * shape_.channels)
            throw DimensionError("image pixel count does not match dataset shape");
        pixels_.push_back(std::move(pixels));
        labels_.push_back(label);
    }

    std::size_t size() const override { return labels_.size(); }
    int label(std::size_t i) const override { return labels_.at(i); }
    ImageShape image_shape() const override { return shape_; }
    std::span<const float> raw(std::size_t i) const override { return pixels_.at(i); }
    const Normalization& normalization() const override { return norm_; }
    Task task() const override { return task_; }
    void set_normalization(Normalization n) { norm_ = std::move(n); }

private:
    Task task_;
    ImageShape shape_;
    Normalization norm_;
    std::vector<std::vector<float>> pixels_;
    std::vector<int> labels_;
};

// ---- batching ----------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seeded permutation of [0, n) for one epoch, cut into batches; the last
/// batch may be short.
inline std::vector<std::vector<std::size_t>> batches(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch) {
    if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(splitmix64(seed ^ splitmix64(epoch + 0x51ed27ULL)));
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng() % i);
        std::swap(perm[i - 1], perm[j]);
    }
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t start = 0; start < n; start += batch_size)
        out.emplace_back(perm.begin() + start, perm.begin() + std::min(n, start + batch_size));
    return out;
}

template <class T>
std::vector<std::vector<std::size_t>> batches(const Dataset<T>& ds, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch) {
    return batches(ds.size(), batch_size, seed, epoch);
}

// ---- synthetic two-task data -------------------------------------------------

struct SyntheticSpec {
    ImageShape image{112, 112, 1};
    std::size_t identities = 10;
    std::size_t fatigue_per_class = 500;
    std::size_t face_per_identity = 100;
    std::optional<double> noise_sigma;  // absolute; overrides noise_fraction
    double noise_fraction = 0.25;       // sigma = fraction * template margin
    std::uint64_t template_seed = 1;
    std::uint64_t noise_seed = 2;
};

template <class T>
struct SyntheticData {
    std::shared_ptr<InMemoryDataset<T>> fatigue;
    std::shared_ptr<InMemoryDataset<T>> face;
    std::vector<std::vector<float>> fatigue_templates;  // index = class (0 alert, 1 drowsy)
    std::vector<std::vector<float>> face_templates;     // index = identity
    double margin = 0.0;  // smallest RMS distance between two templates of one task
    double sigma = 0.0;
    Normalization normalization;
};

namespace detail {

struct Canvas {
    std::size_t h, w;
    std::vector<float> px;

    Canvas(std::size_t h_, std::size_t w_, float bg) : h(h_), w(w_), px(h_ * w_, bg) {}

    // soft-edged ellipse blended toward `value`; coordinates are fractions of the image
    void ellipse(double cx, double cy, double rx, double ry, float value) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double u = ((x + 0.5) / w - cx) / rx, v = ((y + 0.5) / h - cy) / ry;
                const double d = std::sqrt(u * u + v * v);
                const double a = std::clamp((1.0 - d) * 8.0, 0.0, 1.0);
                auto& p = px[y * w + x];
                p = static_cast<float>((1 - a) * p + a * value);
            }
    }

    void blob(double cx, double cy, double sigma, double amplitude) {
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                const double u = (x + 0.5) / w - cx, v = (y + 0.5) / h - cy;
                px[y * w + x] += static_cast<float>(amplitude * std::exp(-(u * u + v * v) / (2 * sigma * sigma)));
            }
    }
};

struct FaceLayout {
    double cx = 0.5, cy = 0.52, rx = 0.33, ry = 0.42;
    float skin = 0.6f;
};

inline void draw_face(Canvas& c, const FaceLayout& f, bool eyes_open, bool mouth_open) {
    c.ellipse(f.cx, f.cy, f.rx, f.ry, f.skin);
    for (double ex : {f.cx - 0.13, f.cx + 0.13}) {
        if (eyes_open) {
            c.ellipse(ex, f.cy - 0.1, 0.065, 0.04, 0.9f);
            c.ellipse(ex, f.cy - 0.1, 0.03, 0.03, 0.1f);
        } else {
            c.ellipse(ex, f.cy - 0.1, 0.065, 0.012, 0.15f);
        }
    }
    if (mouth_open) c.ellipse(f.cx, f.cy + 0.2, 0.08, 0.07, 0.08f);
    else c.ellipse(f.cx, f.cy + 0.2, 0.09, 0.012, 0.2f);
}

inline std::vector<float> replicate_channels(const std::vector<float>& gray, std::size_t channels) {
    if (channels == 1) return gray;
    std::vector<float> out(gray.size() * channels);
    for (std::size_t i = 0; i < gray.size(); ++i)
        for (std::size_t c = 0; c < channels; ++c) out[i * channels + c] = gray[i];
    return out;
}

inline double rms_distance(const std::vector<float>& a, const std::vector<float>& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += double(a[i] - b[i]) * double(a[i] - b[i]);
    return std::sqrt(s / static_cast<double>(a.size()));
}

inline double min_pairwise_rms(const std::vector<std::vector<float>>& t) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t j = i + 1; j < t.size(); ++j) m = std::min(m, rms_distance(t[i], t[j]));
    return m;
}

}  // namespace detail

/// Class templates for both tasks. Fatigue: alert (eyes open, mouth closed)
/// vs drowsy (eyes shut, yawning). Face: each identity perturbs the face
/// outline and brightness and adds a few Gaussian blobs.
inline void synthetic_templates(const SyntheticSpec& spec, std::vector<std::vector<float>>& fatigue,
                                std::vector<std::vector<float>>& face) {
    const std::size_t H = spec.image.height, W = spec.image.width, C = spec.image.channels;
    fatigue.clear();
    face.clear();
    for (int cls = 0; cls < 2; ++cls) {
        detail::Canvas c(H, W, 0.15f);
        detail::draw_face(c, {}, cls == 0, cls == 1);
        fatigue.push_back(detail::replicate_channels(c.px, C));
    }
    Rng rng(spec.template_seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t id = 0; id < spec.identities; ++id) {
        detail::FaceLayout f;
        f.rx *= 0.9 + 0.2 * u(rng);
        f.ry *= 0.9 + 0.2 * u(rng);
        f.skin = static_cast<float>(0.5 + 0.2 * u(rng));
        detail::Canvas c(H, W, 0.15f);
        detail::draw_face(c, f, true, false);
        for (int k = 0; k < 4; ++k) {
            const double bx = f.cx + (u(rng) - 0.5) * 1.2 * f.rx, by = f.cy + (u(rng) - 0.5) * 1.2 * f.ry;
            c.blob(bx, by, 0.04 + 0.06 * u(rng), (u(rng) - 0.5) * 0.5);
        }
        face.push_back(detail::replicate_channels(c.px, C));
    }
}

/// Deterministic two-task synthetic datasets: every image is its class
/// template plus i.i.d. Gaussian pixel noise.
template <class T>
SyntheticData<T> generate_synthetic(const SyntheticSpec& spec) {
    if (spec.identities < 2) throw ConfigError("synthetic data needs at least two identities");
    if (spec.image.height == 0 || spec.image.width == 0 || spec.image.channels == 0)
        throw ConfigError("synthetic image shape must be positive");
    SyntheticData<T> out;
    synthetic_templates(spec, out.fatigue_templates, out.face_templates);
    out.margin = std::min(detail::min_pairwise_rms(out.fatigue_templates), detail::min_pairwise_rms(out.face_templates));
    out.sigma = spec.noise_sigma.value_or(spec.noise_fraction * out.margin);
    if (out.sigma < 0) throw ConfigError("noise sigma must be >= 0");

    // Expected pixel statistics of the mixture, per channel.
    const std::size_t C = spec.image.channels;
    std::vector<double> sum(C, 0.0), sq(C, 0.0);
    double count = 0;
    auto accumulate = [&](const std::vector<float>& t, std::size_t copies) {
        for (std::size_t k = 0; k < t.size(); ++k) {
            sum[k % C] += double(t[k]) * copies;
            sq[k % C] += double(t[k]) * t[k] * copies;
        }
        count += double(copies) * (t.size() / C);
    };
    for (const auto& t : out.fatigue_templates) accumulate(t, spec.fatigue_per_class);
    for (const auto& t : out.face_templates) accumulate(t, spec.face_per_identity);
    out.normalization.mean.assign(C, 0.0);
    out.normalization.std.assign(C, 1.0);
    if (count > 0)
        for (std::size_t c = 0; c < C; ++c) {
            const double m = sum[c] / count;
            out.normalization.mean[c] = m;
            out.normalization.std[c] = std::sqrt(std::max(sq[c] / count - m * m, 0.0) + out.sigma * out.sigma);
        }

    out.fatigue = std::make_shared<InMemoryDataset<T>>(Task::Fatigue, spec.image, out.normalization);
    out.face = std::make_shared<InMemoryDataset<T>>(Task::Face, spec.image, out.normalization);
    Rng rng(spec.noise_seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    auto sample = [&](const std::vector<float>& t) {
        std::vector<float> px(t);
        if (out.sigma > 0)
            for (auto& p : px) p = static_cast<float>(p + out.sigma * noise(rng));
        return px;
    };
    for (int cls = 0; cls < 2; ++cls)
        for (std::size_t n = 0; n < spec.fatigue_per_class; ++n) out.fatigue->add(sample(out.fatigue_templates[cls]), cls);
    for (std::size_t id = 0; id < spec.identities; ++id)
        for (std::size_t n = 0; n < spec.face_per_identity; ++n) out.face->add(sample(out.face_templates[id]), static_cast<int>(id));
    return out;
}

// ---- manifest ingestion --------------------------------------------------------

/// Decodes an image file to HWC float pixels in [0,1] at the requested shape.
using ImageDecoder = std::function<std::vector<float>(const std::filesystem::path&, const ImageShape&)>;

struct ManifestRow {
    std::filesystem::path path;
    Task task = Task::Fatigue;
    int label = 0;
    long line = 0;  // 1-based line in the manifest
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (ch == '"') {
                quoted = false;
            } else {
                cur += ch;
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    for (auto& s : out) {
        const auto b = s.find_first_not_of(" \t"), e = s.find_last_not_of(" \t");
        s = b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }
    return out;
}

/// Decoded pixels shared by both task views; each row decodes at most once.
class ManifestStore {
public:
    ManifestStore(std::vector<ManifestRow> rows, ImageShape shape, ImageDecoder decoder)
        : rows_(std::move(rows)), shape_(shape), decoder_(std::move(decoder)),
          once_(std::make_unique<std::once_flag[]>(rows_.size())), cache_(rows_.size()) {}

    const std::vector<ManifestRow>& rows() const { return rows_; }
    const ImageShape& shape() const { return shape_; }

    std::span<const float> pixels(std::size_t row) const {
        std::call_once(once_[row], [&] {
            auto px = decoder_(rows_[row].path, shape_);
            if (px.size() != shape_.height * shape_.width * shape_.channels)
                throw LoadError("decoder returned wrong pixel count for " + rows_[row].path.string(), rows_[row].line);
            cache_[row] = std::move(px);
        });
        return cache_[row];
    }

private:
    std::vector<ManifestRow> rows_;
    ImageShape shape_;
    ImageDecoder decoder_;
    std::unique_ptr<std::once_flag[]> once_;
    mutable std::vector<std::vector<float>> cache_;
};

}  // namespace detail

template <class T>
class ManifestTaskView final : public Dataset<T> {
public:
    ManifestTaskView(std::shared_ptr<const detail::ManifestStore> store, Task task, Normalization norm)
        : store_(std::move(store)), task_(task), norm_(std::move(norm)) {
        for (std::size_t i = 0; i < store_->rows().size(); ++i)
            if (store_->rows()[i].task == task) rows_.push_back(i);
    }

    std::size_t size() const override { return rows_.size(); }
    int label(std::size_t i) const override { return store_->rows()[rows_.at(i)].label; }
    ImageShape image_shape() const override { return store_->shape(); }
    std::span<const float> raw(std::size_t i) const override { return store_->pixels(rows_.at(i)); }
    const Normalization& normalization() const override { return norm_; }
    Task task() const override { return task_; }
    const ManifestRow& row(std::size_t i) const { return store_->rows()[rows_.at(i)]; }

private:
    std::shared_ptr<const detail::ManifestStore> store_;
    Task task_;
    Normalization norm_;
    std::vector<std::size_t> rows_;
};

/// Validated manifest (CSV with header path,task,label). Images decode lazily.
template <class T>
class ManifestDataset {
public:
    ManifestDataset(std::shared_ptr<const detail::ManifestStore> store, Normalization norm)
        : store_(std::move(store)), norm_(std::move(norm)) {}

    std::size_t size() const { return store_->rows().size(); }
    const std::vector<ManifestRow>& rows() const { return store_->rows(); }
    std::shared_ptr<ManifestTaskView<T>> split(Task task) const {
        return std::make_shared<ManifestTaskView<T>>(store_, task, norm_);
    }
    std::size_t identity_count() const {
        std::set<int> ids;
        for (const auto& r : rows())
            if (r.task == Task::Face) ids.insert(r.label);
        return ids.size();
    }

private:
    std::shared_ptr<const detail::ManifestStore> store_;
    Normalization norm_;
};

template <class T>
ManifestDataset<T> load_manifest(const std::filesystem::path& path, ImageShape shape, Normalization norm, ImageDecoder decoder) {
    std::ifstream in(path);
    if (!in) throw MissingFileError("manifest not found: " + path.string());
    std::string line;
    long lineno = 0;
    std::vector<std::string> header;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        header = detail::split_csv_line(line);
        break;
    }
    if (header.empty()) throw ConfigError("manifest " + path.string() + ": no rows");
    if (header.size() != 3 || header[0] != "path" || header[1] != "task" || header[2] != "label")
        throw LoadError("manifest " + path.string() + ": header must be 'path,task,label'", lineno);

    const auto base = path.parent_path();
    std::vector<ManifestRow> rows;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        const auto f = detail::split_csv_line(line);
        if (f.size() != 3) throw LoadError("manifest row " + std::to_string(lineno) + ": expected 3 fields", lineno);
        ManifestRow row;
        row.line = lineno;
        if (f[1] == "fatigue") row.task = Task::Fatigue;
        else if (f[1] == "face") row.task = Task::Face;
        else throw TaskTagError("manifest row " + std::to_string(lineno) + ": unknown task tag '" + f[1] + "'", lineno);
        try {
            std::size_t used = 0;
            row.label = std::stoi(f[2], &used);
            if (used != f[2].size()) throw std::invalid_argument("trailing");
        } catch (const std::exception&) {
            throw LoadError("manifest row " + std::to_string(lineno) + ": label '" + f[2] + "' is not an integer", lineno);
        }
        if (row.task == Task::Fatigue && row.label != 0 && row.label != 1)
            throw LoadError("manifest row " + std::to_string(lineno) + ": fatigue label must be 0 or 1", lineno);
        if (row.task == Task::Face && row.label < 0)
            throw DensityError("manifest row " + std::to_string(lineno) + ": negative identity id", lineno);
        row.path = std::filesystem::path(f[0]).is_absolute() ? std::filesystem::path(f[0]) : base / f[0];
        if (!std::filesystem::exists(row.path))
            throw MissingFileError("manifest row " + std::to_string(lineno) + ": image not found: " + row.path.string(), lineno);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ConfigError("manifest " + path.string() + ": no rows");

    std::map<int, long> first_row;
    for (const auto& r : rows)
        if (r.task == Task::Face) first_row.emplace(r.label, r.line);
    int expected = 0;
    for (const auto& [id, row] : first_row) {
        if (id != expected)
            throw DensityError("manifest " + path.string() + ": identity ids are not dense, id " + std::to_string(expected) +
                                   " is missing (next id " + std::to_string(id) + " at row " + std::to_string(row) + ")",
                               row);
        ++expected;
    }
    return ManifestDataset<T>(std::make_shared<detail::ManifestStore>(std::move(rows), shape, std::move(decoder)), std::move(norm));
}

}  // namespace treemtl
