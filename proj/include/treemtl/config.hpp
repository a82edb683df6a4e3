#pragma once

// Run configuration: a TOML document with [model], [training] and [data]
// sections plus top-level seed and output_dir. Every key is checked against
// the schema before any work starts; errors name the offending field path.

#include <cstdlib>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treemtl/data.hpp"
#include "treemtl/evaluate.hpp"
#include "treemtl/model.hpp"
#include "treemtl/toml.hpp"
#include "treemtl/training.hpp"

namespace treemtl {

enum class DataSource { Synthetic, Manifest };

struct DataConfig {
    DataSource source = DataSource::Synthetic;
    std::optional<std::filesystem::path> manifest;       // training rows
    std::optional<std::filesystem::path> test_manifest;  // held-out rows
    Normalization normalization;                         // manifest data only
    SyntheticSpec synthetic;
    std::size_t test_fatigue_per_class = 100;
    std::size_t test_face_per_identity = 20;
    std::uint64_t test_noise_seed = 99;
    EvalOptions eval;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::filesystem::path output_dir = "runs/default";
    ModelConfig model;
    TrainingConfig training;
    DataConfig data;
    nlohmann::json document;  // validated document, written next to the outputs
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& path, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(path + ": expected a table");
    const std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items())
        if (!ok.count(k)) throw ConfigError("unknown config key '" + (path.empty() ? k : path + "." + k) + "'");
}

template <class V>
V field(const nlohmann::json& j, const std::string& path, const char* key, V fallback) {
    if (!j.contains(key)) return fallback;
    const auto& v = j.at(key);
    const std::string where = path.empty() ? key : path + "." + key;
    if constexpr (std::is_same_v<V, bool>) {
        if (!v.is_boolean()) throw ConfigError(where + ": expected a boolean");
        return v.get<bool>();
    } else if constexpr (std::is_same_v<V, std::string>) {
        if (!v.is_string()) throw ConfigError(where + ": expected a string");
        return v.get<std::string>();
    } else if constexpr (std::is_floating_point_v<V>) {
        if (!v.is_number()) throw ConfigError(where + ": expected a number");
        return v.get<V>();
    } else {
        if (!v.is_number_integer()) throw ConfigError(where + ": expected an integer");
        if (std::is_unsigned_v<V> && v.get<long long>() < 0) throw ConfigError(where + ": must be non-negative");
        return v.get<V>();
    }
}

inline std::vector<double> number_list(const nlohmann::json& j, const std::string& where) {
    std::vector<double> out;
    if (j.is_number()) return {j.get<double>()};
    if (!j.is_array() || j.empty()) throw ConfigError(where + ": expected a number or a list of numbers");
    for (const auto& x : j) {
        if (!x.is_number()) throw ConfigError(where + ": expected numbers");
        out.push_back(x.get<double>());
    }
    return out;
}

inline void check_model_schema(const nlohmann::json& m) {
    check_keys(m, "model", {"input", "stages", "fatigue_branch", "face_branch", "embedding_dim", "face_classes", "loss", "layout"});
    if (m.contains("input")) {
        const auto& in = m.at("input");
        if (!in.is_array() || in.size() != 3)
            throw ConfigError("model.input: expected [height, width, channels]");
        for (const auto& x : in)
            if (!x.is_number_integer() || x.get<long long>() <= 0) throw ConfigError("model.input: entries must be positive integers");
    }
    if (m.contains("stages")) {
        const auto& st = m.at("stages");
        if (!st.is_array() || st.empty()) throw ConfigError("model.stages: expected at least one [[model.stages]] table");
        for (std::size_t i = 0; i < st.size(); ++i) {
            const std::string p = "model.stages[" + std::to_string(i) + "]";
            check_keys(st[i], p, {"kernel", "channels", "stride", "padding", "activation", "pool", "bias"});
            if (!st[i].contains("channels")) throw ConfigError(p + ".channels: required");
            for (const char* k : {"kernel", "channels", "stride"})
                if (field<std::size_t>(st[i], p, k, 1) == 0) throw ConfigError(p + "." + k + ": must be positive");
            field<std::size_t>(st[i], p, "padding", 0);
            const auto act = field<std::string>(st[i], p, "activation", "relu");
            if (act != "relu" && act != "none") throw ConfigError(p + ".activation: expected relu|none");
            const auto pool = field<std::string>(st[i], p, "pool", "none");
            if (pool != "max2" && pool != "none") throw ConfigError(p + ".pool: expected max2|none");
            field<bool>(st[i], p, "bias", true);
        }
    }
    for (const char* b : {"fatigue_branch", "face_branch"}) {
        if (!m.contains(b)) continue;
        const std::string p = std::string("model.") + b;
        check_keys(m.at(b), p, {"lanet", "senet", "lanet_reduction", "senet_reduction"});
        field<bool>(m.at(b), p, "lanet", true);
        field<bool>(m.at(b), p, "senet", true);
        if (field<std::size_t>(m.at(b), p, "lanet_reduction", 16) == 0) throw ConfigError(p + ".lanet_reduction: must be positive");
        if (field<std::size_t>(m.at(b), p, "senet_reduction", 16) == 0) throw ConfigError(p + ".senet_reduction: must be positive");
    }
    if (field<std::size_t>(m, "model", "embedding_dim", 512) == 0) throw ConfigError("model.embedding_dim: must be positive");
    if (field<std::size_t>(m, "model", "face_classes", 10) == 0) throw ConfigError("model.face_classes: must be positive");
    if (m.contains("loss")) {
        const auto& l = m.at("loss");
        check_keys(l, "model.loss", {"margin", "scale", "subcenters"});
        if (field<double>(l, "model.loss", "margin", 0.5) < 0) throw ConfigError("model.loss.margin: must be non-negative");
        if (!(field<double>(l, "model.loss", "scale", 20.0) > 0)) throw ConfigError("model.loss.scale: must be positive");
        if (field<std::size_t>(l, "model.loss", "subcenters", 3) == 0) throw ConfigError("model.loss.subcenters: must be positive");
    }
    const auto layout = field<std::string>(m, "model", "layout", "tree");
    if (layout != "tree" && layout != "split") throw ConfigError("model.layout: expected tree|split");
}

inline TrainingConfig training_from_json(const nlohmann::json& t) {
    check_keys(t, "training", {"regime", "loss_weight", "lr", "beta1", "beta2", "eps", "epochs", "batch_size", "fatigue_first"});
    TrainingConfig c;
    try {
        c.regime = parse_regime(field<std::string>(t, "training", "regime", "alternating"));
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("training.regime: ") + e.what());
    }
    c.loss_weight = field(t, "training", "loss_weight", c.loss_weight);
    if (!(c.loss_weight >= 0.0 && c.loss_weight <= 1.0)) throw ConfigError("training.loss_weight: must lie in [0,1]");
    c.adam.lr = field(t, "training", "lr", c.adam.lr);
    c.adam.beta1 = field(t, "training", "beta1", c.adam.beta1);
    c.adam.beta2 = field(t, "training", "beta2", c.adam.beta2);
    c.adam.eps = field(t, "training", "eps", c.adam.eps);
    if (!(c.adam.lr > 0)) throw ConfigError("training.lr: must be positive");
    if (!(c.adam.eps > 0)) throw ConfigError("training.eps: must be positive");
    if (!(c.adam.beta1 >= 0 && c.adam.beta1 < 1)) throw ConfigError("training.beta1: must lie in [0,1)");
    if (!(c.adam.beta2 >= 0 && c.adam.beta2 < 1)) throw ConfigError("training.beta2: must lie in [0,1)");
    c.epochs = field(t, "training", "epochs", c.epochs);
    c.batch_size = field(t, "training", "batch_size", c.batch_size);
    if (c.batch_size == 0) throw ConfigError("training.batch_size: must be positive");
    c.fatigue_first = field(t, "training", "fatigue_first", c.fatigue_first);
    return c;
}

inline DataConfig data_from_json(const nlohmann::json& d, const std::filesystem::path& base) {
    check_keys(d, "data", {"source", "manifest", "test_manifest", "normalize_mean", "normalize_std", "eval_pairs", "pair_seed",
                           "fatigue_threshold", "identify_threshold", "eval_batch", "synthetic"});
    DataConfig c;
    const auto source = field<std::string>(d, "data", "source", "synthetic");
    if (source == "synthetic") c.source = DataSource::Synthetic;
    else if (source == "manifest") c.source = DataSource::Manifest;
    else throw ConfigError("data.source: expected synthetic|manifest");
    auto resolve = [&](const char* key) -> std::optional<std::filesystem::path> {
        if (!d.contains(key)) return std::nullopt;
        std::filesystem::path p = field<std::string>(d, "data", key, "");
        return p.is_absolute() ? p : base / p;
    };
    c.manifest = resolve("manifest");
    c.test_manifest = resolve("test_manifest");
    if (c.source == DataSource::Manifest && (!c.manifest || !c.test_manifest))
        throw ConfigError(std::string("data.") + (c.manifest ? "test_manifest" : "manifest") + ": required when data.source = \"manifest\"");
    if (d.contains("normalize_mean")) c.normalization.mean = number_list(d.at("normalize_mean"), "data.normalize_mean");
    if (d.contains("normalize_std")) c.normalization.std = number_list(d.at("normalize_std"), "data.normalize_std");
    for (double s : c.normalization.std)
        if (!(s > 0)) throw ConfigError("data.normalize_std: entries must be positive");
    c.eval.pairs = field(d, "data", "eval_pairs", c.eval.pairs);
    c.eval.pair_seed = field(d, "data", "pair_seed", c.eval.pair_seed);
    c.eval.fatigue_threshold = field(d, "data", "fatigue_threshold", c.eval.fatigue_threshold);
    c.eval.identify_threshold = field(d, "data", "identify_threshold", c.eval.identify_threshold);
    c.eval.batch_size = field(d, "data", "eval_batch", c.eval.batch_size);
    if (c.eval.batch_size == 0) throw ConfigError("data.eval_batch: must be positive");
    if (d.contains("synthetic")) {
        const auto& s = d.at("synthetic");
        const std::string p = "data.synthetic";
        check_keys(s, p, {"identities", "fatigue_per_class", "face_per_identity", "noise_sigma", "noise_fraction", "template_seed",
                          "noise_seed", "test_fatigue_per_class", "test_face_per_identity", "test_noise_seed"});
        auto& sp = c.synthetic;
        sp.identities = field(s, p, "identities", sp.identities);
        sp.fatigue_per_class = field(s, p, "fatigue_per_class", sp.fatigue_per_class);
        sp.face_per_identity = field(s, p, "face_per_identity", sp.face_per_identity);
        if (s.contains("noise_sigma")) sp.noise_sigma = field(s, p, "noise_sigma", 0.0);
        sp.noise_fraction = field(s, p, "noise_fraction", sp.noise_fraction);
        sp.template_seed = field(s, p, "template_seed", sp.template_seed);
        sp.noise_seed = field(s, p, "noise_seed", sp.noise_seed);
        c.test_fatigue_per_class = field(s, p, "test_fatigue_per_class", c.test_fatigue_per_class);
        c.test_face_per_identity = field(s, p, "test_face_per_identity", c.test_face_per_identity);
        c.test_noise_seed = field(s, p, "test_noise_seed", c.test_noise_seed);
        if (sp.identities < 2) throw ConfigError(p + ".identities: need at least 2");
        if (sp.noise_sigma && *sp.noise_sigma < 0) throw ConfigError(p + ".noise_sigma: must be non-negative");
        if (sp.noise_fraction < 0) throw ConfigError(p + ".noise_fraction: must be non-negative");
        if (c.test_noise_seed == sp.noise_seed) throw ConfigError(p + ".test_noise_seed: must differ from noise_seed");
    }
    return c;
}

inline void set_path(nlohmann::json& doc, const std::string& key, nlohmann::json value) {
    nlohmann::json* t = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string seg = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (seg.empty()) throw ConfigError("--set: malformed key '" + key + "'");
        nlohmann::json* next;
        if (t->is_array()) {
            std::size_t idx = 0;
            try {
                idx = std::stoul(seg);
            } catch (const std::exception&) {
                throw ConfigError("--set " + key + ": '" + seg + "' is not an index");
            }
            if (idx >= t->size()) throw ConfigError("--set " + key + ": index " + seg + " out of range");
            next = &(*t)[idx];
        } else {
            if (!t->is_object()) throw ConfigError("--set " + key + ": '" + seg + "' is not inside a table");
            next = &(*t)[seg];
        }
        if (dot == std::string::npos) {
            *next = std::move(value);
            return;
        }
        if (next->is_null()) *next = nlohmann::json::object();
        t = next;
        start = dot + 1;
    }
}

}  // namespace detail

/// Applies `section.key=value` overrides. Values use TOML syntax; anything
/// that does not parse as a TOML value is taken as a bare string.
inline void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides) {
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects section.key=value, got '" + o + "'");
        const std::string key = toml::detail::trim(o.substr(0, eq));
        nlohmann::json value;
        try {
            value = toml::parse_value(o.substr(eq + 1));
        } catch (const ConfigError&) {
            value = toml::detail::trim(o.substr(eq + 1));
        }
        detail::set_path(doc, key, std::move(value));
    }
}

/// Validates a parsed document and binds it. Relative manifest paths resolve
/// against `base`.
inline RunConfig run_config_from_json(const nlohmann::json& doc, const std::filesystem::path& base = ".") {
    detail::check_keys(doc, "", {"seed", "output_dir", "model", "training", "data"});
    RunConfig rc;
    rc.document = doc;
    rc.seed = detail::field(doc, "", "seed", rc.seed);
    rc.output_dir = detail::field<std::string>(doc, "", "output_dir", rc.output_dir.string());
    const nlohmann::json empty = nlohmann::json::object();
    const auto& m = doc.contains("model") ? doc.at("model") : empty;
    detail::check_model_schema(m);
    rc.model = model_config_from_json(m);
    rc.training = detail::training_from_json(doc.contains("training") ? doc.at("training") : empty);
    rc.training.seed = rc.seed;
    rc.data = detail::data_from_json(doc.contains("data") ? doc.at("data") : empty, base);
    rc.data.synthetic.image = rc.model.backbone.input;
    if (rc.data.source == DataSource::Synthetic) {
        if (!m.contains("face_classes")) rc.model.face_classes = rc.data.synthetic.identities;
        else if (rc.model.face_classes != rc.data.synthetic.identities)
            throw ConfigError("model.face_classes: " + std::to_string(rc.model.face_classes) + " does not match data.synthetic.identities = " +
                              std::to_string(rc.data.synthetic.identities));
    }
    try {
        TreeModel<float> probe(rc.model);  // shape and divisibility checks
    } catch (const ConfigError& e) {
        throw ConfigError(std::string("model: ") + e.what());
    }
    if (const char* env = std::getenv("TREEMTL_OUT"); env && *env) rc.output_dir = env;
    return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    nlohmann::json doc = toml::parse_file(path.string());
    apply_overrides(doc, overrides);
    return run_config_from_json(doc, path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

}  // namespace treemtl
