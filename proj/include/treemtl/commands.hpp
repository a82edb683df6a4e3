#pragma once

// Subcommand bodies. Each returns a process exit code: 0 success, 2 invalid
// configuration or checkpoint mismatch, 3 numerical abort, 1 anything else.
// Every artifact is written under the run's output directory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treemtl/checkpoint.hpp"
#include "treemtl/config.hpp"
#include "treemtl/cost.hpp"
#include "treemtl/evaluate.hpp"
#include "treemtl/image_io.hpp"
#include "treemtl/training.hpp"

namespace treemtl {

inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitNumerical = 3;

struct CommandStreams {
    std::ostream& out = std::cout;
    std::ostream& err = std::cerr;
};

/// Train and held-out data for both tasks as described by the config.
inline TaskData<float> load_task_data(const RunConfig& rc) {
    const auto& d = rc.data;
    if (d.source == DataSource::Synthetic) {
        auto train = generate_synthetic<float>(d.synthetic);
        SyntheticSpec ts = d.synthetic;
        ts.fatigue_per_class = d.test_fatigue_per_class;
        ts.face_per_identity = d.test_face_per_identity;
        ts.noise_seed = d.test_noise_seed;
        ts.noise_sigma = train.sigma;  // same noise level as training
        auto test = generate_synthetic<float>(ts);
        test.fatigue->set_normalization(train.normalization);
        test.face->set_normalization(train.normalization);
        return {train.fatigue, train.face, test.fatigue, test.face};
    }
    const auto shape = rc.model.backbone.input;
    auto train = load_manifest<float>(*d.manifest, shape, d.normalization);
    auto test = load_manifest<float>(*d.test_manifest, shape, d.normalization);
    for (const auto* m : {&train, &test})
        for (const auto& r : m->rows())
            if (r.task == Task::Face && static_cast<std::size_t>(r.label) >= rc.model.face_classes)
                throw ConfigError("model.face_classes: identity " + std::to_string(r.label) + " at manifest row " +
                                  std::to_string(r.line) + " exceeds " + std::to_string(rc.model.face_classes) + " classes");
    return {train.split(Task::Fatigue), train.split(Task::Face), test.split(Task::Fatigue), test.split(Task::Face)};
}

namespace detail {

inline std::filesystem::path prepare_output(const RunConfig& rc) {
    std::filesystem::create_directories(rc.output_dir);
    return rc.output_dir;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::trunc);
    if (!f) throw IoError("cannot write " + p.string());
    f << text;
}

template <class Fn>
int guarded(CommandStreams io, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        io.err << "config error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const CheckpointError& e) {
        io.err << "checkpoint error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const NumericalError& e) {
        io.err << "numerical error: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        io.err << "error: " << e.what() << '\n';
        return kExitError;
    }
}

inline nlohmann::json metrics_json(const EvalReport& r, const RunConfig& rc) {
    auto j = to_json(r);
    j["fingerprint"] = architecture_fingerprint(rc.model);
    j["regime"] = regime_name(rc.training.regime);
    j["seed"] = rc.seed;
    return j;
}

}  // namespace detail

/// Trains the configured model and writes config.json, train_log.csv,
/// checkpoints/epoch_NNN.ckpt, model.ckpt and metrics.json.
inline int cmd_train(const std::filesystem::path& config, const std::vector<std::string>& overrides, CommandStreams io = {}) {
    return detail::guarded(io, [&] {
        const RunConfig rc = load_run_config(config, overrides);
        const auto data = load_task_data(rc);
        const auto out = detail::prepare_output(rc);
        detail::write_text(out / "config.json", rc.document.dump(2) + "\n");

        TreeModel<float> model(rc.model);
        model.init(rc.seed);
        auto state = make_train_state<float>(rc.training);
        TrainingHooks<float> hooks;
        hooks.diagnostics_dir = out;
        hooks.on_epoch_end = [&](std::size_t epoch, TreeModel<float>& m, const TrainState<float>& s) {
            std::filesystem::create_directories(out / "checkpoints");
            std::ostringstream name;
            name << "epoch_" << std::setw(3) << std::setfill('0') << epoch + 1 << ".ckpt";
            save_checkpoint(m, out / "checkpoints" / name.str(), &s);
            io.err << "epoch " << epoch + 1 << "/" << rc.training.epochs << " done\n";
        };
        const auto log = run_training(model, *data.fatigue_train, *data.face_train, rc.training, state, hooks);
        write_log_csv(out / "train_log.csv", log);
        save_checkpoint(model, out / "model.ckpt", &state);

        const auto report = evaluate(model, data, rc.data.eval);
        const auto metrics = detail::metrics_json(report, rc);
        detail::write_text(out / "metrics.json", metrics.dump(2) + "\n");
        io.out << metrics.dump(2) << '\n';
        return kExitOk;
    });
}

/// Evaluates a checkpoint on the config's held-out data. Writes
/// eval_metrics.json (and roc_fatigue.csv / roc_face.csv with `roc`).
inline int cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& config,
                    const std::vector<std::string>& overrides, bool roc, CommandStreams io = {}) {
    return detail::guarded(io, [&] {
        const RunConfig rc = load_run_config(config, overrides);
        auto loaded = load_checkpoint<float>(checkpoint, &rc.model);
        const auto data = load_task_data(rc);
        const auto out = detail::prepare_output(rc);
        const auto report = evaluate(loaded.model, data, rc.data.eval);
        const auto metrics = detail::metrics_json(report, rc);
        detail::write_text(out / "eval_metrics.json", metrics.dump(2) + "\n");
        if (roc) {
            write_roc_csv(out / "roc_fatigue.csv", report.fatigue_roc);
            write_roc_csv(out / "roc_face.csv", report.verification.roc);
        }
        io.out << metrics.dump(2) << '\n';
        return kExitOk;
    });
}

struct CompareOptions {
    bool add_split = false;  // add the split-parallel counterpart of each config
    bool no_lanet = false;
    bool no_senet = false;
    bool train = false;      // train and evaluate each row for the ACC columns
};

struct CompareRow {
    std::string name;
    ModelConfig model;
    CostReport cost;
    std::optional<EvalReport> eval;
};

/// Table of params, GFLOPs and (with `train`) per-task and average ACC.
/// Writes compare.csv under the first config's output directory.
inline int cmd_compare(const std::vector<std::filesystem::path>& configs, const std::vector<std::string>& overrides,
                       const CompareOptions& opt, CommandStreams io = {}, std::vector<CompareRow>* rows_out = nullptr) {
    return detail::guarded(io, [&] {
        if (configs.empty()) throw ConfigError("compare needs at least one --config");
        std::vector<RunConfig> runs;
        for (const auto& c : configs) runs.push_back(load_run_config(c, overrides));
        std::vector<std::pair<std::size_t, CompareRow>> rows;
        for (std::size_t i = 0; i < runs.size(); ++i) {
            auto add = [&](ModelConfig m, std::string suffix) {
                if (opt.no_lanet) m.fatigue_branch.use_lanet = m.face_branch.use_lanet = false;
                if (opt.no_senet) m.fatigue_branch.use_senet = m.face_branch.use_senet = false;
                CompareRow r{configs[i].stem().string() + suffix, m, count_cost(m), std::nullopt};
                rows.emplace_back(i, std::move(r));
            };
            add(runs[i].model, "");
            if (opt.add_split && runs[i].model.layout == Layout::Tree) {
                ModelConfig split = runs[i].model;
                split.layout = Layout::Split;
                add(split, ":split");
            }
        }
        if (opt.train) {
            for (auto& [i, row] : rows) {
                const auto data = load_task_data(runs[i]);
                TreeModel<float> model(row.model);
                model.init(runs[i].seed);
                auto state = make_train_state<float>(runs[i].training);
                run_training(model, *data.fatigue_train, *data.face_train, runs[i].training, state);
                row.eval = evaluate(model, data, runs[i].data.eval);
            }
        }

        const auto out = detail::prepare_output(runs.front());
        std::ofstream csv(out / "compare.csv", std::ios::trunc);
        if (!csv) throw IoError("cannot write " + (out / "compare.csv").string());
        csv.precision(10);
        csv << "name,layout,lanet,senet,params,params_m,gflops,fatigue_acc,face_acc,avg_acc\n";
        io.out << std::left << std::setw(28) << "model" << std::setw(8) << "layout" << std::right << std::setw(12) << "params"
               << std::setw(12) << "GFLOPs" << std::setw(10) << "ACC(D)" << std::setw(10) << "ACC(F)" << std::setw(10) << "ACC(Avg)"
               << '\n';
        for (const auto& [i, r] : rows) {
            const bool lanet = r.model.fatigue_branch.use_lanet && r.model.face_branch.use_lanet;
            const bool senet = r.model.fatigue_branch.use_senet && r.model.face_branch.use_senet;
            const char* layout = r.model.layout == Layout::Tree ? "tree" : "split";
            auto acc = [&](double v) {
                std::ostringstream s;
                s << std::fixed << std::setprecision(4) << v;
                return s.str();
            };
            const std::string fa = r.eval ? acc(r.eval->fatigue_acc) : "-";
            const std::string fc = r.eval ? acc(r.eval->face_acc()) : "-";
            const std::string av = r.eval ? acc(r.eval->avg_acc()) : "-";
            csv << r.name << ',' << layout << ',' << lanet << ',' << senet << ',' << r.cost.total_params() << ','
                << r.cost.params_m() << ',' << r.cost.gflops() << ',' << (r.eval ? fa : "") << ',' << (r.eval ? fc : "") << ','
                << (r.eval ? av : "") << '\n';
            io.out << std::left << std::setw(28) << r.name << std::setw(8) << layout << std::right << std::setw(12)
                   << r.cost.total_params() << std::setw(12) << std::fixed << std::setprecision(6) << r.cost.gflops()
                   << std::setw(10) << fa << std::setw(10) << fc << std::setw(10) << av << '\n';
        }
        io.out.unsetf(std::ios::floatfield);
        if (rows_out) {
            rows_out->clear();
            for (auto& [i, r] : rows) rows_out->push_back(std::move(r));
        }
        return kExitOk;
    });
}

/// Prints the parameter/FLOP report as JSON.
inline int cmd_count(const std::filesystem::path& config, const std::vector<std::string>& overrides, CommandStreams io = {}) {
    return detail::guarded(io, [&] {
        const RunConfig rc = load_run_config(config, overrides);
        io.out << to_json(count_cost(rc.model)).dump(2) << '\n';
        return kExitOk;
    });
}

/// Exports both branches' LASE outputs for the first `count` held-out images
/// of `task` to features.bin.
inline int cmd_export_features(const std::filesystem::path& checkpoint, const std::filesystem::path& config,
                               const std::vector<std::string>& overrides, const std::string& task, std::size_t count,
                               CommandStreams io = {}) {
    return detail::guarded(io, [&] {
        const RunConfig rc = load_run_config(config, overrides);
        const Task t = parse_task(task);
        auto loaded = load_checkpoint<float>(checkpoint, &rc.model);
        const auto data = load_task_data(rc);
        const auto& ds = t == Task::Fatigue ? *data.fatigue_test : *data.face_test;
        std::vector<std::size_t> idx(std::min(count, ds.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        const auto batch = make_batch(ds, idx);
        const auto out = detail::prepare_output(rc);
        export_branch_features(loaded.model, batch.images, out / "features.bin");
        io.out << "wrote " << idx.size() << " records per branch to " << (out / "features.bin").string() << '\n';
        return kExitOk;
    });
}

/// Writes the synthetic train and test sets as PNG files plus manifests
/// (data/manifest.csv, data/test_manifest.csv) that load back through the
/// manifest source.
inline int cmd_gen_data(const std::filesystem::path& config, const std::vector<std::string>& overrides, CommandStreams io = {}) {
    return detail::guarded(io, [&] {
        RunConfig rc = load_run_config(config, overrides);
        rc.data.source = DataSource::Synthetic;
        const auto data = load_task_data(rc);
        const auto root = detail::prepare_output(rc) / "data";
        auto dump = [&](const std::string& split, const Dataset<float>& fat, const Dataset<float>& face) {
            std::filesystem::create_directories(root / split);
            std::ofstream m(root / (split == "train" ? "manifest.csv" : "test_manifest.csv"), std::ios::trunc);
            if (!m) throw IoError("cannot write manifest under " + root.string());
            m << "path,task,label\n";
            for (const Dataset<float>* ds : {&fat, &face}) {
                const std::string tag = task_name(ds->task());
                for (std::size_t i = 0; i < ds->size(); ++i) {
                    char name[64];
                    std::snprintf(name, sizeof(name), "%s_%05zu_%d.png", tag.c_str(), i, ds->label(i));
                    write_png(root / split / name, ds->raw(i), ds->image_shape());
                    m << split << '/' << name << ',' << tag << ',' << ds->label(i) << '\n';
                }
            }
        };
        dump("train", *data.fatigue_train, *data.face_train);
        dump("test", *data.fatigue_test, *data.face_test);
        io.out << "wrote synthetic data to " << root.string() << '\n';
        return kExitOk;
    });
}

}  // namespace treemtl
