#pragma once

// Multi-task training from two single-task datasets.
//
// Alternating updation: per step, a fatigue sub-step updates {root, fatigue}
// with the face group frozen, then a face sub-step updates {root, face} with
// the fatigue group frozen.
// Gradient accumulation: per step, back-propagate w*L_fatigue and
// (1-w)*L_face separately into the same gradient buffers, then apply a single
// update to every group.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "treemtl/checkpoint.hpp"
#include "treemtl/data.hpp"
#include "treemtl/losses.hpp"
#include "treemtl/model.hpp"
#include "treemtl/optim.hpp"

namespace treemtl {

enum class Regime { Alternating, GradAccum };

inline Regime parse_regime(const std::string& s) {
    if (s == "alternating") return Regime::Alternating;
    if (s == "grad_accum") return Regime::GradAccum;
    throw ConfigError("unknown training regime '" + s + "' (expected alternating|grad_accum)");
}
inline const char* regime_name(Regime r) { return r == Regime::Alternating ? "alternating" : "grad_accum"; }

struct TrainingConfig {
    Regime regime = Regime::Alternating;
    double loss_weight = 0.5;  // w: fatigue share of the combined loss (grad_accum only)
    AdamConfig adam;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    bool fatigue_first = true;

    void validate() const {
        check_loss_weight(loss_weight);
        if (!(adam.lr > 0) || !(adam.eps > 0)) throw ConfigError("learning rate and epsilon must be positive");
        if (!(adam.beta1 >= 0 && adam.beta1 < 1) || !(adam.beta2 >= 0 && adam.beta2 < 1))
            throw ConfigError("adam betas must lie in [0,1)");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
    }
};

/// Cosine-annealed learning rate for `epoch`, one cycle over the whole run.
inline double lr_at(std::size_t epoch, const TrainingConfig& cfg) { return cosine_lr(cfg.adam.lr, epoch, cfg.epochs); }

struct StepLosses {
    double fatigue = 0.0;
    double face = 0.0;
};

template <class T>
TrainState<T> make_train_state(const TrainingConfig& cfg) {
    TrainState<T> s;
    s.optimizer = Adam<T>(cfg.adam);
    s.rng.seed(cfg.seed);
    s.lr = lr_at(0, cfg);
    return s;
}

template <class T>
LossValue<T> task_loss(const TreeModel<T>& model, const Batch<T>& batch, Task task) {
    if (batch.size() == 0) throw InputError(std::string("missing ") + task_name(task) + " batch");
    Var<T> out = model.forward_task(batch.images, task);
    return task == Task::Fatigue ? bce_loss(out, batch.labels) : arcface_subcenter_loss(out, batch.labels, model.classifier());
}

namespace detail {

inline void check_finite(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericalError(std::string("non-finite ") + what + " loss");
}

template <class T>
std::vector<bool> group_mask(const std::vector<Parameter<T>*>& params, std::initializer_list<Group> groups) {
    std::vector<bool> mask(params.size(), false);
    for (std::size_t i = 0; i < params.size(); ++i)
        for (Group g : groups) mask[i] = mask[i] || params[i]->group == g;
    return mask;
}

template <class T>
void apply_update(TreeModel<T>& model, TrainState<T>& state, const std::vector<bool>& mask) {
    auto params = model.parameters();
    state.optimizer.step(params, mask, state.lr);
    ++state.updates;
    model.zero_grad();
}

}  // namespace detail

/// Back-propagates w*L_fatigue then (1-w)*L_face into the gradient buffers
/// without touching parameters.
template <class T>
StepLosses accumulate_gradients(TreeModel<T>& model, const Batch<T>& fatigue, const Batch<T>& face, double w) {
    check_loss_weight(w);
    StepLosses out;
    {
        auto l = task_loss(model, fatigue, Task::Fatigue);
        out.fatigue = l.scalar();
        detail::check_finite(out.fatigue, "fatigue");
        backward(ops::scale(l.loss, static_cast<T>(w)));
    }
    {
        auto l = task_loss(model, face, Task::Face);
        out.face = l.scalar();
        detail::check_finite(out.face, "face");
        backward(ops::scale(l.loss, static_cast<T>(1.0 - w)));
    }
    return out;
}

/// Gradient accumulation: one optimizer update per step on all groups.
template <class T>
StepLosses grad_accum_step(TreeModel<T>& model, const Batch<T>& fatigue, const Batch<T>& face, double w, TrainState<T>& state) {
    if (fatigue.size() == 0 || face.size() == 0) throw InputError("grad_accum_step needs one batch per task");
    model.zero_grad();
    const StepLosses losses = accumulate_gradients(model, fatigue, face, w);
    auto params = model.parameters();
    detail::apply_update(model, state, std::vector<bool>(params.size(), true));
    ++state.step;
    return losses;
}

/// One half of an alternating step: update {root, own branch} from this
/// task's loss with the other branch frozen.
template <class T>
double alternating_sub_step(TreeModel<T>& model, const Batch<T>& batch, Task task, TrainState<T>& state) {
    model.zero_grad();
    auto l = task_loss(model, batch, task);
    const double v = l.scalar();
    detail::check_finite(v, task_name(task));
    backward(l.loss);
    auto params = model.parameters();
    const Group own = task == Task::Fatigue ? Group::Fatigue : Group::Face;
    detail::apply_update(model, state, detail::group_mask(params, {Group::Root, own}));
    return v;
}

/// Alternating updation: two optimizer updates per step, each freezing the
/// other task's branch.
template <class T>
StepLosses alternating_step(TreeModel<T>& model, const Batch<T>& fatigue, const Batch<T>& face, TrainState<T>& state,
                            bool fatigue_first = true) {
    if (fatigue.size() == 0 || face.size() == 0) throw InputError("alternating_step needs one batch per task");
    StepLosses losses;
    if (fatigue_first) {
        losses.fatigue = alternating_sub_step(model, fatigue, Task::Fatigue, state);
        losses.face = alternating_sub_step(model, face, Task::Face, state);
    } else {
        losses.face = alternating_sub_step(model, face, Task::Face, state);
        losses.fatigue = alternating_sub_step(model, fatigue, Task::Fatigue, state);
    }
    ++state.step;
    return losses;
}

/// Endless batch sequence over one dataset: each pass is a fresh seeded
/// permutation.
class BatchStream {
public:
    BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch)
        : n_(n), batch_size_(batch_size), seed_(seed), epoch_(epoch) {
        refill();
    }

    std::size_t batches_per_pass() const { return (n_ + batch_size_ - 1) / batch_size_; }

    const std::vector<std::size_t>& next() {
        if (pos_ == current_.size()) {
            ++pass_;
            refill();
        }
        return current_[pos_++];
    }

private:
    void refill() {
        // pass 0 of an epoch is exactly batches(n, bs, seed, epoch)
        current_ = batches(n_, batch_size_, pass_ == 0 ? seed_ : splitmix64(seed_ + pass_), epoch_);
        pos_ = 0;
    }

    std::size_t n_, batch_size_;
    std::uint64_t seed_, epoch_, pass_ = 0;
    std::vector<std::vector<std::size_t>> current_;
    std::size_t pos_ = 0;
};

struct LogRow {
    std::size_t epoch;
    std::uint64_t step;
    double loss_fatigue;
    double loss_face;
    double lr;
};

inline void write_log_csv(const std::filesystem::path& path, const std::vector<LogRow>& rows) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("cannot write step log: " + path.string());
    f << "epoch,step,loss_fatigue,loss_face,lr\n";
    f.precision(17);
    for (const auto& r : rows) f << r.epoch << ',' << r.step << ',' << r.loss_fatigue << ',' << r.loss_face << ',' << r.lr << '\n';
}

template <class T>
struct TrainingHooks {
    std::function<void(const LogRow&)> on_step;
    std::function<void(std::size_t epoch, TreeModel<T>&, const TrainState<T>&)> on_epoch_end;
    std::optional<std::filesystem::path> diagnostics_dir;  // NaN aborts dump state here
};

inline std::uint64_t task_seed(std::uint64_t seed, Task task) {
    return splitmix64(seed ^ (task == Task::Fatigue ? 0xfa71ULL : 0xfaceULL));
}

/// Full training run. Each step draws one batch per task; the epoch length is
/// the larger dataset's batch count and the smaller dataset cycles with
/// reshuffling. LR follows one cosine cycle over `cfg.epochs`.
template <class T>
std::vector<LogRow> run_training(TreeModel<T>& model, const Dataset<T>& fatigue_ds, const Dataset<T>& face_ds,
                                 const TrainingConfig& cfg, TrainState<T>& state, const TrainingHooks<T>& hooks = {}) {
    cfg.validate();
    if (fatigue_ds.size() == 0 || face_ds.size() == 0) throw ConfigError("training needs non-empty fatigue and face datasets");
    std::vector<LogRow> log;
    for (std::size_t epoch = state.epoch; epoch < cfg.epochs; ++epoch) {
        state.epoch = epoch;
        state.lr = lr_at(epoch, cfg);
        BatchStream fat(fatigue_ds.size(), cfg.batch_size, task_seed(cfg.seed, Task::Fatigue), epoch);
        BatchStream face(face_ds.size(), cfg.batch_size, task_seed(cfg.seed, Task::Face), epoch);
        const std::size_t steps = std::max(fat.batches_per_pass(), face.batches_per_pass());
        for (std::size_t s = 0; s < steps; ++s) {
            const Batch<T> fb = make_batch(fatigue_ds, fat.next());
            const Batch<T> cb = make_batch(face_ds, face.next());
            StepLosses losses;
            try {
                losses = cfg.regime == Regime::Alternating ? alternating_step(model, fb, cb, state, cfg.fatigue_first)
                                                           : grad_accum_step(model, fb, cb, cfg.loss_weight, state);
            } catch (const NumericalError& e) {
                if (hooks.diagnostics_dir) {
                    std::filesystem::create_directories(*hooks.diagnostics_dir);
                    std::ofstream d(*hooks.diagnostics_dir / "nan_abort.json");
                    d << nlohmann::json{{"error", e.what()}, {"epoch", epoch}, {"step", state.step}, {"lr", state.lr},
                                        {"updates", state.updates}}
                             .dump(2);
                    save_checkpoint(model, *hooks.diagnostics_dir / "nan_abort.ckpt", &state);
                }
                throw NumericalError(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(state.step));
            }
            LogRow row{epoch, state.step, losses.fatigue, losses.face, state.lr};
            log.push_back(row);
            if (hooks.on_step) hooks.on_step(row);
        }
        state.epoch = epoch + 1;
        if (hooks.on_epoch_end) hooks.on_epoch_end(epoch, model, state);
    }
    return log;
}

}  // namespace treemtl
