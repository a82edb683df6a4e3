#pragma once

// Checkpoint file layout (little-endian):
//   8 bytes  magic "TMTLCKPT"
//   8 bytes  u64 length of the JSON header
//   N bytes  JSON header: version, dtype, architecture, fingerprint,
//            record table (name, group, shape, byte offset, count),
//            optimizer step counts, counters, RNG state
//   payload  raw IEEE-754 values for every record, in table order

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "treemtl/model.hpp"
#include "treemtl/optim.hpp"

namespace treemtl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'T', 'M', 'T', 'L', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointVersion = 1;

inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

/// Hash of the canonical architecture JSON.
inline std::string architecture_fingerprint(const ModelConfig& cfg) { return hex64(fnv1a64(to_json(cfg).dump())); }

template <class T>
constexpr const char* dtype_name() {
    if constexpr (std::is_same_v<T, float>) return "f32";
    else return "f64";
}

template <class T>
struct LoadedCheckpoint {
    TreeModel<T> model;
    std::optional<TrainState<T>> state;
};

namespace detail {

template <class T>
void append_raw(std::string& payload, const T* data, std::size_t n) {
    payload.append(reinterpret_cast<const char*>(data), n * sizeof(T));
}

}  // namespace detail

template <class T>
void save_checkpoint(TreeModel<T>& model, const std::filesystem::path& path, const TrainState<T>* state = nullptr) {
    auto params = model.parameters();
    nlohmann::json records = nlohmann::json::array();
    std::string payload;
    auto add_record = [&](const std::string& kind, const Parameter<T>& p, const T* data) {
        records.push_back({{"kind", kind},
                           {"name", p.name},
                           {"group", group_name(p.group)},
                           {"shape", p.shape()},
                           {"offset", payload.size()},
                           {"count", p.size()}});
        detail::append_raw(payload, data, p.size());
    };
    for (auto* p : params) add_record("param", *p, p->value().data().data());

    nlohmann::json header{{"format", "treemtl-checkpoint"},
                          {"version", kCheckpointVersion},
                          {"dtype", dtype_name<T>()},
                          {"architecture", to_json(model.config())},
                          {"fingerprint", architecture_fingerprint(model.config())}};
    if (state) {
        auto slots = state->optimizer.slots();
        slots.resize(params.size());
        nlohmann::json steps = nlohmann::json::array();
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& s = slots[i];
            if (s.m.size() != params[i]->size()) {
                s.m.assign(params[i]->size(), T{0});
                s.v.assign(params[i]->size(), T{0});
            }
            add_record("adam_m", *params[i], s.m.data());
            add_record("adam_v", *params[i], s.v.data());
            steps.push_back(s.steps);
        }
        std::ostringstream rng;
        rng << state->rng;
        const auto& ac = state->optimizer.config();
        header["train_state"] = {{"epoch", state->epoch},
                                 {"step", state->step},
                                 {"updates", state->updates},
                                 {"lr", state->lr},
                                 {"adam", {{"lr", ac.lr}, {"beta1", ac.beta1}, {"beta2", ac.beta2}, {"eps", ac.eps}}},
                                 {"adam_steps", steps},
                                 {"rng", rng.str()}};
    }
    header["records"] = records;
    header["payload_bytes"] = payload.size();

    const std::string text = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
    const std::uint64_t len = text.size();
    out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

/// Reads a checkpoint. When `expected` is given, its fingerprint must match
/// the stored one. Nothing is returned unless the whole file validates.
template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

    if (bytes.size() < 16) throw TruncationError("checkpoint truncated before header: " + path.string());
    if (std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) throw FormatError("not a checkpoint file: " + path.string());
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, sizeof(len));
    if (bytes.size() < 16 + len) throw TruncationError("checkpoint header truncated: " + path.string());

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, len));
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("corrupt checkpoint header: ") + e.what());
    }
    if (header.value("version", -1) != kCheckpointVersion)
        throw VersionError("checkpoint version " + header.value("version", nlohmann::json(-1)).dump() + " unsupported (expected " +
                           std::to_string(kCheckpointVersion) + ")");
    if (header.value("dtype", std::string()) != dtype_name<T>())
        throw FormatError("checkpoint dtype " + header.value("dtype", std::string("?")) + " does not match " + dtype_name<T>());

    ModelConfig cfg = model_config_from_json(header.at("architecture"));
    const std::string stored = header.value("fingerprint", std::string());
    if (architecture_fingerprint(cfg) != stored)
        throw FingerprintError("checkpoint fingerprint " + stored + " does not match its architecture");
    if (expected && architecture_fingerprint(*expected) != stored)
        throw FingerprintError("checkpoint architecture " + stored + " differs from the configured model " +
                               architecture_fingerprint(*expected));

    const std::size_t payload_bytes = header.at("payload_bytes").get<std::size_t>();
    const char* payload = bytes.data() + 16 + len;
    const std::size_t available = bytes.size() - 16 - len;
    if (available < payload_bytes) throw TruncationError("checkpoint payload truncated: " + path.string());

    TreeModel<T> model(cfg);
    auto params = model.parameters();
    std::optional<TrainState<T>> state;
    if (header.contains("train_state")) {
        state.emplace();
        const auto& ts = header.at("train_state");
        const auto& ac = ts.at("adam");
        state->optimizer = Adam<T>(AdamConfig{ac.at("lr"), ac.at("beta1"), ac.at("beta2"), ac.at("eps")});
        state->optimizer.resize(params);
        const auto& steps = ts.at("adam_steps");
        for (std::size_t i = 0; i < params.size() && i < steps.size(); ++i) state->optimizer.slots()[i].steps = steps[i];
        state->epoch = ts.at("epoch");
        state->step = ts.at("step");
        state->updates = ts.at("updates");
        state->lr = ts.at("lr");
        std::istringstream rng(ts.at("rng").get<std::string>());
        rng >> state->rng;
    }

    std::size_t cursor = 0;
    for (const auto& rec : header.at("records")) {
        const std::string kind = rec.at("kind");
        const std::string name = rec.at("name");
        const std::size_t offset = rec.at("offset"), count = rec.at("count");
        if (offset + count * sizeof(T) > payload_bytes) throw TruncationError("record " + name + " runs past the payload");
        std::size_t idx = params.size();
        for (std::size_t i = 0; i < params.size(); ++i) {
            const std::size_t probe = (cursor + i) % params.size();
            if (params[probe]->name == name) {
                idx = probe;
                break;
            }
        }
        if (idx == params.size()) throw FormatError("checkpoint record " + name + " has no matching parameter");
        cursor = idx;
        if (count != params[idx]->size() || rec.at("shape").get<Shape>() != params[idx]->shape())
            throw FormatError("checkpoint record " + name + " has the wrong shape");
        T* dst = nullptr;
        if (kind == "param") dst = params[idx]->value().data().data();
        else if (kind == "adam_m" && state) dst = state->optimizer.slots()[idx].m.data();
        else if (kind == "adam_v" && state) dst = state->optimizer.slots()[idx].v.data();
        else throw FormatError("unknown checkpoint record kind " + kind);
        std::memcpy(dst, payload + offset, count * sizeof(T));
    }
    return {std::move(model), std::move(state)};
}

}  // namespace treemtl
