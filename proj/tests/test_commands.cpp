#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "support.hpp"
#include "treemtl/commands.hpp"

using namespace treemtl;
using namespace treemtl::testing;

namespace {

const std::filesystem::path kConfigs = std::filesystem::path(TREEMTL_SOURCE_DIR) / "configs";

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t line_count(const std::filesystem::path& p) {
    const auto s = slurp(p);
    return std::size_t(std::count(s.begin(), s.end(), '\n'));
}

/// Small synthetic run config written into a temp dir; outputs go to <dir>/out.
struct SmallRun {
    TempDir dir{"cmd"};
    std::filesystem::path config = dir / "run.toml";
    std::filesystem::path out = dir / "out";
    std::ostringstream out_stream, err_stream;

    explicit SmallRun(const std::string& extra = "") {
        ::unsetenv("TREEMTL_OUT");
        std::ofstream(config) << "seed = 3\noutput_dir = \"" << out.string() << "\"\n" << R"(
[model]
input = [16, 16, 1]
embedding_dim = 8
[[model.stages]]
channels = 4
[[model.stages]]
channels = 8
[model.fatigue_branch]
lanet_reduction = 2
senet_reduction = 2
[model.face_branch]
lanet_reduction = 4
senet_reduction = 4
[training]
epochs = 3
batch_size = 8
[data]
eval_pairs = 60
[data.synthetic]
identities = 4
fatigue_per_class = 12
face_per_identity = 6
test_fatigue_per_class = 6
test_face_per_identity = 4
)" << extra;
    }
    CommandStreams io() { return {out_stream, err_stream}; }
    nlohmann::json json_file(const std::string& name) const { return nlohmann::json::parse(slurp(out / name)); }
};

int run_cli(const std::string& args, const std::string& env = "") {
    const std::string cmd = env + " \"" + std::string(TREEMTL_CLI_PATH) + "\" " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Train, ZeroEpochsWritesOutputs) {
    SmallRun run;
    EXPECT_EQ(cmd_train(run.config, {"training.epochs=0"}, run.io()), kExitOk) << run.err_stream.str();
    EXPECT_TRUE(std::filesystem::exists(run.out / "model.ckpt"));
    EXPECT_TRUE(std::filesystem::exists(run.out / "metrics.json"));
    EXPECT_EQ(line_count(run.out / "train_log.csv"), 1u);
    EXPECT_FALSE(std::filesystem::exists(run.out / "checkpoints"));
}

TEST(Train, MissingConfigExitsTwoNamingPath) {
    SmallRun run;
    EXPECT_EQ(cmd_train(run.dir / "nope.toml", {}, run.io()), kExitConfig);
    EXPECT_NE(run.err_stream.str().find("nope.toml"), std::string::npos);
}

TEST(Train, InvalidConfigExitsTwo) {
    SmallRun run;
    EXPECT_EQ(cmd_train(run.config, {"training.loss_weight=2"}, run.io()), kExitConfig);
    EXPECT_EQ(cmd_train(run.config, {"training.typo=1"}, run.io()), kExitConfig);
    EXPECT_NE(run.err_stream.str().find("training.typo"), std::string::npos);
}

TEST(Train, DivergenceExitsThreeWithDiagnostics) {
    SmallRun run;
    EXPECT_EQ(cmd_train(run.config, {"training.lr=1e30"}, run.io()), kExitNumerical) << run.err_stream.str();
    EXPECT_TRUE(std::filesystem::exists(run.out / "nan_abort.json"));
}

TEST(Train, EvalReproducesTrainMetrics) {
    SmallRun run;
    for (const char* regime : {"alternating", "grad_accum"}) {
        ASSERT_EQ(cmd_train(run.config, {std::string("training.regime=") + regime}, run.io()), kExitOk) << run.err_stream.str();
        auto metrics = run.json_file("metrics.json");
        for (const char* k : {"fatigue_acc", "face_acc", "avg_acc"}) {
            ASSERT_TRUE(metrics.contains(k)) << k;
            EXPECT_GE(metrics.at(k).get<double>(), 0.0);
            EXPECT_LE(metrics.at(k).get<double>(), 1.0);
        }
        EXPECT_EQ(metrics.at("regime"), regime);
        EXPECT_EQ(line_count(run.out / "train_log.csv"), 1u + 3 * 3);  // 24 images / batch 8
        EXPECT_TRUE(std::filesystem::exists(run.out / "checkpoints" / "epoch_003.ckpt"));
        EXPECT_TRUE(std::filesystem::exists(run.out / "config.json"));

        ASSERT_EQ(cmd_eval(run.out / "model.ckpt", run.config, {}, false, run.io()), kExitOk) << run.err_stream.str();
        auto eval = run.json_file("eval_metrics.json");
        EXPECT_EQ(eval.at("fatigue_acc"), metrics.at("fatigue_acc"));
        EXPECT_EQ(eval.at("face_acc"), metrics.at("face_acc"));
        EXPECT_EQ(eval.at("fingerprint"), metrics.at("fingerprint"));
    }
}

TEST(Eval, FingerprintMismatchExitsTwo) {
    SmallRun run;
    ASSERT_EQ(cmd_train(run.config, {"training.epochs=0"}, run.io()), kExitOk);
    EXPECT_EQ(cmd_eval(run.out / "model.ckpt", run.config, {"model.embedding_dim=16"}, false, run.io()), kExitConfig);
    EXPECT_NE(run.err_stream.str().find("differs"), std::string::npos);
    EXPECT_EQ(cmd_eval(run.dir / "absent.ckpt", run.config, {}, false, run.io()), kExitError);
}

TEST(Eval, RocFlagWritesCurves) {
    SmallRun run;
    ASSERT_EQ(cmd_train(run.config, {"training.epochs=1"}, run.io()), kExitOk);
    ASSERT_EQ(cmd_eval(run.out / "model.ckpt", run.config, {}, true, run.io()), kExitOk);
    for (const char* f : {"roc_fatigue.csv", "roc_face.csv"}) {
        std::ifstream in(run.out / f);
        std::string header;
        std::getline(in, header);
        EXPECT_EQ(header, "threshold,fpr,tpr");
        EXPECT_GE(line_count(run.out / f), 3u);
    }
}

TEST(Compare, TreeHasFewerParamsThanSplit) {
    SmallRun run;
    std::vector<CompareRow> rows;
    ASSERT_EQ(cmd_compare({kConfigs / "synthetic.toml"}, {"output_dir=" + run.out.string()}, {.add_split = true}, run.io(), &rows),
              kExitOk)
        << run.err_stream.str();
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].name, "synthetic");
    EXPECT_EQ(rows[1].name, "synthetic:split");
    EXPECT_LT(rows[0].cost.total_params(), rows[1].cost.total_params());
    EXPECT_LT(rows[0].cost.total_flops(), rows[1].cost.total_flops());
    EXPECT_EQ(line_count(run.out / "compare.csv"), 3u);
    EXPECT_FALSE(rows[0].eval.has_value());
}

TEST(Compare, SingleConfigAndAblationFlags) {
    SmallRun run;
    std::vector<CompareRow> full, no_lanet, neither;
    ASSERT_EQ(cmd_compare({run.config}, {}, {}, run.io(), &full), kExitOk);
    ASSERT_EQ(full.size(), 1u);
    ASSERT_EQ(cmd_compare({run.config}, {}, {.no_lanet = true}, run.io(), &no_lanet), kExitOk);
    ASSERT_EQ(cmd_compare({run.config}, {}, {.no_lanet = true, .no_senet = true}, run.io(), &neither), kExitOk);
    EXPECT_LT(no_lanet[0].cost.total_params(), full[0].cost.total_params());
    EXPECT_LT(neither[0].cost.total_params(), no_lanet[0].cost.total_params());
    EXPECT_FALSE(neither[0].model.face_branch.use_senet);
    const auto csv = slurp(run.out / "compare.csv");
    EXPECT_NE(csv.find("run,tree,0,0,"), std::string::npos) << csv;
    EXPECT_EQ(cmd_compare({}, {}, {}, run.io()), kExitConfig);
}

TEST(Compare, TrainFillsAccuracyColumns) {
    SmallRun run;
    std::vector<CompareRow> rows;
    ASSERT_EQ(cmd_compare({run.config}, {"training.epochs=1"}, {.add_split = true, .train = true}, run.io(), &rows), kExitOk);
    ASSERT_EQ(rows.size(), 2u);
    for (const auto& r : rows) {
        ASSERT_TRUE(r.eval.has_value());
        EXPECT_GE(r.eval->avg_acc(), 0.0);
    }
    EXPECT_NE(run.out_stream.str().find("ACC(Avg)"), std::string::npos);
}

TEST(Count, PrintsCostJson) {
    SmallRun run;
    ASSERT_EQ(cmd_count(run.config, {}, run.io()), kExitOk);
    auto j = nlohmann::json::parse(run.out_stream.str());
    auto rc = load_run_config(run.config);
    EXPECT_EQ(j.at("params").at("total").get<std::uint64_t>(), count_cost(rc.model).total_params());
    EXPECT_EQ(j.at("flop_convention"), kFlopConvention);
}

TEST(ExportFeatures, WritesRequestedRecords) {
    SmallRun run;
    ASSERT_EQ(cmd_train(run.config, {"training.epochs=0"}, run.io()), kExitOk);
    ASSERT_EQ(cmd_export_features(run.out / "model.ckpt", run.config, {}, "fatigue", 5, run.io()), kExitOk) << run.err_stream.str();
    auto f = read_branch_features<float>(run.out / "features.bin");
    ASSERT_EQ(f.records.size(), 2u);
    EXPECT_EQ(f.records[0].size(), 5u);
    EXPECT_EQ(f.records[1][0].shape(), (Shape{4, 4, 8}));
    EXPECT_EQ(cmd_export_features(run.out / "model.ckpt", run.config, {}, "gaze", 5, run.io()), kExitError);
}

TEST(GenData, ManifestRoundTripTrains) {
    SmallRun run;
    ASSERT_EQ(cmd_gen_data(run.config, {}, run.io()), kExitOk) << run.err_stream.str();
    EXPECT_EQ(line_count(run.out / "data" / "manifest.csv"), 1u + 24 + 24);
    EXPECT_EQ(line_count(run.out / "data" / "test_manifest.csv"), 1u + 12 + 16);

    auto rc = load_run_config(run.config);
    auto synth = load_task_data(rc);
    auto m = load_manifest<float>(run.out / "data" / "manifest.csv", {16, 16, 1});
    auto face = m.split(Task::Face);
    ASSERT_EQ(face->size(), synth.face_train->size());
    EXPECT_EQ(face->labels(), synth.face_train->labels());
    const auto a = face->raw(7), b = synth.face_train->raw(7);
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], std::clamp(b[k], 0.0f, 1.0f), 0.5f / 255 + 1e-5f);

    const std::vector<std::string> manifest_source{"data.source=manifest", "data.manifest=" + (run.out / "data/manifest.csv").string(),
                                                   "data.test_manifest=" + (run.out / "data/test_manifest.csv").string(),
                                                   "model.face_classes=4", "training.epochs=1"};
    EXPECT_EQ(cmd_train(run.config, manifest_source, run.io()), kExitOk) << run.err_stream.str();
    auto too_few = manifest_source;
    too_few[3] = "model.face_classes=3";
    EXPECT_EQ(cmd_train(run.config, too_few, run.io()), kExitConfig);
}

TEST(Cli, ExitCodesAndOutputDirectoryOverride) {
    SmallRun run;
    const std::string cfg = "--config \"" + run.config.string() + "\"";
    EXPECT_EQ(run_cli("--help"), 0);
    EXPECT_EQ(run_cli(""), kExitConfig);
    EXPECT_EQ(run_cli("train"), kExitConfig);
    EXPECT_EQ(run_cli("train --bogus"), kExitConfig);
    EXPECT_EQ(run_cli("train --config \"" + (run.dir / "missing.toml").string() + "\""), kExitConfig);
    EXPECT_EQ(run_cli("count " + cfg), kExitOk);
    EXPECT_EQ(run_cli("count " + cfg + " --set model.layout=forest"), kExitConfig);

    const auto env_out = run.dir / "env_out";
    EXPECT_EQ(run_cli("train " + cfg + " --set training.epochs=0", "TREEMTL_OUT=\"" + env_out.string() + "\""), kExitOk);
    EXPECT_TRUE(std::filesystem::exists(env_out / "model.ckpt"));
    EXPECT_FALSE(std::filesystem::exists(run.out / "model.ckpt"));
    EXPECT_EQ(run_cli("eval " + cfg + " --checkpoint \"" + (env_out / "model.ckpt").string() + "\" --set model.embedding_dim=4"),
              kExitConfig);
    EXPECT_EQ(run_cli("train " + cfg + " --set training.lr=1e30"), kExitNumerical);
}
