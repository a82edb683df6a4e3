#include <CLI11.hpp>

#include "treemtl/commands.hpp"

int main(int argc, char** argv) {
    using namespace treemtl;
    CLI::App app{"Tree-style multi-task model: fatigue detection + face recognition"};
    app.require_subcommand(1);

    std::vector<std::string> overrides;
    std::filesystem::path config, checkpoint;
    std::vector<std::filesystem::path> configs;
    bool roc = false;
    CompareOptions cmp;
    std::string task = "face";
    std::size_t count = 8;

    auto add_set = [&](CLI::App* sub) { sub->add_option("--set", overrides, "override a config value, section.key=value"); };

    auto* train = app.add_subcommand("train", "train a model from a run config");
    train->add_option("--config", config, "run config (TOML)")->required();
    add_set(train);

    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on held-out data");
    eval->add_option("--checkpoint", checkpoint)->required();
    eval->add_option("--config", config)->required();
    eval->add_flag("--roc", roc, "also write ROC CSVs per task");
    add_set(eval);

    auto* compare = app.add_subcommand("compare", "params / GFLOPs / ACC table over configs");
    compare->add_option("--config", configs)->required();
    compare->add_flag("--split", cmp.add_split, "add the split-parallel counterpart of each tree config");
    compare->add_flag("--no-lanet", cmp.no_lanet, "disable LANet in both branches");
    compare->add_flag("--no-senet", cmp.no_senet, "disable SENet in both branches");
    compare->add_flag("--train", cmp.train, "train and evaluate each row");
    add_set(compare);

    auto* cnt = app.add_subcommand("count", "print parameter and FLOP counts");
    cnt->add_option("--config", config)->required();
    add_set(cnt);

    auto* exp = app.add_subcommand("export-features", "dump branch feature maps");
    exp->add_option("--checkpoint", checkpoint)->required();
    exp->add_option("--config", config)->required();
    exp->add_option("--task", task, "held-out set to draw images from (fatigue|face)");
    exp->add_option("--count", count, "number of images");
    add_set(exp);

    auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as PNG + manifests");
    gen->add_option("--config", config)->required();
    add_set(gen);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    if (*train) return cmd_train(config, overrides);
    if (*eval) return cmd_eval(checkpoint, config, overrides, roc);
    if (*compare) return cmd_compare(configs, overrides, cmp);
    if (*cnt) return cmd_count(config, overrides);
    if (*exp) return cmd_export_features(checkpoint, config, overrides, task, count);
    return cmd_gen_data(config, overrides);
}
