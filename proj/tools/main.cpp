#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nctta/report.hpp"

using namespace nctta;

int main(int argc, char** argv) {
    CLI::App app{"nctta: a desk-scale lab for feature-classifier alignment in test-time "
                 "adaptation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    std::string config_path;
    std::string out_dir = "out";
    std::string checkpoint;
    std::vector<std::string> checkpoints;
    std::vector<std::string> tags;
    std::string sweep_spec;
    CliOverrides opt;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "configuration file")->required();
        cmd->add_option("--out", out_dir, "output directory");
        cmd->add_option("--seed", opt.seed, "stream / shift seed");
    };
    auto add_shift = [&](CLI::App* cmd) {
        cmd->add_option("--shift", opt.shift,
                        "shift kind (gaussian_noise, mean_shift, rotation, feature_scale, "
                        "feature_dropout)");
        cmd->add_option("--severity", opt.severity, "shift severity 1-5 (0 = unshifted)");
        cmd->add_option("--data", opt.data_path, "load a dataset file instead of regenerating");
    };

    CLI::App* train = app.add_subcommand("train", "train the model into the terminal phase");
    add_common(train);
    train->add_flag("--save-data", opt.save_data, "write the train/test dataset files");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint without adaptation");
    add_common(eval);
    add_shift(eval);
    eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

    CLI::App* adapt = app.add_subcommand("adapt", "run a test-time adaptation scenario");
    add_common(adapt);
    add_shift(adapt);
    adapt->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    adapt->add_option("--method", opt.method, "no_adapt, bn_adapt, tent, or nctta");
    adapt->add_option("--variant", opt.variant, "infonce, l2, or triplet");
    adapt->add_option("--scenario", opt.scenario, "mild, ctta, or bs1");
    adapt->add_option("--severities", opt.severities, "ctta severity sequence")->delimiter(',');

    CLI::App* metrics = app.add_subcommand("metrics", "per-sample alignment metrics and NC report");
    add_common(metrics);
    add_shift(metrics);
    metrics->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

    CLI::App* project = app.add_subcommand("project", "2-D feature projection for plotting");
    add_common(project);
    add_shift(project);
    project->add_option("--checkpoints", checkpoints, "one or more checkpoints")
        ->required()
        ->delimiter(',');
    project->add_option("--tags", tags, "method tag per checkpoint")->delimiter(',');

    CLI::App* sweep = app.add_subcommand("sweep", "grid sweep of adaptation parameters");
    add_common(sweep);
    add_shift(sweep);
    sweep->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
    sweep->add_option("--sweep", sweep_spec, "grid, e.g. alpha=0:1:0.25,k=1:4")->required();
    sweep->add_option("--method", opt.method, "method override");
    sweep->add_option("--variant", opt.variant, "variant override");
    sweep->add_option("--scenario", opt.scenario, "mild, ctta, or bs1");
    sweep->add_option("--severities", opt.severities, "ctta severity sequence")->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    try {
        const Config cfg = Config::parse_file(config_path);
        std::string manifest;
        if (train->parsed()) manifest = cmd_train(cfg, out_dir, opt);
        else if (eval->parsed()) manifest = cmd_eval(cfg, checkpoint, out_dir, opt);
        else if (adapt->parsed()) manifest = cmd_adapt(cfg, checkpoint, out_dir, opt);
        else if (metrics->parsed()) manifest = cmd_metrics(cfg, checkpoint, out_dir, opt);
        else if (project->parsed()) manifest = cmd_project(cfg, checkpoints, tags, out_dir, opt);
        else if (sweep->parsed()) manifest = cmd_sweep(cfg, checkpoint, sweep_spec, out_dir, opt);
        std::cout << manifest << "\n";
        return 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 2;
    }
}
