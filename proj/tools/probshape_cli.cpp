// probshape: stage-wise pipeline driver.
//
// Exit codes: 0 success, 2 configuration error, 3 missing or malformed data,
// 4 numerical failure, 1 anything else (including a held output lock).

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "probshape/error.hpp"
#include "probshape/pipeline.hpp"

namespace {

struct CommonOptions {
    std::string config;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
    bool force = false;
    std::size_t count = 0;
    bool count_given = false;
};

void add_common(CLI::App *cmd, CommonOptions &o) {
    cmd->add_option("--config", o.config, "JSON config file with flat dotted keys")->check(CLI::ExistingFile);
    cmd->add_option("--out-dir", o.out_dir, "Artifact directory (default: $PROBSHAPE_OUT_DIR or ./probshape_out)");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&o](const std::uint64_t &v) {
            o.seed = v;
            o.seed_given = true;
        },
        "Global seed; overrides the config value");
    cmd->add_flag("--force", o.force, "Rerun even when inputs are unchanged");
}

probshape::PipelineConfig resolve_config(const CommonOptions &o) {
    probshape::PipelineConfig cfg = o.config.empty() ? probshape::PipelineConfig{} : probshape::load_pipeline_config(o.config);
    if (o.seed_given) cfg.seed = o.seed;
    if (o.count_given) {
        if (o.count == 0) throw probshape::ConfigError("--count must be >= 1");
        auto &data = cfg.experiment.data;
        (data.split == probshape::SplitMode::Synthetic ? data.train_count : data.pool_count) = o.count;
    }
    cfg.validate();
    return cfg;
}

int run(const std::string &command, const CommonOptions &o) {
    const auto cfg = resolve_config(o);
    probshape::RunOptions opts;
    opts.out_dir = probshape::resolve_out_dir(o.out_dir);
    opts.force = o.force;
    opts.log = &std::cerr;
    probshape::OutputLock lock(opts.out_dir);
    if (command == "run-all") {
        probshape::run_all(cfg, opts);
        return 0;
    }
    for (auto stage : probshape::all_stages()) {
        if (probshape::stage_name(stage) == command) {
            probshape::run_stage(stage, cfg, opts);
            return 0;
        }
    }
    throw probshape::ConfigError("unknown command '" + command + "'");
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Probabilistic shape descriptors from 3D images: supershape data, KDE augmentation, "
                 "MC-dropout regression and evaluation."};
    app.set_version_flag("--version", probshape::version_text());
    app.require_subcommand(1);

    CommonOptions opts;
    std::string command;
    const std::pair<const char *, const char *> commands[] = {
        {"generate", "Generate supershape training and test sets"},
        {"augment", "Fit the PCA model and KDE, then build augmented pairs"},
        {"train", "Train the uncertain and baseline networks"},
        {"infer", "MC-dropout predictions and uncertainty heat maps"},
        {"evaluate", "Surface distances and per-set aggregates"},
        {"report", "Summary table, box-plot and scatter data"},
        {"run-all", "Run every stage in order"},
    };
    for (const auto &[name, help] : commands) {
        auto *cmd = app.add_subcommand(name, help);
        add_common(cmd, opts);
        if (std::string(name) == "generate" || std::string(name) == "run-all") {
            cmd->add_option_function<std::size_t>(
                "--count",
                [&opts](const std::size_t &v) {
                    opts.count = v;
                    opts.count_given = true;
                },
                "Number of training shapes (pool size in selection mode)");
        }
        cmd->callback([&command, n = std::string(name)] { command = n; });
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError &e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        return run(command, opts);
    } catch (const probshape::ConfigError &e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const probshape::DataError &e) {
        std::cerr << "data error: " << e.what() << '\n';
        return 3;
    } catch (const probshape::NumericalError &e) {
        std::cerr << "numerical error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
