#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "stmem/cli.hpp"
#include "stmem/errors.hpp"

int main(int argc, char** argv) {
    CLI::App app{"spatio-temporal masked ECG modeling toolkit"};
    app.require_subcommand(1);

    std::string config_path;
    std::string out_dir;
    long long seed = -1;

    const std::vector<std::pair<std::string, std::string>> commands = {
        {"preprocess", "resample, bandpass, crop and z-normalize a corpus"},
        {"synth", "generate a synthetic ECG corpus"},
        {"split", "shuffle a manifest into 70-10-20 train/valid/test"},
        {"pretrain", "masked-autoencoding pretraining"},
        {"finetune", "supervised fine-tuning from a checkpoint"},
        {"probe", "linear probing (frozen encoder) from a checkpoint"},
        {"eval", "classification metrics on a test manifest"},
        {"embed", "export per-lead representations as CSV"},
        {"attention", "averaged encoder attention map for a query patch"},
        {"cluster", "GMM lead-plane clustering of exported embeddings"},
    };
    for (const auto& [name, desc] : commands) {
        CLI::App* sub = app.add_subcommand(name, desc);
        sub->add_option("--config", config_path, "path to a key = value config file");
        sub->add_option("--seed", seed, "override the config seed");
        sub->add_option("--out", out_dir, "override the output directory");
    }

    CLI11_PARSE(app, argc, argv);

    try {
        stmem::RunConfig cfg;
        if (!config_path.empty()) cfg = stmem::parse_config_file(config_path);
        if (seed >= 0) {
            cfg.train.seed = static_cast<std::uint64_t>(seed);
            cfg.explicit_keys.insert("seed");
        }
        if (!out_dir.empty()) {
            cfg.out_dir = out_dir;
            cfg.explicit_keys.insert("out_dir");
        }
        return stmem::run(app.get_subcommands().front()->get_name(), std::move(cfg));
    } catch (const stmem::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: Internal: %s\n", e.what());
        return 1;
    }
}
