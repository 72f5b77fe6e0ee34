#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "abft/commands.hpp"

namespace abft {

namespace {

ExperimentConfig resolve_config(const std::string& config_path, uint64_t seed, bool seed_set,
                                const std::string& out_dir) {
    ExperimentConfig cfg;
    if (!config_path.empty()) cfg = load_config_file(config_path);
    if (seed_set) cfg.seed = seed;
    if (!out_dir.empty()) cfg.out_dir = out_dir;
    cfg.model.seed = cfg.seed;
    return cfg;
}

std::vector<std::string> split_list(const std::vector<std::string>& raw) {
    std::vector<std::string> out;
    for (const auto& item : raw) {
        size_t begin = 0;
        while (begin <= item.size()) {
            const size_t comma = item.find(',', begin);
            const std::string part =
                item.substr(begin, comma == std::string::npos ? std::string::npos : comma - begin);
            if (!part.empty()) out.push_back(part);
            if (comma == std::string::npos) break;
            begin = comma + 1;
        }
    }
    return out;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"attention-behavior fine-tuning laboratory"};
    app.require_subcommand(1);
    app.fallthrough();  // --config/--seed/--out are accepted after subcommands too

    std::string config_path, out_dir;
    uint64_t seed = 0;
    bool seed_set = false;
    app.add_option("--config", config_path, "experiment config file")->expected(1);
    app.add_option("--seed", seed, "run seed (overrides the config)")
        ->each([&](const std::string&) { seed_set = true; });
    app.add_option("--out", out_dir, "output directory (overrides the config)");

    auto* pretrain_cmd = app.add_subcommand("pretrain", "train the base model from scratch");

    auto* finetune_cmd = app.add_subcommand("finetune", "fine-tune a pretrained checkpoint");
    std::string method = "abft", base_ckpt;
    finetune_cmd->add_option("--method", method, "abft or e2e");
    finetune_cmd->add_option("--base", base_ckpt, "base checkpoint")->required();

    auto* eval_cmd = app.add_subcommand("eval", "run analyses over checkpoints");
    std::vector<std::string> analyses, ckpts;
    eval_cmd->add_option("--analysis", analyses,
                         "acc|heads|profile|grid|consistency|unseen|shift (repeat or comma-separate)");
    eval_cmd->add_option("--ckpt", ckpts, "checkpoint path (repeatable)");

    auto* inspect_cmd = app.add_subcommand("inspect-checkpoint", "print checkpoint metadata");
    std::string inspect_path;
    inspect_cmd->add_option("path", inspect_path, "checkpoint file")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (pretrain_cmd->parsed()) {
            cmd_pretrain(resolve_config(config_path, seed, seed_set, out_dir));
        } else if (finetune_cmd->parsed()) {
            cmd_finetune(resolve_config(config_path, seed, seed_set, out_dir), method, base_ckpt);
        } else if (eval_cmd->parsed()) {
            cmd_eval(resolve_config(config_path, seed, seed_set, out_dir), split_list(analyses),
                     ckpts);
        } else if (inspect_cmd->parsed()) {
            return cmd_inspect(inspect_path);
        }
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 3;
    } catch (const ShapeError& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 4;
    } catch (const ContractError& e) {
        std::cerr << "contract violation: " << e.what() << "\n";
        return 4;
    }
}

}  // namespace abft
