#pragma once

// Experiment orchestration behind the CLI subcommands. Each command writes
// its artifacts under the config's output directory together with a manifest
// naming every file and the generating config hash.

#include <string>
#include <vector>

#include "abft/analysis.hpp"
#include "abft/checkpoint.hpp"
#include "abft/config.hpp"

namespace abft {

struct PretrainOutcome {
    std::string checkpoint_path;
    PretrainReport report;
    RepeatSignature signature;
    double baseline_accuracy = 0.0;
    double chance = 0.0;
    bool gate_passed = false;
};

// Builds the corpus, trains the base model, measures the induction signature
// and the baseline task accuracy, and writes checkpoint + report + manifest.
PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg);

struct FinetuneOutcome {
    std::string checkpoint_path;
    std::string runlog_path;
    RunLog log;
};

// Fine-tunes a gated base checkpoint with the chosen method ("abft" or
// "e2e") and writes checkpoint + per-step CSV + manifest.
FinetuneOutcome cmd_finetune(const ExperimentConfig& cfg, const std::string& method,
                             const std::string& base_checkpoint);

// Runs the selected analyses over the given checkpoints; returns the list of
// files written (also recorded in the manifest).
std::vector<std::string> cmd_eval(const ExperimentConfig& cfg,
                                  const std::vector<std::string>& analyses,
                                  const std::vector<std::string>& checkpoint_paths);

int cmd_inspect(const std::string& path);

// Shared builders so every consumer derives data from the same seed streams.
Task task_from_config(const ExperimentConfig& cfg, uint64_t task_seed_override = 0);
std::vector<ICLSample> test_set_from_config(const ExperimentConfig& cfg, const Task& task);
std::vector<ICLSample> training_set_from_config(const ExperimentConfig& cfg, const Task& task,
                                                int repeat = 0);

void write_manifest(const std::string& out_dir, const std::string& config_hash,
                    std::vector<std::string> files);

int run_cli(int argc, char** argv);

}  // namespace abft
