#pragma once

// Experiment configuration: one structured text file drives the whole
// pipeline. Unknown keys are errors; serialization is canonical so the
// config hash is stable.

#include <string>

#include "abft/data.hpp"
#include "abft/model.hpp"
#include "abft/trainer.hpp"

namespace abft {

struct EvalConfig {
    int per_query = 2;          // test inputs per query-pool entry
    int consistency_queries = 64;
    int consistency_templates = 3;
    int consistency_resamples = 3;
    int unseen_per_query = 2;
    int ood_tasks = 2;          // derived tasks with task_seed offsets 1..n
    double grid_min = -0.25;
    double grid_max = 1.5;
    double grid_step = 0.25;
    int heatmap_samples = 4;

    void validate() const {
        if (per_query < 1) throw ConfigError("eval.per_query must be positive");
        if (consistency_templates < 1 || consistency_templates > VocabLayout::kNumMarkers)
            throw ConfigError("eval.consistency_templates out of range");
        if (ood_tasks < 0) throw ConfigError("eval.ood_tasks must be non-negative");
    }
};

struct ExperimentConfig {
    uint64_t seed = 0;
    std::string out_dir = "out";

    ModelConfig model;            // model.seed is derived from `seed`, not serialized
    SyntheticTaskConfig task;
    PretrainMixConfig pretrain_mix;
    int pretrain_corpus_size = 50000;
    PretrainSchedule pretrain;
    ABFTConfig train;
    EvalConfig eval;

    void validate() const {
        model.validate();
        pretrain.validate();
        train.validate();
        eval.validate();
        VocabLayout vocab{model.vocab_size};
        vocab.validate();
    }

    VocabLayout vocab_layout() const { return VocabLayout{model.vocab_size}; }
};

// Canonical text form: `section.key = value` lines, '#' comments.
std::string serialize_config(const ExperimentConfig& cfg);

// Parses the canonical form. Unknown keys raise ConfigError naming the key;
// missing keys keep their defaults.
ExperimentConfig parse_config(const std::string& text);

ExperimentConfig load_config_file(const std::string& path);

// FNV-1a of the canonical serialization, as fixed-width hex.
std::string config_hash_hex(const ExperimentConfig& cfg);

}  // namespace abft
