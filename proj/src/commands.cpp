#include "abft/commands.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

namespace abft {

namespace fs = std::filesystem;

namespace {

std::string prepare_out_dir(const ExperimentConfig& cfg) {
    fs::path dir(cfg.out_dir);
    if (!fs::exists(dir)) {
        fs::create_directories(dir);
        std::cout << "created output directory " << dir.string() << "\n";
    }
    return dir.string();
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

void write_kv_csv(const std::string& path, const std::vector<std::pair<std::string, double>>& rows) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "metric,value\n";
    for (const auto& [k, v] : rows) out << k << ',' << format_value(v) << '\n';
}

std::string basename_of(const std::string& path) { return fs::path(path).filename().string(); }

long count_corpus_tokens(const std::vector<std::vector<int>>& corpus) {
    long n = 0;
    for (const auto& seq : corpus) n += static_cast<long>(seq.size());
    return n;
}

}  // namespace

Task task_from_config(const ExperimentConfig& cfg, uint64_t task_seed_override) {
    SyntheticTaskConfig tcfg = cfg.task;
    if (task_seed_override != 0) tcfg.task_seed = task_seed_override;
    Rng rng = Rng(cfg.seed).child("task:" + std::to_string(tcfg.task_seed));
    return build_synthetic_task(tcfg, cfg.vocab_layout(), rng);
}

std::vector<ICLSample> test_set_from_config(const ExperimentConfig& cfg, const Task& task) {
    Rng rng = Rng(cfg.seed).child("test-data:" + task.name);
    return build_test_set(task, cfg.eval.per_query, cfg.train.k, rng, cfg.model.max_seq_len);
}

std::vector<ICLSample> training_set_from_config(const ExperimentConfig& cfg, const Task& task,
                                                int repeat) {
    Rng rng = Rng(cfg.seed).child("train-data:" + std::to_string(repeat));
    return build_training_set(task, cfg.train.n_d, cfg.train.k, rng, cfg.model.max_seq_len);
}

void write_manifest(const std::string& out_dir, const std::string& config_hash,
                    std::vector<std::string> files) {
    std::sort(files.begin(), files.end());
    nlohmann::json doc;
    doc["config_hash"] = config_hash;
    doc["files"] = files;
    const std::string path = join_path(out_dir, "manifest.json");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << doc.dump(2) << '\n';
}

PretrainOutcome cmd_pretrain(const ExperimentConfig& cfg_in) {
    ExperimentConfig cfg = cfg_in;
    cfg.model.seed = cfg.seed;
    cfg.validate();
    const std::string out_dir = prepare_out_dir(cfg);
    Rng root(cfg.seed);
    const VocabLayout vocab = cfg.vocab_layout();

    Rng corpus_rng = root.child("pretrain-data");
    auto corpus = build_pretrain_corpus(cfg.pretrain_mix, vocab, cfg.pretrain_corpus_size,
                                        corpus_rng);
    std::cout << "pretraining on " << corpus.size() << " sequences ("
              << count_corpus_tokens(corpus) << " tokens)\n";

    auto model = init_model<float>(cfg.model);
    PretrainOutcome outcome;
    outcome.report = pretrain(model, corpus, cfg.pretrain, root.child("pretrain"));

    Rng sig_rng = root.child("signature");
    outcome.signature = repeat_signature(model, vocab, 256, cfg.pretrain_mix.seq_len, sig_rng);

    auto task = task_from_config(cfg);
    auto test_set = test_set_from_config(cfg, task);
    outcome.baseline_accuracy = eval_accuracy(model, test_set, task.label_tokens);
    outcome.chance = 1.0 / task.n_classes;
    outcome.gate_passed = outcome.signature.second_loss < outcome.signature.first_loss &&
                          outcome.baseline_accuracy > outcome.chance;

    const std::string config_text = serialize_config(cfg);
    outcome.checkpoint_path = join_path(out_dir, "pretrained.ckpt");
    save_checkpoint(outcome.checkpoint_path, model, config_text);

    const std::string report_path = join_path(out_dir, "pretrain_report.csv");
    write_kv_csv(report_path,
                 {{"steps_run", static_cast<double>(outcome.report.steps_run)},
                  {"heldout_loss", outcome.report.heldout_loss},
                  {"uniform_bound", outcome.report.uniform_bound},
                  {"repeat_first_loss", outcome.signature.first_loss},
                  {"repeat_second_loss", outcome.signature.second_loss},
                  {"baseline_accuracy", outcome.baseline_accuracy},
                  {"chance", outcome.chance},
                  {"gate_passed", outcome.gate_passed ? 1.0 : 0.0},
                  {"corpus_sequences", static_cast<double>(corpus.size())},
                  {"corpus_tokens", static_cast<double>(count_corpus_tokens(corpus))}});

    write_manifest(out_dir, config_hash_hex(cfg),
                   {basename_of(outcome.checkpoint_path), basename_of(report_path)});
    std::cout << "heldout loss " << outcome.report.heldout_loss << " (uniform bound "
              << outcome.report.uniform_bound << "), repeat-span loss "
              << outcome.signature.first_loss << " -> " << outcome.signature.second_loss
              << ", baseline accuracy " << outcome.baseline_accuracy << " (chance "
              << outcome.chance << "), gate " << (outcome.gate_passed ? "passed" : "FAILED")
              << "\n";
    return outcome;
}

namespace {

void check_base_gate(const Model& model, const ExperimentConfig& cfg,
                     const ExperimentConfig& base_cfg) {
    const VocabLayout vocab = base_cfg.vocab_layout();
    Rng sig_rng = Rng(base_cfg.seed).child("signature");
    auto signature = repeat_signature(model, vocab, 256, base_cfg.pretrain_mix.seq_len, sig_rng);
    auto task = task_from_config(cfg);
    auto test_set = test_set_from_config(cfg, task);
    const double acc = eval_accuracy(model, test_set, task.label_tokens);
    const double chance = 1.0 / task.n_classes;
    if (signature.second_loss >= signature.first_loss)
        throw DataError("base checkpoint fails the induction-signature gate: repeated-span loss " +
                        format_value(signature.first_loss) + " -> " +
                        format_value(signature.second_loss) + " does not drop");
    if (acc <= chance)
        throw DataError("base checkpoint fails the accuracy gate: " + format_value(acc) +
                        " not above chance " + format_value(chance));
}

}  // namespace

FinetuneOutcome cmd_finetune(const ExperimentConfig& cfg_in, const std::string& method,
                             const std::string& base_checkpoint) {
    ExperimentConfig cfg = cfg_in;
    cfg.model.seed = cfg.seed;
    cfg.validate();
    if (method != "abft" && method != "e2e")
        throw ConfigError("finetune method must be `abft` or `e2e`, got `" + method + "`");
    const std::string out_dir = prepare_out_dir(cfg);

    auto loaded = load_checkpoint(base_checkpoint);
    ExperimentConfig base_cfg = parse_config(loaded.config_text);
    if (!base_cfg.model.same_architecture(cfg.model))
        throw ContractError("base checkpoint architecture does not match the configured model");
    check_base_gate(loaded.model, cfg, base_cfg);

    auto task = task_from_config(cfg);
    auto dataset = training_set_from_config(cfg, task);
    Rng root(cfg.seed);

    FinetuneOutcome outcome;
    if (method == "abft")
        outcome.log = train_abft(loaded.model, dataset, cfg.train, root.child("finetune"));
    else
        outcome.log = train_e2e(loaded.model, dataset, task.label_tokens, cfg.train,
                                root.child("finetune"));

    const std::string config_text = serialize_config(cfg);
    outcome.checkpoint_path = join_path(out_dir, method + ".ckpt");
    save_checkpoint(outcome.checkpoint_path, loaded.model, config_text);
    outcome.runlog_path = join_path(out_dir, method + "_runlog.csv");
    outcome.log.write_csv(outcome.runlog_path);

    write_manifest(out_dir, config_hash_hex(cfg),
                   {basename_of(outcome.checkpoint_path), basename_of(outcome.runlog_path)});
    std::cout << method << " fine-tuning done: " << outcome.log.steps.size() << " steps, final loss "
              << (outcome.log.steps.empty() ? 0.0 : outcome.log.steps.back().mean_loss) << "\n";
    return outcome;
}

namespace {

struct EvalContext {
    const ExperimentConfig& cfg;
    std::string out_dir;
    std::vector<LoadedCheckpoint> checkpoints;
    std::vector<std::string> names;  // basename without extension
    Task task;
    std::vector<ICLSample> test_set;
    std::vector<std::string> files;
};

void require_checkpoints(const EvalContext& ctx, size_t n, const char* what) {
    if (ctx.checkpoints.size() != n)
        throw ContractError(std::string(what) + " requires exactly " + std::to_string(n) +
                            " checkpoints, got " + std::to_string(ctx.checkpoints.size()));
}

void eval_acc(EvalContext& ctx) {
    const std::string path = (fs::path(ctx.out_dir) / "accuracy.csv").string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "checkpoint,task,accuracy\n";
    for (size_t i = 0; i < ctx.checkpoints.size(); ++i) {
        out << ctx.names[i] << ',' << ctx.task.name << ','
            << format_value(eval_accuracy(ctx.checkpoints[i].model, ctx.test_set,
                                          ctx.task.label_tokens))
            << '\n';
        for (int o = 1; o <= ctx.cfg.eval.ood_tasks; ++o) {
            auto ood_task = task_from_config(ctx.cfg, ctx.cfg.task.task_seed + o);
            auto ood_set = test_set_from_config(ctx.cfg, ood_task);
            out << ctx.names[i] << ',' << ood_task.name << ','
                << format_value(eval_accuracy(ctx.checkpoints[i].model, ood_set,
                                              ood_task.label_tokens))
                << '\n';
        }
    }
    ctx.files.push_back("accuracy.csv");
}

void eval_heads(EvalContext& ctx) {
    const std::string path = (fs::path(ctx.out_dir) / "heads.csv").string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "checkpoint,mean_induction_count\n";
    for (size_t i = 0; i < ctx.checkpoints.size(); ++i) {
        const auto& model = ctx.checkpoints[i].model;
        out << ctx.names[i] << ','
            << format_value(count_induction_heads(model, ctx.test_set, ctx.cfg.train.log_base))
            << '\n';
        const std::string freq_name = "head_freq_" + ctx.names[i] + ".csv";
        write_head_frequency_csv(
            model, head_induction_frequencies(model, ctx.test_set, ctx.cfg.train.log_base),
            (fs::path(ctx.out_dir) / freq_name).string());
        ctx.files.push_back(freq_name);
    }
    ctx.files.push_back("heads.csv");
}

void eval_profile(EvalContext& ctx) {
    for (size_t i = 0; i < ctx.checkpoints.size(); ++i) {
        const std::string name = "profile_" + ctx.names[i] + ".csv";
        write_profile_csv(layer_profile(ctx.checkpoints[i].model, ctx.test_set),
                          (fs::path(ctx.out_dir) / name).string());
        ctx.files.push_back(name);
        const int n_maps = std::min<int>(ctx.cfg.eval.heatmap_samples,
                                         static_cast<int>(ctx.test_set.size()));
        for (int j = 0; j < n_maps; ++j) {
            const std::string pgm = "attn_" + ctx.names[i] + "_" + std::to_string(j) + ".pgm";
            write_attention_pgm(ctx.checkpoints[i].model, ctx.test_set[j],
                                (fs::path(ctx.out_dir) / pgm).string());
            ctx.files.push_back(pgm);
        }
    }
}

void eval_grid(EvalContext& ctx) {
    require_checkpoints(ctx, 3, "connectivity analysis (theta0, thetaE, thetaA)");
    GridSpec spec;
    spec.min_coef = ctx.cfg.eval.grid_min;
    spec.max_coef = ctx.cfg.eval.grid_max;
    spec.step = ctx.cfg.eval.grid_step;
    auto grid = connectivity_grid(ctx.checkpoints[0].model, ctx.checkpoints[1].model,
                                  ctx.checkpoints[2].model, spec, ctx.test_set,
                                  ctx.task.label_tokens);
    write_grid_csv(grid, (fs::path(ctx.out_dir) / "connectivity.csv").string());
    ctx.files.push_back("connectivity.csv");

    // segment check between the two fine-tuned anchors, logged with the grid
    const double acc_e = grid.at_coefs(1.0, 0.0).accuracy;
    const double acc_a = grid.at_coefs(0.0, 1.0).accuracy;
    double min_segment = 1.0;
    for (int i = 0; i <= 4; ++i) {
        const double ae = 1.0 - 0.25 * i;
        const auto& cell = grid.at_coefs(ae, 1.0 - ae);
        min_segment = std::min(min_segment, cell.accuracy);
    }
    const std::string path = (fs::path(ctx.out_dir) / "grid_summary.csv").string();
    write_kv_csv(path, {{"acc_E", acc_e},
                        {"acc_A", acc_a},
                        {"min_segment_accuracy", min_segment},
                        {"basin_ok", min_segment >= std::min(acc_e, acc_a) - 0.05 ? 1.0 : 0.0}});
    ctx.files.push_back("grid_summary.csv");
}

void eval_consistency(EvalContext& ctx) {
    const std::string path = (fs::path(ctx.out_dir) / "consistency.csv").string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "checkpoint,consistency\n";
    auto variants = build_consistency_variants(
        ctx.task, ctx.cfg.eval.consistency_queries, ctx.cfg.train.k,
        ctx.cfg.eval.consistency_templates, ctx.cfg.eval.consistency_resamples,
        Rng(ctx.cfg.seed).child("consistency"));
    for (size_t i = 0; i < ctx.checkpoints.size(); ++i)
        out << ctx.names[i] << ','
            << format_value(
                   consistency_metric(ctx.checkpoints[i].model, variants, ctx.task.label_tokens))
            << '\n';
    ctx.files.push_back("consistency.csv");
}

void eval_unseen(EvalContext& ctx) {
    const std::string path = (fs::path(ctx.out_dir) / "unseen.csv").string();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "checkpoint,unseen_accuracy,zero_shot_accuracy,random_demo_accuracy\n";
    for (size_t i = 0; i < ctx.checkpoints.size(); ++i) {
        auto report = unseen_label_eval(ctx.checkpoints[i].model, ctx.task, ctx.cfg.train.k,
                                        ctx.cfg.eval.unseen_per_query,
                                        Rng(ctx.cfg.seed).child("unseen"));
        const double random_demo =
            eval_accuracy(ctx.checkpoints[i].model, ctx.test_set, ctx.task.label_tokens);
        out << ctx.names[i] << ',' << format_value(report.unseen_accuracy) << ','
            << format_value(report.zero_shot_accuracy) << ',' << format_value(random_demo) << '\n';
    }
    ctx.files.push_back("unseen.csv");
}

void eval_shift(EvalContext& ctx) {
    require_checkpoints(ctx, 2, "parameter-shift analysis (before, after)");
    auto map = shift_map(ctx.checkpoints[0].model, ctx.checkpoints[1].model);
    write_shift_csv(map, (fs::path(ctx.out_dir) / "shift.csv").string());
    ctx.files.push_back("shift.csv");
}

}  // namespace

std::vector<std::string> cmd_eval(const ExperimentConfig& cfg_in,
                                  const std::vector<std::string>& analyses,
                                  const std::vector<std::string>& checkpoint_paths) {
    ExperimentConfig cfg = cfg_in;
    cfg.model.seed = cfg.seed;
    cfg.validate();
    if (checkpoint_paths.empty()) throw ConfigError("eval needs at least one --ckpt");
    if (analyses.empty()) throw ConfigError("eval needs at least one --analysis");
    const std::string out_dir = prepare_out_dir(cfg);

    EvalContext ctx{cfg, out_dir, {}, {}, task_from_config(cfg), {}, {}};
    for (const auto& path : checkpoint_paths) {
        auto loaded = load_checkpoint(path);
        if (!loaded.model.cfg.same_architecture(cfg.model))
            throw ContractError("checkpoint " + path + " does not match the configured model");
        std::string name = fs::path(path).stem().string();
        if (std::find(ctx.names.begin(), ctx.names.end(), name) != ctx.names.end())
            name += "_" + std::to_string(ctx.names.size());
        ctx.names.push_back(std::move(name));
        ctx.checkpoints.push_back(std::move(loaded));
    }
    ctx.test_set = test_set_from_config(cfg, ctx.task);

    for (const auto& analysis : analyses) {
        if (analysis == "acc") eval_acc(ctx);
        else if (analysis == "heads") eval_heads(ctx);
        else if (analysis == "profile") eval_profile(ctx);
        else if (analysis == "grid") eval_grid(ctx);
        else if (analysis == "consistency") eval_consistency(ctx);
        else if (analysis == "unseen") eval_unseen(ctx);
        else if (analysis == "shift") eval_shift(ctx);
        else
            throw ConfigError("unknown analysis `" + analysis +
                              "`; expected acc|heads|profile|grid|consistency|unseen|shift");
    }

    write_manifest(out_dir, config_hash_hex(cfg), ctx.files);
    std::cout << "wrote " << ctx.files.size() << " artifacts to " << out_dir << "\n";
    std::vector<std::string> paths;
    paths.reserve(ctx.files.size());
    for (const auto& f : ctx.files) paths.push_back(join_path(out_dir, f));
    return paths;
}

int cmd_inspect(const std::string& path) {
    auto info = inspect_checkpoint(path);
    std::cout << "checkpoint: " << path << "\n";
    std::cout << "format version: " << info.version << "\n";
    std::cout << "tensors: " << info.tensor_shapes.size() << "\n";
    std::cout << "parameters: " << info.total_parameters << "\n";
    std::cout << "embedded config:\n";
    std::istringstream in(info.config_text);
    std::string line;
    while (std::getline(in, line)) std::cout << "  " << line << "\n";
    return 0;
}

}  // namespace abft
