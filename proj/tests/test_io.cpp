#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "abft/commands.hpp"

using namespace abft;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment(const std::string& out_dir, uint64_t seed = 7) {
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.out_dir = out_dir;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.d_model = 16;
    cfg.model.vocab_size = 64;
    cfg.model.max_seq_len = 64;
    cfg.model.seed = seed;
    cfg.task.n_classes = 2;
    cfg.task.span_len = 3;
    cfg.task.train_pool_size = 48;
    cfg.task.demo_pool_size = 48;
    cfg.task.query_pool_size = 24;
    cfg.pretrain_corpus_size = 200;
    cfg.pretrain_mix.seq_len = 32;
    cfg.pretrain.max_steps = 20;
    cfg.pretrain.batch = 8;
    cfg.pretrain.eval_every = 10;
    cfg.train.n_d = 16;
    cfg.train.n_b = 4;
    cfg.train.n_steps = 2;
    cfg.eval.per_query = 1;
    cfg.eval.consistency_queries = 4;
    cfg.eval.unseen_per_query = 1;
    cfg.eval.ood_tasks = 1;
    cfg.eval.heatmap_samples = 2;
    return cfg;
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("config round trip is canonical and unknown keys are rejected") {
    ExperimentConfig cfg = tiny_experiment("/tmp/x");
    cfg.train.lr = 3e-4;
    cfg.train.pid_enabled = false;
    const std::string text = serialize_config(cfg);
    ExperimentConfig parsed = parse_config(text);
    CHECK(serialize_config(parsed) == text);
    CHECK(parsed.train.lr == cfg.train.lr);
    CHECK(parsed.train.pid_enabled == false);
    CHECK(parsed.seed == cfg.seed);
    CHECK(parsed.model.seed == cfg.seed);  // derived, not serialized

    CHECK_THROWS_AS(parse_config("bogus.key = 1\n"), ConfigError);
    try {
        parse_config("bogus.key = 1\n");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("bogus.key") != std::string::npos);
    }
    CHECK_THROWS_AS(parse_config("model.n_layers = not_a_number\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("seed = 1\nseed = 2\n"), ConfigError);
    CHECK_THROWS_AS(parse_config("just some text\n"), ConfigError);

    // comments and blank lines are fine
    auto ok = parse_config("# comment\n\nseed = 9\n");
    CHECK(ok.seed == 9);

    CHECK(config_hash_hex(cfg) == config_hash_hex(cfg));
    ExperimentConfig other = cfg;
    other.train.lr = 1e-3;
    CHECK(config_hash_hex(cfg) != config_hash_hex(other));
}

TEST_CASE("checkpoint round trip is bit-exact") {
    TempDir dir("abft_ckpt_test");
    ExperimentConfig cfg = tiny_experiment(dir.str());
    auto model = init_model<float>(cfg.model);
    const std::string path = dir.str() + "/model.ckpt";
    save_checkpoint(path, model, serialize_config(cfg));

    auto loaded = load_checkpoint(path);
    CHECK(loaded.config_text == serialize_config(cfg));
    auto pa = model.parameters();
    auto pb = loaded.model.parameters();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i]->shape == pb[i]->shape);
        CHECK(pa[i]->data == pb[i]->data);
    }

    // identical second save: byte-identical file
    const std::string bytes1 = read_file(path);
    save_checkpoint(path, model, serialize_config(cfg));
    CHECK(read_file(path) == bytes1);

    auto info = inspect_checkpoint(path);
    CHECK(info.version == kCheckpointVersion);
    CHECK(info.total_parameters == model.parameter_count());
    CHECK(info.tensor_shapes.size() == pa.size());
}

TEST_CASE("checkpoint loading rejects damage by failure class") {
    TempDir dir("abft_ckpt_damage");
    ExperimentConfig cfg = tiny_experiment(dir.str());
    auto model = init_model<float>(cfg.model);
    const std::string path = dir.str() + "/model.ckpt";
    save_checkpoint(path, model, serialize_config(cfg));
    const std::string good = read_file(path);

    auto write_bytes = [&](const std::string& bytes) {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };

    auto expect_failure = [&](const std::string& needle) {
        try {
            load_checkpoint(path);
            CHECK_MESSAGE(false, "expected a load failure mentioning: " << needle);
        } catch (const DataError& e) {
            CHECK(std::string(e.what()).find(needle) != std::string::npos);
        }
    };

    // foreign magic
    std::string bad = good;
    bad[0] = 'X';
    write_bytes(bad);
    expect_failure("bad magic");

    // version mismatch
    bad = good;
    bad[8] = static_cast<char>(9);
    write_bytes(bad);
    expect_failure("version mismatch");

    // truncation
    write_bytes(good.substr(0, good.size() / 2));
    expect_failure("truncated");

    // payload corruption breaks the checksum
    bad = good;
    bad[good.size() / 2] = static_cast<char>(bad[good.size() / 2] ^ 0x40);
    write_bytes(bad);
    expect_failure("checksum");

    CHECK_THROWS_AS(load_checkpoint(dir.str() + "/missing.ckpt"), DataError);
}

TEST_CASE("pretrain command writes deterministic artifacts and a manifest") {
    TempDir dir_a("abft_cmd_pre_a");
    TempDir dir_b("abft_cmd_pre_b");
    auto cfg_a = tiny_experiment(dir_a.str());
    auto outcome_a = cmd_pretrain(cfg_a);
    CHECK(fs::exists(outcome_a.checkpoint_path));
    CHECK(fs::exists(dir_a.path / "pretrain_report.csv"));
    CHECK(fs::exists(dir_a.path / "manifest.json"));
    CHECK(outcome_a.report.heldout_loss > 0.0);
    CHECK(outcome_a.report.uniform_bound == doctest::Approx(std::log(64.0)));

    auto cfg_b = tiny_experiment(dir_b.str());
    auto outcome_b = cmd_pretrain(cfg_b);
    // out_dir differs (its key is part of the config text), so compare the
    // tensor payloads rather than whole files
    auto ma = load_checkpoint(outcome_a.checkpoint_path);
    auto mb = load_checkpoint(outcome_b.checkpoint_path);
    auto pa = ma.model.parameters();
    auto pb = mb.model.parameters();
    for (size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data == pb[i]->data);

    const std::string manifest = read_file((dir_a.path / "manifest.json").string());
    CHECK(manifest.find("pretrained.ckpt") != std::string::npos);
    CHECK(manifest.find("pretrain_report.csv") != std::string::npos);
    CHECK(manifest.find(config_hash_hex(cfg_a)) != std::string::npos);
}

TEST_CASE("finetune refuses a base model that fails the gate") {
    TempDir dir("abft_cmd_gate");
    auto cfg = tiny_experiment(dir.str());
    // a zeroed model predicts constantly: accuracy equals chance exactly,
    // which is not above chance, so the gate must refuse
    auto model = init_model<float>(cfg.model);
    for (auto& p : model.parameters()) std::fill(p->data.begin(), p->data.end(), 0.0f);
    const std::string base = dir.str() + "/flat.ckpt";
    save_checkpoint(base, model, serialize_config(cfg));
    CHECK_THROWS_AS(cmd_finetune(cfg, "abft", base), DataError);
    CHECK_THROWS_AS(cmd_finetune(cfg, "nonsense", base), ConfigError);
}

TEST_CASE("eval command writes the selected analyses idempotently") {
    TempDir dir("abft_cmd_eval");
    auto cfg = tiny_experiment(dir.str());
    auto m0 = init_model<float>(cfg.model);
    auto cfg2 = cfg;
    cfg2.seed = 8;
    cfg2.model.seed = 8;
    auto m1 = init_model<float>(cfg2.model);
    auto cfg3 = cfg;
    cfg3.seed = 9;
    cfg3.model.seed = 9;
    auto m2 = init_model<float>(cfg3.model);
    const std::string p0 = dir.str() + "/theta0.ckpt";
    const std::string p1 = dir.str() + "/thetaE.ckpt";
    const std::string p2 = dir.str() + "/thetaA.ckpt";
    save_checkpoint(p0, m0, serialize_config(cfg));
    save_checkpoint(p1, m1, serialize_config(cfg));
    save_checkpoint(p2, m2, serialize_config(cfg));

    auto files = cmd_eval(cfg, {"acc", "heads", "profile", "consistency", "unseen"}, {p0});
    for (const auto& f : files) CHECK(fs::exists(f));
    const std::string accuracy_csv = read_file((dir.path / "accuracy.csv").string());
    CHECK(accuracy_csv.find("checkpoint,task,accuracy") == 0);
    CHECK(accuracy_csv.find("synthetic-1") != std::string::npos);  // in-domain task
    CHECK(accuracy_csv.find("synthetic-2") != std::string::npos);  // derived OOD task

    // idempotence: byte-identical artifacts on re-run
    std::vector<std::string> before;
    for (const auto& f : files) before.push_back(read_file(f));
    auto files2 = cmd_eval(cfg, {"acc", "heads", "profile", "consistency", "unseen"}, {p0});
    REQUIRE(files2 == files);
    for (size_t i = 0; i < files.size(); ++i) CHECK(read_file(files[i]) == before[i]);

    // arity contracts
    CHECK_THROWS_AS(cmd_eval(cfg, {"grid"}, {p0}), ContractError);
    CHECK_THROWS_AS(cmd_eval(cfg, {"shift"}, {p0, p1, p2}), ContractError);
    CHECK_THROWS_AS(cmd_eval(cfg, {"nope"}, {p0}), ConfigError);

    cmd_eval(cfg, {"grid"}, {p0, p1, p2});
    CHECK(fs::exists(dir.path / "connectivity.csv"));
    CHECK(fs::exists(dir.path / "grid_summary.csv"));
    cmd_eval(cfg, {"shift"}, {p0, p1});
    CHECK(fs::exists(dir.path / "shift.csv"));

    // manifest covers exactly the last run's files
    const std::string manifest = read_file((dir.path / "manifest.json").string());
    CHECK(manifest.find("shift.csv") != std::string::npos);
}

TEST_CASE("cli maps error families to exit codes") {
    TempDir dir("abft_cli_codes");
    const std::string cfg_path = dir.str() + "/cfg.txt";
    {
        std::ofstream out(cfg_path);
        out << serialize_config(tiny_experiment(dir.str()));
    }

    auto run = [&](std::vector<std::string> args) {
        std::vector<char*> argv;
        args.insert(args.begin(), "abft");
        for (auto& a : args) argv.push_back(a.data());
        return run_cli(static_cast<int>(argv.size()), argv.data());
    };

    CHECK(run({"--help"}) == 0);
    CHECK(run({"definitely-not-a-command"}) == 2);
    CHECK(run({"eval", "--config", cfg_path}) == 2);  // no analyses / checkpoints
    CHECK(run({"inspect-checkpoint", dir.str() + "/absent.ckpt"}) == 3);
    CHECK(run({"finetune", "--base", dir.str() + "/absent.ckpt", "--config", cfg_path}) == 3);
}
