#include "abft/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace abft {

namespace {

class KeyValues {
  public:
    void insert(const std::string& key, const std::string& value, int line_no) {
        if (values_.count(key))
            throw ConfigError("duplicate config key `" + key + "` at line " +
                              std::to_string(line_no));
        values_[key] = value;
    }

    template <class T>
    void get(const std::string& key, T& out) {
        auto it = values_.find(key);
        if (it == values_.end()) return;  // keep default
        parse_into(key, it->second, out);
        consumed_.insert(it->first);
    }

    void finish() const {
        for (const auto& [key, value] : values_)
            if (!consumed_.count(key)) throw ConfigError("unknown config key `" + key + "`");
    }

  private:
    static void parse_into(const std::string& key, const std::string& s, std::string& out) {
        (void)key;
        out = s;
    }
    static void parse_into(const std::string& key, const std::string& s, bool& out) {
        if (s == "true" || s == "1") out = true;
        else if (s == "false" || s == "0") out = false;
        else throw ConfigError("config key `" + key + "`: expected boolean, got `" + s + "`");
    }
    template <class T>
    static void parse_into(const std::string& key, const std::string& s, T& out) {
        T v{};
        auto res = std::from_chars(s.data(), s.data() + s.size(), v);
        if (res.ec != std::errc{} || res.ptr != s.data() + s.size())
            throw ConfigError("config key `" + key + "`: cannot parse `" + s + "`");
        out = v;
    }

    std::map<std::string, std::string> values_;
    std::set<std::string> consumed_;
};

std::string trimmed(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::string serialize_config(const ExperimentConfig& cfg) {
    std::ostringstream out;
    out << "seed = " << cfg.seed << "\n";
    out << "out_dir = " << cfg.out_dir << "\n";
    out << "model.n_layers = " << cfg.model.n_layers << "\n";
    out << "model.n_heads = " << cfg.model.n_heads << "\n";
    out << "model.d_model = " << cfg.model.d_model << "\n";
    out << "model.vocab_size = " << cfg.model.vocab_size << "\n";
    out << "model.max_seq_len = " << cfg.model.max_seq_len << "\n";
    out << "task.task_seed = " << cfg.task.task_seed << "\n";
    out << "task.n_classes = " << cfg.task.n_classes << "\n";
    out << "task.span_len = " << cfg.task.span_len << "\n";
    out << "task.eoe_count = " << cfg.task.eoe_count << "\n";
    out << "task.template_variant = " << cfg.task.template_variant << "\n";
    out << "task.train_pool = " << cfg.task.train_pool_size << "\n";
    out << "task.demo_pool = " << cfg.task.demo_pool_size << "\n";
    out << "task.query_pool = " << cfg.task.query_pool_size << "\n";
    out << "pretrain.corpus_size = " << cfg.pretrain_corpus_size << "\n";
    out << "pretrain.seq_len = " << cfg.pretrain_mix.seq_len << "\n";
    out << "pretrain.frac_markov = " << format_value(cfg.pretrain_mix.frac_markov) << "\n";
    out << "pretrain.frac_repeat = " << format_value(cfg.pretrain_mix.frac_repeat) << "\n";
    out << "pretrain.max_steps = " << cfg.pretrain.max_steps << "\n";
    out << "pretrain.batch = " << cfg.pretrain.batch << "\n";
    out << "pretrain.lr = " << format_value(cfg.pretrain.lr) << "\n";
    out << "pretrain.eval_every = " << cfg.pretrain.eval_every << "\n";
    out << "pretrain.heldout_frac = " << format_value(cfg.pretrain.heldout_frac) << "\n";
    out << "pretrain.patience = " << cfg.pretrain.patience << "\n";
    out << "pretrain.min_delta = " << format_value(cfg.pretrain.min_delta) << "\n";
    out << "train.A0 = " << format_value(cfg.train.a0) << "\n";
    out << "train.B0 = " << format_value(cfg.train.b0) << "\n";
    out << "train.lr = " << format_value(cfg.train.lr) << "\n";
    out << "train.n_d = " << cfg.train.n_d << "\n";
    out << "train.n_b = " << cfg.train.n_b << "\n";
    out << "train.n_steps = " << cfg.train.n_steps << "\n";
    out << "train.k = " << cfg.train.k << "\n";
    out << "train.pid = " << (cfg.train.pid_enabled ? 1 : 0) << "\n";
    out << "train.C_p = " << format_value(cfg.train.c_p) << "\n";
    out << "train.C_i = " << format_value(cfg.train.c_i) << "\n";
    out << "train.C_d = " << format_value(cfg.train.c_d) << "\n";
    out << "train.head_filter = " << (cfg.train.head_filter_enabled ? 1 : 0) << "\n";
    out << "train.log_base = " << format_value(cfg.train.log_base) << "\n";
    out << "eval.per_query = " << cfg.eval.per_query << "\n";
    out << "eval.consistency_queries = " << cfg.eval.consistency_queries << "\n";
    out << "eval.consistency_templates = " << cfg.eval.consistency_templates << "\n";
    out << "eval.consistency_resamples = " << cfg.eval.consistency_resamples << "\n";
    out << "eval.unseen_per_query = " << cfg.eval.unseen_per_query << "\n";
    out << "eval.ood_tasks = " << cfg.eval.ood_tasks << "\n";
    out << "eval.grid_min = " << format_value(cfg.eval.grid_min) << "\n";
    out << "eval.grid_max = " << format_value(cfg.eval.grid_max) << "\n";
    out << "eval.grid_step = " << format_value(cfg.eval.grid_step) << "\n";
    out << "eval.heatmap_samples = " << cfg.eval.heatmap_samples << "\n";
    return out.str();
}

ExperimentConfig parse_config(const std::string& text) {
    KeyValues kv;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string t = trimmed(line);
        if (t.empty()) continue;
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) +
                              ": expected `key = value`");
        const std::string key = trimmed(t.substr(0, eq));
        const std::string value = trimmed(t.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("config line " + std::to_string(line_no) + ": empty key or value");
        kv.insert(key, value, line_no);
    }

    ExperimentConfig cfg;
    kv.get("seed", cfg.seed);
    kv.get("out_dir", cfg.out_dir);
    kv.get("model.n_layers", cfg.model.n_layers);
    kv.get("model.n_heads", cfg.model.n_heads);
    kv.get("model.d_model", cfg.model.d_model);
    kv.get("model.vocab_size", cfg.model.vocab_size);
    kv.get("model.max_seq_len", cfg.model.max_seq_len);
    kv.get("task.task_seed", cfg.task.task_seed);
    kv.get("task.n_classes", cfg.task.n_classes);
    kv.get("task.span_len", cfg.task.span_len);
    kv.get("task.eoe_count", cfg.task.eoe_count);
    kv.get("task.template_variant", cfg.task.template_variant);
    kv.get("task.train_pool", cfg.task.train_pool_size);
    kv.get("task.demo_pool", cfg.task.demo_pool_size);
    kv.get("task.query_pool", cfg.task.query_pool_size);
    kv.get("pretrain.corpus_size", cfg.pretrain_corpus_size);
    kv.get("pretrain.seq_len", cfg.pretrain_mix.seq_len);
    kv.get("pretrain.frac_markov", cfg.pretrain_mix.frac_markov);
    kv.get("pretrain.frac_repeat", cfg.pretrain_mix.frac_repeat);
    kv.get("pretrain.max_steps", cfg.pretrain.max_steps);
    kv.get("pretrain.batch", cfg.pretrain.batch);
    kv.get("pretrain.lr", cfg.pretrain.lr);
    kv.get("pretrain.eval_every", cfg.pretrain.eval_every);
    kv.get("pretrain.heldout_frac", cfg.pretrain.heldout_frac);
    kv.get("pretrain.patience", cfg.pretrain.patience);
    kv.get("pretrain.min_delta", cfg.pretrain.min_delta);
    kv.get("train.A0", cfg.train.a0);
    kv.get("train.B0", cfg.train.b0);
    kv.get("train.lr", cfg.train.lr);
    kv.get("train.n_d", cfg.train.n_d);
    kv.get("train.n_b", cfg.train.n_b);
    kv.get("train.n_steps", cfg.train.n_steps);
    kv.get("train.k", cfg.train.k);
    kv.get("train.pid", cfg.train.pid_enabled);
    kv.get("train.C_p", cfg.train.c_p);
    kv.get("train.C_i", cfg.train.c_i);
    kv.get("train.C_d", cfg.train.c_d);
    kv.get("train.head_filter", cfg.train.head_filter_enabled);
    kv.get("train.log_base", cfg.train.log_base);
    kv.get("eval.per_query", cfg.eval.per_query);
    kv.get("eval.consistency_queries", cfg.eval.consistency_queries);
    kv.get("eval.consistency_templates", cfg.eval.consistency_templates);
    kv.get("eval.consistency_resamples", cfg.eval.consistency_resamples);
    kv.get("eval.unseen_per_query", cfg.eval.unseen_per_query);
    kv.get("eval.ood_tasks", cfg.eval.ood_tasks);
    kv.get("eval.grid_min", cfg.eval.grid_min);
    kv.get("eval.grid_max", cfg.eval.grid_max);
    kv.get("eval.grid_step", cfg.eval.grid_step);
    kv.get("eval.heatmap_samples", cfg.eval.heatmap_samples);
    kv.finish();

    cfg.model.seed = cfg.seed;  // all model randomness flows from the run seed
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

std::string config_hash_hex(const ExperimentConfig& cfg) {
    const uint64_t h = fnv1a64(serialize_config(cfg));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace abft
