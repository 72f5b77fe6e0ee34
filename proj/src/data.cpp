#include "abft/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <unordered_set>

namespace abft {

void Task::build_class_index() {
    auto index = [this](const std::vector<Example>& pool) {
        std::vector<std::vector<int>> by_class(n_classes);
        for (size_t i = 0; i < pool.size(); ++i) {
            if (pool[i].cls < 0 || pool[i].cls >= n_classes)
                throw DataError("pool example class " + std::to_string(pool[i].cls) +
                                " outside task classes");
            by_class[pool[i].cls].push_back(static_cast<int>(i));
        }
        return by_class;
    };
    train_by_class = index(train_pool);
    demo_by_class = index(demo_pool);
    query_by_class = index(query_pool);
}

void Task::validate() const {
    if (n_classes < 1) throw DataError("task has no classes");
    if (static_cast<int>(label_tokens.size()) != n_classes)
        throw DataError("label token count does not match class count");
    std::set<int> labels(label_tokens.begin(), label_tokens.end());
    if (static_cast<int>(labels.size()) != n_classes)
        throw DataError("label tokens are not pairwise distinct");
    const std::set<int> template_tokens{tmpl.prefix_token, tmpl.marker_token, tmpl.eoe_token};
    for (int t : template_tokens)
        if (labels.count(t)) throw DataError("label token collides with template token");
    auto check_pool = [&](const std::vector<Example>& pool) {
        for (const auto& ex : pool)
            for (int t : ex.span)
                if (labels.count(t) || template_tokens.count(t))
                    throw DataError("input span contains a label or template token");
    };
    check_pool(train_pool);
    check_pool(demo_pool);
    check_pool(query_pool);
}

Task build_synthetic_task(const SyntheticTaskConfig& cfg, const VocabLayout& vocab, Rng rng) {
    vocab.validate();
    if (cfg.n_classes < 1 || cfg.n_classes > VocabLayout::kNumLabels)
        throw ConfigError("synthetic task: n_classes must be in [1, " +
                          std::to_string(VocabLayout::kNumLabels) + "]");
    if (cfg.span_len < 1) throw ConfigError("synthetic task: span_len must be positive");
    if (cfg.n_classes + 2 > vocab.content_count())
        throw ConfigError("synthetic task: not enough content tokens for class markers");

    Task task;
    task.name = "synthetic-" + std::to_string(cfg.task_seed);
    task.n_classes = cfg.n_classes;
    task.tmpl.marker_token = VocabLayout::marker(cfg.template_variant);
    task.tmpl.eoe_count = cfg.eoe_count;

    // label tokens: a seed-dependent draw from the reserved label range
    std::vector<int> label_ids(VocabLayout::kNumLabels);
    for (int i = 0; i < VocabLayout::kNumLabels; ++i) label_ids[i] = VocabLayout::label_slot(i);
    rng.shuffle(label_ids.begin(), label_ids.end());
    task.label_tokens.assign(label_ids.begin(), label_ids.begin() + cfg.n_classes);

    // class-indicative tokens: distinct content tokens; the rest are distractors
    std::vector<int> content(vocab.content_count());
    for (int i = 0; i < vocab.content_count(); ++i) content[i] = VocabLayout::content_base() + i;
    rng.shuffle(content.begin(), content.end());
    std::vector<int> class_tokens(content.begin(), content.begin() + cfg.n_classes);
    std::vector<int> distractors(content.begin() + cfg.n_classes, content.end());

    // span space per class: span_len slots for the indicative token times
    // |distractors|^(span_len-1) fillings
    double space = cfg.span_len;
    for (int i = 0; i < cfg.span_len - 1; ++i) space *= static_cast<double>(distractors.size());
    const int total = cfg.train_pool_size + cfg.demo_pool_size + cfg.query_pool_size;
    const double per_class = static_cast<double>(total) / cfg.n_classes;
    if (per_class > 0.5 * space)
        throw DataError("pool exhaustion: requested " + std::to_string(total) +
                        " examples exceed half the distinct-span space");

    auto make_span = [&](int cls) {
        std::vector<int> span(cfg.span_len);
        const int slot = rng.uniform_int(cfg.span_len);
        for (int i = 0; i < cfg.span_len; ++i)
            span[i] = (i == slot) ? class_tokens[cls]
                                  : distractors[rng.uniform_int(static_cast<int>(distractors.size()))];
        return span;
    };

    // globally distinct examples, dealt round-robin into the three pools so
    // they stay pairwise disjoint at the example level
    std::set<std::vector<int>> seen;
    auto fill = [&](std::vector<Example>& pool, int count) {
        // balanced classes inside each pool
        for (int i = 0; i < count; ++i) {
            const int cls = i % cfg.n_classes;
            std::vector<int> span;
            do {
                span = make_span(cls);
            } while (!seen.insert(span).second);
            pool.push_back(Example{std::move(span), cls});
        }
    };
    fill(task.train_pool, cfg.train_pool_size);
    fill(task.demo_pool, cfg.demo_pool_size);
    fill(task.query_pool, cfg.query_pool_size);

    task.build_class_index();
    task.validate();
    return task;
}

ICLSample render_icl(const TemplateSpec& tmpl, const std::vector<int>& label_tokens,
                     const std::vector<Example>& demos, const Example& query, int max_len) {
    ICLSample s;
    s.query_label = query.cls;
    s.token_ids.push_back(tmpl.prefix_token);
    for (const auto& demo : demos) {
        s.token_ids.insert(s.token_ids.end(), demo.span.begin(), demo.span.end());
        s.token_ids.push_back(tmpl.marker_token);
        s.label_positions.push_back(static_cast<int>(s.token_ids.size()));
        s.class_at.push_back(demo.cls);
        s.token_ids.push_back(label_tokens.at(demo.cls));
        for (int e = 0; e < tmpl.eoe_count; ++e) s.token_ids.push_back(tmpl.eoe_token);
    }
    s.token_ids.insert(s.token_ids.end(), query.span.begin(), query.span.end());
    s.token_ids.push_back(tmpl.marker_token);  // prediction slot
    for (size_t i = 0; i < s.label_positions.size(); ++i) {
        if (s.class_at[i] == s.query_label)
            s.i_plus.push_back(s.label_positions[i]);
        else
            s.i_minus.push_back(s.label_positions[i]);
    }
    if (max_len > 0 && s.n_t() > max_len)
        throw ShapeError("sample length " + std::to_string(s.n_t()) +
                         " exceeds maximum sequence length " + std::to_string(max_len));
    return s;
}

namespace {

const std::vector<Example>& pool_for_demos(const Task& task, Split split) {
    return split == Split::kTrain ? task.train_pool : task.demo_pool;
}
const std::vector<std::vector<int>>& index_for_demos(const Task& task, Split split) {
    return split == Split::kTrain ? task.train_by_class : task.demo_by_class;
}
const std::vector<Example>& pool_for_query(const Task& task, Split split) {
    return split == Split::kTrain ? task.train_pool : task.query_pool;
}
const std::vector<std::vector<int>>& index_for_query(const Task& task, Split split) {
    return split == Split::kTrain ? task.train_by_class : task.query_by_class;
}

Example draw_from_class(const std::vector<Example>& pool, const std::vector<std::vector<int>>& index,
                        int cls, Rng& rng) {
    const auto& ids = index.at(cls);
    if (ids.empty()) throw DataError("pool has no examples of class " + std::to_string(cls));
    return pool[ids[rng.uniform_int(static_cast<int>(ids.size()))]];
}

}  // namespace

ICLSample build_icl_sample(const Task& task, int k, int query_class, Rng& rng, Split split,
                           int max_len) {
    if (k < 0) throw ContractError("build_icl_sample: k must be non-negative");
    if (query_class < 0 || query_class >= task.n_classes)
        throw ContractError("build_icl_sample: query class out of range");
    std::vector<Example> demos;
    demos.reserve(k);
    for (int i = 0; i < k; ++i) {
        const int cls = rng.uniform_int(task.n_classes);
        demos.push_back(draw_from_class(pool_for_demos(task, split), index_for_demos(task, split),
                                        cls, rng));
    }
    const Example query =
        draw_from_class(pool_for_query(task, split), index_for_query(task, split), query_class, rng);
    return render_icl(task.tmpl, task.label_tokens, demos, query, max_len);
}

ICLSample build_unseen_label_sample(const Task& task, int k, int query_class, Rng& rng, Split split,
                                    int max_len) {
    if (task.n_classes < 2)
        throw ContractError("build_unseen_label_sample: needs at least 2 classes");
    if (query_class < 0 || query_class >= task.n_classes)
        throw ContractError("build_unseen_label_sample: query class out of range");
    std::vector<Example> demos;
    demos.reserve(k);
    for (int i = 0; i < k; ++i) {
        int cls = rng.uniform_int(task.n_classes - 1);
        if (cls >= query_class) ++cls;  // uniform over classes != query_class
        demos.push_back(draw_from_class(pool_for_demos(task, split), index_for_demos(task, split),
                                        cls, rng));
    }
    const Example query =
        draw_from_class(pool_for_query(task, split), index_for_query(task, split), query_class, rng);
    return render_icl(task.tmpl, task.label_tokens, demos, query, max_len);
}

std::vector<ICLSample> build_training_set(const Task& task, int n_d, int k, Rng& rng, int max_len) {
    if (n_d < 1) throw ContractError("build_training_set: n_d must be positive");
    // query classes balanced to within one, order shuffled
    std::vector<int> classes(n_d);
    for (int i = 0; i < n_d; ++i) classes[i] = i % task.n_classes;
    rng.shuffle(classes.begin(), classes.end());
    std::vector<ICLSample> out;
    out.reserve(n_d);
    for (int cls : classes)
        out.push_back(build_icl_sample(task, k, cls, rng, Split::kTrain, max_len));
    return out;
}

std::vector<ICLSample> build_test_set(const Task& task, int per_query, int k, Rng& rng,
                                      int max_len) {
    if (per_query < 1) throw ContractError("build_test_set: per_query must be positive");
    std::vector<ICLSample> out;
    out.reserve(task.query_pool.size() * per_query);
    for (const auto& query : task.query_pool) {
        for (int r = 0; r < per_query; ++r) {
            std::vector<Example> demos;
            demos.reserve(k);
            for (int i = 0; i < k; ++i) {
                const int cls = rng.uniform_int(task.n_classes);
                demos.push_back(draw_from_class(task.demo_pool, task.demo_by_class, cls, rng));
            }
            out.push_back(render_icl(task.tmpl, task.label_tokens, demos, query, max_len));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Pretraining corpus
// ---------------------------------------------------------------------------

std::vector<int> make_markov_sequence(const VocabLayout& vocab, int seq_len, Rng& rng) {
    const int base = VocabLayout::content_base();
    const int n = vocab.content_count();
    // per-sequence random transition table, 3 successors per token
    std::vector<int> succ(static_cast<size_t>(n) * 3);
    for (auto& s : succ) s = base + rng.uniform_int(n);
    std::vector<int> seq;
    seq.reserve(seq_len);
    seq.push_back(VocabLayout::kBos);
    int cur = rng.uniform_int(n);
    while (static_cast<int>(seq.size()) < seq_len) {
        seq.push_back(base + cur);
        cur = succ[static_cast<size_t>(cur) * 3 + rng.uniform_int(3)] - base;
    }
    return seq;
}

RepeatedSequence make_repeated_sequence(const VocabLayout& vocab, int seq_len, Rng& rng) {
    const int base = VocabLayout::content_base();
    const int n = vocab.content_count();
    RepeatedSequence r;
    r.tokens.assign(seq_len, 0);
    r.tokens[0] = VocabLayout::kBos;
    for (int i = 1; i < seq_len; ++i) r.tokens[i] = base + rng.uniform_int(n);
    const int max_span = std::max(2, (seq_len - 1) / 3);
    const int span = 2 + rng.uniform_int(max_span - 1);
    r.first_begin = 1 + rng.uniform_int(seq_len - 2 * span - 1);
    r.first_end = r.first_begin + span;
    const int gap_room = seq_len - span - r.first_end;
    r.second_begin = r.first_end + rng.uniform_int(gap_room + 1);
    r.second_end = r.second_begin + span;
    std::copy(r.tokens.begin() + r.first_begin, r.tokens.begin() + r.first_end,
              r.tokens.begin() + r.second_begin);
    return r;
}

std::vector<int> make_binding_sequence(const VocabLayout& vocab, int seq_len, Rng& rng) {
    const int base = VocabLayout::content_base();
    const int n = vocab.content_count();
    const int marker = VocabLayout::marker(rng.uniform_int(VocabLayout::kNumMarkers));

    // a few patterns, each bound to a distinct label for this sequence only
    const int n_pat = 2 + rng.uniform_int(3);
    std::vector<int> label_ids(VocabLayout::kNumLabels);
    for (int i = 0; i < VocabLayout::kNumLabels; ++i) label_ids[i] = VocabLayout::label_slot(i);
    rng.shuffle(label_ids.begin(), label_ids.end());
    std::vector<std::vector<int>> patterns(n_pat);
    for (auto& p : patterns) {
        p.resize(2 + rng.uniform_int(3));
        for (auto& t : p) t = base + rng.uniform_int(n);
    }

    std::vector<int> seq;
    seq.reserve(seq_len);
    seq.push_back(VocabLayout::kBos);
    while (true) {
        const int pi = rng.uniform_int(n_pat);
        const int need = static_cast<int>(patterns[pi].size()) + 3;  // pattern + marker + label + eoe
        if (static_cast<int>(seq.size()) + need > seq_len) break;
        seq.insert(seq.end(), patterns[pi].begin(), patterns[pi].end());
        seq.push_back(marker);
        seq.push_back(label_ids[pi]);
        seq.push_back(VocabLayout::kEoe);
    }
    return seq;
}

std::vector<std::vector<int>> build_pretrain_corpus(const PretrainMixConfig& cfg,
                                                    const VocabLayout& vocab, int size, Rng& rng) {
    if (cfg.seq_len < 16) throw ConfigError("pretrain seq_len must be at least 16");
    if (cfg.frac_markov < 0 || cfg.frac_repeat < 0 || cfg.frac_markov + cfg.frac_repeat > 1.0)
        throw ConfigError("pretrain mix fractions must be non-negative and sum to at most 1");
    std::vector<std::vector<int>> corpus;
    corpus.reserve(size);
    for (int i = 0; i < size; ++i) {
        const double u = rng.uniform();
        if (u < cfg.frac_markov)
            corpus.push_back(make_markov_sequence(vocab, cfg.seq_len, rng));
        else if (u < cfg.frac_markov + cfg.frac_repeat)
            corpus.push_back(make_repeated_sequence(vocab, cfg.seq_len, rng).tokens);
        else
            corpus.push_back(make_binding_sequence(vocab, cfg.seq_len, rng));
    }
    return corpus;
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

namespace {

const std::string kCharset = "abcdefghijklmnopqrstuvwxyz0123456789.,!?'-";

std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (c == ' ' || c == '\t' || c == '\r') {
            if (!cur.empty()) words.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
}

}  // namespace

Task ingest_labeled_text(const std::string& path, const IngestConfig& cfg,
                         const VocabLayout& vocab, Rng rng,
                         const std::map<std::string, int>* fixed_labels,
                         std::map<std::string, int>* labels_out) {
    vocab.validate();
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);

    std::vector<std::pair<std::string, std::string>> rows;  // text, label
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size())
            throw DataError(path + ":" + std::to_string(line_no) +
                            ": expected `text<TAB>label`");
        rows.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    }
    if (rows.empty()) throw DataError(path + ": no labeled examples");

    // label map: either fixed (eval against an existing task) or fresh
    std::map<std::string, int> labels;
    if (fixed_labels) {
        labels = *fixed_labels;
        for (const auto& [text, label] : rows)
            if (!labels.count(label))
                throw DataError("unseen label `" + label + "` not present in the task");
    } else {
        for (const auto& [text, label] : rows)
            if (!labels.count(label)) {
                const int cls = static_cast<int>(labels.size());
                if (cls >= VocabLayout::kNumLabels)
                    throw DataError("too many distinct labels (max " +
                                    std::to_string(VocabLayout::kNumLabels) + ")");
                labels[label] = cls;
            }
    }
    if (labels_out) *labels_out = labels;

    // vocabulary: fixed character slots first, then frequent words
    const int base = VocabLayout::content_base();
    const int char_slots = static_cast<int>(kCharset.size()) + 1;  // +1 OOV character
    if (vocab.content_count() <= char_slots)
        throw ConfigError("vocab_size too small for text ingestion");
    std::map<char, int> char_id;
    for (size_t i = 0; i < kCharset.size(); ++i)
        char_id[kCharset[i]] = base + static_cast<int>(i);
    const int oov_char = base + static_cast<int>(kCharset.size());

    std::map<std::string, int> word_count;
    for (const auto& [text, label] : rows)
        for (const auto& w : split_words(text)) ++word_count[w];
    // frequency cutoff, ties broken lexicographically for determinism
    std::vector<std::pair<int, std::string>> ranked;
    for (const auto& [w, c] : word_count)
        if (c >= cfg.word_min_count) ranked.emplace_back(-c, w);
    std::sort(ranked.begin(), ranked.end());
    std::map<std::string, int> word_id;
    int next_id = base + char_slots;
    for (const auto& [negc, w] : ranked) {
        if (next_id >= vocab.vocab_size) break;
        word_id[w] = next_id++;
    }

    auto tokenize = [&](const std::string& text) {
        std::vector<int> tokens;
        for (const auto& w : split_words(text)) {
            auto it = word_id.find(w);
            if (it != word_id.end()) {
                tokens.push_back(it->second);
            } else {
                for (char c : w) {
                    auto ct = char_id.find(c);
                    tokens.push_back(ct != char_id.end() ? ct->second : oov_char);
                }
            }
            if (static_cast<int>(tokens.size()) >= cfg.max_span_tokens) break;
        }
        if (static_cast<int>(tokens.size()) > cfg.max_span_tokens)
            tokens.resize(cfg.max_span_tokens);
        if (tokens.empty()) tokens.push_back(oov_char);
        return tokens;
    };

    Task task;
    task.name = path;
    task.n_classes = static_cast<int>(labels.size());
    task.label_tokens.resize(task.n_classes);
    for (int i = 0; i < task.n_classes; ++i) task.label_tokens[i] = VocabLayout::label_slot(i);
    task.tmpl.marker_token = VocabLayout::marker(cfg.template_variant);
    task.tmpl.eoe_count = cfg.eoe_count;

    std::vector<Example> all;
    all.reserve(rows.size());
    for (const auto& [text, label] : rows) all.push_back(Example{tokenize(text), labels.at(label)});
    rng.shuffle(all.begin(), all.end());
    const auto n_train = static_cast<size_t>(cfg.train_frac * static_cast<double>(all.size()));
    const auto n_demo = static_cast<size_t>(cfg.demo_frac * static_cast<double>(all.size()));
    task.train_pool.assign(all.begin(), all.begin() + n_train);
    task.demo_pool.assign(all.begin() + n_train, all.begin() + n_train + n_demo);
    task.query_pool.assign(all.begin() + n_train + n_demo, all.end());
    if (task.train_pool.empty() || task.demo_pool.empty() || task.query_pool.empty())
        throw DataError(path + ": too few examples to split into pools");

    task.build_class_index();
    task.validate();
    return task;
}

}  // namespace abft
