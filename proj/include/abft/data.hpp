#pragma once

// Token-level data construction: synthetic classification tasks rendered as
// demonstration-query concatenations with recorded label positions, the
// pretraining corpus generators, and line-delimited text ingestion.

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "abft/common.hpp"

namespace abft {

// Fixed vocabulary layout. Low ids are reserved for template machinery,
// the rest is content space shared by every generator.
struct VocabLayout {
    int vocab_size = 96;

    static constexpr int kBos = 0;
    static constexpr int kEoe = 1;
    static constexpr int kNumMarkers = 3;  // template variants
    static constexpr int kNumLabels = 16;

    static int marker(int variant) {
        if (variant < 0 || variant >= kNumMarkers)
            throw ContractError("marker variant out of range");
        return 2 + variant;
    }
    static int label_slot(int i) { return 2 + kNumMarkers + i; }
    static constexpr int content_base() { return 2 + kNumMarkers + kNumLabels; }
    int content_count() const { return vocab_size - content_base(); }

    void validate() const {
        if (content_count() < 16)
            throw ConfigError("vocab_size " + std::to_string(vocab_size) +
                              " leaves fewer than 16 content tokens");
    }
};

struct TemplateSpec {
    int prefix_token = VocabLayout::kBos;  // emitted once at sequence start
    int marker_token = 2;                  // precedes every label / prediction slot
    int eoe_token = VocabLayout::kEoe;
    int eoe_count = 1;  // end-of-example tokens after each demonstration label
};

struct Example {
    std::vector<int> span;
    int cls = 0;
    bool operator==(const Example&) const = default;
};

// A demonstration-query concatenation with label-token positions recorded at
// construction time. The final position is always the prediction slot
// (a marker token), never a label token.
struct ICLSample {
    std::vector<int> token_ids;
    std::vector<int> label_positions;  // I, ordered
    std::vector<int> class_at;         // class of each entry of I
    std::vector<int> i_plus;           // positions whose class == query_label
    std::vector<int> i_minus;          // I \ I+
    int query_label = -1;
    int n_t() const { return static_cast<int>(token_ids.size()); }
};

enum class Split { kTrain, kTest };

struct Task {
    std::string name;
    int n_classes = 0;
    std::vector<int> label_tokens;  // one per class
    TemplateSpec tmpl;
    std::vector<Example> train_pool;  // demonstrations + queries for training
    std::vector<Example> demo_pool;   // test-time demonstrations
    std::vector<Example> query_pool;  // test-time queries

    // index of pool entries by class, fixed at construction
    std::vector<std::vector<int>> train_by_class, demo_by_class, query_by_class;

    void build_class_index();
    void validate() const;
};

struct SyntheticTaskConfig {
    uint64_t task_seed = 1;
    int n_classes = 4;
    int span_len = 3;
    int eoe_count = 1;
    int template_variant = 0;
    int train_pool_size = 1024;
    int demo_pool_size = 2048;
    int query_pool_size = 512;
};

// Builds a synthetic task: each class emits spans containing one
// class-indicative token plus distractors; pools are pairwise disjoint at the
// example level.
Task build_synthetic_task(const SyntheticTaskConfig& cfg, const VocabLayout& vocab, Rng rng);

// Renders one sample from explicit demonstrations and query. max_len 0 skips
// the length check.
ICLSample render_icl(const TemplateSpec& tmpl, const std::vector<int>& label_tokens,
                     const std::vector<Example>& demos, const Example& query, int max_len = 0);

// k uniform-class demonstrations plus one query of the given class.
ICLSample build_icl_sample(const Task& task, int k, int query_class, Rng& rng,
                           Split split = Split::kTrain, int max_len = 0);

// Every demonstration class differs from the query class, so I+ is empty.
ICLSample build_unseen_label_sample(const Task& task, int k, int query_class, Rng& rng,
                                    Split split = Split::kTest, int max_len = 0);

// n_d samples with query classes balanced to within one.
std::vector<ICLSample> build_training_set(const Task& task, int n_d, int k, Rng& rng,
                                          int max_len = 0);

// Fixed test set: per_query demonstration resamplings for every query-pool
// entry, demonstrations drawn from the demonstration pool.
std::vector<ICLSample> build_test_set(const Task& task, int per_query, int k, Rng& rng,
                                      int max_len = 0);

// ---------------------------------------------------------------------------
// Pretraining corpus
// ---------------------------------------------------------------------------

struct PretrainMixConfig {
    int seq_len = 64;
    double frac_markov = 0.25;
    double frac_repeat = 0.30;  // remainder: in-context binding episodes
};

struct RepeatedSequence {
    std::vector<int> tokens;
    int first_begin = 0, first_end = 0;    // [begin, end) of the original span
    int second_begin = 0, second_end = 0;  // [begin, end) of the duplicate
};

std::vector<int> make_markov_sequence(const VocabLayout& vocab, int seq_len, Rng& rng);
RepeatedSequence make_repeated_sequence(const VocabLayout& vocab, int seq_len, Rng& rng);
std::vector<int> make_binding_sequence(const VocabLayout& vocab, int seq_len, Rng& rng);

std::vector<std::vector<int>> build_pretrain_corpus(const PretrainMixConfig& cfg,
                                                    const VocabLayout& vocab, int size, Rng& rng);

// ---------------------------------------------------------------------------
// Labeled-text ingestion (UTF-8, line-delimited `text<TAB>label`)
// ---------------------------------------------------------------------------

struct IngestConfig {
    int word_min_count = 2;   // words below the cutoff fall back to characters
    int max_span_tokens = 12;
    int eoe_count = 1;
    int template_variant = 0;
    double train_frac = 0.5, demo_frac = 0.3;  // remainder: query pool
};

// Builds a pool-backed task from labeled text. When fixed_labels is given,
// label strings must already be present in it (unseen label -> data error).
Task ingest_labeled_text(const std::string& path, const IngestConfig& cfg,
                         const VocabLayout& vocab, Rng rng,
                         const std::map<std::string, int>* fixed_labels = nullptr,
                         std::map<std::string, int>* labels_out = nullptr);

}  // namespace abft
