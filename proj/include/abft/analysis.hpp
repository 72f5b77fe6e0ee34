#pragma once

// Measurements over frozen models: accuracies (in- and out-of-domain),
// induction-head counts, per-layer attention profiles, linear interpolation
// between parameter sets, prediction consistency, unseen-label evaluation,
// and parameter-shift maps. All operations are read-only on the model.

#include <string>
#include <vector>

#include "abft/data.hpp"
#include "abft/model.hpp"
#include "abft/trainer.hpp"

namespace abft {

// Fraction of correct label predictions over a fixed test set.
double eval_accuracy(const Model& model, const std::vector<ICLSample>& test_set,
                     const std::vector<int>& label_tokens);

struct OodTask {
    std::string name;
    std::vector<ICLSample> test_set;
    std::vector<int> label_tokens;
};

struct OodEntry {
    std::string task;
    double acc_before = 0.0;
    double acc_after = 0.0;
};

// Paired before/after accuracies on tasks outside the fine-tuned domain.
std::vector<OodEntry> eval_ood(const Model& model_before, const Model& model_after,
                               const std::vector<OodTask>& tasks);

// Mean number of heads judged induction per sample, using the training filter.
double count_induction_heads(const Model& model, const std::vector<ICLSample>& batch,
                             double log_base = 0.0);

// Per-head fraction of samples on which the head passes the filter,
// ordered (layer, head).
std::vector<double> head_induction_frequencies(const Model& model,
                                               const std::vector<ICLSample>& batch,
                                               double log_base = 0.0);

// Per-layer mean attention mass on label positions (S) and on correct-label
// positions (S+), averaged over heads and samples.
struct LayerAttentionProfile {
    std::vector<double> s;       // indexed by layer
    std::vector<double> s_plus;  // indexed by layer

    double sum_s_plus() const {
        double t = 0;
        for (double v : s_plus) t += v;
        return t;
    }
    double mean_ratio() const {  // mean over layers of S+/S
        double t = 0;
        for (size_t i = 0; i < s.size(); ++i) t += s[i] > 0 ? s_plus[i] / s[i] : 0.0;
        return s.empty() ? 0.0 : t / static_cast<double>(s.size());
    }
};

LayerAttentionProfile layer_profile(const Model& model, const std::vector<ICLSample>& samples);

// theta = theta0 + alpha_e * (thetaE - theta0) + alpha_a * (thetaA - theta0),
// elementwise over the canonical parameter order.
Model interpolate_models(const Model& theta0, const Model& theta_e, const Model& theta_a,
                         double alpha_e, double alpha_a);

struct GridSpec {
    double min_coef = -0.25;
    double max_coef = 1.5;
    double step = 0.25;

    void validate() const {
        if (step <= 0 || step > 0.25 + 1e-12)
            throw ContractError("grid step must be positive and at most 0.25");
        if (min_coef > 0.0 || max_coef < 1.25)
            throw ContractError("grid must cover at least [0, 1.25] on both axes");
    }
    int points() const { return static_cast<int>(std::round((max_coef - min_coef) / step)) + 1; }
    double coef(int i) const { return min_coef + i * step; }
};

struct ConnectivityCell {
    double alpha_e = 0.0;
    double alpha_a = 0.0;
    double accuracy = 0.0;
};

struct ConnectivityGrid {
    GridSpec spec;
    std::vector<ConnectivityCell> cells;  // row-major over (alpha_e, alpha_a)

    const ConnectivityCell& at_coefs(double alpha_e, double alpha_a) const;
};

// Accuracy of every mixed parameter set on the grid. Cells are independent
// and evaluated in parallel.
ConnectivityGrid connectivity_grid(const Model& theta0, const Model& theta_e,
                                   const Model& theta_a, const GridSpec& spec,
                                   const std::vector<ICLSample>& test_set,
                                   const std::vector<int>& label_tokens);

// (largest agreeing vote count) / (total votes) for one query.
double max_vote_ratio(const std::vector<int>& votes);

// Mean over queries of max_vote_ratio, where each query has m >= 2
// prediction variants.
double consistency_metric(const Model& model,
                          const std::vector<std::vector<ICLSample>>& variants_per_query,
                          const std::vector<int>& label_tokens);

// Variant sets for the consistency metric: template variants (marker tokens)
// crossed with demonstration resamplings, per query-pool entry.
std::vector<std::vector<ICLSample>> build_consistency_variants(const Task& task, int n_queries,
                                                               int k, int n_templates,
                                                               int n_resamples, Rng rng);

struct UnseenLabelReport {
    double unseen_accuracy = 0.0;     // demonstrations never show the true label
    double zero_shot_accuracy = 0.0;  // same queries rendered with k = 0
    int n_samples = 0;
};

UnseenLabelReport unseen_label_eval(const Model& model, const Task& task, int k, int per_query,
                                    Rng rng);

struct ShiftEntry {
    std::string name;
    int layer = -1;
    std::string kind;
    double distance = 0.0;  // Frobenius norm of theta - theta'
};

struct ShiftMap {
    std::vector<ShiftEntry> entries;
    double max_distance() const;
};

ShiftMap shift_map(const Model& before, const Model& after);

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

void write_profile_csv(const LayerAttentionProfile& profile, const std::string& path);
void write_grid_csv(const ConnectivityGrid& grid, const std::string& path);
void write_shift_csv(const ShiftMap& map, const std::string& path);
void write_head_frequency_csv(const Model& model, const std::vector<double>& frequencies,
                              const std::string& path);

// Grayscale heatmap of every head's last attention row: one row per head
// (ordered layer, head), one column per token. Binary PGM (P5).
void write_attention_pgm(const Model& model, const ICLSample& sample, const std::string& path);

}  // namespace abft
