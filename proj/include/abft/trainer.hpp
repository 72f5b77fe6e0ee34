#pragma once

// The attention-behavior fine-tuning method: induction-head filtering on
// captured attention rows, the punish/reward loss on label positions,
// PID-controlled loss factors, pseudo-batch training restricted to the
// query/key projections, plus the end-to-end baseline and causal-LM
// pretraining.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "abft/data.hpp"
#include "abft/model.hpp"
#include "abft/tensor.hpp"

namespace abft {

struct ABFTConfig {
    double a0 = 0.5;  // punish factor A_0
    double b0 = 1.0;  // reward factor B_0
    double lr = 2e-5;
    int n_d = 512;     // training samples built from the training pool
    int n_b = 32;      // pseudo-batch size
    int n_steps = 32;  // optimizer steps
    int k = 4;         // demonstrations per sample
    bool pid_enabled = true;
    double c_p = 0.03, c_i = 0.005, c_d = 0.005;
    bool head_filter_enabled = true;
    double log_base = 0.0;  // 0 = natural log in the threshold, else an explicit base

    void validate() const {
        if (a0 < 0 || b0 < 0) throw ConfigError("loss factors A0/B0 must be non-negative");
        if (lr <= 0) throw ConfigError("learning rate must be positive");
        if (n_d < 1) throw ConfigError("n_d must be positive");
        if (n_b < 1 || n_steps < 1) throw ConfigError("n_b and n_steps must be positive");
        if (k < 0) throw ConfigError("k must be non-negative");
        if (log_base != 0.0 && log_base <= 1.0)
            throw ConfigError("log_base must be 0 (natural) or greater than 1");
    }
};

// T = k / (k + log(n_t)); natural log unless an explicit base is configured.
inline double induction_threshold(int k, int n_t, double log_base = 0.0) {
    if (k < 1) throw ContractError("induction_threshold: k must be at least 1");
    if (n_t < 2) throw ContractError("induction_threshold: n_t must be at least 2");
    double log_nt = std::log(static_cast<double>(n_t));
    if (log_base > 1.0) log_nt /= std::log(log_base);
    return static_cast<double>(k) / (static_cast<double>(k) + log_nt);
}

// S = sum of attention mass on the label positions.
template <class S>
double induction_score(std::span<const S> alpha, std::span<const int> positions) {
    double sum = 0.0;
    for (int p : positions) {
        if (p < 0 || p >= static_cast<int>(alpha.size()))
            throw ContractError("induction_score: position " + std::to_string(p) +
                                " out of range for alpha of length " +
                                std::to_string(alpha.size()));
        sum += static_cast<double>(alpha[p]);
    }
    return sum;
}

template <class S>
bool is_induction_head(std::span<const S> alpha, std::span<const int> positions, int k, int n_t,
                       double log_base = 0.0) {
    return induction_score(alpha, positions) > induction_threshold(k, n_t, log_base);
}

// L = A * sum_{i in I-} alpha_i + B * sum_{i in I+} (1 - alpha_i),
// differentiable with respect to alpha. Either index set may be empty.
template <class S>
TensorPtrT<S> abft_loss(const TensorPtrT<S>& alpha, std::span<const int> i_plus,
                        std::span<const int> i_minus, double a, double b) {
    if (a < 0 || b < 0) throw ContractError("abft_loss: factors must be non-negative");
    for (int p : i_plus)
        for (int q : i_minus)
            if (p == q) throw ContractError("abft_loss: I+ and I- overlap at " + std::to_string(p));
    std::vector<TensorPtrT<S>> terms;
    if (!i_minus.empty()) terms.push_back(scale(sum_positions(alpha, i_minus), static_cast<S>(a)));
    if (!i_plus.empty())
        terms.push_back(affine(sum_positions(alpha, i_plus), static_cast<S>(-b),
                               static_cast<S>(b * static_cast<double>(i_plus.size()))));
    if (terms.empty()) return make_scalar<S>(S(0));
    if (terms.size() == 1) return terms[0];
    return sum_scalars(terms);
}

struct HeadLossReport {
    int layer = 0;
    int head = 0;
    bool is_induction = false;
    double score = 0.0;  // S
    double loss = 0.0;   // this head's contribution
    double a = 0.0, b = 0.0;
};

template <class S>
struct SampleLossT {
    TensorPtrT<S> total;  // scalar; a plain constant zero when no head contributes
    std::vector<HeadLossReport> reports;
    int induction_count = 0;
};

// Per-head losses summed over the heads that pass the filter (every head when
// the filter is disabled); heads judged non-induction report a loss of zero.
template <class S>
SampleLossT<S> sample_loss(const std::vector<AttentionCaptureT<S>>& captures,
                           const ICLSample& sample, const ABFTConfig& cfg, double a, double b) {
    SampleLossT<S> out;
    const auto& positions = sample.label_positions;
    const int n_t = sample.n_t();
    const int k = static_cast<int>(positions.size());
    const double threshold =
        k >= 1 ? induction_threshold(k, n_t, cfg.log_base) : 1.0;  // no labels: nothing qualifies
    std::vector<TensorPtrT<S>> contributions;
    for (const auto& cap : captures) {
        HeadLossReport report;
        report.layer = cap.layer;
        report.head = cap.head;
        report.a = a;
        report.b = b;
        report.score =
            k >= 1 ? induction_score(std::span<const S>(cap.alpha->data), positions) : 0.0;
        report.is_induction = k >= 1 && report.score > threshold;
        if (report.is_induction) ++out.induction_count;
        const bool contributes = cfg.head_filter_enabled ? report.is_induction : k >= 1;
        if (contributes) {
            auto loss = abft_loss(cap.alpha, std::span<const int>(sample.i_plus),
                                  std::span<const int>(sample.i_minus), a, b);
            report.loss = static_cast<double>(loss->value());
            contributions.push_back(std::move(loss));
        }
        out.reports.push_back(report);
    }
    if (contributions.empty())
        out.total = make_scalar<S>(S(0));
    else if (contributions.size() == 1)
        out.total = contributions[0];
    else
        out.total = sum_scalars(contributions);
    return out;
}

// ---------------------------------------------------------------------------
// PID loss-factor control
// ---------------------------------------------------------------------------

// History of mean induction-head counts and the current punish factor. The
// update runs only once more than two counts exist; A is clamped at zero.
struct PIDState {
    std::vector<double> counts;  // n_bar_1 .. n_bar_t
    double a = 0.0;              // current A_t

    double integral() const {  // literal sum of first differences
        double s = 0.0;
        for (size_t i = 1; i < counts.size(); ++i) s += counts[i] - counts[i - 1];
        return s;
    }
};

inline double pid_update(PIDState& state, double n_bar_t, double c_p, double c_i, double c_d) {
    state.counts.push_back(n_bar_t);
    const size_t t = state.counts.size();
    if (t <= 2) return state.a;  // first two steps keep A_0
    const auto& n = state.counts;
    const double proportional = n[t - 1] - n[t - 2];
    const double integral = state.integral();
    const double derivative = n[t - 1] - 2.0 * n[t - 2] + n[t - 3];
    state.a = std::max(0.0, c_p * proportional + c_i * integral + c_d * derivative + state.a);
    return state.a;
}

// ---------------------------------------------------------------------------
// Run logs and training loops
// ---------------------------------------------------------------------------

struct RunStep {
    int step = 0;
    double mean_loss = 0.0;
    double mean_induction_count = 0.0;
    double a = 0.0, b = 0.0;
    double wall_ms = 0.0;
};

struct RunLog {
    std::vector<RunStep> steps;
    void write_csv(const std::string& path) const;
    // equality on the deterministic columns; wall_ms is measurement noise
    bool same_trajectory(const RunLog& other) const;
};

// Fine-tunes only the query/key projections with the attention loss; one Adam
// step per pseudo-batch of n_b samples (gradients averaged). When the dataset
// is smaller than n_steps * n_b it wraps around with a reshuffle per epoch.
RunLog train_abft(Model& model, const std::vector<ICLSample>& dataset, const ABFTConfig& cfg,
                  Rng rng);

// End-to-end baseline: every parameter trainable, cross-entropy on the
// correct label token at the prediction slot, same pseudo-batch schedule.
// Induction-head counts are still tracked for the log.
RunLog train_e2e(Model& model, const std::vector<ICLSample>& dataset,
                 const std::vector<int>& label_tokens, const ABFTConfig& cfg, Rng rng);

struct PretrainSchedule {
    int max_steps = 1600;
    int batch = 32;
    double lr = 1e-3;
    int eval_every = 200;
    double heldout_frac = 0.02;
    int patience = 3;        // plateau evals before stopping
    double min_delta = 5e-3;

    void validate() const {
        if (max_steps < 1 || batch < 1) throw ConfigError("pretrain: steps/batch must be positive");
        if (lr <= 0) throw ConfigError("pretrain: lr must be positive");
        if (heldout_frac <= 0 || heldout_frac >= 0.5)
            throw ConfigError("pretrain: heldout_frac must be in (0, 0.5)");
    }
};

struct PretrainReport {
    int steps_run = 0;
    double heldout_loss = 0.0;
    double uniform_bound = 0.0;  // ln(vocab_size)
};

// Next-token cross-entropy over the corpus until the held-out loss plateaus
// or the step budget is exhausted.
PretrainReport pretrain(Model& model, const std::vector<std::vector<int>>& corpus,
                        const PretrainSchedule& schedule, Rng rng);

// Mean next-token loss of a frozen model over a token subrange, averaged over
// sequences; used for the induction-signature measurement.
double mean_span_loss(const Model& model, std::span<const int> tokens, int begin, int end);

struct RepeatSignature {
    double first_loss = 0.0;   // mean loss on the original span
    double second_loss = 0.0;  // mean loss on its later duplicate
};

// Held-out repeated-segment probe: a pretrained model with induction behavior
// predicts the duplicate strictly better than the original.
RepeatSignature repeat_signature(const Model& model, const VocabLayout& vocab, int n_sequences,
                                 int seq_len, Rng rng);

}  // namespace abft
