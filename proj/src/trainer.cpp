#include "abft/trainer.hpp"

#include <chrono>
#include <fstream>
#include <numeric>

namespace abft {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

// Shuffled epoch-wrapping sample iterator; never truncates the schedule.
class SampleCursor {
  public:
    SampleCursor(size_t n, Rng& rng) : order_(n), rng_(rng) {
        if (n == 0) throw ContractError("training dataset is empty");
        std::iota(order_.begin(), order_.end(), 0);
        rng_.shuffle(order_.begin(), order_.end());
    }
    size_t next() {
        if (cursor_ == order_.size()) {
            rng_.shuffle(order_.begin(), order_.end());
            cursor_ = 0;
        }
        return order_[cursor_++];
    }

  private:
    std::vector<size_t> order_;
    Rng& rng_;
    size_t cursor_ = 0;
};

void check_finite_loss(double v, const char* where) {
    if (!std::isfinite(v)) throw ContractError(std::string(where) + ": non-finite loss value");
}

}  // namespace

void RunLog::write_csv(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    out << "step,mean_loss,mean_induction_count,A,B,wall_ms\n";
    for (const auto& s : steps)
        out << s.step << ',' << format_value(s.mean_loss) << ','
            << format_value(s.mean_induction_count) << ',' << format_value(s.a) << ','
            << format_value(s.b) << ',' << format_value(s.wall_ms) << '\n';
}

bool RunLog::same_trajectory(const RunLog& other) const {
    if (steps.size() != other.steps.size()) return false;
    for (size_t i = 0; i < steps.size(); ++i) {
        const auto& a = steps[i];
        const auto& b = other.steps[i];
        if (a.step != b.step || a.mean_loss != b.mean_loss ||
            a.mean_induction_count != b.mean_induction_count || a.a != b.a || a.b != b.b)
            return false;
    }
    return true;
}

RunLog train_abft(Model& model, const std::vector<ICLSample>& dataset, const ABFTConfig& cfg,
                  Rng rng) {
    cfg.validate();
    restrict_trainable(model, TrainMode::kQkOnly);
    auto trainable = model.trainable_parameters();
    AdamState opt(trainable, static_cast<float>(cfg.lr));

    Rng shuffle_rng = rng.child("shuffle");
    SampleCursor cursor(dataset.size(), shuffle_rng);

    PIDState pid;
    pid.a = cfg.a0;
    double a = cfg.a0;
    const double b = cfg.b0;  // B stays fixed; controlling A alone suffices

    RunLog log;
    for (int step = 1; step <= cfg.n_steps; ++step) {
        const auto t0 = Clock::now();
        zero_grad(trainable);
        double loss_sum = 0.0;
        long count_sum = 0;
        for (int i = 0; i < cfg.n_b; ++i) {
            const auto& sample = dataset[cursor.next()];
            auto fwd = forward(model, sample.token_ids, /*capture=*/true);
            auto sl = sample_loss(fwd.captures, sample, cfg, a, b);
            const double v = static_cast<double>(sl.total->value());
            check_finite_loss(v, "train_abft");
            loss_sum += v;
            count_sum += sl.induction_count;
            if (sl.total->requires_grad)
                backward(scale(sl.total, 1.0f / static_cast<float>(cfg.n_b)));
        }
        opt.step();
        const double n_bar = static_cast<double>(count_sum) / cfg.n_b;
        if (cfg.pid_enabled)
            a = pid_update(pid, n_bar, cfg.c_p, cfg.c_i, cfg.c_d);
        else
            pid.counts.push_back(n_bar);
        log.steps.push_back(RunStep{step, loss_sum / cfg.n_b, n_bar, a, b, ms_since(t0)});
    }
    return log;
}

RunLog train_e2e(Model& model, const std::vector<ICLSample>& dataset,
                 const std::vector<int>& label_tokens, const ABFTConfig& cfg, Rng rng) {
    cfg.validate();
    if (label_tokens.empty()) throw ContractError("train_e2e: empty label token set");
    restrict_trainable(model, TrainMode::kAll);
    auto trainable = model.trainable_parameters();
    AdamState opt(trainable, static_cast<float>(cfg.lr));

    Rng shuffle_rng = rng.child("shuffle");
    SampleCursor cursor(dataset.size(), shuffle_rng);

    RunLog log;
    for (int step = 1; step <= cfg.n_steps; ++step) {
        const auto t0 = Clock::now();
        zero_grad(trainable);
        double loss_sum = 0.0;
        long count_sum = 0;
        for (int i = 0; i < cfg.n_b; ++i) {
            const auto& sample = dataset[cursor.next()];
            auto fwd = forward(model, sample.token_ids, /*capture=*/true);
            // induction counts tracked for the log only
            auto sl = sample_loss(fwd.captures, sample, cfg, cfg.a0, cfg.b0);
            count_sum += sl.induction_count;
            const int target = label_tokens.at(sample.query_label);
            auto loss = cross_entropy(take_row(fwd.logits, sample.n_t() - 1), target);
            const double v = static_cast<double>(loss->value());
            check_finite_loss(v, "train_e2e");
            loss_sum += v;
            backward(scale(loss, 1.0f / static_cast<float>(cfg.n_b)));
        }
        opt.step();
        log.steps.push_back(RunStep{step, loss_sum / cfg.n_b,
                                    static_cast<double>(count_sum) / cfg.n_b, cfg.a0, cfg.b0,
                                    ms_since(t0)});
    }
    return log;
}

namespace {

double heldout_mean_loss(const Model& model, const std::vector<std::vector<int>>& corpus,
                         const std::vector<size_t>& ids) {
    NoGradGuard no_grad;
    double total = 0.0;
    long n = 0;
    for (size_t id : ids) {
        auto fwd = forward(model, corpus[id], /*capture=*/false);
        auto loss = lm_cross_entropy(fwd.logits, corpus[id]);
        total += static_cast<double>(loss->value());
        ++n;
    }
    return total / static_cast<double>(n);
}

}  // namespace

PretrainReport pretrain(Model& model, const std::vector<std::vector<int>>& corpus,
                        const PretrainSchedule& schedule, Rng rng) {
    schedule.validate();
    if (corpus.empty()) throw ContractError("pretrain: empty corpus");
    restrict_trainable(model, TrainMode::kAll);
    auto trainable = model.trainable_parameters();
    AdamState opt(trainable, static_cast<float>(schedule.lr));

    // deterministic held-out split
    std::vector<size_t> ids(corpus.size());
    std::iota(ids.begin(), ids.end(), 0);
    Rng split_rng = rng.child("heldout");
    split_rng.shuffle(ids.begin(), ids.end());
    size_t n_heldout = std::max<size_t>(1, static_cast<size_t>(schedule.heldout_frac *
                                                               static_cast<double>(corpus.size())));
    n_heldout = std::min(n_heldout, corpus.size() - 1);
    std::vector<size_t> heldout(ids.begin(), ids.begin() + n_heldout);
    std::vector<size_t> train_ids(ids.begin() + n_heldout, ids.end());

    Rng shuffle_rng = rng.child("shuffle");
    std::vector<size_t> order = train_ids;
    shuffle_rng.shuffle(order.begin(), order.end());
    size_t cursor = 0;

    PretrainReport report;
    report.uniform_bound = std::log(static_cast<double>(model.cfg.vocab_size));
    double best = report.uniform_bound * 10;
    int stale = 0;
    for (int step = 1; step <= schedule.max_steps; ++step) {
        zero_grad(trainable);
        for (int i = 0; i < schedule.batch; ++i) {
            if (cursor == order.size()) {
                shuffle_rng.shuffle(order.begin(), order.end());
                cursor = 0;
            }
            const auto& seq = corpus[order[cursor++]];
            auto fwd = forward(model, seq, /*capture=*/false);
            auto loss = lm_cross_entropy(fwd.logits, seq);
            check_finite_loss(static_cast<double>(loss->value()), "pretrain");
            backward(scale(loss, 1.0f / static_cast<float>(schedule.batch)));
        }
        opt.step();
        report.steps_run = step;
        if (step % schedule.eval_every == 0 || step == schedule.max_steps) {
            const double held = heldout_mean_loss(model, corpus, heldout);
            report.heldout_loss = held;
            if (held < best - schedule.min_delta) {
                best = held;
                stale = 0;
            } else if (++stale >= schedule.patience) {
                break;
            }
        }
    }
    return report;
}

double mean_span_loss(const Model& model, std::span<const int> tokens, int begin, int end) {
    if (begin < 1 || end > static_cast<int>(tokens.size()) || begin >= end)
        throw ContractError("mean_span_loss: bad span");
    NoGradGuard no_grad;
    auto fwd = forward(model, tokens, /*capture=*/false);
    const int v = model.cfg.vocab_size;
    double total = 0.0;
    for (int p = begin; p < end; ++p) {
        const float* row = fwd.logits->data.data() + static_cast<size_t>(p - 1) * v;
        double mx = row[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (int j = 0; j < v; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        total += std::log(denom) + mx - static_cast<double>(row[tokens[p]]);
    }
    return total / (end - begin);
}

RepeatSignature repeat_signature(const Model& model, const VocabLayout& vocab, int n_sequences,
                                 int seq_len, Rng rng) {
    if (n_sequences < 1) throw ContractError("repeat_signature: need at least one sequence");
    RepeatSignature sig;
    for (int i = 0; i < n_sequences; ++i) {
        auto r = make_repeated_sequence(vocab, seq_len, rng);
        sig.first_loss += mean_span_loss(model, r.tokens, r.first_begin, r.first_end);
        sig.second_loss += mean_span_loss(model, r.tokens, r.second_begin, r.second_end);
    }
    sig.first_loss /= n_sequences;
    sig.second_loss /= n_sequences;
    return sig;
}

}  // namespace abft
