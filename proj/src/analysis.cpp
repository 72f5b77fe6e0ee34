#include "abft/analysis.hpp"

#include <cmath>
#include <fstream>

namespace abft {

double eval_accuracy(const Model& model, const std::vector<ICLSample>& test_set,
                     const std::vector<int>& label_tokens) {
    if (test_set.empty()) throw ContractError("eval_accuracy: empty test set");
    const int n = static_cast<int>(test_set.size());
    int correct = 0;
#pragma omp parallel for schedule(static) reduction(+ : correct)
    for (int i = 0; i < n; ++i)
        correct += predict_label(model, test_set[i], label_tokens) == test_set[i].query_label;
    return static_cast<double>(correct) / n;
}

std::vector<OodEntry> eval_ood(const Model& model_before, const Model& model_after,
                               const std::vector<OodTask>& tasks) {
    std::vector<OodEntry> out;
    out.reserve(tasks.size());
    for (const auto& task : tasks)
        out.push_back(OodEntry{task.name, eval_accuracy(model_before, task.test_set, task.label_tokens),
                               eval_accuracy(model_after, task.test_set, task.label_tokens)});
    return out;
}

namespace {

// per-head pass counts plus per-(layer,head) S / S+ sums over a batch
struct CaptureStats {
    std::vector<long> pass_counts;   // layer-major head index
    std::vector<double> s_sums;      // per layer
    std::vector<double> s_plus_sums; // per layer
    long samples = 0;
};

CaptureStats collect_capture_stats(const Model& model, const std::vector<ICLSample>& batch,
                                   double log_base) {
    const int heads = model.cfg.n_layers * model.cfg.n_heads;
    CaptureStats stats;
    stats.pass_counts.assign(heads, 0);
    stats.s_sums.assign(model.cfg.n_layers, 0.0);
    stats.s_plus_sums.assign(model.cfg.n_layers, 0.0);
    NoGradGuard no_grad;
    for (const auto& sample : batch) {
        if (sample.label_positions.empty())
            throw DataError("attention statistics need samples with label positions");
        auto fwd = forward(model, sample.token_ids, /*capture=*/true);
        const int k = static_cast<int>(sample.label_positions.size());
        const double threshold = induction_threshold(k, sample.n_t(), log_base);
        for (size_t c = 0; c < fwd.captures.size(); ++c) {
            const auto& cap = fwd.captures[c];
            const double s = induction_score(std::span<const float>(cap.alpha->data),
                                             std::span<const int>(sample.label_positions));
            const double s_plus = induction_score(std::span<const float>(cap.alpha->data),
                                                  std::span<const int>(sample.i_plus));
            if (s > threshold) ++stats.pass_counts[c];
            stats.s_sums[cap.layer] += s;
            stats.s_plus_sums[cap.layer] += s_plus;
        }
        ++stats.samples;
    }
    return stats;
}

}  // namespace

double count_induction_heads(const Model& model, const std::vector<ICLSample>& batch,
                             double log_base) {
    if (batch.empty()) throw ContractError("count_induction_heads: empty batch");
    auto stats = collect_capture_stats(model, batch, log_base);
    long total = 0;
    for (long c : stats.pass_counts) total += c;
    return static_cast<double>(total) / static_cast<double>(stats.samples);
}

std::vector<double> head_induction_frequencies(const Model& model,
                                               const std::vector<ICLSample>& batch,
                                               double log_base) {
    if (batch.empty()) throw ContractError("head_induction_frequencies: empty batch");
    auto stats = collect_capture_stats(model, batch, log_base);
    std::vector<double> out(stats.pass_counts.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<double>(stats.pass_counts[i]) / static_cast<double>(stats.samples);
    return out;
}

LayerAttentionProfile layer_profile(const Model& model, const std::vector<ICLSample>& samples) {
    if (samples.empty()) throw ContractError("layer_profile: empty sample set");
    auto stats = collect_capture_stats(model, samples, 0.0);
    LayerAttentionProfile profile;
    const double denom = static_cast<double>(stats.samples) * model.cfg.n_heads;
    for (int l = 0; l < model.cfg.n_layers; ++l) {
        profile.s.push_back(stats.s_sums[l] / denom);
        profile.s_plus.push_back(stats.s_plus_sums[l] / denom);
    }
    return profile;
}

Model interpolate_models(const Model& theta0, const Model& theta_e, const Model& theta_a,
                         double alpha_e, double alpha_a) {
    if (!theta0.cfg.same_architecture(theta_e.cfg) || !theta0.cfg.same_architecture(theta_a.cfg))
        throw ContractError("interpolate_models: architectures differ");
    Model mixed = theta0.clone();
    auto p0 = theta0.parameters();
    auto pe = theta_e.parameters();
    auto pa = theta_a.parameters();
    auto pm = mixed.parameters();
    // barycentric form of the same affine mix; keeps the anchor points
    // (0,0), (1,0), (0,1) bit-exact
    const float c0 = static_cast<float>(1.0 - alpha_e - alpha_a);
    const float ae = static_cast<float>(alpha_e);
    const float aa = static_cast<float>(alpha_a);
    for (size_t i = 0; i < pm.size(); ++i) {
        if (p0[i]->shape != pe[i]->shape || p0[i]->shape != pa[i]->shape)
            throw ContractError("interpolate_models: parameter shape mismatch at index " +
                                std::to_string(i));
        auto& dst = pm[i]->data;
        const auto& base = p0[i]->data;
        const auto& e = pe[i]->data;
        const auto& a = pa[i]->data;
        for (size_t j = 0; j < dst.size(); ++j) dst[j] = c0 * base[j] + ae * e[j] + aa * a[j];
    }
    return mixed;
}

const ConnectivityCell& ConnectivityGrid::at_coefs(double alpha_e, double alpha_a) const {
    for (const auto& cell : cells)
        if (cell.alpha_e == alpha_e && cell.alpha_a == alpha_a) return cell;
    throw ContractError("connectivity grid has no cell at the requested coefficients");
}

ConnectivityGrid connectivity_grid(const Model& theta0, const Model& theta_e,
                                   const Model& theta_a, const GridSpec& spec,
                                   const std::vector<ICLSample>& test_set,
                                   const std::vector<int>& label_tokens) {
    spec.validate();
    ConnectivityGrid grid;
    grid.spec = spec;
    const int n = spec.points();
    grid.cells.resize(static_cast<size_t>(n) * n);
    // cells are independent; a private interpolated model per iteration
#pragma omp parallel for schedule(dynamic)
    for (int idx = 0; idx < n * n; ++idx) {
        const int i = idx / n, j = idx % n;
        const double ae = spec.coef(i), aa = spec.coef(j);
        Model mixed = interpolate_models(theta0, theta_e, theta_a, ae, aa);
        grid.cells[idx] = ConnectivityCell{ae, aa, eval_accuracy(mixed, test_set, label_tokens)};
    }
    return grid;
}

double max_vote_ratio(const std::vector<int>& votes) {
    int largest = 0, total = 0;
    for (int v : votes) {
        if (v < 0) throw ContractError("max_vote_ratio: negative vote count");
        largest = std::max(largest, v);
        total += v;
    }
    if (total < 2) throw ContractError("max_vote_ratio: need at least 2 votes");
    return static_cast<double>(largest) / total;
}

double consistency_metric(const Model& model,
                          const std::vector<std::vector<ICLSample>>& variants_per_query,
                          const std::vector<int>& label_tokens) {
    if (variants_per_query.empty()) throw ContractError("consistency_metric: no queries");
    double total = 0.0;
    for (const auto& variants : variants_per_query) {
        if (variants.size() < 2)
            throw ContractError("consistency_metric: each query needs at least 2 variants");
        std::vector<int> votes(label_tokens.size(), 0);
        for (const auto& sample : variants) ++votes[predict_label(model, sample, label_tokens)];
        total += max_vote_ratio(votes);
    }
    return total / static_cast<double>(variants_per_query.size());
}

std::vector<std::vector<ICLSample>> build_consistency_variants(const Task& task, int n_queries,
                                                               int k, int n_templates,
                                                               int n_resamples, Rng rng) {
    if (n_templates < 1 || n_templates > VocabLayout::kNumMarkers)
        throw ContractError("build_consistency_variants: bad template count");
    if (n_templates * n_resamples < 2)
        throw ContractError("build_consistency_variants: need at least 2 variants per query");
    n_queries = std::min<int>(n_queries, static_cast<int>(task.query_pool.size()));
    if (n_queries < 1) throw ContractError("build_consistency_variants: no queries available");

    std::vector<std::vector<ICLSample>> out;
    out.reserve(n_queries);
    for (int q = 0; q < n_queries; ++q) {
        const Example& query = task.query_pool[q];
        std::vector<ICLSample> variants;
        for (int r = 0; r < n_resamples; ++r) {
            // one demonstration draw shared across template variants
            std::vector<Example> demos;
            for (int i = 0; i < k; ++i) {
                const int cls = rng.uniform_int(task.n_classes);
                const auto& ids = task.demo_by_class[cls];
                demos.push_back(task.demo_pool[ids[rng.uniform_int(static_cast<int>(ids.size()))]]);
            }
            for (int t = 0; t < n_templates; ++t) {
                TemplateSpec tmpl = task.tmpl;
                tmpl.marker_token = VocabLayout::marker(t);
                variants.push_back(render_icl(tmpl, task.label_tokens, demos, query));
            }
        }
        out.push_back(std::move(variants));
    }
    return out;
}

UnseenLabelReport unseen_label_eval(const Model& model, const Task& task, int k, int per_query,
                                    Rng rng) {
    if (task.n_classes < 2) throw ContractError("unseen_label_eval: needs at least 2 classes");
    if (per_query < 1) throw ContractError("unseen_label_eval: per_query must be positive");
    UnseenLabelReport report;
    int correct_unseen = 0, correct_zero = 0;
    for (size_t q = 0; q < task.query_pool.size(); ++q) {
        const Example& query = task.query_pool[q];
        for (int r = 0; r < per_query; ++r) {
            auto sample = build_unseen_label_sample(task, k, query.cls, rng, Split::kTest);
            if (!sample.i_plus.empty())
                throw ContractError("unseen_label_eval: sample with non-empty I+");
            correct_unseen += predict_label(model, sample, task.label_tokens) == sample.query_label;
            ++report.n_samples;
        }
        auto zero_shot = render_icl(task.tmpl, task.label_tokens, {}, query);
        correct_zero += predict_label(model, zero_shot, task.label_tokens) == query.cls;
    }
    report.unseen_accuracy = static_cast<double>(correct_unseen) / report.n_samples;
    report.zero_shot_accuracy =
        static_cast<double>(correct_zero) / static_cast<double>(task.query_pool.size());
    return report;
}

double ShiftMap::max_distance() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.distance);
    return m;
}

ShiftMap shift_map(const Model& before, const Model& after) {
    if (!before.cfg.same_architecture(after.cfg))
        throw ContractError("shift_map: architectures differ");
    auto pb = before.parameters();
    auto pa = after.parameters();
    auto infos = parameter_infos(before.cfg);
    ShiftMap map;
    for (size_t i = 0; i < pb.size(); ++i) {
        if (pb[i]->shape != pa[i]->shape)
            throw ContractError("shift_map: parameter shape mismatch at " + infos[i].name);
        double sum = 0.0;
        for (size_t j = 0; j < pb[i]->data.size(); ++j) {
            const double d = static_cast<double>(pb[i]->data[j]) - static_cast<double>(pa[i]->data[j]);
            sum += d * d;
        }
        map.entries.push_back(ShiftEntry{infos[i].name, infos[i].layer, infos[i].kind,
                                         std::sqrt(sum)});
    }
    return map;
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

namespace {

std::ofstream open_artifact(const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write " + path);
    return out;
}

}  // namespace

void write_profile_csv(const LayerAttentionProfile& profile, const std::string& path) {
    auto out = open_artifact(path);
    out << "layer,S,S_plus\n";
    for (size_t l = 0; l < profile.s.size(); ++l)
        out << l << ',' << format_value(profile.s[l]) << ',' << format_value(profile.s_plus[l])
            << '\n';
}

void write_grid_csv(const ConnectivityGrid& grid, const std::string& path) {
    auto out = open_artifact(path);
    out << "alpha_E,alpha_A,accuracy\n";
    for (const auto& cell : grid.cells)
        out << format_value(cell.alpha_e) << ',' << format_value(cell.alpha_a) << ','
            << format_value(cell.accuracy) << '\n';
}

void write_shift_csv(const ShiftMap& map, const std::string& path) {
    auto out = open_artifact(path);
    out << "name,layer,kind,frobenius_distance\n";
    for (const auto& e : map.entries)
        out << e.name << ',' << e.layer << ',' << e.kind << ',' << format_value(e.distance) << '\n';
}

void write_head_frequency_csv(const Model& model, const std::vector<double>& frequencies,
                              const std::string& path) {
    auto out = open_artifact(path);
    out << "layer,head,induction_frequency\n";
    for (int l = 0; l < model.cfg.n_layers; ++l)
        for (int h = 0; h < model.cfg.n_heads; ++h)
            out << l << ',' << h << ','
                << format_value(frequencies.at(static_cast<size_t>(l) * model.cfg.n_heads + h))
                << '\n';
}

void write_attention_pgm(const Model& model, const ICLSample& sample, const std::string& path) {
    NoGradGuard no_grad;
    auto fwd = forward(model, sample.token_ids, /*capture=*/true);
    const int rows = static_cast<int>(fwd.captures.size());
    const int cols = sample.n_t();
    auto out = open_artifact(path);
    out << "P5\n" << cols << ' ' << rows << "\n255\n";
    for (const auto& cap : fwd.captures)
        for (int j = 0; j < cols; ++j) {
            const double v = std::clamp(static_cast<double>(cap.alpha->data[j]), 0.0, 1.0);
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
        }
}

}  // namespace abft
