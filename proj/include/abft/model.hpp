#pragma once

// Decoder-only transformer with pre-norm blocks, learned positional
// embeddings, weight tying, and per-head capture of the last attention row.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "abft/data.hpp"
#include "abft/tensor.hpp"

namespace abft {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 128;
    int vocab_size = 96;
    int max_seq_len = 128;
    uint64_t seed = 0;

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        if (n_layers < 1) throw ConfigError("model: n_layers must be positive");
        if (n_heads < 1) throw ConfigError("model: n_heads must be positive");
        if (d_model < 1) throw ConfigError("model: d_model must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("model: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
        if (max_seq_len < 1) throw ConfigError("model: max_seq_len must be positive");
    }

    bool same_architecture(const ModelConfig& o) const {
        return n_layers == o.n_layers && n_heads == o.n_heads && d_model == o.d_model &&
               vocab_size == o.vocab_size && max_seq_len == o.max_seq_len;
    }
};

struct ParamInfo {
    std::string name;
    int layer;         // -1 for embeddings / final norm
    std::string kind;  // e.g. "attn.wq", "mlp.in", "tok_emb"
};

template <class S>
struct LayerT {
    TensorPtrT<S> ln1_gain, ln1_bias;
    TensorPtrT<S> wq, wk, wv, wo;
    TensorPtrT<S> ln2_gain, ln2_bias;
    TensorPtrT<S> mlp_in, mlp_out;
};

enum class TrainMode { kQkOnly, kAll, kNone };

template <class S>
struct AttentionCaptureT {
    int layer = 0;
    int head = 0;
    TensorPtrT<S> alpha;  // last attention row, length n_t; graph node when recording
};

template <class S>
struct ForwardResultT {
    TensorPtrT<S> logits;  // (n_t x vocab_size)
    std::vector<AttentionCaptureT<S>> captures;  // ordered (layer, head) when requested
};

template <class S>
struct ModelT {
    ModelConfig cfg;
    TensorPtrT<S> tok_emb, pos_emb;
    std::vector<LayerT<S>> layers;
    TensorPtrT<S> lnf_gain, lnf_bias;

    // canonical parameter order; also the checkpoint serialization order
    std::vector<TensorPtrT<S>> parameters() const {
        std::vector<TensorPtrT<S>> out{tok_emb, pos_emb};
        for (const auto& l : layers) {
            out.push_back(l.ln1_gain);
            out.push_back(l.ln1_bias);
            out.push_back(l.wq);
            out.push_back(l.wk);
            out.push_back(l.wv);
            out.push_back(l.wo);
            out.push_back(l.ln2_gain);
            out.push_back(l.ln2_bias);
            out.push_back(l.mlp_in);
            out.push_back(l.mlp_out);
        }
        out.push_back(lnf_gain);
        out.push_back(lnf_bias);
        return out;
    }

    std::vector<TensorPtrT<S>> trainable_parameters() const {
        std::vector<TensorPtrT<S>> out;
        for (const auto& p : parameters())
            if (p->trainable) out.push_back(p);
        return out;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& p : parameters()) n += p->size();
        return n;
    }

    ModelT<S> clone() const {
        ModelT<S> copy;
        copy.cfg = cfg;
        auto dup = [](const TensorPtrT<S>& t) {
            auto c = make_tensor<S>(t->shape, std::vector<S>(t->data));
            c->set_trainable(t->trainable);
            return c;
        };
        copy.tok_emb = dup(tok_emb);
        copy.pos_emb = dup(pos_emb);
        for (const auto& l : layers)
            copy.layers.push_back(LayerT<S>{dup(l.ln1_gain), dup(l.ln1_bias), dup(l.wq), dup(l.wk),
                                            dup(l.wv), dup(l.wo), dup(l.ln2_gain), dup(l.ln2_bias),
                                            dup(l.mlp_in), dup(l.mlp_out)});
        copy.lnf_gain = dup(lnf_gain);
        copy.lnf_bias = dup(lnf_bias);
        return copy;
    }
};

inline std::vector<ParamInfo> parameter_infos(const ModelConfig& cfg) {
    std::vector<ParamInfo> out{{"tok_emb", -1, "tok_emb"}, {"pos_emb", -1, "pos_emb"}};
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        for (const char* kind : {"ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv",
                                 "attn.wo", "ln2.gain", "ln2.bias", "mlp.in", "mlp.out"})
            out.push_back(ParamInfo{p + kind, l, kind});
    }
    out.push_back(ParamInfo{"final_ln.gain", -1, "final_ln.gain"});
    out.push_back(ParamInfo{"final_ln.bias", -1, "final_ln.bias"});
    return out;
}

// Scaled normal initialization: std 0.02 everywhere, residual-writing
// projections (attn.wo, mlp.out) scaled by 1/sqrt(2 * n_layers). Norm gains
// start at one, biases at zero. Deterministic under cfg.seed.
template <class S>
ModelT<S> init_model(const ModelConfig& cfg) {
    cfg.validate();
    Rng rng = Rng(cfg.seed).child("init");
    constexpr double kStd = 0.02;
    const double resid_std = kStd / std::sqrt(2.0 * cfg.n_layers);

    ModelT<S> m;
    m.cfg = cfg;
    m.tok_emb = make_param<S>({cfg.vocab_size, cfg.d_model}, rng, kStd);
    m.pos_emb = make_param<S>({cfg.max_seq_len, cfg.d_model}, rng, kStd);
    auto ones = [&](int n) {
        auto t = make_tensor<S>({n}, std::vector<S>(n, S(1)));
        t->set_trainable(true);
        return t;
    };
    auto zeros = [&](int n) {
        auto t = make_tensor<S>({n});
        t->set_trainable(true);
        return t;
    };
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerT<S> layer;
        layer.ln1_gain = ones(cfg.d_model);
        layer.ln1_bias = zeros(cfg.d_model);
        layer.wq = make_param<S>({cfg.d_model, cfg.d_model}, rng, kStd);
        layer.wk = make_param<S>({cfg.d_model, cfg.d_model}, rng, kStd);
        layer.wv = make_param<S>({cfg.d_model, cfg.d_model}, rng, kStd);
        layer.wo = make_param<S>({cfg.d_model, cfg.d_model}, rng, resid_std);
        layer.ln2_gain = ones(cfg.d_model);
        layer.ln2_bias = zeros(cfg.d_model);
        layer.mlp_in = make_param<S>({cfg.d_model, 4 * cfg.d_model}, rng, kStd);
        layer.mlp_out = make_param<S>({4 * cfg.d_model, cfg.d_model}, rng, resid_std);
        m.layers.push_back(std::move(layer));
    }
    m.lnf_gain = ones(cfg.d_model);
    m.lnf_bias = zeros(cfg.d_model);
    return m;
}

template <class S>
void restrict_trainable(ModelT<S>& m, TrainMode mode) {
    for (auto& p : m.parameters()) p->set_trainable(false);
    switch (mode) {
        case TrainMode::kNone:
            break;
        case TrainMode::kAll:
            for (auto& p : m.parameters()) p->set_trainable(true);
            break;
        case TrainMode::kQkOnly:
            for (auto& l : m.layers) {
                l.wq->set_trainable(true);
                l.wk->set_trainable(true);
            }
            break;
    }
}

// Full forward pass. Logits cover every position (weight-tied output
// projection); captures hold the last attention row of every head, ordered
// (layer, head). Gradient recording follows the ambient grad mode.
template <class S>
ForwardResultT<S> forward(const ModelT<S>& m, std::span<const int> tokens, bool capture) {
    const int n = static_cast<int>(tokens.size());
    if (n == 0) throw ContractError("forward: empty token sequence");
    if (n > m.cfg.max_seq_len)
        throw ShapeError("forward: sequence length " + std::to_string(n) +
                         " exceeds max_seq_len " + std::to_string(m.cfg.max_seq_len));
    const int dh = m.cfg.d_head();
    const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

    ForwardResultT<S> result;
    auto x = add(embedding_rows(m.tok_emb, tokens), slice_rows(m.pos_emb, 0, n));
    for (int l = 0; l < m.cfg.n_layers; ++l) {
        const auto& layer = m.layers[l];
        auto h = layer_norm(x, layer.ln1_gain, layer.ln1_bias);
        auto q = matmul(h, layer.wq);
        auto k = matmul(h, layer.wk);
        auto v = matmul(h, layer.wv);
        std::vector<TensorPtrT<S>> head_outputs;
        head_outputs.reserve(m.cfg.n_heads);
        for (int hd = 0; hd < m.cfg.n_heads; ++hd) {
            auto qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            auto kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            auto vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            auto scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
            auto alpha = row_softmax_masked(scores, /*causal=*/true);
            if (capture)
                result.captures.push_back(AttentionCaptureT<S>{l, hd, take_row(alpha, n - 1)});
            head_outputs.push_back(matmul(alpha, vh));
        }
        x = add(x, matmul(concat_cols(head_outputs), layer.wo));
        auto h2 = layer_norm(x, layer.ln2_gain, layer.ln2_bias);
        x = add(x, matmul(gelu(matmul(h2, layer.mlp_in)), layer.mlp_out));
    }
    x = layer_norm(x, m.lnf_gain, m.lnf_bias);
    result.logits = matmul_nt(x, m.tok_emb);
    return result;
}

// Argmax of the final-position logits restricted to the task's label tokens.
// Ties break toward the lowest token index. Returns the class index.
template <class S>
int predict_label(const ModelT<S>& m, const ICLSample& sample, const std::vector<int>& label_tokens) {
    if (label_tokens.empty()) throw ContractError("predict_label: empty label token set");
    NoGradGuard no_grad;
    auto result = forward(m, std::span<const int>(sample.token_ids), /*capture=*/false);
    const int n = sample.n_t();
    const S* row = result.logits->data.data() +
                   static_cast<size_t>(n - 1) * m.cfg.vocab_size;
    int best_cls = -1;
    int best_token = m.cfg.vocab_size;
    S best_logit = S(0);
    for (size_t c = 0; c < label_tokens.size(); ++c) {
        const int tok = label_tokens[c];
        if (tok < 0 || tok >= m.cfg.vocab_size)
            throw ContractError("predict_label: label token out of vocabulary");
        const S logit = row[tok];
        if (best_cls < 0 || logit > best_logit || (logit == best_logit && tok < best_token)) {
            best_cls = static_cast<int>(c);
            best_token = tok;
            best_logit = logit;
        }
    }
    return best_cls;
}

using Model = ModelT<float>;
using AttentionCapture = AttentionCaptureT<float>;
using ForwardResult = ForwardResultT<float>;

}  // namespace abft
