#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "textgan/hash.hpp"
#include "textgan/ops.hpp"
#include "textgan/rng.hpp"
#include "textgan/tensor.hpp"

namespace textgan {

// Reserved vocabulary ids, shared by every model and corpus in the lab.
inline constexpr int kBosId = 0;
inline constexpr int kEosId = 1;
inline constexpr int kPadId = 2;
inline constexpr int kUnkId = 3;
inline constexpr int kNumReservedIds = 4;

struct GeneratorConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int vocab_size = 0;
    int max_seq_len = 16;
    double dropout = 0.0;

    void validate() const {
        if (n_layers < 1) throw ContractError("model config: need at least one layer");
        if (n_heads < 1 || d_model % n_heads != 0)
            throw ContractError("model config: d_model must be divisible by n_heads");
        if (vocab_size <= kNumReservedIds) throw ContractError("model config: vocab_size not set");
        if (max_seq_len < 2) throw ContractError("model config: max_seq_len too small");
        if (dropout < 0.0 || dropout >= 1.0) throw ContractError("model config: dropout must be in [0,1)");
    }

    // embeddings + n * (ln1 + qkv + out proj + ln2 + mlp) + final ln;
    // the output projection is tied to the token embedding.
    std::size_t param_count() const {
        const std::size_t d = static_cast<std::size_t>(d_model), f = static_cast<std::size_t>(d_ff);
        const std::size_t per_block = 4 * d * d + 2 * d * f + 9 * d + f;
        return static_cast<std::size_t>(vocab_size) * d + static_cast<std::size_t>(max_seq_len) * d +
               static_cast<std::size_t>(n_layers) * per_block + 2 * d;
    }
};

struct ClassifierConfig {
    int n_layers = 2;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int vocab_size = 0;
    int max_seq_len = 16;
    int n_labels = 2;
    double dropout = 0.0;

    void validate() const {
        GeneratorConfig g{n_layers, n_heads, d_model, d_ff, vocab_size, max_seq_len, dropout};
        g.validate();
        if (n_labels != 2 && n_labels != 3) throw ContractError("classifier config: n_labels must be 2 or 3");
    }

    std::size_t param_count() const {
        GeneratorConfig g{n_layers, n_heads, d_model, d_ff, vocab_size, max_seq_len, dropout};
        return g.param_count() + static_cast<std::size_t>(d_model) * static_cast<std::size_t>(n_labels) +
               static_cast<std::size_t>(n_labels);
    }
};

// Named presets. Desk presets train in minutes on CPU; paper presets mirror
// the 12/6/3-layer configurations and exist for configuration and parameter
// accounting, not for desk-scale training.
inline GeneratorConfig generator_preset(const std::string& name) {
    GeneratorConfig c;
    if (name == "desk-small" || name == "desk") {
        c.n_layers = 2, c.n_heads = 4, c.d_model = 64, c.d_ff = 256;
    } else if (name == "desk-full") {
        c.n_layers = 4, c.n_heads = 4, c.d_model = 64, c.d_ff = 256;
    } else if (name == "desk-mid") {
        c.n_layers = 3, c.n_heads = 4, c.d_model = 48, c.d_ff = 192;
    } else if (name == "desk-3layer") {
        c.n_layers = 3, c.n_heads = 4, c.d_model = 32, c.d_ff = 128;
    } else if (name == "paper-12layer") {
        c.n_layers = 12, c.n_heads = 12, c.d_model = 768, c.d_ff = 3072, c.max_seq_len = 1024;
    } else if (name == "paper-6layer") {
        c.n_layers = 6, c.n_heads = 6, c.d_model = 512, c.d_ff = 2048, c.max_seq_len = 1024;
    } else if (name == "paper-3layer") {
        c.n_layers = 3, c.n_heads = 4, c.d_model = 256, c.d_ff = 1024, c.max_seq_len = 1024;
    } else {
        throw ContractError("unknown generator preset: " + name);
    }
    return c;
}

inline ClassifierConfig classifier_preset(const std::string& name) {
    ClassifierConfig c;
    if (name == "desk-small" || name == "desk") {
        c.n_layers = 2, c.n_heads = 4, c.d_model = 64, c.d_ff = 256;
    } else if (name == "desk-tiny") {
        c.n_layers = 1, c.n_heads = 4, c.d_model = 32, c.d_ff = 128;
    } else if (name == "paper-base") {
        c.n_layers = 12, c.n_heads = 12, c.d_model = 768, c.d_ff = 3072, c.max_seq_len = 512;
    } else {
        throw ContractError("unknown classifier preset: " + name);
    }
    return c;
}

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T> tensor;
};

namespace detail {

template <typename T>
struct TransformerBlock {
    Tensor<T> ln1_gain, ln1_bias;
    Tensor<T> w_qkv, b_qkv;
    Tensor<T> w_out, b_out;
    Tensor<T> ln2_gain, ln2_bias;
    Tensor<T> w_ff1, b_ff1;
    Tensor<T> w_ff2, b_ff2;
};

template <typename T>
Tensor<T> init_normal(Shape shape, double stddev, Rng& rng) {
    Tensor<T> t = Tensor<T>::zeros(std::move(shape), /*requires_grad=*/true);
    for (T& v : t.values()) v = static_cast<T>(rng.normal(0.0, stddev));
    return t;
}

// Shared trunk of the generator and the classifier: embeddings plus a stack
// of pre-norm attention/MLP blocks. `causal` selects masked self-attention.
template <typename T>
class Trunk {
public:
    Trunk() = default;

    void init(int n_layers, int n_heads, int d_model, int d_ff, int vocab_size, int max_seq_len, double dropout,
              bool causal, Rng& rng) {
        n_layers_ = n_layers, n_heads_ = n_heads, d_model_ = d_model, d_ff_ = d_ff;
        vocab_size_ = vocab_size, max_seq_len_ = max_seq_len;
        dropout_ = dropout;
        causal_ = causal;
        const double std = 0.02;
        const double resid_std = std / std::sqrt(2.0 * n_layers);
        tok_emb_ = init_normal<T>({static_cast<std::size_t>(vocab_size), static_cast<std::size_t>(d_model)}, std, rng);
        pos_emb_ = init_normal<T>({static_cast<std::size_t>(max_seq_len), static_cast<std::size_t>(d_model)}, std, rng);
        const auto d = static_cast<std::size_t>(d_model);
        const auto f = static_cast<std::size_t>(d_ff);
        blocks_.clear();
        for (int l = 0; l < n_layers; ++l) {
            TransformerBlock<T> b;
            b.ln1_gain = Tensor<T>::full({d}, T(1));
            b.ln1_gain.set_requires_grad(true);
            b.ln1_bias = Tensor<T>::zeros({d}, true);
            b.w_qkv = init_normal<T>({d, 3 * d}, std, rng);
            b.b_qkv = Tensor<T>::zeros({3 * d}, true);
            b.w_out = init_normal<T>({d, d}, resid_std, rng);
            b.b_out = Tensor<T>::zeros({d}, true);
            b.ln2_gain = Tensor<T>::full({d}, T(1));
            b.ln2_gain.set_requires_grad(true);
            b.ln2_bias = Tensor<T>::zeros({d}, true);
            b.w_ff1 = init_normal<T>({d, f}, std, rng);
            b.b_ff1 = Tensor<T>::zeros({f}, true);
            b.w_ff2 = init_normal<T>({f, d}, resid_std, rng);
            b.b_ff2 = Tensor<T>::zeros({d}, true);
            blocks_.push_back(b);
        }
        final_gain_ = Tensor<T>::full({d}, T(1));
        final_gain_.set_requires_grad(true);
        final_bias_ = Tensor<T>::zeros({d}, true);
    }

    // tokens holds `batch` sequences of length `len`, row-major. Returns the
    // final hidden states, (batch*len x d_model).
    Tensor<T> hidden(std::span<const int> tokens, std::size_t batch, std::size_t len, Rng* dropout_rng) const {
        if (len > static_cast<std::size_t>(max_seq_len_))
            throw ContractError("forward: sequence length " + std::to_string(len) + " exceeds max_seq_len " +
                                std::to_string(max_seq_len_));
        if (tokens.size() != batch * len) throw ContractError("forward: token count does not match batch*len");
        const auto d = static_cast<std::size_t>(d_model_);
        const std::size_t H = static_cast<std::size_t>(n_heads_), dh = d / H;
        const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

        std::vector<int> pos_ids(batch * len);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < len; ++t) pos_ids[b * len + t] = static_cast<int>(t);

        Tensor<T> x = add(embedding(tok_emb_, tokens), embedding(pos_emb_, pos_ids));
        const std::vector<Tensor<T>> masks = attention_masks(tokens, batch, len);

        for (const auto& blk : blocks_) {
            Tensor<T> h = layer_norm(x, blk.ln1_gain, blk.ln1_bias, T(1e-5));
            Tensor<T> qkv = add_row_broadcast(matmul(h, blk.w_qkv), blk.b_qkv);
            std::vector<Tensor<T>> ctx;
            ctx.reserve(batch * H);
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t r0 = b * len, r1 = (b + 1) * len;
                for (std::size_t hd = 0; hd < H; ++hd) {
                    Tensor<T> q = block(qkv, r0, r1, hd * dh, (hd + 1) * dh);
                    Tensor<T> k = block(qkv, r0, r1, d + hd * dh, d + (hd + 1) * dh);
                    Tensor<T> v = block(qkv, r0, r1, 2 * d + hd * dh, 2 * d + (hd + 1) * dh);
                    Tensor<T> scores = scale(matmul_nt(q, k), inv_sqrt_dh);
                    if (!masks.empty()) scores = add(scores, masks[masks.size() == 1 ? 0 : b]);
                    ctx.push_back(matmul(softmax(scores), v));
                }
            }
            Tensor<T> att = add_row_broadcast(matmul(assemble_grid(ctx, batch, H), blk.w_out), blk.b_out);
            x = add(x, apply_dropout(att, dropout_rng));
            Tensor<T> h2 = layer_norm(x, blk.ln2_gain, blk.ln2_bias, T(1e-5));
            Tensor<T> ff = add_row_broadcast(matmul(h2, blk.w_ff1), blk.b_ff1);
            ff = add_row_broadcast(matmul(gelu(ff), blk.w_ff2), blk.b_ff2);
            x = add(x, apply_dropout(ff, dropout_rng));
        }
        return layer_norm(x, final_gain_, final_bias_, T(1e-5));
    }

    void collect_params(std::vector<NamedParam<T>>& out) const {
        out.push_back({"tok_emb", tok_emb_});
        out.push_back({"pos_emb", pos_emb_});
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto& b = blocks_[l];
            const std::string p = "blocks." + std::to_string(l) + ".";
            out.push_back({p + "ln1.gain", b.ln1_gain});
            out.push_back({p + "ln1.bias", b.ln1_bias});
            out.push_back({p + "attn.w_qkv", b.w_qkv});
            out.push_back({p + "attn.b_qkv", b.b_qkv});
            out.push_back({p + "attn.w_out", b.w_out});
            out.push_back({p + "attn.b_out", b.b_out});
            out.push_back({p + "ln2.gain", b.ln2_gain});
            out.push_back({p + "ln2.bias", b.ln2_bias});
            out.push_back({p + "mlp.w_ff1", b.w_ff1});
            out.push_back({p + "mlp.b_ff1", b.b_ff1});
            out.push_back({p + "mlp.w_ff2", b.w_ff2});
            out.push_back({p + "mlp.b_ff2", b.b_ff2});
        }
        out.push_back({"final_ln.gain", final_gain_});
        out.push_back({"final_ln.bias", final_bias_});
    }

    const Tensor<T>& token_embedding() const { return tok_emb_; }

private:
    // Empty: no masking. One entry: shared causal mask. batch entries:
    // per-sequence key-padding masks (bidirectional case).
    std::vector<Tensor<T>> attention_masks(std::span<const int> tokens, std::size_t batch, std::size_t len) const {
        std::vector<Tensor<T>> masks;
        if (causal_) {
            Tensor<T> m = Tensor<T>::zeros({len, len});
            for (std::size_t i = 0; i < len; ++i)
                for (std::size_t j = i + 1; j < len; ++j) m.data()[i * len + j] = T(-1e9);
            masks.push_back(m);
            return masks;
        }
        bool any_pad = false;
        for (const int t : tokens) any_pad = any_pad || (t == kPadId);
        if (!any_pad) return masks;
        for (std::size_t b = 0; b < batch; ++b) {
            Tensor<T> m = Tensor<T>::zeros({len, len});
            for (std::size_t j = 0; j < len; ++j) {
                if (tokens[b * len + j] != kPadId) continue;
                for (std::size_t i = 0; i < len; ++i) m.data()[i * len + j] = T(-1e9);
            }
            masks.push_back(m);
        }
        return masks;
    }

    Tensor<T> apply_dropout(const Tensor<T>& x, Rng* rng) const {
        if (dropout_ <= 0.0 || rng == nullptr || Tape<T>::active() == nullptr) return x;
        Tensor<T> mask = Tensor<T>::zeros(x.shape());
        const T keep_scale = T(1.0 / (1.0 - dropout_));
        for (T& v : mask.values()) v = rng->uniform() < dropout_ ? T(0) : keep_scale;
        return mul(x, mask);
    }

    int n_layers_ = 0, n_heads_ = 0, d_model_ = 0, d_ff_ = 0, vocab_size_ = 0, max_seq_len_ = 0;
    double dropout_ = 0.0;
    bool causal_ = true;
    Tensor<T> tok_emb_, pos_emb_;
    std::vector<TransformerBlock<T>> blocks_;
    Tensor<T> final_gain_, final_bias_;
};

}  // namespace detail

// Decoder-only autoregressive language model with tied input/output
// embeddings. Position t of the output depends only on tokens 0..t.
template <typename T>
class Generator {
public:
    Generator(GeneratorConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        trunk_.init(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len, cfg.dropout,
                    /*causal=*/true, rng);
        trunk_.collect_params(params_);
    }

    const GeneratorConfig& config() const { return cfg_; }

    // (batch*len x vocab) logits.
    Tensor<T> forward(std::span<const int> tokens, std::size_t batch, std::size_t len, Rng* dropout_rng = nullptr) const {
        Tensor<T> x = trunk_.hidden(tokens, batch, len, dropout_rng);
        return matmul_nt(x, trunk_.token_embedding());
    }

    // Logits at the last position of each sequence only: (batch x vocab).
    // The output projection is the dominant cost at generation time, so it
    // is applied to one row per sequence.
    Tensor<T> last_logits(std::span<const int> tokens, std::size_t batch, std::size_t len) const {
        Tensor<T> x = trunk_.hidden(tokens, batch, len, nullptr);
        std::vector<int> last_rows(batch);
        for (std::size_t b = 0; b < batch; ++b) last_rows[b] = static_cast<int>(b * len + len - 1);
        return matmul_nt(embedding(x, last_rows), trunk_.token_embedding());
    }

    std::vector<NamedParam<T>>& parameters() { return params_; }
    const std::vector<NamedParam<T>>& parameters() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    std::uint64_t checksum() const { return params_checksum(params_); }

private:
    GeneratorConfig cfg_;
    detail::Trunk<T> trunk_;
    std::vector<NamedParam<T>> params_;
};

// Bidirectional encoder classifier. The caller prepends a classification
// token (BOS) to every sequence; the label head reads the first position.
template <typename T>
class Classifier {
public:
    Classifier(ClassifierConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        trunk_.init(cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.max_seq_len, cfg.dropout,
                    /*causal=*/false, rng);
        trunk_.collect_params(params_);
        // Zero-initialized head: an untrained classifier is exactly uniform.
        head_w_ = Tensor<T>::zeros({static_cast<std::size_t>(cfg.d_model), static_cast<std::size_t>(cfg.n_labels)}, true);
        head_b_ = Tensor<T>::zeros({static_cast<std::size_t>(cfg.n_labels)}, true);
        params_.push_back({"head.weight", head_w_});
        params_.push_back({"head.bias", head_b_});
    }

    const ClassifierConfig& config() const { return cfg_; }

    // Label logits, (batch x n_labels).
    Tensor<T> forward(std::span<const int> tokens, std::size_t batch, std::size_t len, Rng* dropout_rng = nullptr) const {
        Tensor<T> x = trunk_.hidden(tokens, batch, len, dropout_rng);
        std::vector<int> first_rows(batch);
        for (std::size_t b = 0; b < batch; ++b) first_rows[b] = static_cast<int>(b * len);
        Tensor<T> pooled = embedding(x, first_rows);
        return add_row_broadcast(matmul(pooled, head_w_), head_b_);
    }

    // Probability rows summing to 1.
    Tensor<T> forward_probs(std::span<const int> tokens, std::size_t batch, std::size_t len,
                            Rng* dropout_rng = nullptr) const {
        return softmax(forward(tokens, batch, len, dropout_rng));
    }

    std::vector<NamedParam<T>>& parameters() { return params_; }
    const std::vector<NamedParam<T>>& parameters() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

    std::uint64_t checksum() const { return params_checksum(params_); }

private:
    ClassifierConfig cfg_;
    detail::Trunk<T> trunk_;
    std::vector<NamedParam<T>> params_;
    Tensor<T> head_w_, head_b_;
};

// Per-token log-likelihoods of a single sequence that starts with BOS.
// Entry t is log p(token_{t+1} | tokens_0..t); there are len-1 entries.
template <typename T>
std::vector<T> sequence_log_likelihood(const Generator<T>& model, std::span<const int> tokens) {
    if (tokens.size() < 2) throw ContractError("sequence_log_likelihood: need BOS plus at least one token");
    const std::size_t n = tokens.size() - 1;
    Tensor<T> logits = model.forward(tokens.subspan(0, n), 1, n);
    Tensor<T> lp = log_softmax(logits);
    std::vector<T> out(n);
    for (std::size_t t = 0; t < n; ++t) out[t] = lp.at(t, static_cast<std::size_t>(tokens[t + 1]));
    return out;
}

template <typename T>
std::uint64_t params_checksum(const std::vector<NamedParam<T>>& params) {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : params) {
        h = fnv1a(h, p.name.data(), p.name.size());
        h = fnv1a(h, p.tensor.data(), p.tensor.numel() * sizeof(T));
    }
    return h;
}

}  // namespace textgan
