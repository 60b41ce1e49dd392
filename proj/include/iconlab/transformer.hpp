#pragma once

#include "iconlab/autograd.hpp"
#include "iconlab/rng.hpp"
#include "iconlab/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace iconlab {

struct TransformerConfig {
    int d_token = 7;
    int d_model = 128;
    int n_layers = 6;
    int n_heads = 8;
    int d_ff = 512;
    int max_len = 512;
    int d_out = 1;
    /// Generator only: number of prepended latent tokens and their raw width.
    int latent_tokens = 0;
    int latent_dim = 0;
    double ln_eps = 1e-9;

    /// Reference configuration of the generator/discriminator networks.
    static TransformerConfig reference();
    /// Small configuration used for laptop-scale runs.
    static TransformerConfig desk();

    void validate() const;
    bool has_latent() const { return latent_tokens > 0; }

    friend bool operator==(const TransformerConfig&, const TransformerConfig&) = default;
};

template <class T>
struct BlockWeights {
    T ln1_g, ln1_b;
    T wq, wk, wv, wo, bo;
    T ln2_g, ln2_b;
    T w1, b1, w2, b2;
};

/// All learnable arrays of the decoder. `T` is Tensor for stored parameters
/// and gradients, ag::Var while a forward pass is being recorded.
template <class T>
struct TransformerWeights {
    T embed_w, embed_b;  // d_token -> d_model
    T latent_w;          // latent_dim -> d_model, only with latent tokens
    T pos_embed;         // max_len x d_model, learned
    std::vector<BlockWeights<T>> blocks;
    T lnf_g, lnf_b;
    T head_w, head_b;  // d_model -> d_out

    /// Visits every parameter in a fixed order with a stable name.
    template <class F>
    void for_each(bool with_latent, F&& f) {
        f("embed.w", embed_w);
        f("embed.b", embed_b);
        if (with_latent) {
            f("latent.w", latent_w);
        }
        f("pos_embed", pos_embed);
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            auto& b = blocks[l];
            const std::string p = "block" + std::to_string(l) + ".";
            f(p + "ln1.g", b.ln1_g);
            f(p + "ln1.b", b.ln1_b);
            f(p + "attn.wq", b.wq);
            f(p + "attn.wk", b.wk);
            f(p + "attn.wv", b.wv);
            f(p + "attn.wo", b.wo);
            f(p + "attn.bo", b.bo);
            f(p + "ln2.g", b.ln2_g);
            f(p + "ln2.b", b.ln2_b);
            f(p + "ff.w1", b.w1);
            f(p + "ff.b1", b.b1);
            f(p + "ff.w2", b.w2);
            f(p + "ff.b2", b.b2);
        }
        f("lnf.g", lnf_g);
        f("lnf.b", lnf_b);
        f("head.w", head_w);
        f("head.b", head_b);
    }
};

struct ModelParams {
    TransformerConfig config;
    TransformerWeights<Tensor> weights;

    /// Random initialisation (scaled normal weights, unit layernorm gains).
    static ModelParams init(const TransformerConfig& config, Rng& rng);
    /// Every entry zero, including layernorm gains.
    static ModelParams zeros(const TransformerConfig& config);

    template <class F>
    void for_each(F&& f) {
        weights.for_each(config.has_latent(), std::forward<F>(f));
    }
    template <class F>
    void for_each(F&& f) const {
        const_cast<TransformerWeights<Tensor>&>(weights).for_each(
            config.has_latent(), [&](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
    }

    std::int64_t parameter_count() const;
    bool all_finite() const;

    friend bool operator==(const ModelParams& a, const ModelParams& b);
};

/// Gradients share the parameter layout.
using Grads = ModelParams;

using ParamVars = TransformerWeights<ag::Var>;

/// Wraps stored parameters as graph leaves.
ParamVars make_param_vars(const ModelParams& params, bool requires_grad = true);

/// Reads accumulated gradients back out of the leaves (zero where nothing flowed).
Grads collect_grads(const ParamVars& vars, const TransformerConfig& config);

/// One sequence inside a packed batch: optional latent rows first, then token rows.
struct SequenceLayout {
    std::int64_t latent_rows = 0;
    std::int64_t token_rows = 0;
    std::int64_t length() const { return latent_rows + token_rows; }
};

struct ForwardResult {
    ag::Var output;  // total_rows x d_out
    /// Output row holding the result for token row r of the packed token matrix.
    std::vector<std::int64_t> token_output_row;
};

/// Decoder forward over a packed batch. `tokens` stacks every sequence's token
/// rows; `latents` (may be undefined) stacks their latent rows. Pre-layernorm
/// residual blocks with causal attention, GELU feed-forward and a final
/// layernorm before the linear head.
ForwardResult forward_packed(const ParamVars& p, const TransformerConfig& config, const ag::Var& tokens,
                             const ag::Var& latents, const std::vector<SequenceLayout>& layout);

/// Single sequence, no latent tokens: returns seq_len x d_out.
Tensor forward_transformer(const ModelParams& params, const Tensor& tokens);

/// Gradient of a scalar loss recorded on `vars` with respect to every parameter.
Grads backward(const ag::Var& loss, const ParamVars& vars, const TransformerConfig& config);

}  // namespace iconlab
