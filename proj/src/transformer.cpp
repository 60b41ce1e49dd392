#include "iconlab/transformer.hpp"

#include "iconlab/error.hpp"

#include <cmath>

namespace iconlab {

TransformerConfig TransformerConfig::reference() { return TransformerConfig{}; }

TransformerConfig TransformerConfig::desk() {
    TransformerConfig c;
    c.d_model = 64;
    c.n_layers = 4;
    c.n_heads = 4;
    c.d_ff = 256;
    return c;
}

void TransformerConfig::validate() const {
    if (d_token <= 0 || d_model <= 0 || n_layers < 0 || n_heads <= 0 || d_ff <= 0 || max_len <= 0 || d_out <= 0) {
        throw ConfigError("transformer dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by " + std::to_string(n_heads) +
                          " heads");
    }
    if ((latent_tokens > 0) != (latent_dim > 0)) {
        throw ConfigError("latent_tokens and latent_dim must both be set or both be zero");
    }
    if (latent_tokens >= max_len) {
        throw ConfigError("latent tokens leave no room in max_len");
    }
    if (!(ln_eps >= 0.0)) {
        throw ConfigError("ln_eps must be non-negative");
    }
}

namespace {

Tensor normal_matrix(std::int64_t rows, std::int64_t cols, double stddev, Rng& rng) {
    Tensor t = Tensor::matrix(rows, cols);
    for (double& v : t.storage()) {
        v = rng.normal(0.0, stddev);
    }
    return t;
}

Tensor vec(std::int64_t n, double fill = 0.0) { return Tensor(Shape{n}, fill); }

template <class Make>
TransformerWeights<Tensor> build(const TransformerConfig& c, Make&& make) {
    const std::int64_t d = c.d_model;
    TransformerWeights<Tensor> w;
    w.embed_w = make("embed.w", c.d_token, d);
    w.embed_b = vec(d);
    if (c.has_latent()) {
        w.latent_w = make("latent.w", c.latent_dim, d);
    }
    w.pos_embed = make("pos_embed", c.max_len, d);
    w.blocks.resize(static_cast<std::size_t>(c.n_layers));
    for (auto& b : w.blocks) {
        b.ln1_g = vec(d, 1.0);
        b.ln1_b = vec(d);
        b.wq = make("attn.wq", d, d);
        b.wk = make("attn.wk", d, d);
        b.wv = make("attn.wv", d, d);
        b.wo = make("attn.wo", d, d);
        b.bo = vec(d);
        b.ln2_g = vec(d, 1.0);
        b.ln2_b = vec(d);
        b.w1 = make("ff.w1", d, c.d_ff);
        b.b1 = vec(c.d_ff);
        b.w2 = make("ff.w2", c.d_ff, d);
        b.b2 = vec(d);
    }
    w.lnf_g = vec(d, 1.0);
    w.lnf_b = vec(d);
    w.head_w = make("head.w", d, c.d_out);
    w.head_b = vec(c.d_out);
    return w;
}

}  // namespace

ModelParams ModelParams::init(const TransformerConfig& config, Rng& rng) {
    config.validate();
    const double residual_scale = 1.0 / std::sqrt(2.0 * std::max(config.n_layers, 1));
    ModelParams p;
    p.config = config;
    p.weights = build(config, [&](const std::string& name, std::int64_t rows, std::int64_t cols) {
        double stddev = 1.0 / std::sqrt(static_cast<double>(rows));
        if (name == "pos_embed") {
            stddev = 0.02;
        } else if (name == "attn.wo" || name == "ff.w2") {
            stddev *= residual_scale;
        }
        return normal_matrix(rows, cols, stddev, rng);
    });
    return p;
}

ModelParams ModelParams::zeros(const TransformerConfig& config) {
    config.validate();
    ModelParams p;
    p.config = config;
    p.weights = build(config, [](const std::string&, std::int64_t rows, std::int64_t cols) {
        return Tensor::matrix(rows, cols);
    });
    p.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
    return p;
}

std::int64_t ModelParams::parameter_count() const {
    std::int64_t n = 0;
    for_each([&](const std::string&, const Tensor& t) { n += static_cast<std::int64_t>(t.size()); });
    return n;
}

bool ModelParams::all_finite() const {
    bool ok = true;
    for_each([&](const std::string&, const Tensor& t) { ok = ok && t.all_finite(); });
    return ok;
}

bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.config == b.config)) {
        return false;
    }
    std::vector<const Tensor*> ta;
    std::vector<const Tensor*> tb;
    a.for_each([&](const std::string&, const Tensor& t) { ta.push_back(&t); });
    b.for_each([&](const std::string&, const Tensor& t) { tb.push_back(&t); });
    if (ta.size() != tb.size()) {
        return false;
    }
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (!(*ta[i] == *tb[i])) {
            return false;
        }
    }
    return true;
}

ParamVars make_param_vars(const ModelParams& params, bool requires_grad) {
    ParamVars v;
    v.blocks.resize(params.weights.blocks.size());
    std::vector<const Tensor*> src;
    params.for_each([&](const std::string&, const Tensor& t) { src.push_back(&t); });
    std::size_t i = 0;
    v.for_each(params.config.has_latent(),
               [&](const std::string&, ag::Var& var) { var = ag::Var::leaf(*src[i++], requires_grad); });
    return v;
}

Grads collect_grads(const ParamVars& vars, const TransformerConfig& config) {
    Grads g;
    g.config = config;
    g.weights.blocks.resize(vars.blocks.size());
    std::vector<Tensor> grads;
    const_cast<ParamVars&>(vars).for_each(config.has_latent(),
                                          [&](const std::string&, ag::Var& v) { grads.push_back(v.grad()); });
    std::size_t i = 0;
    g.for_each([&](const std::string&, Tensor& t) { t = std::move(grads[i++]); });
    return g;
}

ForwardResult forward_packed(const ParamVars& p, const TransformerConfig& c, const ag::Var& tokens,
                             const ag::Var& latents, const std::vector<SequenceLayout>& layout) {
    using namespace ag;
    if (tokens.value().cols() != c.d_token) {
        throw ConfigError("token width " + std::to_string(tokens.value().cols()) + " but model expects " +
                          std::to_string(c.d_token));
    }
    if (!tokens.value().all_finite()) {
        throw InputError("non-finite token features");
    }
    std::int64_t token_total = 0;
    std::int64_t latent_total = 0;
    for (const auto& s : layout) {
        if (s.length() > c.max_len) {
            throw ConfigError("sequence length " + std::to_string(s.length()) + " exceeds max_len " +
                              std::to_string(c.max_len));
        }
        if (s.length() == 0) {
            throw ContractError("empty sequence in batch");
        }
        if (s.latent_rows > 0 && s.latent_rows != c.latent_tokens) {
            throw ConfigError("sequence carries " + std::to_string(s.latent_rows) + " latent rows, model expects " +
                              std::to_string(c.latent_tokens));
        }
        token_total += s.token_rows;
        latent_total += s.latent_rows;
    }
    if (token_total != tokens.value().rows()) {
        throw ContractError("layout covers " + std::to_string(token_total) + " token rows of " +
                            std::to_string(tokens.value().rows()));
    }

    Var h = add_row(matmul(tokens, p.embed_w), p.embed_b);
    ForwardResult result;
    result.token_output_row.resize(static_cast<std::size_t>(token_total));
    std::vector<std::int64_t> positions;
    std::vector<std::int64_t> offsets{0};
    positions.reserve(static_cast<std::size_t>(token_total + latent_total));

    if (latent_total > 0) {
        if (!c.has_latent() || !latents.defined()) {
            throw ConfigError("latent rows supplied to a model without latent projection");
        }
        if (latents.value().rows() != latent_total || latents.value().cols() != c.latent_dim) {
            throw ConfigError("latent matrix " + shape_string(latents.shape()) + " does not match layout");
        }
        if (!latents.value().all_finite()) {
            throw InputError("non-finite latent input");
        }
        // Packed order is [latents of seq 0, tokens of seq 0, latents of seq 1, ...];
        // rows of concat(latent, token) are indexed with token rows shifted by latent_total.
        Var stacked = concat_rows(matmul(latents, p.latent_w), h);
        std::vector<std::int64_t> order;
        order.reserve(static_cast<std::size_t>(token_total + latent_total));
        std::int64_t lat = 0;
        std::int64_t tok = 0;
        for (const auto& s : layout) {
            for (std::int64_t i = 0; i < s.latent_rows; ++i) {
                order.push_back(lat++);
            }
            for (std::int64_t i = 0; i < s.token_rows; ++i) {
                result.token_output_row[static_cast<std::size_t>(tok)] = static_cast<std::int64_t>(order.size());
                order.push_back(latent_total + tok++);
            }
        }
        h = gather_rows(stacked, order);
    } else {
        std::int64_t tok = 0;
        for (const auto& s : layout) {
            for (std::int64_t i = 0; i < s.token_rows; ++i, ++tok) {
                result.token_output_row[static_cast<std::size_t>(tok)] = tok;
            }
        }
    }
    for (const auto& s : layout) {
        for (std::int64_t i = 0; i < s.length(); ++i) {
            positions.push_back(i);
        }
        offsets.push_back(offsets.back() + s.length());
    }
    h = add(h, gather_rows(p.pos_embed, positions));

    for (const auto& b : p.blocks) {
        Var a = layer_norm(h, b.ln1_g, b.ln1_b, c.ln_eps);
        Var att = causal_attention(matmul(a, b.wq), matmul(a, b.wk), matmul(a, b.wv), offsets, c.n_heads);
        h = add(h, add_row(matmul(att, b.wo), b.bo));
        Var f = layer_norm(h, b.ln2_g, b.ln2_b, c.ln_eps);
        f = add_row(matmul(gelu(add_row(matmul(f, b.w1), b.b1)), b.w2), b.b2);
        h = add(h, f);
    }
    h = layer_norm(h, p.lnf_g, p.lnf_b, c.ln_eps);
    result.output = add_row(matmul(h, p.head_w), p.head_b);
    return result;
}

Tensor forward_transformer(const ModelParams& params, const Tensor& tokens) {
    if (tokens.rank() != 2) {
        throw ConfigError("token matrix must be rank 2, got " + shape_string(tokens.shape()));
    }
    const ParamVars vars = make_param_vars(params, false);
    const auto res = forward_packed(vars, params.config, ag::Var::constant(tokens), ag::Var{},
                                    {SequenceLayout{0, tokens.rows()}});
    return res.output.value();
}

Grads backward(const ag::Var& loss, const ParamVars& vars, const TransformerConfig& config) {
    ag::backward(loss);
    return collect_grads(vars, config);
}

}  // namespace iconlab
