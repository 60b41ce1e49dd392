#include "iconlab/genicon.hpp"

#include "iconlab/checkpoint.hpp"
#include "iconlab/error.hpp"
#include "iconlab/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>

namespace iconlab {

// ---- configuration ----------------------------------------------------------

GanConfig GanConfig::reference() {
    GanConfig c;
    c.generator = TransformerConfig::reference();
    c.generator.latent_tokens = 8;
    c.generator.latent_dim = 32;
    c.discriminator = TransformerConfig::reference();
    c.optim_g.beta1 = 0.5;
    c.optim_d.beta1 = 0.0;
    return c;
}

GanConfig GanConfig::desk() {
    GanConfig c = reference();
    for (TransformerConfig* m : {&c.generator, &c.discriminator}) {
        m->d_model = 32;
        m->n_layers = 2;
        m->n_heads = 2;
        m->d_ff = 64;
        m->max_len = 256;
    }
    c.codec.max_len = 256 - c.generator.latent_tokens;
    c.optim_g.peak_lr = 5e-4;
    c.optim_d.peak_lr = 5e-4;
    c.augment.min_demo_points = 4;
    c.augment.max_demo_points = 10;
    c.batch_size = 16;
    c.steps = 2000;
    c.checkpoint_every = 500;
    return c;
}

void GanConfig::validate() const {
    generator.validate();
    discriminator.validate();
    optim_g.validate();
    optim_d.validate();
    augment.validate();
    if (generator.d_token != kTokenWidth || discriminator.d_token != kTokenWidth || generator.d_out != 1 ||
        discriminator.d_out != 1) {
        throw ConfigError("GenICON networks need d_token = 7 and d_out = 1");
    }
    if (!generator.has_latent() || discriminator.has_latent()) {
        throw ConfigError("the generator needs latent tokens and the discriminator must not have them");
    }
    if (codec.max_len + generator.latent_tokens > generator.max_len || codec.max_len > discriminator.max_len) {
        throw ConfigError("codec max_len plus latent tokens exceeds a positional table");
    }
    if (augment.max_demos > codec.j_max) {
        throw ConfigError("demo range must lie within 0..j_max - 1");
    }
    if (disc_steps < 1) {
        throw ConfigError("discriminator to generator ratio must be at least 1");
    }
    if (!(lambda >= 0.0) || !(lipschitz > 0.0)) {
        throw ConfigError("penalty weight must be >= 0 and the Lipschitz target > 0");
    }
    if (batch_size <= 0 || steps <= 0 || checkpoint_every < 0) {
        throw ConfigError("batch_size and steps must be positive, checkpoint_every non-negative");
    }
    if (!(clamp > 0.0) || !std::isfinite(clamp)) {
        throw ConfigError("discriminator clamp must be positive and finite");
    }
}

nlohmann::json to_json(const GanConfig& c) {
    return {{"generator", config_to_json(c.generator)},
            {"discriminator", config_to_json(c.discriminator)},
            {"optim_g", to_json(c.optim_g)},
            {"optim_d", to_json(c.optim_d)},
            {"codec", {{"j_max", c.codec.j_max}, {"max_len", c.codec.max_len}}},
            {"augment",
             {{"min_demos", c.augment.min_demos},
              {"max_demos", c.augment.max_demos},
              {"min_demo_points", c.augment.min_demo_points},
              {"max_demo_points", c.augment.max_demo_points},
              {"min_queries", c.augment.min_queries},
              {"max_queries", c.augment.max_queries}}},
            {"lambda", c.lambda},
            {"lipschitz", c.lipschitz},
            {"disc_steps", c.disc_steps},
            {"batch_size", c.batch_size},
            {"steps", c.steps},
            {"clamp", c.clamp},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every}};
}

GanConfig gan_config_from_json(const nlohmann::json& j) {
    GanConfig c = GanConfig::desk();
    try {
        if (j.contains("generator")) c.generator = merge_config(j.at("generator"), c.generator);
        if (j.contains("discriminator")) c.discriminator = merge_config(j.at("discriminator"), c.discriminator);
        if (j.contains("optim_g")) c.optim_g = optim_config_from_json(j.at("optim_g"), c.optim_g);
        if (j.contains("optim_d")) c.optim_d = optim_config_from_json(j.at("optim_d"), c.optim_d);
        if (j.contains("codec")) {
            c.codec.j_max = j["codec"].value("j_max", c.codec.j_max);
            c.codec.max_len = j["codec"].value("max_len", c.codec.max_len);
        }
        if (j.contains("augment")) {
            const auto& a = j.at("augment");
            c.augment.min_demos = a.value("min_demos", c.augment.min_demos);
            c.augment.max_demos = a.value("max_demos", c.augment.max_demos);
            c.augment.min_demo_points = a.value("min_demo_points", c.augment.min_demo_points);
            c.augment.max_demo_points = a.value("max_demo_points", c.augment.max_demo_points);
            c.augment.min_queries = a.value("min_queries", c.augment.min_queries);
            c.augment.max_queries = a.value("max_queries", c.augment.max_queries);
        }
        c.lambda = j.value("lambda", c.lambda);
        c.lipschitz = j.value("lipschitz", c.lipschitz);
        c.disc_steps = j.value("disc_steps", c.disc_steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.steps = j.value("steps", c.steps);
        c.clamp = j.value("clamp", c.clamp);
        c.seed = j.value("seed", c.seed);
        c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad GenICON config: ") + e.what());
    }
    c.validate();
    return c;
}

double conjugate_kl(double p) { return std::exp(p - 1.0); }

Tensor draw_latent(const TransformerConfig& generator, Rng& rng) {
    if (!generator.has_latent()) {
        throw ConfigError("model has no latent tokens");
    }
    Tensor eta = Tensor::matrix(generator.latent_tokens, generator.latent_dim);
    for (double& x : eta.storage()) x = rng.normal();
    return eta;
}

// ---- networks -----------------------------------------------------------------

namespace {

std::size_t total_size(const std::vector<std::vector<double>>& zs) {
    std::size_t n = 0;
    for (const auto& z : zs) n += z.size();
    return n;
}

void check_fields(const std::vector<const Prompt*>& prompts, const std::vector<std::vector<double>>& zs,
                  const char* what) {
    if (zs.size() != prompts.size()) {
        throw ContractError(std::string("one ") + what + " field per prompt required");
    }
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (zs[i].size() != prompts[i]->query.size()) {
            throw ContractError(std::string(what) + " field has " + std::to_string(zs[i].size()) +
                                " values for " + std::to_string(prompts[i]->query.size()) + " query points");
        }
    }
}

Tensor column_of(const std::vector<std::vector<double>>& zs) {
    std::vector<double> flat;
    flat.reserve(total_size(zs));
    for (const auto& z : zs) flat.insert(flat.end(), z.begin(), z.end());
    return Tensor::column(std::move(flat));
}

// Per-sequence scores (S x 1). `z` stacks every prompt's query values in order.
ag::Var disc_scores(const ParamVars& vars, const TransformerConfig& config, const std::vector<const Prompt*>& prompts,
                    const ag::Var& z, const CodecConfig& codec) {
    const PackedBatch packed = pack_prompts(prompts, codec);
    if (z.value().rows() != static_cast<std::int64_t>(packed.query_rows.size())) {
        throw ContractError("discriminator input does not match the query grids");
    }
    for (auto n : packed.query_counts) {
        if (n == 0) throw ContractError("prompt without query points");
    }
    const ag::Var tokens = ag::set_column(ag::Var::constant(packed.tokens), packed.query_rows, 1, z);
    const auto fr = forward_packed(vars, config, tokens, ag::Var(), packed.layout);
    std::vector<std::int64_t> rows;
    rows.reserve(packed.query_rows.size());
    for (auto r : packed.query_rows) rows.push_back(fr.token_output_row[static_cast<std::size_t>(r)]);
    return ag::group_mean(ag::gather_rows(fr.output, rows), packed.query_counts);
}

// Generated values at every query row, stacked in prompt order.
ag::Var gen_outputs(const ParamVars& vars, const TransformerConfig& config, const std::vector<const Prompt*>& prompts,
                    const std::vector<Tensor>& latents, const CodecConfig& codec) {
    if (latents.size() != prompts.size()) {
        throw ContractError("one latent per prompt required");
    }
    PackedBatch packed = pack_prompts(prompts, codec);
    Tensor eta = Tensor::matrix(static_cast<std::int64_t>(latents.size()) * config.latent_tokens, config.latent_dim);
    std::size_t at = 0;
    for (const auto& l : latents) {
        if (l.rows() != config.latent_tokens || l.cols() != config.latent_dim) {
            throw ContractError("latent of shape " + shape_string(l.shape()) + " does not match the generator");
        }
        std::copy(l.data().begin(), l.data().end(), eta.storage().begin() + static_cast<std::ptrdiff_t>(at));
        at += l.data().size();
    }
    for (auto& s : packed.layout) s.latent_rows = config.latent_tokens;
    const auto fr = forward_packed(vars, config, ag::Var::constant(packed.tokens), ag::Var::constant(std::move(eta)),
                                   packed.layout);
    std::vector<std::int64_t> rows;
    rows.reserve(packed.query_rows.size());
    for (auto r : packed.query_rows) rows.push_back(fr.token_output_row[static_cast<std::size_t>(r)]);
    return ag::gather_rows(fr.output, rows);
}

std::vector<std::vector<double>> split_column(const Tensor& col, const std::vector<const Prompt*>& prompts) {
    std::vector<std::vector<double>> out;
    std::int64_t r = 0;
    for (const Prompt* p : prompts) {
        std::vector<double> v(p->query.size());
        for (auto& x : v) x = col(r++, 0);
        out.push_back(std::move(v));
    }
    return out;
}

std::vector<std::vector<double>> generate_values(const ModelParams& generator, const std::vector<const Prompt*>& prompts,
                                                 const std::vector<Tensor>& latents, const CodecConfig& codec) {
    const ParamVars vars = make_param_vars(generator, false);
    return split_column(gen_outputs(vars, generator.config, prompts, latents, codec).value(), prompts);
}

// Gradients of each prompt's score with respect to its own query values.
std::vector<std::vector<double>> score_gradients(const ModelParams& discriminator,
                                                 const std::vector<const Prompt*>& prompts,
                                                 const std::vector<std::vector<double>>& zs, const CodecConfig& codec) {
    const ParamVars vars = make_param_vars(discriminator, false);
    const ag::Var z = ag::Var::leaf(column_of(zs), true);
    const ag::Var scores = disc_scores(vars, discriminator.config, prompts, z, codec);
    ag::backward(ag::sum(scores));
    return split_column(z.grad(), prompts);
}

double squared_norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return s;
}

}  // namespace

std::vector<double> generator_sample(const ModelParams& generator, const Prompt& prompt, const Tensor& eta,
                                     const CodecConfig& codec) {
    return generate_values(generator, {&prompt}, {eta}, codec).front();
}

std::vector<double> generator_sample(const ModelParams& generator, const Prompt& prompt, Rng& rng,
                                     const CodecConfig& codec) {
    return generator_sample(generator, prompt, draw_latent(generator.config, rng), codec);
}

std::vector<std::vector<double>> generator_samples(const ModelParams& generator, const Prompt& prompt, int n, Rng& rng,
                                                   const CodecConfig& codec) {
    if (n < 0) {
        throw ContractError("negative sample count");
    }
    std::vector<Tensor> latents;
    latents.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) latents.push_back(draw_latent(generator.config, rng));
    constexpr std::size_t chunk = 32;
    const ParamVars vars = make_param_vars(generator, false);
    std::vector<std::vector<double>> out(static_cast<std::size_t>(n));
    const std::size_t chunks = (out.size() + chunk - 1) / chunk;
    parallel_for(chunks, [&](std::size_t c) {
        const std::size_t begin = c * chunk;
        const std::size_t end = std::min(out.size(), begin + chunk);
        std::vector<const Prompt*> ptrs(end - begin, &prompt);
        std::vector<Tensor> lat(latents.begin() + static_cast<std::ptrdiff_t>(begin),
                                latents.begin() + static_cast<std::ptrdiff_t>(end));
        auto vals = split_column(gen_outputs(vars, generator.config, ptrs, lat, codec).value(), ptrs);
        for (std::size_t i = 0; i < vals.size(); ++i) out[begin + i] = std::move(vals[i]);
    });
    return out;
}

double discriminator_score(const ModelParams& discriminator, const Prompt& prompt, std::span<const double> z,
                           const CodecConfig& codec) {
    if (z.size() != prompt.query.size()) {
        throw ContractError("field has " + std::to_string(z.size()) + " values for " +
                            std::to_string(prompt.query.size()) + " query points");
    }
    const ParamVars vars = make_param_vars(discriminator, false);
    const ag::Var col = ag::Var::constant(Tensor::column(std::vector<double>(z.begin(), z.end())));
    return disc_scores(vars, discriminator.config, {&prompt}, col, codec).value()(0, 0);
}

std::vector<double> discriminator_gradient(const ModelParams& discriminator, const Prompt& prompt,
                                           std::span<const double> z, const CodecConfig& codec) {
    if (z.size() != prompt.query.size()) {
        throw ContractError("field has " + std::to_string(z.size()) + " values for " +
                            std::to_string(prompt.query.size()) + " query points");
    }
    return score_gradients(discriminator, {&prompt}, {std::vector<double>(z.begin(), z.end())}, codec).front();
}

// ---- objective ------------------------------------------------------------------

double penalty_term(std::span<const double> gradient, double lipschitz) {
    return std::max(0.0, squared_norm(gradient) / (lipschitz * lipschitz) - 1.0);
}

namespace {

std::vector<std::vector<double>> interpolate_fields(const std::vector<std::vector<double>>& real,
                                                    const std::vector<std::vector<double>>& fake, Rng& rng) {
    std::vector<std::vector<double>> mixed(real.size());
    for (std::size_t i = 0; i < real.size(); ++i) {
        const double t = rng.uniform();
        mixed[i].resize(real[i].size());
        for (std::size_t k = 0; k < real[i].size(); ++k) mixed[i][k] = t * real[i][k] + (1.0 - t) * fake[i][k];
    }
    return mixed;
}

// Step of the central difference that stands in for the Hessian-vector product.
constexpr double kPenaltyStep = 1e-4;

}  // namespace

double gradient_penalty(const ModelParams& discriminator, const std::vector<const Prompt*>& prompts,
                        const std::vector<std::vector<double>>& z_real, const std::vector<std::vector<double>>& z_fake,
                        double lipschitz, Rng& rng, const CodecConfig& codec) {
    check_fields(prompts, z_real, "real");
    check_fields(prompts, z_fake, "generated");
    if (prompts.empty()) return 0.0;
    const auto mixed = interpolate_fields(z_real, z_fake, rng);
    const auto grads = score_gradients(discriminator, prompts, mixed, codec);
    double s = 0.0;
    for (const auto& g : grads) s += penalty_term(g, lipschitz);
    return s / static_cast<double>(prompts.size());
}

DiscriminatorStep discriminator_loss_and_grads(const ModelParams& discriminator,
                                               const std::vector<const Prompt*>& prompts,
                                               const std::vector<std::vector<double>>& z_real,
                                               const std::vector<std::vector<double>>& z_fake, const GanConfig& config,
                                               Rng& rng) {
    if (prompts.empty()) {
        throw ContractError("empty batch");
    }
    check_fields(prompts, z_real, "real");
    check_fields(prompts, z_fake, "generated");
    const std::size_t b = prompts.size();
    const double l2 = config.lipschitz * config.lipschitz;

    DiscriminatorStep out;
    // Penalty: exact value from the input gradients at the interpolates. Its
    // parameter gradient is d|g|^2 = 2|g| d(g . v) with v = g / |g| held
    // fixed, and g . v is the central difference of the score along v.
    const auto mixed = interpolate_fields(z_real, z_fake, rng);
    const auto grads = score_gradients(discriminator, prompts, mixed, config.codec);
    std::vector<const Prompt*> seqs(prompts.begin(), prompts.end());
    seqs.insert(seqs.end(), prompts.begin(), prompts.end());
    std::vector<std::vector<double>> fields(z_real.begin(), z_real.end());
    fields.insert(fields.end(), z_fake.begin(), z_fake.end());
    std::vector<double> weights(2 * b, 0.0);
    double penalty = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const double g2 = squared_norm(grads[i]);
        penalty += std::max(0.0, g2 / l2 - 1.0);
        if (!(g2 > l2) || config.lambda == 0.0) continue;
        const double norm = std::sqrt(g2);
        const double coef = config.lambda / static_cast<double>(b) * norm / (l2 * kPenaltyStep);
        for (const double sign : {1.0, -1.0}) {
            std::vector<double> z = mixed[i];
            for (std::size_t k = 0; k < z.size(); ++k) z[k] += sign * kPenaltyStep * grads[i][k] / norm;
            seqs.push_back(prompts[i]);
            fields.push_back(std::move(z));
            weights.push_back(sign * coef);
        }
    }
    out.penalty = penalty / static_cast<double>(b);

    const ParamVars vars = make_param_vars(discriminator, true);
    const ag::Var scores =
        disc_scores(vars, discriminator.config, seqs, ag::Var::constant(column_of(fields)), config.codec);
    std::vector<std::int64_t> real_rows(b), fake_rows(b);
    std::iota(real_rows.begin(), real_rows.end(), 0);
    std::iota(fake_rows.begin(), fake_rows.end(), static_cast<std::int64_t>(b));
    const ag::Var real = ag::gather_rows(scores, real_rows);
    const ag::Var fake = ag::gather_rows(scores, fake_rows);
    for (std::size_t i = 0; i < b; ++i) {
        if (fake.value()(static_cast<std::int64_t>(i), 0) > config.clamp) ++out.saturated;
    }
    const ag::Var objective =
        ag::sub(ag::mean(real), ag::mean(ag::exp(ag::add_scalar(ag::clamp_max(fake, config.clamp), -1.0))));
    ag::Var loss = ag::scale(objective, -1.0);
    if (weights.size() > 2 * b) {
        loss = ag::add(loss, ag::weighted_sum(scores, Tensor::column(std::move(weights))));
    }
    out.objective = objective.value()[0];
    out.loss = -out.objective + config.lambda * out.penalty;
    out.grads = backward(loss, vars, discriminator.config);
    return out;
}

GeneratorStep generator_loss_and_grads(const ModelParams& generator, const ModelParams& discriminator,
                                       const std::vector<const Prompt*>& prompts, const std::vector<Tensor>& latents,
                                       const GanConfig& config) {
    if (prompts.empty()) {
        throw ContractError("empty batch");
    }
    const ParamVars gvars = make_param_vars(generator, true);
    const ParamVars dvars = make_param_vars(discriminator, false);
    const ag::Var z = gen_outputs(gvars, generator.config, prompts, latents, config.codec);
    const ag::Var scores = disc_scores(dvars, discriminator.config, prompts, z, config.codec);
    GeneratorStep out;
    for (std::int64_t i = 0; i < scores.value().rows(); ++i) {
        if (scores.value()(i, 0) > config.clamp) ++out.saturated;
    }
    // The real-sample term does not depend on the generator; it maximises
    // the generated term.
    const ag::Var loss =
        ag::scale(ag::mean(ag::exp(ag::add_scalar(ag::clamp_max(scores, config.clamp), -1.0))), -1.0);
    out.loss = loss.value()[0];
    out.grads = backward(loss, gvars, generator.config);
    return out;
}

GanLosses fgamma_losses(const ModelParams& generator, const ModelParams& discriminator, const std::vector<Prompt>& batch,
                        const GanConfig& config, Rng& rng) {
    std::vector<const Prompt*> ptrs;
    std::vector<std::vector<double>> real;
    for (const auto& p : batch) {
        if (!p.has_truth()) {
            throw ContractError("every prompt needs a real field");
        }
        ptrs.push_back(&p);
        real.push_back(p.truth);
    }
    std::vector<Tensor> latents;
    for (std::size_t i = 0; i < batch.size(); ++i) latents.push_back(draw_latent(generator.config, rng));
    const auto fake = generate_values(generator, ptrs, latents, config.codec);
    const DiscriminatorStep d = discriminator_loss_and_grads(discriminator, ptrs, real, fake, config, rng);
    const GeneratorStep g = generator_loss_and_grads(generator, discriminator, ptrs, latents, config);
    return {d.loss, g.loss, d.objective, d.penalty, d.saturated};
}

ObjectiveEstimate fgamma_objective(const ModelParams& discriminator, const std::vector<const Prompt*>& prompts,
                                   const std::vector<std::vector<double>>& z_real,
                                   const std::vector<std::vector<double>>& z_fake, const GanConfig& config) {
    check_fields(prompts, z_real, "real");
    check_fields(prompts, z_fake, "generated");
    const std::size_t n = prompts.size();
    if (n < 2) {
        throw ContractError("objective estimate needs at least two prompts");
    }
    std::vector<double> r(n), f(n);
    const ParamVars vars = make_param_vars(discriminator, false);
    parallel_for(n, [&](std::size_t i) {
        const std::vector<const Prompt*> one{prompts[i]};
        r[i] = disc_scores(vars, discriminator.config, one, ag::Var::constant(Tensor::column(z_real[i])),
                           config.codec).value()(0, 0);
        f[i] = conjugate_kl(std::min(config.clamp,
                                     disc_scores(vars, discriminator.config, one,
                                                 ag::Var::constant(Tensor::column(z_fake[i])), config.codec)
                                         .value()(0, 0)));
    });
    const auto stat = [n](const std::vector<double>& v) {
        const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n);
        double ss = 0.0;
        for (double x : v) ss += (x - m) * (x - m);
        return std::pair{m, ss / static_cast<double>(n - 1) / static_cast<double>(n)};
    };
    const auto [mr, vr] = stat(r);
    const auto [mf, vf] = stat(f);
    return {mr - mf, std::sqrt(vr + vf)};
}

// ---- training -------------------------------------------------------------------

namespace {

class GanTraceWriter {
public:
    explicit GanTraceWriter(const std::filesystem::path& path) {
        if (path.empty()) return;
        out_.open(path, std::ios::binary | std::ios::trunc);
        if (!out_) {
            throw IoError("cannot open GenICON trace " + path.string());
        }
        out_ << "step,phase,lr,loss,objective,penalty,saturated\n";
    }
    void row(const GanTraceRow& r) {
        if (!out_.is_open()) return;
        char buf[256];
        if (r.phase == 'd') {
            std::snprintf(buf, sizeof buf, "%lld,d,%.17g,%.17g,%.17g,%.17g,%lld\n", static_cast<long long>(r.step),
                          r.lr, r.loss, r.objective, r.penalty, static_cast<long long>(r.saturated));
        } else {
            std::snprintf(buf, sizeof buf, "%lld,g,%.17g,%.17g,,,%lld\n", static_cast<long long>(r.step), r.lr,
                          r.loss, static_cast<long long>(r.saturated));
        }
        out_ << buf;
    }
    void flush() {
        if (out_.is_open()) out_.flush();
    }

private:
    std::ofstream out_;
};

nlohmann::json gan_meta(const GanConfig& config, const GanPaths& paths, const char* role, std::int64_t step) {
    nlohmann::json m = paths.meta;
    m["kind"] = std::string("genicon_") + role;
    m["train_config"] = to_json(config);
    m["step"] = step;
    return m;
}

void save_pair(const GanPaths& paths, const GanResult& r, const GanConfig& config, std::int64_t step) {
    if (!paths.generator.empty()) save_checkpoint(paths.generator, r.generator, gan_meta(config, paths, "generator", step));
    if (!paths.discriminator.empty()) {
        save_checkpoint(paths.discriminator, r.discriminator, gan_meta(config, paths, "discriminator", step));
    }
}

}  // namespace

GanResult train_genicon(const GanConfig& config, const std::vector<Prompt>& data, const GanPaths& paths) {
    config.validate();
    if (data.empty()) {
        throw InputError("no training prompts");
    }
    for (const auto& p : data) {
        if (!p.has_truth() || p.truth.size() != p.query.size()) {
            throw InputError("every training prompt needs a real field on its query grid");
        }
    }
    Rng init_rng(stream_seed(config.seed, 0));
    Rng data_rng(stream_seed(config.seed, 1));
    Rng noise_rng(stream_seed(config.seed, 2));
    GanResult result;
    result.generator = ModelParams::init(config.generator, init_rng);
    result.discriminator = ModelParams::init(config.discriminator, init_rng);
    OptimConfig og = config.optim_g;
    og.total_steps = config.steps;
    OptimConfig od = config.optim_d;
    od.total_steps = config.steps * config.disc_steps;
    OptimState state_g = OptimState::init(result.generator, og);
    OptimState state_d = OptimState::init(result.discriminator, od);
    GanTraceWriter trace(paths.trace);

    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    std::vector<Prompt> batch(static_cast<std::size_t>(config.batch_size));
    std::vector<const Prompt*> ptrs;
    for (const auto& p : batch) ptrs.push_back(&p);
    const auto next_batch = [&] {
        for (auto& slot : batch) {
            if (cursor == order.size()) {
                data_rng.shuffle(order);
                cursor = 0;
            }
            slot = augment_prompt(data[order[cursor++]], config.augment, data_rng);
        }
    };
    const auto draw_latents = [&] {
        std::vector<Tensor> l;
        l.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) l.push_back(draw_latent(config.generator, noise_rng));
        return l;
    };
    const auto fail = [&](std::int64_t step, const std::string& what) {
        trace.flush();
        throw NumericalError(what, step);
    };

    for (std::int64_t step = 1; step <= config.steps; ++step) {
        GanTraceRow last_d;
        for (int k = 0; k < config.disc_steps; ++k) {
            next_batch();
            std::vector<std::vector<double>> real;
            real.reserve(batch.size());
            for (const auto& p : batch) real.push_back(p.truth);
            const auto fake = generate_values(result.generator, ptrs, draw_latents(), config.codec);
            DiscriminatorStep ds =
                discriminator_loss_and_grads(result.discriminator, ptrs, real, fake, config, noise_rng);
            if (!std::isfinite(ds.loss)) {
                fail(step, "non-finite discriminator loss (objective " + std::to_string(ds.objective) +
                               ", penalty " + std::to_string(ds.penalty) + ")");
            }
            clip_global_norm(ds.grads, od.clip_norm);
            const double lr = lr_at(state_d.step + 1, od);
            try {
                adamw_step(state_d, result.discriminator, ds.grads);
            } catch (const NumericalError&) {
                fail(step, "non-finite discriminator gradient");
            }
            last_d = {step, 'd', lr, ds.loss, ds.objective, ds.penalty, ds.saturated};
            trace.row(last_d);
            result.trace.push_back(last_d);
        }
        next_batch();
        GeneratorStep gs = generator_loss_and_grads(result.generator, result.discriminator, ptrs, draw_latents(), config);
        if (!std::isfinite(gs.loss)) {
            fail(step, "non-finite generator loss (last discriminator loss " + std::to_string(last_d.loss) + ")");
        }
        clip_global_norm(gs.grads, og.clip_norm);
        const double lr = lr_at(step, og);
        try {
            adamw_step(state_g, result.generator, gs.grads);
        } catch (const NumericalError&) {
            fail(step, "non-finite generator gradient");
        }
        const GanTraceRow g_row{step, 'g', lr, gs.loss, 0.0, 0.0, gs.saturated};
        trace.row(g_row);
        result.trace.push_back(g_row);
        if (paths.log && paths.log_every > 0 && step % paths.log_every == 0) {
            *paths.log << "step " << step << " loss_d " << last_d.loss << " loss_g " << gs.loss << " penalty "
                       << last_d.penalty << " saturated " << last_d.saturated + gs.saturated << std::endl;
        }
        if (config.checkpoint_every > 0 && step % config.checkpoint_every == 0 && step < config.steps) {
            save_pair(paths, result, config, step);
            trace.flush();
        }
    }
    save_pair(paths, result, config, config.steps);
    trace.flush();
    return result;
}

GanResult train_genicon(const GanConfig& config, const std::vector<std::filesystem::path>& shards,
                        const GanPaths& paths) {
    return train_genicon(config, load_prompts(shards), paths);
}

// ---- posterior summaries ----------------------------------------------------------

nlohmann::json PosteriorSummary::to_json() const {
    nlohmann::json q = nlohmann::json::object();
    for (std::size_t l = 0; l < levels.size(); ++l) {
        char key[32];
        std::snprintf(key, sizeof key, "%g", levels[l]);
        q[key] = quantiles[l];
    }
    return {{"query", query},     {"mean", mean},         {"variance", variance},   {"quantiles", q},
            {"samples", samples}, {"average_variance", average_variance}, {"sigma_hat", sigma_hat}};
}

PosteriorSummary summarize_samples(const std::vector<double>& query, const std::vector<std::vector<double>>& samples,
                                   const std::vector<double>& levels) {
    if (samples.size() < 2) {
        throw ContractError("posterior summary needs at least two samples");
    }
    for (const auto& s : samples) {
        if (s.size() != query.size()) {
            throw ContractError("sample does not live on the query grid");
        }
    }
    for (double l : levels) {
        if (!(l >= 0.0 && l <= 1.0)) {
            throw ConfigError("quantile levels must lie in [0, 1]");
        }
    }
    PosteriorSummary s;
    s.query = query;
    s.levels = levels;
    std::sort(s.levels.begin(), s.levels.end());
    s.samples = static_cast<std::int64_t>(samples.size());
    const std::size_t m = query.size();
    const auto n = static_cast<double>(samples.size());
    s.mean.assign(m, 0.0);
    s.variance.assign(m, 0.0);
    s.quantiles.assign(s.levels.size(), std::vector<double>(m, 0.0));
    std::vector<double> column(samples.size());
    for (std::size_t k = 0; k < m; ++k) {
        for (std::size_t i = 0; i < samples.size(); ++i) column[i] = samples[i][k];
        const double ref = column.front();
        double s1 = 0.0, s2 = 0.0;
        for (double x : column) {
            s1 += x - ref;
            s2 += (x - ref) * (x - ref);
        }
        s.mean[k] = ref + s1 / n;
        s.variance[k] = std::max(0.0, (s2 - s1 * s1 / n) / (n - 1.0));
        std::sort(column.begin(), column.end());
        for (std::size_t l = 0; l < s.levels.size(); ++l) {
            const double pos = s.levels[l] * (n - 1.0);
            const auto lo = static_cast<std::size_t>(std::floor(pos));
            const std::size_t hi = std::min(lo + 1, column.size() - 1);
            s.quantiles[l][k] = column[lo] + (pos - static_cast<double>(lo)) * (column[hi] - column[lo]);
        }
    }
    s.average_variance = m > 0 ? std::accumulate(s.variance.begin(), s.variance.end(), 0.0) / static_cast<double>(m)
                               : 0.0;
    s.sigma_hat = std::sqrt(s.average_variance);
    return s;
}

PosteriorSummary posterior_summary(const ModelParams& generator, const Prompt& prompt, int n_samples, Rng& rng,
                                   const std::vector<double>& levels, const CodecConfig& codec) {
    if (n_samples < 2) {
        throw ContractError("posterior summary needs at least two samples");
    }
    return summarize_samples(prompt.query, generator_samples(generator, prompt, n_samples, rng, codec), levels);
}

}  // namespace iconlab
