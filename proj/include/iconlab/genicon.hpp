#pragma once

#include "iconlab/icon.hpp"
#include "iconlab/optim.hpp"
#include "iconlab/prompt.hpp"
#include "iconlab/transformer.hpp"

#include <json.hpp>

#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

namespace iconlab {

/// `steps` counts generator updates. The generator schedule runs over
/// `steps` and the discriminator schedule over steps * disc_steps; the
/// total_steps fields of the two optimizer configs are overwritten.
struct GanConfig {
    TransformerConfig generator;
    TransformerConfig discriminator;
    OptimConfig optim_g;
    OptimConfig optim_d;
    CodecConfig codec;
    AugmentConfig augment;
    double lambda = 0.1;     // penalty weight
    double lipschitz = 1.0;  // target L
    int disc_steps = 5;      // discriminator updates per generator update
    int batch_size = 64;
    std::int64_t steps = 100000;
    double clamp = 30.0;  // cap on discriminator scores inside exp
    std::uint64_t seed = 0;
    int checkpoint_every = 1000;

    static GanConfig reference();
    static GanConfig desk();
    void validate() const;
};

nlohmann::json to_json(const GanConfig& c);
GanConfig gan_config_from_json(const nlohmann::json& j);

/// f*(p) = e^{p-1}, the convex conjugate of x log x.
double conjugate_kl(double p);

/// Standard normal latent of shape latent_tokens x latent_dim.
Tensor draw_latent(const TransformerConfig& generator, Rng& rng);

/// Generated field on the prompt's query points for one latent draw.
std::vector<double> generator_sample(const ModelParams& generator, const Prompt& prompt, const Tensor& eta,
                                     const CodecConfig& codec = {});
std::vector<double> generator_sample(const ModelParams& generator, const Prompt& prompt, Rng& rng,
                                     const CodecConfig& codec = {});
/// n draws for one prompt; latents come from `rng` in order, evaluation is parallel.
std::vector<std::vector<double>> generator_samples(const ModelParams& generator, const Prompt& prompt, int n,
                                                   Rng& rng, const CodecConfig& codec = {});

/// Mean of the head outputs over the query tokens, with `z` as their values.
double discriminator_score(const ModelParams& discriminator, const Prompt& prompt, std::span<const double> z,
                           const CodecConfig& codec = {});
/// Gradient of discriminator_score with respect to `z`.
std::vector<double> discriminator_gradient(const ModelParams& discriminator, const Prompt& prompt,
                                           std::span<const double> z, const CodecConfig& codec = {});

/// max(0, |g|^2 / L^2 - 1).
double penalty_term(std::span<const double> gradient, double lipschitz);

/// Mean penalty at t z_real + (1 - t) z_fake, one t ~ U[0, 1] per prompt.
double gradient_penalty(const ModelParams& discriminator, const std::vector<const Prompt*>& prompts,
                        const std::vector<std::vector<double>>& z_real, const std::vector<std::vector<double>>& z_fake,
                        double lipschitz, Rng& rng, const CodecConfig& codec = {});

struct DiscriminatorStep {
    double loss = 0.0;       // -objective + lambda * penalty
    double objective = 0.0;  // mean D(real) - mean e^{D(fake) - 1}
    double penalty = 0.0;
    std::int64_t saturated = 0;  // fake scores that hit the clamp
    Grads grads;
};

/// Discriminator loss and parameter gradients. The penalty's gradient uses
/// a central difference of the score along each active input gradient, so
/// no second-order graph is built.
DiscriminatorStep discriminator_loss_and_grads(const ModelParams& discriminator,
                                               const std::vector<const Prompt*>& prompts,
                                               const std::vector<std::vector<double>>& z_real,
                                               const std::vector<std::vector<double>>& z_fake, const GanConfig& config,
                                               Rng& rng);

struct GeneratorStep {
    double loss = 0.0;  // -mean e^{D(G(eta)) - 1}
    std::int64_t saturated = 0;
    Grads grads;
};

GeneratorStep generator_loss_and_grads(const ModelParams& generator, const ModelParams& discriminator,
                                       const std::vector<const Prompt*>& prompts, const std::vector<Tensor>& latents,
                                       const GanConfig& config);

struct GanLosses {
    double loss_d = 0.0;
    double loss_g = 0.0;
    double objective = 0.0;
    double penalty = 0.0;
    std::int64_t saturated = 0;
};

/// Both losses on one batch without updating anything.
GanLosses fgamma_losses(const ModelParams& generator, const ModelParams& discriminator, const std::vector<Prompt>& batch,
                        const GanConfig& config, Rng& rng);

/// Held-out estimate of the variational objective and its Monte Carlo standard error.
struct ObjectiveEstimate {
    double value = 0.0;
    double std_error = 0.0;
};

ObjectiveEstimate fgamma_objective(const ModelParams& discriminator, const std::vector<const Prompt*>& prompts,
                                   const std::vector<std::vector<double>>& z_real,
                                   const std::vector<std::vector<double>>& z_fake, const GanConfig& config);

struct GanPaths {
    std::filesystem::path generator;      // final generator checkpoint; empty to skip
    std::filesystem::path discriminator;  // final discriminator checkpoint; empty to skip
    std::filesystem::path trace;          // one CSV row per update; empty to skip
    std::ostream* log = nullptr;
    int log_every = 100;
    nlohmann::json meta = nlohmann::json::object();  // merged into checkpoint metadata
};

/// One optimizer update. Discriminator rows ('d') carry the objective and
/// penalty; generator rows ('g') leave them empty in the CSV.
struct GanTraceRow {
    std::int64_t step = 0;  // generator step this update belongs to
    char phase = 'd';
    double lr = 0.0;
    double loss = 0.0;
    double objective = 0.0;
    double penalty = 0.0;
    std::int64_t saturated = 0;
};

struct GanResult {
    ModelParams generator;
    ModelParams discriminator;
    std::vector<GanTraceRow> trace;
};

/// Alternating updates: config.disc_steps discriminator steps, then one
/// generator step, repeated config.steps times. Deterministic given
/// config.seed. Non-finite losses abort with a NumericalError.
GanResult train_genicon(const GanConfig& config, const std::vector<Prompt>& data, const GanPaths& paths = {});
GanResult train_genicon(const GanConfig& config, const std::vector<std::filesystem::path>& shards,
                        const GanPaths& paths = {});

struct PosteriorSummary {
    std::vector<double> query;
    std::vector<double> mean;
    std::vector<double> variance;  // unbiased, per point
    std::vector<double> levels;    // quantile levels
    std::vector<std::vector<double>> quantiles;  // quantiles[level][point]
    double average_variance = 0.0;
    double sigma_hat = 0.0;
    std::int64_t samples = 0;

    nlohmann::json to_json() const;
};

PosteriorSummary summarize_samples(const std::vector<double>& query, const std::vector<std::vector<double>>& samples,
                                   const std::vector<double>& levels = {0.05, 0.5, 0.95});

PosteriorSummary posterior_summary(const ModelParams& generator, const Prompt& prompt, int n_samples, Rng& rng,
                                   const std::vector<double>& levels = {0.05, 0.5, 0.95},
                                   const CodecConfig& codec = {});

}  // namespace iconlab
