#pragma once

#include "iconlab/optim.hpp"
#include "iconlab/prompt.hpp"
#include "iconlab/transformer.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <vector>

namespace iconlab {

/// Per-step prompt resampling. Zero point/query limits keep everything.
struct AugmentConfig {
    int min_demos = 1;
    int max_demos = 5;
    int min_demo_points = 0;
    int max_demo_points = 0;
    int min_queries = 0;
    int max_queries = 0;

    void validate() const;
};

/// Random sub-prompt: a uniform demo count in [min_demos, max_demos] (capped
/// by what the prompt has), each demo thinned to a uniform point count, and
/// a sorted subset of the queries. Scalar conditions are always kept; demos
/// whose condition and QoI share coordinates keep the same subset in both.
Prompt augment_prompt(const Prompt& prompt, const AugmentConfig& config, Rng& rng);

struct IconConfig {
    TransformerConfig model = TransformerConfig::desk();
    OptimConfig optim;
    CodecConfig codec;
    AugmentConfig augment;
    int batch_size = 8;
    std::uint64_t seed = 0;
    int checkpoint_every = 1000;

    static IconConfig desk();
    static IconConfig reference();
    void validate() const;
};

nlohmann::json to_json(const IconConfig& c);
IconConfig icon_config_from_json(const nlohmann::json& j);

/// Several prompts stacked for one forward pass.
struct PackedBatch {
    Tensor tokens;
    std::vector<SequenceLayout> layout;
    std::vector<std::int64_t> query_rows;    // rows of `tokens`, prompt by prompt
    std::vector<std::int64_t> query_counts;  // per prompt
};

PackedBatch pack_prompts(const std::vector<const Prompt*>& prompts, const CodecConfig& codec);

/// Mean over the batch of the mean squared residual over each prompt's queries.
double icon_loss(const ModelParams& params, const std::vector<Prompt>& batch, const CodecConfig& codec = {});

struct LossAndGrads {
    double loss = 0.0;
    Grads grads;
};

LossAndGrads icon_loss_and_grads(const ModelParams& params, const std::vector<const Prompt*>& batch,
                                 const CodecConfig& codec);

struct TrainPaths {
    std::filesystem::path checkpoint;  // final parameters; empty to skip
    std::filesystem::path trace;       // per-step CSV step,lr,loss; empty to skip
    std::ostream* log = nullptr;       // progress lines every log_every steps
    int log_every = 1000;
    nlohmann::json meta = nlohmann::json::object();  // merged into checkpoint metadata
};

struct TrainResult {
    ModelParams params;
    std::vector<double> losses;
};

/// Deterministic given config.seed. A non-finite loss aborts with a
/// NumericalError naming the step; the parameters from before that step are
/// written next to the checkpoint as "<checkpoint>.last_finite".
TrainResult train_icon(const IconConfig& config, const std::vector<Prompt>& data, const TrainPaths& paths = {});
TrainResult train_icon(const IconConfig& config, const std::vector<std::filesystem::path>& shards,
                       const TrainPaths& paths = {});

/// Reads shards that share a family and config hash.
std::vector<Prompt> load_prompts(const std::vector<std::filesystem::path>& shards, ShardHeader* header = nullptr);

std::vector<double> predict(const ModelParams& params, const Prompt& prompt, const CodecConfig& codec = {});
/// Batched and parallel over chunks of prompts; same values as predict().
std::vector<std::vector<double>> predict_all(const ModelParams& params, const std::vector<Prompt>& prompts,
                                             const CodecConfig& codec = {});

/// ||pred - truth|| / ||truth|| in the discrete L2 norm.
double relative_error(const std::vector<double>& pred, const std::vector<double>& truth);

struct ErrorStat {
    double mean = 0.0;
    double std_error = 0.0;
    std::int64_t count = 0;
};

ErrorStat summarize(const std::vector<double>& values);

struct EvalReport {
    std::string family;
    ErrorStat relative_error;               // against the record truth
    std::map<int, ErrorStat> by_demos;      // keyed by demo count
    std::optional<ErrorStat> clean_error;   // against clean truth, noisy families only
    double mse_pred_clean = 0.0;
    double mse_obs_clean = 0.0;

    /// Error against noisy observations minus error against clean truth.
    double denoising_gap() const { return clean_error ? relative_error.mean - clean_error->mean : 0.0; }
    nlohmann::json to_json() const;
};

using Predictor = std::function<std::vector<double>(const Prompt&)>;

EvalReport evaluate(const std::vector<Prompt>& prompts, const std::vector<std::vector<double>>& predictions,
                    const std::string& family = "");
EvalReport evaluate(const std::vector<Prompt>& prompts, const Predictor& predictor, const std::string& family = "");
EvalReport evaluate(const ModelParams& params, const std::vector<Prompt>& prompts, const std::string& family = "",
                    const CodecConfig& codec = {});

}  // namespace iconlab
