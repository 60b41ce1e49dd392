#pragma once

#include "iconlab/transformer.hpp"

#include <json.hpp>

#include <cstdint>

namespace iconlab {

struct OptimConfig {
    double peak_lr = 2e-5;
    double warmup_fraction = 0.01;
    std::int64_t total_steps = 100000;
    double beta1 = 0.9;
    double beta2 = 0.9;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 10.0;

    void validate() const;
};

nlohmann::json to_json(const OptimConfig& c);
/// Keys present in `j` override the fields of `base`.
OptimConfig optim_config_from_json(const nlohmann::json& j, OptimConfig base = {});

/// Linear warmup from 0 to peak_lr, then cosine decay to 0 at total_steps.
double lr_at(std::int64_t step, const OptimConfig& config);

struct OptimState {
    OptimConfig config;
    ModelParams m;
    ModelParams v;
    std::int64_t step = 0;  // number of updates applied so far

    static OptimState init(const ModelParams& params, const OptimConfig& config);
};

double global_norm(const Grads& grads);

/// Rescales grads in place so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(Grads& grads, double max_norm);

/// One AdamW update with decoupled weight decay. Update number t (1-based)
/// uses lr_at(t). Throws NumericalError carrying the step on non-finite grads.
void adamw_step(OptimState& state, ModelParams& params, const Grads& grads);

}  // namespace iconlab
