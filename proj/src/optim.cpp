#include "iconlab/optim.hpp"

#include "iconlab/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace iconlab {

void OptimConfig::validate() const {
    if (total_steps <= 0) {
        throw ConfigError("total_steps must be positive");
    }
    if (!(peak_lr >= 0.0) || !(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) {
        throw ConfigError("peak_lr must be >= 0 and warmup_fraction in [0, 1]");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("betas must lie in [0, 1)");
    }
    if (!(eps > 0.0) || !(weight_decay >= 0.0) || !(clip_norm > 0.0)) {
        throw ConfigError("eps and clip_norm must be positive, weight_decay non-negative");
    }
}

nlohmann::json to_json(const OptimConfig& c) {
    return {{"peak_lr", c.peak_lr},           {"warmup_fraction", c.warmup_fraction},
            {"total_steps", c.total_steps},   {"beta1", c.beta1},
            {"beta2", c.beta2},               {"eps", c.eps},
            {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm}};
}

OptimConfig optim_config_from_json(const nlohmann::json& j, OptimConfig c) {
    try {
        c.peak_lr = j.value("peak_lr", c.peak_lr);
        c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
        c.total_steps = j.value("total_steps", c.total_steps);
        c.beta1 = j.value("beta1", c.beta1);
        c.beta2 = j.value("beta2", c.beta2);
        c.eps = j.value("eps", c.eps);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.clip_norm = j.value("clip_norm", c.clip_norm);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad optimizer config: ") + e.what());
    }
    c.validate();
    return c;
}

double lr_at(std::int64_t step, const OptimConfig& c) {
    const double total = static_cast<double>(c.total_steps);
    const double s = std::clamp(static_cast<double>(step), 0.0, total);
    const double warmup = c.warmup_fraction * total;
    if (s < warmup) {
        return c.peak_lr * s / warmup;
    }
    if (total <= warmup) {
        return c.peak_lr;
    }
    const double progress = (s - warmup) / (total - warmup);
    return c.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

OptimState OptimState::init(const ModelParams& params, const OptimConfig& config) {
    config.validate();
    OptimState s;
    s.config = config;
    s.m = params;
    s.m.for_each([](const std::string&, Tensor& t) { t.fill(0.0); });
    s.v = s.m;
    return s;
}

double global_norm(const Grads& grads) {
    double sq = 0.0;
    grads.for_each([&](const std::string&, const Tensor& t) {
        for (double g : t.data()) {
            sq += g * g;
        }
    });
    return std::sqrt(sq);
}

double clip_global_norm(Grads& grads, double max_norm) {
    const double norm = global_norm(grads);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        grads.for_each([&](const std::string&, Tensor& t) {
            for (double& g : t.data()) {
                g *= s;
            }
        });
    }
    return norm;
}

void adamw_step(OptimState& state, ModelParams& params, const Grads& grads) {
    const std::int64_t t = state.step + 1;
    if (!grads.all_finite()) {
        throw NumericalError("non-finite gradient", t);
    }
    const OptimConfig& c = state.config;
    const double lr = lr_at(t, c);
    const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));

    std::vector<Tensor*> ps, ms, vs;
    std::vector<const Tensor*> gs;
    params.for_each([&](const std::string&, Tensor& x) { ps.push_back(&x); });
    state.m.for_each([&](const std::string&, Tensor& x) { ms.push_back(&x); });
    state.v.for_each([&](const std::string&, Tensor& x) { vs.push_back(&x); });
    grads.for_each([&](const std::string&, const Tensor& x) { gs.push_back(&x); });
    if (gs.size() != ps.size()) {
        throw ContractError("gradient layout does not match parameters");
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (gs[i]->shape() != ps[i]->shape()) {
            throw ContractError("gradient shape " + shape_string(gs[i]->shape()) + " vs parameter " +
                                shape_string(ps[i]->shape()));
        }
        auto p = ps[i]->data();
        auto m = ms[i]->data();
        auto v = vs[i]->data();
        auto g = gs[i]->data();
        for (std::size_t j = 0; j < p.size(); ++j) {
            p[j] -= lr * c.weight_decay * p[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + c.eps);
        }
    }
    state.step = t;
}

}  // namespace iconlab
