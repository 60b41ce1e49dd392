// Acceptance runner. Prints one line per criterion:
//   criterion N: PASS|FAIL  <measurements>  (<seconds> s)
// Trained models are cached under --cache keyed by a hash of everything that
// determines them, together with the wall time their training took.

#include "iconlab/checkpoint.hpp"
#include "iconlab/error.hpp"
#include "iconlab/genicon.hpp"
#include "iconlab/icon.hpp"
#include "iconlab/optim.hpp"
#include "iconlab/oracle.hpp"
#include "iconlab/rde.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <sys/wait.h>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace iconlab;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Settings {
    fs::path cache;
    bool fresh = false;
    bool verbose = false;
    std::int64_t steps = 0;  // overrides every training length when positive
};

Settings g_settings;

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string hex_hash(const std::string& text) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double slope(double e_coarse, double e_fine) { return std::log2(e_coarse / e_fine); }

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// ---- data -----------------------------------------------------------------------

// `tasks` tasks of J pairs from stream `seed`; every rotation when `rotations`,
// otherwise only the first prompt of each task.
std::vector<Prompt> family_prompts(const FamilyConfig& fc, int tasks, std::uint64_t seed, bool rotations, int J = 6) {
    const TaskGenerator gen(fc);
    std::vector<Prompt> out;
    for (int t = 0; t < tasks; ++t) {
        Rng rng(stream_seed(seed, static_cast<std::uint64_t>(t)));
        auto prompts = make_prompts(gen.generate(J, rng), gen.grid(), rng, {.rotations = rotations});
        if (!rotations) prompts.resize(1);
        for (auto& p : prompts) out.push_back(std::move(p));
    }
    return out;
}

// Keeps the first k demos and thins their points like the training prompts;
// every query is kept.
Prompt eval_view(const Prompt& p, int k, AugmentConfig augment, Rng& rng) {
    Prompt q = p;
    q.demos.resize(std::min<std::size_t>(q.demos.size(), static_cast<std::size_t>(k)));
    augment.min_demos = augment.max_demos = static_cast<int>(q.demos.size());
    augment.min_queries = augment.max_queries = 0;
    return augment_prompt(q, augment, rng);
}

// ---- cached training ----------------------------------------------------------------

struct Trained {
    ModelParams params;
    double train_seconds = 0.0;
    bool cached = false;
};

Trained cached_model(const std::string& tag, const json& key, const std::function<ModelParams()>& train) {
    const fs::path path = g_settings.cache / (tag + "-" + hex_hash(key.dump()) + ".ckpt");
    if (!g_settings.fresh && fs::exists(path)) {
        Checkpoint c = load_checkpoint(path);
        return {std::move(c.params), c.meta.value("train_seconds", 0.0), true};
    }
    const auto t0 = Clock::now();
    ModelParams p = train();
    const double s = seconds_since(t0);
    fs::create_directories(g_settings.cache);
    save_checkpoint(path, p, {{"key", key}, {"train_seconds", s}});
    return {std::move(p), s, false};
}

std::string train_note(const Trained& t) {
    return "train " + fmt("%.0f", t.train_seconds) + " s" + (t.cached ? " (cached)" : "");
}

Trained icon_model(const std::string& tag, IconConfig c, const FamilyConfig& fc, int tasks, std::uint64_t seed) {
    if (g_settings.steps > 0) c.optim.total_steps = g_settings.steps;
    const json key = {{"config", to_json(c)}, {"family", fc.to_json()}, {"tasks", tasks}, {"seed", seed}};
    return cached_model(tag, key, [&] {
        const auto data = family_prompts(fc, tasks, seed, true);
        TrainPaths paths;
        if (g_settings.verbose) {
            paths.log = &std::cerr;
            paths.log_every = 1000;
        }
        return train_icon(c, data, paths).params;
    });
}

Trained gan_model(const std::string& tag, GanConfig c, const FamilyConfig& fc, int tasks, std::uint64_t seed) {
    if (g_settings.steps > 0) c.steps = g_settings.steps;
    const json key = {{"config", to_json(c)}, {"family", fc.to_json()}, {"tasks", tasks}, {"seed", seed}};
    return cached_model(tag, key, [&] {
        const auto data = family_prompts(fc, tasks, seed, true);
        GanPaths paths;
        if (g_settings.verbose) {
            paths.log = &std::cerr;
            paths.log_every = 100;
        }
        return train_genicon(c, data, paths).generator;
    });
}

// ---- 1: solver convergence ----------------------------------------------------------

Outcome criterion_numerics() {
    const auto t0 = Clock::now();
    std::vector<double> rk;
    for (int n : {11, 21, 41, 81}) {
        const Grid g = Grid::uniform(0.0, 1.0, n);
        rk.push_back(std::abs(solve_ode_rk4(1.0, 0.0, std::vector<double>(static_cast<std::size_t>(n), 1.0), 1.0, g).back() -
                              std::numbers::e));
    }
    std::vector<double> bvp;
    for (int n : {11, 21, 41, 81, 161}) {
        const Grid g = Grid::uniform(0.0, 1.0, n);
        std::vector<double> src(g.points.size()), exact(g.points.size());
        for (std::size_t i = 0; i < src.size(); ++i) {
            exact[i] = std::sin(std::numbers::pi * g.points[i]);
            src[i] = std::numbers::pi * std::numbers::pi * exact[i];
        }
        bvp.push_back(max_abs_diff(solve_bvp_tridiag(1.0, {}, src, 0.0, 0.0, g, 1.0), exact));
    }
    bool pass = true;
    std::string d = "rk4 slopes";
    for (std::size_t i = 0; i + 1 < rk.size(); ++i) {
        const double s = slope(rk[i], rk[i + 1]);
        pass = pass && std::abs(s - 4.0) <= 0.3;
        d += fmt(" %.3f", s);
    }
    d += "; bvp slopes";
    for (std::size_t i = 0; i + 1 < bvp.size(); ++i) {
        const double s = slope(bvp[i], bvp[i + 1]);
        pass = pass && std::abs(s - 2.0) <= 0.2;
        d += fmt(" %.3f", s);
    }
    const double t = seconds_since(t0);
    return {pass && t < 10.0, d + "; " + fmt("%.2f s", t) + " (limit 10 s)"};
}

// ---- 2: gradients -------------------------------------------------------------------

Outcome criterion_autodiff() {
    const auto t0 = Clock::now();
    TransformerConfig c;
    c.d_model = 16;
    c.n_layers = 2;
    c.n_heads = 4;
    c.d_ff = 32;
    c.max_len = 8;
    Rng rng(2024);
    ModelParams p = ModelParams::init(c, rng);
    Tensor tokens = Tensor::matrix(4, c.d_token);
    for (double& v : tokens.storage()) v = rng.normal();
    Tensor w = Tensor::matrix(4, 1);
    for (double& v : w.storage()) v = rng.normal();
    const auto loss = [&] {
        const Tensor out = forward_transformer(p, tokens);
        double s = 0.0;
        for (std::size_t i = 0; i < out.size(); ++i) s += w[i] * out[i];
        return s;
    };
    const auto vars = make_param_vars(p);
    const auto res = forward_packed(vars, c, ag::Var::constant(tokens), ag::Var{}, {{0, 4}});
    const Grads g = backward(ag::weighted_sum(res.output, w), vars, c);
    std::vector<const Tensor*> grads;
    g.for_each([&](const std::string&, const Tensor& t) { grads.push_back(&t); });
    double diff = 0.0, ref = 0.0;
    std::size_t k = 0, checked = 0;
    const double h = 1e-5;
    p.for_each([&](const std::string&, Tensor& t) {
        const Tensor& gt = *grads[k++];
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double keep = t[i];
            t[i] = keep + h;
            const double up = loss();
            t[i] = keep - h;
            const double down = loss();
            t[i] = keep;
            const double fd = (up - down) / (2 * h);
            diff += (fd - gt[i]) * (fd - gt[i]);
            ref += fd * fd;
            ++checked;
        }
    });
    const double rel = std::sqrt(diff) / std::max(std::sqrt(ref), 1e-300);
    const double t = seconds_since(t0);
    return {rel < 1e-5 && t < 60.0, fmt("relative error %.3e", rel) + " over " + std::to_string(checked) +
                                        " parameters; " + fmt("%.2f s", t) + " (limit 60 s)"};
}

// ---- 3: identifiability -----------------------------------------------------------

Outcome criterion_identifiability() {
    const auto t0 = Clock::now();
    double worst_param = 0.0;
    FamilyConfig two = FamilyConfig::defaults(FamilyId::ode2);
    {
        const TaskGenerator gen(two);
        Rng rng(303);
        for (int t = 0; t < 20; ++t) {
            const auto task = gen.generate(2, rng);
            const auto prompt = make_prompts(task, gen.grid(), rng).front();
            const Identified id = identify_from_demo(prompt.demos.front());
            worst_param = std::max({worst_param, std::abs(id.gamma1 - task.alpha[0]) / std::abs(task.alpha[0]),
                                    std::abs(id.gamma2 - task.alpha[1]) / std::abs(task.alpha[1])});
        }
    }
    two.obs_counts = {51};
    FamilyConfig three = FamilyConfig::defaults(FamilyId::ode3);
    three.obs_counts = {51};
    const TaskGenerator g2(two), g3(three);
    Rng rng(304);
    double worst_field = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const double e1 = rng.uniform(-1, 1), e2 = rng.uniform(-1, 1), e3 = rng.uniform(-1, 1);
        TaskSample t2{FamilyId::ode2, {e1 * e3, e2}, {}}, t3{FamilyId::ode3, {e1, e2, e3}, {}};
        for (int j = 0; j < 3; ++j) {
            PairSample p;
            p.cond_field = sample_gp(GPSpec{}, g2.grid(), rng);
            p.cond_scalars = {rng.uniform(-1, 1)};
            for (int i = 0; i < 51; ++i) p.qoi_idx.push_back(i);
            p.cond_idx = p.qoi_idx;
            PairSample q = p;
            p.solution = p.qoi = g2.solve(t2.alpha, p.cond_field, p.cond_scalars, 0.0);
            q.solution = q.qoi = g3.solve(t3.alpha, q.cond_field, q.cond_scalars, 0.0);
            t2.pairs.push_back(std::move(p));
            t3.pairs.push_back(std::move(q));
        }
        Rng r1(9), r2(9);
        const auto p2 = make_prompts(t2, g2.grid(), r1).front();
        const auto p3 = make_prompts(t3, g3.grid(), r2).front();
        Rng s1(1), s2(1);
        worst_field = std::max(worst_field, max_abs_diff(mc_posterior_predictive(two, p2, 4, s1).mean(),
                                                         mc_posterior_predictive(three, p3, 4, s2).mean()));
    }
    const double t = seconds_since(t0);
    return {worst_param < 1e-4 && worst_field < 1e-6 && t < 10.0,
            fmt("worst parameter error %.2e", worst_param) + " (limit 1e-4); " +
                fmt("worst field gap %.2e", worst_field) + " (limit 1e-6); " + fmt("%.2f s", t) + " (limit 10 s)"};
}

// ---- 4: ICON on ode2 ------------------------------------------------------------

Outcome criterion_icon_regression() {
    const FamilyConfig fc = FamilyConfig::defaults(FamilyId::ode2);
    const IconConfig c = IconConfig::desk();
    const Trained m = icon_model("icon-ode2", c, fc, 2000, 41);
    const auto t0 = Clock::now();
    const auto test = family_prompts(fc, 200, 42, false);
    std::vector<Prompt> views;
    Rng aug(43);
    for (const auto& p : test) views.push_back(eval_view(p, c.codec.j_max, c.augment, aug));
    const auto preds = predict_all(m.params, views, c.codec);
    std::vector<double> errs;
    for (std::size_t i = 0; i < test.size(); ++i) {
        Rng rng(stream_seed(44, i));
        errs.push_back(relative_error(preds[i], mc_posterior_predictive(fc, test[i], 8, rng).mean()));
    }
    const ErrorStat e = summarize(errs);
    const double total = m.train_seconds + seconds_since(t0);
    return {e.mean < 5e-2 && total < 1800.0,
            fmt("mean relative error vs oracle %.4f", e.mean) + fmt(" +- %.4f", e.std_error) + " (limit 0.05); " +
                train_note(m) + fmt(", total %.0f s (limit 1800 s)", total)};
}

// ---- 5: denoising on reaction-diffusion ----------------------------------------------

Outcome criterion_denoising() {
    const FamilyConfig fc = FamilyConfig::defaults(FamilyId::reaction_diffusion);
    const IconConfig c = IconConfig::desk();
    const Trained m = icon_model("icon-rd", c, fc, 2000, 51);
    const auto test = family_prompts(fc, 200, 52, false);
    Rng aug(53);
    double mse_pred = 0.0, mse_obs = 0.0;
    std::vector<ErrorStat> by_k;
    for (int k = 1; k <= c.codec.j_max; ++k) {
        std::vector<Prompt> views;
        for (const auto& p : test) views.push_back(eval_view(p, k, c.augment, aug));
        const auto preds = predict_all(m.params, views, c.codec);
        std::vector<double> errs;
        for (std::size_t i = 0; i < test.size(); ++i) {
            errs.push_back(relative_error(preds[i], test[i].clean));
            if (k == c.codec.j_max) {
                double sp = 0.0, so = 0.0;
                for (std::size_t q = 0; q < preds[i].size(); ++q) {
                    sp += (preds[i][q] - test[i].clean[q]) * (preds[i][q] - test[i].clean[q]);
                    so += (test[i].truth[q] - test[i].clean[q]) * (test[i].truth[q] - test[i].clean[q]);
                }
                mse_pred += sp / static_cast<double>(preds[i].size()) / static_cast<double>(test.size());
                mse_obs += so / static_cast<double>(preds[i].size()) / static_cast<double>(test.size());
            }
        }
        by_k.push_back(summarize(errs));
    }
    bool monotone = true;
    std::string curve = "error by demos";
    for (std::size_t k = 0; k < by_k.size(); ++k) {
        curve += fmt(" %.4f", by_k[k].mean);
        if (k > 0) {
            const double se = std::max(by_k[k].std_error, by_k[k - 1].std_error);
            monotone = monotone && by_k[k].mean <= by_k[k - 1].mean + se;
        }
    }
    return {mse_pred < mse_obs && monotone, fmt("MSE(pred, clean) %.3e", mse_pred) +
                                                fmt(" vs MSE(obs, clean) %.3e", mse_obs) + "; " + curve +
                                                (monotone ? " (non-increasing within 1 SE)" : " (increases)") + "; " +
                                                train_note(m)};
}

// ---- GenICON helpers -----------------------------------------------------------------

// Generator updates per GenICON run.
constexpr std::int64_t kCalibrationSteps = 3000;
constexpr std::int64_t kMeanSteps = 3000;
constexpr std::int64_t kFreeBoundarySteps = 3000;

GanConfig gan_for(std::int64_t steps) {
    GanConfig c = GanConfig::desk();
    c.steps = steps;
    return c;
}

std::vector<Prompt> gan_views(const std::vector<Prompt>& test, const GanConfig& c, std::uint64_t seed) {
    Rng aug(seed);
    std::vector<Prompt> out;
    for (const auto& p : test) out.push_back(eval_view(p, c.codec.j_max, c.augment, aug));
    return out;
}

// ---- 6: noise calibration -------------------------------------------------------------

double mean_sigma_hat(const ModelParams& g, const std::vector<Prompt>& views, const GanConfig& c, std::uint64_t seed) {
    double s = 0.0;
    for (std::size_t i = 0; i < views.size(); ++i) {
        Rng rng(stream_seed(seed, i));
        s += posterior_summary(g, views[i], 1000, rng, {0.05, 0.5, 0.95}, c.codec).sigma_hat;
    }
    return s / static_cast<double>(views.size());
}

Outcome criterion_calibration() {
    const GanConfig c = gan_for(kCalibrationSteps);
    double sig[2] = {0.0, 0.0}, oracle_sig[2] = {0.0, 0.0}, train_s = 0.0, eval_s = 0.0;
    std::string notes;
    const double sigmas[2] = {0.1, 0.025};
    for (int i = 0; i < 2; ++i) {
        FamilyConfig fc = FamilyConfig::defaults(FamilyId::poisson_noisy);
        fc.noise.sigma = sigmas[i];
        const Trained m = gan_model("gan-poisson-" + std::to_string(i), c, fc, 1000, 61);
        const auto t0 = Clock::now();
        const auto test = family_prompts(fc, 20, 62, false);
        sig[i] = mean_sigma_hat(m.params, gan_views(test, c, 63), c, 64);
        for (const auto& p : test) oracle_sig[i] += offset_predictive(fc, p).stddev / static_cast<double>(test.size());
        eval_s += seconds_since(t0);
        train_s += m.train_seconds;
        notes += fmt("; sigma %.3f: ", sigmas[i]) + fmt("sigma_hat %.4f", sig[i]) + fmt(" (oracle %.4f), ", oracle_sig[i]) +
                 train_note(m);
    }
    const double total = train_s + eval_s;
    const bool pass = sig[0] > sig[1] && sig[0] >= 0.07 && sig[0] <= 0.17 && total < 7200.0;
    return {pass, fmt("sigma_hat(0.1) %.4f", sig[0]) + fmt(" (target [0.07, 0.17] and above sigma_hat(0.025) = %.4f)", sig[1]) + notes +
                      fmt("; total %.0f s (limit 7200 s)", total)};
}

// ---- 7: sample mean against the oracle mean -------------------------------------------

Outcome criterion_mean_consistency() {
    const FamilyConfig fc = FamilyConfig::defaults(FamilyId::ode2);
    const GanConfig c = gan_for(kMeanSteps);
    const Trained m = gan_model("gan-ode2", c, fc, 1000, 71);
    const auto test = family_prompts(fc, 20, 72, false);
    const auto views = gan_views(test, c, 73);
    std::vector<double> errs;
    for (std::size_t i = 0; i < test.size(); ++i) {
        Rng rng(stream_seed(74, i)), orng(stream_seed(75, i));
        const auto samples = generator_samples(m.params, views[i], 1000, rng, c.codec);
        errs.push_back(compare_to_oracle(samples, mc_posterior_predictive(fc, test[i], 8, orng)).mean_relative_error);
    }
    const ErrorStat e = summarize(errs);

    // Monte Carlo error of the sample mean on one prompt: a 32768-draw reference
    // and 32 independent batches per sample size.
    Rng rng(76);
    const auto mean_of = [](const std::vector<std::vector<double>>& s, std::size_t from, std::size_t n) {
        std::vector<double> m(s.front().size(), 0.0);
        for (std::size_t k = from; k < from + n; ++k)
            for (std::size_t q = 0; q < m.size(); ++q) m[q] += s[k][q] / static_cast<double>(n);
        return m;
    };
    const auto ref_draws = generator_samples(m.params, views[0], 32768, rng, c.codec);
    const auto ref = mean_of(ref_draws, 0, ref_draws.size());
    const std::vector<std::size_t> sizes{16, 64, 256, 1024};
    const std::size_t reps = 32;
    const auto pool = generator_samples(m.params, views[0], static_cast<int>(reps * sizes.back()), rng, c.codec);
    std::vector<double> lx, ly;
    std::string curve;
    for (std::size_t n : sizes) {
        double acc = 0.0;
        for (std::size_t r = 0; r < reps; ++r) {
            const auto mn = mean_of(pool, r * n, n);
            double s = 0.0;
            for (std::size_t q = 0; q < mn.size(); ++q) s += (mn[q] - ref[q]) * (mn[q] - ref[q]);
            acc += std::sqrt(s / static_cast<double>(mn.size()));
        }
        lx.push_back(std::log(static_cast<double>(n)));
        ly.push_back(std::log(acc / static_cast<double>(reps)));
        curve += fmt(" %.3e", acc / static_cast<double>(reps));
    }
    const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / static_cast<double>(lx.size());
    const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / static_cast<double>(ly.size());
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    const double mc_slope = sxy / sxx;
    const bool finite = std::isfinite(mc_slope);
    return {e.mean < 0.1 && finite && std::abs(mc_slope + 0.5) <= 0.1,
            fmt("sample-mean error vs oracle %.4f", e.mean) + fmt(" +- %.4f", e.std_error) +
                " (limit 0.1); MC error at n=16..1024" + curve + fmt(", slope %.3f", mc_slope) + " (target -0.5 +- 0.1); " +
                train_note(m)};
}

// ---- 8: free boundary -------------------------------------------------------------------

Outcome criterion_free_boundary() {
    const FamilyConfig fc = FamilyConfig::defaults(FamilyId::poisson_free_boundary);
    const GanConfig c = gan_for(kFreeBoundarySteps);
    const Trained m = gan_model("gan-free-boundary", c, fc, 1000, 81);
    const auto test = family_prompts(fc, 20, 82, false);
    const auto views = gan_views(test, c, 83);
    double std0 = 0.0, std1 = 0.0, coverage = 0.0;
    for (std::size_t i = 0; i < test.size(); ++i) {
        Rng rng(stream_seed(84, i)), orng(stream_seed(85, i));
        const auto s = posterior_summary(m.params, views[i], 1000, rng, {0.025, 0.975}, c.codec);
        std0 += std::sqrt(s.variance.front()) / static_cast<double>(test.size());
        std1 += std::sqrt(s.variance.back()) / static_cast<double>(test.size());
        const auto o = mc_posterior_predictive(fc, test[i], 4000, orng);
        double lo = 1e300, hi = -1e300;
        for (const auto& z : o.samples) {
            lo = std::min(lo, z.back());
            hi = std::max(hi, z.back());
        }
        const double a = std::max(lo, s.quantiles[0].back()), b = std::min(hi, s.quantiles[1].back());
        coverage += std::max(0.0, b - a) / (hi - lo) / static_cast<double>(test.size());
    }
    return {std0 < 0.3 * std1 && coverage >= 0.6,
            fmt("std at x=0 %.4f", std0) + fmt(" vs 0.3 x std at x=1 %.4f", 0.3 * std1) +
                fmt("; coverage of the oracle interval at x=1 %.3f", coverage) + " (limit 0.6); " + train_note(m)};
}

// ---- 9: objective pieces -----------------------------------------------------------

// sup_{x > 0} p x - x log x by golden-section search.
double legendre_xlogx(double p) {
    const auto f = [p](double x) { return p * x - x * std::log(x); };
    double a = 1e-12, b = 60.0;
    const double r = (std::sqrt(5.0) - 1.0) / 2.0;
    double c = b - r * (b - a), d = a + r * (b - a);
    for (int i = 0; i < 200; ++i) {
        if (f(c) > f(d)) {
            b = d;
        } else {
            a = c;
        }
        c = b - r * (b - a);
        d = a + r * (b - a);
    }
    return f(0.5 * (a + b));
}

Outcome criterion_objective() {
    std::string d;
    // conjugate
    double worst = 0.0;
    for (int i = 0; i <= 500; ++i) {
        const double p = -2.0 + 5.0 * i / 500.0;
        worst = std::max(worst, std::abs(conjugate_kl(p) - legendre_xlogx(p)));
    }
    const bool conj_ok = worst < 1e-6;
    d += fmt("conjugate gap %.2e", worst) + " (limit 1e-6)";

    // penalty vanishes below the Lipschitz target
    GanConfig c = GanConfig::desk();
    c.discriminator.d_model = 16;
    c.discriminator.n_layers = 1;
    c.discriminator.d_ff = 32;
    FamilyConfig fc = FamilyConfig::defaults(FamilyId::poisson_noisy);
    const auto prompts = gan_views(family_prompts(fc, 64, 91, false), c, 90);
    std::vector<const Prompt*> ptrs;
    for (const auto& p : prompts) ptrs.push_back(&p);
    std::vector<std::vector<double>> real, fake;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        Rng r(stream_seed(92, i));
        real.push_back(prompts[i].truth);
        fake.push_back(mc_posterior_predictive(fc, prompts[i], 1, r).samples.front());
    }
    Rng init(93);
    ModelParams disc = ModelParams::init(c.discriminator, init);
    double max_norm = 0.0;
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        for (double t : {0.0, 0.25, 0.5, 0.75, 1.0}) {
            std::vector<double> z(real[i].size());
            for (std::size_t q = 0; q < z.size(); ++q) z[q] = t * real[i][q] + (1 - t) * fake[i][q];
            const auto g = discriminator_gradient(disc, prompts[i], z, c.codec);
            max_norm = std::max(max_norm, std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0)));
        }
    }
    GanConfig below = c;
    below.lipschitz = 1.01 * max_norm;
    bool penalty_ok = true;
    {
        Rng r(94);
        for (std::size_t i = 0; i < prompts.size(); ++i) {
            const auto g = discriminator_gradient(disc, prompts[i], real[i], c.codec);
            penalty_ok = penalty_ok && penalty_term(g, below.lipschitz) == 0.0;
        }
        penalty_ok = penalty_ok && gradient_penalty(disc, ptrs, real, fake, below.lipschitz, r, c.codec) == 0.0;
        Rng r2(95);
        const auto step = discriminator_loss_and_grads(disc, ptrs, real, fake, below, r2);
        penalty_ok = penalty_ok && step.penalty == 0.0 && step.loss == -step.objective;
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> g(25);
            for (double& v : g) v = r.normal();
            const double n = std::sqrt(std::inner_product(g.begin(), g.end(), g.begin(), 0.0));
            const double scale = r.uniform(0.0, 1.0) * 2.5 / n;
            for (double& v : g) v *= scale;
            penalty_ok = penalty_ok && penalty_term(g, 2.5) == 0.0;
        }
    }
    d += std::string("; penalty below L ") + (penalty_ok ? "exactly 0" : "nonzero");

    // identical distributions: fit the discriminator on two draws from the same
    // predictive, then estimate the objective on fresh draws
    GanConfig fit = c;
    fit.optim_d.peak_lr = 1e-2;
    fit.optim_d.total_steps = 400;
    OptimState st = OptimState::init(disc, fit.optim_d);
    Rng fr(96);
    for (int s = 0; s < fit.optim_d.total_steps; ++s) {
        std::vector<const Prompt*> b;
        std::vector<std::vector<double>> zr, zf;
        for (int k = 0; k < 16; ++k) {
            const std::size_t i = static_cast<std::size_t>(fr.uniform_int(0, static_cast<int>(prompts.size()) - 1));
            b.push_back(&prompts[i]);
            zr.push_back(mc_posterior_predictive(fc, prompts[i], 1, fr).samples.front());
            zf.push_back(mc_posterior_predictive(fc, prompts[i], 1, fr).samples.front());
        }
        auto step = discriminator_loss_and_grads(disc, b, zr, zf, fit, fr);
        clip_global_norm(step.grads, fit.optim_d.clip_norm);
        adamw_step(st, disc, step.grads);
    }
    const auto held = gan_views(family_prompts(fc, 400, 97, false), c, 99);
    std::vector<const Prompt*> hp;
    std::vector<std::vector<double>> hr, hf;
    Rng hr_rng(98);
    for (const auto& p : held) {
        hp.push_back(&p);
        hr.push_back(mc_posterior_predictive(fc, p, 1, hr_rng).samples.front());
        hf.push_back(mc_posterior_predictive(fc, p, 1, hr_rng).samples.front());
    }
    const ObjectiveEstimate est = fgamma_objective(disc, hp, hr, hf, fit);
    const bool zero_ok = std::abs(est.value) <= 2.0 * est.std_error;
    d += fmt("; objective on identical draws %.2e", est.value) + fmt(" (2 SE = %.2e)", 2.0 * est.std_error);
    return {conj_ok && penalty_ok && zero_ok, d};
}

// ---- 10: reproducibility ----------------------------------------------------------

int run_cli(const fs::path& cli, const std::string& args, const fs::path& dir) {
    const std::string cmd = "cd '" + dir.string() + "' && '" + cli.string() + "' " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome criterion_reproducibility(const fs::path& cli) {
    const fs::path root = fs::temp_directory_path() / "iconlab_acceptance_repro";
    fs::remove_all(root);
    const std::string small_icon =
        R"({"model": {"d_model": 16, "n_layers": 2, "n_heads": 2, "d_ff": 32}, "optim": {"peak_lr": 0.001}})";
    const std::string small_gan =
        R"({"generator": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32, "latent_tokens": 2,
            "latent_dim": 4}, "discriminator": {"d_model": 16, "n_layers": 1, "n_heads": 2, "d_ff": 32}})";
    const std::vector<std::string> commands = {
        "datagen --family ode2 --count 30 --seed 5 --rotations --out data",
        "datagen --family poisson_noisy --pairs 10 --per-pair 3 --seed 6 --out noisy",
        "train icon --config icon.json --data data --steps 40 --batch 4 --out icon",
        "train genicon --config gan.json --data noisy --steps 4 --batch 4 --ratio 2 --out gan",
        "eval --checkpoint icon/model.ckpt --data data --limit 10 --oracle --out icon_eval",
        "eval --checkpoint gan/generator.ckpt --data noisy --limit 4 --samples 50 --demos all --out gan_eval",
    };
    std::map<std::string, std::string> first;
    for (const char* run : {"a", "b"}) {
        const fs::path dir = root / run;
        fs::create_directories(dir);
        std::ofstream(dir / "icon.json") << small_icon;
        std::ofstream(dir / "gan.json") << small_gan;
        for (const auto& cmd : commands) {
            if (run_cli(cli, cmd, dir) != 0) return {false, "command failed: iconlab " + cmd};
        }
    }
    std::size_t compared = 0;
    std::vector<std::string> differing;
    for (const auto& entry : fs::recursive_directory_iterator(root / "a")) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), root / "a");
        const auto ext = rel.extension().string();
        if (ext != ".jsonl" && ext != ".csv" && ext != ".ckpt" && ext != ".json") continue;
        ++compared;
        if (slurp(entry.path()) != slurp(root / "b" / rel)) differing.push_back(rel.string());
    }
    const bool kinds_seen = compared >= 10;
    std::string d = std::to_string(compared) + " shard/trace/checkpoint/config files compared";
    if (!differing.empty()) {
        d += "; differing:";
        for (const auto& f : differing) d += " " + f;
    }
    if (differing.empty()) fs::remove_all(root);
    return {kinds_seen && differing.empty(), d};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance criteria"};
    std::vector<int> only;
    std::string cache = "acceptance_cache";
    std::string cli = ICONLAB_BIN;
    app.add_option("--only", only, "Criteria to run (default: all)")->check(CLI::Range(1, 10));
    app.add_option("--cache", cache, "Directory for trained models");
    app.add_option("--cli", cli, "Path of the iconlab binary");
    app.add_flag("--fresh", g_settings.fresh, "Retrain instead of using cached models");
    app.add_flag("--verbose", g_settings.verbose, "Log training progress to stderr");
    app.add_option("--steps", g_settings.steps, "Override training lengths (smoke runs; targets will not be met)");
    CLI11_PARSE(app, argc, argv);
    g_settings.cache = cache;

    const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
        {1, criterion_numerics},
        {2, criterion_autodiff},
        {3, criterion_identifiability},
        {4, criterion_icon_regression},
        {5, criterion_denoising},
        {6, criterion_calibration},
        {7, criterion_mean_consistency},
        {8, criterion_free_boundary},
        {9, criterion_objective},
        {10, [&] { return criterion_reproducibility(cli); }},
    };
    const std::set<int> wanted(only.begin(), only.end());
    int failures = 0;
    for (const auto& [id, fn] : criteria) {
        if (!wanted.empty() && !wanted.count(id)) continue;
        const auto t0 = Clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        if (!o.pass) ++failures;
        std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << "  ("
                  << fmt("%.1f", seconds_since(t0)) << " s)" << std::endl;
    }
    return failures == 0 ? 0 : 1;
}
