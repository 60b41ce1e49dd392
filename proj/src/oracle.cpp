#include "iconlab/oracle.hpp"

#include "iconlab/error.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>

namespace iconlab {

// ---- identification ---------------------------------------------------------

std::vector<double> stencil_derivative(std::span<const double> t, std::span<const double> u, int w) {
    const auto n = static_cast<std::ptrdiff_t>(t.size());
    std::vector<double> du(t.size(), std::numeric_limits<double>::quiet_NaN());
    for (std::ptrdiff_t i = w; i + w < n; ++i) {
        const double x0 = t[static_cast<std::size_t>(i)];
        double d = 0.0;
        for (std::ptrdiff_t j = i - w; j <= i + w; ++j) {
            const double xj = t[static_cast<std::size_t>(j)];
            // derivative of the Lagrange basis polynomial for node j at x0
            double lj = 0.0;
            for (std::ptrdiff_t m = i - w; m <= i + w; ++m) {
                if (m == j) continue;
                const double xm = t[static_cast<std::size_t>(m)];
                double prod = 1.0 / (xj - xm);
                for (std::ptrdiff_t l = i - w; l <= i + w; ++l) {
                    if (l == j || l == m) continue;
                    const double xl = t[static_cast<std::size_t>(l)];
                    prod *= (x0 - xl) / (xj - xl);
                }
                lj += prod;
            }
            d += lj * u[static_cast<std::size_t>(j)];
        }
        du[static_cast<std::size_t>(i)] = d;
    }
    return du;
}

namespace {

Identified solve_design(const Eigen::MatrixXd& a, const Eigen::VectorXd& b) {
    const Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = svd.singularValues();
    const double cond = s(1) > 0.0 ? s(0) / s(1) : std::numeric_limits<double>::infinity();
    if (!(cond <= 1e10)) {
        throw NumericalError("degenerate identification system (condition number " + std::to_string(cond) + ")");
    }
    const Eigen::Vector2d g = svd.solve(b);
    return {g(0), g(1), cond};
}

// One RK4 step with the coefficient linear across the step, and its
// derivatives with respect to (gamma1, gamma2).
struct StepJet {
    double value, d1, d2;
};

StepJet rk4_step_jet(double g1, double g2, double c0, double c1, double u, double h) {
    const double cm = 0.5 * (c0 + c1);
    const auto stage = [&](double ct, double y, double y1, double y2) {
        return StepJet{g1 * ct * y + g2, ct * y + g1 * ct * y1, g1 * ct * y2 + 1.0};
    };
    const StepJet k1 = stage(c0, u, 0.0, 0.0);
    const StepJet k2 = stage(cm, u + 0.5 * h * k1.value, 0.5 * h * k1.d1, 0.5 * h * k1.d2);
    const StepJet k3 = stage(cm, u + 0.5 * h * k2.value, 0.5 * h * k2.d1, 0.5 * h * k2.d2);
    const StepJet k4 = stage(c1, u + h * k3.value, h * k3.d1, h * k3.d2);
    return {u + h / 6.0 * (k1.value + 2.0 * k2.value + 2.0 * k3.value + k4.value),
            h / 6.0 * (k1.d1 + 2.0 * k2.d1 + 2.0 * k3.d1 + k4.d1),
            h / 6.0 * (k1.d2 + 2.0 * k2.d2 + 2.0 * k3.d2 + k4.d2)};
}

// Gauss-Newton on the one-step RK4 map over neighbouring observations at the
// finest spacing. Wider gaps hide an unobserved coefficient value and are
// left out. Falls back to `start` when too few steps remain or the fit
// does not improve.
Identified refine_on_rk4(std::span<const double> t, std::span<const double> c, std::span<const double> u,
                         Identified start) {
    double h_min = std::numeric_limits<double>::infinity();
    for (std::size_t i = 1; i < t.size(); ++i) h_min = std::min(h_min, t[i] - t[i - 1]);
    std::vector<std::size_t> steps;
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (t[i] - t[i - 1] < 1.5 * h_min) steps.push_back(i - 1);
    }
    if (steps.size() < 2) return start;
    const auto residual_norm = [&](double g1, double g2) {
        double s = 0.0;
        for (auto i : steps) {
            const double r = u[i + 1] - rk4_step_jet(g1, g2, c[i], c[i + 1], u[i], t[i + 1] - t[i]).value;
            s += r * r;
        }
        return s;
    };
    double g1 = start.gamma1, g2 = start.gamma2;
    double best = residual_norm(g1, g2);
    const double initial = best;
    for (int it = 0; it < 30; ++it) {
        Eigen::MatrixXd jac(static_cast<Eigen::Index>(steps.size()), 2);
        Eigen::VectorXd res(static_cast<Eigen::Index>(steps.size()));
        for (std::size_t r = 0; r < steps.size(); ++r) {
            const auto i = steps[r];
            const StepJet s = rk4_step_jet(g1, g2, c[i], c[i + 1], u[i], t[i + 1] - t[i]);
            const auto row = static_cast<Eigen::Index>(r);
            res(row) = u[i + 1] - s.value;
            jac(row, 0) = s.d1;
            jac(row, 1) = s.d2;
        }
        const Eigen::Vector2d delta = jac.colPivHouseholderQr().solve(res);
        if (!delta.allFinite()) break;
        const double n1 = g1 + delta(0), n2 = g2 + delta(1);
        const double next = residual_norm(n1, n2);
        if (!(next <= best)) break;
        g1 = n1;
        g2 = n2;
        const bool small = std::abs(delta(0)) <= 1e-15 * (1.0 + std::abs(g1)) &&
                           std::abs(delta(1)) <= 1e-15 * (1.0 + std::abs(g2));
        best = next;
        if (small) break;
    }
    if (!(best <= initial)) return start;
    start.gamma1 = g1;
    start.gamma2 = g2;
    return start;
}

}  // namespace

Identified identify_parameters(std::span<const double> t, std::span<const double> c, std::span<const double> u,
                               int half_width) {
    if (t.size() != c.size() || t.size() != u.size()) {
        throw ContractError("identification inputs differ in length");
    }
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (!(t[i] > t[i - 1])) {
            throw InputError("identification points must be strictly increasing");
        }
    }
    int w = half_width;
    while (w > 1 && static_cast<int>(t.size()) < 2 * w + 2) --w;
    const auto du = stencil_derivative(t, u, w);
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (std::isfinite(du[i])) rows.push_back(i);
    }
    if (rows.size() < 2) {
        throw NumericalError("degenerate identification system: fewer than two usable points");
    }
    Eigen::MatrixXd a(static_cast<Eigen::Index>(rows.size()), 2);
    Eigen::VectorXd b(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto i = rows[r];
        a(static_cast<Eigen::Index>(r), 0) = c[i] * u[i];
        a(static_cast<Eigen::Index>(r), 1) = 1.0;
        b(static_cast<Eigen::Index>(r)) = du[i];
    }
    return refine_on_rk4(t, c, u, solve_design(a, b));
}

Identified identify_parameters(const Grid& grid, std::span<const double> c, std::span<const double> u,
                               int half_width) {
    return identify_parameters(grid.points, c, u, half_width);
}

Identified identify_two_point(double c0, double u0, double du0, double c1, double u1, double du1) {
    Eigen::MatrixXd a(2, 2);
    a << c0 * u0, 1.0, c1 * u1, 1.0;
    Eigen::VectorXd b(2);
    b << du0, du1;
    return solve_design(a, b);
}

std::vector<double> interpolate(std::span<const double> x, std::span<const double> y, std::span<const double> at) {
    if (x.empty() || x.size() != y.size()) {
        throw ContractError("interpolation needs matching, non-empty nodes");
    }
    std::vector<double> out;
    out.reserve(at.size());
    for (double a : at) {
        if (a <= x.front()) {
            out.push_back(y.front());
        } else if (a >= x.back()) {
            out.push_back(y.back());
        } else {
            const auto hi = static_cast<std::size_t>(std::upper_bound(x.begin(), x.end(), a) - x.begin());
            const double w = (a - x[hi - 1]) / (x[hi] - x[hi - 1]);
            out.push_back((1.0 - w) * y[hi - 1] + w * y[hi]);
        }
    }
    return out;
}

namespace {

struct SplitPoints {
    std::vector<double> scalars;  // values at coordinates -1, -2, ...
    Points field;
};

SplitPoints split(const Points& p) {
    SplitPoints s;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p.x[i] < 0.0) {
            const auto slot = static_cast<std::size_t>(std::lround(-p.x[i])) - 1;
            if (s.scalars.size() <= slot) s.scalars.resize(slot + 1, std::numeric_limits<double>::quiet_NaN());
            s.scalars[slot] = p.v[i];
        } else {
            s.field.x.push_back(p.x[i]);
            s.field.v.push_back(p.v[i]);
        }
    }
    return s;
}

double scalar_at(const SplitPoints& s, std::size_t slot, const char* what) {
    if (slot >= s.scalars.size() || !std::isfinite(s.scalars[slot])) {
        throw InputError(std::string("prompt condition lacks the scalar ") + what);
    }
    return s.scalars[slot];
}

std::vector<double> field_on_grid(const SplitPoints& s, const Grid& grid, const char* what) {
    if (s.field.size() == 0) {
        throw InputError(std::string("prompt condition lacks the field ") + what);
    }
    return interpolate(s.field.x, s.field.v, grid.points);
}

// Value observed at coordinate x, if any.
std::optional<double> value_at(const Points& p, double x) {
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (std::abs(p.x[i] - x) < 1e-12) return p.v[i];
    }
    return std::nullopt;
}

std::vector<double> ode_question(const FamilyConfig& config, const Prompt& prompt, double g1, double g2) {
    const Grid grid = config.grid();
    const SplitPoints q = split(prompt.question);
    const auto c = field_on_grid(q, grid, "c");
    const auto u = solve_ode_rk4(g1, g2, c, scalar_at(q, 0, "u0"), grid);
    return interpolate(grid.points, u, prompt.query);
}

bool ode_in_support(const FamilyConfig& c, const Identified& id) {
    constexpr double tol = 1e-6;
    if (c.family == FamilyId::ode2) {
        return id.gamma1 >= c.gamma1.lo - tol && id.gamma1 <= c.gamma1.hi + tol && id.gamma2 >= c.gamma2.lo - tol &&
               id.gamma2 <= c.gamma2.hi + tol;
    }
    const double corners[] = {c.eta1.lo * c.eta3.lo, c.eta1.lo * c.eta3.hi, c.eta1.hi * c.eta3.lo,
                              c.eta1.hi * c.eta3.hi};
    const auto [mn, mx] = std::minmax_element(std::begin(corners), std::end(corners));
    return id.gamma1 >= *mn - tol && id.gamma1 <= *mx + tol && id.gamma2 >= c.eta2.lo - tol &&
           id.gamma2 <= c.eta2.hi + tol;
}

}  // namespace

Identified identify_from_demo(const Demo& demo, int half_width) {
    const SplitPoints cond = split(demo.cond);
    std::vector<double> t, c, u;
    for (std::size_t i = 0; i < demo.qoi.size(); ++i) {
        if (const auto cv = value_at(cond.field, demo.qoi.x[i])) {
            t.push_back(demo.qoi.x[i]);
            c.push_back(*cv);
            u.push_back(demo.qoi.v[i]);
        }
    }
    return identify_parameters(t, c, u, half_width);
}

std::vector<double> oracle_predict_ode(const FamilyConfig& config, const Prompt& prompt, int demo) {
    if (!is_ode(config.family)) {
        throw ConfigError("oracle_predict_ode needs an ODE family");
    }
    if (demo < 0 || demo >= static_cast<int>(prompt.demos.size())) {
        throw InputError("the ODE oracle needs at least one demo");
    }
    const Identified id = identify_from_demo(prompt.demos[static_cast<std::size_t>(demo)]);
    return ode_question(config, prompt, id.gamma1, id.gamma2);
}

// ---- posterior predictive sampling ------------------------------------------

const char* posterior_kind_name(PosteriorKind k) {
    switch (k) {
        case PosteriorKind::point_mass: return "point_mass";
        case PosteriorKind::manifold: return "manifold";
        case PosteriorKind::empirical: return "empirical";
    }
    return "?";
}

std::vector<double> OracleResult::mean() const {
    if (samples.empty()) return {};
    std::vector<double> m(samples.front().size(), 0.0);
    for (const auto& s : samples) {
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += s[i];
    }
    for (double& v : m) v /= static_cast<double>(samples.size());
    return m;
}

std::vector<double> OracleResult::stddev() const {
    if (samples.empty()) return {};
    // Shifted by the first sample so identical draws give exactly zero.
    const auto& ref = samples.front();
    const auto n = static_cast<double>(samples.size());
    std::vector<double> v(ref.size(), 0.0);
    if (samples.size() < 2) return v;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        double s1 = 0.0, s2 = 0.0;
        for (const auto& s : samples) {
            const double d = s[i] - ref[i];
            s1 += d;
            s2 += d * d;
        }
        v[i] = std::sqrt(std::max(0.0, (s2 - s1 * s1 / n) / (n - 1.0)));
    }
    return v;
}

nlohmann::json OracleResult::to_json() const {
    return {{"kind", posterior_kind_name(kind)},
            {"acceptance_rate", acceptance_rate},
            {"in_prior_support", in_prior_support},
            {"n_samples", samples.size()},
            {"params", params.size() <= 1 ? params : std::vector<std::vector<double>>{}},
            {"mean", mean()},
            {"std", stddev()}};
}

namespace {

void check_acceptance(double rate, const OracleOptions& o, const char* what) {
    if (!(rate >= o.min_acceptance)) {
        throw ToleranceError(std::string(what) + " acceptance rate " + std::to_string(rate) + " is below " +
                             std::to_string(o.min_acceptance) + "; use a larger tolerance or more proposals");
    }
}

// Multinomial resampling of n indices from normalised weights.
std::vector<std::size_t> resample(const std::vector<double>& w, int n, Rng& rng) {
    std::vector<double> cdf(w.size());
    std::partial_sum(w.begin(), w.end(), cdf.begin());
    std::vector<std::size_t> idx;
    idx.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        const double r = rng.uniform() * cdf.back();
        idx.push_back(std::min(w.size() - 1, static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), r) -
                                                                      cdf.begin())));
    }
    return idx;
}

// Normalises log-weights in place and returns the effective sample fraction.
double normalise(std::vector<double>& logw) {
    const double mx = *std::max_element(logw.begin(), logw.end());
    double s = 0.0, s2 = 0.0;
    for (double& l : logw) {
        l = std::exp(l - mx);
        s += l;
    }
    for (double& l : logw) {
        l /= s;
        s2 += l * l;
    }
    return 1.0 / s2 / static_cast<double>(logw.size());
}

OracleResult ode_posterior(const FamilyConfig& config, const Prompt& prompt, int n, Rng& rng,
                           const OracleOptions& o) {
    OracleResult r;
    if (prompt.demos.empty()) {
        throw InputError("the ODE oracle needs at least one demo");
    }
    if (!o.abc) {
        const Identified id = identify_from_demo(prompt.demos.front());
        r.kind = config.family == FamilyId::ode2 ? PosteriorKind::point_mass : PosteriorKind::manifold;
        r.params = {{id.gamma1, id.gamma2}};
        r.in_prior_support = ode_in_support(config, id);
        r.samples.assign(static_cast<std::size_t>(n), ode_question(config, prompt, id.gamma1, id.gamma2));
        return r;
    }
    // ABC: accept prior draws whose simulated demo QoIs match within epsilon.
    const TaskGenerator gen(config);
    const Grid& grid = gen.grid();
    struct DemoData {
        std::vector<double> c;
        double u0;
        Points qoi;
    };
    std::vector<DemoData> demos;
    for (const auto& d : prompt.demos) {
        const SplitPoints s = split(d.cond);
        demos.push_back({field_on_grid(s, grid, "c"), scalar_at(s, 0, "u0"), d.qoi});
    }
    const int budget = std::max(o.proposals, n);
    std::vector<std::vector<double>> accepted;
    int tried = 0;
    for (; tried < budget && static_cast<int>(accepted.size()) < n; ++tried) {
        const auto alpha = gen.draw_alpha(rng);
        double sq = 0.0;
        std::size_t count = 0;
        for (const auto& d : demos) {
            const double u0 = d.u0;
            const auto u = gen.solve(alpha, d.c, std::span<const double>(&u0, 1), 0.0);
            const auto at = interpolate(grid.points, u, d.qoi.x);
            for (std::size_t i = 0; i < at.size(); ++i) sq += (at[i] - d.qoi.v[i]) * (at[i] - d.qoi.v[i]);
            count += at.size();
        }
        if (std::sqrt(sq / static_cast<double>(std::max<std::size_t>(count, 1))) < o.epsilon) {
            accepted.push_back(alpha);
        }
    }
    r.kind = PosteriorKind::empirical;
    r.acceptance_rate = static_cast<double>(accepted.size()) / tried;
    check_acceptance(r.acceptance_rate, o, "ABC");
    for (int i = 0; i < n; ++i) {
        const auto& a = accepted[static_cast<std::size_t>(i) % accepted.size()];
        const double g1 = config.family == FamilyId::ode2 ? a[0] : a[0] * a[2];
        r.params.push_back(a);
        r.samples.push_back(ode_question(config, prompt, g1, a[1]));
    }
    return r;
}

struct OffsetFit {
    double slope = 0.0;
    std::vector<double> intercepts;
};

// Each noisy Poisson demo is u0 + s x + w_k(x) + offset, with w_k the
// zero-boundary response to the source; a line fit of z - w_k recovers s and
// u0 + offset exactly.
OffsetFit fit_offsets(const Prompt& prompt, const Grid& grid) {
    OffsetFit f;
    for (const auto& d : prompt.demos) {
        const SplitPoints s = split(d.cond);
        const auto k = field_on_grid(s, grid, "k");
        const auto w = interpolate(grid.points, solve_bvp_tridiag(1.0, {}, k, 0.0, 0.0, grid, 1.0), d.qoi.x);
        if (d.qoi.size() < 2) {
            throw InputError("offset fit needs at least two observed points per demo");
        }
        double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
        const double m = static_cast<double>(d.qoi.size());
        for (std::size_t i = 0; i < d.qoi.size(); ++i) {
            const double x = d.qoi.x[i];
            const double y = d.qoi.v[i] - w[i];
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
        }
        const double slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
        f.slope += slope / static_cast<double>(prompt.demos.size());
        f.intercepts.push_back((sy - slope * sx) / m);
    }
    return f;
}

std::vector<double> poisson_question(const Prompt& prompt, const Grid& grid, double u0, double u1) {
    const SplitPoints q = split(prompt.question);
    const auto k = field_on_grid(q, grid, "k");
    return interpolate(grid.points, solve_bvp_tridiag(1.0, {}, k, u0, u1, grid, 1.0), prompt.query);
}

OracleResult offset_posterior(const FamilyConfig& config, const Prompt& prompt, int n, Rng& rng,
                              const OracleOptions& o) {
    const Grid grid = config.grid();
    const double sigma = config.noise.sigma;
    const auto add_offset = [&](std::vector<double> z) {
        const double e = sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0;
        for (double& v : z) v += e;
        return z;
    };
    OracleResult r;
    if (prompt.demos.empty()) {
        for (int i = 0; i < n; ++i) {
            const double u0 = config.bc.draw(rng);
            const double u1 = config.bc.draw(rng);
            r.params.push_back({u0, u1});
            r.samples.push_back(add_offset(poisson_question(prompt, grid, u0, u1)));
        }
        return r;
    }
    const OffsetFit fit = fit_offsets(prompt, grid);
    const double lo = std::max(config.bc.lo, config.bc.lo - fit.slope);
    const double hi = std::min(config.bc.hi, config.bc.hi - fit.slope);
    if (!(lo <= hi)) {
        r.in_prior_support = false;
        throw InputError("demos imply a boundary slope outside the prior support");
    }
    std::vector<double> u0s;
    if (sigma == 0.0) {
        r.kind = PosteriorKind::point_mass;
        u0s.assign(static_cast<std::size_t>(n), fit.intercepts.front());
    } else {
        const int m = std::max(o.proposals, n);
        std::vector<double> prop(static_cast<std::size_t>(m)), logw(static_cast<std::size_t>(m));
        for (int i = 0; i < m; ++i) {
            const double u0 = rng.uniform(lo, hi);
            double l = 0.0;
            for (double b : fit.intercepts) l -= (b - u0) * (b - u0);
            prop[static_cast<std::size_t>(i)] = u0;
            logw[static_cast<std::size_t>(i)] = l / (2.0 * sigma * sigma);
        }
        r.acceptance_rate = normalise(logw);
        check_acceptance(r.acceptance_rate, o, "importance sampling");
        for (auto i : resample(logw, n, rng)) u0s.push_back(prop[i]);
    }
    for (double u0 : u0s) {
        const double u1 = u0 + fit.slope;
        r.params.push_back({u0, u1});
        r.samples.push_back(add_offset(poisson_question(prompt, grid, u0, u1)));
    }
    if (r.kind == PosteriorKind::point_mass) r.params.resize(1);
    return r;
}

OracleResult free_boundary_posterior(const FamilyConfig& config, const Prompt& prompt, int n, Rng& rng,
                                     const OracleOptions& o) {
    const Grid grid = config.grid();
    const double hw = config.free_halfwidth;
    OracleResult r;
    std::optional<double> u0;
    std::vector<double> right;
    for (const auto& d : prompt.demos) {
        const auto a = value_at(d.qoi, 0.0);
        const auto b = value_at(d.qoi, 1.0);
        if (!a || !b) {
            throw InputError("free-boundary demos must observe both end points");
        }
        u0 = u0.value_or(*a);
        right.push_back(*b);
    }
    const auto max_tries = static_cast<std::int64_t>(std::ceil(n / o.min_acceptance));
    std::int64_t tried = 0;
    while (static_cast<int>(r.samples.size()) < n) {
        if (tried >= max_tries) {
            check_acceptance(static_cast<double>(r.samples.size()) / static_cast<double>(tried), o, "rejection");
        }
        ++tried;
        const double ur = config.bc.draw(rng);
        // uniform likelihood of each observed right boundary given u_r
        if (std::any_of(right.begin(), right.end(), [&](double u1) { return std::abs(u1 - ur) > hw; })) {
            continue;
        }
        const double left = u0 ? *u0 : config.bc.draw(rng);
        const double u1 = rng.uniform(ur - hw, ur + hw);
        r.params.push_back({left, ur});
        r.samples.push_back(poisson_question(prompt, grid, left, u1));
    }
    r.acceptance_rate = static_cast<double>(n) / static_cast<double>(tried);
    check_acceptance(r.acceptance_rate, o, "rejection");
    return r;
}

OracleResult reaction_diffusion_posterior(const FamilyConfig& config, const Prompt& prompt, int n, Rng& rng,
                                          const OracleOptions& o) {
    const TaskGenerator gen(config);
    const Grid& grid = gen.grid();
    const double sigma = config.noise.sigma;
    struct DemoData {
        std::vector<double> scalars;
        Points qoi;
    };
    std::vector<DemoData> demos;
    for (const auto& d : prompt.demos) {
        const SplitPoints s = split(d.cond);
        demos.push_back({{scalar_at(s, 0, "u0"), scalar_at(s, 1, "u1"), scalar_at(s, 2, "a"), scalar_at(s, 3, "c")},
                         d.qoi});
    }
    const SplitPoints q = split(prompt.question);
    const std::vector<double> qs = {scalar_at(q, 0, "u0"), scalar_at(q, 1, "u1"), scalar_at(q, 2, "a"),
                                    scalar_at(q, 3, "c")};
    const int m = std::max(o.proposals, n);
    std::vector<std::vector<double>> ks(static_cast<std::size_t>(m));
    std::vector<double> logw(static_cast<std::size_t>(m));
    for (int i = 0; i < m; ++i) {
        auto& k = ks[static_cast<std::size_t>(i)];
        k = gen.draw_alpha(rng);
        double sq = 0.0;
        for (const auto& d : demos) {
            const auto u = interpolate(grid.points, gen.solve(k, {}, d.scalars, 0.0), d.qoi.x);
            for (std::size_t j = 0; j < u.size(); ++j) sq += (u[j] - d.qoi.v[j]) * (u[j] - d.qoi.v[j]);
        }
        logw[static_cast<std::size_t>(i)] = sigma > 0.0 ? -sq / (2.0 * sigma * sigma) : (sq < o.epsilon ? 0.0 : -1e300);
    }
    OracleResult r;
    r.acceptance_rate = normalise(logw);
    check_acceptance(r.acceptance_rate, o, "importance sampling");
    for (auto i : resample(logw, n, rng)) {
        auto z = interpolate(grid.points, gen.solve(ks[i], {}, qs, 0.0), prompt.query);
        for (double& v : z) v += sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0;
        r.samples.push_back(std::move(z));
    }
    return r;
}

double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }
double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

}  // namespace

OracleResult mc_posterior_predictive(const FamilyConfig& config, const Prompt& prompt, int n, Rng& rng,
                                     const OracleOptions& options) {
    if (n <= 0) {
        throw ConfigError("number of predictive draws must be positive");
    }
    if (prompt.query.empty()) {
        throw InputError("prompt has no query points");
    }
    switch (config.family) {
        case FamilyId::ode2:
        case FamilyId::ode3:
            return ode_posterior(config, prompt, n, rng, options);
        case FamilyId::poisson_noisy:
            return offset_posterior(config, prompt, n, rng, options);
        case FamilyId::poisson_free_boundary:
            return free_boundary_posterior(config, prompt, n, rng, options);
        case FamilyId::reaction_diffusion:
            return reaction_diffusion_posterior(config, prompt, n, rng, options);
    }
    throw ConfigError("unknown family");
}

GaussianPredictive offset_predictive(const FamilyConfig& config, const Prompt& prompt) {
    if (config.family != FamilyId::poisson_noisy || config.noise.kind != NoiseKind::constant_offset) {
        throw ConfigError("closed-form predictive needs the constant-offset Poisson family");
    }
    if (prompt.demos.empty() || !(config.noise.sigma > 0.0)) {
        throw InputError("closed-form predictive needs demos and positive noise");
    }
    const Grid grid = config.grid();
    const OffsetFit fit = fit_offsets(prompt, grid);
    const double sigma = config.noise.sigma;
    const double m = static_cast<double>(fit.intercepts.size());
    const double mu = std::accumulate(fit.intercepts.begin(), fit.intercepts.end(), 0.0) / m;
    const double tau = sigma / std::sqrt(m);
    const double a = (std::max(config.bc.lo, config.bc.lo - fit.slope) - mu) / tau;
    const double b = (std::min(config.bc.hi, config.bc.hi - fit.slope) - mu) / tau;
    const double z = norm_cdf(b) - norm_cdf(a);
    if (!(z > 0.0)) {
        throw InputError("demos imply an offset outside the prior support");
    }
    const double shift = (norm_pdf(a) - norm_pdf(b)) / z;
    const double mean_u0 = mu + tau * shift;
    const double ta = std::isfinite(a) ? a * norm_pdf(a) : 0.0;
    const double tb = std::isfinite(b) ? b * norm_pdf(b) : 0.0;
    const double var_u0 = tau * tau * (1.0 + (ta - tb) / z - shift * shift);
    GaussianPredictive g;
    g.mean = poisson_question(prompt, grid, mean_u0, mean_u0 + fit.slope);
    g.stddev = std::sqrt(var_u0 + sigma * sigma);
    return g;
}

// ---- comparison -------------------------------------------------------------

double wasserstein1(std::vector<double> a, std::vector<double> b) {
    if (a.empty() || b.empty()) {
        throw InputError("Wasserstein distance of an empty set");
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    // Integrate |F_a - F_b| over the merged breakpoints.
    std::size_t i = 0, j = 0;
    double fa = 0.0, fb = 0.0, prev = std::min(a.front(), b.front()), total = 0.0;
    const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
    while (i < a.size() || j < b.size()) {
        const double x = j >= b.size() || (i < a.size() && a[i] <= b[j]) ? a[i] : b[j];
        total += std::abs(fa - fb) * (x - prev);
        while (i < a.size() && a[i] == x) fa = static_cast<double>(++i) / na;
        while (j < b.size() && b[j] == x) fb = static_cast<double>(++j) / nb;
        prev = x;
    }
    return total;
}

nlohmann::json OracleMetrics::to_json() const {
    return {{"mean_relative_error", mean_relative_error}, {"mean_std_ratio", mean_std_ratio}, {"mean_w1", mean_w1}};
}

OracleMetrics compare_to_oracle(const std::vector<std::vector<double>>& samples, const OracleResult& oracle) {
    if (samples.empty() || oracle.samples.empty()) {
        throw InputError("comparison needs samples on both sides");
    }
    const std::size_t q = oracle.samples.front().size();
    for (const auto& s : samples) {
        if (s.size() != q) throw ContractError("model samples and oracle live on different query grids");
    }
    OracleResult model;
    model.samples = samples;
    const auto mm = model.mean();
    const auto om = oracle.mean();
    const auto ms = model.stddev();
    const auto os = oracle.stddev();
    OracleMetrics r;
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < q; ++i) {
        num += (mm[i] - om[i]) * (mm[i] - om[i]);
        den += om[i] * om[i];
    }
    if (!(den > 0.0)) {
        throw InputError("oracle mean has zero norm");
    }
    r.mean_relative_error = std::sqrt(num / den);
    double ratio_sum = 0.0;
    int ratio_count = 0;
    for (std::size_t i = 0; i < q; ++i) {
        const double ratio = os[i] > 0.0 ? ms[i] / os[i] : std::numeric_limits<double>::quiet_NaN();
        r.std_ratio.push_back(ratio);
        if (std::isfinite(ratio)) {
            ratio_sum += ratio;
            ++ratio_count;
        }
        std::vector<double> a, b;
        for (const auto& s : samples) a.push_back(s[i]);
        for (const auto& s : oracle.samples) b.push_back(s[i]);
        r.w1.push_back(wasserstein1(std::move(a), std::move(b)));
    }
    r.mean_std_ratio = ratio_count > 0 ? ratio_sum / ratio_count : std::numeric_limits<double>::quiet_NaN();
    r.mean_w1 = std::accumulate(r.w1.begin(), r.w1.end(), 0.0) / static_cast<double>(q);
    return r;
}

OracleMetrics compare_to_oracle(const std::vector<double>& prediction, const OracleResult& oracle) {
    return compare_to_oracle(std::vector<std::vector<double>>{prediction}, oracle);
}

}  // namespace iconlab
