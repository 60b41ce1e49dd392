#include "iconlab/rde.hpp"

#include "iconlab/error.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace iconlab {

Grid Grid::uniform(double lo, double hi, int n) {
    if (n < 2 || !(hi > lo)) {
        throw ConfigError("uniform grid needs n >= 2 and hi > lo");
    }
    Grid g;
    g.spacing = (hi - lo) / (n - 1);
    g.points.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        g.points[static_cast<std::size_t>(i)] = i == n - 1 ? hi : lo + i * g.spacing;
    }
    return g;
}

void Grid::validate() const {
    if (points.empty()) {
        throw ConfigError("grid is empty");
    }
    for (std::size_t i = 1; i < points.size(); ++i) {
        const double d = points[i] - points[i - 1];
        if (!(d > 0.0)) {
            throw ConfigError("grid is not strictly increasing");
        }
        if (std::abs(d - spacing) > 1e-12) {
            throw ConfigError("grid is not uniform");
        }
    }
}

void GPSpec::validate() const {
    if (!(variance > 0.0) || !(lengthscale > 0.0) || !(jitter >= 0.0)) {
        throw ConfigError("GP needs variance > 0, lengthscale > 0, jitter >= 0");
    }
}

double GPSpec::kernel(double x, double y) const {
    const double r = (x - y) / lengthscale;
    return variance * std::exp(-0.5 * r * r);
}

GPSampler::GPSampler(const GPSpec& spec, const Grid& grid) : spec_(spec) {
    spec.validate();
    if (grid.points.empty()) {
        throw ConfigError("GP grid is empty");
    }
    const auto n = static_cast<Eigen::Index>(grid.size());
    Eigen::MatrixXd k(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j < n; ++j) {
            k(i, j) = spec.kernel(grid.points[static_cast<std::size_t>(i)], grid.points[static_cast<std::size_t>(j)]);
        }
    }
    jitter_ = spec.jitter;
    for (int attempt = 0; attempt < 2; ++attempt) {
        Eigen::MatrixXd kj = k;
        kj.diagonal().array() += jitter_;
        Eigen::LLT<Eigen::MatrixXd> llt(kj);
        if (llt.info() == Eigen::Success) {
            chol_ = llt.matrixL();
            return;
        }
        jitter_ = std::max(jitter_ * 100.0, 1e-6 * spec.variance);
    }
    throw NumericalError("GP covariance is not positive definite even with jitter " + std::to_string(jitter_));
}

std::vector<double> GPSampler::sample(Rng& rng) const {
    const auto n = chol_.rows();
    Eigen::VectorXd xi(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        xi[i] = rng.normal();
    }
    const Eigen::VectorXd f = chol_.triangularView<Eigen::Lower>() * xi;
    std::vector<double> out(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        out[static_cast<std::size_t>(i)] = spec_.mean + f[i];
    }
    return out;
}

std::vector<double> sample_gp(const GPSpec& spec, const Grid& grid, Rng& rng) {
    return GPSampler(spec, grid).sample(rng);
}

std::vector<double> positive_field(std::span<const double> values) {
    if (values.empty()) {
        return {};
    }
    const double mx = *std::max_element(values.begin(), values.end());
    if (!std::isfinite(mx)) {
        throw InputError("positive_field: non-finite input");
    }
    std::vector<double> out(values.size());
    double z = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw InputError("positive_field: non-finite input");
        }
        out[i] = std::exp(values[i] - mx);
        z += out[i];
    }
    const double s = static_cast<double>(values.size()) / z;
    for (double& v : out) {
        v *= s;
    }
    return out;
}

std::vector<double> solve_ode_rk4(double g1, double g2, std::span<const double> c, double u0, const Grid& grid) {
    const std::size_t n = grid.size();
    if (c.size() != n) {
        throw ConfigError("ODE coefficient has " + std::to_string(c.size()) + " values for a grid of " +
                          std::to_string(n));
    }
    std::vector<double> u(n);
    u[0] = u0;
    const auto f = [&](double ct, double x) { return g1 * ct * x + g2; };
    for (std::size_t i = 0; i + 1 < n; ++i) {
        const double h = grid.points[i + 1] - grid.points[i];
        const double cm = 0.5 * (c[i] + c[i + 1]);
        const double k1 = f(c[i], u[i]);
        const double k2 = f(cm, u[i] + 0.5 * h * k1);
        const double k3 = f(cm, u[i] + 0.5 * h * k2);
        const double k4 = f(c[i + 1], u[i] + h * k3);
        u[i + 1] = u[i] + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if (!std::isfinite(u[i + 1])) {
            throw NumericalError("ODE state blew up", static_cast<std::int64_t>(i + 1));
        }
    }
    return u;
}

std::vector<double> solve_bvp_tridiag(double a, std::span<const double> k, std::span<const double> source, double u0,
                                      double ul, const Grid& grid, double diffusion) {
    const std::size_t n = grid.size();
    if (n < 2) {
        throw ConfigError("boundary value problem needs at least two grid points");
    }
    if (!(diffusion * a > 0.0)) {
        throw ConfigError("diffusion coefficient times a must be positive");
    }
    if (!k.empty() && k.size() != n) {
        throw ConfigError("reaction field size does not match grid");
    }
    if (source.size() != 1 && source.size() != n) {
        throw ConfigError("source must be a scalar or one value per grid point");
    }
    std::vector<double> u(n);
    u[0] = u0;
    u[n - 1] = ul;
    if (n == 2) {
        return u;
    }
    const double h = grid.spacing;
    const double off = -diffusion * a / (h * h);
    const std::size_t m = n - 2;
    // Thomas algorithm on the interior unknowns u[1..n-2].
    std::vector<double> cp(m), dp(m);
    for (std::size_t j = 0; j < m; ++j) {
        const std::size_t i = j + 1;
        const double ki = k.empty() ? 0.0 : k[i];
        if (ki < 0.0) {
            throw ConfigError("reaction coefficient must be non-negative");
        }
        const double diag = -2.0 * off + ki;
        double rhs = source.size() == 1 ? source[0] : source[i];
        if (j == 0) {
            rhs -= off * u0;
        }
        if (j + 1 == m) {
            rhs -= off * ul;
        }
        const double denom = j == 0 ? diag : diag - off * cp[j - 1];
        if (denom == 0.0 || !std::isfinite(denom)) {
            throw NumericalError("zero pivot in tridiagonal solve", static_cast<std::int64_t>(i));
        }
        cp[j] = off / denom;
        dp[j] = (j == 0 ? rhs : rhs - off * dp[j - 1]) / denom;
    }
    u[m] = dp[m - 1];
    for (std::size_t j = m - 1; j-- > 0;) {
        u[j + 1] = dp[j] - cp[j] * u[j + 2];
    }
    return u;
}

std::string family_name(FamilyId f) {
    switch (f) {
        case FamilyId::ode2: return "ode2";
        case FamilyId::ode3: return "ode3";
        case FamilyId::reaction_diffusion: return "reaction_diffusion";
        case FamilyId::poisson_noisy: return "poisson_noisy";
        case FamilyId::poisson_free_boundary: return "poisson_free_boundary";
    }
    return "?";
}

FamilyId parse_family(const std::string& name) {
    for (auto f : {FamilyId::ode2, FamilyId::ode3, FamilyId::reaction_diffusion, FamilyId::poisson_noisy,
                   FamilyId::poisson_free_boundary}) {
        if (family_name(f) == name) {
            return f;
        }
    }
    throw ConfigError("unknown family '" + name +
                      "' (expected ode2, ode3, reaction_diffusion, poisson_noisy or poisson_free_boundary)");
}

bool is_ode(FamilyId f) { return f == FamilyId::ode2 || f == FamilyId::ode3; }

std::string noise_name(NoiseKind k) {
    switch (k) {
        case NoiseKind::none: return "none";
        case NoiseKind::iid_gaussian: return "iid_gaussian";
        case NoiseKind::constant_offset: return "constant_offset";
    }
    return "?";
}

NoiseKind parse_noise(const std::string& name) {
    for (auto k : {NoiseKind::none, NoiseKind::iid_gaussian, NoiseKind::constant_offset}) {
        if (noise_name(k) == name) {
            return k;
        }
    }
    throw ConfigError("unknown noise model '" + name + "'");
}

FamilyConfig FamilyConfig::defaults(FamilyId family) {
    FamilyConfig c;
    c.family = family;
    switch (family) {
        case FamilyId::ode2:
        case FamilyId::ode3:
            c.grid_points = 51;
            for (int m = 40; m <= 50; ++m) c.obs_counts.push_back(m);
            break;
        case FamilyId::reaction_diffusion:
            c.grid_points = 101;
            c.noise = {NoiseKind::iid_gaussian, 0.1};
            c.obs_counts = {40, 50};
            break;
        case FamilyId::poisson_noisy:
            c.grid_points = 25;
            c.noise = {NoiseKind::constant_offset, 0.1};
            c.obs_counts = {25};
            break;
        case FamilyId::poisson_free_boundary:
            c.grid_points = 25;
            c.obs_counts = {25};
            break;
    }
    return c;
}

Grid FamilyConfig::grid() const { return Grid::uniform(0.0, 1.0, grid_points); }

void FamilyConfig::validate() const {
    gp.validate();
    if (grid_points < 3) {
        throw ConfigError("family grid needs at least 3 points");
    }
    for (const Bounds* b : {&gamma1, &gamma2, &eta1, &eta2, &eta3, &u0, &bc, &a, &source}) {
        if (!(b->lo <= b->hi)) {
            throw ConfigError("empty prior bounds");
        }
    }
    if (!(a.lo > 0.0) || !(diffusion > 0.0)) {
        throw ConfigError("reaction-diffusion needs a > 0 and diffusion > 0");
    }
    if (!(noise.sigma >= 0.0) || !(free_halfwidth >= 0.0)) {
        throw ConfigError("noise sigma and free boundary half-width must be non-negative");
    }
    if (obs_counts.empty()) {
        throw ConfigError("observation counts are empty");
    }
    for (int m : obs_counts) {
        if (m < 1 || m > grid_points) {
            throw ConfigError("observation count " + std::to_string(m) + " outside 1.." + std::to_string(grid_points));
        }
    }
}

int FamilyConfig::alpha_size() const {
    switch (family) {
        case FamilyId::ode2: return 2;
        case FamilyId::ode3: return 3;
        case FamilyId::reaction_diffusion: return grid_points;
        case FamilyId::poisson_noisy:
        case FamilyId::poisson_free_boundary: return 2;
    }
    return 0;
}

int FamilyConfig::scalar_conditions() const {
    switch (family) {
        case FamilyId::ode2:
        case FamilyId::ode3: return 1;
        case FamilyId::reaction_diffusion: return 4;
        default: return 0;
    }
}

namespace {

nlohmann::json bounds_json(const Bounds& b) { return nlohmann::json::array({b.lo, b.hi}); }
Bounds bounds_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

nlohmann::json FamilyConfig::to_json() const {
    return {{"family", family_name(family)},
            {"grid_points", grid_points},
            {"gp", {{"mean", gp.mean}, {"variance", gp.variance}, {"lengthscale", gp.lengthscale}, {"jitter", gp.jitter}}},
            {"gamma1", bounds_json(gamma1)},
            {"gamma2", bounds_json(gamma2)},
            {"eta1", bounds_json(eta1)},
            {"eta2", bounds_json(eta2)},
            {"eta3", bounds_json(eta3)},
            {"u0", bounds_json(u0)},
            {"bc", bounds_json(bc)},
            {"a", bounds_json(a)},
            {"source", bounds_json(source)},
            {"diffusion", diffusion},
            {"free_halfwidth", free_halfwidth},
            {"noise", {{"kind", noise_name(noise.kind)}, {"sigma", noise.sigma}}},
            {"obs_counts", obs_counts}};
}

FamilyConfig FamilyConfig::from_json(const nlohmann::json& j) {
    try {
        FamilyConfig c = defaults(parse_family(j.at("family").get<std::string>()));
        c.grid_points = j.at("grid_points").get<int>();
        const auto& g = j.at("gp");
        c.gp = {g.at("mean").get<double>(), g.at("variance").get<double>(), g.at("lengthscale").get<double>(),
                g.at("jitter").get<double>()};
        c.gamma1 = bounds_from(j.at("gamma1"));
        c.gamma2 = bounds_from(j.at("gamma2"));
        c.eta1 = bounds_from(j.at("eta1"));
        c.eta2 = bounds_from(j.at("eta2"));
        c.eta3 = bounds_from(j.at("eta3"));
        c.u0 = bounds_from(j.at("u0"));
        c.bc = bounds_from(j.at("bc"));
        c.a = bounds_from(j.at("a"));
        c.source = bounds_from(j.at("source"));
        c.diffusion = j.at("diffusion").get<double>();
        c.free_halfwidth = j.at("free_halfwidth").get<double>();
        c.noise = {parse_noise(j.at("noise").at("kind").get<std::string>()), j.at("noise").at("sigma").get<double>()};
        c.obs_counts = j.at("obs_counts").get<std::vector<int>>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed family config: ") + e.what());
    }
}

std::string FamilyConfig::hash() const {
    const std::string text = to_json().dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

Observed corrupt_observations(std::span<const double> u, const NoiseModel& model, int m, Rng& rng) {
    const int n = static_cast<int>(u.size());
    if (m < 0 || m > n) {
        throw ConfigError("cannot observe " + std::to_string(m) + " of " + std::to_string(n) + " points");
    }
    if (model.sigma < 0.0) {
        throw ConfigError("noise sigma must be non-negative");
    }
    Observed obs;
    obs.idx = m == n ? std::vector<int>() : rng.sample_without_replacement(n, m);
    if (m == n) {
        obs.idx.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) obs.idx[static_cast<std::size_t>(i)] = i;
    }
    obs.values.reserve(obs.idx.size());
    for (int i : obs.idx) {
        obs.values.push_back(u[static_cast<std::size_t>(i)]);
    }
    switch (model.kind) {
        case NoiseKind::none:
            break;
        case NoiseKind::iid_gaussian:
            for (double& v : obs.values) v += rng.normal(0.0, model.sigma);
            break;
        case NoiseKind::constant_offset: {
            const double e = rng.normal(0.0, model.sigma);
            for (double& v : obs.values) v += e;
            break;
        }
    }
    return obs;
}

TaskGenerator::TaskGenerator(FamilyConfig config) : config_(std::move(config)) {
    config_.validate();
    grid_ = config_.grid();
    gp_ = GPSampler(config_.gp, grid_);
}

std::vector<double> TaskGenerator::draw_alpha(Rng& rng) const {
    const auto& c = config_;
    switch (c.family) {
        case FamilyId::ode2: {
            const double g1 = c.gamma1.draw(rng);
            return {g1, c.gamma2.draw(rng)};
        }
        case FamilyId::ode3: {
            const double e1 = c.eta1.draw(rng);
            const double e2 = c.eta2.draw(rng);
            return {e1, e2, c.eta3.draw(rng)};
        }
        case FamilyId::reaction_diffusion:
            return positive_field(gp_.sample(rng));
        case FamilyId::poisson_noisy:
        case FamilyId::poisson_free_boundary: {
            const double b0 = c.bc.draw(rng);
            return {b0, c.bc.draw(rng)};
        }
    }
    return {};
}

std::vector<double> TaskGenerator::solve(std::span<const double> alpha, std::span<const double> cond_field,
                                         std::span<const double> cond_scalars, double hidden) const {
    const auto& c = config_;
    switch (c.family) {
        case FamilyId::ode2:
            return solve_ode_rk4(alpha[0], alpha[1], cond_field, cond_scalars[0], grid_);
        case FamilyId::ode3:
            return solve_ode_rk4(alpha[0] * alpha[2], alpha[1], cond_field, cond_scalars[0], grid_);
        case FamilyId::reaction_diffusion: {
            const double src = cond_scalars[3];
            return solve_bvp_tridiag(cond_scalars[2], alpha, std::span<const double>(&src, 1), cond_scalars[0],
                                     cond_scalars[1], grid_, c.diffusion);
        }
        case FamilyId::poisson_noisy:
            return solve_bvp_tridiag(1.0, {}, cond_field, alpha[0], alpha[1], grid_, 1.0);
        case FamilyId::poisson_free_boundary:
            return solve_bvp_tridiag(1.0, {}, cond_field, alpha[0], hidden, grid_, 1.0);
    }
    return {};
}

PairSample TaskGenerator::draw_pair(std::span<const double> alpha, Rng& rng) const {
    const auto& c = config_;
    PairSample p;
    for (int attempt = 0;; ++attempt) {
        p = PairSample{};
        switch (c.family) {
            case FamilyId::ode2:
            case FamilyId::ode3:
                p.cond_field = gp_.sample(rng);
                p.cond_scalars = {c.u0.draw(rng)};
                break;
            case FamilyId::reaction_diffusion: {
                const double b0 = c.bc.draw(rng);
                const double b1 = c.bc.draw(rng);
                const double av = c.a.draw(rng);
                p.cond_scalars = {b0, b1, av, c.source.draw(rng)};
                break;
            }
            case FamilyId::poisson_noisy:
                p.cond_field = positive_field(gp_.sample(rng));
                break;
            case FamilyId::poisson_free_boundary:
                p.cond_field = positive_field(gp_.sample(rng));
                p.hidden = rng.uniform(alpha[1] - c.free_halfwidth, alpha[1] + c.free_halfwidth);
                break;
        }
        try {
            p.solution = solve(alpha, p.cond_field, p.cond_scalars, p.hidden);
            break;
        } catch (const NumericalError&) {
            if (attempt >= 3) {
                throw;
            }
        }
    }
    const int m = c.obs_counts[rng.below(c.obs_counts.size())];
    Observed obs = corrupt_observations(p.solution, c.noise, m, rng);
    p.qoi_idx = std::move(obs.idx);
    p.qoi = std::move(obs.values);
    if (is_ode(c.family)) {
        p.cond_idx = p.qoi_idx;  // condition and QoI share observation points
    } else if (c.has_condition_field()) {
        p.cond_idx.resize(grid_.size());
        for (std::size_t i = 0; i < grid_.size(); ++i) p.cond_idx[i] = static_cast<int>(i);
    }
    return p;
}

TaskSample TaskGenerator::generate(int J, Rng& rng) const {
    if (J < 1) {
        throw ConfigError("J must be at least 1");
    }
    TaskSample t;
    t.family = config_.family;
    t.alpha = draw_alpha(rng);
    t.pairs.reserve(static_cast<std::size_t>(J));
    for (int j = 0; j < J; ++j) {
        t.pairs.push_back(draw_pair(t.alpha, rng));
    }
    return t;
}

TaskSample generate_task(const FamilyConfig& config, int J, Rng& rng) { return TaskGenerator(config).generate(J, rng); }

}  // namespace iconlab
