#include <doctest.h>

#include "iconlab/error.hpp"
#include "iconlab/oracle.hpp"

#include <cmath>
#include <numbers>

using namespace iconlab;

namespace {

FamilyConfig fixed_instance_config(std::vector<int> obs = {51}) {
    FamilyConfig c = FamilyConfig::defaults(FamilyId::ode2);
    c.gamma1 = {1.04696604, 1.04696604};
    c.gamma2 = {0.07126787, 0.07126787};
    c.obs_counts = std::move(obs);
    return c;
}

double rel(double got, double want) { return std::abs(got - want) / std::abs(want); }

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

Prompt first_prompt(const FamilyConfig& c, int J, std::uint64_t seed) {
    const TaskGenerator gen(c);
    Rng rng(seed);
    const auto task = gen.generate(J, rng);
    return make_prompts(task, gen.grid(), rng).front();
}

}  // namespace

TEST_CASE("Lagrange stencil derivatives") {
    // exact for polynomials up to degree 2w on uneven points
    const std::vector<double> t = {0.0, 0.05, 0.08, 0.2, 0.21, 0.4, 0.43};
    std::vector<double> u;
    for (double x : t) u.push_back(3.0 * x * x * x * x - x * x + 2.0 * x);
    const auto du = stencil_derivative(t, u, 2);
    CHECK(std::isnan(du[0]));
    CHECK(std::isnan(du[6]));
    for (std::size_t i = 2; i < 5; ++i) {
        const double x = t[i];
        CHECK(du[i] == doctest::Approx(12.0 * x * x * x - 2.0 * x + 2.0).epsilon(1e-10));
    }
}

TEST_CASE("identification recovers the fixed ODE instance") {
    for (const auto& obs : {std::vector<int>{51}, std::vector<int>{40, 45, 50}}) {
        const FamilyConfig c = fixed_instance_config(obs);
        const TaskGenerator gen(c);
        Rng rng(31);
        const auto task = gen.generate(4, rng);
        for (const auto& p : task.pairs) {
            const auto prompts = make_prompts(TaskSample{task.family, task.alpha, {p, p}}, gen.grid(), rng);
            const Identified id = identify_from_demo(prompts.front().demos.front());
            CHECK(rel(id.gamma1, 1.04696604) < 1e-4);
            CHECK(rel(id.gamma2, 0.07126787) < 1e-4);
        }
    }
}

TEST_CASE("identification special cases") {
    const Grid g = Grid::uniform(0.0, 1.0, 51);
    Rng rng(2);
    const auto c = sample_gp(GPSpec{}, g, rng);
    SUBCASE("constant solution") {
        const std::vector<double> u(51, 0.7);
        const Identified id = identify_parameters(g, c, u);
        CHECK(std::abs(id.gamma1) < 1e-12);
        CHECK(std::abs(id.gamma2) < 1e-12);
    }
    SUBCASE("straight line") {
        std::vector<double> u;
        for (double t : g.points) u.push_back(0.3 + t);
        const Identified id = identify_parameters(g, c, u);
        CHECK(std::abs(id.gamma1) < 1e-6);
        CHECK(std::abs(id.gamma2 - 1.0) < 1e-6);
    }
    SUBCASE("degenerate systems") {
        CHECK_THROWS_AS(identify_parameters(g, c, std::vector<double>(51, 0.0)), NumericalError);
        CHECK_THROWS_AS(identify_parameters(g, std::vector<double>(51, 1.0), std::vector<double>(51, 2.0)),
                        NumericalError);
        const std::vector<double> two = {0.0, 1.0};
        CHECK_THROWS_AS(identify_parameters(two, two, two), NumericalError);
    }
    SUBCASE("two-point system") {
        // u = exp(t) solves u' = 1 * 1 * u + 0 with c = 1
        const Identified id = identify_two_point(1.0, 1.0, 1.0, 1.0, std::exp(1.0), std::exp(1.0));
        CHECK(id.gamma1 == doctest::Approx(1.0).epsilon(1e-14));
        CHECK(std::abs(id.gamma2) < 1e-14);
        // u = 2 + t with c = t: u' = 1 = g1 c u + g2 gives g1 = 0, g2 = 1
        const Identified line = identify_two_point(0.0, 2.0, 1.0, 1.0, 3.0, 1.0);
        CHECK(std::abs(line.gamma1) < 1e-14);
        CHECK(line.gamma2 == doctest::Approx(1.0));
        CHECK_THROWS_AS(identify_two_point(1.0, 1.0, 1.0, 1.0, 1.0, 1.0), NumericalError);
    }
}

TEST_CASE("oracle self-consistency") {
    const FamilyConfig c = FamilyConfig::defaults(FamilyId::ode2);
    const TaskGenerator gen(c);
    Rng rng(41);
    for (int trial = 0; trial < 10; ++trial) {
        const auto task = gen.generate(4, rng);
        // question = first demo's own condition
        TaskSample twin = task;
        twin.pairs.back() = task.pairs.front();
        const auto p = make_prompts(twin, gen.grid(), rng).front();
        CHECK(max_abs_diff(oracle_predict_ode(c, p), task.pairs.front().solution) < 1e-6);
        // identified parameters regenerate every pair
        const Identified id = identify_from_demo(p.demos.front());
        for (const auto& pair : task.pairs) {
            const auto u = solve_ode_rk4(id.gamma1, id.gamma2, pair.cond_field, pair.cond_scalars[0], gen.grid());
            CHECK(max_abs_diff(u, pair.solution) < 1e-5);
        }
        // two demos under one alpha identify the same parameters
        const Identified a = identify_from_demo(p.demos[0]);
        const Identified b = identify_from_demo(p.demos[1]);
        CHECK(std::abs(a.gamma1 - b.gamma1) < 1e-6 * std::max(1.0, std::abs(a.gamma1)) * 10);
        CHECK(std::abs(a.gamma2 - b.gamma2) < 1e-5);
    }
}

TEST_CASE("latent-equivalent parameterisations give the same predictive") {
    FamilyConfig two = FamilyConfig::defaults(FamilyId::ode2);
    two.obs_counts = {51};
    FamilyConfig three = FamilyConfig::defaults(FamilyId::ode3);
    three.obs_counts = {51};
    const TaskGenerator g2(two), g3(three);
    Rng rng(5);
    for (int trial = 0; trial < 10; ++trial) {
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
            t2.pairs.push_back(p);
            t3.pairs.push_back(q);
        }
        Rng r1(9), r2(9);
        const auto p2 = make_prompts(t2, g2.grid(), r1).front();
        const auto p3 = make_prompts(t3, g3.grid(), r2).front();
        CHECK(max_abs_diff(oracle_predict_ode(two, p2), oracle_predict_ode(three, p3)) < 1e-6);
        Rng s1(1), s2(1);
        const auto o3 = mc_posterior_predictive(three, p3, 4, s2);
        CHECK(o3.kind == PosteriorKind::manifold);
        CHECK(max_abs_diff(mc_posterior_predictive(two, p2, 4, s1).mean(), o3.mean()) < 1e-6);
    }
}

TEST_CASE("noiseless ODE predictive is a point mass") {
    const FamilyConfig c = FamilyConfig::defaults(FamilyId::ode2);
    const Prompt p = first_prompt(c, 3, 8);
    Rng rng(1);
    const auto r = mc_posterior_predictive(c, p, 50, rng);
    CHECK(r.kind == PosteriorKind::point_mass);
    CHECK(r.params.size() == 1);
    const auto ref = oracle_predict_ode(c, p);
    for (const auto& s : r.samples) CHECK(s == ref);
    CHECK(max_abs_diff(r.stddev(), std::vector<double>(ref.size(), 0.0)) == 0.0);
    CHECK(max_abs_diff(ref, p.truth) < 1e-3);
}

TEST_CASE("ABC over the prior") {
    FamilyConfig c = FamilyConfig::defaults(FamilyId::ode2);
    c.obs_counts = {51};
    const Prompt p = first_prompt(c, 2, 17);
    SUBCASE("tight tolerance exhausts the budget") {
        Rng rng(3);
        OracleOptions o;
        o.abc = true;
        o.proposals = 2000;
        CHECK_THROWS_AS(mc_posterior_predictive(c, p, 10, rng, o), ToleranceError);
    }
    SUBCASE("loose tolerance brackets the point mass") {
        Rng rng(3);
        OracleOptions o;
        o.abc = true;
        o.epsilon = 0.05;
        o.proposals = 20000;
        const auto r = mc_posterior_predictive(c, p, 20, rng, o);
        CHECK(r.kind == PosteriorKind::empirical);
        CHECK(r.acceptance_rate > 1e-4);
        CHECK(max_abs_diff(r.mean(), oracle_predict_ode(c, p)) < 0.2);
    }
}

TEST_CASE("constant-offset predictive: closed form and sampler agree") {
    const FamilyConfig c = FamilyConfig::defaults(FamilyId::poisson_noisy);
    const TaskGenerator gen(c);
    int checked = 0;
    for (std::uint64_t seed = 0; checked < 5; ++seed) {
        Rng rng(seed);
        const auto task = gen.generate(6, rng);
        // away from the prior edges the truncation is negligible
        if (std::abs(task.alpha[0]) > 0.7 || std::abs(task.alpha[1]) > 0.7) continue;
        ++checked;
        const Prompt p = make_prompts(task, gen.grid(), rng).front();
        const auto g = offset_predictive(c, p);
        CHECK(g.stddev == doctest::Approx(0.1 * std::sqrt(1.0 + 1.0 / 5.0)).epsilon(1e-3));
        Rng mc(seed + 100);
        const int n = 4000;
        const auto r = mc_posterior_predictive(c, p, n, mc);
        const auto m = r.mean();
        const auto s = r.stddev();
        const double se_mean = g.stddev / std::sqrt(n);
        const double se_std = g.stddev / std::sqrt(2.0 * (n - 1));
        for (std::size_t i = 0; i < m.size(); ++i) {
            CHECK(std::abs(m[i] - g.mean[i]) < 3 * se_mean);
            CHECK(std::abs(s[i] - g.stddev) < 3 * se_std);
        }
    }
}

TEST_CASE("offset family without noise collapses") {
    FamilyConfig c = FamilyConfig::defaults(FamilyId::poisson_noisy);
    c.noise.sigma = 0.0;
    const Prompt p = first_prompt(c, 3, 2);
    Rng rng(1);
    const auto r = mc_posterior_predictive(c, p, 10, rng);
    CHECK(r.kind == PosteriorKind::point_mass);
    CHECK(max_abs_diff(r.mean(), p.truth) < 1e-10);
}

TEST_CASE("free-boundary predictive structure") {
    const FamilyConfig c = FamilyConfig::defaults(FamilyId::poisson_free_boundary);
    const TaskGenerator gen(c);
    Rng rng(12);
    const auto task = gen.generate(6, rng);
    const Prompt p = make_prompts(task, gen.grid(), rng).front();
    Rng mc(2);
    const auto r = mc_posterior_predictive(c, p, 4000, mc);
    const auto s = r.stddev();
    CHECK(s.front() < 1e-12);
    CHECK(s.back() > 0.03);
    double lo = 1e9, hi = -1e9;
    for (const auto& z : r.samples) {
        lo = std::min(lo, z.back());
        hi = std::max(hi, z.back());
        CHECK(z.front() == doctest::Approx(task.alpha[0]));
    }
    // support of u1 is u_r +- 0.1 with u_r itself uncertain within the demos' overlap
    CHECK(hi - lo > 0.15);
    CHECK(hi - lo < 0.4);
    CHECK(lo > task.alpha[1] - 0.3);
    CHECK(hi < task.alpha[1] + 0.3);
    CHECK(r.acceptance_rate > 0.01);
}

TEST_CASE("reaction-diffusion importance sampling") {
    const FamilyConfig c = FamilyConfig::defaults(FamilyId::reaction_diffusion);
    const TaskGenerator gen(c);
    Rng rng(3);
    const auto task = gen.generate(1, rng);
    const Prompt p = make_prompts(task, gen.grid(), rng).front();
    Rng mc(4);
    OracleOptions o;
    o.proposals = 500;
    // no demos: the prior predictive, every weight equal
    const auto r = mc_posterior_predictive(c, p, 200, mc, o);
    CHECK(r.acceptance_rate == doctest::Approx(1.0));
    const auto s = r.stddev();
    for (double v : s) CHECK(v > 0.1 * 0.9);
    // a demo concentrates the weights
    const auto task6 = gen.generate(6, rng);
    const Prompt p6 = make_prompts(task6, gen.grid(), rng).front();
    o.min_acceptance = 0.5;
    CHECK_THROWS_AS(mc_posterior_predictive(c, p6, 50, mc, o), ToleranceError);
}

TEST_CASE("Wasserstein-1 distance") {
    CHECK(wasserstein1({0.0}, {1.0}) == doctest::Approx(1.0));
    CHECK(wasserstein1({0.0, 1.0}, {1.0, 0.0}) == 0.0);
    CHECK(wasserstein1({0.0, 0.0, 3.0}, {1.0}) == doctest::Approx((1.0 + 1.0 + 2.0) / 3.0));
    CHECK(wasserstein1({0.0, 2.0}, {1.0, 3.0}) == doctest::Approx(1.0));
    CHECK_THROWS_AS(wasserstein1({}, {1.0}), InputError);
}

TEST_CASE("comparison metrics") {
    Rng rng(6);
    OracleResult oracle;
    const double sd = 0.3;
    for (int i = 0; i < 20000; ++i) oracle.samples.push_back({1.0 + sd * rng.normal(), -2.0 + sd * rng.normal()});
    SUBCASE("identical sets") {
        const auto m = compare_to_oracle(oracle.samples, oracle);
        CHECK(m.mean_relative_error == 0.0);
        CHECK(m.mean_std_ratio == doctest::Approx(1.0));
        CHECK(m.mean_w1 == 0.0);
    }
    SUBCASE("mean only against a Gaussian") {
        const auto m = compare_to_oracle(oracle.mean(), oracle);
        CHECK(m.mean_relative_error < 1e-12);
        CHECK(m.std_ratio[0] == 0.0);
        CHECK(m.mean_w1 == doctest::Approx(sd * std::sqrt(2.0 / std::numbers::pi)).epsilon(0.03));
    }
    SUBCASE("shifted mean") {
        auto shifted = oracle.samples;
        for (auto& s : shifted) s[0] += 0.1;
        const auto m = compare_to_oracle(shifted, oracle);
        const auto om = oracle.mean();
        CHECK(m.mean_relative_error == doctest::Approx(0.1 / std::hypot(om[0], om[1])).epsilon(1e-9));
        CHECK(m.w1[0] == doctest::Approx(0.1).epsilon(1e-9));
        CHECK(m.w1[1] == 0.0);
    }
    SUBCASE("grid mismatch") {
        CHECK_THROWS_AS(compare_to_oracle(std::vector<double>{1.0}, oracle), ContractError);
    }
}
