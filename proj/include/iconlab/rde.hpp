#pragma once

#include "iconlab/rng.hpp"

#include <Eigen/Core>
#include <json.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace iconlab {

struct Grid {
    std::vector<double> points;
    double spacing = 0.0;

    /// n evenly spaced points on [lo, hi], both ends included.
    static Grid uniform(double lo, double hi, int n);
    std::size_t size() const { return points.size(); }
    /// Throws ConfigError unless strictly increasing and uniform within 1e-12.
    void validate() const;
};

struct GPSpec {
    double mean = 0.0;
    double variance = 1.0;
    double lengthscale = 0.2;
    double jitter = 1e-8;

    void validate() const;
    double kernel(double x, double y) const;
};

/// Squared-exponential GP on a fixed grid; the Cholesky factor is computed once.
class GPSampler {
public:
    GPSampler() = default;
    GPSampler(const GPSpec& spec, const Grid& grid);

    std::vector<double> sample(Rng& rng) const;
    /// Jitter that was finally used (raised once if the first factorisation failed).
    double jitter_used() const { return jitter_; }

private:
    GPSpec spec_;
    Eigen::MatrixXd chol_;
    double jitter_ = 0.0;
};

std::vector<double> sample_gp(const GPSpec& spec, const Grid& grid, Rng& rng);

/// Softmax over the grid rescaled by the number of points: positive, mean 1.
std::vector<double> positive_field(std::span<const double> values);

/// Classical RK4 for u' = g1 c(t) u + g2 on the grid; c is linearly
/// interpolated at half steps.
std::vector<double> solve_ode_rk4(double g1, double g2, std::span<const double> c, double u0, const Grid& grid);

/// Central differences for -diffusion a u'' + k u = source with Dirichlet
/// ends, solved with the Thomas algorithm. `k` may be empty (no reaction);
/// `source` is either one value per grid point or a single broadcast value.
std::vector<double> solve_bvp_tridiag(double a, std::span<const double> k, std::span<const double> source, double u0,
                                      double ul, const Grid& grid, double diffusion);

enum class FamilyId { ode2, ode3, reaction_diffusion, poisson_noisy, poisson_free_boundary };

std::string family_name(FamilyId f);
/// Throws ConfigError for unknown names.
FamilyId parse_family(const std::string& name);
bool is_ode(FamilyId f);

enum class NoiseKind { none, iid_gaussian, constant_offset };

std::string noise_name(NoiseKind k);
NoiseKind parse_noise(const std::string& name);

struct NoiseModel {
    NoiseKind kind = NoiseKind::none;
    double sigma = 0.0;
};

struct Bounds {
    double lo = -1.0;
    double hi = 1.0;
    double draw(Rng& rng) const { return rng.uniform(lo, hi); }
    bool contains(double x) const { return x >= lo && x <= hi; }
};

struct FamilyConfig {
    FamilyId family = FamilyId::ode2;
    int grid_points = 51;
    GPSpec gp;
    // ODE coefficients and initial value
    Bounds gamma1, gamma2;
    Bounds eta1, eta2, eta3;
    Bounds u0;
    // boundary value problems
    Bounds bc;  // u0, u1 (reaction-diffusion, noisy Poisson) or u0, u_r (free boundary)
    Bounds a{0.5, 1.5};
    Bounds source{-2.0, 2.0};
    double diffusion = 0.05;
    double free_halfwidth = 0.1;
    NoiseModel noise;
    /// Allowed observation counts; each pair draws one uniformly.
    std::vector<int> obs_counts;

    static FamilyConfig defaults(FamilyId family);
    Grid grid() const;
    void validate() const;
    /// Number of hidden parameters α.
    int alpha_size() const;
    /// Number of scalar conditions per pair.
    int scalar_conditions() const;
    bool has_condition_field() const { return family != FamilyId::reaction_diffusion; }

    nlohmann::json to_json() const;
    static FamilyConfig from_json(const nlohmann::json& j);
    /// FNV-1a over the canonical JSON text, as 16 hex digits.
    std::string hash() const;
};

struct PairSample {
    std::vector<double> cond_field;    // condition field on the grid (empty without one)
    std::vector<double> cond_scalars;  // scalar conditions
    std::vector<int> cond_idx;         // observed condition points
    std::vector<double> solution;      // clean QoI on the grid
    std::vector<int> qoi_idx;          // observed QoI points
    std::vector<double> qoi;           // observed, possibly noisy, QoI at qoi_idx
    double hidden = 0.0;               // per-pair latent (u1 of the free-boundary family)
};

struct TaskSample {
    FamilyId family = FamilyId::ode2;
    std::vector<double> alpha;
    std::vector<PairSample> pairs;
};

struct Observed {
    std::vector<int> idx;
    std::vector<double> values;
};

/// Keeps m uniformly chosen points (sorted) and adds noise per `model`.
Observed corrupt_observations(std::span<const double> u, const NoiseModel& model, int m, Rng& rng);

/// Reusable sampler for one family; holds the GP factorisation.
class TaskGenerator {
public:
    explicit TaskGenerator(FamilyConfig config);

    const FamilyConfig& config() const { return config_; }
    const Grid& grid() const { return grid_; }

    std::vector<double> draw_alpha(Rng& rng) const;
    /// One condition/QoI pair under `alpha`. Solver failures redraw the
    /// condition up to three times, then propagate.
    PairSample draw_pair(std::span<const double> alpha, Rng& rng) const;
    /// Solves one pair for given conditions without drawing anything.
    std::vector<double> solve(std::span<const double> alpha, std::span<const double> cond_field,
                              std::span<const double> cond_scalars, double hidden) const;
    TaskSample generate(int J, Rng& rng) const;

private:
    FamilyConfig config_;
    Grid grid_;
    GPSampler gp_;
};

TaskSample generate_task(const FamilyConfig& config, int J, Rng& rng);

}  // namespace iconlab
