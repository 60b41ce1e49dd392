#pragma once

#include "iconlab/prompt.hpp"
#include "iconlab/rde.hpp"

#include <json.hpp>

#include <span>
#include <vector>

namespace iconlab {

struct Identified {
    double gamma1 = 0.0;
    double gamma2 = 0.0;
    double condition = 0.0;  // 2-norm condition number of the design matrix
};

/// Least-squares fit of u'(t) = gamma1 c(t) u(t) + gamma2 over every point
/// with a centred stencil. Derivatives come from Lagrange weights on
/// `half_width` neighbours per side, so uneven spacing is fine. Throws
/// NumericalError when the design matrix condition number exceeds 1e10.
/// The estimate is then polished by Gauss-Newton against one RK4 step
/// between neighbouring points at the finest spacing, which recovers the
/// generator's coefficients to rounding on noiseless data.
Identified identify_parameters(std::span<const double> t, std::span<const double> c, std::span<const double> u,
                               int half_width = 2);
Identified identify_parameters(const Grid& grid, std::span<const double> c, std::span<const double> u,
                               int half_width = 2);

/// The 2x2 system through two points with known derivatives.
Identified identify_two_point(double c0, double u0, double du0, double c1, double u1, double du1);

/// Derivative at every point with a full centred stencil (NaN elsewhere).
std::vector<double> stencil_derivative(std::span<const double> t, std::span<const double> u, int half_width);

/// Piecewise-linear interpolation, constant beyond the end points.
std::vector<double> interpolate(std::span<const double> x, std::span<const double> y, std::span<const double> at);

/// ODE families: identify from demo `demo` and RK4-solve the question on the
/// family grid, read off at the query points.
std::vector<double> oracle_predict_ode(const FamilyConfig& config, const Prompt& prompt, int demo = 0);
Identified identify_from_demo(const Demo& demo, int half_width = 2);

enum class PosteriorKind { point_mass, manifold, empirical };
const char* posterior_kind_name(PosteriorKind k);

struct OracleOptions {
    int proposals = 20000;       // importance / rejection budget per prompt
    double min_acceptance = 1e-4;
    double epsilon = 1e-3;       // ABC tolerance, discrete L2 over demo QoIs
    bool abc = false;            // ODE families: ABC instead of identification
};

struct OracleResult {
    PosteriorKind kind = PosteriorKind::empirical;
    std::vector<std::vector<double>> params;   // one vector for a point mass
    std::vector<std::vector<double>> samples;  // n draws on the query grid
    double acceptance_rate = 1.0;
    bool in_prior_support = true;

    std::vector<double> mean() const;
    std::vector<double> stddev() const;
    nlohmann::json to_json() const;
};

/// Brute-force draws from the posterior predictive of the prompt's question.
/// Draws include fresh observation noise for noisy families. Throws
/// ToleranceError when the acceptance rate (or effective sample fraction)
/// falls below options.min_acceptance.
OracleResult mc_posterior_predictive(const FamilyConfig& config, const Prompt& prompt, int n, Rng& rng,
                                     const OracleOptions& options = {});

/// Closed-form predictive for the constant-offset family: per-point mean and
/// the (spatially constant) standard deviation, prior truncation included.
struct GaussianPredictive {
    std::vector<double> mean;
    double stddev = 0.0;
};
GaussianPredictive offset_predictive(const FamilyConfig& config, const Prompt& prompt);

struct OracleMetrics {
    double mean_relative_error = 0.0;
    std::vector<double> std_ratio;  // NaN where the oracle spread is zero
    double mean_std_ratio = 0.0;    // over points with nonzero oracle spread
    std::vector<double> w1;
    double mean_w1 = 0.0;

    nlohmann::json to_json() const;
};

/// 1-D Wasserstein-1 distance between two empirical sets.
double wasserstein1(std::vector<double> a, std::vector<double> b);

OracleMetrics compare_to_oracle(const std::vector<std::vector<double>>& samples, const OracleResult& oracle);
OracleMetrics compare_to_oracle(const std::vector<double>& prediction, const OracleResult& oracle);

}  // namespace iconlab
