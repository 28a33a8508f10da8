#pragma once

#include <array>
#include <utility>
#include <vector>

#include "manifp/fpe_solver.hpp"
#include "manifp/sde_sim.hpp"

namespace manifp {

/// Von Mises-Fisher density on the unit sphere with mean direction z and
/// concentration kappa, written in the overflow-safe form
/// kappa * exp(kappa (x.z - 1)) / (2 pi (1 - exp(-2 kappa))).
ScalarField vmf_density(double kappa, const std::array<double, 3>& z);

/**
 * Pointwise measurement likelihood. The built-in directional form is the
 * unnormalized exp(kappa (x.z - 1)), which stays in (0, 1] for any kappa and
 * never overflows; the posterior normalization constant absorbs the rest.
 */
struct LikelihoodSpec {
    double kappa = 0.0;
    std::array<double, 3> z{0.0, 0.0, 1.0};
    std::function<double(ChartPoint)> custom; // used when set

    /// Directional likelihood; requires |z| = 1 within 1e-9.
    static LikelihoodSpec directional(double kappa, const std::array<double, 3>& z);
    static LikelihoodSpec from_function(std::function<double(ChartPoint)> f);

    double operator()(ChartPoint x) const;
};

struct FilterState {
    DensityGrid density;
    double t = 0.0;
};

/**
 * Propagate the belief density through the forward equation for dt_total.
 * The result is renormalized to unit mass; the discarded log-constant (from
 * clipping and quadrature drift) is returned through renorm_log when given.
 */
FilterState predict(const FilterState& state, const SdeSpec& spec, double dt_total,
                    const SolverConfig& solver, double* renorm_log = nullptr);

/// Pointwise Bayes update: posterior = prior * likelihood / normalizer.
/// Throws DegenerateUpdate when the normalizer falls below 1e-300.
FilterState update(const FilterState& state, const LikelihoodSpec& lik);

struct FilterSnapshot {
    double t = 0.0;
    DensityGrid posterior;
};

using MeasurementSchedule = std::vector<std::pair<double, LikelihoodSpec>>;

/// Alternate predict/update through the schedule (times must be nondecreasing
/// and nonnegative). Returns the posterior right after each measurement.
std::vector<FilterSnapshot> run_filter(const DensityGrid& prior, const SdeSpec& spec,
                                       const MeasurementSchedule& schedule,
                                       const SolverConfig& solver);

struct PfConfig {
    int n_particles = 10000;
    double sim_dt = 1e-3;
    std::uint64_t seed = 0;
    double ess_floor = 10.0; // WeightCollapse below this effective sample size
};

/**
 * Bootstrap particle filter over the same measurement schedule, used as an
 * independent oracle for the grid filter: propagate paths with the convention
 * matched stepper, weight by the likelihood, resample systematically, and bin
 * onto the shape grid after every measurement.
 */
std::vector<FilterSnapshot> particle_filter_oracle(const DensityGrid& shape, const SdeSpec& spec,
                                                   const MeasurementSchedule& schedule,
                                                   const InitSpec& init, const PfConfig& config);

} // namespace manifp
