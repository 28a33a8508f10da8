#pragma once

#include <memory>
#include <utility>

#include "manifp/generator.hpp"

namespace manifp {

/**
 * Explicit time-stepping configuration. dt = 0 selects the automatic step
 * cfl_safety * min(dtheta^2, sin^2(theta_min) dphi^2) / max(D11, D22, 1e-12),
 * further reduced by an advective bound and the explicit stability ceiling
 * so the automatic step is always stable. An explicit dt is validated against
 * the stability ceiling and rejected with CflViolation beyond it.
 */
struct SolverConfig {
    double dt = 0.0;          // 0 = automatic
    double cfl_safety = 0.25; // fraction of the diffusive limit for auto dt
    double t_final = 0.0;
    std::vector<double> snapshot_times; // must lie in [0, t_final]
};

struct EvolveStats {
    long steps = 0;
    long clip_events = 0;      // cells clipped over the run
    double clip_mass = 0.0;    // total negative mass removed
    double final_mass = 0.0;
    double dt = 0.0;
    std::vector<std::pair<double, double>> mass_trace; // (t, mass) checkpoints
    std::vector<std::pair<double, double>> clip_trace; // (t, cumulative clip mass)
    std::vector<std::pair<double, DensityGrid>> snapshots;
};

/**
 * Precompiled conservative right-hand side for one (grid shape, SDE spec)
 * pair. Both conventions discretize a flux divergence: face fluxes telescope,
 * so the cell-weighted sum of the output vanishes to rounding and total mass
 * is conserved exactly. Pole faces carry zero flux (the area factor vanishes
 * there); the azimuthal direction is periodic.
 *
 * Constant-coefficient specs without cross-leg noise compile to a 5-point
 * stencil with per-row coefficients; everything else uses the general
 * face-flux kernel. Evaluation is parallelized over rows; results are
 * independent of the thread count.
 */
class CompiledRhs {
public:
    CompiledRhs(const DensityGrid& shape, const SdeSpec& spec);
    ~CompiledRhs();
    CompiledRhs(CompiledRhs&&) noexcept;
    CompiledRhs& operator=(CompiledRhs&&) noexcept;

    void eval(const double* p, double* out);
    bool stencil_mode() const;
    double suggested_dt(double cfl_safety) const;
    /// Largest dt accepted before CflViolation.
    double stability_ceiling() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

/// One-shot right-hand side in the Stratonovich flux form.
DensityGrid fp_rhs_strat(const DensityGrid& p, const SdeSpec& spec);

/// One-shot right-hand side in the Ito form (outer divergence of the inner
/// tensor-divergence field).
DensityGrid fp_rhs_ito(const DensityGrid& p, const SdeSpec& spec);

/// Serial reference implementation of the same discretization, written as
/// plain per-face loops over the field closures. Kept independent of the
/// compiled kernels for testing and benchmarking.
DensityGrid fp_rhs_reference(const DensityGrid& p, const SdeSpec& spec);

/// Pointwise right-hand side at a chart point from a closed-form density,
/// using analytic (or finite-difference) jets instead of the grid.
double fp_rhs_at(const Chart& chart, const SdeSpec& spec, const ScalarField& p, ChartPoint x);

/// Automatic stable step for this grid/spec pair.
double auto_dt(const DensityGrid& shape, const SdeSpec& spec, double cfl_safety);

/// One RK4 step with clipping; returns clip statistics through stats.
void step(DensityGrid& p, CompiledRhs& rhs, double dt, double target_mass, EvolveStats& stats);

/// Evolve to config.t_final with RK4, clipping negatives and renormalizing to
/// the initial mass. Throws NonFiniteDensity on blow-up, CflViolation when an
/// explicit dt exceeds the stability ceiling.
EvolveStats evolve(DensityGrid& p, const SdeSpec& spec, const SolverConfig& config);

} // namespace manifp
