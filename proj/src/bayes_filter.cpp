#include "manifp/bayes_filter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace manifp {

namespace {

void require_unit(const std::array<double, 3>& z, const char* where) {
    const double n = norm3(z);
    if (std::abs(n - 1.0) > 1e-9) {
        throw ConfigError(std::string(where) + ": direction must be unit length, |z|=" +
                          std::to_string(n));
    }
}

double dot_embed(ChartPoint x, const std::array<double, 3>& z) {
    const auto e = embed(x);
    return e[0] * z[0] + e[1] * z[1] + e[2] * z[2];
}

} // namespace

ScalarField vmf_density(double kappa, const std::array<double, 3>& z) {
    require_unit(z, "vmf_density");
    if (!(kappa > 0.0)) {
        throw ConfigError("vmf_density requires kappa > 0");
    }
    const double norm = kappa / (kTwoPi * (1.0 - std::exp(-2.0 * kappa)));
    const std::array<double, 3> zz = z;
    return ScalarField([kappa, norm, zz](double t, double p) {
        return norm * std::exp(kappa * (dot_embed(ChartPoint{t, p}, zz) - 1.0));
    });
}

LikelihoodSpec LikelihoodSpec::directional(double kappa, const std::array<double, 3>& z) {
    require_unit(z, "LikelihoodSpec");
    if (!(kappa >= 0.0)) {
        throw ConfigError("likelihood concentration must be nonnegative");
    }
    LikelihoodSpec s;
    s.kappa = kappa;
    s.z = z;
    return s;
}

LikelihoodSpec LikelihoodSpec::from_function(std::function<double(ChartPoint)> f) {
    LikelihoodSpec s;
    s.custom = std::move(f);
    return s;
}

double LikelihoodSpec::operator()(ChartPoint x) const {
    if (custom) {
        return custom(x);
    }
    return std::exp(kappa * (dot_embed(x, z) - 1.0));
}

FilterState predict(const FilterState& state, const SdeSpec& spec, double dt_total,
                    const SolverConfig& solver, double* renorm_log) {
    if (dt_total < 0.0) {
        throw ConfigError("predict requires dt_total >= 0");
    }
    FilterState out;
    out.density = state.density;
    out.t = state.t + dt_total;
    if (dt_total > 0.0) {
        SolverConfig cfg = solver;
        cfg.t_final = dt_total;
        cfg.snapshot_times.clear();
        evolve(out.density, spec, cfg);
    }
    const double m = mass(out.density);
    if (!(m > 0.0) || !std::isfinite(m)) {
        throw NonFiniteDensity("predict produced non-normalizable density");
    }
    for (auto& x : out.density.v) {
        x /= m;
    }
    if (renorm_log != nullptr) {
        *renorm_log = std::log(m);
    }
    return out;
}

FilterState update(const FilterState& state, const LikelihoodSpec& lik) {
    FilterState out;
    out.t = state.t;
    out.density = state.density;
    for (int j = 0; j < out.density.n_theta; ++j) {
        for (int k = 0; k < out.density.n_phi; ++k) {
            out.density.at(j, k) *= lik(out.density.point(j, k));
        }
    }
    const double m = mass(out.density);
    if (!std::isfinite(m) || m <= 1e-300) {
        throw DegenerateUpdate("posterior normalizer " + std::to_string(m) +
                               " is not normalizable");
    }
    for (auto& x : out.density.v) {
        x /= m;
    }
    return out;
}

std::vector<FilterSnapshot> run_filter(const DensityGrid& prior, const SdeSpec& spec,
                                       const MeasurementSchedule& schedule,
                                       const SolverConfig& solver) {
    FilterState state{prior, 0.0};
    std::vector<FilterSnapshot> out;
    out.reserve(schedule.size());
    for (const auto& [tm, lik] : schedule) {
        if (tm < state.t - 1e-12) {
            throw ConfigError("measurement times must be nondecreasing");
        }
        state = predict(state, spec, std::max(0.0, tm - state.t), solver);
        state.t = tm;
        state = update(state, lik);
        out.push_back(FilterSnapshot{tm, state.density});
    }
    return out;
}

std::vector<FilterSnapshot> particle_filter_oracle(const DensityGrid& shape, const SdeSpec& spec,
                                                   const MeasurementSchedule& schedule,
                                                   const InitSpec& init, const PfConfig& config) {
    const NoiseStream stream(config.seed);
    const Chart& chart = shape.chart;
    PathEnsemble ens = init_ensemble(chart, config.n_particles, init, stream);
    const std::size_t n = ens.particles.size();
    std::vector<double> weights(n);
    std::vector<ChartPoint> resampled(n);
    std::vector<FilterSnapshot> out;
    out.reserve(schedule.size());

    std::uint64_t meas_index = 0;
    for (const auto& [tm, lik] : schedule) {
        if (tm < ens.t - 1e-12) {
            throw ConfigError("measurement times must be nondecreasing");
        }
        advance_ensemble(ens, chart, spec, stream, config.sim_dt, std::max(0.0, tm - ens.t));
        ens.t = tm;

        double wsum = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            weights[i] = lik(ens.particles[i]);
            wsum += weights[i];
        }
        if (!(wsum > 0.0) || !std::isfinite(wsum)) {
            throw DegenerateUpdate("particle weights sum to " + std::to_string(wsum));
        }
        double sq = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double wn = weights[i] / wsum;
            sq += wn * wn;
        }
        const double ess = 1.0 / sq;
        if (ess < config.ess_floor) {
            throw WeightCollapse("effective sample size " + std::to_string(ess) +
                                 " below floor " + std::to_string(config.ess_floor));
        }

        // Systematic resampling with a single stratified offset.
        const double u0 =
            stream.uniform(meas_index, NoiseStream::kResampleStep, 0) / static_cast<double>(n);
        double cum = 0.0;
        std::size_t i = 0;
        for (std::size_t s = 0; s < n; ++s) {
            const double target = (u0 + static_cast<double>(s) / static_cast<double>(n)) * wsum;
            while (cum + weights[i] < target && i + 1 < n) {
                cum += weights[i];
                ++i;
            }
            resampled[s] = ens.particles[i];
        }
        ens.particles = resampled;
        std::fill(ens.reflections.begin(), ens.reflections.end(), 0);

        out.push_back(FilterSnapshot{tm, density_from_ensemble(ens, shape)});
        ++meas_index;
    }
    return out;
}

} // namespace manifp
