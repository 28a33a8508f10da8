#include "manifp/sde_sim.hpp"

#include <algorithm>
#include <atomic>

namespace manifp {
namespace {

constexpr double kMaxThetaStep = kPi / 4.0;
constexpr int kMaxSubdivide = 8;

struct Rates {
    double d_theta;
    double d_phi;
};

// Coordinate increments from coefficients evaluated at x: frame components
// map to coordinate rates through the coframe (d_phi picks up 1/sin(theta)).
// With `geodesic` set (the Ito stepper), the coordinate drift additionally
// carries -1/2 D^{ab} Gamma^c_ab dt: the covariant Hessian of the generator
// differs from plain coordinate second derivatives by exactly this connection
// term, so the chart-level Euler-Maruyama drift must absorb it. On the sphere
// it evaluates to +1/2 cot(theta) sum_i (sigma_i^phi)^2 in the theta rate and
// -cot(theta) sum_i sigma_i^theta sigma_i^phi in the (frame) phi rate. The
// Heun stepper averages plain chart rates instead: Stratonovich calculus
// follows the chain rule, so its chart coefficients need no correction.
Rates em_increment(const Chart& chart, ChartPoint x, const SdeSpec& spec, double dt,
                   const double* dw, int m, bool geodesic) {
    const double s = chart.frame2(x.theta);
    const double conn = geodesic ? chart.conn(x.theta) : 0.0;
    double d1 = spec.drift.c1(x.theta, x.phi) * dt;
    double d2 = spec.drift.c2(x.theta, x.phi) * dt;
    for (int i = 0; i < m; ++i) {
        const FieldSpec& sg = spec.sigmas[static_cast<std::size_t>(i)];
        const double a = sg.c1(x.theta, x.phi);
        const double b = sg.c2(x.theta, x.phi);
        d1 += a * dw[i];
        d2 += b * dw[i];
        if (geodesic) {
            d1 += 0.5 * conn * b * b * dt;
            d2 -= conn * a * b * dt;
        }
    }
    return Rates{d1, d2 * s};
}

ChartPoint apply_increment(const Chart& chart, ChartPoint x, Rates r, int* reflections) {
    ChartPoint out{x.theta + r.d_theta, x.phi + r.d_phi};
    const bool crossed = chart.kind == ChartKind::Sphere &&
                         (out.theta < 0.0 || out.theta > kPi);
    if (crossed && reflections != nullptr) {
        ++*reflections;
    }
    return chart.wrap(out);
}

ChartPoint em_step_rec(const Chart& chart, ChartPoint x, const SdeSpec& spec, double dt,
                       const double* dw, int m, int level, int* reflections) {
    const Rates r = em_increment(chart, x, spec, dt, dw, m, true);
    if (std::abs(r.d_theta) > kMaxThetaStep && level < kMaxSubdivide) {
        double half[kMaxChannels];
        for (int i = 0; i < m; ++i) {
            half[i] = 0.5 * dw[i];
        }
        const ChartPoint mid =
            em_step_rec(chart, x, spec, 0.5 * dt, half, m, level + 1, reflections);
        return em_step_rec(chart, mid, spec, 0.5 * dt, half, m, level + 1, reflections);
    }
    if (!std::isfinite(r.d_theta) || !std::isfinite(r.d_phi)) {
        throw NonFiniteState("non-finite increment in Euler-Maruyama step");
    }
    return apply_increment(chart, x, r, reflections);
}

ChartPoint heun_step_rec(const Chart& chart, ChartPoint x, const SdeSpec& spec, double dt,
                         const double* dw, int m, int level, int* reflections) {
    const Rates r0 = em_increment(chart, x, spec, dt, dw, m, false);
    int pred_reflections = 0;
    const ChartPoint xp = apply_increment(chart, x, r0, &pred_reflections);
    const Rates r1 = em_increment(chart, xp, spec, dt, dw, m, false);
    const Rates r{0.5 * (r0.d_theta + r1.d_theta), 0.5 * (r0.d_phi + r1.d_phi)};
    if (std::abs(r.d_theta) > kMaxThetaStep && level < kMaxSubdivide) {
        double half[kMaxChannels];
        for (int i = 0; i < m; ++i) {
            half[i] = 0.5 * dw[i];
        }
        const ChartPoint mid =
            heun_step_rec(chart, x, spec, 0.5 * dt, half, m, level + 1, reflections);
        return heun_step_rec(chart, mid, spec, 0.5 * dt, half, m, level + 1, reflections);
    }
    if (!std::isfinite(r.d_theta) || !std::isfinite(r.d_phi)) {
        throw NonFiniteState("non-finite increment in Heun step");
    }
    return apply_increment(chart, x, r, reflections);
}

} // namespace

ChartPoint step_ito_em(const Chart& chart, ChartPoint x, const SdeSpec& spec, double dt,
                       const double* dw, int m, int* reflections) {
    require_convention(spec, Convention::Ito, "step_ito_em");
    return em_step_rec(chart, x, spec, dt, dw, m, 0, reflections);
}

ChartPoint step_strat_heun(const Chart& chart, ChartPoint x, const SdeSpec& spec, double dt,
                           const double* dw, int m, int* reflections) {
    require_convention(spec, Convention::Stratonovich, "step_strat_heun");
    return heun_step_rec(chart, x, spec, dt, dw, m, 0, reflections);
}

ChartPoint sample_init(const Chart& chart, const InitSpec& init, const NoiseStream& stream,
                       std::uint64_t particle) {
    switch (init.kind) {
    case InitSpec::Kind::Point:
        require_interior(chart, init.point, chart.wrap_clamp);
        return init.point;
    case InitSpec::Kind::Uniform: {
        const double u1 = stream.uniform(particle, NoiseStream::kInitStep, 0);
        const double u2 = stream.uniform(particle, NoiseStream::kInitStep, 1);
        if (chart.kind == ChartKind::Sphere) {
            return ChartPoint{std::acos(1.0 - 2.0 * u1), kTwoPi * u2};
        }
        return ChartPoint{kTwoPi * u1, kTwoPi * u2};
    }
    case InitSpec::Kind::Grid: {
        const DensityGrid& g = init.grid;
        if (g.v.empty()) {
            throw ConfigError("grid init requires a non-empty density grid");
        }
        const double u0 = stream.uniform(particle, NoiseStream::kInitStep, 0);
        // Inverse CDF over cell masses.
        double total = 0.0;
        for (int j = 0; j < g.n_theta; ++j) {
            for (int k = 0; k < g.n_phi; ++k) {
                total += std::max(0.0, g.at(j, k)) * g.w(j);
            }
        }
        if (total <= 0.0) {
            throw ConfigError("grid init requires positive total mass");
        }
        const double target = u0 * total;
        double acc = 0.0;
        int cj = g.n_theta - 1;
        int ck = g.n_phi - 1;
        bool found = false;
        for (int j = 0; j < g.n_theta && !found; ++j) {
            for (int k = 0; k < g.n_phi; ++k) {
                acc += std::max(0.0, g.at(j, k)) * g.w(j);
                if (acc >= target) {
                    cj = j;
                    ck = k;
                    found = true;
                    break;
                }
            }
        }
        const double u1 = stream.uniform(particle, NoiseStream::kInitStep, 1);
        const double u2 = stream.uniform(particle, NoiseStream::kInitStep, 2);
        const double ta = static_cast<double>(cj) * g.d_theta;
        const double tb = ta + g.d_theta;
        double theta;
        if (g.chart.kind == ChartKind::Sphere) {
            // Uniform w.r.t. area inside the cell: cos(theta) uniform on its range.
            const double ca = std::cos(ta);
            const double cb = std::cos(tb);
            theta = std::acos(ca + (cb - ca) * u1);
        } else {
            theta = ta + g.d_theta * u1;
        }
        const double phi = (static_cast<double>(ck) + u2 - 0.5) * g.d_phi;
        return g.chart.wrap(ChartPoint{theta, phi});
    }
    }
    throw ConfigError("unknown init kind");
}

PathEnsemble init_ensemble(const Chart& chart, int n_particles, const InitSpec& init,
                           const NoiseStream& stream) {
    if (n_particles <= 0) {
        throw ConfigError("ensemble size must be positive");
    }
    PathEnsemble ens;
    ens.particles.resize(static_cast<std::size_t>(n_particles));
    ens.reflections.assign(static_cast<std::size_t>(n_particles), 0);
    // sample_init is a pure function of (init, particle); drawing particle 0
    // here surfaces any configuration error before the parallel region, where
    // an escaping exception would terminate the process
    ens.particles[0] = sample_init(chart, init, stream, 0);
#pragma omp parallel for schedule(static)
    for (int p = 1; p < n_particles; ++p) {
        ens.particles[static_cast<std::size_t>(p)] =
            sample_init(chart, init, stream, static_cast<std::uint64_t>(p));
    }
    return ens;
}

void advance_ensemble(PathEnsemble& ens, const Chart& chart, const SdeSpec& spec,
                      const NoiseStream& stream, double dt, double t_add) {
    if (t_add < 0.0 || dt <= 0.0) {
        throw ConfigError("advance_ensemble requires dt > 0 and t_add >= 0");
    }
    if (t_add == 0.0) {
        return;
    }
    const int m = static_cast<int>(spec.sigmas.size());
    if (m > kMaxChannels) {
        throw ConfigError("too many noise channels");
    }
    const long nsteps = std::max(1L, static_cast<long>(std::ceil(t_add / dt - 1e-9)));
    const bool strat = spec.convention == Convention::Stratonovich;
    const std::uint64_t base = ens.noise_cursor;
    const int n = static_cast<int>(ens.particles.size());
    // exceptions must not escape the parallel region; trap and rethrow after
    std::atomic<bool> bad{false};
#pragma omp parallel for schedule(static)
    for (int p = 0; p < n; ++p) {
        if (bad.load(std::memory_order_relaxed)) continue;
        try {
            ChartPoint x = ens.particles[static_cast<std::size_t>(p)];
            int refl = ens.reflections[static_cast<std::size_t>(p)];
            double remaining = t_add;
            for (long s = 0; s < nsteps; ++s) {
                const double h = (s + 1 == nsteps) ? remaining : dt;
                remaining -= h;
                const double sqh = std::sqrt(h);
                double dw[kMaxChannels];
                for (int i = 0; i < m; ++i) {
                    dw[i] = sqh * stream.normal(static_cast<std::uint64_t>(p),
                                                base + static_cast<std::uint64_t>(s),
                                                static_cast<std::uint64_t>(i));
                }
                x = strat ? heun_step_rec(chart, x, spec, h, dw, m, 0, &refl)
                          : em_step_rec(chart, x, spec, h, dw, m, 0, &refl);
            }
            ens.particles[static_cast<std::size_t>(p)] = x;
            ens.reflections[static_cast<std::size_t>(p)] = refl;
        } catch (const Error&) {
            bad.store(true, std::memory_order_relaxed);
        }
    }
    if (bad.load()) {
        throw NonFiniteState("non-finite state while advancing the ensemble");
    }
    ens.noise_cursor = base + static_cast<std::uint64_t>(nsteps);
    ens.t += t_add;
}

PathEnsemble simulate_ensemble(const Chart& chart, int n_particles, const SdeSpec& spec,
                               const SimConfig& config, const InitSpec& init) {
    const NoiseStream stream(config.seed);
    PathEnsemble ens = init_ensemble(chart, n_particles, init, stream);
    advance_ensemble(ens, chart, spec, stream, config.dt, config.t_final);
    return ens;
}

DensityGrid density_from_ensemble(const PathEnsemble& ens, const DensityGrid& shape) {
    DensityGrid out = shape;
    std::fill(out.v.begin(), out.v.end(), 0.0);
    const int n = static_cast<int>(ens.particles.size());
    if (n == 0) {
        throw ConfigError("cannot bin an empty ensemble");
    }
    for (const ChartPoint& x : ens.particles) {
        int j = static_cast<int>(std::floor(x.theta / out.d_theta));
        j = std::clamp(j, 0, out.n_theta - 1);
        int k = static_cast<int>(std::floor(x.phi / out.d_phi + 0.5));
        k = ((k % out.n_phi) + out.n_phi) % out.n_phi;
        out.at(j, k) += 1.0;
    }
    for (int j = 0; j < out.n_theta; ++j) {
        const double scale = 1.0 / (static_cast<double>(n) * out.w(j));
        for (int k = 0; k < out.n_phi; ++k) {
            out.at(j, k) *= scale;
        }
    }
    return out;
}

} // namespace manifp
