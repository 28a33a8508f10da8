#pragma once

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "manifp/generator.hpp"
#include "manifp/grid.hpp"

namespace manifp {

/// Upper bound on simultaneous noise channels in the path steppers.
inline constexpr int kMaxChannels = 8;

/**
 * Counter-based noise source: every increment is a pure function of
 * (seed, particle, step, channel), so ensembles replay identically under any
 * execution order or thread count. Normal deviates come from Box-Muller over
 * two avalanche-mixed counters; channels are paired so each pair shares one
 * (u1, u2) draw.
 */
class NoiseStream {
public:
    explicit NoiseStream(std::uint64_t seed) : seed_(seed) {}

    /// Step index reserved for initial-state sampling.
    static constexpr std::uint64_t kInitStep = ~std::uint64_t(0);
    /// Step index base reserved for resampling draws.
    static constexpr std::uint64_t kResampleStep = ~std::uint64_t(0) - 1;

    double uniform(std::uint64_t particle, std::uint64_t step, std::uint64_t channel) const {
        return to_unit(hash(particle, step, channel));
    }

    double normal(std::uint64_t particle, std::uint64_t step, std::uint64_t channel) const {
        const std::uint64_t pair = channel >> 1;
        const double u1 = to_unit(hash(particle, step, 2 * pair));
        const double u2 = to_unit(hash(particle, step, 2 * pair + 1));
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = kTwoPi * u2;
        return (channel & 1) ? r * std::sin(a) : r * std::cos(a);
    }

    std::uint64_t seed() const { return seed_; }

private:
    static std::uint64_t mix(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ULL;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
        return x ^ (x >> 31);
    }

    std::uint64_t hash(std::uint64_t particle, std::uint64_t step, std::uint64_t channel) const {
        std::uint64_t h = mix(seed_ ^ 0x6A09E667F3BCC908ULL);
        h = mix(h ^ particle);
        h = mix(h ^ step);
        h = mix(h ^ channel);
        return h;
    }

    // Strictly inside (0, 1): safe under log().
    static double to_unit(std::uint64_t h) {
        return (static_cast<double>(h >> 11) + 0.5) * 0x1p-53;
    }

    std::uint64_t seed_;
};

/// Initial state description for ensemble simulation.
struct InitSpec {
    enum class Kind { Point, Uniform, Grid };
    Kind kind = Kind::Uniform;
    ChartPoint point;
    DensityGrid grid; // used when kind == Grid

    static InitSpec point_mass(ChartPoint p) {
        InitSpec s;
        s.kind = Kind::Point;
        s.point = p;
        return s;
    }
    static InitSpec uniform() { return InitSpec{}; }
    static InitSpec from_grid(DensityGrid g) {
        InitSpec s;
        s.kind = Kind::Grid;
        s.grid = std::move(g);
        return s;
    }
};

struct PathEnsemble {
    std::vector<ChartPoint> particles;
    std::vector<int> reflections; // pole reflection count per particle
    double t = 0.0;
    std::uint64_t noise_cursor = 0; // next unused step index in the stream
};

/**
 * One Euler-Maruyama step of the Ito SDE in chart coordinates. Coefficients
 * are frozen at the start point; the azimuthal coordinate rate carries the
 * coframe factor 1/sin(theta), and the coordinate drift carries the
 * connection correction -1/2 D^{ab} Gamma^c_ab dt (the generator's covariant
 * Hessian differs from plain coordinate derivatives by this term; for the
 * isotropic spec it is the familiar +1/2 cot(theta) dt colatitude drift).
 * Steps whose colatitude displacement exceeds pi/4 are subdivided (halving
 * dt and splitting the increments, up to 8 levels) before the antipodal pole
 * reflection is applied.
 */
ChartPoint step_ito_em(const Chart& chart, ChartPoint x, const SdeSpec& spec, double dt,
                       const double* dw, int m, int* reflections = nullptr);

/// Stratonovich-Heun predictor-corrector step: full Euler predictor, then the
/// coordinate increments are recomputed with coefficients (including the
/// coframe factor) averaged between the start and predicted points.
ChartPoint step_strat_heun(const Chart& chart, ChartPoint x, const SdeSpec& spec, double dt,
                           const double* dw, int m, int* reflections = nullptr);

struct SimConfig {
    double dt = 1e-3;
    double t_final = 0.0;
    std::uint64_t seed = 0;
};

/// Draw one initial state for the given particle from the stream's reserved
/// init counters.
ChartPoint sample_init(const Chart& chart, const InitSpec& init, const NoiseStream& stream,
                       std::uint64_t particle);

PathEnsemble init_ensemble(const Chart& chart, int n_particles, const InitSpec& init,
                           const NoiseStream& stream);

/// Advance every particle by t_add using the stepper matching the convention.
/// Particles are independent; the result does not depend on execution order.
void advance_ensemble(PathEnsemble& ens, const Chart& chart, const SdeSpec& spec,
                      const NoiseStream& stream, double dt, double t_add);

PathEnsemble simulate_ensemble(const Chart& chart, int n_particles, const SdeSpec& spec,
                               const SimConfig& config, const InitSpec& init);

/// Histogram density on the given grid shape: count/(N*w). Mass is exactly 1.
DensityGrid density_from_ensemble(const PathEnsemble& ens, const DensityGrid& shape);

} // namespace manifp
