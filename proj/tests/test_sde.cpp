#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdint>

#include "manifp/fpe_solver.hpp"
#include "manifp/sde_sim.hpp"
#include "oracles.hpp"
#include "test_fields.hpp"

using namespace manifp;

namespace {

const Chart kSphereChart{};
const Chart kTorusChart{ChartKind::Torus};

SdeSpec brownian_ito() { return brownian_spec(kSphereChart, Convention::Ito); }

SdeSpec drift_only(double c1, double c2, Convention conv = Convention::Ito) {
    SdeSpec s;
    s.convention = conv;
    s.drift = FieldSpec::constant(c1, c2);
    return s;
}

} // namespace

TEST_CASE("noise stream is a pure function of its counters") {
    const NoiseStream a(42), b(42), c(43);
    CHECK(a.normal(7, 11, 0) == b.normal(7, 11, 0));
    CHECK(a.uniform(7, 11, 0) == b.uniform(7, 11, 0));
    CHECK(a.normal(7, 11, 0) != c.normal(7, 11, 0));
    CHECK(a.normal(7, 11, 0) != a.normal(8, 11, 0));
    CHECK(a.normal(7, 11, 0) != a.normal(7, 12, 0));
    CHECK(a.normal(7, 11, 0) != a.normal(7, 11, 2));

    // uniforms stay strictly inside (0, 1) so log() is safe
    for (std::uint64_t p = 0; p < 64; ++p) {
        for (std::uint64_t s = 0; s < 16; ++s) {
            const double u = a.uniform(p, s, 0);
            CHECK(u > 0.0);
            CHECK(u < 1.0);
        }
    }

    // channels 2k and 2k+1 share one Box-Muller draw: the squared radius
    // recovers the first uniform of the pair
    for (std::uint64_t p = 0; p < 32; ++p) {
        const double n0 = a.normal(p, 3, 0);
        const double n1 = a.normal(p, 3, 1);
        const double r2 = -2.0 * std::log(a.uniform(p, 3, 0));
        CHECK(n0 * n0 + n1 * n1 == doctest::Approx(r2).epsilon(1e-12));
        const double n2 = a.normal(p, 3, 2);
        const double n3 = a.normal(p, 3, 3);
        const double r2b = -2.0 * std::log(a.uniform(p, 3, 2));
        CHECK(n2 * n2 + n3 * n3 == doctest::Approx(r2b).epsilon(1e-12));
    }

    // the init-step counter is disjoint from any advance counter
    CHECK(a.normal(0, NoiseStream::kInitStep, 0) != a.normal(0, 0, 0));
}

TEST_CASE("normal deviates carry unit moments") {
    const NoiseStream s(2024);
    const int n = 100000;
    double m1 = 0.0, m2 = 0.0, m4 = 0.0;
    for (int i = 0; i < n; ++i) {
        const double x = s.normal(static_cast<std::uint64_t>(i), 5, 0);
        m1 += x;
        m2 += x * x;
        m4 += x * x * x * x;
    }
    m1 /= n;
    m2 /= n;
    m4 /= n;
    CHECK(std::abs(m1) <= 4.0 / std::sqrt(static_cast<double>(n)));
    CHECK(std::abs(m2 - 1.0) <= 4.0 * std::sqrt(2.0 / n));
    CHECK(std::abs(m4 - 3.0) <= 4.0 * std::sqrt(96.0 / n));
}

TEST_CASE("drift-free noise-free steps leave the state unchanged") {
    SdeSpec ito = drift_only(0.0, 0.0, Convention::Ito);
    SdeSpec strat = drift_only(0.0, 0.0, Convention::Stratonovich);
    for (ChartPoint x : {ChartPoint{0.7, 1.1}, ChartPoint{2.3, 5.9}}) {
        const ChartPoint a = step_ito_em(kSphereChart, x, ito, 0.25, nullptr, 0);
        CHECK(a.theta == x.theta);
        CHECK(a.phi == x.phi);
        const ChartPoint b = step_strat_heun(kSphereChart, x, strat, 0.25, nullptr, 0);
        CHECK(b.theta == x.theta);
        CHECK(b.phi == x.phi);
    }
}

TEST_CASE("azimuthal drift advances phi through the coframe factor") {
    const SdeSpec spec = drift_only(0.0, 1.0);
    const ChartPoint eq = step_ito_em(kSphereChart, {0.5 * kPi, 0.0}, spec, 0.1, nullptr, 0);
    CHECK(eq.theta == doctest::Approx(0.5 * kPi).epsilon(1e-15));
    CHECK(eq.phi == doctest::Approx(0.1).epsilon(1e-15));

    const double th = kPi / 3.0;
    const ChartPoint mid = step_ito_em(kSphereChart, {th, 2.0}, spec, 0.1, nullptr, 0);
    CHECK(mid.theta == doctest::Approx(th).epsilon(1e-15));
    CHECK(mid.phi == doctest::Approx(2.0 + 0.1 / std::sin(th)).epsilon(1e-14));

    // on the torus the frame is the coordinate basis
    const ChartPoint tor = step_ito_em(kTorusChart, {1.0, 2.0}, spec, 0.1, nullptr, 0);
    CHECK(tor.theta == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(tor.phi == doctest::Approx(2.1).epsilon(1e-14));
}

TEST_CASE("a pole crossing reflects the chart point and counts once") {
    const SdeSpec spec = drift_only(-1.5, 0.0);
    int refl = 0;
    const ChartPoint out = step_ito_em(kSphereChart, {0.1, 1.0}, spec, 0.1, nullptr, 0, &refl);
    CHECK(out.theta == doctest::Approx(0.05).epsilon(1e-13));
    CHECK(out.phi == doctest::Approx(1.0 + kPi).epsilon(1e-13));
    CHECK(refl == 1);

    // the predictor pass of the heun step does not double-count
    const SdeSpec sspec = drift_only(-1.5, 0.0, Convention::Stratonovich);
    refl = 0;
    const ChartPoint hout =
        step_strat_heun(kSphereChart, {0.1, 1.0}, sspec, 0.1, nullptr, 0, &refl);
    CHECK(hout.theta == doctest::Approx(0.05).epsilon(1e-13));
    CHECK(hout.phi == doctest::Approx(1.0 + kPi).epsilon(1e-13));
    CHECK(refl == 1);

    // south pole side
    refl = 0;
    const ChartPoint so =
        step_ito_em(kSphereChart, {kPi - 0.1, 0.3}, drift_only(1.5, 0.0), 0.1, nullptr, 0, &refl);
    CHECK(so.theta == doctest::Approx(kPi - 0.05).epsilon(1e-13));
    CHECK(refl == 1);
}

TEST_CASE("oversized colatitude increments subdivide exactly for constant legs") {
    SdeSpec spec;
    spec.convention = Convention::Ito;
    spec.drift = FieldSpec::constant(0.0, 0.0);
    spec.sigmas = {FieldSpec::constant(1.0, 0.0)};
    const double dw = 2.0;
    int refl = 0;
    const ChartPoint out = step_ito_em(kSphereChart, {0.5, 1.0}, spec, 1e-4, &dw, 1, &refl);
    CHECK(out.theta == doctest::Approx(2.5).epsilon(1e-13));
    CHECK(out.phi == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(refl == 0);

    SdeSpec bad = drift_only(std::numeric_limits<double>::quiet_NaN(), 0.0);
    CHECK_THROWS_AS((void)step_ito_em(kSphereChart, {1.0, 1.0}, bad, 0.1, nullptr, 0),
                    NonFiniteState);
}

TEST_CASE("steppers reject the mismatched convention") {
    const double dw = 0.1;
    SdeSpec ito = brownian_ito();
    SdeSpec strat = brownian_spec(kSphereChart, Convention::Stratonovich);
    CHECK_THROWS_AS((void)step_ito_em(kSphereChart, {1.0, 0.0}, strat, 0.01, &dw, 1),
                    ConventionMismatch);
    CHECK_THROWS_AS((void)step_strat_heun(kSphereChart, {1.0, 0.0}, ito, 0.01, &dw, 1),
                    ConventionMismatch);
}

TEST_CASE("heun and euler-maruyama coincide for constant coefficients on the torus") {
    SdeSpec ito;
    ito.convention = Convention::Ito;
    ito.drift = FieldSpec::constant(0.2, -0.4);
    ito.sigmas = {FieldSpec::constant(0.7, 0.1), FieldSpec::constant(-0.2, 0.5)};
    SdeSpec strat = ito;
    strat.convention = Convention::Stratonovich;

    const NoiseStream stream(99);
    ChartPoint a{1.0, 2.0}, b{1.0, 2.0};
    for (std::uint64_t s = 0; s < 50; ++s) {
        double dw[2];
        for (std::uint64_t i = 0; i < 2; ++i) {
            dw[i] = std::sqrt(0.01) * stream.normal(0, s, i);
        }
        a = step_ito_em(kTorusChart, a, ito, 0.01, dw, 2);
        b = step_strat_heun(kTorusChart, b, strat, 0.01, dw, 2);
        CHECK(a.theta == b.theta);
        CHECK(a.phi == b.phi);
    }
}

TEST_CASE("two half advances replay the one-shot trajectory bit for bit") {
    const SdeSpec spec = brownian_ito();
    const NoiseStream stream(7);
    const InitSpec init = InitSpec::uniform();

    PathEnsemble split = init_ensemble(kSphereChart, 50, init, stream);
    advance_ensemble(split, kSphereChart, spec, stream, 0.0625, 0.5);
    CHECK(split.noise_cursor == 8);
    advance_ensemble(split, kSphereChart, spec, stream, 0.0625, 0.5);
    CHECK(split.noise_cursor == 16);
    CHECK(split.t == doctest::Approx(1.0).epsilon(1e-15));

    PathEnsemble whole = init_ensemble(kSphereChart, 50, init, stream);
    advance_ensemble(whole, kSphereChart, spec, stream, 0.0625, 1.0);
    CHECK(whole.noise_cursor == 16);

    for (std::size_t p = 0; p < split.particles.size(); ++p) {
        CHECK(split.particles[p].theta == whole.particles[p].theta);
        CHECK(split.particles[p].phi == whole.particles[p].phi);
        CHECK(split.reflections[p] == whole.reflections[p]);
    }
}

TEST_CASE("ensemble advance equals a hand-rolled loop in reverse order") {
    const SdeSpec spec = brownian_ito();
    const NoiseStream stream(123);
    const int n = 64;
    const double dt = 1.0 / 32.0;
    const long nsteps = 10;

    PathEnsemble ens = init_ensemble(kSphereChart, n, InitSpec::uniform(), stream);
    const PathEnsemble start = ens;
    advance_ensemble(ens, kSphereChart, spec, stream, dt, nsteps * dt);

    for (int p = n - 1; p >= 0; --p) {
        ChartPoint x = start.particles[static_cast<std::size_t>(p)];
        int refl = 0;
        for (long s = 0; s < nsteps; ++s) {
            double dw[2];
            for (std::uint64_t i = 0; i < 2; ++i) {
                dw[i] = std::sqrt(dt) * stream.normal(static_cast<std::uint64_t>(p),
                                                      static_cast<std::uint64_t>(s), i);
            }
            x = step_ito_em(kSphereChart, x, spec, dt, dw, 2, &refl);
        }
        CHECK(x.theta == ens.particles[static_cast<std::size_t>(p)].theta);
        CHECK(x.phi == ens.particles[static_cast<std::size_t>(p)].phi);
        CHECK(refl == ens.reflections[static_cast<std::size_t>(p)]);
    }
}

TEST_CASE("point spread matches the moment oracles and contracts with dt") {
    const double theta0 = 0.25 * kPi;
    const double t_final = 0.5;
    const int n = 20000;
    const SdeSpec spec = brownian_ito();

    auto mean_err = [&](double dt, double& mc2_err) {
        SimConfig cfg;
        cfg.dt = dt;
        cfg.t_final = t_final;
        cfg.seed = 4242;
        const PathEnsemble ens = simulate_ensemble(kSphereChart, n, spec, cfg,
                                                   InitSpec::point_mass({theta0, 1.0}));
        double mc = 0.0, mc2 = 0.0;
        for (const ChartPoint& x : ens.particles) {
            const double c = std::cos(x.theta);
            mc += c;
            mc2 += c * c;
        }
        mc /= n;
        mc2 /= n;
        mc2_err = std::abs(mc2 - oracle::mean_cos2(theta0, t_final));
        return std::abs(mc - oracle::mean_cos(theta0, t_final));
    };

    // sd(cos theta_t) ~ 0.43, so 4 standard errors ~ 0.012 at n = 2e4
    const double se4 = 4.0 * 0.45 / std::sqrt(static_cast<double>(n));
    double mc2_err = 0.0;
    const double e1 = mean_err(0.01, mc2_err);
    CHECK(e1 <= 0.01 + se4);
    const double e3 = mean_err(0.0025, mc2_err);
    CHECK(e3 <= 0.0025 + se4);
    CHECK(mc2_err <= 0.0025 + se4);
}

TEST_CASE("repeated pole traffic stays finite and keeps unit mass") {
    SimConfig cfg;
    cfg.dt = 1e-3;
    cfg.t_final = 1.0;
    cfg.seed = 555;
    const PathEnsemble ens = simulate_ensemble(kSphereChart, 1000, brownian_ito(), cfg,
                                               InitSpec::point_mass({0.05, 0.0}));
    long total_refl = 0;
    for (std::size_t p = 0; p < ens.particles.size(); ++p) {
        CHECK(std::isfinite(ens.particles[p].theta));
        CHECK(std::isfinite(ens.particles[p].phi));
        CHECK(ens.particles[p].theta >= 0.0);
        CHECK(ens.particles[p].theta <= kPi);
        total_refl += ens.reflections[p];
    }
    CHECK(total_refl > 0);
    const DensityGrid h = density_from_ensemble(ens, build_grid(kSphereChart, 16, 32));
    CHECK(mass(h) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("histogram density integrates to one and spikes at a lone particle") {
    const DensityGrid shape = build_grid(kSphereChart, 16, 32);
    PathEnsemble one;
    one.particles = {ChartPoint{1.23, 4.56}};
    one.reflections = {0};
    const DensityGrid h = density_from_ensemble(one, shape);
    CHECK(mass(h) == doctest::Approx(1.0).epsilon(1e-14));
    const int j = static_cast<int>(std::floor(1.23 / shape.d_theta));
    const int k = static_cast<int>(std::floor(4.56 / shape.d_phi + 0.5)) % shape.n_phi;
    CHECK(h.at(j, k) == doctest::Approx(1.0 / shape.w(j)).epsilon(1e-14));
    double sum = 0.0;
    for (double x : h.v) sum += (x != 0.0) ? 1.0 : 0.0;
    CHECK(sum == 1.0);

    PathEnsemble empty;
    CHECK_THROWS_AS((void)density_from_ensemble(empty, shape), ConfigError);
}

TEST_CASE("monte carlo histogram tracks the pde density on comparison bins") {
    const double t_final = 0.3;
    const ChartPoint x0{1.1, 0.7};
    DensityGrid p = sample_field(build_grid(kSphereChart, 32, 64), ScalarField([&](double t,
                                                                                   double ph) {
        const double c = std::sin(t) * std::sin(x0.theta) * std::cos(ph - x0.phi) +
                         std::cos(t) * std::cos(x0.theta);
        return oracle::vmf_bump(60.0, std::acos(std::min(1.0, std::max(-1.0, c))));
    }));
    normalize(p);

    // both sides start from the same gridded bump
    SimConfig cfg;
    cfg.dt = 5e-3;
    cfg.t_final = t_final;
    cfg.seed = 31337;
    const SdeSpec spec = brownian_ito();
    const PathEnsemble ens =
        simulate_ensemble(kSphereChart, 40000, spec, cfg, InitSpec::from_grid(p));

    SolverConfig scfg;
    scfg.t_final = t_final;
    (void)evolve(p, spec, scfg);

    const DensityGrid hist = density_from_ensemble(ens, build_grid(kSphereChart, 32, 64));
    CHECK(l1_distance(coarsen(hist, 8, 16), coarsen(p, 8, 16)) <= 0.08);
}

TEST_CASE("uniform initialization covers the sphere evenly") {
    const NoiseStream stream(9001);
    const PathEnsemble ens = init_ensemble(kSphereChart, 200000, InitSpec::uniform(), stream);
    const double n = static_cast<double>(ens.particles.size());
    double cap = 0.0, east = 0.0;
    for (const ChartPoint& x : ens.particles) {
        cap += (std::cos(x.theta) > 0.5) ? 1.0 : 0.0;
        east += (x.phi < kPi) ? 1.0 : 0.0;
    }
    CHECK(std::abs(cap / n - 0.25) <= 4.0 * std::sqrt(0.25 * 0.75 / n));
    CHECK(std::abs(east / n - 0.5) <= 4.0 * std::sqrt(0.25 / n));
}

TEST_CASE("grid initialization reproduces the stored density") {
    DensityGrid g = sample_field(build_grid(kSphereChart, 32, 64), ScalarField([](double t, double) {
        return oracle::vmf_bump(5.0, t);
    }));
    normalize(g);
    const NoiseStream stream(77);
    const PathEnsemble ens = init_ensemble(kSphereChart, 200000, InitSpec::from_grid(g), stream);
    const DensityGrid h = density_from_ensemble(ens, build_grid(kSphereChart, 32, 64));
    CHECK(l1_distance(coarsen(h, 8, 16), coarsen(g, 8, 16)) <= 0.05);

    DensityGrid zero = build_grid(kSphereChart, 8, 16);
    for (auto& x : zero.v) x = 0.0;
    CHECK_THROWS_AS((void)init_ensemble(kSphereChart, 10, InitSpec::from_grid(zero), stream),
                    ConfigError);
    CHECK_THROWS_AS((void)init_ensemble(kSphereChart, 10, InitSpec::from_grid(DensityGrid{}),
                                        stream),
                    ConfigError);
    CHECK_THROWS_AS((void)init_ensemble(kSphereChart, 0, InitSpec::uniform(), stream),
                    ConfigError);

    const PathEnsemble pt =
        init_ensemble(kSphereChart, 5, InitSpec::point_mass({1.0, 2.0}), stream);
    for (const ChartPoint& x : pt.particles) {
        CHECK(x.theta == 1.0);
        CHECK(x.phi == 2.0);
    }

    SdeSpec wide = brownian_ito();
    wide.sigmas.assign(9, FieldSpec::constant(0.1, 0.0));
    PathEnsemble e2 = init_ensemble(kSphereChart, 4, InitSpec::uniform(), stream);
    CHECK_THROWS_AS(advance_ensemble(e2, kSphereChart, wide, stream, 0.01, 0.1), ConfigError);
    CHECK_THROWS_AS(advance_ensemble(e2, kSphereChart, brownian_ito(), stream, 0.0, 0.1),
                    ConfigError);
    CHECK_THROWS_AS(advance_ensemble(e2, kSphereChart, brownian_ito(), stream, 0.01, -1.0),
                    ConfigError);
    const std::uint64_t cur = e2.noise_cursor;
    advance_ensemble(e2, kSphereChart, brownian_ito(), stream, 0.01, 0.0);
    CHECK(e2.noise_cursor == cur);
}
