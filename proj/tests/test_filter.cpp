#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "manifp/bayes_filter.hpp"
#include "oracles.hpp"
#include "test_fields.hpp"

using namespace manifp;

namespace {

const Chart kSphereChart{};

std::array<double, 3> dir(double theta, double phi) { return embed(ChartPoint{theta, phi}); }

DensityGrid uniform_prior(int nt, int np) { return build_grid(kSphereChart, nt, np); }

SdeSpec scaled_brownian(double s) {
    SdeSpec spec;
    spec.convention = Convention::Ito;
    spec.drift = FieldSpec::constant(0.0, 0.0);
    spec.sigmas = {FieldSpec::constant(s, 0.0), FieldSpec::constant(0.0, s)};
    return spec;
}

double max_rel_gap(const DensityGrid& a, const DensityGrid& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        const double scale = std::max({std::abs(a.v[i]), std::abs(b.v[i]), 1e-30});
        worst = std::max(worst, std::abs(a.v[i] - b.v[i]) / scale);
    }
    return worst;
}

} // namespace

TEST_CASE("directional density normalizes and matches the north-pole closed form") {
    const ScalarField f = vmf_density(5.0, dir(0.0, 0.0));
    DensityGrid g = sample_field(uniform_prior(64, 128), f);
    CHECK(std::abs(mass(g) - 1.0) <= 2e-3);
    for (double t : {0.2, 1.0, 2.4}) {
        CHECK(f(t, 0.7) == doctest::Approx(oracle::vmf_bump(5.0, t)).epsilon(1e-12));
    }

    // overflow-safe at extreme concentration: finite at the mode, zero far away
    const ScalarField sharp = vmf_density(5000.0, dir(1.0, 1.0));
    CHECK(std::isfinite(sharp(1.0, 1.0)));
    CHECK(sharp(1.0, 1.0) > 0.0);
    CHECK(sharp(kPi - 0.2, 4.0) == 0.0);

    CHECK_THROWS_AS((void)vmf_density(0.0, dir(0.0, 0.0)), ConfigError);
    CHECK_THROWS_AS((void)vmf_density(1.0, {0.0, 0.0, 2.0}), ConfigError);
    CHECK_THROWS_AS((void)LikelihoodSpec::directional(-1.0, dir(0.0, 0.0)), ConfigError);
    CHECK_THROWS_AS((void)LikelihoodSpec::directional(1.0, {0.3, 0.0, 0.0}), ConfigError);
}

TEST_CASE("a flat likelihood leaves the belief unchanged") {
    DensityGrid p = sample_field(uniform_prior(32, 64), testf::wavy());
    for (auto& x : p.v) x += 1.1;
    normalize(p);
    const FilterState prior{p, 0.4};

    const FilterState post = update(prior, LikelihoodSpec::from_function([](ChartPoint) {
        return 0.37;
    }));
    CHECK(max_rel_gap(post.density, prior.density) <= 1e-14);
    CHECK(post.t == prior.t);

    // kappa = 0 is the flat directional likelihood
    const FilterState post0 = update(prior, LikelihoodSpec::directional(0.0, dir(1.0, 2.0)));
    CHECK(max_rel_gap(post0.density, prior.density) <= 1e-14);
}

TEST_CASE("updating a uniform prior reproduces the directional density") {
    const std::array<double, 3> z = dir(1.1, 0.7);
    const FilterState prior{uniform_prior(48, 96), 0.0};
    const FilterState post = update(prior, LikelihoodSpec::directional(10.0, z));

    DensityGrid ref = sample_field(prior.density, vmf_density(10.0, z));
    normalize(ref);
    CHECK(max_rel_gap(post.density, ref) <= 1e-12);
}

TEST_CASE("two equal updates compose into one with doubled concentration") {
    const std::array<double, 3> z = dir(0.9, 3.1);
    DensityGrid p = sample_field(uniform_prior(32, 64), testf::wavy());
    for (auto& x : p.v) x += 1.2;
    normalize(p);
    const FilterState prior{p, 0.0};
    const LikelihoodSpec lk = LikelihoodSpec::directional(4.0, z);
    const FilterState twice = update(update(prior, lk), lk);
    const FilterState once = update(prior, LikelihoodSpec::directional(8.0, z));
    CHECK(max_rel_gap(twice.density, once.density) <= 1e-12);
}

TEST_CASE("updates commute") {
    DensityGrid p = sample_field(uniform_prior(32, 64), testf::wavy());
    for (auto& x : p.v) x += 1.2;
    normalize(p);
    const FilterState prior{p, 0.0};
    const LikelihoodSpec a = LikelihoodSpec::directional(6.0, dir(0.8, 0.3));
    const LikelihoodSpec b = LikelihoodSpec::directional(3.0, dir(2.0, 4.4));
    const FilterState ab = update(update(prior, a), b);
    const FilterState ba = update(update(prior, b), a);
    CHECK(max_rel_gap(ab.density, ba.density) <= 1e-12);
}

TEST_CASE("the update is bayes' rule pointwise") {
    DensityGrid p = sample_field(uniform_prior(16, 32), testf::wavy());
    for (auto& x : p.v) x += 1.5;
    normalize(p);
    const LikelihoodSpec lk = LikelihoodSpec::directional(2.5, dir(1.3, 5.0));
    const FilterState post = update(FilterState{p, 0.0}, lk);

    detail::KahanSum norm;
    for (int j = 0; j < p.n_theta; ++j)
        for (int k = 0; k < p.n_phi; ++k) norm.add(p.at(j, k) * lk(p.point(j, k)) * p.w(j));
    for (int j = 0; j < p.n_theta; ++j) {
        for (int k = 0; k < p.n_phi; ++k) {
            const double expected = p.at(j, k) * lk(p.point(j, k)) / norm.get();
            CHECK(post.density.at(j, k) == doctest::Approx(expected).epsilon(1e-13));
        }
    }
    CHECK(std::abs(mass(post.density) - 1.0) <= 1e-14);
}

TEST_CASE("disjoint supports raise a degenerate update") {
    DensityGrid north = sample_field(uniform_prior(64, 128), vmf_density(400.0, dir(0.0, 0.0)));
    normalize(north);
    const LikelihoodSpec south = LikelihoodSpec::directional(500.0, dir(kPi, 0.0));
    CHECK_THROWS_AS((void)update(FilterState{north, 0.0}, south), DegenerateUpdate);
}

TEST_CASE("prediction over zero time is the identity and reports no renormalization") {
    DensityGrid p = sample_field(uniform_prior(32, 64), testf::wavy());
    for (auto& x : p.v) x += 1.0;
    normalize(p);
    double rlog = 1.0;
    const FilterState out = predict(FilterState{p, 0.7}, scaled_brownian(0.5), 0.0,
                                    SolverConfig{}, &rlog);
    CHECK(out.t == doctest::Approx(0.7).epsilon(1e-15));
    CHECK(max_rel_gap(out.density, p) <= 1e-14);
    CHECK(std::abs(rlog) <= 1e-14);

    CHECK_THROWS_AS((void)predict(FilterState{p, 0.0}, scaled_brownian(0.5), -0.1,
                                  SolverConfig{}),
                    ConfigError);
}

TEST_CASE("prediction diffuses the belief toward uniform") {
    DensityGrid p = sample_field(uniform_prior(32, 64), vmf_density(8.0, dir(1.0, 2.0)));
    normalize(p);
    FilterState s{p, 0.0};
    double h_prev = entropy(s.density);
    double r_prev = norm3(resultant(s.density));
    for (int k = 0; k < 3; ++k) {
        double rlog = 0.0;
        s = predict(s, scaled_brownian(0.6), 0.2, SolverConfig{}, &rlog);
        const double h = entropy(s.density);
        const double r = norm3(resultant(s.density));
        CHECK(h > h_prev);
        CHECK(r < r_prev);
        CHECK(std::abs(mass(s.density) - 1.0) <= 1e-12);
        CHECK(std::abs(rlog) <= 1e-6);
        h_prev = h;
        r_prev = r;
    }
    CHECK(s.t == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("pure rotation advects the belief without spreading its direction") {
    // rigid rotation about the polar axis: chart rate dphi/dt = 1, so the
    // frame component is sin(theta)
    SdeSpec rot;
    rot.convention = Convention::Ito;
    rot.drift = FieldSpec{ScalarField::constant(0.0), testf::sin_theta()};

    DensityGrid p = sample_field(uniform_prior(32, 64), vmf_density(10.0, dir(0.5 * kPi, 1.0)));
    normalize(p);
    const FilterState out = predict(FilterState{p, 0.0}, rot, 0.5, SolverConfig{});

    const std::array<double, 3> expect = dir(0.5 * kPi, 1.5);
    CHECK(direction_angle(resultant(out.density), expect) <= 0.03);
    // the resultant length is nearly preserved by a rigid rotation
    CHECK(norm3(resultant(out.density)) >=
          0.97 * norm3(resultant(p)));
}

TEST_CASE("the filter loop is prediction when every likelihood is flat") {
    DensityGrid prior = sample_field(uniform_prior(32, 64), vmf_density(6.0, dir(0.9, 0.4)));
    normalize(prior);
    const SdeSpec spec = scaled_brownian(0.6);

    MeasurementSchedule flat;
    flat.emplace_back(0.1, LikelihoodSpec::directional(0.0, dir(0.0, 0.0)));
    flat.emplace_back(0.3, LikelihoodSpec::directional(0.0, dir(0.0, 0.0)));
    const auto snaps = run_filter(prior, spec, flat, SolverConfig{});
    REQUIRE(snaps.size() == 2);
    CHECK(snaps[0].t == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(snaps[1].t == doctest::Approx(0.3).epsilon(1e-15));

    FilterState manual{prior, 0.0};
    manual = predict(manual, spec, 0.1, SolverConfig{});
    CHECK(max_rel_gap(snaps[0].posterior, manual.density) <= 1e-12);
    manual = predict(manual, spec, 0.2, SolverConfig{});
    CHECK(max_rel_gap(snaps[1].posterior, manual.density) <= 1e-12);
}

TEST_CASE("filter schedules must be ordered and may be empty") {
    const DensityGrid prior = uniform_prior(16, 32);
    const SdeSpec spec = scaled_brownian(0.5);
    CHECK(run_filter(prior, spec, MeasurementSchedule{}, SolverConfig{}).empty());

    MeasurementSchedule bad;
    bad.emplace_back(0.3, LikelihoodSpec::directional(1.0, dir(0.0, 0.0)));
    bad.emplace_back(0.1, LikelihoodSpec::directional(1.0, dir(0.0, 0.0)));
    CHECK_THROWS_AS((void)run_filter(prior, spec, bad, SolverConfig{}), ConfigError);

    // repeated measurement times are a valid burst
    MeasurementSchedule burst;
    burst.emplace_back(0.1, LikelihoodSpec::directional(2.0, dir(1.0, 1.0)));
    burst.emplace_back(0.1, LikelihoodSpec::directional(2.0, dir(1.0, 1.0)));
    const auto snaps = run_filter(prior, spec, burst, SolverConfig{});
    CHECK(snaps.size() == 2);
    const FilterState once = update(
        update(predict(FilterState{prior, 0.0}, spec, 0.1, SolverConfig{}),
               LikelihoodSpec::directional(2.0, dir(1.0, 1.0))),
        LikelihoodSpec::directional(2.0, dir(1.0, 1.0)));
    CHECK(max_rel_gap(snaps[1].posterior, once.density) <= 1e-12);
}

TEST_CASE("repeated agreeing measurements sharpen the belief") {
    DensityGrid prior = uniform_prior(32, 64);
    const SdeSpec spec = scaled_brownian(0.3);
    const std::array<double, 3> z = dir(1.2, 0.9);

    MeasurementSchedule sched;
    for (int i = 1; i <= 4; ++i) {
        sched.emplace_back(0.05 * i, LikelihoodSpec::directional(6.0, z));
    }
    const auto snaps = run_filter(prior, spec, sched, SolverConfig{});
    REQUIRE(snaps.size() == 4);
    double r_prev = 0.0;
    for (const auto& s : snaps) {
        CHECK(std::abs(mass(s.posterior) - 1.0) <= 1e-9);
        const double r = norm3(resultant(s.posterior));
        CHECK(r > r_prev);
        r_prev = r;
        CHECK(direction_angle(resultant(s.posterior), z) <= 0.05);
    }
}

TEST_CASE("particle filter with flat likelihoods is plain ensemble propagation") {
    const DensityGrid shape = uniform_prior(16, 32);
    const SdeSpec spec = scaled_brownian(0.5);
    MeasurementSchedule flat;
    flat.emplace_back(0.125, LikelihoodSpec::directional(0.0, dir(0.0, 0.0)));

    PfConfig cfg;
    cfg.n_particles = 5000;
    cfg.sim_dt = 1.0 / 64.0;
    cfg.seed = 2718;
    const auto snaps = particle_filter_oracle(shape, spec, flat, InitSpec::uniform(), cfg);
    REQUIRE(snaps.size() == 1);

    const NoiseStream stream(cfg.seed);
    PathEnsemble ens = init_ensemble(kSphereChart, cfg.n_particles, InitSpec::uniform(), stream);
    advance_ensemble(ens, kSphereChart, spec, stream, cfg.sim_dt, 0.125);
    const DensityGrid ref = density_from_ensemble(ens, shape);
    CHECK(l1_distance(snaps[0].posterior, ref) <= 1e-14);
}

TEST_CASE("an extreme likelihood collapses the particle weights") {
    const DensityGrid shape = uniform_prior(16, 32);
    MeasurementSchedule sched;
    sched.emplace_back(0.01, LikelihoodSpec::directional(5000.0, dir(1.0, 1.0)));
    PfConfig cfg;
    cfg.n_particles = 1000;
    cfg.sim_dt = 1e-2;
    cfg.seed = 11;
    CHECK_THROWS_AS(
        (void)particle_filter_oracle(shape, scaled_brownian(0.4), sched, InitSpec::uniform(), cfg),
        WeightCollapse);
}

TEST_CASE("grid filter and particle filter agree on a measurement scenario") {
    const int nt = 32, np = 64;
    const SdeSpec spec = scaled_brownian(0.6);
    MeasurementSchedule sched;
    sched.emplace_back(0.15, LikelihoodSpec::directional(8.0, dir(1.0, 0.8)));
    sched.emplace_back(0.30, LikelihoodSpec::directional(8.0, dir(1.15, 1.0)));

    const DensityGrid prior = uniform_prior(nt, np);
    const auto grid_snaps = run_filter(prior, spec, sched, SolverConfig{});

    PfConfig cfg;
    cfg.n_particles = 20000;
    cfg.sim_dt = 1e-3;
    cfg.seed = 90210;
    const auto pf_snaps =
        particle_filter_oracle(prior, spec, sched, InitSpec::uniform(), cfg);

    REQUIRE(grid_snaps.size() == pf_snaps.size());
    for (std::size_t i = 0; i < grid_snaps.size(); ++i) {
        const DensityGrid cg = coarsen(grid_snaps[i].posterior, 8, 16);
        const DensityGrid cp = coarsen(pf_snaps[i].posterior, 8, 16);
        CHECK(l1_distance(cg, cp) <= 0.1);
        CHECK(direction_angle(resultant(grid_snaps[i].posterior),
                              resultant(pf_snaps[i].posterior)) <= 3.0 * kPi / 180.0);
    }
}
