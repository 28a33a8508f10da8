#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "manifp/generator.hpp"
#include "oracles.hpp"
#include "test_fields.hpp"

using namespace manifp;

namespace {

const Chart kSphere{};
const Chart kTorus{ChartKind::Torus};

std::vector<ChartPoint> random_points(const Chart& chart, int n, double margin = 0.15) {
    std::mt19937_64 rng(77031);
    std::uniform_real_distribution<double> ut(margin, chart.theta_extent() - margin);
    std::uniform_real_distribution<double> up(0.0, kTwoPi);
    std::vector<ChartPoint> pts;
    pts.reserve(n);
    for (int i = 0; i < n; ++i) pts.push_back({ut(rng), up(rng)});
    return pts;
}

SdeSpec generic_strat() {
    SdeSpec s;
    s.convention = Convention::Stratonovich;
    s.drift = FieldSpec::constant(0.3, 0.2);
    s.sigmas = {FieldSpec::constant(0.5, 0.0), FieldSpec::constant(0.0, 0.8)};
    return s;
}

} // namespace

TEST_CASE("brownian generator reduces to the laplacian eigenvalue on harmonics") {
    const ScalarField harmonics[] = {testf::cos_theta(), testf::sin_theta_cos_phi(),
                                     testf::sin_theta_sin_phi()};
    for (Convention conv : {Convention::Stratonovich, Convention::Ito}) {
        const SdeSpec spec = brownian_spec(kSphere, conv);
        double worst = 0.0;
        for (const auto& x : random_points(kSphere, 1000, 1e-3)) {
            for (const auto& f : harmonics) {
                worst = std::max(worst, std::abs(apply_generator(kSphere, spec, f, x) + f(x)));
            }
        }
        CHECK(worst <= 1e-10);
    }
}

TEST_CASE("constants are annihilated") {
    const ScalarField one = ScalarField::constant(1.0);
    const SdeSpec sstrat = generic_strat();
    const SdeSpec sito = strat_to_ito(kSphere, sstrat);
    for (const auto& x : random_points(kSphere, 100)) {
        CHECK(std::abs(apply_generator(kSphere, sstrat, one, x)) < 1e-15);
        CHECK(std::abs(apply_generator(kSphere, sito, one, x)) < 1e-15);
    }
}

TEST_CASE("the generator is linear") {
    const ScalarField f = testf::wavy();
    const ScalarField g = testf::cos_theta();
    const ScalarField combo = add_scaled_field(f, -1.7, g);
    const SdeSpec spec = generic_strat();
    for (const auto& x : random_points(kSphere, 200)) {
        const double lhs = apply_generator(kSphere, spec, combo, x);
        const double rhs = apply_generator(kSphere, spec, f, x) -
                           1.7 * apply_generator(kSphere, spec, g, x);
        CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
    }
}

TEST_CASE("convention conversion carries the cot(theta) correction") {
    const SdeSpec spec = generic_strat();
    const SdeSpec conv = strat_to_ito(kSphere, spec);
    CHECK(conv.convention == Convention::Ito);
    for (const auto& x : random_points(kSphere, 200)) {
        const double cot = std::cos(x.theta) / std::sin(x.theta);
        // only the phi-channel noise rotates the frame: correction is
        // -(1/2) (sigma^phi)^2 cot(theta) on the polar component
        const Vec2 d = conv.drift(x);
        CHECK(d.c1 == doctest::Approx(0.3 - 0.5 * 0.64 * cot).epsilon(1e-13));
        CHECK(d.c2 == doctest::Approx(0.2).epsilon(1e-15));
    }
}

TEST_CASE("both conventions produce the same generator") {
    const SdeSpec spec = generic_strat();
    const SdeSpec conv = strat_to_ito(kSphere, spec);
    const ScalarField f = testf::wavy();
    double worst = 0.0;
    for (const auto& x : random_points(kSphere, 1000, 1e-2)) {
        const double a = apply_generator(kSphere, spec, f, x);
        const double b = apply_generator(kSphere, conv, f, x);
        worst = std::max(worst, std::abs(a - b));
    }
    CHECK(worst <= 1e-10);
}

TEST_CASE("generator equivalence holds for position-dependent noise") {
    SdeSpec spec;
    spec.convention = Convention::Stratonovich;
    spec.drift = testf::wavy_vector();
    spec.sigmas = {testf::wavy_vector(), FieldSpec{testf::cos_theta(), testf::sin_theta()}};
    const SdeSpec conv = strat_to_ito(kSphere, spec);
    const ScalarField f = testf::wavy();
    for (const auto& x : random_points(kSphere, 300)) {
        const double a = apply_generator(kSphere, spec, f, x);
        const double b = apply_generator(kSphere, conv, f, x);
        CHECK(a == doctest::Approx(b).epsilon(1e-9));
    }
}

TEST_CASE("conversion round trip restores the drift") {
    const SdeSpec spec = generic_strat();
    const SdeSpec back = ito_to_strat(kSphere, strat_to_ito(kSphere, spec));
    CHECK(back.convention == Convention::Stratonovich);
    for (const auto& x : random_points(kSphere, 200)) {
        const Vec2 a = spec.drift(x);
        const Vec2 b = back.drift(x);
        CHECK(b.c1 == doctest::Approx(a.c1).epsilon(1e-13));
        CHECK(b.c2 == doctest::Approx(a.c2).epsilon(1e-13));
    }
}

TEST_CASE("brownian drift forms") {
    const SdeSpec strat = brownian_spec(kSphere, Convention::Stratonovich);
    const SdeSpec ito = strat_to_ito(kSphere, strat);
    const SdeSpec ito_direct = brownian_spec(kSphere, Convention::Ito);
    for (const auto& x : random_points(kSphere, 200)) {
        const double cot = std::cos(x.theta) / std::sin(x.theta);
        CHECK(strat.drift(x).c1 == doctest::Approx(0.5 * cot).epsilon(1e-13));
        CHECK(std::abs(strat.drift(x).c2) < 1e-15);
        // the corrected drift cancels exactly
        CHECK(std::abs(ito.drift(x).c1) < 1e-12);
        CHECK(std::abs(ito.drift(x).c2) < 1e-12);
        CHECK(std::abs(ito_direct.drift(x).c1) < 1e-15);
    }
}

TEST_CASE("pure transport along the azimuthal leg") {
    SdeSpec spec;
    spec.convention = Convention::Stratonovich;
    spec.drift = FieldSpec::constant(0.0, 1.0);
    CHECK(apply_generator(kSphere, spec, testf::sin_theta_sin_phi(), {kPi / 2, 0.0}) ==
          doctest::Approx(1.0).epsilon(1e-13));
}

TEST_CASE("nested noise application matches the five-point oracle") {
    SdeSpec spec;
    spec.convention = Convention::Stratonovich;
    spec.drift = testf::wavy_vector();
    spec.sigmas = {FieldSpec{testf::cos_theta(), testf::sin_theta()}};
    const ScalarField f = testf::wavy();
    const FieldSpec& sig = spec.sigmas[0];

    auto inner = [&](double t, double p) {
        const ChartPoint q{t, p};
        const Jet1 j = f.jet1(q);
        return sig.c1(q) * j.dt + sig.c2(q) * kSphere.frame2(t) * j.dp;
    };
    for (const auto& x : random_points(kSphere, 100)) {
        const double drift_part = spec.drift.c1(x) * f.jet1(x).dt +
                                  spec.drift.c2(x) * kSphere.frame2(x.theta) * f.jet1(x).dp;
        const double noise_part =
            sig.c1(x) * oracle::d_theta(inner, x.theta, x.phi) +
            sig.c2(x) * kSphere.frame2(x.theta) * oracle::d_phi(inner, x.theta, x.phi);
        const double ref = drift_part + 0.5 * noise_part;
        CHECK(apply_generator(kSphere, spec, f, x) == doctest::Approx(ref).epsilon(5e-8));
    }
}

TEST_CASE("finite-difference specs keep the conventions consistent") {
    SdeSpec spec;
    spec.convention = Convention::Stratonovich;
    spec.drift = FieldSpec{testf::value_only(testf::cos_theta()), testf::value_only(testf::sin_theta())};
    spec.sigmas = {FieldSpec{testf::value_only(testf::sin_theta()), ScalarField::constant(0.4)}};
    const SdeSpec conv = strat_to_ito(kSphere, spec);
    const ScalarField f = testf::value_only(testf::wavy());
    for (const auto& x : random_points(kSphere, 50, 0.3)) {
        const double a = apply_generator(kSphere, spec, f, x);
        const double b = apply_generator(kSphere, conv, f, x);
        CHECK(std::abs(a - b) <= 5e-5);
    }
}

TEST_CASE("convention guards") {
    const SdeSpec strat = generic_strat();
    const SdeSpec ito = strat_to_ito(kSphere, strat);
    const ScalarField f = testf::wavy();
    const ChartPoint x{1.0, 1.0};
    CHECK_THROWS_AS((void)apply_generator_strat(kSphere, ito, f, x), ConventionMismatch);
    CHECK_THROWS_AS((void)apply_generator_ito(kSphere, strat, f, x), ConventionMismatch);
    CHECK_THROWS_AS((void)strat_to_ito(kSphere, ito), ConventionMismatch);
    CHECK_THROWS_AS((void)ito_to_strat(kSphere, strat), ConventionMismatch);
    // the dispatcher routes by the stored convention
    CHECK(apply_generator(kSphere, strat, f, x) ==
          doctest::Approx(apply_generator_strat(kSphere, strat, f, x)).epsilon(1e-16));
    CHECK(apply_generator(kSphere, ito, f, x) ==
          doctest::Approx(apply_generator_ito(kSphere, ito, f, x)).epsilon(1e-16));
}

TEST_CASE("flat torus: conversion is the identity for constant noise") {
    SdeSpec spec;
    spec.convention = Convention::Stratonovich;
    spec.drift = FieldSpec::constant(0.3, 0.2);
    spec.sigmas = {FieldSpec::constant(0.5, 0.0), FieldSpec::constant(0.0, 0.8)};
    const SdeSpec conv = strat_to_ito(kTorus, spec);
    const ScalarField f = testf::wavy();
    for (const auto& x : random_points(kTorus, 200)) {
        const Vec2 d = conv.drift(x);
        CHECK(d.c1 == doctest::Approx(0.3).epsilon(1e-15));
        CHECK(d.c2 == doctest::Approx(0.2).epsilon(1e-15));
        CHECK(apply_generator(kTorus, spec, f, x) ==
              doctest::Approx(apply_generator(kTorus, conv, f, x)).epsilon(1e-13));
    }
}

TEST_CASE("flat torus: brownian generator is half the euclidean laplacian") {
    const SdeSpec spec = brownian_spec(kTorus, Convention::Ito);
    const ScalarField f = testf::wavy();
    for (const auto& x : random_points(kTorus, 200)) {
        const Jet2 j = f.jet2(x);
        CHECK(apply_generator(kTorus, spec, f, x) ==
              doctest::Approx(0.5 * (j.dtt + j.dpp)).epsilon(1e-13));
    }
}
