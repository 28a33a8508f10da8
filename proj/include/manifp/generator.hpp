#pragma once

#include <vector>

#include "manifp/geometry.hpp"
#include "manifp/grid.hpp"

namespace manifp {

enum class Convention { Stratonovich, Ito };

/**
 * SDE description in frame components: drift field X (or corrected drift in
 * Ito form) and noise fields sigma_i, all expressed in the orthonormal frame.
 * The diffusion tensor is always derived from the noise fields so the two
 * stay consistent by construction.
 */
struct SdeSpec {
    Convention convention = Convention::Stratonovich;
    FieldSpec drift;
    std::vector<FieldSpec> sigmas;

    DiffusionTensor diffusion() const { return DiffusionTensor(sigmas); }
    int num_channels() const { return static_cast<int>(sigmas.size()); }
};

inline void require_convention(const SdeSpec& spec, Convention c, const char* where) {
    if (spec.convention != c) {
        throw ConventionMismatch(std::string(where) + ": spec is in the " +
                                 (spec.convention == Convention::Ito ? "Ito" : "Stratonovich") +
                                 " convention");
    }
}

/// f1 + c * f2 with derivative information carried through when present.
inline ScalarField add_scaled_field(const ScalarField& f1, double c, const ScalarField& f2) {
    if (f1.is_constant() && f2.is_constant()) {
        return ScalarField::constant(f1.constant_value() + c * f2.constant_value());
    }
    auto value = [f1, c, f2](double t, double p) { return f1(t, p) + c * f2(t, p); };
    const bool axi = f1.is_axisymmetric() && f2.is_axisymmetric();
    if (f1.has_grad() && f2.has_grad()) {
        auto grad = [f1, c, f2](double t, double p, double& dt, double& dp) {
            double a1, a2, b1, b2;
            const ChartPoint q{t, p};
            const Jet1 j1 = f1.jet1(q), j2 = f2.jet1(q);
            a1 = j1.dt; a2 = j1.dp; b1 = j2.dt; b2 = j2.dp;
            dt = a1 + c * b1;
            dp = a2 + c * b2;
        };
        if (f1.has_hess() && f2.has_hess()) {
            auto hess = [f1, c, f2](double t, double p, double& dtt, double& dtp, double& dpp) {
                const ChartPoint q{t, p};
                const Jet2 j1 = f1.jet2(q), j2 = f2.jet2(q);
                dtt = j1.dtt + c * j2.dtt;
                dtp = j1.dtp + c * j2.dtp;
                dpp = j1.dpp + c * j2.dpp;
            };
            ScalarField out(value, grad, hess);
            if (axi) out.mark_axisymmetric();
            return out;
        }
        ScalarField out(value, grad);
        if (axi) out.mark_axisymmetric();
        return out;
    }
    ScalarField out(value);
    if (axi) out.mark_axisymmetric();
    return out;
}

namespace detail {
inline double lie_value(const Chart& chart, double theta, double x1, double x2, const Jet1& f) {
    return x1 * f.dt + x2 * chart.frame2(theta) * f.dp;
}
} // namespace detail

/// Generator in Stratonovich form: X[f] + (1/2) sum_i sigma_i[sigma_i[f]].
inline double apply_generator_strat(const Chart& chart, const SdeSpec& spec, const ScalarField& f,
                                    ChartPoint p) {
    require_convention(spec, Convention::Stratonovich, "apply_generator_strat");
    require_interior(chart, p, chart.pole_margin);
    const Jet2 fj = f.jet2(p);
    const Vec2 xv = spec.drift(p);
    double acc = detail::lie_value(chart, p.theta, xv.c1, xv.c2, fj.jet1());
    for (const auto& sigma : spec.sigmas) {
        const ScalarField inner = lie_derivative_field(chart, sigma, f);
        const Vec2 sv = sigma(p);
        acc += 0.5 * detail::lie_value(chart, p.theta, sv.c1, sv.c2, inner.jet1(p));
    }
    return acc;
}

/// Generator in Ito form: Xt[f] + (1/2) D : Hess f.
inline double apply_generator_ito(const Chart& chart, const SdeSpec& spec, const ScalarField& f,
                                  ChartPoint p) {
    require_convention(spec, Convention::Ito, "apply_generator_ito");
    require_interior(chart, p, chart.pole_margin);
    const Jet2 fj = f.jet2(p);
    const Vec2 xv = spec.drift(p);
    const Mat2 h = detail::hessian_jet(chart, p.theta, fj);
    const Mat2 d = spec.diffusion().eval(p);
    return detail::lie_value(chart, p.theta, xv.c1, xv.c2, fj.jet1()) + 0.5 * tensor_dot(d, h);
}

inline double apply_generator(const Chart& chart, const SdeSpec& spec, const ScalarField& f,
                              ChartPoint p) {
    return spec.convention == Convention::Stratonovich ? apply_generator_strat(chart, spec, f, p)
                                                       : apply_generator_ito(chart, spec, f, p);
}

/// Drift correction between conventions: Xt = X + (1/2) sum_i cov(sigma_i, sigma_i).
inline FieldSpec drift_correction(const Chart& chart, const std::vector<FieldSpec>& sigmas) {
    FieldSpec corr = FieldSpec::constant(0.0, 0.0);
    for (const auto& sigma : sigmas) {
        const FieldSpec c = covariant_derivative_field(chart, sigma, sigma);
        corr.c1 = add_scaled_field(corr.c1, 1.0, c.c1);
        corr.c2 = add_scaled_field(corr.c2, 1.0, c.c2);
    }
    return corr;
}

inline SdeSpec strat_to_ito(const Chart& chart, const SdeSpec& spec) {
    require_convention(spec, Convention::Stratonovich, "strat_to_ito");
    const FieldSpec corr = drift_correction(chart, spec.sigmas);
    SdeSpec out;
    out.convention = Convention::Ito;
    out.drift.c1 = add_scaled_field(spec.drift.c1, 0.5, corr.c1);
    out.drift.c2 = add_scaled_field(spec.drift.c2, 0.5, corr.c2);
    out.sigmas = spec.sigmas;
    return out;
}

inline SdeSpec ito_to_strat(const Chart& chart, const SdeSpec& spec) {
    require_convention(spec, Convention::Ito, "ito_to_strat");
    const FieldSpec corr = drift_correction(chart, spec.sigmas);
    SdeSpec out;
    out.convention = Convention::Stratonovich;
    out.drift.c1 = add_scaled_field(spec.drift.c1, -0.5, corr.c1);
    out.drift.c2 = add_scaled_field(spec.drift.c2, -0.5, corr.c2);
    out.sigmas = spec.sigmas;
    return out;
}

/// An axisymmetric frame component a(theta) with analytic derivatives.
inline ScalarField theta_profile(std::function<double(double)> f, std::function<double(double)> df,
                                 std::function<double(double)> d2f) {
    ScalarField out([f](double t, double) { return f(t); },
                    [df](double t, double, double& dt, double& dp) {
                        dt = df(t);
                        dp = 0.0;
                    },
                    [d2f](double t, double, double& dtt, double& dtp, double& dpp) {
                        dtt = d2f(t);
                        dtp = dpp = 0.0;
                    });
    out.mark_axisymmetric();
    return out;
}

/// Spherical Brownian motion of unit intensity: noise along both frame legs.
/// In Stratonovich form the drift (1/2) cot(theta) E_1 compensates the frame
/// rotation; in Ito form the corrected drift vanishes.
inline SdeSpec brownian_spec(const Chart& chart, Convention conv, double intensity = 1.0) {
    SdeSpec s;
    s.convention = conv;
    s.sigmas = {FieldSpec::constant(intensity, 0.0), FieldSpec::constant(0.0, intensity)};
    if (conv == Convention::Stratonovich && chart.is_sphere()) {
        const double half = 0.5 * intensity * intensity;
        s.drift.c1 = theta_profile(
            [half](double t) { return half * std::cos(t) / std::sin(t); },
            [half](double t) {
                const double st = std::sin(t);
                return -half / (st * st);
            },
            [half](double t) {
                const double st = std::sin(t);
                return 2.0 * half * std::cos(t) / (st * st * st);
            });
        s.drift.c2 = ScalarField::constant(0.0);
    } else {
        s.drift = FieldSpec::zero();
    }
    return s;
}

/**
 * Duality defect |<p, A q> - <A* p, q>| measured by grid quadrature: the
 * generator side is evaluated pointwise at cell centers, the adjoint side is
 * the discrete forward-evolution right-hand side applied to p sampled on the
 * grid. Declared here, implemented with the solver.
 */
double adjoint_residual(const DensityGrid& shape, const SdeSpec& spec, const ScalarField& p,
                        const ScalarField& q);

} // namespace manifp
