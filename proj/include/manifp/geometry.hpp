#pragma once

#include "manifp/fields.hpp"

namespace manifp {
namespace detail {

// Frame-direction derivative of a scalar: E_1[f] = f_t, E_2[f] = s * f_p.
// The jet versions propagate first partials through the chain rule so nested
// derivatives stay analytic when the inputs are analytic.

inline Jet1 lie_jet(const Chart& chart, double theta, const Jet1& x1, const Jet1& x2,
                    const Jet2& f) {
    const double s = chart.frame2(theta);
    const double ds = chart.frame2_dt(theta);
    Jet1 g;
    g.v = x1.v * f.dt + x2.v * s * f.dp;
    g.dt = x1.dt * f.dt + x1.v * f.dtt + x2.dt * s * f.dp + x2.v * (ds * f.dp + s * f.dtp);
    g.dp = x1.dp * f.dt + x1.v * f.dtp + x2.dp * s * f.dp + x2.v * s * f.dpp;
    return g;
}

inline Jet1 div_jet(const Chart& chart, double theta, const Jet2& x1, const Jet2& x2) {
    const double s = chart.frame2(theta);
    const double ds = chart.frame2_dt(theta);
    const double c = chart.conn(theta);
    const double dc = chart.conn_dt(theta);
    Jet1 d;
    d.v = x1.dt + s * x2.dp + c * x1.v;
    d.dt = x1.dtt + ds * x2.dp + s * x2.dtp + dc * x1.v + c * x1.dt;
    d.dp = x1.dtp + s * x2.dpp + c * x1.dp;
    return d;
}

inline Mat2 hessian_jet(const Chart& chart, double theta, const Jet2& f) {
    const double s = chart.frame2(theta);
    const double ds = chart.frame2_dt(theta);
    const double c = chart.conn(theta);
    Mat2 h;
    h.a11 = f.dtt;
    h.a12 = s * f.dtp + ds * f.dp;
    h.a21 = h.a12;
    h.a22 = s * s * f.dpp + c * f.dt;
    return h;
}

// Divergence of a symmetric (2,0) tensor with component jets t11, t12, t22:
// contraction of the frame covariant derivative over its last slot.
inline void tensor_div_jet(const Chart& chart, double theta, const Jet2& t11, const Jet2& t12,
                           const Jet2& t22, Jet1& v1, Jet1& v2) {
    const double s = chart.frame2(theta);
    const double ds = chart.frame2_dt(theta);
    const double c = chart.conn(theta);
    const double dc = chart.conn_dt(theta);
    v1.v = t11.dt + s * t12.dp + c * (t11.v - t22.v);
    v1.dt = t11.dtt + ds * t12.dp + s * t12.dtp + dc * (t11.v - t22.v) + c * (t11.dt - t22.dt);
    v1.dp = t11.dtp + s * t12.dpp + c * (t11.dp - t22.dp);
    v2.v = t12.dt + s * t22.dp + 2.0 * c * t12.v;
    v2.dt = t12.dtt + ds * t22.dp + s * t22.dtp + 2.0 * (dc * t12.v + c * t12.dt);
    v2.dp = t12.dtp + s * t22.dpp + 2.0 * c * t12.dp;
}

} // namespace detail

/// Derivative of f along X at p (frame components contracted with frame
/// derivatives of f).
inline double lie_derivative(const Chart& chart, const FieldSpec& x, const ScalarField& f,
                             ChartPoint p) {
    require_interior(chart, p, chart.pole_margin);
    const Jet1 g = detail::lie_jet(chart, p.theta, x.c1.jet1(p), x.c2.jet1(p), f.jet2(p));
    return g.v;
}

/// X[f] as a field, usable as input to another derivative. Analytic first
/// partials are attached when both inputs carry analytic derivatives;
/// otherwise downstream consumers difference the value closure.
inline ScalarField lie_derivative_field(const Chart& chart, const FieldSpec& x,
                                        const ScalarField& f) {
    auto value = [chart, x, f](double theta, double phi) {
        const ChartPoint q{theta, phi};
        return detail::lie_jet(chart, theta, x.c1.jet1(q), x.c2.jet1(q), f.jet2(q)).v;
    };
    const bool analytic = x.c1.has_grad() && x.c2.has_grad() && f.analytic();
    if (!analytic) return ScalarField(value);
    auto grad = [chart, x, f](double theta, double phi, double& dt, double& dp) {
        const ChartPoint q{theta, phi};
        const Jet1 g = detail::lie_jet(chart, theta, x.c1.jet1(q), x.c2.jet1(q), f.jet2(q));
        dt = g.dt;
        dp = g.dp;
    };
    return ScalarField(value, grad);
}

/// Covariant derivative of Y along X, in frame components.
inline Vec2 covariant_derivative(const Chart& chart, const FieldSpec& x, const FieldSpec& y,
                                 ChartPoint p) {
    require_interior(chart, p, chart.pole_margin);
    const double c = chart.conn(p.theta);
    const Jet1 x1 = x.c1.jet1(p), x2 = x.c2.jet1(p);
    const Jet1 dy1 = detail::lie_jet(chart, p.theta, x1, x2, y.c1.jet2(p));
    const Jet1 dy2 = detail::lie_jet(chart, p.theta, x1, x2, y.c2.jet2(p));
    const Vec2 yv = y(p);
    return {dy1.v - c * x2.v * yv.c2, dy2.v + c * x2.v * yv.c1};
}

/// Covariant derivative as a field with analytic first partials when possible.
inline FieldSpec covariant_derivative_field(const Chart& chart, const FieldSpec& x,
                                            const FieldSpec& y) {
    auto jet_at = [chart, x, y](ChartPoint q, int comp) -> Jet1 {
        const double c = chart.conn(q.theta);
        const double dc = chart.conn_dt(q.theta);
        const Jet1 x1 = x.c1.jet1(q), x2 = x.c2.jet1(q);
        const Jet1 y1 = y.c1.jet1(q), y2 = y.c2.jet1(q);
        if (comp == 0) {
            const Jet1 d = detail::lie_jet(chart, q.theta, x1, x2, y.c1.jet2(q));
            Jet1 r;
            r.v = d.v - c * x2.v * y2.v;
            r.dt = d.dt - dc * x2.v * y2.v - c * (x2.dt * y2.v + x2.v * y2.dt);
            r.dp = d.dp - c * (x2.dp * y2.v + x2.v * y2.dp);
            return r;
        }
        const Jet1 d = detail::lie_jet(chart, q.theta, x1, x2, y.c2.jet2(q));
        Jet1 r;
        r.v = d.v + c * x2.v * y1.v;
        r.dt = d.dt + dc * x2.v * y1.v + c * (x2.dt * y1.v + x2.v * y1.dt);
        r.dp = d.dp + c * (x2.dp * y1.v + x2.v * y1.dp);
        return r;
    };
    const bool analytic = x.analytic() && y.analytic();
    const bool axi = x.c1.is_axisymmetric() && x.c2.is_axisymmetric() &&
                     y.c1.is_axisymmetric() && y.c2.is_axisymmetric();
    FieldSpec out;
    for (int comp = 0; comp < 2; ++comp) {
        auto value = [jet_at, comp](double theta, double phi) {
            return jet_at({theta, phi}, comp).v;
        };
        ScalarField field;
        if (analytic) {
            auto grad = [jet_at, comp](double theta, double phi, double& dt, double& dp) {
                const Jet1 j = jet_at({theta, phi}, comp);
                dt = j.dt;
                dp = j.dp;
            };
            field = ScalarField(value, grad);
        } else {
            field = ScalarField(value);
        }
        if (axi) field.mark_axisymmetric();
        (comp == 0 ? out.c1 : out.c2) = field;
    }
    return out;
}

/// Divergence of a vector field with respect to the Riemannian volume.
inline double divergence_vf(const Chart& chart, const FieldSpec& x, ChartPoint p) {
    require_interior(chart, p, chart.pole_margin);
    return detail::div_jet(chart, p.theta, x.c1.jet2(p), x.c2.jet2(p)).v;
}

inline ScalarField divergence_field(const Chart& chart, const FieldSpec& x) {
    auto value = [chart, x](double theta, double phi) {
        const ChartPoint q{theta, phi};
        return detail::div_jet(chart, theta, x.c1.jet2(q), x.c2.jet2(q)).v;
    };
    if (!x.analytic()) return ScalarField(value);
    auto grad = [chart, x](double theta, double phi, double& dt, double& dp) {
        const ChartPoint q{theta, phi};
        const Jet1 d = detail::div_jet(chart, theta, x.c1.jet2(q), x.c2.jet2(q));
        dt = d.dt;
        dp = d.dp;
    };
    return ScalarField(value, grad);
}

/// Hessian of f at p in frame components (symmetric 2x2).
inline Mat2 hessian(const Chart& chart, const ScalarField& f, ChartPoint p) {
    require_interior(chart, p, chart.pole_margin);
    return detail::hessian_jet(chart, p.theta, f.jet2(p));
}

/// Symmetric (2,0) tensor field given by frame component functions.
struct TensorField {
    ScalarField t11, t12, t22;
};

/// The tensor p * D with product-rule jets.
inline TensorField scale_tensor(const ScalarField& p, const DiffusionTensor& d) {
    auto comp = [p, d](int a, int b) {
        auto jet = [p, d, a, b](ChartPoint q) { return p.jet2(q) * d.component_jet(a, b, q); };
        auto value = [jet](double theta, double phi) { return jet({theta, phi}).v; };
        bool analytic = p.analytic();
        for (const auto& s : d.sigmas()) analytic = analytic && s.analytic();
        if (!analytic) return ScalarField(value);
        auto grad = [jet](double theta, double phi, double& dt, double& dp) {
            const Jet2 j = jet({theta, phi});
            dt = j.dt;
            dp = j.dp;
        };
        auto hess = [jet](double theta, double phi, double& dtt, double& dtp, double& dpp) {
            const Jet2 j = jet({theta, phi});
            dtt = j.dtt;
            dtp = j.dtp;
            dpp = j.dpp;
        };
        return ScalarField(value, grad, hess);
    };
    return {comp(0, 0), comp(0, 1), comp(1, 1)};
}

/// Divergence of a symmetric (2,0) tensor field, contracting the last slot.
inline Vec2 divergence_tensor(const Chart& chart, const TensorField& t, ChartPoint p) {
    require_interior(chart, p, chart.pole_margin);
    Jet1 v1, v2;
    detail::tensor_div_jet(chart, p.theta, t.t11.jet2(p), t.t12.jet2(p), t.t22.jet2(p), v1, v2);
    return {v1.v, v2.v};
}

inline FieldSpec divergence_tensor_field(const Chart& chart, const TensorField& t) {
    auto jets = [chart, t](ChartPoint q, Jet1& v1, Jet1& v2) {
        detail::tensor_div_jet(chart, q.theta, t.t11.jet2(q), t.t12.jet2(q), t.t22.jet2(q), v1,
                               v2);
    };
    const bool analytic = t.t11.analytic() && t.t12.analytic() && t.t22.analytic();
    FieldSpec out;
    for (int comp = 0; comp < 2; ++comp) {
        auto value = [jets, comp](double theta, double phi) {
            Jet1 v1, v2;
            jets({theta, phi}, v1, v2);
            return comp == 0 ? v1.v : v2.v;
        };
        if (analytic) {
            auto grad = [jets, comp](double theta, double phi, double& dt, double& dp) {
                Jet1 v1, v2;
                jets({theta, phi}, v1, v2);
                dt = (comp == 0 ? v1.dt : v2.dt);
                dp = (comp == 0 ? v1.dp : v2.dp);
            };
            (comp == 0 ? out.c1 : out.c2) = ScalarField(value, grad);
        } else {
            (comp == 0 ? out.c1 : out.c2) = ScalarField(value);
        }
    }
    return out;
}

/// Frobenius contraction of two symmetric 2x2 frame tensors.
inline double tensor_dot(const Mat2& a, const Mat2& b) {
    return a.a11 * b.a11 + a.a12 * b.a12 + a.a21 * b.a21 + a.a22 * b.a22;
}

} // namespace manifp
