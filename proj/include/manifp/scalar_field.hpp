#pragma once

#include <functional>
#include <utility>

#include "manifp/chart.hpp"

namespace manifp {

/// Value and first coordinate partials of a scalar at a point.
struct Jet1 {
    double v = 0.0;
    double dt = 0.0; // d/dtheta
    double dp = 0.0; // d/dphi
};

/// Value plus first and second coordinate partials of a scalar at a point.
struct Jet2 {
    double v = 0.0;
    double dt = 0.0, dp = 0.0;
    double dtt = 0.0, dtp = 0.0, dpp = 0.0;

    Jet1 jet1() const { return {v, dt, dp}; }
};

/// Pointwise product with full second-order chain rule.
inline Jet2 operator*(const Jet2& a, const Jet2& b) {
    Jet2 r;
    r.v = a.v * b.v;
    r.dt = a.dt * b.v + a.v * b.dt;
    r.dp = a.dp * b.v + a.v * b.dp;
    r.dtt = a.dtt * b.v + 2.0 * a.dt * b.dt + a.v * b.dtt;
    r.dpp = a.dpp * b.v + 2.0 * a.dp * b.dp + a.v * b.dpp;
    r.dtp = a.dtp * b.v + a.dt * b.dp + a.dp * b.dt + a.v * b.dtp;
    return r;
}

inline Jet2 operator+(const Jet2& a, const Jet2& b) {
    return {a.v + b.v, a.dt + b.dt, a.dp + b.dp, a.dtt + b.dtt, a.dtp + b.dtp, a.dpp + b.dpp};
}

inline Jet2 operator*(double c, const Jet2& a) {
    return {c * a.v, c * a.dt, c * a.dp, c * a.dtt, c * a.dtp, c * a.dpp};
}

/**
 * Scalar function on a chart, with optional analytic derivatives.
 *
 * When `grad`/`hess` are absent the corresponding jet entries fall back to
 * central finite differences of `value` with step kFdStep, so every operation
 * built on jets works in both analytic and finite-difference mode.
 */
class ScalarField {
public:
    using ValueFn = std::function<double(double, double)>;
    // grad fills (d/dtheta, d/dphi); hess fills (dtt, dtp, dpp).
    using GradFn = std::function<void(double, double, double&, double&)>;
    using HessFn = std::function<void(double, double, double&, double&, double&)>;

    ScalarField() = default;
    explicit ScalarField(ValueFn v) : value_(std::move(v)) {}
    ScalarField(ValueFn v, GradFn g) : value_(std::move(v)), grad_(std::move(g)) {}
    ScalarField(ValueFn v, GradFn g, HessFn h)
        : value_(std::move(v)), grad_(std::move(g)), hess_(std::move(h)) {}

    static ScalarField constant(double c) {
        ScalarField f(
            [c](double, double) { return c; },
            [](double, double, double& dt, double& dp) { dt = dp = 0.0; },
            [](double, double, double& dtt, double& dtp, double& dpp) { dtt = dtp = dpp = 0.0; });
        f.constant_ = true;
        f.axisym_ = true;
        f.constant_value_ = c;
        return f;
    }

    bool valid() const { return static_cast<bool>(value_); }
    bool has_grad() const { return static_cast<bool>(grad_); }
    bool has_hess() const { return static_cast<bool>(hess_); }
    bool analytic() const { return has_grad() && has_hess(); }
    bool is_constant() const { return constant_; }
    double constant_value() const { return constant_value_; }

    /// Marks the field as independent of phi (enables banded solver kernels).
    ScalarField& mark_axisymmetric() {
        axisym_ = true;
        return *this;
    }
    bool is_axisymmetric() const { return axisym_; }

    double operator()(double theta, double phi) const { return value_(theta, phi); }
    double operator()(ChartPoint p) const { return value_(p.theta, p.phi); }

    Jet1 jet1(ChartPoint p) const {
        Jet1 j;
        j.v = value_(p.theta, p.phi);
        fill_grad(p.theta, p.phi, j.dt, j.dp);
        return j;
    }

    Jet2 jet2(ChartPoint p) const {
        Jet2 j;
        j.v = value_(p.theta, p.phi);
        fill_grad(p.theta, p.phi, j.dt, j.dp);
        if (hess_) {
            hess_(p.theta, p.phi, j.dtt, j.dtp, j.dpp);
        } else {
            const double h = kFdStep;
            const double c = j.v;
            j.dtt = (value_(p.theta + h, p.phi) - 2.0 * c + value_(p.theta - h, p.phi)) / (h * h);
            j.dpp = (value_(p.theta, p.phi + h) - 2.0 * c + value_(p.theta, p.phi - h)) / (h * h);
            j.dtp = (value_(p.theta + h, p.phi + h) - value_(p.theta + h, p.phi - h) -
                     value_(p.theta - h, p.phi + h) + value_(p.theta - h, p.phi - h)) /
                    (4.0 * h * h);
        }
        return j;
    }

private:
    void fill_grad(double theta, double phi, double& dt, double& dp) const {
        if (grad_) {
            grad_(theta, phi, dt, dp);
        } else {
            const double h = kFdStep;
            dt = (value_(theta + h, phi) - value_(theta - h, phi)) / (2.0 * h);
            dp = (value_(theta, phi + h) - value_(theta, phi - h)) / (2.0 * h);
        }
    }

    ValueFn value_;
    GradFn grad_;
    HessFn hess_;
    bool constant_ = false;
    bool axisym_ = false;
    double constant_value_ = 0.0;
};

} // namespace manifp
