#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include "manifp/errors.hpp"

namespace manifp {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kTwoPi = 2.0 * kPi;

/// Finite-difference step used when a field carries no analytic derivatives.
inline constexpr double kFdStep = 1e-5;

enum class ChartKind { Sphere, Torus };

/// A point in chart coordinates. On the sphere: colatitude theta in (0, pi),
/// azimuth phi in [0, 2*pi). On the flat torus both coordinates live in [0, 2*pi).
struct ChartPoint {
    double theta = 0.0;
    double phi = 0.0;
};

struct Mat2 {
    double a11 = 0.0, a12 = 0.0, a21 = 0.0, a22 = 0.0;
};

/// Metric quantities at a point: metric matrix, Christoffel symbols
/// gamma[k][i][j] (upper index first), and the orthonormal frame / coframe
/// coefficient matrices (columns are the frame vectors in coordinate basis).
struct MetricData {
    Mat2 g;
    double gamma[2][2][2] = {};
    Mat2 frame;
    Mat2 coframe;
};

/**
 * Coordinate chart description for the two supported manifolds.
 *
 * The sphere chart uses the embedding x = (cos(phi) sin(theta),
 * sin(phi) sin(theta), cos(theta)) and the orthonormal frame
 * E_1 = d/dtheta, E_2 = (1/sin(theta)) d/dphi. The torus chart is flat with the
 * coordinate basis as its frame; it exists mainly so every identity can be
 * cross-checked against plain Euclidean formulas.
 *
 * `pole_margin` is the exclusion band for differential operators (they throw
 * PoleProximity inside it); `wrap_clamp` is the much smaller clamp applied to
 * simulated states after pole reflection so a state never sits exactly on a
 * pole. The margin default is wider than the finite-difference stencil so
 * derivative fallbacks never sample across a pole.
 */
struct Chart {
    ChartKind kind = ChartKind::Sphere;
    double pole_margin = 2.5e-5;
    double wrap_clamp = 1e-9;

    bool is_sphere() const { return kind == ChartKind::Sphere; }

    /// Extent of the first coordinate: pi on the sphere, 2*pi on the torus.
    double theta_extent() const { return is_sphere() ? kPi : kTwoPi; }

    /// Area element factor r(theta) with d(mu) = r dtheta dphi.
    double area_factor(double theta) const { return is_sphere() ? std::sin(theta) : 1.0; }

    /// Frame factor s(theta) of the second frame vector, E_2 = s * d/dphi.
    double frame2(double theta) const { return is_sphere() ? 1.0 / std::sin(theta) : 1.0; }

    double frame2_dt(double theta) const {
        if (!is_sphere()) return 0.0;
        const double s = std::sin(theta);
        return -std::cos(theta) / (s * s);
    }

    /// Nonzero connection scalar: on the sphere cov(E_2, E_1) = conn * E_2 and
    /// cov(E_2, E_2) = -conn * E_1 with conn = cot(theta); zero on the torus.
    double conn(double theta) const {
        return is_sphere() ? std::cos(theta) / std::sin(theta) : 0.0;
    }

    double conn_dt(double theta) const {
        if (!is_sphere()) return 0.0;
        const double s = std::sin(theta);
        return -1.0 / (s * s);
    }

    ChartPoint wrap(ChartPoint x, int* reflections = nullptr) const {
        int refl = 0;
        if (is_sphere()) {
            while (x.theta < 0.0 || x.theta > kPi) {
                if (x.theta < 0.0) {
                    x.theta = -x.theta;
                } else {
                    x.theta = kTwoPi - x.theta;
                }
                x.phi += kPi;
                ++refl;
            }
            x.theta = std::clamp(x.theta, wrap_clamp, kPi - wrap_clamp);
        } else {
            x.theta = std::fmod(x.theta, kTwoPi);
            if (x.theta < 0.0) x.theta += kTwoPi;
            if (x.theta >= kTwoPi) x.theta = 0.0;
        }
        x.phi = std::fmod(x.phi, kTwoPi);
        if (x.phi < 0.0) x.phi += kTwoPi;
        if (x.phi >= kTwoPi) x.phi = 0.0;
        if (reflections) *reflections += refl;
        return x;
    }

    bool interior(ChartPoint p, double margin) const {
        if (!is_sphere()) return true;
        return p.theta >= margin && p.theta <= kPi - margin;
    }
};

inline void require_interior(const Chart& chart, ChartPoint p, double margin) {
    if (!chart.interior(p, margin)) {
        throw PoleProximity("point at theta=" + std::to_string(p.theta) +
                            " lies inside the pole exclusion band (" +
                            std::to_string(margin) + ")");
    }
}

/// Chart embedding into R^3 (unit sphere). Torus points are embedded on the
/// unit sphere of their angles' cosines only where needed; the sphere is the
/// primary target.
inline std::array<double, 3> embed(ChartPoint p) {
    const double st = std::sin(p.theta);
    return {std::cos(p.phi) * st, std::sin(p.phi) * st, std::cos(p.theta)};
}

inline MetricData metric_data(const Chart& chart, ChartPoint p) {
    require_interior(chart, p, chart.pole_margin);
    MetricData m;
    if (chart.is_sphere()) {
        const double st = std::sin(p.theta);
        const double ct = std::cos(p.theta);
        m.g = {1.0, 0.0, 0.0, st * st};
        m.gamma[0][1][1] = -st * ct;        // upper theta, lower phi phi
        m.gamma[1][0][1] = ct / st;         // upper phi, lower theta phi
        m.gamma[1][1][0] = ct / st;
        m.frame = {1.0, 0.0, 0.0, 1.0 / st};
        m.coframe = {1.0, 0.0, 0.0, st};
    } else {
        m.g = {1.0, 0.0, 0.0, 1.0};
        m.frame = {1.0, 0.0, 0.0, 1.0};
        m.coframe = {1.0, 0.0, 0.0, 1.0};
    }
    return m;
}

} // namespace manifp
