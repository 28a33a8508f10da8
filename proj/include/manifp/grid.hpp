#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "manifp/chart.hpp"
#include "manifp/scalar_field.hpp"

namespace manifp {

/**
 * Cell-centered density grid. Rows are colatitude bands theta_j = (j+1/2) dt,
 * columns are azimuth samples phi_k = k dp (periodic). Quadrature weights are
 * w_jk = r(theta_j) dt dp with r the area factor, so cell faces at j = 0 and
 * j = n_theta sit exactly on the poles where r vanishes. Values are stored
 * row-major (theta outer, phi inner).
 */
struct DensityGrid {
    Chart chart;
    int n_theta = 0;
    int n_phi = 0;
    double d_theta = 0.0;
    double d_phi = 0.0;
    std::vector<double> v;
    std::vector<double> row_r; // area factor at cell rows

    int size() const { return n_theta * n_phi; }
    int idx(int j, int k) const { return j * n_phi + k; }
    double theta(int j) const { return (j + 0.5) * d_theta; }
    double phi(int k) const { return k * d_phi; }
    ChartPoint point(int j, int k) const { return {theta(j), phi(k)}; }
    double w(int j) const { return row_r[j] * d_theta * d_phi; }
    double& at(int j, int k) { return v[idx(j, k)]; }
    double at(int j, int k) const { return v[idx(j, k)]; }

    bool same_shape(const DensityGrid& o) const {
        return chart.kind == o.chart.kind && n_theta == o.n_theta && n_phi == o.n_phi;
    }
};

inline void require_same_shape(const DensityGrid& a, const DensityGrid& b) {
    if (!a.same_shape(b)) throw ShapeMismatch("grid shapes differ");
}

/// Uniform density grid. Requires n_theta, n_phi >= 8 and even n_phi (the
/// azimuthal count must be even so transverse stencils can use the antipodal
/// continuation across the poles).
inline DensityGrid build_grid(const Chart& chart, int n_theta, int n_phi) {
    if (n_theta < 8 || n_phi < 8) {
        throw GridTooSmall("grid must be at least 8x8, got " + std::to_string(n_theta) + "x" +
                           std::to_string(n_phi));
    }
    if (n_phi % 2 != 0) {
        throw GridTooSmall("n_phi must be even, got " + std::to_string(n_phi));
    }
    DensityGrid g;
    g.chart = chart;
    g.n_theta = n_theta;
    g.n_phi = n_phi;
    g.d_theta = chart.theta_extent() / n_theta;
    g.d_phi = kTwoPi / n_phi;
    g.row_r.resize(n_theta);
    for (int j = 0; j < n_theta; ++j) g.row_r[j] = chart.area_factor(g.theta(j));
    const double uniform = chart.is_sphere() ? 1.0 / (4.0 * kPi) : 1.0 / (kTwoPi * kTwoPi);
    g.v.assign(static_cast<size_t>(n_theta) * n_phi, uniform);
    return g;
}

namespace detail {
/// Compensated (Kahan) accumulator for quadrature sums.
struct KahanSum {
    double s = 0.0, c = 0.0;
    void add(double x) {
        const double y = x - c;
        const double t = s + y;
        c = (t - s) - y;
        s = t;
    }
    double get() const { return s; }
};
} // namespace detail

inline double mass(const DensityGrid& g) {
    detail::KahanSum sum;
    for (int j = 0; j < g.n_theta; ++j) {
        const double w = g.w(j);
        for (int k = 0; k < g.n_phi; ++k) sum.add(w * g.at(j, k));
    }
    return sum.get();
}

inline double total_weight(const DensityGrid& g) {
    detail::KahanSum sum;
    for (int j = 0; j < g.n_theta; ++j) sum.add(g.w(j) * g.n_phi);
    return sum.get();
}

/// L2 pairing <p, q> = sum p q w over cells.
inline double inner_product(const DensityGrid& a, const DensityGrid& b) {
    require_same_shape(a, b);
    detail::KahanSum sum;
    for (int j = 0; j < a.n_theta; ++j) {
        const double w = a.w(j);
        for (int k = 0; k < a.n_phi; ++k) sum.add(w * a.at(j, k) * b.at(j, k));
    }
    return sum.get();
}

/// Midpoint quadrature of a pointwise function against the volume measure.
inline double quadrature(const DensityGrid& g,
                         const std::function<double(ChartPoint)>& f) {
    detail::KahanSum sum;
    for (int j = 0; j < g.n_theta; ++j) {
        const double w = g.w(j);
        for (int k = 0; k < g.n_phi; ++k) sum.add(w * f(g.point(j, k)));
    }
    return sum.get();
}

inline DensityGrid sample_field(const DensityGrid& shape, const ScalarField& f) {
    DensityGrid out = shape;
    for (int j = 0; j < out.n_theta; ++j)
        for (int k = 0; k < out.n_phi; ++k) out.at(j, k) = f(out.theta(j), out.phi(k));
    return out;
}

inline void normalize(DensityGrid& g) {
    const double m = mass(g);
    if (!(m > 0.0) || !std::isfinite(m)) throw NonFiniteDensity("cannot normalize: mass " + std::to_string(m));
    for (auto& x : g.v) x /= m;
}

inline double l1_distance(const DensityGrid& a, const DensityGrid& b) {
    require_same_shape(a, b);
    detail::KahanSum sum;
    for (int j = 0; j < a.n_theta; ++j) {
        const double w = a.w(j);
        for (int k = 0; k < a.n_phi; ++k) sum.add(w * std::abs(a.at(j, k) - b.at(j, k)));
    }
    return sum.get();
}

inline double linf_distance(const DensityGrid& a, const DensityGrid& b) {
    require_same_shape(a, b);
    double m = 0.0;
    for (int i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.v[i] - b.v[i]));
    return m;
}

/// Aggregate to a coarser grid (block counts must divide; the azimuthal
/// refinement factor must be even so fine cells tile the centered coarse
/// cells). Mass preserving: each coarse value is the block mass divided by
/// the coarse cell weight.
inline DensityGrid coarsen(const DensityGrid& g, int bt, int bp) {
    if (bt < 1 || bp < 1 || g.n_theta % bt != 0 || g.n_phi % bp != 0)
        throw ShapeMismatch("coarse bin counts must divide the grid shape");
    const int ft = g.n_theta / bt, fp = g.n_phi / bp;
    if (fp > 1 && fp % 2 != 0)
        throw ShapeMismatch("azimuthal refinement factor must be even, got " +
                            std::to_string(fp));
    DensityGrid out = build_grid(g.chart, bt < 8 ? 8 : bt, bp < 8 ? 8 : bp);
    // rebuild with the exact requested shape (coarse comparison bins may be
    // smaller than the simulation minimum)
    out.n_theta = bt;
    out.n_phi = bp;
    out.d_theta = g.chart.theta_extent() / bt;
    out.d_phi = kTwoPi / bp;
    out.row_r.resize(bt);
    for (int j = 0; j < bt; ++j) out.row_r[j] = g.chart.area_factor(out.theta(j));
    out.v.assign(static_cast<size_t>(bt) * bp, 0.0);
    for (int J = 0; J < bt; ++J) {
        for (int K = 0; K < bp; ++K) {
            // theta faces align; the phi window is centered on the coarse
            // node because nodes sit at cell centers in both grids
            double m = 0.0;
            for (int j = J * ft; j < (J + 1) * ft; ++j) {
                const double w = g.w(j);
                for (int o = 0; o < fp; ++o) {
                    const int k = (K * fp + o - fp / 2 + g.n_phi) % g.n_phi;
                    m += w * g.at(j, k);
                }
            }
            out.at(J, K) = m / out.w(J);
        }
    }
    return out;
}

/// Resultant (unnormalized mean embedding) of a density.
inline std::array<double, 3> resultant(const DensityGrid& g) {
    std::array<double, 3> r{0.0, 0.0, 0.0};
    for (int j = 0; j < g.n_theta; ++j) {
        const double w = g.w(j);
        for (int k = 0; k < g.n_phi; ++k) {
            const auto x = embed(g.point(j, k));
            const double pw = w * g.at(j, k);
            r[0] += pw * x[0];
            r[1] += pw * x[1];
            r[2] += pw * x[2];
        }
    }
    return r;
}

inline double norm3(const std::array<double, 3>& v) {
    return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

/// Angle in radians between two directions in R^3.
inline double direction_angle(const std::array<double, 3>& a, const std::array<double, 3>& b) {
    const double na = norm3(a), nb = norm3(b);
    double c = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]) / (na * nb);
    c = std::min(1.0, std::max(-1.0, c));
    return std::acos(c);
}

/// Differential entropy -sum p log p w over positive cells.
inline double entropy(const DensityGrid& g) {
    detail::KahanSum sum;
    for (int j = 0; j < g.n_theta; ++j) {
        const double w = g.w(j);
        for (int k = 0; k < g.n_phi; ++k) {
            const double p = g.at(j, k);
            if (p > 0.0) sum.add(-w * p * std::log(p));
        }
    }
    return sum.get();
}

} // namespace manifp
