#pragma once

#include <vector>

#include "manifp/scalar_field.hpp"

namespace manifp {

/// Vector components in the orthonormal frame at a point.
struct Vec2 {
    double c1 = 0.0; // along E_1
    double c2 = 0.0; // along E_2
};

/**
 * Vector field given by its two frame component functions. "Frame" means the
 * orthonormal frame of the chart (E_1 = d/dtheta, E_2 = (1/sin theta) d/dphi
 * on the sphere), so components are physical magnitudes, not coordinate rates.
 */
struct FieldSpec {
    ScalarField c1;
    ScalarField c2;

    static FieldSpec constant(double a, double b) {
        return {ScalarField::constant(a), ScalarField::constant(b)};
    }
    static FieldSpec zero() { return constant(0.0, 0.0); }

    bool valid() const { return c1.valid() && c2.valid(); }
    bool analytic() const { return c1.analytic() && c2.analytic(); }
    bool is_constant() const { return c1.is_constant() && c2.is_constant(); }

    Vec2 operator()(ChartPoint p) const { return {c1(p), c2(p)}; }
};

/**
 * Diffusion tensor D = sum_i sigma_i (x) sigma_i built from the noise fields.
 * Components are reported in the orthonormal frame; the tensor is symmetric
 * positive semidefinite by construction.
 */
class DiffusionTensor {
public:
    DiffusionTensor() = default;
    explicit DiffusionTensor(std::vector<FieldSpec> sigmas) : sigmas_(std::move(sigmas)) {}

    int num_channels() const { return static_cast<int>(sigmas_.size()); }
    const std::vector<FieldSpec>& sigmas() const { return sigmas_; }

    bool is_constant() const {
        for (const auto& s : sigmas_)
            if (!s.is_constant()) return false;
        return true;
    }

    /// Component matrix D^{ab}(p) in the frame.
    Mat2 eval(ChartPoint p) const {
        Mat2 d;
        for (const auto& s : sigmas_) {
            const Vec2 v = s(p);
            d.a11 += v.c1 * v.c1;
            d.a12 += v.c1 * v.c2;
            d.a22 += v.c2 * v.c2;
        }
        d.a21 = d.a12;
        return d;
    }

    /// Full jet of one component: a, b index the frame directions (0 or 1).
    Jet2 component_jet(int a, int b, ChartPoint p) const {
        Jet2 sum;
        for (const auto& s : sigmas_) {
            const Jet2 ja = (a == 0) ? s.c1.jet2(p) : s.c2.jet2(p);
            const Jet2 jb = (b == 0) ? s.c1.jet2(p) : s.c2.jet2(p);
            sum = sum + ja * jb;
        }
        return sum;
    }

private:
    std::vector<FieldSpec> sigmas_;
};

inline DiffusionTensor diffusion_tensor(std::vector<FieldSpec> sigmas) {
    return DiffusionTensor(std::move(sigmas));
}

} // namespace manifp
