// Microbenchmark of the forward-equation right-hand side: the compiled
// kernels (OpenMP parallel over rows, with a constant-coefficient stencil
// fast path) against the serial per-face reference implementation. Also
// cross-checks that the kernels agree on every run it times.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "manifp/fpe_solver.hpp"
#include "manifp/generator.hpp"
#include "manifp/grid.hpp"

using namespace manifp;

namespace {

double now() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

/// Seconds per call, with enough repetitions to fill ~0.3 s.
template <typename F>
double time_per_call(F&& fn) {
    double t0 = now();
    fn();
    const double first = now() - t0;
    const int reps = std::max(1, static_cast<int>(0.3 / std::max(first, 1e-9)));
    t0 = now();
    for (int i = 0; i < reps; ++i) fn();
    return (now() - t0) / reps;
}

ScalarField theta_wave(double base, double amp) {
    auto value = [=](double t, double) { return base + amp * std::cos(t); };
    auto grad = [=](double t, double, double& dt, double& dp) {
        dt = -amp * std::sin(t);
        dp = 0.0;
    };
    auto hess = [=](double t, double, double& dtt, double& dtp, double& dpp) {
        dtt = -amp * std::cos(t);
        dtp = 0.0;
        dpp = 0.0;
    };
    ScalarField f(value, grad, hess);
    f.mark_axisymmetric();
    return f;
}

SdeSpec constant_spec() {
    SdeSpec s;
    s.convention = Convention::Stratonovich;
    s.drift = FieldSpec::constant(0.3, 0.2);
    s.sigmas = {FieldSpec::constant(0.5, 0.0), FieldSpec::constant(0.0, 0.8)};
    return s;
}

SdeSpec varying_spec() {
    SdeSpec s;
    s.convention = Convention::Stratonovich;
    s.drift = FieldSpec::constant(0.3, 0.2);
    s.sigmas = {FieldSpec{theta_wave(0.5, 0.1), ScalarField::constant(0.0)},
                FieldSpec{ScalarField::constant(0.0), theta_wave(0.8, 0.1)}};
    return s;
}

/// A noise leg with both components active defeats the stencil
/// factorization and exercises the general face-flux kernel.
SdeSpec coupled_spec() {
    SdeSpec s = varying_spec();
    s.sigmas.push_back(FieldSpec::constant(0.2, 0.3));
    return s;
}

DensityGrid smooth_density(const DensityGrid& shape) {
    DensityGrid p = shape;
    for (int j = 0; j < p.n_theta; ++j)
        for (int k = 0; k < p.n_phi; ++k)
            p.at(j, k) = 1.0 + 0.4 * std::sin(p.theta(j)) * std::cos(p.phi(k));
    normalize(p);
    return p;
}

void bench_case(int nt, int np, const char* label, const SdeSpec& spec) {
    const DensityGrid p = smooth_density(build_grid(Chart{}, nt, np));

    const double t_build = time_per_call([&] { CompiledRhs r(p, spec); });
    CompiledRhs rhs(p, spec);
    std::vector<double> out(p.v.size());
    const double t_compiled = time_per_call([&] { rhs.eval(p.v.data(), out.data()); });
    DensityGrid ref = p;
    const double t_reference = time_per_call([&] { ref = fp_rhs_reference(p, spec); });

    double gap = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i)
        gap = std::max(gap, std::abs(out[i] - ref.v[i]));

    std::printf("%4dx%-5d %-8s %-8s %10.3f %12.3f %12.3f %9.1fx %10.1e\n", nt, np, label,
                rhs.stencil_mode() ? "stencil" : "general", t_build * 1e3, t_compiled * 1e3,
                t_reference * 1e3, t_reference / t_compiled, gap);
}

} // namespace

int main() {
    int threads = 1;
#ifdef _OPENMP
    threads = omp_get_max_threads();
#endif
    std::printf("right-hand-side kernel benchmark (OpenMP threads: %d)\n\n", threads);
    std::printf("%-10s %-8s %-8s %10s %12s %12s %9s %10s\n", "grid", "spec", "path",
                "build ms", "compiled ms", "serial ms", "speedup", "linf gap");
    for (const int nt : {64, 128, 256}) {
        bench_case(nt, 2 * nt, "const", constant_spec());
        bench_case(nt, 2 * nt, "varying", varying_spec());
        bench_case(nt, 2 * nt, "coupled", coupled_spec());
    }
    return 0;
}
