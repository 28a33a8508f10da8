#include "manifp/fpe_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace manifp {

namespace {

// Real-axis stability interval of the classic fourth-order Runge-Kutta method.
constexpr double kRk4Bound = 2.785;

bool zero_component(const ScalarField& f) {
    return f.is_constant() && f.constant_value() == 0.0;
}

// A spec compiles to the banded stencil when every coefficient is
// axisymmetric and no noise channel couples both frame legs: the diffusion
// tensor is then diagonal with row-constant entries, so each face flux
// involves only the two adjacent cells and folds into per-row coefficients.
bool stencil_eligible(const SdeSpec& spec) {
    if (!spec.drift.c1.is_axisymmetric() || !spec.drift.c2.is_axisymmetric()) return false;
    for (const auto& s : spec.sigmas) {
        if (!s.c1.is_axisymmetric() || !s.c2.is_axisymmetric()) return false;
        if (!zero_component(s.c1) && !zero_component(s.c2)) return false;
    }
    return true;
}

} // namespace

struct CompiledRhs::Impl {
    Chart chart;
    Convention conv = Convention::Stratonovich;
    int nt = 0, np = 0, half = 0, n = 0, m = 0;
    bool sphere = true;
    bool stencil = false;
    double dth = 0.0, dph = 0.0, inv_dth = 0.0, inv_dph = 0.0;

    std::vector<double> r_cell, inv_r;     // area factor per cell row
    std::vector<double> s_row, conn_row;   // frame factor and connection per row
    std::vector<double> r_face, cfac_face; // r and r*conn at theta faces

    // banded mode: per-row 5-point coefficients plus safe neighbor row indices
    // (pole rows point at themselves with a zero coefficient)
    std::vector<double> cS, cN, cC, cW, cE;
    std::vector<int> row_jm, row_jp;

    // general mode samples, per channel. The staged divergence u_i = div(p s_i)
    // enters face fluxes in the product-rule form
    //   (u r)(face) = (r a)'(face) pbar + (r a)(face) dp/dtheta
    //               + b_phi(face) pbar + b(face) dp/dphi,
    // so every geometric factor is evaluated where the flux lives and the
    // advective and staged pole limits cancel exactly.
    std::vector<std::vector<double>> a_tface, b_pface; // sigma1 at theta faces, sigma2 at phi faces
    std::vector<std::vector<double>> dra_tface, ra_tface; // (r a)' and r a at theta faces
    std::vector<std::vector<double>> db_tface, sb_tface;  // b_phi and b at theta faces
    std::vector<std::vector<double>> dra_pface, ra_pface; // (r a)' and r a at phi faces
    std::vector<std::vector<double>> db_pface;            // b_phi at phi faces
    std::vector<double> dtt_cell, dtp_cell, dpp_cell;  // diffusion components at cells
    std::vector<double> xt_tface, xp_pface;            // 0.5*r_f*X1 at theta faces, 0.5*X2 at phi faces

    // work buffers reused across evaluations
    std::vector<double> flux_t, flux_p;
    std::vector<std::vector<double>> work;

    // stability scan results
    double dtt_max = 0.0, dpp_max = 0.0, dtp_max = 0.0;
    double vt_max = 0.0, vp_max = 0.0, r_min = 1.0;

    Impl(const DensityGrid& g, const SdeSpec& spec) { compile(g, spec); }

    void compile(const DensityGrid& g, const SdeSpec& spec) {
        chart = g.chart;
        conv = spec.convention;
        nt = g.n_theta;
        np = g.n_phi;
        half = np / 2;
        n = nt * np;
        m = spec.num_channels();
        sphere = chart.is_sphere();
        dth = g.d_theta;
        dph = g.d_phi;
        inv_dth = 1.0 / dth;
        inv_dph = 1.0 / dph;

        r_cell.resize(nt);
        inv_r.resize(nt);
        s_row.resize(nt);
        conn_row.resize(nt);
        for (int j = 0; j < nt; ++j) {
            const double tj = g.theta(j);
            r_cell[j] = chart.area_factor(tj);
            inv_r[j] = 1.0 / r_cell[j];
            s_row[j] = chart.frame2(tj);
            conn_row[j] = chart.conn(tj);
        }
        r_min = *std::min_element(r_cell.begin(), r_cell.end());
        r_face.resize(nt + 1);
        cfac_face.resize(nt + 1);
        for (int f = 0; f <= nt; ++f) {
            const double tf = f * dth;
            r_face[f] = chart.area_factor(tf);
            cfac_face[f] = sphere ? std::cos(tf) : 0.0;
        }

        stencil = stencil_eligible(spec);
        if (stencil) {
            compile_stencil(g, spec);
        } else {
            compile_general(g, spec);
        }
    }

    void compile_stencil(const DensityGrid& g, const SdeSpec& spec) {
        std::vector<double> dtt_c(nt, 0.0), dpp_c(nt, 0.0), x2_c(nt, 0.0);
        for (int j = 0; j < nt; ++j) {
            const double tj = g.theta(j);
            for (const auto& s : spec.sigmas) {
                if (zero_component(s.c2)) {
                    const double a = s.c1(tj, 0.0);
                    dtt_c[j] += a * a;
                } else {
                    const double b = s.c2(tj, 0.0);
                    dpp_c[j] += b * b;
                }
            }
            x2_c[j] = spec.drift.c2(tj, 0.0);
            dtt_max = std::max(dtt_max, dtt_c[j]);
            dpp_max = std::max(dpp_max, dpp_c[j]);
            vp_max = std::max(vp_max, std::abs(x2_c[j]));
        }

        // Face coefficients: flux through theta face f is A[f]*p(below) +
        // B[f]*p(above). Pole faces (sphere) carry zero flux.
        std::vector<double> A(nt + 1, 0.0), B(nt + 1, 0.0);
        const int f_begin = sphere ? 1 : 0;
        for (int f = f_begin; f < nt; ++f) {
            const double tf = f * dth;
            const int jm = (f - 1 + nt) % nt;
            const int jc = f;
            const double x1f = spec.drift.c1(tf, 0.0);
            vt_max = std::max(vt_max, std::abs(x1f));
            const double base = 0.5 * r_face[f] * x1f;
            if (conv == Convention::Stratonovich) {
                // product-rule staging: a(face) * [(r a)'(face) pbar + r a(face) dp]
                double grad = 0.0, diff = 0.0;
                for (const auto& s : spec.sigmas) {
                    if (!zero_component(s.c2)) continue;
                    const double af = s.c1(tf, 0.0);
                    const double daf = s.c1.jet1({tf, 0.0}).dt;
                    const double dra = (sphere ? std::cos(tf) : 0.0) * af + r_face[f] * daf;
                    grad += af * dra;
                    diff += af * r_face[f] * af;
                }
                A[f] = base - 0.25 * grad + 0.5 * inv_dth * diff;
                B[f] = base - 0.25 * grad - 0.5 * inv_dth * diff;
            } else {
                A[f] = base + 0.5 * r_face[f] * dtt_c[jm] * inv_dth -
                       0.25 * cfac_face[f] * (dtt_c[jm] - dpp_c[jm]);
                B[f] = base - 0.5 * r_face[f] * dtt_c[jc] * inv_dth -
                       0.25 * cfac_face[f] * (dtt_c[jc] - dpp_c[jc]);
            }
        }
        if (!sphere) {
            A[nt] = A[0];
            B[nt] = B[0];
        }

        cS.resize(nt);
        cN.resize(nt);
        cC.resize(nt);
        cW.resize(nt);
        cE.resize(nt);
        row_jm.resize(nt);
        row_jp.resize(nt);
        for (int j = 0; j < nt; ++j) {
            const double irt = inv_dth * inv_r[j];
            const double irp = inv_dph * inv_r[j];
            const double cj = 0.5 * x2_c[j] + 0.5 * dpp_c[j] * inv_dph * inv_r[j];
            const double ej = 0.5 * x2_c[j] - 0.5 * dpp_c[j] * inv_dph * inv_r[j];
            cS[j] = A[j] * irt;
            cN[j] = -B[j + 1] * irt;
            cC[j] = (B[j] - A[j + 1]) * irt + (ej - cj) * irp;
            cW[j] = cj * irp;
            cE[j] = -ej * irp;
            row_jm[j] = j > 0 ? j - 1 : (sphere ? 0 : nt - 1);
            row_jp[j] = j < nt - 1 ? j + 1 : (sphere ? nt - 1 : 0);
        }
    }

    void compile_general(const DensityGrid& g, const SdeSpec& spec) {
        xt_tface.assign(static_cast<size_t>(nt + 1) * np, 0.0);
        xp_pface.assign(n, 0.0);
        const int f_begin = sphere ? 1 : 0;
        for (int f = f_begin; f < nt; ++f) {
            const double tf = f * dth;
            for (int k = 0; k < np; ++k) {
                const double x1 = spec.drift.c1(tf, k * dph);
                xt_tface[f * np + k] = 0.5 * r_face[f] * x1;
                vt_max = std::max(vt_max, std::abs(x1));
            }
        }
        for (int j = 0; j < nt; ++j) {
            const double tj = g.theta(j);
            for (int k = 0; k < np; ++k) {
                double pf = (k - 0.5) * dph;
                if (pf < 0.0) pf += kTwoPi;
                const double x2 = spec.drift.c2(tj, pf);
                xp_pface[j * np + k] = 0.5 * x2;
                vp_max = std::max(vp_max, std::abs(x2));
            }
        }

        if (conv == Convention::Stratonovich) {
            const size_t nf = static_cast<size_t>(nt + 1) * np;
            a_tface.assign(m, std::vector<double>(nf, 0.0));
            dra_tface.assign(m, std::vector<double>(nf, 0.0));
            ra_tface.assign(m, std::vector<double>(nf, 0.0));
            db_tface.assign(m, std::vector<double>(nf, 0.0));
            sb_tface.assign(m, std::vector<double>(nf, 0.0));
            b_pface.assign(m, std::vector<double>(n, 0.0));
            dra_pface.assign(m, std::vector<double>(n, 0.0));
            ra_pface.assign(m, std::vector<double>(n, 0.0));
            db_pface.assign(m, std::vector<double>(n, 0.0));
            for (int i = 0; i < m; ++i) {
                const FieldSpec& s = spec.sigmas[i];
                for (int j = 0; j < nt; ++j) {
                    const double tj = g.theta(j);
                    const double drj = sphere ? std::cos(tj) : 0.0;
                    for (int k = 0; k < np; ++k) {
                        const int idx = j * np + k;
                        const double a = s.c1(tj, k * dph);
                        const double b = s.c2(tj, k * dph);
                        dtt_max = std::max(dtt_max, a * a);
                        dpp_max = std::max(dpp_max, b * b);
                        dtp_max = std::max(dtp_max, std::abs(a * b));
                        double pf = (k - 0.5) * dph;
                        if (pf < 0.0) pf += kTwoPi;
                        const ChartPoint qf{tj, pf};
                        const double af = s.c1(qf);
                        b_pface[i][idx] = s.c2(qf);
                        dra_pface[i][idx] = drj * af + r_cell[j] * s.c1.jet1(qf).dt;
                        ra_pface[i][idx] = r_cell[j] * af;
                        db_pface[i][idx] = s.c2.jet1(qf).dp;
                    }
                }
                for (int f = f_begin; f < nt; ++f) {
                    const double tf = f * dth;
                    const double drf = sphere ? std::cos(tf) : 0.0;
                    for (int k = 0; k < np; ++k) {
                        const ChartPoint qf{tf, k * dph};
                        const double a = s.c1(qf);
                        a_tface[i][f * np + k] = a;
                        dra_tface[i][f * np + k] = drf * a + r_face[f] * s.c1.jet1(qf).dt;
                        ra_tface[i][f * np + k] = r_face[f] * a;
                        db_tface[i][f * np + k] = s.c2.jet1(qf).dp;
                        sb_tface[i][f * np + k] = s.c2(qf);
                    }
                }
            }
        } else {
            dtt_cell.assign(n, 0.0);
            dtp_cell.assign(n, 0.0);
            dpp_cell.assign(n, 0.0);
            for (int j = 0; j < nt; ++j) {
                const double tj = g.theta(j);
                for (int k = 0; k < np; ++k) {
                    const int idx = j * np + k;
                    for (const auto& s : spec.sigmas) {
                        const double a = s.c1(tj, k * dph);
                        const double b = s.c2(tj, k * dph);
                        dtt_cell[idx] += a * a;
                        dtp_cell[idx] += a * b;
                        dpp_cell[idx] += b * b;
                    }
                    dtt_max = std::max(dtt_max, dtt_cell[idx]);
                    dpp_max = std::max(dpp_max, dpp_cell[idx]);
                    dtp_max = std::max(dtp_max, std::abs(dtp_cell[idx]));
                }
            }
            work.assign(3, std::vector<double>(n, 0.0));
        }
        flux_t.assign(static_cast<size_t>(nt + 1) * np, 0.0);
        flux_p.assign(n, 0.0);
    }

    // Continuation of staged cell products beyond the theta range: periodic on
    // the torus, antipodal (half-turn azimuth shift) across the sphere poles.
    // Every staged product here is even under that continuation.
    double ghost(const std::vector<double>& arr, int j, int k) const {
        if (j >= 0 && j < nt) return arr[j * np + k];
        if (!sphere) return arr[((j + nt) % nt) * np + k];
        const int jj = j < 0 ? 0 : nt - 1;
        return arr[jj * np + (k + half) % np];
    }

    // Same continuation for the density itself (scalar, even across poles).
    double ghost_p(const double* p, int j, int k) const {
        if (j >= 0 && j < nt) return p[j * np + k];
        if (!sphere) return p[((j + nt) % nt) * np + k];
        const int jj = j < 0 ? 0 : nt - 1;
        return p[jj * np + (k + half) % np];
    }

    void eval(const double* p, double* out) {
        if (stencil) {
            eval_stencil(p, out);
        } else if (conv == Convention::Stratonovich) {
            eval_general_strat(p, out);
        } else {
            eval_general_ito(p, out);
        }
    }

    void eval_stencil(const double* p, double* out) const {
#pragma omp parallel for schedule(static)
        for (int j = 0; j < nt; ++j) {
            const double* pm = p + static_cast<size_t>(row_jm[j]) * np;
            const double* pp = p + static_cast<size_t>(row_jp[j]) * np;
            const double* pc = p + static_cast<size_t>(j) * np;
            double* o = out + static_cast<size_t>(j) * np;
            const double s = cS[j], nn = cN[j], c = cC[j], w = cW[j], e = cE[j];
            o[0] = s * pm[0] + nn * pp[0] + c * pc[0] + w * pc[np - 1] + e * pc[1];
            for (int k = 1; k < np - 1; ++k)
                o[k] = s * pm[k] + nn * pp[k] + c * pc[k] + w * pc[k - 1] + e * pc[k + 1];
            o[np - 1] =
                s * pm[np - 1] + nn * pp[np - 1] + c * pc[np - 1] + w * pc[np - 2] + e * pc[0];
        }
    }

    void eval_general_strat(const double* p, double* out) {
        const int f_begin = sphere ? 1 : 0;
#pragma omp parallel for schedule(static)
        for (int f = f_begin; f < nt; ++f) {
            const int jm = f - 1;
            const double* prow = p + static_cast<size_t>(f) * np;
            const double* pmrow = p + static_cast<size_t>(jm) * np;
            for (int k = 0; k < np; ++k) {
                const int kp = k + 1 < np ? k + 1 : 0;
                const int km = k > 0 ? k - 1 : np - 1;
                const int idx = f * np + k;
                const double pbar = 0.5 * (pmrow[k] + prow[k]);
                const double dpt = (prow[k] - pmrow[k]) * inv_dth;
                const double dpp = 0.25 * inv_dph *
                                   (prow[kp] - prow[km] + pmrow[kp] - pmrow[km]);
                double dsum = 0.0;
                for (int i = 0; i < m; ++i) {
                    const double ur = dra_tface[i][idx] * pbar + ra_tface[i][idx] * dpt +
                                      db_tface[i][idx] * pbar + sb_tface[i][idx] * dpp;
                    dsum += a_tface[i][idx] * ur;
                }
                flux_t[idx] = xt_tface[idx] * (pmrow[k] + prow[k]) - 0.5 * dsum;
            }
        }
#pragma omp parallel for schedule(static)
        for (int j = 0; j < nt; ++j) {
            for (int k = 0; k < np; ++k) {
                const int km = k > 0 ? k - 1 : np - 1;
                const int idx = j * np + k;
                const double pbar = 0.5 * (p[j * np + km] + p[idx]);
                const double dpf = (p[idx] - p[j * np + km]) * inv_dph;
                const double dpt = 0.25 * inv_dth *
                                   (ghost_p(p, j + 1, k) - ghost_p(p, j - 1, k) +
                                    ghost_p(p, j + 1, km) - ghost_p(p, j - 1, km));
                double dsum = 0.0;
                for (int i = 0; i < m; ++i) {
                    const double ur = dra_pface[i][idx] * pbar + ra_pface[i][idx] * dpt +
                                      db_pface[i][idx] * pbar + b_pface[i][idx] * dpf;
                    dsum += b_pface[i][idx] * ur;
                }
                flux_p[idx] = xp_pface[idx] * (p[j * np + km] + p[idx]) -
                              0.5 * dsum * inv_r[j];
            }
        }
        combine(out);
    }

    void eval_general_ito(const double* p, double* out) {
        double* pdtt = work[0].data();
        double* pdtp = work[1].data();
        double* pdpp = work[2].data();
#pragma omp parallel for schedule(static)
        for (int idx = 0; idx < n; ++idx) {
            pdtt[idx] = dtt_cell[idx] * p[idx];
            pdtp[idx] = dtp_cell[idx] * p[idx];
            pdpp[idx] = dpp_cell[idx] * p[idx];
        }
        const int f_begin = sphere ? 1 : 0;
#pragma omp parallel for schedule(static)
        for (int f = f_begin; f < nt; ++f) {
            const int jm = (f - 1 + nt) % nt;
            for (int k = 0; k < np; ++k) {
                const int kp = k + 1 < np ? k + 1 : 0;
                const int km = k > 0 ? k - 1 : np - 1;
                const double dd = r_face[f] * (pdtt[f * np + k] - pdtt[jm * np + k]) * inv_dth;
                const double tp4 = 0.25 * inv_dph *
                                   (pdtp[f * np + kp] - pdtp[f * np + km] + pdtp[jm * np + kp] -
                                    pdtp[jm * np + km]);
                const double del = 0.5 * cfac_face[f] *
                                   (pdtt[jm * np + k] - pdpp[jm * np + k] + pdtt[f * np + k] -
                                    pdpp[f * np + k]);
                flux_t[f * np + k] = xt_tface[f * np + k] * (p[jm * np + k] + p[f * np + k]) -
                                     0.5 * (dd + tp4 + del);
            }
        }
#pragma omp parallel for schedule(static)
        for (int j = 0; j < nt; ++j) {
            for (int k = 0; k < np; ++k) {
                const int km = k > 0 ? k - 1 : np - 1;
                const double dq = 0.25 * inv_dth *
                                  (ghost(work[1], j + 1, k) - ghost(work[1], j - 1, k) +
                                   ghost(work[1], j + 1, km) - ghost(work[1], j - 1, km));
                const double v2 = dq + s_row[j] * inv_dph * (pdpp[j * np + k] - pdpp[j * np + km]) +
                                  conn_row[j] * (pdtp[j * np + km] + pdtp[j * np + k]);
                flux_p[j * np + k] =
                    xp_pface[j * np + k] * (p[j * np + km] + p[j * np + k]) - 0.5 * v2;
            }
        }
        combine(out);
    }

    void combine(double* out) const {
#pragma omp parallel for schedule(static)
        for (int j = 0; j < nt; ++j) {
            const int fout = sphere ? j + 1 : (j + 1) % nt;
            const int fin = j;
            const double* ftop = flux_t.data() + static_cast<size_t>(fout) * np;
            const double* fbot = flux_t.data() + static_cast<size_t>(fin) * np;
            const double* fp = flux_p.data() + static_cast<size_t>(j) * np;
            double* o = out + static_cast<size_t>(j) * np;
            const double ir = inv_r[j];
            for (int k = 0; k < np; ++k) {
                const int kp = k + 1 < np ? k + 1 : 0;
                o[k] = -ir * ((ftop[k] - fbot[k]) * inv_dth + (fp[kp] - fp[k]) * inv_dph);
            }
        }
    }

    double lambda_estimate() const {
        const double lp = r_min * dph;
        return 2.0 * dtt_max / (dth * dth) + 2.0 * dpp_max / (lp * lp) +
               2.0 * dtp_max / (dth * lp) + vt_max / dth + vp_max / lp;
    }

    double ceiling() const {
        const double lam = lambda_estimate();
        if (lam <= 0.0) return std::numeric_limits<double>::infinity();
        return kRk4Bound / lam;
    }

    double suggested(double cfl) const {
        const double lp = r_min * dph;
        const double denom = std::max({dtt_max, dpp_max, 1e-12});
        double dt = cfl * std::min(dth * dth, lp * lp) / denom;
        if (vt_max > 0.0) dt = std::min(dt, cfl * dth / vt_max);
        if (vp_max > 0.0) dt = std::min(dt, cfl * lp / vp_max);
        dt = std::min(dt, 0.9 * ceiling());
        return dt;
    }
};

CompiledRhs::CompiledRhs(const DensityGrid& shape, const SdeSpec& spec)
    : impl_(std::make_unique<Impl>(shape, spec)) {}
CompiledRhs::~CompiledRhs() = default;
CompiledRhs::CompiledRhs(CompiledRhs&&) noexcept = default;
CompiledRhs& CompiledRhs::operator=(CompiledRhs&&) noexcept = default;

void CompiledRhs::eval(const double* p, double* out) { impl_->eval(p, out); }
bool CompiledRhs::stencil_mode() const { return impl_->stencil; }
double CompiledRhs::suggested_dt(double cfl_safety) const { return impl_->suggested(cfl_safety); }
double CompiledRhs::stability_ceiling() const { return impl_->ceiling(); }

DensityGrid fp_rhs_strat(const DensityGrid& p, const SdeSpec& spec) {
    require_convention(spec, Convention::Stratonovich, "fp_rhs_strat");
    DensityGrid out = p;
    CompiledRhs rhs(p, spec);
    rhs.eval(p.v.data(), out.v.data());
    return out;
}

DensityGrid fp_rhs_ito(const DensityGrid& p, const SdeSpec& spec) {
    require_convention(spec, Convention::Ito, "fp_rhs_ito");
    DensityGrid out = p;
    CompiledRhs rhs(p, spec);
    rhs.eval(p.v.data(), out.v.data());
    return out;
}

DensityGrid fp_rhs_reference(const DensityGrid& g, const SdeSpec& spec) {
    const Chart ch = g.chart;
    const int nt = g.n_theta, np = g.n_phi, half = np / 2;
    const bool sphere = ch.is_sphere();
    const double dth = g.d_theta, dph = g.d_phi;
    const auto& sig = spec.sigmas;
    const int m = static_cast<int>(sig.size());
    const bool strat = spec.convention == Convention::Stratonovich;

    auto wrapk = [&](int k) { return (k % np + np) % np; };
    // Cell lookup with continuation: resolves (j, k) outside the theta range
    // to the wrapped torus cell or the antipodal sphere cell.
    auto resolve = [&](int j, int k, int& jj, int& kk) {
        if (j >= 0 && j < nt) {
            jj = j;
            kk = wrapk(k);
        } else if (!sphere) {
            jj = (j + nt) % nt;
            kk = wrapk(k);
        } else {
            jj = j < 0 ? 0 : nt - 1;
            kk = wrapk(k + half);
        }
    };
    auto pv = [&](int j, int k) { // density at a (ghost) cell
        int jj, kk;
        resolve(j, k, jj, kk);
        return g.at(jj, kk);
    };
    auto pdc = [&](int a, int b, int j, int k) { // p * D_ab at a (ghost) cell
        int jj, kk;
        resolve(j, k, jj, kk);
        const ChartPoint q = g.point(jj, kk);
        double s = 0.0;
        for (int i = 0; i < m; ++i) {
            const double ca = a == 0 ? sig[i].c1(q) : sig[i].c2(q);
            const double cb = b == 0 ? sig[i].c1(q) : sig[i].c2(q);
            s += ca * cb;
        }
        return g.at(jj, kk) * s;
    };

    std::vector<double> ft(static_cast<size_t>(nt + 1) * np, 0.0);
    std::vector<double> fp(static_cast<size_t>(nt) * np, 0.0);

    const int f_begin = sphere ? 1 : 0;
    for (int f = f_begin; f < nt; ++f) {
        const double tf = f * dth;
        const double rf = ch.area_factor(tf);
        const double cf = sphere ? std::cos(tf) : 0.0;
        const int jm = (f - 1 + nt) % nt;
        for (int k = 0; k < np; ++k) {
            const ChartPoint qf{tf, g.phi(k)};
            const double pbar = 0.5 * (g.at(jm, k) + g.at(f, k));
            double flux = rf * spec.drift.c1(qf) * pbar;
            if (strat) {
                const double dpt = (g.at(f, k) - g.at(jm, k)) / dth;
                const double dpp = 0.25 / dph *
                                   (pv(f, k + 1) - pv(f, k - 1) + pv(jm, k + 1) -
                                    pv(jm, k - 1));
                const double drf = sphere ? std::cos(tf) : 0.0;
                for (int i = 0; i < m; ++i) {
                    const double a = sig[i].c1(qf);
                    const double at = sig[i].c1.jet1(qf).dt;
                    const double b = sig[i].c2(qf);
                    const double bp = sig[i].c2.jet1(qf).dp;
                    const double ur = (drf * a + rf * at) * pbar + rf * a * dpt +
                                      bp * pbar + b * dpp;
                    flux -= 0.5 * a * ur;
                }
            } else {
                const double dd = rf * (pdc(0, 0, f, k) - pdc(0, 0, jm, k)) / dth;
                const double tp4 = 0.25 / dph *
                                   (pdc(0, 1, f, k + 1) - pdc(0, 1, f, k - 1) +
                                    pdc(0, 1, jm, k + 1) - pdc(0, 1, jm, k - 1));
                const double del = 0.5 * cf *
                                   (pdc(0, 0, jm, k) - pdc(1, 1, jm, k) + pdc(0, 0, f, k) -
                                    pdc(1, 1, f, k));
                flux -= 0.5 * (dd + tp4 + del);
            }
            ft[f * np + k] = flux;
        }
    }
    for (int j = 0; j < nt; ++j) {
        const double tj = g.theta(j);
        const double rj = ch.area_factor(tj);
        const double sj = ch.frame2(tj);
        const double cj = ch.conn(tj);
        for (int k = 0; k < np; ++k) {
            const int km = wrapk(k - 1);
            double pface = (k - 0.5) * dph;
            if (pface < 0.0) pface += kTwoPi;
            const ChartPoint qf{tj, pface};
            const double pbar = 0.5 * (g.at(j, km) + g.at(j, k));
            double flux = spec.drift.c2(qf) * pbar;
            if (strat) {
                const double dpf = (g.at(j, k) - g.at(j, km)) / dph;
                const double dpt = 0.25 / dth *
                                   (pv(j + 1, k) - pv(j - 1, k) + pv(j + 1, km) -
                                    pv(j - 1, km));
                const double drj = sphere ? std::cos(tj) : 0.0;
                for (int i = 0; i < m; ++i) {
                    const double a = sig[i].c1(qf);
                    const double at = sig[i].c1.jet1(qf).dt;
                    const double b = sig[i].c2(qf);
                    const double bp = sig[i].c2.jet1(qf).dp;
                    const double ur = (drj * a + rj * at) * pbar + rj * a * dpt +
                                      bp * pbar + b * dpf;
                    flux -= 0.5 * b * ur / rj;
                }
            } else {
                const double dq = 0.25 / dth *
                                  (pdc(0, 1, j + 1, k) - pdc(0, 1, j - 1, k) +
                                   pdc(0, 1, j + 1, km) - pdc(0, 1, j - 1, km));
                const double v2 = dq + sj * (pdc(1, 1, j, k) - pdc(1, 1, j, km)) / dph +
                                  cj * (pdc(0, 1, j, km) + pdc(0, 1, j, k));
                flux -= 0.5 * v2;
            }
            fp[j * np + k] = flux;
        }
    }

    DensityGrid out = g;
    for (int j = 0; j < nt; ++j) {
        const int fout = sphere ? j + 1 : (j + 1) % nt;
        const double ir = 1.0 / g.row_r[j];
        for (int k = 0; k < np; ++k) {
            const int kp = wrapk(k + 1);
            out.at(j, k) = -ir * ((ft[fout * np + k] - ft[j * np + k]) / dth +
                                  (fp[j * np + kp] - fp[j * np + k]) / dph);
        }
    }
    return out;
}

double fp_rhs_at(const Chart& chart, const SdeSpec& spec, const ScalarField& p, ChartPoint x) {
    require_interior(chart, x, chart.pole_margin);
    const Jet2 pj = p.jet2(x);
    const Jet2 x1 = spec.drift.c1.jet2(x);
    const Jet2 x2 = spec.drift.c2.jet2(x);
    const Jet1 div_px = detail::div_jet(chart, x.theta, pj * x1, pj * x2);
    double acc = -div_px.v;
    const double s = chart.frame2(x.theta);
    const double c = chart.conn(x.theta);
    if (spec.convention == Convention::Stratonovich) {
        for (const auto& sigma : spec.sigmas) {
            const Jet2 s1 = sigma.c1.jet2(x);
            const Jet2 s2 = sigma.c2.jet2(x);
            const Jet1 si = detail::div_jet(chart, x.theta, pj * s1, pj * s2);
            const double d1t = si.dt * s1.v + si.v * s1.dt;
            const double d2p = si.dp * s2.v + si.v * s2.dp;
            acc += 0.5 * (d1t + s * d2p + c * si.v * s1.v);
        }
        return acc;
    }
    const DiffusionTensor d = spec.diffusion();
    const Jet2 t11 = pj * d.component_jet(0, 0, x);
    const Jet2 t12 = pj * d.component_jet(0, 1, x);
    const Jet2 t22 = pj * d.component_jet(1, 1, x);
    Jet1 v1, v2;
    detail::tensor_div_jet(chart, x.theta, t11, t12, t22, v1, v2);
    acc += 0.5 * (v1.dt + s * v2.dp + c * v1.v);
    return acc;
}

double auto_dt(const DensityGrid& shape, const SdeSpec& spec, double cfl_safety) {
    return CompiledRhs(shape, spec).suggested_dt(cfl_safety);
}

void step(DensityGrid& p, CompiledRhs& rhs, double dt, double target_mass, EvolveStats& stats) {
    const int n = p.size();
    static thread_local std::vector<double> kv, acc, y;
    kv.resize(n);
    acc.resize(n);
    y.resize(n);
    double* pv = p.v.data();
    double* k = kv.data();
    double* a = acc.data();
    double* yv = y.data();

    rhs.eval(pv, k);
    for (int i = 0; i < n; ++i) {
        a[i] = k[i];
        yv[i] = pv[i] + 0.5 * dt * k[i];
    }
    rhs.eval(yv, k);
    for (int i = 0; i < n; ++i) {
        a[i] += 2.0 * k[i];
        yv[i] = pv[i] + 0.5 * dt * k[i];
    }
    rhs.eval(yv, k);
    for (int i = 0; i < n; ++i) {
        a[i] += 2.0 * k[i];
        yv[i] = pv[i] + dt * k[i];
    }
    rhs.eval(yv, k);
    const double c6 = dt / 6.0;
    for (int i = 0; i < n; ++i) pv[i] += c6 * (a[i] + k[i]);

    long events = 0;
    double removed = 0.0;
    detail::KahanSum pos;
    for (int j = 0; j < p.n_theta; ++j) {
        const double w = p.w(j);
        double* row = pv + static_cast<size_t>(j) * p.n_phi;
        for (int kk = 0; kk < p.n_phi; ++kk) {
            const double x = row[kk];
            if (!std::isfinite(x))
                throw NonFiniteDensity("non-finite density value during time stepping");
            if (x < 0.0) {
                removed -= x * w;
                ++events;
                row[kk] = 0.0;
            } else {
                pos.add(x * w);
            }
        }
    }
    if (events > 0) {
        const double pm = pos.get();
        if (!(pm > 0.0)) throw NonFiniteDensity("density lost all mass after clipping");
        const double sc = target_mass / pm;
        for (int i = 0; i < n; ++i) pv[i] *= sc;
        stats.clip_events += events;
        stats.clip_mass += removed;
    }
    ++stats.steps;
}

EvolveStats evolve(DensityGrid& p, const SdeSpec& spec, const SolverConfig& config) {
    EvolveStats st;
    CompiledRhs rhs(p, spec);
    const double m0 = mass(p);
    double dt = config.dt;
    const double ceil_dt = rhs.stability_ceiling();
    if (dt <= 0.0) {
        dt = rhs.suggested_dt(config.cfl_safety);
        if (!std::isfinite(dt) || dt <= 0.0) dt = config.t_final;
    } else if (std::isfinite(ceil_dt) && dt > ceil_dt) {
        throw CflViolation("dt=" + std::to_string(dt) + " exceeds the stability ceiling " +
                           std::to_string(ceil_dt) + " for this grid and spec");
    }
    st.dt = dt;
    st.mass_trace.emplace_back(0.0, m0);
    st.clip_trace.emplace_back(0.0, 0.0);

    std::vector<double> marks = config.snapshot_times;
    std::sort(marks.begin(), marks.end());
    for (double tm : marks) {
        if (tm < 0.0 || tm > config.t_final + 1e-12) {
            throw ConfigError("snapshot time " + std::to_string(tm) +
                              " outside [0, t_final]");
        }
    }
    const long total = (config.t_final > 0.0 && dt > 0.0)
                           ? std::max<long>(1, static_cast<long>(
                                                   std::ceil(config.t_final / dt - 1e-9)))
                           : 0;
    const long stride = std::max<long>(1, total / 256);
    double t = 0.0;
    long done = 0;
    std::size_t mi = 0;
    while (mi < marks.size() && marks[mi] <= 1e-15) {
        st.snapshots.emplace_back(0.0, p);
        ++mi;
    }
    // March in legs that land exactly on each snapshot time, then on t_final.
    auto run_leg = [&](double t_end) {
        if (t_end <= t + 1e-15 || dt <= 0.0) {
            t = std::max(t, t_end);
            return;
        }
        const double leg = t_end - t;
        const long ns = std::max<long>(1, static_cast<long>(std::ceil(leg / dt - 1e-9)));
        const double t0 = t;
        for (long i = 0; i < ns; ++i) {
            const double dt_i = (i == ns - 1) ? t_end - (t0 + i * dt) : dt;
            step(p, rhs, dt_i, m0, st);
            ++done;
            if (done % stride == 0 || i == ns - 1) {
                const double tc = (i == ns - 1) ? t_end : t0 + (i + 1) * dt;
                st.mass_trace.emplace_back(tc, mass(p));
                st.clip_trace.emplace_back(tc, st.clip_mass);
            }
        }
        t = t_end;
    };
    for (; mi < marks.size(); ++mi) {
        run_leg(marks[mi]);
        st.snapshots.emplace_back(t, p);
    }
    run_leg(config.t_final);
    st.final_mass = mass(p);
    return st;
}

double adjoint_residual(const DensityGrid& shape, const SdeSpec& spec, const ScalarField& p,
                        const ScalarField& q) {
    const Chart& ch = shape.chart;
    const double lhs = quadrature(
        shape, [&](ChartPoint x) { return p(x) * apply_generator(ch, spec, q, x); });
    DensityGrid pg = sample_field(shape, p);
    const DensityGrid rhs = spec.convention == Convention::Stratonovich ? fp_rhs_strat(pg, spec)
                                                                        : fp_rhs_ito(pg, spec);
    const DensityGrid qg = sample_field(shape, q);
    return std::abs(lhs - inner_product(rhs, qg));
}

} // namespace manifp
