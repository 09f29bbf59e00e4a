#include "pxun/proximal.hpp"

#include <cstdio>
#include <fstream>

#include "pxun/metrics.hpp"

namespace pxun::proximal {

Image prox_f(const Image& p, const Mat& y, const sensing::MeasurementOperator& op, double mu) {
    if (mu <= 0.0) throw ValueError("prox_f: mu must be positive");
    if (p.rows() != op.image_rows() || p.cols() != op.image_cols())
        throw ShapeError("prox_f: image extents do not match operator");
    if (y.rows() != op.meas_rows() || y.cols() != op.meas_cols())
        throw ShapeError("prox_f: measurement extents do not match operator");
    const Mat residual = y - matmul(matmul(op.h_mat, p), transpose(op.w_mat));
    const Mat corr = matmul(matmul(transpose(op.h_mat), residual), op.w_mat);
    return p + (1.0 / (1.0 + mu)) * corr;
}

Image prox_g_bar(const Image& q, const Image& x_gt, const StepParams& sp) {
    if (!q.same_shape(x_gt)) throw ShapeError("prox_g_bar: shape mismatch");
    const double denom = sp.mu + sp.lambda;
    if (denom <= 0.0) throw ValueError("prox_g_bar: mu + lambda must be positive");
    Image out(q.rows(), q.cols());
    for (std::size_t i = 0; i < out.size(); ++i)
        out.values()[i] = (sp.mu * q.values()[i] + sp.lambda * x_gt.values()[i]) / denom;
    return out;
}

IterateState hqs_step(const IterateState& s, const Mat& y, const sensing::MeasurementOperator& op,
                      const RestorerFn& restorer, double mu) {
    IterateState next;
    next.scheme = Scheme::HQS;
    next.z = prox_f(s.x, y, op, mu);
    next.x = restorer(next.z, s.k, mu);
    next.k = s.k + 1;
    return next;
}

IterateState admm_step(const IterateState& s, const Mat& y, const sensing::MeasurementOperator& op,
                       const RestorerFn& restorer, double mu) {
    if (s.u.empty()) throw ValueError("admm_step: state has no multiplier");
    IterateState next;
    next.scheme = Scheme::ADMM;
    const Image p = s.x - (1.0 / mu) * s.u;
    next.z = prox_f(p, y, op, mu);
    next.x = restorer(next.z + (1.0 / mu) * s.u, s.k, mu);
    next.u = s.u + mu * (next.z - next.x);
    next.k = s.k + 1;
    return next;
}

Trajectory run(Scheme scheme, const sensing::Measurement& y, const sensing::MeasurementOperator& op,
               const RestorerFn& restorer, int k_steps, const std::vector<double>& mus) {
    if (k_steps < 1) throw ValueError("run: need at least one step");
    if (static_cast<int>(mus.size()) != k_steps) throw ValueError("run: need one mu per step");
    Trajectory traj;
    traj.scheme = scheme;
    IterateState s;
    s.scheme = scheme;
    s.x = sensing::adjoint(op, y);
    if (scheme == Scheme::ADMM) s.u = Image(s.x.rows(), s.x.cols(), 0.0);
    traj.start = s.x;
    for (int k = 0; k < k_steps; ++k) {
        s = (scheme == Scheme::HQS) ? hqs_step(s, y.values, op, restorer, mus[k])
                                    : admm_step(s, y.values, op, restorer, mus[k]);
        traj.iterates.push_back(s.x);
    }
    return traj;
}

Trajectory ideal_trajectory(const Image& x0, const Image& x_gt, const sensing::Measurement& y,
                            const sensing::MeasurementOperator& op, Scheme scheme,
                            const std::vector<StepParams>& teacher_params, int k_steps) {
    if (k_steps < 1) throw ValueError("ideal_trajectory: need at least one step");
    if (static_cast<int>(teacher_params.size()) != k_steps - 1)
        throw ValueError("ideal_trajectory: need K-1 parameter pairs (final step is pinned to (0,1))");
    Trajectory traj;
    traj.scheme = scheme;
    traj.start = x0;
    Image x = x0;
    Image u(x0.rows(), x0.cols(), 0.0);
    for (int k = 0; k < k_steps; ++k) {
        if (k == k_steps - 1) {
            // (mu, lambda) = (0, 1): the mix collapses onto the ground truth.
            x = x_gt;
            traj.iterates.push_back(x);
            break;
        }
        const StepParams& sp = teacher_params[k];
        if (sp.mu < 0.0 || sp.lambda <= 0.0 || sp.mu + sp.lambda <= 0.0)
            throw ValueError("ideal_trajectory: teacher parameters are degenerate");
        if (sp.mu == 0.0) {
            // restoration mix ignores Q entirely; the multiplier is unchanged
            x = x_gt;
            traj.iterates.push_back(x);
            continue;
        }
        if (scheme == Scheme::HQS) {
            x = prox_g_bar(prox_f(x, y.values, op, sp.mu), x_gt, sp);
        } else {
            const Image p = x - (1.0 / sp.mu) * u;
            const Image z = prox_f(p, y.values, op, sp.mu);
            const Image q = z + (1.0 / sp.mu) * u;
            const Image x_next = prox_g_bar(q, x_gt, sp);
            u = u + sp.mu * (z - x_next);
            x = x_next;
        }
        traj.iterates.push_back(x);
    }
    return traj;
}

std::vector<ConvergenceRow> convergence_report(const Trajectory& traj, const Image& x_gt) {
    std::vector<ConvergenceRow> rows;
    auto push = [&](int k, const Image& x) {
        ConvergenceRow r;
        r.k = k;
        r.psnr = psnr(x, x_gt);
        r.frob_dist = frob_norm(x - x_gt);
        rows.push_back(r);
    };
    push(0, traj.start);
    for (std::size_t i = 0; i < traj.iterates.size(); ++i) push(static_cast<int>(i) + 1, traj.iterates[i]);
    return rows;
}

void write_convergence_csv(const std::string& path, const std::vector<ConvergenceRow>& rows) {
    std::ofstream f(path);
    if (!f) throw IoError("convergence: cannot open '" + path + "'");
    f << "k,psnr,frob_dist\n";
    for (const auto& r : rows) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d,%.10g,%.10g\n", r.k, r.psnr, r.frob_dist);
        f << buf;
    }
}

}  // namespace pxun::proximal
