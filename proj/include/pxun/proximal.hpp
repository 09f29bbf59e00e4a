#pragma once

#include <functional>
#include <vector>

#include "pxun/mat.hpp"
#include "pxun/sensing.hpp"
#include "pxun/tensor.hpp"

namespace pxun::proximal {

enum class Scheme { HQS, ADMM };

struct StepParams {
    double mu = 1.0;
    double lambda = 1.0;
};

struct IterateState {
    Image x;
    Image z;
    Image u;  // ADMM multiplier, empty for HQS
    int k = 0;
    Scheme scheme = Scheme::HQS;
};

struct Trajectory {
    Image start;                 // X^0
    std::vector<Image> iterates;  // X^1 .. X^K
    Scheme scheme = Scheme::HQS;
};

// A restorer callable: image in, image out, given (iteration k, mu).
using RestorerFn = std::function<Image(const Image&, int, double)>;

// Closed-form data proximal step for row-orthonormal operators:
//   P + 1/(1+mu) * H^T (Y - H P W^T) W
Image prox_f(const Image& p, const Mat& y, const sensing::MeasurementOperator& op, double mu);

// Ground-truth-conditioned restoration prox: (mu Q + lambda X_gt)/(mu + lambda).
Image prox_g_bar(const Image& q, const Image& x_gt, const StepParams& sp);

IterateState hqs_step(const IterateState& s, const Mat& y, const sensing::MeasurementOperator& op,
                      const RestorerFn& restorer, double mu);
IterateState admm_step(const IterateState& s, const Mat& y, const sensing::MeasurementOperator& op,
                       const RestorerFn& restorer, double mu);

// K composite steps from X^0 = adjoint(Y).
Trajectory run(Scheme scheme, const sensing::Measurement& y, const sensing::MeasurementOperator& op,
               const RestorerFn& restorer, int k_steps, const std::vector<double>& mus);

// Ideal teacher path (Prox_gbar o Prox_f applied K times). teacher_params has
// K-1 entries; the final step is pinned to (mu, lambda) = (0, 1) so the last
// iterate is exactly the ground truth.
Trajectory ideal_trajectory(const Image& x0, const Image& x_gt, const sensing::Measurement& y,
                            const sensing::MeasurementOperator& op, Scheme scheme,
                            const std::vector<StepParams>& teacher_params, int k_steps);

struct ConvergenceRow {
    int k = 0;
    double psnr = 0.0;
    double frob_dist = 0.0;
};

std::vector<ConvergenceRow> convergence_report(const Trajectory& traj, const Image& x_gt);
void write_convergence_csv(const std::string& path, const std::vector<ConvergenceRow>& rows);

// ---- tensor-graph variants (differentiable w.r.t. inputs and weights) ----

template <typename T>
tg::Tensor<T> prox_f_t(const tg::Tensor<T>& p, const tg::Tensor<T>& y, const tg::Tensor<T>& h_mat,
                       const tg::Tensor<T>& w_mat, const tg::Tensor<T>& mu) {
    using namespace tg;
    auto residual = sub(y, matmul(matmul(h_mat, p), w_mat, false, true));
    auto corr = matmul(matmul(h_mat, residual, true, false), w_mat);
    auto gain = recip(add_scalar(mu, 1.0));
    return add(p, mul_scalar_t(corr, gain));
}

template <typename T>
tg::Tensor<T> prox_g_bar_t(const tg::Tensor<T>& q, const tg::Tensor<T>& x_gt, const tg::Tensor<T>& mu,
                           const tg::Tensor<T>& lambda) {
    using namespace tg;
    auto num = add(mul_scalar_t(q, mu), mul_scalar_t(x_gt, lambda));
    return mul_scalar_t(num, recip(add(mu, lambda)));
}

}  // namespace pxun::proximal
