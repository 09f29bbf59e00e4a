#include "pxun/metrics.hpp"

#include <cmath>
#include <vector>

namespace pxun {

double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ShapeError("psnr: shape mismatch");
    double mse = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.size());
    if (mse <= 0.0) return kPsnrCap;
    const double v = 10.0 * std::log10(1.0 / mse);
    return v > kPsnrCap ? kPsnrCap : v;
}

namespace {

std::vector<double> gaussian_kernel(int n, double sigma) {
    std::vector<double> k(n);
    const int c = n / 2;
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        k[i] = std::exp(-0.5 * (i - c) * (i - c) / (sigma * sigma));
        s += k[i];
    }
    for (double& v : k) v /= s;
    return k;
}

// Separable Gaussian filter, valid region only: output is (H-n+1) x (W-n+1).
Mat filter_valid(const Mat& x, const std::vector<double>& k) {
    const int n = static_cast<int>(k.size());
    Mat tmp(x.rows(), x.cols() - n + 1);
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < tmp.cols(); ++j) {
            double s = 0.0;
            for (int t = 0; t < n; ++t) s += k[t] * x(i, j + t);
            tmp(i, j) = s;
        }
    Mat out(x.rows() - n + 1, tmp.cols());
    for (int i = 0; i < out.rows(); ++i)
        for (int j = 0; j < out.cols(); ++j) {
            double s = 0.0;
            for (int t = 0; t < n; ++t) s += k[t] * tmp(i + t, j);
            out(i, j) = s;
        }
    return out;
}

}  // namespace

double ssim(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw ShapeError("ssim: shape mismatch");
    int win = 11;
    const int m = std::min(a.rows(), a.cols());
    if (m < win) win = (m % 2 == 1) ? m : m - 1;  // shrink for tiny images
    if (win < 1) throw ValueError("ssim: image too small");
    const auto k = gaussian_kernel(win, 1.5);

    Mat aa(a.rows(), a.cols()), bb(a.rows(), a.cols()), ab(a.rows(), a.cols());
    for (std::size_t i = 0; i < a.size(); ++i) {
        aa.values()[i] = a.values()[i] * a.values()[i];
        bb.values()[i] = b.values()[i] * b.values()[i];
        ab.values()[i] = a.values()[i] * b.values()[i];
    }
    const Mat mu_a = filter_valid(a, k);
    const Mat mu_b = filter_valid(b, k);
    const Mat s_aa = filter_valid(aa, k);
    const Mat s_bb = filter_valid(bb, k);
    const Mat s_ab = filter_valid(ab, k);

    const double c1 = 0.01 * 0.01;  // (K1 * L)^2, L = 1
    const double c2 = 0.03 * 0.03;
    double acc = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a.values()[i], mb = mu_b.values()[i];
        const double va = s_aa.values()[i] - ma * ma;
        const double vb = s_bb.values()[i] - mb * mb;
        const double cov = s_ab.values()[i] - ma * mb;
        acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
               ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    return acc / static_cast<double>(mu_a.size());
}

double total_variation(const Image& x) {
    double tv = 0.0;
    for (int i = 0; i < x.rows(); ++i)
        for (int j = 0; j < x.cols(); ++j) {
            const double dx = (j + 1 < x.cols()) ? x(i, j + 1) - x(i, j) : 0.0;
            const double dy = (i + 1 < x.rows()) ? x(i + 1, j) - x(i, j) : 0.0;
            tv += std::sqrt(dx * dx + dy * dy);
        }
    return tv;
}

}  // namespace pxun
