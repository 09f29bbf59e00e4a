#include "pxun/restorers.hpp"

#include <cmath>

#include "pxun/dir.hpp"

namespace pxun::restorers {

Image tv_denoise(const Image& x, double strength, int inner_iters) {
    if (strength < 0.0) throw ValueError("tv_denoise: strength must be non-negative");
    if (inner_iters < 1) throw ValueError("tv_denoise: need at least one inner iteration");
    if (strength == 0.0) return x;
    const int h = x.rows(), w = x.cols();
    const double lambda = strength;
    const double tau = 0.125;  // dual step, convergent for the 8-neighbour grad bound

    // dual field p = (px, py), projected onto |p| <= 1 pointwise
    Mat px(h, w, 0.0), py(h, w, 0.0);
    Mat div_p(h, w, 0.0), gx(h, w, 0.0), gy(h, w, 0.0);
    for (int it = 0; it < inner_iters; ++it) {
        // div p with backward differences (adjoint of forward-difference grad)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                double d = 0.0;
                d += (j < w - 1 ? px(i, j) : 0.0) - (j > 0 ? px(i, j - 1) : 0.0);
                d += (i < h - 1 ? py(i, j) : 0.0) - (i > 0 ? py(i - 1, j) : 0.0);
                div_p(i, j) = d;
            }
        // gradient of (div p - x/lambda), forward differences, Neumann edge
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double c = div_p(i, j) - x(i, j) / lambda;
                gx(i, j) = (j < w - 1) ? (div_p(i, j + 1) - x(i, j + 1) / lambda) - c : 0.0;
                gy(i, j) = (i < h - 1) ? (div_p(i + 1, j) - x(i + 1, j) / lambda) - c : 0.0;
            }
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j) {
                const double mag = std::sqrt(gx(i, j) * gx(i, j) + gy(i, j) * gy(i, j));
                px(i, j) = (px(i, j) + tau * gx(i, j)) / (1.0 + tau * mag);
                py(i, j) = (py(i, j) + tau * gy(i, j)) / (1.0 + tau * mag);
            }
    }
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
            double d = 0.0;
            d += (j < w - 1 ? px(i, j) : 0.0) - (j > 0 ? px(i, j - 1) : 0.0);
            d += (i < h - 1 ? py(i, j) : 0.0) - (i > 0 ? py(i - 1, j) : 0.0);
            div_p(i, j) = d;
        }
    Image u(h, w);
    for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) u(i, j) = x(i, j) - lambda * div_p(i, j);
    return u;
}

Mat dct_matrix(int n) {
    Mat d(n, n);
    const double pi = 3.14159265358979323846;
    for (int k = 0; k < n; ++k) {
        const double a = (k == 0) ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (int j = 0; j < n; ++j) d(k, j) = a * std::cos(pi * (j + 0.5) * k / n);
    }
    return d;
}

Image dct_threshold(const Image& x, double strength) {
    if (strength < 0.0) throw ValueError("dct_threshold: strength must be non-negative");
    const Mat dh = dct_matrix(x.rows());
    const Mat dw = dct_matrix(x.cols());
    Mat coeff = matmul(matmul(dh, x), transpose(dw));
    for (int i = 0; i < coeff.rows(); ++i)
        for (int j = 0; j < coeff.cols(); ++j) {
            if (i == 0 && j == 0) continue;  // keep the DC term
            const double c = coeff(i, j);
            const double soft = std::fabs(c) - strength;
            coeff(i, j) = soft > 0.0 ? (c > 0.0 ? soft : -soft) : 0.0;
        }
    return matmul(matmul(transpose(dh), coeff), dw);
}

namespace {

class IdentityRestorer final : public Restorer {
public:
    Image restore(const Image& x, const RestoreContext&) override { return x; }
};

class TvRestorer final : public Restorer {
public:
    TvRestorer(double strength, int inner) : strength_(strength), inner_(inner) {}
    Image restore(const Image& x, const RestoreContext&) override {
        return tv_denoise(x, strength_, inner_);
    }

private:
    double strength_;
    int inner_;
};

class DctRestorer final : public Restorer {
public:
    explicit DctRestorer(double strength) : strength_(strength) {}
    Image restore(const Image& x, const RestoreContext&) override {
        if (strength_ == 0.0) return x;
        return dct_threshold(x, strength_);
    }

private:
    double strength_;
};

}  // namespace

std::unique_ptr<Restorer> make_restorer(const RestorerSpec& spec) {
    switch (spec.kind) {
        case Kind::Identity:
            return std::make_unique<IdentityRestorer>();
        case Kind::Tv:
            return std::make_unique<TvRestorer>(spec.strength, spec.inner_iters);
        case Kind::Dct:
            return std::make_unique<DctRestorer>(spec.strength);
        case Kind::Dir:
            if (spec.checkpoint.empty())
                throw ValueError("restorer: dir kind requires a checkpoint");
            return dir::make_dir_restorer(spec.checkpoint);
    }
    throw ValueError("restorer: unknown kind");
}

proximal::RestorerFn as_fn(Restorer& r) {
    return [&r](const Image& x, int k, double mu) {
        RestoreContext ctx;
        ctx.k = k;
        ctx.mu = mu;
        return r.restore(x, ctx);
    };
}

Kind kind_from_name(const std::string& name) {
    if (name == "identity") return Kind::Identity;
    if (name == "tv") return Kind::Tv;
    if (name == "dct") return Kind::Dct;
    if (name == "dir") return Kind::Dir;
    throw ValueError("restorer: unknown kind '" + name + "'");
}

}  // namespace pxun::restorers
