#include "pxun/sensing.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "pxun/rng.hpp"

namespace pxun::sensing {

std::pair<int, int> choose_measurement_extents(int image_rows, int image_cols, double cr) {
    if (!(cr > 0.0 && cr <= 1.0)) throw ValueError("cr must lie in (0, 1]");
    int h = static_cast<int>(std::floor(std::sqrt(cr) * image_rows + 0.5));  // half rounds up
    h = std::max(1, std::min(h, image_rows));
    const double target = cr * image_rows * image_cols;
    int best_w = 1;
    double best_err = std::abs(static_cast<double>(h) * 1 - target);
    for (int w : {static_cast<int>(std::floor(target / h)), static_cast<int>(std::ceil(target / h))}) {
        w = std::max(1, std::min(w, image_cols));
        const double err = std::abs(static_cast<double>(h) * w - target);
        if (err < best_err || (err == best_err && w > best_w)) {
            best_err = err;
            best_w = w;
        }
    }
    return {h, best_w};
}

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Orthonormalizes the rows of an h x n random matrix by modified
// Gram-Schmidt with one re-orthogonalization pass.
Mat random_orthonormal_rows(int h, int n, Rng& rng) {
    Mat m(h, n);
    for (auto& v : m.values()) v = rng.normal();
    for (int i = 0; i < h; ++i) {
        for (int pass = 0; pass < 2; ++pass)
            for (int j = 0; j < i; ++j) {
                double d = 0.0;
                for (int k = 0; k < n; ++k) d += m(i, k) * m(j, k);
                for (int k = 0; k < n; ++k) m(i, k) -= d * m(j, k);
            }
        double nrm = 0.0;
        for (int k = 0; k < n; ++k) nrm += m(i, k) * m(i, k);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) {  // essentially impossible for Gaussian draws
            for (int k = 0; k < n; ++k) m(i, k) = rng.normal();
            --i;
            continue;
        }
        for (int k = 0; k < n; ++k) m(i, k) /= nrm;
    }
    return m;
}

int sign_changes(const Mat& m, int row) {
    int c = 0;
    for (int j = 1; j < m.cols(); ++j)
        if ((m(row, j) > 0) != (m(row, j - 1) > 0)) ++c;
    return c;
}

}  // namespace

Mat hadamard_sequency(int n) {
    if (!is_pow2(n)) throw ValueError("hadamard: extent must be a power of two");
    // Sylvester construction, then reorder rows by sequency.
    Mat s(1, 1, 1.0);
    for (int m = 1; m < n; m *= 2) {
        Mat next(2 * m, 2 * m);
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < m; ++j) {
                next(i, j) = s(i, j);
                next(i, j + m) = s(i, j);
                next(i + m, j) = s(i, j);
                next(i + m, j + m) = -s(i, j);
            }
        s = std::move(next);
    }
    // sequency order: sort rows by sign-change count
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](int a, int b) { return sign_changes(s, a) < sign_changes(s, b); });
    Mat out(n, n);
    const double scale = 1.0 / std::sqrt(static_cast<double>(n));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) out(i, j) = s(order[i], j) * scale;
    return out;
}

MeasurementOperator make_operator(int image_rows, int image_cols, double cr, OperatorKind kind,
                                  std::uint64_t seed) {
    if (!(cr > 0.0 && cr <= 1.0)) throw ValueError("make_operator: cr must lie in (0, 1]");
    const auto [h, w] = choose_measurement_extents(image_rows, image_cols, cr);
    MeasurementOperator op;
    if (kind == OperatorKind::Hadamard) {
        if (!is_pow2(image_rows) || !is_pow2(image_cols))
            throw ValueError("make_operator: hadamard kind needs power-of-two extents");
        const Mat hh = hadamard_sequency(image_rows);
        const Mat ww = hadamard_sequency(image_cols);
        op.h_mat = Mat(h, image_rows);
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < image_rows; ++j) op.h_mat(i, j) = hh(i, j);
        op.w_mat = Mat(w, image_cols);
        for (int i = 0; i < w; ++i)
            for (int j = 0; j < image_cols; ++j) op.w_mat(i, j) = ww(i, j);
    } else {
        Rng rng(seed);
        op.h_mat = random_orthonormal_rows(h, image_rows, rng);
        op.w_mat = random_orthonormal_rows(w, image_cols, rng);
    }
    op.cr = static_cast<double>(h) * w / (static_cast<double>(image_rows) * image_cols);
    Container c;
    save_operator(op, c);
    op.id = c.hash();
    return op;
}

Measurement forward(const MeasurementOperator& op, const Image& x, const NoiseModel& noise) {
    if (x.rows() != op.image_rows() || x.cols() != op.image_cols())
        throw ShapeError("forward: image extents do not match operator");
    Measurement m;
    m.values = matmul(matmul(op.h_mat, x), transpose(op.w_mat));
    m.operator_id = op.id;
    if (noise.kind == NoiseKind::Gaussian && noise.sigma > 0.0) {
        Rng rng(noise.seed);
        for (auto& v : m.values.values()) v += noise.sigma * rng.normal();
    }
    return m;
}

Image adjoint(const MeasurementOperator& op, const Mat& y_values) {
    if (y_values.rows() != op.meas_rows() || y_values.cols() != op.meas_cols())
        throw ShapeError("adjoint: measurement extents do not match operator");
    return matmul(matmul(transpose(op.h_mat), y_values), op.w_mat);
}

Image adjoint(const MeasurementOperator& op, const Measurement& y) { return adjoint(op, y.values); }

void save_operator(const MeasurementOperator& op, Container& c) {
    ContainerEntry h;
    h.shape = {static_cast<std::uint32_t>(op.h_mat.rows()), static_cast<std::uint32_t>(op.h_mat.cols())};
    h.values = op.h_mat.values();
    c.put("H", std::move(h));
    ContainerEntry w;
    w.shape = {static_cast<std::uint32_t>(op.w_mat.rows()), static_cast<std::uint32_t>(op.w_mat.cols())};
    w.values = op.w_mat.values();
    c.put("W", std::move(w));
    c.put_scalar("cr", op.cr);
}

MeasurementOperator load_operator(const Container& c) {
    const auto& h = c.at("H");
    const auto& w = c.at("W");
    if (h.shape.size() != 2 || w.shape.size() != 2) throw IoError("operator: H/W must be rank 2");
    MeasurementOperator op;
    op.h_mat = Mat(static_cast<int>(h.shape[0]), static_cast<int>(h.shape[1]), h.values);
    op.w_mat = Mat(static_cast<int>(w.shape[0]), static_cast<int>(w.shape[1]), w.values);
    op.cr = c.scalar("cr");
    Container cc;
    save_operator(op, cc);
    op.id = cc.hash();
    return op;
}

std::vector<ComplexityReport> complexity_probe(const std::vector<int>& extents, double cr,
                                               std::uint64_t seed) {
    std::vector<ComplexityReport> out;
    for (int n : extents) {
        if (n > 256) throw ValueError("complexity_probe: extents above 256 are not supported");
        ComplexityReport rep;
        rep.extent = n;
        rep.cr = cr;
        auto op = make_operator(n, n, cr, OperatorKind::GaussianOrthonormal, seed);
        Rng rng(seed + 1);
        Image x(n, n);
        for (auto& v : x.values()) v = rng.uniform();

        const Mat phi = kron(op.w_mat, op.h_mat);
        const auto xv = vec(x);

        rep.matrix_bytes = sizeof(double) * (op.h_mat.size() + op.w_mat.size());
        rep.explicit_bytes = sizeof(double) * phi.size();
        rep.storage_ratio = static_cast<double>(rep.explicit_bytes) / static_cast<double>(rep.matrix_bytes);

        auto time_loop = [](auto&& fn) {
            using clock = std::chrono::steady_clock;
            int reps = 0;
            const auto t0 = clock::now();
            double elapsed = 0.0;
            do {
                fn();
                ++reps;
                elapsed = std::chrono::duration<double>(clock::now() - t0).count();
            } while (elapsed < 0.05 || reps < 3);
            return elapsed / reps;
        };

        Mat y_matrix;
        rep.matrix_seconds = time_loop([&] { y_matrix = matmul(matmul(op.h_mat, x), transpose(op.w_mat)); });
        std::vector<double> y_explicit(phi.rows());
        rep.explicit_seconds = time_loop([&] {
            for (int i = 0; i < phi.rows(); ++i) {
                double s = 0.0;
                const double* row = phi.data() + static_cast<std::size_t>(i) * phi.cols();
                for (int j = 0; j < phi.cols(); ++j) s += row[j] * xv[j];
                y_explicit[i] = s;
            }
        });
        rep.speedup = rep.explicit_seconds / rep.matrix_seconds;

        const auto yv = vec(y_matrix);
        for (std::size_t i = 0; i < yv.size(); ++i)
            rep.max_disagreement = std::max(rep.max_disagreement, std::abs(yv[i] - y_explicit[i]));
        out.push_back(rep);
    }
    return out;
}

}  // namespace pxun::sensing
