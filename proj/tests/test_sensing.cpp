#include <doctest.h>

#include <cmath>

#include "pxun/metrics.hpp"
#include "pxun/sensing.hpp"
#include "test_util.hpp"

using namespace pxun;
using namespace pxun::sensing;

namespace {
double max_off_identity(const Mat& m) {
    double worst = 0.0;
    for (int i = 0; i < m.rows(); ++i)
        for (int j = 0; j < m.cols(); ++j)
            worst = std::max(worst, std::fabs(m(i, j) - (i == j ? 1.0 : 0.0)));
    return worst;
}
}  // namespace

TEST_CASE("extent selection from compression ratio") {
    auto [h, w] = choose_measurement_extents(16, 16, 0.25);
    CHECK(h == 8);
    CHECK(w == 8);
    auto [h1, w1] = choose_measurement_extents(8, 8, 1.0);
    CHECK(h1 == 8);
    CHECK(w1 == 8);
    auto [h2, w2] = choose_measurement_extents(32, 32, 0.05);
    CHECK(std::fabs(static_cast<double>(h2) * w2 / 1024.0 - 0.05) < 0.01);
    CHECK_THROWS_AS(choose_measurement_extents(8, 8, 0.0), ValueError);
    CHECK_THROWS_AS(choose_measurement_extents(8, 8, 1.5), ValueError);
}

TEST_CASE("gaussian operator rows are orthonormal") {
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        const auto op = make_operator(16, 16, 0.3, OperatorKind::GaussianOrthonormal, seed);
        CHECK(max_off_identity(matmul(op.h_mat, transpose(op.h_mat))) < 1e-10);
        CHECK(max_off_identity(matmul(op.w_mat, transpose(op.w_mat))) < 1e-10);
    }
}

TEST_CASE("full sampling: adjoint inverts forward") {
    const auto op = make_operator(8, 8, 1.0, OperatorKind::GaussianOrthonormal, 4);
    Rng rng(9);
    const Image x = testutil::random_image(8, 8, rng);
    const auto y = forward(op, x);
    const Image back = adjoint(op, y);
    CHECK(max_abs_diff(back, x) < 1e-10);
}

TEST_CASE("hadamard rows are sequency ordered and orthonormal") {
    const Mat h8 = hadamard_sequency(8);
    // row i has exactly i sign changes in sequency order
    for (int i = 0; i < 8; ++i) {
        int changes = 0;
        for (int j = 1; j < 8; ++j)
            if ((h8(i, j) > 0) != (h8(i, j - 1) > 0)) ++changes;
        CHECK(changes == i);
    }
    const auto op = make_operator(8, 8, 0.25, OperatorKind::Hadamard, 0);
    CHECK(op.h_mat.rows() == 4);
    CHECK(max_off_identity(matmul(op.h_mat, transpose(op.h_mat))) < 1e-12);
    CHECK_THROWS_AS(make_operator(12, 12, 0.5, OperatorKind::Hadamard, 0), ValueError);
}

TEST_CASE("zero image measures to zero and zero measurement back-projects to zero") {
    const auto op = make_operator(8, 8, 0.5, OperatorKind::GaussianOrthonormal, 7);
    const Image zero(8, 8, 0.0);
    const auto y = forward(op, zero);
    for (double v : y.values.values()) CHECK(v == 0.0);
    const Image back = adjoint(op, y);
    for (double v : back.values()) CHECK(v == 0.0);
}

TEST_CASE("matrix form equals explicit Kronecker operator") {
    Rng rng(11);
    const auto op = make_operator(6, 6, 1.0 / 6.0, OperatorKind::GaussianOrthonormal, 21);
    CHECK(op.meas_rows() == 2);
    CHECK(op.meas_cols() == 3);
    const Image x = testutil::random_image(6, 6, rng);
    const auto y = forward(op, x);
    const Mat phi = kron(op.w_mat, op.h_mat);
    const auto xv = vec(x);
    const auto yv = vec(y.values);
    for (std::size_t i = 0; i < yv.size(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < xv.size(); ++j) s += phi(static_cast<int>(i), static_cast<int>(j)) * xv[j];
        CHECK(std::fabs(yv[i] - s) < 1e-12);
    }
}

TEST_CASE("forward/adjoint adjointness") {
    Rng rng(13);
    for (int rep = 0; rep < 5; ++rep) {
        const auto op = make_operator(12, 10, 0.3, OperatorKind::GaussianOrthonormal, 100 + rep);
        const Image x = testutil::random_image(12, 10, rng);
        Mat y(op.meas_rows(), op.meas_cols());
        for (auto& v : y.values()) v = rng.uniform(-1, 1);
        const double lhs = dot(forward(op, x).values, y);
        const double rhs = dot(x, adjoint(op, y));
        CHECK(std::fabs(lhs - rhs) < 1e-10);
    }
}

TEST_CASE("noise is seed reproducible and sigma=0 equals none") {
    const auto op = make_operator(8, 8, 0.5, OperatorKind::GaussianOrthonormal, 3);
    Rng rng(17);
    const Image x = testutil::random_image(8, 8, rng);
    NoiseModel g{NoiseKind::Gaussian, 0.1, 42};
    const auto y1 = forward(op, x, g);
    const auto y2 = forward(op, x, g);
    for (std::size_t i = 0; i < y1.values.size(); ++i)
        CHECK(y1.values.values()[i] == y2.values.values()[i]);

    NoiseModel zero_sigma{NoiseKind::Gaussian, 0.0, 42};
    const auto yz = forward(op, x, zero_sigma);
    const auto yn = forward(op, x, NoiseModel{});
    for (std::size_t i = 0; i < yz.values.size(); ++i)
        CHECK(yz.values.values()[i] == yn.values.values()[i]);

    // noise actually perturbs
    double diff = 0.0;
    for (std::size_t i = 0; i < y1.values.size(); ++i)
        diff = std::max(diff, std::fabs(y1.values.values()[i] - yn.values.values()[i]));
    CHECK(diff > 1e-4);
}

TEST_CASE("operator serialization survives the container") {
    const auto op = make_operator(16, 16, 0.25, OperatorKind::Hadamard, 0);
    Container c;
    save_operator(op, c);
    const auto op2 = load_operator(c);
    CHECK(max_abs_diff(op.h_mat, op2.h_mat) == 0.0);
    CHECK(max_abs_diff(op.w_mat, op2.w_mat) == 0.0);
    CHECK(op.cr == op2.cr);
}

TEST_CASE("forward rejects mismatched extents") {
    const auto op = make_operator(8, 8, 0.5, OperatorKind::GaussianOrthonormal, 3);
    CHECK_THROWS_AS((void)forward(op, Image(6, 8)), ShapeError);
    Mat bad(2, 2);
    CHECK_THROWS_AS((void)adjoint(op, bad), ShapeError);
}

TEST_CASE("complexity probe: both paths agree, matrix form wins") {
    const auto reports = complexity_probe({8, 64}, 0.25, 5);
    REQUIRE(reports.size() == 2);
    CHECK(reports[0].max_disagreement < 1e-12);
    CHECK(reports[1].max_disagreement < 1e-12);
    CHECK(reports[1].storage_ratio > 100.0);  // (hw*HW) / (hH + wW) at 64x64
    CHECK(reports[1].speedup > 1.0);

    const auto tiny = complexity_probe({1}, 1.0, 5);
    CHECK(tiny[0].max_disagreement < 1e-15);
}
