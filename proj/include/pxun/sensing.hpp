#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pxun/container.hpp"
#include "pxun/mat.hpp"

namespace pxun::sensing {

enum class OperatorKind { GaussianOrthonormal, Hadamard };

enum class NoiseKind { None, Gaussian };

struct NoiseModel {
    NoiseKind kind = NoiseKind::None;
    double sigma = 0.0;
    std::uint64_t seed = 0;
};

// Kronecker measurement operator Phi = W (x) H realized by the row pair
// (H: h x H_img, W: w x W_img), both with orthonormal rows. Immutable after
// construction and freely shareable.
struct MeasurementOperator {
    Mat h_mat;
    Mat w_mat;
    double cr = 1.0;
    std::uint64_t id = 0;

    int image_rows() const { return h_mat.cols(); }
    int image_cols() const { return w_mat.cols(); }
    int meas_rows() const { return h_mat.rows(); }
    int meas_cols() const { return w_mat.rows(); }
};

struct Measurement {
    Mat values;  // h x w
    std::uint64_t operator_id = 0;
};

// Factors a target compression ratio into measurement extents (h, w):
// h = round(sqrt(cr) * H) rounded half up, then w minimizing |hw/(HW) - cr|.
std::pair<int, int> choose_measurement_extents(int image_rows, int image_cols, double cr);

// Sequency-ordered (Walsh) Hadamard matrix, rows scaled by 1/sqrt(n).
Mat hadamard_sequency(int n);

MeasurementOperator make_operator(int image_rows, int image_cols, double cr, OperatorKind kind,
                                  std::uint64_t seed);

Measurement forward(const MeasurementOperator& op, const Image& x, const NoiseModel& noise = {});
Image adjoint(const MeasurementOperator& op, const Measurement& y);
Image adjoint(const MeasurementOperator& op, const Mat& y_values);

// Operator serialization on the named-tensor container ("H", "W", "cr").
void save_operator(const MeasurementOperator& op, Container& c);
MeasurementOperator load_operator(const Container& c);

struct ComplexityReport {
    int extent = 0;
    double cr = 0.0;
    std::size_t matrix_bytes = 0;    // storage for (H, W)
    std::size_t explicit_bytes = 0;  // storage for Phi
    double matrix_seconds = 0.0;     // per forward application
    double explicit_seconds = 0.0;
    double speedup = 0.0;
    double storage_ratio = 0.0;
    double max_disagreement = 0.0;  // |vec(H X W^T) - Phi vec(X)|_inf
};

// Benchmarks matrix-form sampling against explicit-Phi sampling.
std::vector<ComplexityReport> complexity_probe(const std::vector<int>& extents, double cr,
                                               std::uint64_t seed = 1);

}  // namespace pxun::sensing
