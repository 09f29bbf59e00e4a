#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pxun/dir.hpp"
#include "pxun/proximal.hpp"
#include "pxun/sensing.hpp"

namespace pxun::training {

struct TrainConfig {
    int unroll = 6;  // K
    double cr_lo = 0.01, cr_hi = 0.50;
    int batch = 4;
    int steps = 2000;
    double lr_init = 1e-3, lr_final = 1e-4;
    std::uint64_t seed = 0;
    proximal::Scheme scheme = proximal::Scheme::ADMM;
    dir::DirConfig dir;
    std::vector<int> extents = {32, 48};    // per-step training resolution pool
    std::vector<double> alpha;              // PT-loss weights; empty = all ones
    int workers = 1;
    double clip_norm = 1e5;                 // global gradient-norm clip, 0 = off

    std::vector<double> loss_weights() const {
        if (alpha.empty()) return std::vector<double>(unroll, 1.0);
        return alpha;
    }
    void validate() const;
};

// All trainable state: restorer weights plus raw (pre-softplus) solver
// parameters. The teacher's final step is pinned to (0, 1) and has no raw
// parameter.
template <typename T>
struct ParameterSet {
    dir::DirModel<T> model;
    tg::Tensor<T> mu_raw;          // [K] student data-prox weights
    tg::Tensor<T> mu_bar_raw;      // [K-1] teacher
    tg::Tensor<T> lambda_bar_raw;  // [K-1] teacher

    ParameterSet(const dir::DirConfig& cfg, int unroll, Rng& rng);

    std::vector<std::pair<std::string, tg::Tensor<T>>> named_params();
    ParameterSet clone() const;

    int unroll() const { return mu_raw.dim(0); }
    std::vector<double> student_mus() const;  // softplus of mu_raw
};

// Proximal-trajectory loss: sum_k alpha_k ||X^{k+1} - Xbar^{k+1}||_F^2 with
// the student and teacher trajectories built from the shared start
// X^0 = adjoint(Y). Differentiable w.r.t. every entry of ParameterSet.
// When student_out is non-null the student iterates X^1..X^K are appended.
// student_override replaces the DIR restorer (tests substitute the teacher's
// own restoration prox here to pin the loss at zero).
template <typename T>
tg::Tensor<T> pt_loss(const tg::Tensor<T>& x_gt, const tg::Tensor<T>& y, const tg::Tensor<T>& h_mat,
                      const tg::Tensor<T>& w_mat, ParameterSet<T>& params, proximal::Scheme scheme,
                      const std::vector<double>& alpha,
                      std::vector<tg::Tensor<T>>* student_out = nullptr,
                      const std::function<tg::Tensor<T>(const tg::Tensor<T>&, int)>* student_override =
                          nullptr);

// Deterministic synthetic corpus: piecewise-constant shapes, linear
// gradients and band-limited random-Fourier textures, in [0,1].
std::vector<Image> synth_dataset(int count, int extent, std::uint64_t seed);

// Loads, crops (centered) and luminance-converts user PGM/PNG images.
std::vector<Image> ingest_corpus(const std::string& dir_path, int extent);

struct TrainLogRow {
    int step = 0;
    double loss = 0.0;
    double lr = 0.0;
    double cr = 0.0;
};

struct TrainResult {
    std::vector<TrainLogRow> log;
    int total_steps = 0;
};

struct EvalRow {
    double cr = 0.0;
    double psnr_mean = 0.0;
    double ssim_mean = 0.0;
    double psnr_baseline = 0.0;
    double ssim_baseline = 0.0;
};

// Checkpoint IO for the full parameter set (+ optimizer state for resuming).
template <typename T>
void save_checkpoint(const std::string& path, ParameterSet<T>& params, const TrainConfig& cfg,
                     int step, const std::vector<std::vector<T>>* adam_m = nullptr,
                     const std::vector<std::vector<T>>* adam_v = nullptr);

struct CheckpointInfo {
    TrainConfig config;
    int step = 0;
    int width = 4;
};
CheckpointInfo read_checkpoint_info(const std::string& path);

template <typename T>
ParameterSet<T> load_checkpoint(const std::string& path, TrainConfig* cfg_out = nullptr,
                                int* step_out = nullptr, std::vector<std::vector<T>>* adam_m = nullptr,
                                std::vector<std::vector<T>>* adam_v = nullptr);

// Adam on the PT loss; fresh operator (and CR) per batch, cosine learning
// rate decay, per-worker tapes with deterministic gradient reduction.
template <typename T>
ParameterSet<T> train(const TrainConfig& cfg, const std::vector<Image>& dataset, TrainResult& result,
                      const std::string& checkpoint_in = "", const std::string& log_path = "",
                      const std::string& checkpoint_out = "",
                      const std::function<void(const TrainLogRow&)>& progress = {});

// Unrolled inference with a trained parameter set (no tape).
template <typename T>
proximal::Trajectory reconstruct(ParameterSet<T>& params, const sensing::Measurement& y,
                                 const sensing::MeasurementOperator& op, proximal::Scheme scheme);

// One model, many compression ratios; reports the adjoint baseline as well.
template <typename T>
std::vector<EvalRow> evaluate(ParameterSet<T>& params, const std::vector<Image>& dataset,
                              const std::vector<double>& cr_list, proximal::Scheme scheme,
                              std::uint64_t seed, int workers = 1);

void write_eval_csv(const std::string& path, const std::vector<EvalRow>& rows);
void write_eval_json(const std::string& path, const std::vector<EvalRow>& rows);

std::string scheme_name(proximal::Scheme s);
proximal::Scheme scheme_from_name(const std::string& name);

std::string train_config_to_json_text(const TrainConfig& cfg);
TrainConfig train_config_from_json_text(const std::string& text);

}  // namespace pxun::training
