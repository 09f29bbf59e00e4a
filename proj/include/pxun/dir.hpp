#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pxun/container.hpp"
#include "pxun/restorers.hpp"
#include "pxun/rng.hpp"
#include "pxun/tensor.hpp"

namespace pxun::dir {

struct DirConfig {
    int base_channels = 8;   // C, must be even
    int levels = 4;          // fixed
    int ctb_per_stage = 1;
    int window = 4;          // p
    int heads = 2;
    int adaconv_kernels = 4;  // n
    int in_channels = 1;

    void validate() const;
    // extents are padded up to a multiple of this before the encoder
    int extent_multiple() const { return 8 * window; }
};

std::string dir_config_to_json(const DirConfig& cfg);
DirConfig dir_config_from_json(const std::string& text);

// ---- parameter groups ----

template <typename T>
struct ChanCAParams {
    tg::Tensor<T> q_pw, q_dw, k_pw, k_dw, v_pw, v_dw;  // bias-free projections
    tg::Tensor<T> out_pw;                               // bias-free output
    tg::Tensor<T> tau;                                  // per-head temperature
};

template <typename T>
struct SwinParams {
    tg::Tensor<T> ln1_g, ln1_b;
    tg::Tensor<T> wq, wk, wv, wo;  // [d, d]
    tg::Tensor<T> rpe;             // [heads, (2p-1)^2]
    tg::Tensor<T> ln2_g, ln2_b;
    tg::Tensor<T> ffn_pw1_w, ffn_pw1_b, ffn_dw, ffn_pw2_w, ffn_pw2_b;
};

template <typename T>
struct AdaConvParams {
    tg::Tensor<T> coeff1_w, coeff1_b;  // 1x1, d -> n
    tg::Tensor<T> coeff2_w, coeff2_b;  // 3x3, n -> n
    tg::Tensor<T> bank;                // [n, d*9]
};

template <typename T>
struct GdParams {
    tg::Tensor<T> gate_w, gate_b;  // 3x3
    AdaConvParams<T> ada;
    tg::Tensor<T> out_w, out_b;  // pointwise
};

template <typename T>
struct CtbParams {
    SwinParams<T> swin;
    GdParams<T> gd;
    tg::Tensor<T> gd_ln_g, gd_ln_b;  // pre-norm of the GD-CNN half
    tg::Tensor<T> fuse_w, fuse_b;    // pointwise after channel concat
    int shift = 0;
};

template <typename T>
struct EncStageParams {
    ChanCAParams<T> mb;
    std::vector<CtbParams<T>> ctbs;
    tg::Tensor<T> down_w, down_b;  // 2x2 stride-2 conv
};

template <typename T>
struct DecStageParams {
    std::vector<CtbParams<T>> ctbs;
    tg::Tensor<T> up_w, up_b;      // 2x2 stride-2 transposed conv
    tg::Tensor<T> skip_w, skip_b;  // pointwise reduction after skip concat
};

// Previous-iteration features {F4, F5, F6, F7}; empty at the first iteration,
// which behaves exactly like an all-zero bank.
template <typename T>
struct MemoryBank {
    std::vector<tg::Tensor<T>> feats;
    bool empty() const { return feats.empty(); }
};

// ---- blocks ----

template <typename T>
tg::Tensor<T> swinsa(const tg::Tensor<T>& x, const SwinParams<T>& p, int window, int heads, int shift);

template <typename T>
tg::Tensor<T> chanca(const tg::Tensor<T>& xq, const tg::Tensor<T>& xkv, const ChanCAParams<T>& p,
                     int heads);

// Dynamic depth-wise convolution from explicit coefficients [n, H*W].
template <typename T>
tg::Tensor<T> adaconv_from_coeffs(const tg::Tensor<T>& x, const tg::Tensor<T>& coeffs,
                                  const tg::Tensor<T>& bank);

template <typename T>
tg::Tensor<T> adaconv(const tg::Tensor<T>& x, const AdaConvParams<T>& p);

template <typename T>
tg::Tensor<T> gdcnn(const tg::Tensor<T>& x, const GdParams<T>& p);

template <typename T>
tg::Tensor<T> ctb(const tg::Tensor<T>& x, const CtbParams<T>& p, int window, int heads);

template <typename T>
tg::Tensor<T> memory_block(const tg::Tensor<T>& x, const tg::Tensor<T>* mem, const ChanCAParams<T>& p,
                           int heads);

// ---- model ----

template <typename T>
class DirModel {
public:
    DirModel(const DirConfig& cfg, Rng& rng);

    const DirConfig& config() const { return cfg_; }

    // Restores an image batch item [Cin,H,W]; returns the restored image and
    // the new memory bank {F4..F7}.
    std::pair<tg::Tensor<T>, MemoryBank<T>> forward(const tg::Tensor<T>& image,
                                                    const MemoryBank<T>& memory) const;

    // Enumerates every trainable parameter in a fixed order.
    void visit_params(const std::function<void(const std::string&, tg::Tensor<T>&)>& fn);

    std::vector<std::pair<std::string, tg::Tensor<T>>> params();

    DirModel clone() const;

    void save_params(Container& c, const std::string& prefix, int width) const;
    void load_params(const Container& c, const std::string& prefix);

private:
    DirConfig cfg_;
    tg::Tensor<T> conv_in_w_, conv_in_b_;
    std::array<EncStageParams<T>, 3> enc_;
    ChanCAParams<T> bott_mb_;
    std::vector<CtbParams<T>> bott_ctbs_;
    std::array<DecStageParams<T>, 3> dec_;
    tg::Tensor<T> conv_out_w_, conv_out_b_;
};

// Type-erased restorer backed by a trained checkpoint; precision follows the
// stored scalar width.
std::unique_ptr<restorers::Restorer> make_dir_restorer(const std::string& checkpoint_path);

extern template class DirModel<float>;
extern template class DirModel<double>;

}  // namespace pxun::dir
