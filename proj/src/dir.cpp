#include "pxun/dir.hpp"

#include <cmath>

#include <json.hpp>

namespace pxun::dir {

using nlohmann::json;
using namespace tg;

// Pre-block normalization epsilon. Deliberately softer than the op default:
// near-constant channel lines otherwise put extreme curvature into the loss
// surface, which breaks finite-difference validation and training stability.
constexpr double kLnEps = 1e-5;

void DirConfig::validate() const {
    if (levels != 4) throw ValueError("dir: levels is fixed at 4");
    if (base_channels < 2 || base_channels % 2 != 0) throw ValueError("dir: base_channels must be even");
    if ((base_channels / 2) % heads != 0) throw ValueError("dir: heads must divide base_channels/2");
    if (window < 1) throw ValueError("dir: window must be positive");
    if (ctb_per_stage < 1 || adaconv_kernels < 1 || in_channels < 1)
        throw ValueError("dir: counts must be positive");
}

std::string dir_config_to_json(const DirConfig& cfg) {
    json j;
    j["base_channels"] = cfg.base_channels;
    j["levels"] = cfg.levels;
    j["ctb_per_stage"] = cfg.ctb_per_stage;
    j["window"] = cfg.window;
    j["heads"] = cfg.heads;
    j["adaconv_kernels"] = cfg.adaconv_kernels;
    j["in_channels"] = cfg.in_channels;
    return j.dump();
}

DirConfig dir_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    DirConfig cfg;
    cfg.base_channels = j.at("base_channels").get<int>();
    cfg.levels = j.at("levels").get<int>();
    cfg.ctb_per_stage = j.at("ctb_per_stage").get<int>();
    cfg.window = j.at("window").get<int>();
    cfg.heads = j.at("heads").get<int>();
    cfg.adaconv_kernels = j.at("adaconv_kernels").get<int>();
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------- blocks

template <typename T>
Tensor<T> swinsa(const Tensor<T>& x, const SwinParams<T>& p, int window, int heads, int shift) {
    const int h = x.dim(1), w = x.dim(2);
    const int dh = x.dim(0) / heads;
    auto win = window_partition(x, window, shift);  // [nw, p^2, d]
    auto q = split_heads(linear(win, p.wq), heads);
    auto k = split_heads(linear(win, p.wk), heads);
    auto v = split_heads(linear(win, p.wv), heads);
    auto logits = scale(bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    logits = add_rpe(logits, p.rpe, window, heads);
    auto out = merge_heads(bmm(softmax(logits, 2), v), heads);
    out = linear(out, p.wo);
    return window_unpartition(out, h, w, window, shift);
}

template <typename T>
Tensor<T> chanca(const Tensor<T>& xq, const Tensor<T>& xkv, const ChanCAParams<T>& p, int heads) {
    if (xq.shape() != xkv.shape()) throw ShapeError("chanca: query/memory shape mismatch");
    const int c = xq.dim(0), h = xq.dim(1), w = xq.dim(2);
    const int n = h * w, dh = c / heads;
    auto q = dwconv2d(conv2d(xq, p.q_pw, 1, 0), p.q_dw);
    auto k = dwconv2d(conv2d(xkv, p.k_pw, 1, 0), p.k_dw);
    auto v = dwconv2d(conv2d(xkv, p.v_pw, 1, 0), p.v_dw);
    auto qh = reshape(q, {heads, dh, n});
    auto kh = reshape(k, {heads, dh, n});
    auto vh = reshape(v, {heads, dh, n});
    // channel-by-channel attention; mean product keeps the scale independent
    // of the spatial extent, tau is the learnable temperature
    auto logits = bscale(scale(bmm(qh, kh, false, true), 1.0 / n), p.tau);
    auto out = reshape(bmm(softmax(logits, 2), vh), {c, h, w});
    return conv2d(out, p.out_pw, 1, 0);
}

template <typename T>
Tensor<T> adaconv_from_coeffs(const Tensor<T>& x, const Tensor<T>& coeffs, const Tensor<T>& bank) {
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    auto mixed = matmul(coeffs, bank, true, false);  // [HW, d*9]
    return adaconv_apply(x, reshape(mixed, {h * w, c, 9}));
}

template <typename T>
Tensor<T> adaconv(const Tensor<T>& x, const AdaConvParams<T>& p) {
    const int h = x.dim(1), w = x.dim(2);
    const int n = p.coeff1_w.dim(0);
    auto c1 = relu(add_bias_chan(conv2d(x, p.coeff1_w, 1, 0), p.coeff1_b));
    auto c2 = add_bias_chan(conv2d(c1, p.coeff2_w, 1, 1), p.coeff2_b);
    return adaconv_from_coeffs(x, reshape(c2, {n, h * w}), p.bank);
}

template <typename T>
Tensor<T> gdcnn(const Tensor<T>& x, const GdParams<T>& p) {
    auto gate = sigmoid(add_bias_chan(conv2d(x, p.gate_w, 1, 1), p.gate_b));
    auto value = adaconv(x, p.ada);
    return add_bias_chan(conv2d(mul(gate, value), p.out_w, 1, 0), p.out_b);
}

template <typename T>
Tensor<T> ctb(const Tensor<T>& x, const CtbParams<T>& p, int window, int heads) {
    const int c = x.dim(0);
    if (c % 2 != 0) throw ShapeError("ctb: channel extent must be even");
    const int d = c / 2;
    auto x1 = slice0(x, 0, d);
    auto x2 = slice0(x, d, c);

    auto a = add(x1, swinsa(layernorm(x1, p.swin.ln1_g, p.swin.ln1_b, 0, kLnEps), p.swin, window,
                            heads, p.shift));
    auto t = layernorm(a, p.swin.ln2_g, p.swin.ln2_b, 0, kLnEps);
    t = add_bias_chan(conv2d(t, p.swin.ffn_pw1_w, 1, 0), p.swin.ffn_pw1_b);
    t = gelu(dwconv2d(t, p.swin.ffn_dw));
    t = add_bias_chan(conv2d(t, p.swin.ffn_pw2_w, 1, 0), p.swin.ffn_pw2_b);
    auto swin_out = add(a, t);

    auto gd_out = add(x2, gdcnn(layernorm(x2, p.gd_ln_g, p.gd_ln_b, 0, kLnEps), p.gd));
    return add_bias_chan(conv2d(concat0(swin_out, gd_out), p.fuse_w, 1, 0), p.fuse_b);
}

template <typename T>
Tensor<T> memory_block(const Tensor<T>& x, const Tensor<T>* mem, const ChanCAParams<T>& p, int heads) {
    if (!mem || !mem->valid()) return x;  // absent memory == all-zero memory
    return add(x, chanca(x, *mem, p, heads));
}

// ---------------------------------------------------------------- init

namespace {

template <typename T>
Tensor<T> conv_init(std::vector<int> shape, int fan_in, Rng& rng, double var_scale = 1.0) {
    const double std = std::sqrt(var_scale / fan_in);
    std::vector<T> v(Tensor<T>::count(shape));
    for (auto& e : v) e = static_cast<T>(rng.normal() * std);
    return Tensor<T>::from(std::move(shape), std::move(v), true);
}

template <typename T>
Tensor<T> xavier_init(int din, int dout, Rng& rng) {
    const double a = std::sqrt(6.0 / (din + dout));
    std::vector<T> v(static_cast<std::size_t>(din) * dout);
    for (auto& e : v) e = static_cast<T>(rng.uniform(-a, a));
    return Tensor<T>::from({din, dout}, std::move(v), true);
}

template <typename T>
Tensor<T> const_init(std::vector<int> shape, double value) {
    Tensor<T> t(std::move(shape), static_cast<T>(value), true);
    return t;
}

template <typename T>
ChanCAParams<T> make_chanca(int c, int heads, Rng& rng) {
    ChanCAParams<T> p;
    p.q_pw = conv_init<T>({c, c, 1, 1}, c, rng);
    p.q_dw = conv_init<T>({c, 3, 3}, 9, rng);
    p.k_pw = conv_init<T>({c, c, 1, 1}, c, rng);
    p.k_dw = conv_init<T>({c, 3, 3}, 9, rng);
    p.v_pw = conv_init<T>({c, c, 1, 1}, c, rng);
    p.v_dw = conv_init<T>({c, 3, 3}, 9, rng);
    p.out_pw = conv_init<T>({c, c, 1, 1}, c, rng);
    p.tau = const_init<T>({heads}, 1.0);
    return p;
}

template <typename T>
CtbParams<T> make_ctb(int c, int window, int heads, int n_kernels, int shift, Rng& rng) {
    const int d = c / 2;
    CtbParams<T> p;
    p.shift = shift;
    p.swin.ln1_g = const_init<T>({d}, 1.0);
    p.swin.ln1_b = const_init<T>({d}, 0.0);
    p.swin.wq = xavier_init<T>(d, d, rng);
    p.swin.wk = xavier_init<T>(d, d, rng);
    p.swin.wv = xavier_init<T>(d, d, rng);
    p.swin.wo = xavier_init<T>(d, d, rng);
    const int span = 2 * window - 1;
    p.swin.rpe = const_init<T>({heads, span * span}, 0.0);
    p.swin.ln2_g = const_init<T>({d}, 1.0);
    p.swin.ln2_b = const_init<T>({d}, 0.0);
    p.swin.ffn_pw1_w = conv_init<T>({2 * d, d, 1, 1}, d, rng, 2.0);
    p.swin.ffn_pw1_b = const_init<T>({2 * d}, 0.0);
    p.swin.ffn_dw = conv_init<T>({2 * d, 3, 3}, 9, rng);
    p.swin.ffn_pw2_w = conv_init<T>({d, 2 * d, 1, 1}, 2 * d, rng);
    p.swin.ffn_pw2_b = const_init<T>({d}, 0.0);
    p.gd.gate_w = conv_init<T>({d, d, 3, 3}, 9 * d, rng);
    p.gd.gate_b = const_init<T>({d}, 0.0);
    p.gd.ada.coeff1_w = conv_init<T>({n_kernels, d, 1, 1}, d, rng, 2.0);
    p.gd.ada.coeff1_b = const_init<T>({n_kernels}, 0.0);
    p.gd.ada.coeff2_w = conv_init<T>({n_kernels, n_kernels, 3, 3}, 9 * n_kernels, rng);
    p.gd.ada.coeff2_b = const_init<T>({n_kernels}, 0.0);
    {
        const double std = 1.0 / std::sqrt(9.0 * n_kernels);
        std::vector<T> v(static_cast<std::size_t>(n_kernels) * d * 9);
        for (auto& e : v) e = static_cast<T>(rng.normal() * std);
        p.gd.ada.bank = Tensor<T>::from({n_kernels, d * 9}, std::move(v), true);
    }
    p.gd.out_w = conv_init<T>({d, d, 1, 1}, d, rng);
    p.gd.out_b = const_init<T>({d}, 0.0);
    p.gd_ln_g = const_init<T>({d}, 1.0);
    p.gd_ln_b = const_init<T>({d}, 0.0);
    p.fuse_w = conv_init<T>({c, c, 1, 1}, c, rng);
    p.fuse_b = const_init<T>({c}, 0.0);
    return p;
}

}  // namespace

template <typename T>
DirModel<T>::DirModel(const DirConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const int c0 = cfg.base_channels;
    int block_counter = 0;
    auto next_shift = [&] { return (block_counter++ % 2 == 1) ? cfg.window / 2 : 0; };

    conv_in_w_ = conv_init<T>({c0, cfg.in_channels, 3, 3}, 9 * cfg.in_channels, rng);
    conv_in_b_ = const_init<T>({c0}, 0.0);
    for (int s = 0; s < 3; ++s) {
        const int c = c0 << s;
        enc_[s].mb = make_chanca<T>(c, cfg.heads, rng);
        for (int j = 0; j < cfg.ctb_per_stage; ++j)
            enc_[s].ctbs.push_back(make_ctb<T>(c, cfg.window, cfg.heads, cfg.adaconv_kernels,
                                               next_shift(), rng));
        enc_[s].down_w = conv_init<T>({2 * c, c, 2, 2}, 4 * c, rng);
        enc_[s].down_b = const_init<T>({2 * c}, 0.0);
    }
    const int cb = c0 << 3;
    bott_mb_ = make_chanca<T>(cb, cfg.heads, rng);
    for (int j = 0; j < cfg.ctb_per_stage; ++j)
        bott_ctbs_.push_back(make_ctb<T>(cb, cfg.window, cfg.heads, cfg.adaconv_kernels,
                                         next_shift(), rng));
    for (int s = 0; s < 3; ++s) {
        const int c = c0 << (3 - s);  // channels entering the stage
        for (int j = 0; j < cfg.ctb_per_stage; ++j)
            dec_[s].ctbs.push_back(make_ctb<T>(c, cfg.window, cfg.heads, cfg.adaconv_kernels,
                                               next_shift(), rng));
        dec_[s].up_w = conv_init<T>({c, c / 2, 2, 2}, c, rng);
        dec_[s].up_b = const_init<T>({c / 2}, 0.0);
        dec_[s].skip_w = conv_init<T>({c / 2, c, 1, 1}, c, rng);
        dec_[s].skip_b = const_init<T>({c / 2}, 0.0);
    }
    // small but nonzero: near-identity start with live gradients everywhere
    conv_out_w_ = conv_init<T>({cfg.in_channels, c0, 3, 3}, 9 * c0, rng, 0.01);
    conv_out_b_ = const_init<T>({cfg.in_channels}, 0.0);
}

template <typename T>
std::pair<Tensor<T>, MemoryBank<T>> DirModel<T>::forward(const Tensor<T>& image,
                                                         const MemoryBank<T>& memory) const {
    if (image.rank() != 3 || image.dim(0) != cfg_.in_channels)
        throw ShapeError("dir: expected image [Cin,H,W]");
    if (!memory.empty() && memory.feats.size() != 4)
        throw ShapeError("dir: memory bank must hold {F4,F5,F6,F7}");
    const int h = image.dim(1), w = image.dim(2);
    const int mult = cfg_.extent_multiple();
    const int hp = ((h + mult - 1) / mult) * mult;
    const int wp = ((w + mult - 1) / mult) * mult;
    const int pad_top = (hp - h) / 2, pad_left = (wp - w) / 2;

    Tensor<T> x = image;
    if (hp != h || wp != w) x = pad_reflect(x, pad_top, hp - h - pad_top, pad_left, wp - w - pad_left);

    x = add_bias_chan(conv2d(x, conv_in_w_, 1, 1), conv_in_b_);
    std::vector<Tensor<T>> skips;
    for (int s = 0; s < 3; ++s) {
        x = memory_block(x, memory.empty() ? nullptr : &memory.feats[3 - s], enc_[s].mb, cfg_.heads);
        for (const auto& blk : enc_[s].ctbs) x = ctb(x, blk, cfg_.window, cfg_.heads);
        skips.push_back(x);
        x = add_bias_chan(conv2d(x, enc_[s].down_w, 2, 0), enc_[s].down_b);
    }
    x = memory_block(x, memory.empty() ? nullptr : &memory.feats[0], bott_mb_, cfg_.heads);
    for (const auto& blk : bott_ctbs_) x = ctb(x, blk, cfg_.window, cfg_.heads);

    MemoryBank<T> next;
    next.feats.resize(4);
    next.feats[0] = x;  // F4
    for (int s = 0; s < 3; ++s) {
        for (const auto& blk : dec_[s].ctbs) x = ctb(x, blk, cfg_.window, cfg_.heads);
        x = add_bias_chan(transposed_conv2d(x, dec_[s].up_w, 2), dec_[s].up_b);
        x = add_bias_chan(conv2d(concat0(x, skips[2 - s]), dec_[s].skip_w, 1, 0), dec_[s].skip_b);
        next.feats[1 + s] = x;  // F5, F6, F7
    }
    Tensor<T> delta = add_bias_chan(conv2d(x, conv_out_w_, 1, 1), conv_out_b_);
    if (hp != h || wp != w) delta = crop(delta, pad_top, pad_left, h, w);
    return {add(image, delta), std::move(next)};
}

template <typename T>
void DirModel<T>::visit_params(const std::function<void(const std::string&, Tensor<T>&)>& fn) {
    auto chanca_params = [&](const std::string& pre, ChanCAParams<T>& p) {
        fn(pre + ".q_pw", p.q_pw);
        fn(pre + ".q_dw", p.q_dw);
        fn(pre + ".k_pw", p.k_pw);
        fn(pre + ".k_dw", p.k_dw);
        fn(pre + ".v_pw", p.v_pw);
        fn(pre + ".v_dw", p.v_dw);
        fn(pre + ".out_pw", p.out_pw);
        fn(pre + ".tau", p.tau);
    };
    auto ctb_params = [&](const std::string& pre, CtbParams<T>& p) {
        fn(pre + ".ln1_g", p.swin.ln1_g);
        fn(pre + ".ln1_b", p.swin.ln1_b);
        fn(pre + ".wq", p.swin.wq);
        fn(pre + ".wk", p.swin.wk);
        fn(pre + ".wv", p.swin.wv);
        fn(pre + ".wo", p.swin.wo);
        fn(pre + ".rpe", p.swin.rpe);
        fn(pre + ".ln2_g", p.swin.ln2_g);
        fn(pre + ".ln2_b", p.swin.ln2_b);
        fn(pre + ".ffn_pw1_w", p.swin.ffn_pw1_w);
        fn(pre + ".ffn_pw1_b", p.swin.ffn_pw1_b);
        fn(pre + ".ffn_dw", p.swin.ffn_dw);
        fn(pre + ".ffn_pw2_w", p.swin.ffn_pw2_w);
        fn(pre + ".ffn_pw2_b", p.swin.ffn_pw2_b);
        fn(pre + ".gate_w", p.gd.gate_w);
        fn(pre + ".gate_b", p.gd.gate_b);
        fn(pre + ".coeff1_w", p.gd.ada.coeff1_w);
        fn(pre + ".coeff1_b", p.gd.ada.coeff1_b);
        fn(pre + ".coeff2_w", p.gd.ada.coeff2_w);
        fn(pre + ".coeff2_b", p.gd.ada.coeff2_b);
        fn(pre + ".bank", p.gd.ada.bank);
        fn(pre + ".gd_out_w", p.gd.out_w);
        fn(pre + ".gd_out_b", p.gd.out_b);
        fn(pre + ".gd_ln_g", p.gd_ln_g);
        fn(pre + ".gd_ln_b", p.gd_ln_b);
        fn(pre + ".fuse_w", p.fuse_w);
        fn(pre + ".fuse_b", p.fuse_b);
    };

    fn("conv_in.w", conv_in_w_);
    fn("conv_in.b", conv_in_b_);
    for (int s = 0; s < 3; ++s) {
        const std::string pre = "enc" + std::to_string(s);
        chanca_params(pre + ".mb", enc_[s].mb);
        for (std::size_t j = 0; j < enc_[s].ctbs.size(); ++j)
            ctb_params(pre + ".ctb" + std::to_string(j), enc_[s].ctbs[j]);
        fn(pre + ".down_w", enc_[s].down_w);
        fn(pre + ".down_b", enc_[s].down_b);
    }
    chanca_params("bott.mb", bott_mb_);
    for (std::size_t j = 0; j < bott_ctbs_.size(); ++j)
        ctb_params("bott.ctb" + std::to_string(j), bott_ctbs_[j]);
    for (int s = 0; s < 3; ++s) {
        const std::string pre = "dec" + std::to_string(s);
        for (std::size_t j = 0; j < dec_[s].ctbs.size(); ++j)
            ctb_params(pre + ".ctb" + std::to_string(j), dec_[s].ctbs[j]);
        fn(pre + ".up_w", dec_[s].up_w);
        fn(pre + ".up_b", dec_[s].up_b);
        fn(pre + ".skip_w", dec_[s].skip_w);
        fn(pre + ".skip_b", dec_[s].skip_b);
    }
    fn("conv_out.w", conv_out_w_);
    fn("conv_out.b", conv_out_b_);
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> DirModel<T>::params() {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    visit_params([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); });
    return out;
}

template <typename T>
DirModel<T> DirModel<T>::clone() const {
    DirModel<T> copy = *this;  // shares impls
    copy.visit_params([](const std::string&, Tensor<T>& t) { t = t.clone(); });
    return copy;
}

template <typename T>
void DirModel<T>::save_params(Container& c, const std::string& prefix, int width) const {
    auto& self = const_cast<DirModel<T>&>(*this);
    self.visit_params([&](const std::string& name, Tensor<T>& t) {
        ContainerEntry e;
        e.width = width;
        for (int d : t.shape()) e.shape.push_back(static_cast<std::uint32_t>(d));
        e.values.reserve(t.numel());
        for (T v : t.data()) e.values.push_back(static_cast<double>(v));
        c.put(prefix + name, std::move(e));
    });
}

template <typename T>
void DirModel<T>::load_params(const Container& c, const std::string& prefix) {
    visit_params([&](const std::string& name, Tensor<T>& t) {
        const auto& e = c.at(prefix + name);
        if (e.numel() != t.numel()) throw IoError("dir: checkpoint shape mismatch for " + name);
        for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<T>(e.values[i]);
    });
}

// ---------------------------------------------------------------- restorer

namespace {

template <typename T>
class DirRestorer final : public restorers::Restorer {
public:
    DirRestorer(DirModel<T> model) : model_(std::move(model)) {}

    Image restore(const Image& x, const restorers::RestoreContext&) override {
        auto t = reshape(from_image<T>(x), {1, x.rows(), x.cols()});
        auto [out, bank] = model_.forward(t, bank_);
        bank_ = std::move(bank);
        return to_image(out);
    }

    void reset() override { bank_ = MemoryBank<T>{}; }

private:
    DirModel<T> model_;
    MemoryBank<T> bank_;
};

}  // namespace

std::unique_ptr<restorers::Restorer> make_dir_restorer(const std::string& checkpoint_path) {
    const Container c = Container::load(checkpoint_path);
    const DirConfig cfg = dir_config_from_json(c.text("config_json"));
    const int width = c.at("dir.conv_in.w").width;
    Rng rng(0);
    if (width == 4) {
        DirModel<float> model(cfg, rng);
        model.load_params(c, "dir.");
        return std::make_unique<DirRestorer<float>>(std::move(model));
    }
    DirModel<double> model(cfg, rng);
    model.load_params(c, "dir.");
    return std::make_unique<DirRestorer<double>>(std::move(model));
}

// ---------------------------------------------------------------- instantiation

#define PXUN_DIR_INSTANTIATE(T)                                                                   \
    template Tensor<T> swinsa(const Tensor<T>&, const SwinParams<T>&, int, int, int);            \
    template Tensor<T> chanca(const Tensor<T>&, const Tensor<T>&, const ChanCAParams<T>&, int);  \
    template Tensor<T> adaconv_from_coeffs(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&); \
    template Tensor<T> adaconv(const Tensor<T>&, const AdaConvParams<T>&);                        \
    template Tensor<T> gdcnn(const Tensor<T>&, const GdParams<T>&);                              \
    template Tensor<T> ctb(const Tensor<T>&, const CtbParams<T>&, int, int);                     \
    template Tensor<T> memory_block(const Tensor<T>&, const Tensor<T>*, const ChanCAParams<T>&, int);

PXUN_DIR_INSTANTIATE(float)
PXUN_DIR_INSTANTIATE(double)

#undef PXUN_DIR_INSTANTIATE

template class DirModel<float>;
template class DirModel<double>;

}  // namespace pxun::dir
