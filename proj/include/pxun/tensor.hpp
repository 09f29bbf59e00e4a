#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "pxun/errors.hpp"
#include "pxun/mat.hpp"

namespace pxun::tg {

template <typename T>
class Tape;

template <typename T>
struct TensorImpl {
    std::vector<int> shape;
    std::vector<T> data;
    std::vector<T> grad;  // empty until gradient first reaches this tensor
    bool requires_grad = false;
};

// Value-semantics handle onto shared tensor storage. Ops never mutate their
// inputs' data, so recorded backward closures can rely on forward values.
template <typename T>
class Tensor {
public:
    using Impl = TensorImpl<T>;

    Tensor() = default;
    explicit Tensor(std::vector<int> shape, T fill = T(0), bool requires_grad = false)
        : impl_(std::make_shared<Impl>()) {
        impl_->shape = std::move(shape);
        impl_->data.assign(count(impl_->shape), fill);
        impl_->requires_grad = requires_grad;
    }

    static Tensor from(std::vector<int> shape, std::vector<T> values, bool requires_grad = false) {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        if (values.size() != count(shape)) throw ShapeError("tensor: value count does not match shape");
        t.impl_->shape = std::move(shape);
        t.impl_->data = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

    bool valid() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[i]; }
    std::size_t numel() const { return impl_->data.size(); }

    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

    bool has_grad() const { return !impl_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (impl_->grad.empty()) throw ValueError("tensor: no gradient accumulated");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw ShapeError("tensor: item() on non-scalar");
        return impl_->data[0];
    }

    // Deep copy, detached from any tape.
    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    std::shared_ptr<Impl> impl() const { return impl_; }

    static std::size_t count(const std::vector<int>& shape) {
        std::size_t n = 1;
        for (int e : shape) {
            if (e < 1) throw ShapeError("tensor: extents must be positive");
            n *= static_cast<std::size_t>(e);
        }
        return n;
    }

private:
    std::shared_ptr<Impl> impl_;
};

// Define-by-run gradient tape. Ops append backward records in forward order;
// backward() replays them in exact reverse. A tape can be swept once per
// forward build; a second backward without rebuilding is an error.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> fn) {
        if (consumed_) throw ValueError("tape: recording after backward; rebuild the forward pass");
        nodes_.push_back(std::move(fn));
    }

    void backward(const Tensor<T>& loss) {
        if (consumed_) throw ValueError("tape: backward called twice without re-forward");
        if (loss.numel() != 1) throw ShapeError("tape: backward seed must be scalar");
        consumed_ = true;
        auto impl = loss.impl();
        impl->grad.assign(1, T(1));
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    static Tape* current() { return tl_current_; }

    // RAII activation; ops record onto the innermost active tape.
    class Scope {
    public:
        explicit Scope(Tape& t) : prev_(tl_current_) { tl_current_ = &t; }
        ~Scope() { tl_current_ = prev_; }
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Tape* prev_;
    };

private:
    inline static thread_local Tape* tl_current_ = nullptr;
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

// Seeds gradient 1 at `loss` and propagates through the active tape.
template <typename T>
void backward(const Tensor<T>& loss) {
    auto* tape = Tape<T>::current();
    if (!tape) throw ValueError("backward: no active tape");
    tape->backward(loss);
}

// ---- elementwise ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, double s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, double s);
template <typename T> Tensor<T> mul_scalar_t(const Tensor<T>& a, const Tensor<T>& s);  // s: 1-element
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> softplus(const Tensor<T>& a);
template <typename T> Tensor<T> recip(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);

// ---- reductions ----
template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> sum_sq_diff(const Tensor<T>& a, const Tensor<T>& b);  // ||a-b||_F^2

// ---- bias ----
template <typename T> Tensor<T> add_bias_chan(const Tensor<T>& x, const Tensor<T>& b);  // x[C,...], b[C]
template <typename T> Tensor<T> add_bias_last(const Tensor<T>& x, const Tensor<T>& b);  // x[...,D], b[D]

// ---- linear algebra ----
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false);
template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool ta = false, bool tb = false);
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w);  // x[B,t,in] * w[in,out]

// ---- convolution ----
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride = 1, int pad = 0);
template <typename T>
Tensor<T> dwconv2d(const Tensor<T>& x, const Tensor<T>& w, int stride = 1, int pad = -1);  // -1: same
template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride = 2);

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape);
template <typename T> Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> slice0(const Tensor<T>& x, int begin, int end);
template <typename T> Tensor<T> pad_reflect(const Tensor<T>& x, int top, int bottom, int left, int right);
template <typename T> Tensor<T> crop(const Tensor<T>& x, int top, int left, int h, int w);

// ---- attention building blocks ----
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis);
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, int axis,
                    double eps = 1e-12);
template <typename T> Tensor<T> window_partition(const Tensor<T>& x, int p, int shift);
template <typename T>
Tensor<T> window_unpartition(const Tensor<T>& x, int height, int width, int p, int shift);
template <typename T> Tensor<T> split_heads(const Tensor<T>& x, int heads);  // [B,t,C]->[B*h,t,C/h]
template <typename T> Tensor<T> merge_heads(const Tensor<T>& x, int heads);  // inverse
template <typename T>
Tensor<T> add_rpe(const Tensor<T>& logits, const Tensor<T>& table, int p, int heads);
template <typename T> Tensor<T> bscale(const Tensor<T>& x, const Tensor<T>& s);  // x[B,...], s[B]

// ---- dynamic convolution ----
// x[C,H,W], kernels[H*W, C, 9]: per-pixel depth-wise 3x3 convolution.
template <typename T> Tensor<T> adaconv_apply(const Tensor<T>& x, const Tensor<T>& kernels);

// ---- Image bridging ----
template <typename T>
Tensor<T> from_image(const Mat& m, bool requires_grad = false) {
    std::vector<T> v(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) v[i] = static_cast<T>(m.values()[i]);
    return Tensor<T>::from({m.rows(), m.cols()}, std::move(v), requires_grad);
}

template <typename T>
Mat to_image(const Tensor<T>& t) {
    int h = 0, w = 0;
    if (t.rank() == 2) {
        h = t.dim(0);
        w = t.dim(1);
    } else if (t.rank() == 3 && t.dim(0) == 1) {
        h = t.dim(1);
        w = t.dim(2);
    } else {
        throw ShapeError("to_image: expected [H,W] or [1,H,W]");
    }
    Mat m(h, w);
    for (std::size_t i = 0; i < m.size(); ++i) m.values()[i] = static_cast<double>(t.data()[i]);
    return m;
}

}  // namespace pxun::tg
