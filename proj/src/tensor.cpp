#include "pxun/tensor.hpp"

#include <cmath>
#include <cstring>

namespace pxun::tg {

namespace {

template <typename T>
std::vector<T>& ensure_grad(TensorImpl<T>& t) {
    if (t.grad.empty()) t.grad.assign(t.data.size(), T(0));
    return t.grad;
}

template <typename T, typename F>
void maybe_record(Tensor<T>& out, bool any_tracked, F&& fn) {
    auto* tape = Tape<T>::current();
    if (!tape || !any_tracked) return;
    out.set_requires_grad(true);
    tape->record(std::forward<F>(fn));
}

// C (+)= op(A) * op(B); stored extents are the physical ones.
template <typename T>
void gemm(bool ta, bool tb, int m, int n, int k, const T* a, const T* b, T* c, bool accum) {
    if (!accum) std::memset(c, 0, sizeof(T) * static_cast<std::size_t>(m) * n);
    if (!ta && !tb) {  // a[m,k] b[k,n]
        for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
                const T av = a[static_cast<std::size_t>(i) * k + l];
                if (av == T(0)) continue;
                const T* brow = b + static_cast<std::size_t>(l) * n;
                T* crow = c + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    } else if (!ta && tb) {  // a[m,k] b[n,k]
        for (int i = 0; i < m; ++i) {
            const T* arow = a + static_cast<std::size_t>(i) * k;
            T* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const T* brow = b + static_cast<std::size_t>(j) * k;
                T s = T(0);
                for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
                crow[j] += s;
            }
        }
    } else if (ta && !tb) {  // a[k,m] b[k,n]
        for (int l = 0; l < k; ++l) {
            const T* arow = a + static_cast<std::size_t>(l) * m;
            const T* brow = b + static_cast<std::size_t>(l) * n;
            for (int i = 0; i < m; ++i) {
                const T av = arow[i];
                if (av == T(0)) continue;
                T* crow = c + static_cast<std::size_t>(i) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {  // a[k,m] b[n,k]
        for (int i = 0; i < m; ++i) {
            T* crow = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) {
                const T* brow = b + static_cast<std::size_t>(j) * k;
                T s = T(0);
                for (int l = 0; l < k; ++l) s += a[static_cast<std::size_t>(l) * m + i] * brow[l];
                crow[j] += s;
            }
        }
    }
}

inline int ceil_div(int a, int b) { return (a + b - 1) / b; }

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": shape mismatch");
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "add");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    maybe_record(out, a.requires_grad() || b.requires_grad(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sub");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    maybe_record(out, a.requires_grad() || b.requires_grad(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "mul");
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    maybe_record(out, a.requires_grad() || b.requires_grad(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->data[i];
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->data[i];
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double s) {
    Tensor<T> out(a.shape());
    const T sv = static_cast<T>(s);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * sv;
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl(), sv] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i] * sv;
    });
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double s) {
    Tensor<T> out(a.shape());
    const T sv = static_cast<T>(s);
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] + sv;
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += oi->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> mul_scalar_t(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeError("mul_scalar_t: multiplier must be a 1-element tensor");
    Tensor<T> out(a.shape());
    const T sv = s.data()[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * sv;
    maybe_record(out, a.requires_grad() || s.requires_grad(),
                 [ai = a.impl(), si = s.impl(), oi = out.impl()] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         const T sv = si->data[0];
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
                     }
                     if (si->requires_grad) {
                         auto& gs = ensure_grad(*si);
                         T acc = T(0);
                         for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * ai->data[i];
                         gs[0] += acc;
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < oi->grad.size(); ++i)
            if (ai->data[i] > T(0)) ga[i] += oi->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double x = static_cast<double>(a.data()[i]);
        out.data()[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        constexpr double inv_sqrt2pi = 0.39894228040143267794;
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
            const double x = static_cast<double>(ai->data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            ga[i] += oi->grad[i] * static_cast<T>(cdf + x * pdf);
        }
    });
    return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double x = static_cast<double>(a.data()[i]);
        out.data()[i] = static_cast<T>(1.0 / (1.0 + std::exp(-x)));
    }
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
            const T y = oi->data[i];
            ga[i] += oi->grad[i] * y * (T(1) - y);
        }
    });
    return out;
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const double x = static_cast<double>(a.data()[i]);
        out.data()[i] = static_cast<T>(x > 30.0 ? x : std::log1p(std::exp(x)));
    }
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
            const double x = static_cast<double>(ai->data[i]);
            ga[i] += oi->grad[i] * static_cast<T>(1.0 / (1.0 + std::exp(-x)));
        }
    });
    return out;
}

template <typename T>
Tensor<T> recip(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = T(1) / a.data()[i];
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) {
            const T y = oi->data[i];
            ga[i] -= oi->grad[i] * y * y;
        }
    });
    return out;
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
    Tensor<T> out(a.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) out.data()[i] = a.data()[i] * a.data()[i];
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) ga[i] += T(2) * oi->grad[i] * ai->data[i];
    });
    return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) acc += static_cast<double>(a.data()[i]);
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    maybe_record(out, a.requires_grad(), [ai = a.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !ai->requires_grad) return;
        auto& ga = ensure_grad(*ai);
        const T g = oi->grad[0];
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
    return out;
}

template <typename T>
Tensor<T> sum_sq_diff(const Tensor<T>& a, const Tensor<T>& b) {
    check_same_shape(a, b, "sum_sq_diff");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i]);
        acc += d * d;
    }
    Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc));
    maybe_record(out, a.requires_grad() || b.requires_grad(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                     if (oi->grad.empty()) return;
                     const T g2 = T(2) * oi->grad[0];
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         for (std::size_t i = 0; i < ga.size(); ++i)
                             ga[i] += g2 * (ai->data[i] - bi->data[i]);
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (std::size_t i = 0; i < gb.size(); ++i)
                             gb[i] -= g2 * (ai->data[i] - bi->data[i]);
                     }
                 });
    return out;
}

// ---------------------------------------------------------------- bias

template <typename T>
Tensor<T> add_bias_chan(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() != 1 || x.dim(0) != b.dim(0)) throw ShapeError("add_bias_chan: bias extent mismatch");
    Tensor<T> out(x.shape());
    const int c = x.dim(0);
    const std::size_t stride = x.numel() / c;
    for (int ci = 0; ci < c; ++ci) {
        const T bv = b.data()[ci];
        for (std::size_t i = 0; i < stride; ++i) out.data()[ci * stride + i] = x.data()[ci * stride + i] + bv;
    }
    maybe_record(out, x.requires_grad() || b.requires_grad(),
                 [xi = x.impl(), bi = b.impl(), oi = out.impl(), c, stride] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     if (xi->requires_grad) {
                         auto& gx = ensure_grad(*xi);
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (int ci = 0; ci < c; ++ci) {
                             T acc = T(0);
                             for (std::size_t i = 0; i < stride; ++i) acc += g[ci * stride + i];
                             gb[ci] += acc;
                         }
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> add_bias_last(const Tensor<T>& x, const Tensor<T>& b) {
    if (b.rank() != 1 || x.dim(x.rank() - 1) != b.dim(0))
        throw ShapeError("add_bias_last: bias extent mismatch");
    Tensor<T> out(x.shape());
    const int d = b.dim(0);
    const std::size_t lines = x.numel() / d;
    for (std::size_t l = 0; l < lines; ++l)
        for (int j = 0; j < d; ++j) out.data()[l * d + j] = x.data()[l * d + j] + b.data()[j];
    maybe_record(out, x.requires_grad() || b.requires_grad(),
                 [xi = x.impl(), bi = b.impl(), oi = out.impl(), d, lines] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     if (xi->requires_grad) {
                         auto& gx = ensure_grad(*xi);
                         for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (std::size_t l = 0; l < lines; ++l)
                             for (int j = 0; j < d; ++j) gb[j] += g[l * d + j];
                     }
                 });
    return out;
}

// ---------------------------------------------------------------- matmul/bmm

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
    if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul: operands must be rank 2");
    const int m = ta ? a.dim(1) : a.dim(0);
    const int ka = ta ? a.dim(0) : a.dim(1);
    const int kb = tb ? b.dim(1) : b.dim(0);
    const int n = tb ? b.dim(0) : b.dim(1);
    if (ka != kb) throw ShapeError("matmul: inner extents differ");
    Tensor<T> out({m, n});
    gemm(ta, tb, m, n, ka, a.data().data(), b.data().data(), out.data().data(), false);
    maybe_record(out, a.requires_grad() || b.requires_grad(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), ta, tb, m, n, ka] {
                     if (oi->grad.empty()) return;
                     const T* g = oi->grad.data();
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         if (!ta)
                             gemm(false, !tb, m, ka, n, g, bi->data.data(), ga.data(), true);
                         else
                             gemm(tb, true, ka, m, n, bi->data.data(), g, ga.data(), true);
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         if (!tb)
                             gemm(!ta, false, ka, n, m, ai->data.data(), g, gb.data(), true);
                         else
                             gemm(true, ta, n, ka, m, g, ai->data.data(), gb.data(), true);
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool ta, bool tb) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0))
        throw ShapeError("bmm: operands must be rank 3 with equal batch extent");
    const int batch = a.dim(0);
    const int m = ta ? a.dim(2) : a.dim(1);
    const int ka = ta ? a.dim(1) : a.dim(2);
    const int kb = tb ? b.dim(2) : b.dim(1);
    const int n = tb ? b.dim(1) : b.dim(2);
    if (ka != kb) throw ShapeError("bmm: inner extents differ");
    Tensor<T> out({batch, m, n});
    const std::size_t as = static_cast<std::size_t>(a.dim(1)) * a.dim(2);
    const std::size_t bs = static_cast<std::size_t>(b.dim(1)) * b.dim(2);
    const std::size_t os = static_cast<std::size_t>(m) * n;
    for (int t = 0; t < batch; ++t)
        gemm(ta, tb, m, n, ka, a.data().data() + t * as, b.data().data() + t * bs,
             out.data().data() + t * os, false);
    maybe_record(out, a.requires_grad() || b.requires_grad(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl(), ta, tb, batch, m, n, ka, as, bs, os] {
                     if (oi->grad.empty()) return;
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         for (int t = 0; t < batch; ++t) {
                             const T* g = oi->grad.data() + t * os;
                             if (!ta)
                                 gemm(false, !tb, m, ka, n, g, bi->data.data() + t * bs, ga.data() + t * as, true);
                             else
                                 gemm(tb, true, ka, m, n, bi->data.data() + t * bs, g, ga.data() + t * as, true);
                         }
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (int t = 0; t < batch; ++t) {
                             const T* g = oi->grad.data() + t * os;
                             if (!tb)
                                 gemm(!ta, false, ka, n, m, ai->data.data() + t * as, g, gb.data() + t * bs, true);
                             else
                                 gemm(true, ta, n, ka, m, g, ai->data.data() + t * as, gb.data() + t * bs, true);
                         }
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    if (w.rank() != 2) throw ShapeError("linear: weight must be rank 2");
    if (x.rank() != 2 && x.rank() != 3) throw ShapeError("linear: input must be rank 2 or 3");
    const int din = w.dim(0), dout = w.dim(1);
    if (x.dim(x.rank() - 1) != din) throw ShapeError("linear: input feature extent mismatch");
    std::vector<int> oshape = x.shape();
    oshape.back() = dout;
    const int rows = static_cast<int>(x.numel()) / din;
    Tensor<T> out(oshape);
    gemm(false, false, rows, dout, din, x.data().data(), w.data().data(), out.data().data(), false);
    maybe_record(out, x.requires_grad() || w.requires_grad(),
                 [xi = x.impl(), wi = w.impl(), oi = out.impl(), rows, din, dout] {
                     if (oi->grad.empty()) return;
                     const T* g = oi->grad.data();
                     if (xi->requires_grad) {
                         auto& gx = ensure_grad(*xi);
                         gemm(false, true, rows, din, dout, g, wi->data.data(), gx.data(), true);
                     }
                     if (wi->requires_grad) {
                         auto& gw = ensure_grad(*wi);
                         gemm(true, false, din, dout, rows, xi->data.data(), g, gw.data(), true);
                     }
                 });
    return out;
}

// ---------------------------------------------------------------- convolution

namespace {

// Shared bound computation: valid output range such that in-coordinates stay
// inside [0, extent).
inline void conv_bounds(int out_extent, int kpos, int pad, int stride, int in_extent, int& lo, int& hi) {
    const int off = kpos - pad;
    lo = off < 0 ? ceil_div(-off, stride) : 0;
    hi = ceil_div(in_extent - off, stride);
    if (hi > out_extent) hi = out_extent;
    if (lo > hi) lo = hi;
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 4) throw ShapeError("conv2d: expected x[Cin,H,W], w[Cout,Cin,kh,kw]");
    if (x.dim(0) != w.dim(1)) throw ShapeError("conv2d: channel extents differ");
    if (stride != 1 && stride != 2) throw ValueError("conv2d: stride must be 1 or 2");
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || wd + 2 * pad < kw || ho < 1 || wo < 1)
        throw ShapeError("conv2d: non-positive output extent");
    Tensor<T> out({cout, ho, wo});
    const T* xd = x.data().data();
    const T* wdp = w.data().data();
    T* od = out.data().data();
    for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
            for (int ky = 0; ky < kh; ++ky) {
                int ylo, yhi;
                conv_bounds(ho, ky, pad, stride, h, ylo, yhi);
                for (int kx = 0; kx < kw; ++kx) {
                    const T wv = wdp[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                    if (wv == T(0)) continue;
                    int xlo, xhi;
                    conv_bounds(wo, kx, pad, stride, wd, xlo, xhi);
                    const int d = kx - pad;
                    for (int oy = ylo; oy < yhi; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        const T* xrow = xd + (static_cast<std::size_t>(ci) * h + iy) * wd;
                        T* orow = od + (static_cast<std::size_t>(co) * ho + oy) * wo;
                        if (stride == 1)
                            for (int ox = xlo; ox < xhi; ++ox) orow[ox] += wv * xrow[ox + d];
                        else
                            for (int ox = xlo; ox < xhi; ++ox) orow[ox] += wv * xrow[2 * ox + d];
                    }
                }
            }
    maybe_record(out, x.requires_grad() || w.requires_grad(),
                 [xi = x.impl(), wi = w.impl(), oi = out.impl(), stride, pad, cin, h, wd, cout, kh, kw,
                  ho, wo] {
                     if (oi->grad.empty()) return;
                     const T* g = oi->grad.data();
                     if (xi->requires_grad) {
                         auto& gx = ensure_grad(*xi);
                         for (int co = 0; co < cout; ++co)
                             for (int ci = 0; ci < cin; ++ci)
                                 for (int ky = 0; ky < kh; ++ky) {
                                     int ylo, yhi;
                                     conv_bounds(ho, ky, pad, stride, h, ylo, yhi);
                                     for (int kx = 0; kx < kw; ++kx) {
                                         const T wv = wi->data[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx];
                                         if (wv == T(0)) continue;
                                         int xlo, xhi;
                                         conv_bounds(wo, kx, pad, stride, wd, xlo, xhi);
                                         const int d = kx - pad;
                                         for (int oy = ylo; oy < yhi; ++oy) {
                                             const int iy = oy * stride + ky - pad;
                                             T* gxrow = gx.data() + (static_cast<std::size_t>(ci) * h + iy) * wd;
                                             const T* grow = g + (static_cast<std::size_t>(co) * ho + oy) * wo;
                                             if (stride == 1)
                                                 for (int ox = xlo; ox < xhi; ++ox) gxrow[ox + d] += wv * grow[ox];
                                             else
                                                 for (int ox = xlo; ox < xhi; ++ox) gxrow[2 * ox + d] += wv * grow[ox];
                                         }
                                     }
                                 }
                     }
                     if (wi->requires_grad) {
                         auto& gw = ensure_grad(*wi);
                         for (int co = 0; co < cout; ++co)
                             for (int ci = 0; ci < cin; ++ci)
                                 for (int ky = 0; ky < kh; ++ky) {
                                     int ylo, yhi;
                                     conv_bounds(ho, ky, pad, stride, h, ylo, yhi);
                                     for (int kx = 0; kx < kw; ++kx) {
                                         int xlo, xhi;
                                         conv_bounds(wo, kx, pad, stride, wd, xlo, xhi);
                                         const int d = kx - pad;
                                         T acc = T(0);
                                         for (int oy = ylo; oy < yhi; ++oy) {
                                             const int iy = oy * stride + ky - pad;
                                             const T* xrow = xi->data.data() + (static_cast<std::size_t>(ci) * h + iy) * wd;
                                             const T* grow = g + (static_cast<std::size_t>(co) * ho + oy) * wo;
                                             if (stride == 1)
                                                 for (int ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xrow[ox + d];
                                             else
                                                 for (int ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xrow[2 * ox + d];
                                         }
                                         gw[((static_cast<std::size_t>(co) * cin + ci) * kh + ky) * kw + kx] += acc;
                                     }
                                 }
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> dwconv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
    if (x.rank() != 3 || w.rank() != 3) throw ShapeError("dwconv2d: expected x[C,H,W], w[C,kh,kw]");
    if (x.dim(0) != w.dim(0)) throw ShapeError("dwconv2d: channel extents differ");
    const int kh = w.dim(1), kw = w.dim(2);
    if (pad < 0) {
        if (kh % 2 == 0 || kw % 2 == 0) throw ValueError("dwconv2d: same padding needs odd kernel");
        pad = kh / 2;
    }
    if (stride != 1 && stride != 2) throw ValueError("dwconv2d: stride must be 1 or 2");
    const int c = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int ho = (h + 2 * pad - kh) / stride + 1;
    const int wo = (wd + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1) throw ShapeError("dwconv2d: non-positive output extent");
    Tensor<T> out({c, ho, wo});
    const T* xd = x.data().data();
    T* od = out.data().data();
    for (int ci = 0; ci < c; ++ci)
        for (int ky = 0; ky < kh; ++ky) {
            int ylo, yhi;
            conv_bounds(ho, ky, pad, stride, h, ylo, yhi);
            for (int kx = 0; kx < kw; ++kx) {
                const T wv = w.data()[(static_cast<std::size_t>(ci) * kh + ky) * kw + kx];
                int xlo, xhi;
                conv_bounds(wo, kx, pad, stride, wd, xlo, xhi);
                const int d = kx - pad;
                for (int oy = ylo; oy < yhi; ++oy) {
                    const int iy = oy * stride + ky - pad;
                    const T* xrow = xd + (static_cast<std::size_t>(ci) * h + iy) * wd;
                    T* orow = od + (static_cast<std::size_t>(ci) * ho + oy) * wo;
                    if (stride == 1)
                        for (int ox = xlo; ox < xhi; ++ox) orow[ox] += wv * xrow[ox + d];
                    else
                        for (int ox = xlo; ox < xhi; ++ox) orow[ox] += wv * xrow[2 * ox + d];
                }
            }
        }
    maybe_record(out, x.requires_grad() || w.requires_grad(),
                 [xi = x.impl(), wi = w.impl(), oi = out.impl(), stride, pad, c, h, wd, kh, kw, ho, wo] {
                     if (oi->grad.empty()) return;
                     const T* g = oi->grad.data();
                     for (int ci = 0; ci < c; ++ci)
                         for (int ky = 0; ky < kh; ++ky) {
                             int ylo, yhi;
                             conv_bounds(ho, ky, pad, stride, h, ylo, yhi);
                             for (int kx = 0; kx < kw; ++kx) {
                                 int xlo, xhi;
                                 conv_bounds(wo, kx, pad, stride, wd, xlo, xhi);
                                 const T wv = wi->data[(static_cast<std::size_t>(ci) * kh + ky) * kw + kx];
                                 const int d = kx - pad;
                                 T acc = T(0);
                                 for (int oy = ylo; oy < yhi; ++oy) {
                                     const int iy = oy * stride + ky - pad;
                                     const std::size_t xoff = (static_cast<std::size_t>(ci) * h + iy) * wd;
                                     const T* grow = g + (static_cast<std::size_t>(ci) * ho + oy) * wo;
                                     if (xi->requires_grad) {
                                         auto& gx = ensure_grad(*xi);
                                         T* gxrow = gx.data() + xoff;
                                         if (stride == 1)
                                             for (int ox = xlo; ox < xhi; ++ox) gxrow[ox + d] += wv * grow[ox];
                                         else
                                             for (int ox = xlo; ox < xhi; ++ox) gxrow[2 * ox + d] += wv * grow[ox];
                                     }
                                     if (wi->requires_grad) {
                                         const T* xrow = xi->data.data() + xoff;
                                         if (stride == 1)
                                             for (int ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xrow[ox + d];
                                         else
                                             for (int ox = xlo; ox < xhi; ++ox) acc += grow[ox] * xrow[2 * ox + d];
                                     }
                                 }
                                 if (wi->requires_grad)
                                     ensure_grad(*wi)[(static_cast<std::size_t>(ci) * kh + ky) * kw + kx] += acc;
                             }
                         }
                 });
    return out;
}

template <typename T>
Tensor<T> transposed_conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride) {
    if (x.rank() != 3 || w.rank() != 4)
        throw ShapeError("transposed_conv2d: expected x[Cin,H,W], w[Cin,Cout,kh,kw]");
    if (x.dim(0) != w.dim(0)) throw ShapeError("transposed_conv2d: channel extents differ");
    const int cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int cout = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const int ho = (h - 1) * stride + kh;
    const int wo = (wd - 1) * stride + kw;
    Tensor<T> out({cout, ho, wo});
    for (int ci = 0; ci < cin; ++ci)
        for (int co = 0; co < cout; ++co)
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    const T wv = w.data()[((static_cast<std::size_t>(ci) * cout + co) * kh + ky) * kw + kx];
                    if (wv == T(0)) continue;
                    for (int iy = 0; iy < h; ++iy) {
                        const T* xrow = x.data().data() + (static_cast<std::size_t>(ci) * h + iy) * wd;
                        T* orow = out.data().data() + (static_cast<std::size_t>(co) * ho + iy * stride + ky) * wo + kx;
                        for (int ix = 0; ix < wd; ++ix) orow[ix * stride] += wv * xrow[ix];
                    }
                }
    maybe_record(out, x.requires_grad() || w.requires_grad(),
                 [xi = x.impl(), wi = w.impl(), oi = out.impl(), stride, cin, h, wd, cout, kh, kw, ho, wo] {
                     if (oi->grad.empty()) return;
                     const T* g = oi->grad.data();
                     for (int ci = 0; ci < cin; ++ci)
                         for (int co = 0; co < cout; ++co)
                             for (int ky = 0; ky < kh; ++ky)
                                 for (int kx = 0; kx < kw; ++kx) {
                                     const std::size_t widx = ((static_cast<std::size_t>(ci) * cout + co) * kh + ky) * kw + kx;
                                     const T wv = wi->data[widx];
                                     T acc = T(0);
                                     for (int iy = 0; iy < h; ++iy) {
                                         const T* grow = g + (static_cast<std::size_t>(co) * ho + iy * stride + ky) * wo + kx;
                                         const std::size_t xoff = (static_cast<std::size_t>(ci) * h + iy) * wd;
                                         if (xi->requires_grad) {
                                             auto& gx = ensure_grad(*xi);
                                             T* gxrow = gx.data() + xoff;
                                             for (int ix = 0; ix < wd; ++ix) gxrow[ix] += wv * grow[ix * stride];
                                         }
                                         if (wi->requires_grad) {
                                             const T* xrow = xi->data.data() + xoff;
                                             for (int ix = 0; ix < wd; ++ix) acc += xrow[ix] * grow[ix * stride];
                                         }
                                     }
                                     if (wi->requires_grad) ensure_grad(*wi)[widx] += acc;
                                 }
                 });
    return out;
}

// ---------------------------------------------------------------- shape ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, std::vector<int> shape) {
    if (Tensor<T>::count(shape) != x.numel()) throw ShapeError("reshape: element count mismatch");
    Tensor<T> out = Tensor<T>::from(std::move(shape), x.data());
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl()] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
    return out;
}

template <typename T>
Tensor<T> concat0(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != b.rank()) throw ShapeError("concat0: rank mismatch");
    for (int i = 1; i < a.rank(); ++i)
        if (a.dim(i) != b.dim(i)) throw ShapeError("concat0: trailing extents differ");
    std::vector<int> shape = a.shape();
    shape[0] += b.dim(0);
    Tensor<T> out(shape);
    std::memcpy(out.data().data(), a.data().data(), sizeof(T) * a.numel());
    std::memcpy(out.data().data() + a.numel(), b.data().data(), sizeof(T) * b.numel());
    maybe_record(out, a.requires_grad() || b.requires_grad(),
                 [ai = a.impl(), bi = b.impl(), oi = out.impl()] {
                     if (oi->grad.empty()) return;
                     const std::size_t na = ai->data.size();
                     if (ai->requires_grad) {
                         auto& ga = ensure_grad(*ai);
                         for (std::size_t i = 0; i < na; ++i) ga[i] += oi->grad[i];
                     }
                     if (bi->requires_grad) {
                         auto& gb = ensure_grad(*bi);
                         for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += oi->grad[na + i];
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> slice0(const Tensor<T>& x, int begin, int end) {
    if (begin < 0 || end > x.dim(0) || begin >= end) throw ShapeError("slice0: bad range");
    std::vector<int> shape = x.shape();
    shape[0] = end - begin;
    const std::size_t stride = x.numel() / x.dim(0);
    Tensor<T> out(shape);
    std::memcpy(out.data().data(), x.data().data() + begin * stride, sizeof(T) * out.numel());
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), begin, stride] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (std::size_t i = 0; i < oi->grad.size(); ++i) gx[begin * stride + i] += oi->grad[i];
    });
    return out;
}

namespace {
// Reflect-101 coordinate fold; pad must be < extent.
inline int reflect_idx(int i, int n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
    return i;
}
}  // namespace

template <typename T>
Tensor<T> pad_reflect(const Tensor<T>& x, int top, int bottom, int left, int right) {
    if (x.rank() != 3) throw ShapeError("pad_reflect: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (top >= h || bottom >= h || left >= w || right >= w)
        throw ValueError("pad_reflect: pad must be smaller than extent");
    const int ho = h + top + bottom, wo = w + left + right;
    Tensor<T> out({c, ho, wo});
    for (int ci = 0; ci < c; ++ci)
        for (int oy = 0; oy < ho; ++oy) {
            const int iy = reflect_idx(oy - top, h);
            for (int ox = 0; ox < wo; ++ox) {
                const int ix = reflect_idx(ox - left, w);
                out.data()[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox] =
                    x.data()[(static_cast<std::size_t>(ci) * h + iy) * w + ix];
            }
        }
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), c, h, w, top, left, ho, wo] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (int ci = 0; ci < c; ++ci)
            for (int oy = 0; oy < ho; ++oy) {
                const int iy = reflect_idx(oy - top, h);
                for (int ox = 0; ox < wo; ++ox) {
                    const int ix = reflect_idx(ox - left, w);
                    gx[(static_cast<std::size_t>(ci) * h + iy) * w + ix] +=
                        oi->grad[(static_cast<std::size_t>(ci) * ho + oy) * wo + ox];
                }
            }
    });
    return out;
}

template <typename T>
Tensor<T> crop(const Tensor<T>& x, int top, int left, int h, int w) {
    if (x.rank() != 3) throw ShapeError("crop: expected [C,H,W]");
    const int c = x.dim(0), hi = x.dim(1), wi = x.dim(2);
    if (top < 0 || left < 0 || top + h > hi || left + w > wi) throw ShapeError("crop: region out of range");
    Tensor<T> out({c, h, w});
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < h; ++y)
            std::memcpy(out.data().data() + (static_cast<std::size_t>(ci) * h + y) * w,
                        x.data().data() + (static_cast<std::size_t>(ci) * hi + top + y) * wi + left,
                        sizeof(T) * w);
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), c, hi, wi, top, left, h, w] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < h; ++y)
                for (int x2 = 0; x2 < w; ++x2)
                    gx[(static_cast<std::size_t>(ci) * hi + top + y) * wi + left + x2] +=
                        oi->grad[(static_cast<std::size_t>(ci) * h + y) * w + x2];
    });
    return out;
}

// ---------------------------------------------------------------- attention

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: axis out of range");
    const int n = x.dim(axis);
    std::size_t inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t outer = x.numel() / (inner * n);
    Tensor<T> out(x.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            T mx = x.data()[base];
            for (int t = 1; t < n; ++t) mx = std::max(mx, x.data()[base + t * inner]);
            double denom = 0.0;
            for (int t = 0; t < n; ++t) {
                const double e = std::exp(static_cast<double>(x.data()[base + t * inner] - mx));
                out.data()[base + t * inner] = static_cast<T>(e);
                denom += e;
            }
            const double inv = 1.0 / denom;
            for (int t = 0; t < n; ++t)
                out.data()[base + t * inner] = static_cast<T>(static_cast<double>(out.data()[base + t * inner]) * inv);
        }
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), n, inner, outer] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * n * inner + in;
                T dotv = T(0);
                for (int t = 0; t < n; ++t) dotv += oi->grad[base + t * inner] * oi->data[base + t * inner];
                for (int t = 0; t < n; ++t) {
                    const std::size_t k = base + t * inner;
                    gx[k] += (oi->grad[k] - dotv) * oi->data[k];
                }
            }
    });
    return out;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, int axis,
                    double eps) {
    if (axis < 0 || axis >= x.rank()) throw ShapeError("layernorm: axis out of range");
    const int n = x.dim(axis);
    if (gain.rank() != 1 || gain.dim(0) != n || bias.rank() != 1 || bias.dim(0) != n)
        throw ShapeError("layernorm: gain/bias extent mismatch");
    std::size_t inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t outer = x.numel() / (inner * n);
    Tensor<T> out(x.shape());
    // xhat is needed by backward; recomputing it there would duplicate the
    // normalization, so keep a copy alongside the output.
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto inv_std = std::make_shared<std::vector<T>>(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mean = 0.0;
            for (int t = 0; t < n; ++t) mean += static_cast<double>(x.data()[base + t * inner]);
            mean /= n;
            double var = 0.0;
            for (int t = 0; t < n; ++t) {
                const double d = static_cast<double>(x.data()[base + t * inner]) - mean;
                var += d * d;
            }
            var /= n;
            const double inv = 1.0 / std::sqrt(var + eps);
            (*inv_std)[o * inner + in] = static_cast<T>(inv);
            for (int t = 0; t < n; ++t) {
                const std::size_t k = base + t * inner;
                const T xh = static_cast<T>((static_cast<double>(x.data()[k]) - mean) * inv);
                (*xhat)[k] = xh;
                out.data()[k] = xh * gain.data()[t] + bias.data()[t];
            }
        }
    maybe_record(out, x.requires_grad() || gain.requires_grad() || bias.requires_grad(),
                 [xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl(), xhat, inv_std, n,
                  inner, outer] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t in = 0; in < inner; ++in) {
                             const std::size_t base = o * n * inner + in;
                             if (gi->requires_grad) {
                                 auto& gg = ensure_grad(*gi);
                                 for (int t = 0; t < n; ++t)
                                     gg[t] += g[base + t * inner] * (*xhat)[base + t * inner];
                             }
                             if (bi->requires_grad) {
                                 auto& gb = ensure_grad(*bi);
                                 for (int t = 0; t < n; ++t) gb[t] += g[base + t * inner];
                             }
                             if (xi->requires_grad) {
                                 auto& gx = ensure_grad(*xi);
                                 double m1 = 0.0, m2 = 0.0;
                                 for (int t = 0; t < n; ++t) {
                                     const std::size_t k = base + t * inner;
                                     const double dxh = static_cast<double>(g[k]) * gi->data[t];
                                     m1 += dxh;
                                     m2 += dxh * (*xhat)[k];
                                 }
                                 m1 /= n;
                                 m2 /= n;
                                 const double inv = (*inv_std)[o * inner + in];
                                 for (int t = 0; t < n; ++t) {
                                     const std::size_t k = base + t * inner;
                                     const double dxh = static_cast<double>(g[k]) * gi->data[t];
                                     gx[k] += static_cast<T>(inv * (dxh - m1 - (*xhat)[k] * m2));
                                 }
                             }
                         }
                 });
    return out;
}

namespace {
// Gather map for (shifted) window partitioning: flat window-token index ->
// flat image index. The shift is a cyclic roll applied before partitioning.
std::vector<std::size_t> window_map(int c, int h, int w, int p, int shift) {
    const int gy = h / p, gx = w / p;
    std::vector<std::size_t> map(static_cast<std::size_t>(gy) * gx * p * p);
    std::size_t n = 0;
    for (int wy = 0; wy < gy; ++wy)
        for (int wx = 0; wx < gx; ++wx)
            for (int ty = 0; ty < p; ++ty)
                for (int tx = 0; tx < p; ++tx) {
                    const int sy = (wy * p + ty + shift) % h;
                    const int sx = (wx * p + tx + shift) % w;
                    map[n++] = static_cast<std::size_t>(sy) * w + sx;
                }
    (void)c;
    return map;
}
}  // namespace

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int p, int shift) {
    if (x.rank() != 3) throw ShapeError("window_partition: expected [C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h % p != 0 || w % p != 0) throw ShapeError("window_partition: extents not divisible by window");
    const int nw = (h / p) * (w / p), t = p * p;
    const auto map = window_map(c, h, w, p, shift);
    Tensor<T> out({nw, t, c});
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int wi = 0; wi < nw; ++wi)
        for (int ti = 0; ti < t; ++ti) {
            const std::size_t src = map[static_cast<std::size_t>(wi) * t + ti];
            for (int ci = 0; ci < c; ++ci)
                out.data()[(static_cast<std::size_t>(wi) * t + ti) * c + ci] = x.data()[ci * plane + src];
        }
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), map, nw, t, c, plane] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (int wi = 0; wi < nw; ++wi)
            for (int ti = 0; ti < t; ++ti) {
                const std::size_t src = map[static_cast<std::size_t>(wi) * t + ti];
                for (int ci = 0; ci < c; ++ci)
                    gx[ci * plane + src] += oi->grad[(static_cast<std::size_t>(wi) * t + ti) * c + ci];
            }
    });
    return out;
}

template <typename T>
Tensor<T> window_unpartition(const Tensor<T>& x, int height, int width, int p, int shift) {
    if (x.rank() != 3) throw ShapeError("window_unpartition: expected [nw,p^2,C]");
    const int nw = x.dim(0), t = x.dim(1), c = x.dim(2);
    if (t != p * p || nw != (height / p) * (width / p) || height % p != 0 || width % p != 0)
        throw ShapeError("window_unpartition: extents inconsistent with window grid");
    const auto map = window_map(c, height, width, p, shift);
    Tensor<T> out({c, height, width});
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    for (int wi = 0; wi < nw; ++wi)
        for (int ti = 0; ti < t; ++ti) {
            const std::size_t dst = map[static_cast<std::size_t>(wi) * t + ti];
            for (int ci = 0; ci < c; ++ci)
                out.data()[ci * plane + dst] = x.data()[(static_cast<std::size_t>(wi) * t + ti) * c + ci];
        }
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), map, nw, t, c, plane] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (int wi = 0; wi < nw; ++wi)
            for (int ti = 0; ti < t; ++ti) {
                const std::size_t dst = map[static_cast<std::size_t>(wi) * t + ti];
                for (int ci = 0; ci < c; ++ci)
                    gx[(static_cast<std::size_t>(wi) * t + ti) * c + ci] += oi->grad[ci * plane + dst];
            }
    });
    return out;
}

template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, int heads) {
    if (x.rank() != 3) throw ShapeError("split_heads: expected [B,t,C]");
    const int b = x.dim(0), t = x.dim(1), c = x.dim(2);
    if (c % heads != 0) throw ShapeError("split_heads: heads must divide channels");
    const int dh = c / heads;
    Tensor<T> out({b * heads, t, dh});
    for (int bi = 0; bi < b; ++bi)
        for (int ti = 0; ti < t; ++ti)
            for (int hd = 0; hd < heads; ++hd)
                std::memcpy(out.data().data() + ((static_cast<std::size_t>(bi) * heads + hd) * t + ti) * dh,
                            x.data().data() + (static_cast<std::size_t>(bi) * t + ti) * c + hd * dh,
                            sizeof(T) * dh);
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), b, t, c, heads, dh] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (int bi = 0; bi < b; ++bi)
            for (int ti = 0; ti < t; ++ti)
                for (int hd = 0; hd < heads; ++hd)
                    for (int j = 0; j < dh; ++j)
                        gx[(static_cast<std::size_t>(bi) * t + ti) * c + hd * dh + j] +=
                            oi->grad[((static_cast<std::size_t>(bi) * heads + hd) * t + ti) * dh + j];
    });
    return out;
}

template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x, int heads) {
    if (x.rank() != 3) throw ShapeError("merge_heads: expected [B*h,t,dh]");
    const int bh = x.dim(0), t = x.dim(1), dh = x.dim(2);
    if (bh % heads != 0) throw ShapeError("merge_heads: batch not divisible by heads");
    const int b = bh / heads, c = dh * heads;
    Tensor<T> out({b, t, c});
    for (int bi = 0; bi < b; ++bi)
        for (int ti = 0; ti < t; ++ti)
            for (int hd = 0; hd < heads; ++hd)
                std::memcpy(out.data().data() + (static_cast<std::size_t>(bi) * t + ti) * c + hd * dh,
                            x.data().data() + ((static_cast<std::size_t>(bi) * heads + hd) * t + ti) * dh,
                            sizeof(T) * dh);
    maybe_record(out, x.requires_grad(), [xi = x.impl(), oi = out.impl(), b, t, c, heads, dh] {
        if (oi->grad.empty() || !xi->requires_grad) return;
        auto& gx = ensure_grad(*xi);
        for (int bi = 0; bi < b; ++bi)
            for (int ti = 0; ti < t; ++ti)
                for (int hd = 0; hd < heads; ++hd)
                    for (int j = 0; j < dh; ++j)
                        gx[((static_cast<std::size_t>(bi) * heads + hd) * t + ti) * dh + j] +=
                            oi->grad[(static_cast<std::size_t>(bi) * t + ti) * c + hd * dh + j];
    });
    return out;
}

template <typename T>
Tensor<T> add_rpe(const Tensor<T>& logits, const Tensor<T>& table, int p, int heads) {
    if (logits.rank() != 3 || logits.dim(1) != p * p || logits.dim(2) != p * p)
        throw ShapeError("add_rpe: logits must be [B*h, p^2, p^2]");
    const int span = 2 * p - 1;
    if (table.rank() != 2 || table.dim(0) != heads || table.dim(1) != span * span)
        throw ShapeError("add_rpe: table must be [heads, (2p-1)^2]");
    const int t = p * p, bh = logits.dim(0);
    if (bh % heads != 0) throw ShapeError("add_rpe: batch not divisible by heads");
    auto idx = std::make_shared<std::vector<int>>(static_cast<std::size_t>(t) * t);
    for (int i = 0; i < t; ++i)
        for (int j = 0; j < t; ++j) {
            const int dy = (i / p) - (j / p) + p - 1;
            const int dx = (i % p) - (j % p) + p - 1;
            (*idx)[static_cast<std::size_t>(i) * t + j] = dy * span + dx;
        }
    Tensor<T> out(logits.shape());
    for (int b = 0; b < bh; ++b) {
        const int hd = b % heads;
        const T* tr = table.data().data() + static_cast<std::size_t>(hd) * span * span;
        const T* in = logits.data().data() + static_cast<std::size_t>(b) * t * t;
        T* o = out.data().data() + static_cast<std::size_t>(b) * t * t;
        for (std::size_t k = 0; k < static_cast<std::size_t>(t) * t; ++k) o[k] = in[k] + tr[(*idx)[k]];
    }
    maybe_record(out, logits.requires_grad() || table.requires_grad(),
                 [li = logits.impl(), ti = table.impl(), oi = out.impl(), idx, bh, heads, t, span] {
                     if (oi->grad.empty()) return;
                     if (li->requires_grad) {
                         auto& gl = ensure_grad(*li);
                         for (std::size_t i = 0; i < gl.size(); ++i) gl[i] += oi->grad[i];
                     }
                     if (ti->requires_grad) {
                         auto& gt = ensure_grad(*ti);
                         for (int b = 0; b < bh; ++b) {
                             const int hd = b % heads;
                             T* row = gt.data() + static_cast<std::size_t>(hd) * span * span;
                             const T* g = oi->grad.data() + static_cast<std::size_t>(b) * t * t;
                             for (std::size_t k = 0; k < static_cast<std::size_t>(t) * t; ++k)
                                 row[(*idx)[k]] += g[k];
                         }
                     }
                 });
    return out;
}

template <typename T>
Tensor<T> bscale(const Tensor<T>& x, const Tensor<T>& s) {
    if (s.rank() != 1 || s.dim(0) != x.dim(0)) throw ShapeError("bscale: scale extent must match batch");
    Tensor<T> out(x.shape());
    const int b = x.dim(0);
    const std::size_t stride = x.numel() / b;
    for (int bi = 0; bi < b; ++bi) {
        const T sv = s.data()[bi];
        for (std::size_t i = 0; i < stride; ++i)
            out.data()[bi * stride + i] = x.data()[bi * stride + i] * sv;
    }
    maybe_record(out, x.requires_grad() || s.requires_grad(),
                 [xi = x.impl(), si = s.impl(), oi = out.impl(), b, stride] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     if (xi->requires_grad) {
                         auto& gx = ensure_grad(*xi);
                         for (int bi = 0; bi < b; ++bi) {
                             const T sv = si->data[bi];
                             for (std::size_t i = 0; i < stride; ++i) gx[bi * stride + i] += g[bi * stride + i] * sv;
                         }
                     }
                     if (si->requires_grad) {
                         auto& gs = ensure_grad(*si);
                         for (int bi = 0; bi < b; ++bi) {
                             T acc = T(0);
                             for (std::size_t i = 0; i < stride; ++i) acc += g[bi * stride + i] * xi->data[bi * stride + i];
                             gs[bi] += acc;
                         }
                     }
                 });
    return out;
}

// ---------------------------------------------------------------- adaconv

template <typename T>
Tensor<T> adaconv_apply(const Tensor<T>& x, const Tensor<T>& kernels) {
    if (x.rank() != 3) throw ShapeError("adaconv_apply: expected x[C,H,W]");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (kernels.rank() != 3 || kernels.dim(0) != h * w || kernels.dim(1) != c || kernels.dim(2) != 9)
        throw ShapeError("adaconv_apply: kernels must be [H*W, C, 9]");
    Tensor<T> out({c, h, w});
    const T* xd = x.data().data();
    const T* kd = kernels.data().data();
    T* od = out.data().data();
    for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) {
            const std::size_t pix = static_cast<std::size_t>(y) * w + xx;
            const T* kpix = kd + pix * c * 9;
            for (int ci = 0; ci < c; ++ci) {
                T acc = T(0);
                const T* kk = kpix + ci * 9;
                for (int u = 0; u < 3; ++u) {
                    const int iy = y + u - 1;
                    if (iy < 0 || iy >= h) continue;
                    for (int v = 0; v < 3; ++v) {
                        const int ix = xx + v - 1;
                        if (ix < 0 || ix >= w) continue;
                        acc += kk[u * 3 + v] * xd[(static_cast<std::size_t>(ci) * h + iy) * w + ix];
                    }
                }
                od[ci * static_cast<std::size_t>(h) * w + pix] = acc;
            }
        }
    maybe_record(out, x.requires_grad() || kernels.requires_grad(),
                 [xi = x.impl(), ki = kernels.impl(), oi = out.impl(), c, h, w] {
                     if (oi->grad.empty()) return;
                     const auto& g = oi->grad;
                     const std::size_t plane = static_cast<std::size_t>(h) * w;
                     for (int y = 0; y < h; ++y)
                         for (int xx = 0; xx < w; ++xx) {
                             const std::size_t pix = static_cast<std::size_t>(y) * w + xx;
                             for (int ci = 0; ci < c; ++ci) {
                                 const T gv = g[ci * plane + pix];
                                 if (gv == T(0)) continue;
                                 for (int u = 0; u < 3; ++u) {
                                     const int iy = y + u - 1;
                                     if (iy < 0 || iy >= h) continue;
                                     for (int v = 0; v < 3; ++v) {
                                         const int ix = xx + v - 1;
                                         if (ix < 0 || ix >= w) continue;
                                         const std::size_t xoff = ci * plane + static_cast<std::size_t>(iy) * w + ix;
                                         const std::size_t koff = (pix * c + ci) * 9 + u * 3 + v;
                                         if (ki->requires_grad) ensure_grad(*ki)[koff] += gv * xi->data[xoff];
                                         if (xi->requires_grad) ensure_grad(*xi)[xoff] += gv * ki->data[koff];
                                     }
                                 }
                             }
                         }
                 });
    return out;
}

// ------------------------------------------------------------ instantiation

#define PXUN_INSTANTIATE(T)                                                                        \
    template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                    \
    template Tensor<T> scale(const Tensor<T>&, double);                                            \
    template Tensor<T> add_scalar(const Tensor<T>&, double);                                       \
    template Tensor<T> mul_scalar_t(const Tensor<T>&, const Tensor<T>&);                           \
    template Tensor<T> relu(const Tensor<T>&);                                                     \
    template Tensor<T> gelu(const Tensor<T>&);                                                     \
    template Tensor<T> sigmoid(const Tensor<T>&);                                                  \
    template Tensor<T> softplus(const Tensor<T>&);                                                 \
    template Tensor<T> recip(const Tensor<T>&);                                                    \
    template Tensor<T> square(const Tensor<T>&);                                                   \
    template Tensor<T> sum(const Tensor<T>&);                                                      \
    template Tensor<T> sum_sq_diff(const Tensor<T>&, const Tensor<T>&);                            \
    template Tensor<T> add_bias_chan(const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> add_bias_last(const Tensor<T>&, const Tensor<T>&);                          \
    template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                     \
    template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&, bool, bool);                        \
    template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);                       \
    template Tensor<T> dwconv2d(const Tensor<T>&, const Tensor<T>&, int, int);                     \
    template Tensor<T> transposed_conv2d(const Tensor<T>&, const Tensor<T>&, int);                 \
    template Tensor<T> reshape(const Tensor<T>&, std::vector<int>);                                \
    template Tensor<T> concat0(const Tensor<T>&, const Tensor<T>&);                                \
    template Tensor<T> slice0(const Tensor<T>&, int, int);                                         \
    template Tensor<T> pad_reflect(const Tensor<T>&, int, int, int, int);                          \
    template Tensor<T> crop(const Tensor<T>&, int, int, int, int);                                 \
    template Tensor<T> softmax(const Tensor<T>&, int);                                             \
    template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, double); \
    template Tensor<T> window_partition(const Tensor<T>&, int, int);                               \
    template Tensor<T> window_unpartition(const Tensor<T>&, int, int, int, int);                   \
    template Tensor<T> split_heads(const Tensor<T>&, int);                                         \
    template Tensor<T> merge_heads(const Tensor<T>&, int);                                         \
    template Tensor<T> add_rpe(const Tensor<T>&, const Tensor<T>&, int, int);                      \
    template Tensor<T> bscale(const Tensor<T>&, const Tensor<T>&);                                 \
    template Tensor<T> adaconv_apply(const Tensor<T>&, const Tensor<T>&);

PXUN_INSTANTIATE(float)
PXUN_INSTANTIATE(double)

#undef PXUN_INSTANTIATE

}  // namespace pxun::tg
