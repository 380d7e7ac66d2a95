// Differentiable primitives over Tensor<T>. Every op allocates a fresh
// output, validates shapes, rejects non-finite results, and (when a Tape is
// supplied) records a backward closure. Pass tape == nullptr for inference.
//
// Layout convention: images and feature maps are rank-4 (batch, channel,
// height, width), row-major. Channel-wise ops (linear, layer_norm) treat
// dimension 1 as the feature dimension for rank 2/3/4 inputs.

#pragma once

#include <algorithm>
#include <cmath>

#include "dehaze/tensor.hpp"

namespace dehaze {

namespace detail {

// View a rank-2/3/4 tensor as (batch, channels, positions).
template <typename T>
void bcm_dims(const Tensor<T>& x, std::int64_t& b, std::int64_t& c, std::int64_t& m,
              const char* op) {
    switch (x.rank()) {
        case 2: b = x.dim(0); c = x.dim(1); m = 1; break;
        case 3: b = x.dim(0); c = x.dim(1); m = x.dim(2); break;
        case 4: b = x.dim(0); c = x.dim(1); m = x.dim(2) * x.dim(3); break;
        default:
            throw ShapeError(std::string(op) + ": expected rank 2/3/4, got " +
                             shape_str(x.shape()));
    }
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    detail::require_same_shape(a, b, "add");
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
    check_finite(y, "add");
    if (tape)
        tape->record([a, b, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            auto& gb = b.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i];
                gb[i] += gy[i];
            }
        });
    return y;
}

template <typename T>
Tensor<T> sub(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    detail::require_same_shape(a, b, "sub");
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
    check_finite(y, "sub");
    if (tape)
        tape->record([a, b, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            auto& gb = b.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i];
                gb[i] -= gy[i];
            }
        });
    return y;
}

template <typename T>
Tensor<T> mul(Tape<T>* tape, Tensor<T> a, Tensor<T> b) {
    detail::require_same_shape(a, b, "mul");
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
    check_finite(y, "mul");
    if (tape)
        tape->record([a, b, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            auto& gb = b.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i] * b[i];
                gb[i] += gy[i] * a[i];
            }
        });
    return y;
}

// Multiply by a constant (not a learnable parameter; no gradient to c).
template <typename T>
Tensor<T> scale(Tape<T>* tape, Tensor<T> a, T c) {
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] * c;
    check_finite(y, "scale");
    if (tape)
        tape->record([a, y, c]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
        });
    return y;
}

// Multiply by a learnable scalar held in a 1-element tensor.
template <typename T>
Tensor<T> scale_by_scalar_param(Tape<T>* tape, Tensor<T> a, Tensor<T> s) {
    if (s.numel() != 1)
        throw ShapeError("scale_by_scalar_param: scale must have one element");
    Tensor<T> y(a.shape());
    const T c = s[0];
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] * c;
    check_finite(y, "scale_by_scalar_param");
    if (tape)
        tape->record([a, s, y, c]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            auto& gs = s.grad();
            T acc = 0;
            for (std::size_t i = 0; i < gy.size(); ++i) {
                ga[i] += gy[i] * c;
                acc += gy[i] * a[i];
            }
            gs[0] += acc;
        });
    return y;
}

template <typename T>
Tensor<T> neg(Tape<T>* tape, Tensor<T> a) {
    return scale(tape, a, T(-1));
}

template <typename T>
Tensor<T> exp_op(Tape<T>* tape, Tensor<T> a) {
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = std::exp(a[i]);
    check_finite(y, "exp");
    if (tape)
        tape->record([a, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * y[i];
        });
    return y;
}

template <typename T>
Tensor<T> silu(Tape<T>* tape, Tensor<T> a) {
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const T s = T(1) / (T(1) + std::exp(-a[i]));
        y[i] = a[i] * s;
    }
    check_finite(y, "silu");
    if (tape)
        tape->record([a, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i) {
                const T s = T(1) / (T(1) + std::exp(-a[i]));
                ga[i] += gy[i] * (s * (T(1) + a[i] * (T(1) - s)));
            }
        });
    return y;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, Tensor<T> a) {
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = T(1) / (T(1) + std::exp(-a[i]));
    check_finite(y, "sigmoid");
    if (tape)
        tape->record([a, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                ga[i] += gy[i] * y[i] * (T(1) - y[i]);
        });
    return y;
}

template <typename T>
Tensor<T> relu(Tape<T>* tape, Tensor<T> a) {
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = a[i] > T(0) ? a[i] : T(0);
    if (tape)
        tape->record([a, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (a[i] > T(0)) ga[i] += gy[i];
        });
    return y;
}

template <typename T>
Tensor<T> softplus(Tape<T>* tape, Tensor<T> a) {
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) {
        const T x = a[i];
        y[i] = x > T(20) ? x : std::log1p(std::exp(x));
    }
    check_finite(y, "softplus");
    if (tape)
        tape->record([a, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                ga[i] += gy[i] / (T(1) + std::exp(-a[i]));
        });
    return y;
}

// Clamp to [0,1]; gradient passes through wherever the input already lies in
// the interval (inclusive) and is cut elsewhere.
template <typename T>
Tensor<T> clamp01(Tape<T>* tape, Tensor<T> a) {
    Tensor<T> y(a.shape());
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) y[i] = std::clamp(a[i], T(0), T(1));
    if (tape)
        tape->record([a, y]() mutable {
            const auto& gy = y.grad();
            auto& ga = a.grad();
            for (std::size_t i = 0; i < gy.size(); ++i)
                if (a[i] >= T(0) && a[i] <= T(1)) ga[i] += gy[i];
        });
    return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(Tape<T>* tape, Tensor<T> a) {
    T acc = 0;
    const std::int64_t n = a.numel();
    for (std::int64_t i = 0; i < n; ++i) acc += a[i];
    Tensor<T> y = Tensor<T>::scalar(acc);
    check_finite(y, "sum");
    if (tape)
        tape->record([a, y]() mutable {
            const T g = y.grad()[0];
            auto& ga = a.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    return y;
}

template <typename T>
Tensor<T> mean(Tape<T>* tape, Tensor<T> a) {
    const std::int64_t n = a.numel();
    T acc = 0;
    for (std::int64_t i = 0; i < n; ++i) acc += a[i];
    Tensor<T> y = Tensor<T>::scalar(acc / static_cast<T>(n));
    check_finite(y, "mean");
    if (tape)
        tape->record([a, y, n]() mutable {
            const T g = y.grad()[0] / static_cast<T>(n);
            auto& ga = a.grad();
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
        });
    return y;
}

// ---------------------------------------------------------------------------
// Linear / normalization / softmax
// ---------------------------------------------------------------------------

// Affine map along the channel dimension: x (B, C_in, ...) -> (B, C_out, ...).
// weight is (C_out, C_in); bias (C_out) or a default-constructed tensor for
// no bias.
template <typename T>
Tensor<T> linear(Tape<T>* tape, Tensor<T> x, Tensor<T> weight, Tensor<T> bias) {
    std::int64_t B, C, M;
    detail::bcm_dims(x, B, C, M, "linear");
    if (weight.rank() != 2 || weight.dim(1) != C)
        throw ShapeError("linear: weight " + shape_str(weight.shape()) +
                         " incompatible with input channels " + std::to_string(C));
    const std::int64_t O = weight.dim(0);
    const bool has_bias = bias.numel() != 0;
    if (has_bias && (bias.rank() != 1 || bias.dim(0) != O))
        throw ShapeError("linear: bias " + shape_str(bias.shape()) + " expected (" +
                         std::to_string(O) + ")");
    Shape out_shape = x.shape();
    out_shape[1] = O;
    Tensor<T> y(out_shape);
    const T* xp = x.ptr();
    const T* wp = weight.ptr();
    T* yp = y.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o) {
            T* yrow = yp + (b * O + o) * M;
            const T bv = has_bias ? bias[o] : T(0);
            for (std::int64_t m = 0; m < M; ++m) yrow[m] = bv;
            const T* wrow = wp + o * C;
            for (std::int64_t c = 0; c < C; ++c) {
                const T w = wrow[c];
                if (w == T(0)) continue;
                const T* xrow = xp + (b * C + c) * M;
                for (std::int64_t m = 0; m < M; ++m) yrow[m] += w * xrow[m];
            }
        }
    check_finite(y, "linear");
    if (tape)
        tape->record([x, weight, bias, y, B, C, M, O, has_bias]() mutable {
            const T* gy = y.grad().data();
            const T* xp = x.ptr();
            const T* wp = weight.ptr();
            T* gx = x.grad().data();
            T* gw = weight.grad().data();
            T* gb = has_bias ? bias.grad().data() : nullptr;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t o = 0; o < O; ++o) {
                    const T* gyrow = gy + (b * O + o) * M;
                    if (gb) {
                        T acc = 0;
                        for (std::int64_t m = 0; m < M; ++m) acc += gyrow[m];
                        gb[o] += acc;
                    }
                    const T* wrow = wp + o * C;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* xrow = xp + (b * C + c) * M;
                        T* gxrow = gx + (b * C + c) * M;
                        const T w = wrow[c];
                        T accw = 0;
                        for (std::int64_t m = 0; m < M; ++m) {
                            gxrow[m] += w * gyrow[m];
                            accw += gyrow[m] * xrow[m];
                        }
                        gw[o * C + c] += accw;
                    }
                }
        });
    return y;
}

// LayerNorm over the channel dimension at each (batch, position).
template <typename T>
Tensor<T> layer_norm(Tape<T>* tape, Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                     T eps) {
    if (eps <= T(0)) throw ParamError("layer_norm: eps must be positive");
    std::int64_t B, C, M;
    detail::bcm_dims(x, B, C, M, "layer_norm");
    if (gamma.numel() != C || beta.numel() != C)
        throw ShapeError("layer_norm: gamma/beta must have " + std::to_string(C) +
                         " elements");
    Tensor<T> y(x.shape());
    // xhat retained for backward and for the affine split in tests.
    Tensor<T> xhat(x.shape());
    Tensor<T> istd(Shape{B, std::max<std::int64_t>(M, 1)});
    const T* xp = x.ptr();
    T* yp = y.ptr();
    T* hp = xhat.ptr();
    T* ip = istd.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t m = 0; m < M; ++m) {
            T mu = 0;
            for (std::int64_t c = 0; c < C; ++c) mu += xp[(b * C + c) * M + m];
            mu /= static_cast<T>(C);
            T var = 0;
            for (std::int64_t c = 0; c < C; ++c) {
                const T d = xp[(b * C + c) * M + m] - mu;
                var += d * d;
            }
            var /= static_cast<T>(C);
            const T is = T(1) / std::sqrt(var + eps);
            ip[b * M + m] = is;
            for (std::int64_t c = 0; c < C; ++c) {
                const std::int64_t idx = (b * C + c) * M + m;
                const T h = (xp[idx] - mu) * is;
                hp[idx] = h;
                yp[idx] = gamma[c] * h + beta[c];
            }
        }
    check_finite(y, "layer_norm");
    if (tape)
        tape->record([x, gamma, beta, y, xhat, istd, B, C, M]() mutable {
            const T* gy = y.grad().data();
            const T* hp = xhat.ptr();
            const T* ip = istd.ptr();
            T* gx = x.grad().data();
            T* gg = gamma.grad().data();
            T* gb = beta.grad().data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t m = 0; m < M; ++m) {
                    T sum_gh = 0, sum_ghh = 0;
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t idx = (b * C + c) * M + m;
                        const T gh = gy[idx] * gamma[c];
                        sum_gh += gh;
                        sum_ghh += gh * hp[idx];
                        gg[c] += gy[idx] * hp[idx];
                        gb[c] += gy[idx];
                    }
                    const T is = ip[b * M + m];
                    const T invC = T(1) / static_cast<T>(C);
                    for (std::int64_t c = 0; c < C; ++c) {
                        const std::int64_t idx = (b * C + c) * M + m;
                        const T gh = gy[idx] * gamma[c];
                        gx[idx] += is * (gh - invC * sum_gh - invC * hp[idx] * sum_ghh);
                    }
                }
        });
    return y;
}

// Numerically stable softmax along a given axis.
template <typename T>
Tensor<T> softmax(Tape<T>* tape, Tensor<T> x, int axis) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank())
        throw ParamError("softmax: axis out of range for " + shape_str(x.shape()));
    check_finite(x, "softmax(input)");
    std::int64_t outer = 1, n = x.dim(axis), inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    Tensor<T> y(x.shape());
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            T mx = xp[base];
            for (std::int64_t k = 1; k < n; ++k)
                mx = std::max(mx, xp[base + k * inner]);
            T z = 0;
            for (std::int64_t k = 0; k < n; ++k) {
                const T e = std::exp(xp[base + k * inner] - mx);
                yp[base + k * inner] = e;
                z += e;
            }
            for (std::int64_t k = 0; k < n; ++k) yp[base + k * inner] /= z;
        }
    check_finite(y, "softmax");
    if (tape)
        tape->record([x, y, outer, n, inner]() mutable {
            const T* gy = y.grad().data();
            const T* yp = y.ptr();
            T* gx = x.grad().data();
            for (std::int64_t o = 0; o < outer; ++o)
                for (std::int64_t in = 0; in < inner; ++in) {
                    const std::int64_t base = o * n * inner + in;
                    T dot = 0;
                    for (std::int64_t k = 0; k < n; ++k)
                        dot += gy[base + k * inner] * yp[base + k * inner];
                    for (std::int64_t k = 0; k < n; ++k)
                        gx[base + k * inner] +=
                            yp[base + k * inner] * (gy[base + k * inner] - dot);
                }
        });
    return y;
}

// ---------------------------------------------------------------------------
// Convolutions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, Tensor<T> x, Tensor<T> weight, Tensor<T> bias,
                 int stride, int padding) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be rank 4, got " + shape_str(x.shape()));
    if (weight.rank() != 4)
        throw ShapeError("conv2d: weight must be rank 4, got " + shape_str(weight.shape()));
    if (stride < 1) throw ParamError("conv2d: stride must be >= 1");
    if (padding < 0) throw ParamError("conv2d: padding must be >= 0");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t O = weight.dim(0), K = weight.dim(2);
    if (weight.dim(1) != C)
        throw ShapeError("conv2d: weight expects " + std::to_string(weight.dim(1)) +
                         " input channels, input has " + std::to_string(C));
    if (weight.dim(3) != K) throw ShapeError("conv2d: kernel must be square");
    const bool has_bias = bias.numel() != 0;
    if (has_bias && bias.numel() != O)
        throw ShapeError("conv2d: bias must have one element per output channel");
    const std::int64_t Ho = (H + 2 * padding - K) / stride + 1;
    const std::int64_t Wo = (W + 2 * padding - K) / stride + 1;
    if (Ho <= 0 || Wo <= 0)
        throw ShapeError("conv2d: kernel larger than padded input");
    Tensor<T> y(Shape{B, O, Ho, Wo});
    const T* xp = x.ptr();
    const T* wp = weight.ptr();
    T* yp = y.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t o = 0; o < O; ++o) {
            T* ymap = yp + (b * O + o) * Ho * Wo;
            if (has_bias) {
                const T bv = bias[o];
                for (std::int64_t i = 0; i < Ho * Wo; ++i) ymap[i] = bv;
            }
            for (std::int64_t c = 0; c < C; ++c) {
                const T* xmap = xp + (b * C + c) * H * W;
                const T* wk = wp + (o * C + c) * K * K;
                for (std::int64_t u = 0; u < K; ++u)
                    for (std::int64_t v = 0; v < K; ++v) {
                        const T w = wk[u * K + v];
                        if (w == T(0)) continue;
                        for (std::int64_t i = 0; i < Ho; ++i) {
                            const std::int64_t yi = i * stride - padding + u;
                            if (yi < 0 || yi >= H) continue;
                            const T* xrow = xmap + yi * W;
                            T* yrow = ymap + i * Wo;
                            for (std::int64_t j = 0; j < Wo; ++j) {
                                const std::int64_t xj = j * stride - padding + v;
                                if (xj < 0 || xj >= W) continue;
                                yrow[j] += w * xrow[xj];
                            }
                        }
                    }
            }
        }
    check_finite(y, "conv2d");
    if (tape)
        tape->record([x, weight, bias, y, stride, padding, B, C, H, W, O, K, Ho, Wo,
                      has_bias]() mutable {
            const T* gy = y.grad().data();
            const T* xp = x.ptr();
            const T* wp = weight.ptr();
            T* gx = x.grad().data();
            T* gw = weight.grad().data();
            T* gb = has_bias ? bias.grad().data() : nullptr;
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t o = 0; o < O; ++o) {
                    const T* gymap = gy + (b * O + o) * Ho * Wo;
                    if (gb) {
                        T acc = 0;
                        for (std::int64_t i = 0; i < Ho * Wo; ++i) acc += gymap[i];
                        gb[o] += acc;
                    }
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T* xmap = xp + (b * C + c) * H * W;
                        T* gxmap = gx + (b * C + c) * H * W;
                        const T* wk = wp + (o * C + c) * K * K;
                        T* gwk = gw + (o * C + c) * K * K;
                        for (std::int64_t u = 0; u < K; ++u)
                            for (std::int64_t v = 0; v < K; ++v) {
                                const T w = wk[u * K + v];
                                T accw = 0;
                                for (std::int64_t i = 0; i < Ho; ++i) {
                                    const std::int64_t yi = i * stride - padding + u;
                                    if (yi < 0 || yi >= H) continue;
                                    const T* xrow = xmap + yi * W;
                                    T* gxrow = gxmap + yi * W;
                                    const T* gyrow = gymap + i * Wo;
                                    for (std::int64_t j = 0; j < Wo; ++j) {
                                        const std::int64_t xj = j * stride - padding + v;
                                        if (xj < 0 || xj >= W) continue;
                                        accw += gyrow[j] * xrow[xj];
                                        gxrow[xj] += gyrow[j] * w;
                                    }
                                }
                                gwk[u * K + v] += accw;
                            }
                    }
                }
        });
    return y;
}

// Depthwise convolution, stride 1, bias-free. weight is (C, 1, k, k).
template <typename T>
Tensor<T> depthwise_conv2d(Tape<T>* tape, Tensor<T> x, Tensor<T> weight, int padding) {
    if (x.rank() != 4) throw ShapeError("depthwise_conv2d: input must be rank 4");
    if (weight.rank() != 4 || weight.dim(1) != 1)
        throw ShapeError("depthwise_conv2d: weight must be (C,1,k,k), got " +
                         shape_str(weight.shape()));
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t K = weight.dim(2);
    if (weight.dim(0) != C)
        throw ShapeError("depthwise_conv2d: weight has " + std::to_string(weight.dim(0)) +
                         " channels, input has " + std::to_string(C));
    const std::int64_t Ho = H + 2 * padding - K + 1;
    const std::int64_t Wo = W + 2 * padding - K + 1;
    if (Ho <= 0 || Wo <= 0)
        throw ShapeError("depthwise_conv2d: kernel larger than padded input");
    Tensor<T> y(Shape{B, C, Ho, Wo});
    const T* xp = x.ptr();
    const T* wp = weight.ptr();
    T* yp = y.ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
            const T* xmap = xp + (b * C + c) * H * W;
            const T* wk = wp + c * K * K;
            T* ymap = yp + (b * C + c) * Ho * Wo;
            for (std::int64_t u = 0; u < K; ++u)
                for (std::int64_t v = 0; v < K; ++v) {
                    const T w = wk[u * K + v];
                    if (w == T(0)) continue;
                    for (std::int64_t i = 0; i < Ho; ++i) {
                        const std::int64_t yi = i - padding + u;
                        if (yi < 0 || yi >= H) continue;
                        const T* xrow = xmap + yi * W;
                        T* yrow = ymap + i * Wo;
                        for (std::int64_t j = 0; j < Wo; ++j) {
                            const std::int64_t xj = j - padding + v;
                            if (xj < 0 || xj >= W) continue;
                            yrow[j] += w * xrow[xj];
                        }
                    }
                }
        }
    check_finite(y, "depthwise_conv2d");
    if (tape)
        tape->record([x, weight, y, padding, B, C, H, W, K, Ho, Wo]() mutable {
            const T* gy = y.grad().data();
            const T* xp = x.ptr();
            const T* wp = weight.ptr();
            T* gx = x.grad().data();
            T* gw = weight.grad().data();
            for (std::int64_t b = 0; b < B; ++b)
                for (std::int64_t c = 0; c < C; ++c) {
                    const T* xmap = xp + (b * C + c) * H * W;
                    T* gxmap = gx + (b * C + c) * H * W;
                    const T* wk = wp + c * K * K;
                    T* gwk = gw + c * K * K;
                    const T* gymap = gy + (b * C + c) * Ho * Wo;
                    for (std::int64_t u = 0; u < K; ++u)
                        for (std::int64_t v = 0; v < K; ++v) {
                            const T w = wk[u * K + v];
                            T accw = 0;
                            for (std::int64_t i = 0; i < Ho; ++i) {
                                const std::int64_t yi = i - padding + u;
                                if (yi < 0 || yi >= H) continue;
                                const T* xrow = xmap + yi * W;
                                T* gxrow = gxmap + yi * W;
                                const T* gyrow = gymap + i * Wo;
                                for (std::int64_t j = 0; j < Wo; ++j) {
                                    const std::int64_t xj = j - padding + v;
                                    if (xj < 0 || xj >= W) continue;
                                    accw += gyrow[j] * xrow[xj];
                                    gxrow[xj] += gyrow[j] * w;
                                }
                            }
                            gwk[u * K + v] += accw;
                        }
                }
        });
    return y;
}

// ---------------------------------------------------------------------------
// Spatial helpers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(Tape<T>* tape, Tensor<T> x) {
    if (x.rank() != 4) throw ShapeError("global_avg_pool: input must be rank 4");
    const std::int64_t B = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
    Tensor<T> y(Shape{B, C});
    const T* xp = x.ptr();
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
        T acc = 0;
        const T* row = xp + bc * M;
        for (std::int64_t m = 0; m < M; ++m) acc += row[m];
        y[bc] = acc / static_cast<T>(M);
    }
    check_finite(y, "global_avg_pool");
    if (tape)
        tape->record([x, y, B, C, M]() mutable {
            const T* gy = y.grad().data();
            T* gx = x.grad().data();
            for (std::int64_t bc = 0; bc < B * C; ++bc) {
                const T g = gy[bc] / static_cast<T>(M);
                T* row = gx + bc * M;
                for (std::int64_t m = 0; m < M; ++m) row[m] += g;
            }
        });
    return y;
}

// Rescale each channel map of x (B,C,H,W) by s (B,C).
template <typename T>
Tensor<T> scale_channels(Tape<T>* tape, Tensor<T> x, Tensor<T> s) {
    if (x.rank() != 4 || s.rank() != 2 || s.dim(0) != x.dim(0) || s.dim(1) != x.dim(1))
        throw ShapeError("scale_channels: expected (B,C,H,W) and (B,C)");
    const std::int64_t BC = x.dim(0) * x.dim(1), M = x.dim(2) * x.dim(3);
    Tensor<T> y(x.shape());
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::int64_t bc = 0; bc < BC; ++bc) {
        const T sv = s[bc];
        for (std::int64_t m = 0; m < M; ++m) yp[bc * M + m] = xp[bc * M + m] * sv;
    }
    check_finite(y, "scale_channels");
    if (tape)
        tape->record([x, s, y, BC, M]() mutable {
            const T* gy = y.grad().data();
            const T* xp = x.ptr();
            T* gx = x.grad().data();
            T* gs = s.grad().data();
            for (std::int64_t bc = 0; bc < BC; ++bc) {
                const T sv = s[bc];
                T acc = 0;
                for (std::int64_t m = 0; m < M; ++m) {
                    gx[bc * M + m] += gy[bc * M + m] * sv;
                    acc += gy[bc * M + m] * xp[bc * M + m];
                }
                gs[bc] += acc;
            }
        });
    return y;
}

template <typename T>
Tensor<T> upsample_nearest2x(Tape<T>* tape, Tensor<T> x) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest2x: input must be rank 4");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor<T> y(Shape{B, C, 2 * H, 2 * W});
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) {
                const T v = xp[(bc * H + i) * W + j];
                T* o = yp + (bc * 2 * H + 2 * i) * 2 * W + 2 * j;
                o[0] = v;
                o[1] = v;
                o[2 * W] = v;
                o[2 * W + 1] = v;
            }
    if (tape)
        tape->record([x, y, B, C, H, W]() mutable {
            const T* gy = y.grad().data();
            T* gx = x.grad().data();
            for (std::int64_t bc = 0; bc < B * C; ++bc)
                for (std::int64_t i = 0; i < H; ++i)
                    for (std::int64_t j = 0; j < W; ++j) {
                        const T* o = gy + (bc * 2 * H + 2 * i) * 2 * W + 2 * j;
                        gx[(bc * H + i) * W + j] += o[0] + o[1] + o[2 * W] + o[2 * W + 1];
                    }
        });
    return y;
}

// Reflect padding (edge not repeated); each pad must be < the corresponding dim.
template <typename T>
Tensor<T> pad_reflect(Tape<T>* tape, Tensor<T> x, int pt, int pb, int pl, int pr) {
    if (x.rank() != 4) throw ShapeError("pad_reflect: input must be rank 4");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (pt >= H || pb >= H || pl >= W || pr >= W)
        throw ParamError("pad_reflect: pad size must be smaller than the image");
    const std::int64_t Ho = H + pt + pb, Wo = W + pl + pr;
    std::vector<std::int64_t> rmap(static_cast<std::size_t>(Ho)),
        cmap(static_cast<std::size_t>(Wo));
    for (std::int64_t i = 0; i < Ho; ++i) {
        std::int64_t s = i - pt;
        if (s < 0) s = -s;
        if (s >= H) s = 2 * H - 2 - s;
        rmap[static_cast<std::size_t>(i)] = s;
    }
    for (std::int64_t j = 0; j < Wo; ++j) {
        std::int64_t s = j - pl;
        if (s < 0) s = -s;
        if (s >= W) s = 2 * W - 2 - s;
        cmap[static_cast<std::size_t>(j)] = s;
    }
    Tensor<T> y(Shape{B, C, Ho, Wo});
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t i = 0; i < Ho; ++i)
            for (std::int64_t j = 0; j < Wo; ++j)
                yp[(bc * Ho + i) * Wo + j] =
                    xp[(bc * H + rmap[static_cast<std::size_t>(i)]) * W +
                       cmap[static_cast<std::size_t>(j)]];
    if (tape)
        tape->record([x, y, rmap, cmap, B, C, H, W, Ho, Wo]() mutable {
            const T* gy = y.grad().data();
            T* gx = x.grad().data();
            for (std::int64_t bc = 0; bc < B * C; ++bc)
                for (std::int64_t i = 0; i < Ho; ++i)
                    for (std::int64_t j = 0; j < Wo; ++j)
                        gx[(bc * H + rmap[static_cast<std::size_t>(i)]) * W +
                           cmap[static_cast<std::size_t>(j)]] +=
                            gy[(bc * Ho + i) * Wo + j];
        });
    return y;
}

template <typename T>
Tensor<T> crop_spatial(Tape<T>* tape, Tensor<T> x, std::int64_t top, std::int64_t left,
                       std::int64_t h, std::int64_t w) {
    if (x.rank() != 4) throw ShapeError("crop_spatial: input must be rank 4");
    const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (top < 0 || left < 0 || top + h > H || left + w > W)
        throw ParamError("crop_spatial: window out of bounds");
    Tensor<T> y(Shape{B, C, h, w});
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j)
                yp[(bc * h + i) * w + j] = xp[(bc * H + top + i) * W + left + j];
    if (tape)
        tape->record([x, y, top, left, h, w, B, C, H, W]() mutable {
            const T* gy = y.grad().data();
            T* gx = x.grad().data();
            for (std::int64_t bc = 0; bc < B * C; ++bc)
                for (std::int64_t i = 0; i < h; ++i)
                    for (std::int64_t j = 0; j < w; ++j)
                        gx[(bc * H + top + i) * W + left + j] += gy[(bc * h + i) * w + j];
        });
    return y;
}

// Gather spatial positions of (B,C,H,W) into a sequence (B,C,L) following
// `order`, a permutation of the H*W row-major indices.
template <typename T>
Tensor<T> permute_spatial(Tape<T>* tape, Tensor<T> x,
                          const std::vector<std::int64_t>& order) {
    if (x.rank() != 4) throw ShapeError("permute_spatial: input must be rank 4");
    const std::int64_t B = x.dim(0), C = x.dim(1), M = x.dim(2) * x.dim(3);
    if (static_cast<std::int64_t>(order.size()) != M)
        throw ParamError("permute_spatial: order length must equal H*W");
    Tensor<T> y(Shape{B, C, M});
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t t = 0; t < M; ++t)
            yp[bc * M + t] = xp[bc * M + order[static_cast<std::size_t>(t)]];
    if (tape)
        tape->record([x, y, order, B, C, M]() mutable {
            const T* gy = y.grad().data();
            T* gx = x.grad().data();
            for (std::int64_t bc = 0; bc < B * C; ++bc)
                for (std::int64_t t = 0; t < M; ++t)
                    gx[bc * M + order[static_cast<std::size_t>(t)]] += gy[bc * M + t];
        });
    return y;
}

// Inverse of permute_spatial: scatter a sequence (B,C,L) back to (B,C,H,W).
template <typename T>
Tensor<T> unpermute_spatial(Tape<T>* tape, Tensor<T> x,
                            const std::vector<std::int64_t>& order, std::int64_t H,
                            std::int64_t W) {
    if (x.rank() != 3) throw ShapeError("unpermute_spatial: input must be rank 3");
    const std::int64_t B = x.dim(0), C = x.dim(1), M = x.dim(2);
    if (M != H * W || static_cast<std::int64_t>(order.size()) != M)
        throw ParamError("unpermute_spatial: order length must equal H*W");
    Tensor<T> y(Shape{B, C, H, W});
    const T* xp = x.ptr();
    T* yp = y.ptr();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
        for (std::int64_t t = 0; t < M; ++t)
            yp[bc * M + order[static_cast<std::size_t>(t)]] = xp[bc * M + t];
    if (tape)
        tape->record([x, y, order, B, C, M]() mutable {
            const T* gy = y.grad().data();
            T* gx = x.grad().data();
            for (std::int64_t bc = 0; bc < B * C; ++bc)
                for (std::int64_t t = 0; t < M; ++t)
                    gx[bc * M + t] += gy[bc * M + order[static_cast<std::size_t>(t)]];
        });
    return y;
}

}  // namespace dehaze
