#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "oar/tensor.hpp"

namespace oar {

enum class Activation { Sigmoid, Relu, Softmax };
enum class PoolKind { Mean, Max };

inline int conv_out_dim(int in, int k, int stride, int padding) {
    return (in + 2 * padding - k) / stride + 1;
}

template <typename T>
T stable_sigmoid(T z) {
    if (z >= T(0)) return T(1) / (T(1) + std::exp(-z));
    T e = std::exp(z);
    return e / (T(1) + e);
}

// Cross-correlation (no kernel flip) with per-output-channel bias.
// input: C×H×W, kernel: Cout×C×k×k, bias: length Cout (empty means zero).
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel,
                  const std::vector<T>& bias, int stride, int padding) {
    if (input.rank() != 3) throw ShapeError("conv2d input must be C×H×W, got " + shape_str(input.shape));
    if (kernel.rank() != 4) throw ShapeError("conv2d kernel must be Cout×C×k×k, got " + shape_str(kernel.shape));
    const int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
    const int cout = kernel.dim(0), kc = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
    if (kh != kw || kh % 2 == 0) throw ShapeError("conv2d kernel must be odd square, got " + shape_str(kernel.shape));
    if (kc != cin) {
        throw ShapeError("conv2d channel mismatch: input shape " + shape_str(input.shape) +
                         " vs kernel shape " + shape_str(kernel.shape));
    }
    if (stride < 1) throw ShapeError("conv2d stride must be >= 1");
    if (padding < 0) throw ShapeError("conv2d padding must be >= 0");
    if (!bias.empty() && static_cast<int>(bias.size()) != cout) {
        throw ShapeError("conv2d bias length " + std::to_string(bias.size()) +
                         " vs output channels " + std::to_string(cout));
    }
    const int oh = conv_out_dim(h, kh, stride, padding);
    const int ow = conv_out_dim(w, kw, stride, padding);
    if (oh < 1 || ow < 1) {
        throw ShapeError("conv2d output would be empty for input " + shape_str(input.shape) +
                         " kernel " + shape_str(kernel.shape));
    }
    TensorT<T> out({cout, oh, ow});
    const T* x = input.ptr();
    const T* k = kernel.ptr();
    T* y = out.ptr();
    for (int oc = 0; oc < cout; ++oc) {
        const T b = bias.empty() ? T(0) : bias[static_cast<std::size_t>(oc)];
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                T acc = b;
                const int iy0 = oy * stride - padding;
                const int ix0 = ox * stride - padding;
                for (int ic = 0; ic < cin; ++ic) {
                    const T* xc = x + static_cast<std::size_t>(ic) * h * w;
                    const T* kk = k + ((static_cast<std::size_t>(oc) * cin + ic) * kh) * kw;
                    for (int ky = 0; ky < kh; ++ky) {
                        const int iy = iy0 + ky;
                        if (iy < 0 || iy >= h) continue;
                        const T* xrow = xc + static_cast<std::size_t>(iy) * w;
                        const T* krow = kk + static_cast<std::size_t>(ky) * kw;
                        for (int kx = 0; kx < kw; ++kx) {
                            const int ix = ix0 + kx;
                            if (ix < 0 || ix >= w) continue;
                            acc += xrow[ix] * krow[kx];
                        }
                    }
                }
                y[(static_cast<std::size_t>(oc) * oh + oy) * ow + ox] = acc;
            }
        }
    }
    return out;
}

// output_i = sum_j W_ij x_j + b_i. weights: Dout×Din.
template <typename T>
TensorT<T> affine(const TensorT<T>& input, const TensorT<T>& weights, const std::vector<T>& bias) {
    if (weights.rank() != 2) throw ShapeError("affine weights must be Dout×Din, got " + shape_str(weights.shape));
    const int dout = weights.dim(0), din = weights.dim(1);
    if (static_cast<int>(input.size()) != din) {
        throw ShapeError("affine dimension mismatch: input shape " + shape_str(input.shape) +
                         " vs weights shape " + shape_str(weights.shape));
    }
    if (!bias.empty() && static_cast<int>(bias.size()) != dout) {
        throw ShapeError("affine bias length mismatch");
    }
    TensorT<T> out({dout});
    const T* x = input.ptr();
    const T* w = weights.ptr();
    for (int i = 0; i < dout; ++i) {
        T acc = bias.empty() ? T(0) : bias[static_cast<std::size_t>(i)];
        const T* row = w + static_cast<std::size_t>(i) * din;
        for (int j = 0; j < din; ++j) acc += row[j] * x[j];
        out.data[static_cast<std::size_t>(i)] = acc;
    }
    return out;
}

template <typename T>
TensorT<T> apply_activation(Activation kind, const TensorT<T>& input) {
    TensorT<T> out = input;
    switch (kind) {
        case Activation::Sigmoid:
            for (T& v : out.data) v = stable_sigmoid(v);
            return out;
        case Activation::Relu:
            for (T& v : out.data) v = v > T(0) ? v : T(0);
            return out;
        case Activation::Softmax: {
            if (input.rank() != 1) throw ShapeError("softmax requires a flat vector, got " + shape_str(input.shape));
            if (input.size() == 0) throw ShapeError("softmax on empty vector rejected");
            T mx = *std::max_element(out.data.begin(), out.data.end());
            T sum = T(0);
            for (T& v : out.data) {
                v = std::exp(v - mx);
                sum += v;
            }
            for (T& v : out.data) v /= sum;
            return out;
        }
    }
    throw Error("unknown activation");
}

// Pooling over square windows. same_padding keeps spatial dims with stride 1;
// padded cells are excluded from the mean and never win the max.
template <typename T>
TensorT<T> pool2d(PoolKind kind, const TensorT<T>& input, int window, int stride, bool same_padding) {
    if (input.rank() != 3) throw ShapeError("pool2d input must be C×H×W, got " + shape_str(input.shape));
    if (window < 1) throw ShapeError("pool2d window must be >= 1");
    if (stride < 1) throw ShapeError("pool2d stride must be >= 1");
    const int c = input.dim(0), h = input.dim(1), w = input.dim(2);
    int pad = 0, oh = 0, ow = 0;
    if (same_padding) {
        if (stride != 1) throw ShapeError("pool2d same_padding requires stride 1");
        pad = (window - 1) / 2;
        oh = h;
        ow = w;
        // Right/bottom effective padding for even windows handled by window-1-pad.
    } else {
        if (window > h || window > w) {
            throw ShapeError("pool2d window " + std::to_string(window) + " larger than input " + shape_str(input.shape));
        }
        oh = (h - window) / stride + 1;
        ow = (w - window) / stride + 1;
    }
    TensorT<T> out({c, oh, ow});
    const T* x = input.ptr();
    T* y = out.ptr();
    for (int ic = 0; ic < c; ++ic) {
        const T* xc = x + static_cast<std::size_t>(ic) * h * w;
        for (int oy = 0; oy < oh; ++oy) {
            for (int ox = 0; ox < ow; ++ox) {
                const int iy0 = oy * stride - pad;
                const int ix0 = ox * stride - pad;
                T best = -std::numeric_limits<T>::infinity();
                T sum = T(0);
                int count = 0;
                for (int ky = 0; ky < window; ++ky) {
                    const int iy = iy0 + ky;
                    if (iy < 0 || iy >= h) continue;
                    for (int kx = 0; kx < window; ++kx) {
                        const int ix = ix0 + kx;
                        if (ix < 0 || ix >= w) continue;
                        const T v = xc[static_cast<std::size_t>(iy) * w + ix];
                        sum += v;
                        best = std::max(best, v);
                        ++count;
                    }
                }
                if (count == 0) throw ShapeError("pool2d window has no in-bounds cells");
                y[(static_cast<std::size_t>(ic) * oh + oy) * ow + ox] =
                    kind == PoolKind::Mean ? sum / static_cast<T>(count) : best;
            }
        }
    }
    return out;
}

// C×H×W -> C vector of spatial means.
template <typename T>
TensorT<T> global_avg(const TensorT<T>& input) {
    if (input.rank() != 3) throw ShapeError("global_avg input must be C×H×W");
    const int c = input.dim(0);
    const std::size_t hw = static_cast<std::size_t>(input.dim(1)) * input.dim(2);
    TensorT<T> out({c});
    for (int ic = 0; ic < c; ++ic) {
        T sum = T(0);
        const T* xc = input.ptr() + static_cast<std::size_t>(ic) * hw;
        for (std::size_t i = 0; i < hw; ++i) sum += xc[i];
        out.data[static_cast<std::size_t>(ic)] = sum / static_cast<T>(hw);
    }
    return out;
}

// Bilinear resample of a single plane (1×H×W or H×W treated planar).
template <typename T>
TensorT<T> resize_bilinear_plane(const TensorT<T>& plane, int out_h, int out_w) {
    int h = 0, w = 0;
    if (plane.rank() == 2) {
        h = plane.dim(0);
        w = plane.dim(1);
    } else if (plane.rank() == 3 && plane.dim(0) == 1) {
        h = plane.dim(1);
        w = plane.dim(2);
    } else {
        throw ShapeError("resize_bilinear_plane expects a single plane, got " + shape_str(plane.shape));
    }
    TensorT<T> out({1, out_h, out_w});
    const T sy = static_cast<T>(h) / static_cast<T>(out_h);
    const T sx = static_cast<T>(w) / static_cast<T>(out_w);
    const T* src = plane.ptr();
    for (int oy = 0; oy < out_h; ++oy) {
        T fy = (static_cast<T>(oy) + T(0.5)) * sy - T(0.5);
        fy = std::clamp(fy, T(0), static_cast<T>(h - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const T wy = fy - static_cast<T>(y0);
        for (int ox = 0; ox < out_w; ++ox) {
            T fx = (static_cast<T>(ox) + T(0.5)) * sx - T(0.5);
            fx = std::clamp(fx, T(0), static_cast<T>(w - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, w - 1);
            const T wx = fx - static_cast<T>(x0);
            const T v00 = src[static_cast<std::size_t>(y0) * w + x0];
            const T v01 = src[static_cast<std::size_t>(y0) * w + x1];
            const T v10 = src[static_cast<std::size_t>(y1) * w + x0];
            const T v11 = src[static_cast<std::size_t>(y1) * w + x1];
            out.data[(static_cast<std::size_t>(oy)) * out_w + ox] =
                (T(1) - wy) * ((T(1) - wx) * v00 + wx * v01) + wy * ((T(1) - wx) * v10 + wx * v11);
        }
    }
    return out;
}

}  // namespace oar
