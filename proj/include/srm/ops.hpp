#pragma once

#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "srm/tensor.hpp"

namespace srm {

namespace detail {

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw ShapeError(msg);
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

template <typename T>
bool wants_grad(const Tensor<T>& t) {
    return t.defined() && t.requires_grad();
}

template <typename T>
void accumulate(const Tensor<T>& t, std::span<const T> g) {
    t.node()->accumulate(g);
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace detail {

enum class BinaryKind { add, sub, mul };

template <typename T>
Tensor<T> binary(const char* name, BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
    const bool same = a.shape() == b.shape();
    const bool a_scalar = a.numel() == 1 && !same;
    const bool b_scalar = b.numel() == 1 && !same;
    check(same || a_scalar || b_scalar,
          std::string(name) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
              " are not broadcastable");
    const Shape& out_shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = numel(out_shape);
    std::vector<T> out(n);
    auto A = a.data();
    auto B = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        T x = A[a_scalar ? 0 : i];
        T y = B[b_scalar ? 0 : i];
        switch (kind) {
            case BinaryKind::add: out[i] = x + y; break;
            case BinaryKind::sub: out[i] = x - y; break;
            case BinaryKind::mul: out[i] = x * y; break;
        }
    }
    return make_result<T>(name, out_shape, std::move(out), {a, b},
                          [a, b, kind, a_scalar, b_scalar](const Node<T>& o) {
                              const auto& g = o.grad;
                              const std::size_t n = g.size();
                              auto A = a.data();
                              auto B = b.data();
                              if (wants_grad(a)) {
                                  std::vector<T> ga(a.numel(), T(0));
                                  for (std::size_t i = 0; i < n; ++i) {
                                      T d = kind == BinaryKind::mul ? g[i] * B[b_scalar ? 0 : i] : g[i];
                                      ga[a_scalar ? 0 : i] += d;
                                  }
                                  accumulate<T>(a, ga);
                              }
                              if (wants_grad(b)) {
                                  std::vector<T> gb(b.numel(), T(0));
                                  for (std::size_t i = 0; i < n; ++i) {
                                      T d = g[i];
                                      if (kind == BinaryKind::sub) d = -d;
                                      if (kind == BinaryKind::mul) d = g[i] * A[a_scalar ? 0 : i];
                                      gb[b_scalar ? 0 : i] += d;
                                  }
                                  accumulate<T>(b, gb);
                              }
                          });
}

template <typename T, typename F, typename DF>
Tensor<T> unary(const char* name, const Tensor<T>& x, F f, DF df) {
    std::vector<T> out(x.numel());
    auto X = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(X[i]);
    // df receives (input, output)
    return make_result<T>(name, x.shape(), std::move(out), {x}, [x, df](const Node<T>& o) {
        auto X = x.data();
        std::vector<T> gx(o.grad.size());
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = o.grad[i] * df(X[i], o.data[i]);
        accumulate<T>(x, gx);
    });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("add", detail::BinaryKind::add, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("sub", detail::BinaryKind::sub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("mul", detail::BinaryKind::mul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T s) {
    return detail::unary(
        "scale", x, [s](T v) { return v * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T s) {
    return detail::unary(
        "add_scalar", x, [s](T v) { return v + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        "sigmoid", x, [](T v) { return detail::stable_sigmoid(v); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
    return detail::unary(
        "sqrt", x, [](T v) { return std::sqrt(v); },
        [](T, T y) { return y > T(0) ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& x) {
    return detail::unary(
        "square", x, [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    detail::check(numel(shape) == x.numel(),
                  "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
    std::vector<T> out(x.data().begin(), x.data().end());
    return make_result<T>("reshape", std::move(shape), std::move(out), {x},
                          [x](const Node<T>& o) { detail::accumulate<T>(x, o.grad); });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    return make_result<T>("sum", Shape{1}, {acc}, {x}, [x](const Node<T>& o) {
        std::vector<T> gx(x.numel(), o.grad[0]);
        detail::accumulate<T>(x, gx);
    });
}

namespace detail {

// Maps each input flat index to its output flat index when `axes` are reduced.
inline std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<std::size_t>& axes,
                                              Shape& out_shape) {
    std::vector<bool> reduced(shape.size(), false);
    for (auto a : axes) {
        check(a < shape.size(), "reduction axis " + std::to_string(a) + " out of range for " + to_string(shape));
        reduced[a] = true;
    }
    out_shape.clear();
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (!reduced[i]) out_shape.push_back(shape[i]);
    }
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<std::size_t> out_stride(shape.size(), 0);
    std::size_t s = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        if (!reduced[i]) {
            out_stride[i] = s;
            s *= shape[i];
        }
    }
    const std::size_t n = numel(shape);
    std::vector<std::size_t> map(n);
    std::vector<std::size_t> idx(shape.size(), 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t o = 0;
        for (std::size_t d = 0; d < shape.size(); ++d) o += idx[d] * out_stride[d];
        map[flat] = o;
        for (std::size_t d = shape.size(); d-- > 0;) {
            if (++idx[d] < shape[d]) break;
            idx[d] = 0;
        }
    }
    return map;
}

}  // namespace detail

/// Sum over the listed axes; reduced axes are dropped.
template <typename T>
Tensor<T> sum(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    Shape out_shape;
    auto map = detail::reduction_map(x.shape(), axes, out_shape);
    std::vector<T> out(numel(out_shape), T(0));
    auto X = x.data();
    for (std::size_t i = 0; i < map.size(); ++i) out[map[i]] += X[i];
    return make_result<T>("sum_axes", out_shape, std::move(out), {x},
                          [x, map = std::move(map)](const Node<T>& o) {
                              std::vector<T> gx(map.size());
                              for (std::size_t i = 0; i < map.size(); ++i) gx[i] = o.grad[map[i]];
                              detail::accumulate<T>(x, gx);
                          });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, const std::vector<std::size_t>& axes) {
    std::size_t count = 1;
    for (auto a : axes) count *= x.shape().at(a);
    return scale(sum(x, axes), T(1) / static_cast<T>(count));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                  "matmul: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) + " do not chain");
    const auto M = a.dim(0), K = a.dim(1), N = b.dim(1);
    std::vector<T> out(M * N);
    detail::MapMat<T>(out.data(), M, N).noalias() =
        detail::ConstMapMat<T>(a.ptr(), M, K) * detail::ConstMapMat<T>(b.ptr(), K, N);
    return make_result<T>("matmul", Shape{M, N}, std::move(out), {a, b}, [a, b, M, K, N](const Node<T>& o) {
        detail::ConstMapMat<T> G(o.grad.data(), M, N);
        if (detail::wants_grad(a)) {
            std::vector<T> ga(M * K);
            detail::MapMat<T>(ga.data(), M, K).noalias() = G * detail::ConstMapMat<T>(b.ptr(), K, N).transpose();
            detail::accumulate<T>(a, ga);
        }
        if (detail::wants_grad(b)) {
            std::vector<T> gb(K * N);
            detail::MapMat<T>(gb.data(), K, N).noalias() = detail::ConstMapMat<T>(a.ptr(), M, K).transpose() * G;
            detail::accumulate<T>(b, gb);
        }
    });
}

/// y = x·Wᵀ + b for x [N, I], W [O, I], optional b [O].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    detail::check(x.rank() == 2 && weight.rank() == 2 && x.dim(1) == weight.dim(1),
                  "linear: input " + to_string(x.shape()) + " incompatible with weight " + to_string(weight.shape()));
    const auto N = x.dim(0), I = x.dim(1), O = weight.dim(0);
    if (bias.defined()) {
        detail::check(bias.numel() == O, "linear: bias " + to_string(bias.shape()) + " vs weight " +
                                             to_string(weight.shape()));
    }
    std::vector<T> out(N * O);
    detail::MapMat<T> Y(out.data(), N, O);
    Y.noalias() = detail::ConstMapMat<T>(x.ptr(), N, I) * detail::ConstMapMat<T>(weight.ptr(), O, I).transpose();
    if (bias.defined()) {
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t o = 0; o < O; ++o) out[n * O + o] += bias[o];
    }
    return make_result<T>("linear", Shape{N, O}, std::move(out), {x, weight, bias},
                          [x, weight, bias, N, I, O](const Node<T>& o) {
                              detail::ConstMapMat<T> G(o.grad.data(), N, O);
                              if (detail::wants_grad(x)) {
                                  std::vector<T> gx(N * I);
                                  detail::MapMat<T>(gx.data(), N, I).noalias() =
                                      G * detail::ConstMapMat<T>(weight.ptr(), O, I);
                                  detail::accumulate<T>(x, gx);
                              }
                              if (detail::wants_grad(weight)) {
                                  std::vector<T> gw(O * I);
                                  detail::MapMat<T>(gw.data(), O, I).noalias() =
                                      G.transpose() * detail::ConstMapMat<T>(x.ptr(), N, I);
                                  detail::accumulate<T>(weight, gw);
                              }
                              if (detail::wants_grad(bias)) {
                                  std::vector<T> gb(O, T(0));
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t k = 0; k < O; ++k) gb[k] += o.grad[n * O + k];
                                  detail::accumulate<T>(bias, gb);
                              }
                          });
}

// ---------------------------------------------------------------------------
// Convolution and spatial pooling
// ---------------------------------------------------------------------------

struct ConvGeometry {
    std::size_t batch, in_channels, height, width;
    std::size_t out_channels, kernel_h, kernel_w;
    std::size_t stride, padding;
    std::size_t out_h, out_w;

    std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
    std::size_t positions() const { return out_h * out_w; }
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
    return (in + 2 * padding - k) / stride + 1;
}

inline ConvGeometry conv_geometry(const Shape& input, const Shape& weight, std::size_t stride, std::size_t padding) {
    detail::check(input.size() == 4 && weight.size() == 4,
                  "conv2d: expected NCHW input and OIkk weight, got " + to_string(input) + " and " + to_string(weight));
    detail::check(input[1] == weight[1], "conv2d: input " + to_string(input) + " has " + std::to_string(input[1]) +
                                             " channels but weight " + to_string(weight) + " expects " +
                                             std::to_string(weight[1]));
    detail::check(stride >= 1, "conv2d: stride must be >= 1");
    detail::check(input[2] + 2 * padding >= weight[2] && input[3] + 2 * padding >= weight[3],
                  "conv2d: kernel " + to_string(weight) + " larger than padded input " + to_string(input));
    ConvGeometry g{input[0], input[1], input[2],  input[3], weight[0], weight[2],
                   weight[3], stride,  padding,   0,        0};
    g.out_h = conv_out_extent(g.height, g.kernel_h, stride, padding);
    g.out_w = conv_out_extent(g.width, g.kernel_w, stride, padding);
    return g;
}

namespace detail {

// Output columns [lo, hi) whose kernel tap b lands inside the input row.
inline std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t b) {
    std::size_t lo = 0;
    while (lo < g.out_w && lo * g.stride + b < g.padding) ++lo;
    std::size_t hi = g.out_w;
    while (hi > lo && (hi - 1) * g.stride + b >= g.padding + g.width) --hi;
    return {lo, hi};
}

// Patch matrix of shape [I·kh·kw, N·Ho·Wo], row-major.
template <typename T>
std::vector<T> im2col(std::span<const T> x, const ConvGeometry& g) {
    const std::size_t L = g.batch * g.positions();
    std::vector<T> cols(g.patch() * L, T(0));
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t i = 0; i < g.in_channels; ++i) {
            const T* plane = x.data() + (n * g.in_channels + i) * g.height * g.width;
            for (std::size_t a = 0; a < g.kernel_h; ++a) {
                for (std::size_t b = 0; b < g.kernel_w; ++b) {
                    const std::size_t r = (i * g.kernel_h + a) * g.kernel_w + b;
                    T* row = cols.data() + r * L + n * g.positions();
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + a) - static_cast<long>(g.padding);
                        if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                        const auto [lo, hi] = valid_columns(g, b);
                        const T* src = plane + iy * g.width;
                        T* dst = row + oy * g.out_w;
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * g.stride + b - g.padding];
                    }
                }
            }
        }
    }
    return cols;
}

template <typename T>
void col2im(std::span<const T> cols, const ConvGeometry& g, std::span<T> dx) {
    const std::size_t L = g.batch * g.positions();
    for (std::size_t n = 0; n < g.batch; ++n) {
        for (std::size_t i = 0; i < g.in_channels; ++i) {
            T* plane = dx.data() + (n * g.in_channels + i) * g.height * g.width;
            for (std::size_t a = 0; a < g.kernel_h; ++a) {
                for (std::size_t b = 0; b < g.kernel_w; ++b) {
                    const std::size_t r = (i * g.kernel_h + a) * g.kernel_w + b;
                    const T* row = cols.data() + r * L + n * g.positions();
                    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                        const long iy = static_cast<long>(oy * g.stride + a) - static_cast<long>(g.padding);
                        if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
                        const auto [lo, hi] = valid_columns(g, b);
                        T* dst = plane + iy * g.width;
                        const T* src = row + oy * g.out_w;
                        for (std::size_t ox = lo; ox < hi; ++ox) dst[ox * g.stride + b - g.padding] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation, lowered to one GEMM over the patch matrix.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, std::size_t stride = 1, std::size_t padding = 0) {
    const ConvGeometry g = conv_geometry(x.shape(), weight.shape(), stride, padding);
    const std::size_t R = g.patch(), L = g.batch * g.positions(), O = g.out_channels, P = g.positions();
    auto cols = detail::im2col<T>(x.data(), g);
    detail::RowMat<T> Y(O, L);
    Y.noalias() = detail::ConstMapMat<T>(weight.ptr(), O, R) * detail::ConstMapMat<T>(cols.data(), R, L);
    std::vector<T> out(g.batch * O * P);
    for (std::size_t n = 0; n < g.batch; ++n)
        for (std::size_t o = 0; o < O; ++o)
            std::copy_n(Y.data() + o * L + n * P, P, out.data() + (n * O + o) * P);

    if (!grad_enabled() || !(x.requires_grad() || weight.requires_grad())) cols.clear();
    return make_result<T>(
        "conv2d", Shape{g.batch, O, g.out_h, g.out_w}, std::move(out), {x, weight},
        [x, weight, g, cols = std::move(cols)](const Node<T>& node) {
            const std::size_t R = g.patch(), L = g.batch * g.positions(), O = g.out_channels, P = g.positions();
            detail::RowMat<T> G(O, L);
            for (std::size_t n = 0; n < g.batch; ++n)
                for (std::size_t o = 0; o < O; ++o)
                    std::copy_n(node.grad.data() + (n * O + o) * P, P, G.data() + o * L + n * P);
            if (detail::wants_grad(weight)) {
                std::vector<T> gw(O * R);
                detail::MapMat<T>(gw.data(), O, R).noalias() =
                    G * detail::ConstMapMat<T>(cols.data(), R, L).transpose();
                detail::accumulate<T>(weight, gw);
            }
            if (detail::wants_grad(x)) {
                std::vector<T> dcols(R * L);
                detail::MapMat<T>(dcols.data(), R, L).noalias() =
                    detail::ConstMapMat<T>(weight.ptr(), O, R).transpose() * G;
                std::vector<T> gx(x.numel(), T(0));
                detail::col2im<T>(dcols, g, gx);
                detail::accumulate<T>(x, gx);
            }
        });
}

/// Windowed max pooling; padded cells never win.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride, std::size_t padding = 0) {
    detail::check(x.rank() == 4, "max_pool2d: expected NCHW input, got " + to_string(x.shape()));
    detail::check(stride >= 1 && kernel >= 1 && padding < kernel, "max_pool2d: invalid window");
    const auto N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::check(H + 2 * padding >= kernel && W + 2 * padding >= kernel,
                  "max_pool2d: window larger than input " + to_string(x.shape()));
    const auto Ho = conv_out_extent(H, kernel, stride, padding);
    const auto Wo = conv_out_extent(W, kernel, stride, padding);
    std::vector<T> out(N * C * Ho * Wo);
    std::vector<std::size_t> arg(out.size());
    auto X = x.data();
    for (std::size_t p = 0; p < N * C; ++p) {
        for (std::size_t oy = 0; oy < Ho; ++oy) {
            for (std::size_t ox = 0; ox < Wo; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_i = p * H * W;
                for (std::size_t a = 0; a < kernel; ++a) {
                    const long iy = static_cast<long>(oy * stride + a) - static_cast<long>(padding);
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t b = 0; b < kernel; ++b) {
                        const long ix = static_cast<long>(ox * stride + b) - static_cast<long>(padding);
                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                        const std::size_t i = p * H * W + iy * W + ix;
                        if (X[i] > best) {
                            best = X[i];
                            best_i = i;
                        }
                    }
                }
                const std::size_t o = (p * Ho + oy) * Wo + ox;
                out[o] = best;
                arg[o] = best_i;
            }
        }
    }
    return make_result<T>("max_pool2d", Shape{N, C, Ho, Wo}, std::move(out), {x},
                          [x, arg = std::move(arg)](const Node<T>& o) {
                              std::vector<T> gx(x.numel(), T(0));
                              for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += o.grad[i];
                              detail::accumulate<T>(x, gx);
                          });
}

// ---------------------------------------------------------------------------
// Global (per-channel) pooling: [N, C, H, W] -> [N, C]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::check(x.rank() == 4, "global_avg_pool: expected NCHW input, got " + to_string(x.shape()));
    const auto NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(NC);
    auto X = x.data();
    for (std::size_t p = 0; p < NC; ++p) {
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) acc += X[p * HW + i];
        out[p] = static_cast<T>(acc / double(HW));
    }
    return make_result<T>("global_avg_pool", Shape{x.dim(0), x.dim(1)}, std::move(out), {x},
                          [x, NC, HW](const Node<T>& o) {
                              std::vector<T> gx(x.numel());
                              for (std::size_t p = 0; p < NC; ++p)
                                  std::fill_n(gx.data() + p * HW, HW, o.grad[p] / static_cast<T>(HW));
                              detail::accumulate<T>(x, gx);
                          });
}

/// Per-channel standard deviation with the biased 1/HW estimator,
/// sqrt(var + eps).
template <typename T>
Tensor<T> global_std_pool(const Tensor<T>& x, T eps) {
    detail::check(x.rank() == 4, "global_std_pool: expected NCHW input, got " + to_string(x.shape()));
    const auto NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(NC), means(NC);
    auto X = x.data();
    // Statistics accumulate in double so a constant float channel keeps var 0.
    for (std::size_t p = 0; p < NC; ++p) {
        double acc = 0.0;
        for (std::size_t i = 0; i < HW; ++i) acc += X[p * HW + i];
        const double mu = acc / double(HW);
        double var = 0.0;
        for (std::size_t i = 0; i < HW; ++i) {
            const double d = X[p * HW + i] - mu;
            var += d * d;
        }
        means[p] = static_cast<T>(mu);
        out[p] = static_cast<T>(std::sqrt(var / double(HW) + double(eps)));
    }
    return make_result<T>("global_std_pool", Shape{x.dim(0), x.dim(1)}, std::move(out), {x},
                          [x, NC, HW, means = std::move(means)](const Node<T>& o) {
                              std::vector<T> gx(x.numel(), T(0));
                              auto X = x.data();
                              for (std::size_t p = 0; p < NC; ++p) {
                                  const T sigma = o.data[p];
                                  if (sigma <= T(0)) continue;
                                  const T k = o.grad[p] / (static_cast<T>(HW) * sigma);
                                  for (std::size_t i = 0; i < HW; ++i)
                                      gx[p * HW + i] = k * (X[p * HW + i] - means[p]);
                              }
                              detail::accumulate<T>(x, gx);
                          });
}

template <typename T>
Tensor<T> global_max_pool(const Tensor<T>& x) {
    detail::check(x.rank() == 4, "global_max_pool: expected NCHW input, got " + to_string(x.shape()));
    const auto NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(NC);
    std::vector<std::size_t> arg(NC);
    auto X = x.data();
    for (std::size_t p = 0; p < NC; ++p) {
        std::size_t best = p * HW;
        for (std::size_t i = 1; i < HW; ++i) {
            if (X[p * HW + i] > X[best]) best = p * HW + i;
        }
        out[p] = X[best];
        arg[p] = best;
    }
    return make_result<T>("global_max_pool", Shape{x.dim(0), x.dim(1)}, std::move(out), {x},
                          [x, arg = std::move(arg)](const Node<T>& o) {
                              std::vector<T> gx(x.numel(), T(0));
                              for (std::size_t p = 0; p < arg.size(); ++p) gx[arg[p]] += o.grad[p];
                              detail::accumulate<T>(x, gx);
                          });
}

// ---------------------------------------------------------------------------
// Channel-axis plumbing
// ---------------------------------------------------------------------------

/// x [N, C, ...] times g broadcast over trailing axes. g is [C] or [N, C].
template <typename T>
Tensor<T> channel_mul(const Tensor<T>& x, const Tensor<T>& g) {
    detail::check(x.rank() >= 2, "channel_mul: input needs a channel axis, got " + to_string(x.shape()));
    const auto N = x.dim(0), C = x.dim(1), S = x.numel() / (N * C);
    const bool per_example = g.shape() == Shape{N, C};
    detail::check(per_example || g.shape() == Shape{C},
                  "channel_mul: weights " + to_string(g.shape()) + " do not broadcast over " + to_string(x.shape()));
    std::vector<T> out(x.numel());
    auto X = x.data();
    auto Gv = g.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            const T w = Gv[per_example ? n * C + c : c];
            const std::size_t base = (n * C + c) * S;
            for (std::size_t s = 0; s < S; ++s) out[base + s] = w * X[base + s];
        }
    return make_result<T>("channel_mul", x.shape(), std::move(out), {x, g},
                          [x, g, N, C, S, per_example](const Node<T>& o) {
                              auto X = x.data();
                              auto Gv = g.data();
                              if (detail::wants_grad(x)) {
                                  std::vector<T> gx(x.numel());
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t c = 0; c < C; ++c) {
                                          const T w = Gv[per_example ? n * C + c : c];
                                          const std::size_t base = (n * C + c) * S;
                                          for (std::size_t s = 0; s < S; ++s) gx[base + s] = w * o.grad[base + s];
                                      }
                                  detail::accumulate<T>(x, gx);
                              }
                              if (detail::wants_grad(g)) {
                                  std::vector<T> gg(g.numel(), T(0));
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t c = 0; c < C; ++c) {
                                          const std::size_t base = (n * C + c) * S;
                                          T acc = T(0);
                                          for (std::size_t s = 0; s < S; ++s) acc += o.grad[base + s] * X[base + s];
                                          gg[per_example ? n * C + c : c] += acc;
                                      }
                                  detail::accumulate<T>(g, gg);
                              }
                          });
}

/// Concatenates [N, C_i, ...] tensors along axis 1.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    detail::check(!parts.empty(), "concat_channels: nothing to concatenate");
    const auto& ref = parts.front().shape();
    detail::check(ref.size() >= 2, "concat_channels: rank must be >= 2, got " + to_string(ref));
    const std::size_t N = ref[0];
    const std::size_t inner = numel(ref) / (ref[0] * ref[1]);
    std::size_t total_c = 0;
    for (const auto& p : parts) {
        auto s = p.shape();
        detail::check(s.size() == ref.size() && s[0] == N && numel(s) / (s[0] * s[1]) == inner,
                      "concat_channels: " + to_string(s) + " does not align with " + to_string(ref));
        total_c += s[1];
    }
    Shape out_shape = ref;
    out_shape[1] = total_c;
    std::vector<T> out(numel(out_shape));
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t block = p.dim(1) * inner;
        for (std::size_t n = 0; n < N; ++n)
            std::copy_n(p.ptr() + n * block, block, out.data() + n * total_c * inner + offset);
        offset += block;
    }
    return make_result<T>("concat_channels", out_shape, std::move(out), parts,
                          [parts, N, inner, total_c](const Node<T>& o) {
                              std::size_t offset = 0;
                              for (const auto& p : parts) {
                                  const std::size_t block = p.dim(1) * inner;
                                  if (detail::wants_grad(p)) {
                                      std::vector<T> gp(p.numel());
                                      for (std::size_t n = 0; n < N; ++n)
                                          std::copy_n(o.grad.data() + n * total_c * inner + offset, block,
                                                      gp.data() + n * block);
                                      detail::accumulate<T>(p, gp);
                                  }
                                  offset += block;
                              }
                          });
}

/// Stacks equally shaped [N, C] tensors into [N, C, d].
template <typename T>
Tensor<T> stack_last(const std::vector<Tensor<T>>& parts) {
    detail::check(!parts.empty(), "stack_last: nothing to stack");
    const Shape& ref = parts.front().shape();
    for (const auto& p : parts) {
        detail::check(p.shape() == ref, "stack_last: " + to_string(p.shape()) + " vs " + to_string(ref));
    }
    const std::size_t d = parts.size(), M = numel(ref);
    Shape out_shape = ref;
    out_shape.push_back(d);
    std::vector<T> out(M * d);
    for (std::size_t k = 0; k < d; ++k)
        for (std::size_t i = 0; i < M; ++i) out[i * d + k] = parts[k][i];
    return make_result<T>("stack_last", out_shape, std::move(out), parts, [parts, d, M](const Node<T>& o) {
        for (std::size_t k = 0; k < d; ++k) {
            if (!detail::wants_grad(parts[k])) continue;
            std::vector<T> gp(M);
            for (std::size_t i = 0; i < M; ++i) gp[i] = o.grad[i * d + k];
            detail::accumulate<T>(parts[k], gp);
        }
    });
}

/// Channel-wise fully connected map: z[n,c] = Σ_k w[c,k]·t[n,c,k] (+ b[c]).
template <typename T>
Tensor<T> cfc(const Tensor<T>& t, const Tensor<T>& weight, const Tensor<T>& bias = {}) {
    detail::check(t.rank() == 3 && weight.rank() == 2 && t.dim(1) == weight.dim(0) && t.dim(2) == weight.dim(1),
                  "cfc: style features " + to_string(t.shape()) + " incompatible with weights " +
                      to_string(weight.shape()));
    const auto N = t.dim(0), C = t.dim(1), d = t.dim(2);
    if (bias.defined()) detail::check(bias.shape() == Shape{C}, "cfc: bias " + to_string(bias.shape()));
    std::vector<T> out(N * C);
    auto Tv = t.data();
    auto Wv = weight.data();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            T acc = bias.defined() ? bias[c] : T(0);
            for (std::size_t k = 0; k < d; ++k) acc += Wv[c * d + k] * Tv[(n * C + c) * d + k];
            out[n * C + c] = acc;
        }
    return make_result<T>("cfc", Shape{N, C}, std::move(out), {t, weight, bias},
                          [t, weight, bias, N, C, d](const Node<T>& o) {
                              auto Tv = t.data();
                              auto Wv = weight.data();
                              if (detail::wants_grad(t)) {
                                  std::vector<T> gt(t.numel());
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t c = 0; c < C; ++c)
                                          for (std::size_t k = 0; k < d; ++k)
                                              gt[(n * C + c) * d + k] = o.grad[n * C + c] * Wv[c * d + k];
                                  detail::accumulate<T>(t, gt);
                              }
                              if (detail::wants_grad(weight)) {
                                  std::vector<T> gw(C * d, T(0));
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t c = 0; c < C; ++c)
                                          for (std::size_t k = 0; k < d; ++k)
                                              gw[c * d + k] += o.grad[n * C + c] * Tv[(n * C + c) * d + k];
                                  detail::accumulate<T>(weight, gw);
                              }
                              if (detail::wants_grad(bias)) {
                                  std::vector<T> gb(C, T(0));
                                  for (std::size_t n = 0; n < N; ++n)
                                      for (std::size_t c = 0; c < C; ++c) gb[c] += o.grad[n * C + c];
                                  detail::accumulate<T>(bias, gb);
                              }
                          });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Batch normalization over every axis except 1, for [N, C] or [N, C, H, W].
/// Train mode normalizes with biased batch statistics and folds them into the
/// running estimates (new = (1 - momentum)·old + momentum·batch).
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, std::span<T> running_mean,
                     std::span<T> running_var, bool train, T momentum, T eps) {
    detail::check(x.rank() == 2 || x.rank() == 4, "batch_norm: expected [N,C] or [N,C,H,W], got " + to_string(x.shape()));
    const auto N = x.dim(0), C = x.dim(1), S = x.numel() / (N * C);
    detail::check(gamma.numel() == C && beta.numel() == C && running_mean.size() == C && running_var.size() == C,
                  "batch_norm: " + std::to_string(gamma.numel()) + "-channel state vs input " + to_string(x.shape()));
    if (train) {
        detail::check(N >= 2, "batch_norm: train mode needs batch size >= 2, got " + std::to_string(N));
    }
    const T M = static_cast<T>(N * S);
    std::vector<T> mean_c(C), inv_std(C);
    auto X = x.data();
    for (std::size_t c = 0; c < C; ++c) {
        if (train) {
            T acc = T(0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < S; ++s) acc += X[(n * C + c) * S + s];
            const T mu = acc / M;
            T var = T(0);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t s = 0; s < S; ++s) {
                    const T dv = X[(n * C + c) * S + s] - mu;
                    var += dv * dv;
                }
            var /= M;
            mean_c[c] = mu;
            inv_std[c] = T(1) / std::sqrt(var + eps);
            running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * mu;
            running_var[c] = (T(1) - momentum) * running_var[c] + momentum * var;
        } else {
            mean_c[c] = running_mean[c];
            inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
        }
    }
    std::vector<T> out(x.numel()), xhat(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t s = 0; s < S; ++s) {
                const std::size_t i = (n * C + c) * S + s;
                xhat[i] = (X[i] - mean_c[c]) * inv_std[c];
                out[i] = gamma[c] * xhat[i] + beta[c];
            }
    return make_result<T>(
        train ? "batch_norm_train" : "batch_norm_eval", x.shape(), std::move(out), {x, gamma, beta},
        [x, gamma, beta, train, N, C, S, inv_std = std::move(inv_std), xhat = std::move(xhat)](const Node<T>& o) {
            const auto& g = o.grad;
            std::vector<T> sum_g(C, T(0)), sum_gx(C, T(0));
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::size_t i = (n * C + c) * S + s;
                        sum_g[c] += g[i];
                        sum_gx[c] += g[i] * xhat[i];
                    }
            if (detail::wants_grad(gamma)) detail::accumulate<T>(gamma, sum_gx);
            if (detail::wants_grad(beta)) detail::accumulate<T>(beta, sum_g);
            if (!detail::wants_grad(x)) return;
            std::vector<T> gx(x.numel());
            const T M = static_cast<T>(N * S);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t c = 0; c < C; ++c) {
                    const T k = gamma[c] * inv_std[c];
                    for (std::size_t s = 0; s < S; ++s) {
                        const std::size_t i = (n * C + c) * S + s;
                        gx[i] = train ? k * (g[i] - sum_g[c] / M - xhat[i] * sum_gx[c] / M) : k * g[i];
                    }
                }
            detail::accumulate<T>(x, gx);
        });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the batch.
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
    detail::check(logits.rank() == 2 && logits.dim(0) == labels.size(),
                  "softmax_cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                      std::to_string(labels.size()) + " labels");
    const auto N = logits.dim(0), K = logits.dim(1);
    std::vector<T> prob(N * K);
    T loss = T(0);
    auto L = logits.data();
    for (std::size_t n = 0; n < N; ++n) {
        detail::check(labels[n] >= 0 && static_cast<std::size_t>(labels[n]) < K,
                      "softmax_cross_entropy: label " + std::to_string(labels[n]) + " out of range");
        T mx = L[n * K];
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, L[n * K + k]);
        T z = T(0);
        for (std::size_t k = 0; k < K; ++k) {
            prob[n * K + k] = std::exp(L[n * K + k] - mx);
            z += prob[n * K + k];
        }
        for (std::size_t k = 0; k < K; ++k) prob[n * K + k] /= z;
        loss += -(L[n * K + labels[n]] - mx - std::log(z));
    }
    loss /= static_cast<T>(N);
    std::vector<int> lab(labels.begin(), labels.end());
    return make_result<T>("softmax_cross_entropy", Shape{1}, {loss}, {logits},
                          [logits, N, K, prob = std::move(prob), lab = std::move(lab)](const Node<T>& o) {
                              std::vector<T> g(prob);
                              for (std::size_t n = 0; n < N; ++n) g[n * K + lab[n]] -= T(1);
                              const T k = o.grad[0] / static_cast<T>(N);
                              for (auto& v : g) v *= k;
                              detail::accumulate<T>(logits, g);
                          });
}

}  // namespace srm
