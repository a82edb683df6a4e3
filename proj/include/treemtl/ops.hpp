#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "treemtl/autograd.hpp"

namespace treemtl::ops {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <class T>
T stable_sigmoid(T z) {
    if (z >= T{0}) return T{1} / (T{1} + std::exp(-z));
    const T e = std::exp(z);
    return e / (T{1} + e);
}

inline std::vector<std::size_t> strides_of(const Shape& shape) {
    std::vector<std::size_t> s(shape.size(), 1);
    for (std::size_t i = shape.size(); i-- > 1;) s[i - 1] = s[i] * shape[i];
    return s;
}

}  // namespace detail

/// Replicates each named unit axis `factors[k]` times along `dims[k]`.
template <class T>
Tensor<T> dup(const Tensor<T>& x, const std::vector<std::size_t>& dims, const std::vector<std::size_t>& factors) {
    if (dims.size() != factors.size()) throw DimensionError("dup: dims and factors differ in length");
    Shape out_shape = x.shape();
    for (std::size_t k = 0; k < dims.size(); ++k) {
        if (dims[k] >= x.rank())
            throw IndexError("dup: axis " + std::to_string(dims[k]) + " out of range for rank " +
                             std::to_string(x.rank()));
        if (x.dim(dims[k]) != 1)
            throw DimensionError("dup: axis " + std::to_string(dims[k]) + " has extent " +
                                 std::to_string(x.dim(dims[k])) + ", expected 1");
        if (factors[k] == 0) throw DimensionError("dup: replication factor must be positive");
        out_shape[dims[k]] = factors[k];
    }
    if (dims.empty()) return x;

    Tensor<T> out(out_shape);
    const auto in_strides = detail::strides_of(x.shape());
    std::vector<std::size_t> src_stride(out_shape.size());
    for (std::size_t a = 0; a < out_shape.size(); ++a) src_stride[a] = x.dim(a) == 1 ? 0 : in_strides[a];

    std::vector<std::size_t> idx(out_shape.size(), 0);
    for (std::size_t flat = 0; flat < out.size(); ++flat) {
        std::size_t src = 0;
        for (std::size_t a = 0; a < idx.size(); ++a) src += idx[a] * src_stride[a];
        out[flat] = x[src];
        for (std::size_t a = idx.size(); a-- > 0;) {
            if (++idx[a] < out_shape[a]) break;
            idx[a] = 0;
        }
    }
    return out;
}

/// Differentiable dup; the backward pass sums over the replicated axes.
template <class T>
Var<T> dup(const Var<T>& x, std::vector<std::size_t> dims, std::vector<std::size_t> factors) {
    Tensor<T> out = dup(x.value(), dims, factors);
    const Shape in_shape = x.shape();
    return record<T>(std::move(out), {x}, [in_shape](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& gin = in.grad_buffer();
        const Shape& out_shape = self.value.shape();
        const auto in_strides = detail::strides_of(in_shape);
        std::vector<std::size_t> idx(out_shape.size(), 0);
        for (std::size_t flat = 0; flat < self.grad.size(); ++flat) {
            std::size_t src = 0;
            for (std::size_t a = 0; a < idx.size(); ++a)
                if (in_shape[a] != 1) src += idx[a] * in_strides[a];
            gin[src] += self.grad[flat];
            for (std::size_t a = idx.size(); a-- > 0;) {
                if (++idx[a] < out_shape[a]) break;
                idx[a] = 0;
            }
        }
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return record<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (auto& in : self.inputs) {
            if (!in->requires_grad) continue;
            Tensor<T>& g = in->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

/// Hadamard product of equal-shaped tensors.
template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return record<T>(std::move(out), {a, b}, [](Node<T>& self) {
        Node<T>& na = *self.inputs[0];
        Node<T>& nb = *self.inputs[1];
        if (na.requires_grad) {
            Tensor<T>& g = na.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * nb.value[i];
        }
        if (nb.requires_grad) {
            Tensor<T>& g = nb.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * na.value[i];
        }
    });
}

template <class T>
Var<T> scale(const Var<T>& x, T factor) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v *= factor;
    return record<T>(std::move(out), {x}, [factor](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v = v > T{0} ? v : T{0};
    return record<T>(std::move(out), {x}, [](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i)
            if (self.value[i] > T{0}) g[i] += self.grad[i];
    });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.data()) v = detail::stable_sigmoid(v);
    return record<T>(std::move(out), {x}, [](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const T s = self.value[i];
            g[i] += self.grad[i] * s * (T{1} - s);
        }
    });
}

/// Sum of all elements as a shape-(1) tensor.
template <class T>
Var<T> sum(const Var<T>& x) {
    T total{0};
    for (auto v : x.value().data()) total += v;
    return record<T>(Tensor<T>({1}, total), {x}, [](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (auto& v : g.data()) v += self.grad[0];
    });
}

template <class T>
Var<T> mean(const Var<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.value().size()));
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
    if (numel(shape) != x.value().size())
        throw DimensionError("reshape: " + to_string(x.shape()) + " -> " + to_string(shape));
    return record<T>(x.value().reshaped(std::move(shape)), {x}, [](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// (B,...) -> (B, prod(rest))
template <class T>
Var<T> flatten(const Var<T>& x) {
    const std::size_t b = x.shape().at(0);
    return reshape(x, {b, x.value().size() / b});
}

/// Mean over the spatial axes: (B,H,W,C) -> (B,1,1,C).
template <class T>
Var<T> global_avg_pool(const Var<T>& x) {
    require_rank4(x.shape(), "global_avg_pool");
    const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    Tensor<T> out({B, 1, 1, C});
    const T inv = T{1} / static_cast<T>(H * W);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t c = 0; c < C; ++c) {
            T acc{0};
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) acc += x.value().at(b, h, w, c);
            out.at(b, 0, 0, c) = acc * inv;
        }
    }
    return record<T>(std::move(out), {x}, [inv](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        const auto& s = in.value.shape();
        for (std::size_t b = 0; b < s[0]; ++b)
            for (std::size_t h = 0; h < s[1]; ++h)
                for (std::size_t w = 0; w < s[2]; ++w)
                    for (std::size_t c = 0; c < s[3]; ++c) g.at(b, h, w, c) += self.grad.at(b, 0, 0, c) * inv;
    });
}

/// 2x2 stride-2 max pooling (floor on odd extents).
template <class T>
Var<T> max_pool2(const Var<T>& x) {
    require_rank4(x.shape(), "max_pool2");
    const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], C = x.shape()[3];
    const std::size_t Ho = H / 2, Wo = W / 2;
    if (Ho == 0 || Wo == 0) throw DimensionError("max_pool2: input " + to_string(x.shape()) + " too small");
    Tensor<T> out({B, Ho, Wo, C});
    std::vector<std::size_t> argmax(out.size());
    const auto& in = x.value();
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t oh = 0; oh < Ho; ++oh)
            for (std::size_t ow = 0; ow < Wo; ++ow)
                for (std::size_t c = 0; c < C; ++c) {
                    std::size_t best = ((b * H + 2 * oh) * W + 2 * ow) * C + c;
                    for (std::size_t dh = 0; dh < 2; ++dh)
                        for (std::size_t dw = 0; dw < 2; ++dw) {
                            const std::size_t i = ((b * H + 2 * oh + dh) * W + 2 * ow + dw) * C + c;
                            if (in[i] > in[best]) best = i;
                        }
                    const std::size_t o = ((b * Ho + oh) * Wo + ow) * C + c;
                    out[o] = in[best];
                    argmax[o] = best;
                }
    return record<T>(std::move(out), {x}, [argmax = std::move(argmax)](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
    });
}

/// Fully connected: x (B,in), weight (in,out), optional bias (out).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>* bias) {
    if (x.shape().size() != 2 || weight.shape().size() != 2 || x.shape()[1] != weight.shape()[0])
        throw DimensionError("linear: incompatible shapes " + to_string(x.shape()) + " x " +
                             to_string(weight.shape()));
    const std::size_t B = x.shape()[0], In = weight.shape()[0], Out = weight.shape()[1];
    Tensor<T> out({B, Out});
    detail::MatMap<T> y(out.data().data(), B, Out);
    detail::ConstMatMap<T> xm(x.value().data().data(), B, In);
    detail::ConstMatMap<T> wm(weight.value().data().data(), In, Out);
    y.noalias() = xm * wm;
    std::vector<Var<T>> inputs{x, weight};
    if (bias) {
        if (bias->shape() != Shape{Out}) throw DimensionError("linear: bias shape mismatch");
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t o = 0; o < Out; ++o) out[b * Out + o] += bias->value()[o];
        inputs.push_back(*bias);
    }
    return record<T>(std::move(out), std::move(inputs), [B, In, Out](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& nw = *self.inputs[1];
        detail::ConstMatMap<T> gy(self.grad.data().data(), B, Out);
        if (nx.requires_grad) {
            detail::MatMap<T> gx(nx.grad_buffer().data().data(), B, In);
            gx.noalias() += gy * detail::ConstMatMap<T>(nw.value.data().data(), In, Out).transpose();
        }
        if (nw.requires_grad) {
            detail::MatMap<T> gw(nw.grad_buffer().data().data(), In, Out);
            gw.noalias() += detail::ConstMatMap<T>(nx.value.data().data(), B, In).transpose() * gy;
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            Tensor<T>& gb = self.inputs[2]->grad_buffer();
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < Out; ++o) gb[o] += self.grad[b * Out + o];
        }
    });
}

struct Conv2dGeometry {
    std::size_t kernel = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t out_extent(std::size_t in) const {
        const std::size_t span = in + 2 * padding;
        if (span < kernel) return 0;
        return (span - kernel) / stride + 1;
    }
};

/// 2-D convolution over (B,H,W,Cin) with weight (k,k,Cin,Cout) and optional
/// bias (Cout). Lowered to a single GEMM via im2col.
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>* bias, Conv2dGeometry geo) {
    require_rank4(x.shape(), "conv2d");
    const auto& ws = weight.shape();
    const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], Cin = x.shape()[3];
    if (ws.size() != 4 || ws[0] != geo.kernel || ws[1] != geo.kernel || ws[2] != Cin)
        throw DimensionError("conv2d: weight " + to_string(ws) + " incompatible with input " + to_string(x.shape()));
    const std::size_t Cout = ws[3];
    const std::size_t Ho = geo.out_extent(H), Wo = geo.out_extent(W);
    if (Ho == 0 || Wo == 0) throw DimensionError("conv2d: output would be empty for input " + to_string(x.shape()));
    const std::size_t rows = B * Ho * Wo;
    const std::size_t K = geo.kernel * geo.kernel * Cin;
    const bool pointwise = geo.kernel == 1 && geo.stride == 1 && geo.padding == 0;

    auto cols = std::make_shared<AlignedVector<T>>();
    const T* col_ptr = x.value().data().data();
    if (!pointwise) {
        cols->assign(rows * K, T{0});
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    T* row = cols->data() + ((b * Ho + oh) * Wo + ow) * K;
                    for (std::size_t kh = 0; kh < geo.kernel; ++kh) {
                        const long ih = static_cast<long>(oh * geo.stride + kh) - static_cast<long>(geo.padding);
                        if (ih < 0 || ih >= static_cast<long>(H)) continue;
                        for (std::size_t kw = 0; kw < geo.kernel; ++kw) {
                            const long iw = static_cast<long>(ow * geo.stride + kw) - static_cast<long>(geo.padding);
                            if (iw < 0 || iw >= static_cast<long>(W)) continue;
                            std::memcpy(row + (kh * geo.kernel + kw) * Cin, &x.value().at(b, ih, iw, 0), Cin * sizeof(T));
                        }
                    }
                }
        col_ptr = cols->data();
    }

    Tensor<T> out({B, Ho, Wo, Cout});
    detail::MatMap<T> y(out.data().data(), rows, Cout);
    y.noalias() = detail::ConstMatMap<T>(col_ptr, rows, K) * detail::ConstMatMap<T>(weight.value().data().data(), K, Cout);
    std::vector<Var<T>> inputs{x, weight};
    if (bias) {
        if (bias->shape() != Shape{Cout}) throw DimensionError("conv2d: bias shape mismatch");
        y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value().data().data(), Cout);
        inputs.push_back(*bias);
    }

    return record<T>(std::move(out), std::move(inputs),
                     [=, cols = std::move(cols)](Node<T>& self) {
        Node<T>& nx = *self.inputs[0];
        Node<T>& nw = *self.inputs[1];
        detail::ConstMatMap<T> gy(self.grad.data().data(), rows, Cout);
        const T* cp = pointwise ? nx.value.data().data() : cols->data();
        if (nw.requires_grad) {
            detail::MatMap<T> gw(nw.grad_buffer().data().data(), K, Cout);
            gw.noalias() += detail::ConstMatMap<T>(cp, rows, K).transpose() * gy;
        }
        if (self.inputs.size() > 2 && self.inputs[2]->requires_grad) {
            Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(self.inputs[2]->grad_buffer().data().data(), Cout);
            gb += gy.colwise().sum();
        }
        if (!nx.requires_grad) return;
        detail::ConstMatMap<T> wm(nw.value.data().data(), K, Cout);
        Tensor<T>& gx = nx.grad_buffer();
        if (pointwise) {
            detail::MatMap<T>(gx.data().data(), rows, K).noalias() += gy * wm.transpose();
            return;
        }
        detail::RowMat<T> gcols = gy * wm.transpose();
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t oh = 0; oh < Ho; ++oh)
                for (std::size_t ow = 0; ow < Wo; ++ow) {
                    const T* row = gcols.data() + ((b * Ho + oh) * Wo + ow) * K;
                    for (std::size_t kh = 0; kh < geo.kernel; ++kh) {
                        const long ih = static_cast<long>(oh * geo.stride + kh) - static_cast<long>(geo.padding);
                        if (ih < 0 || ih >= static_cast<long>(H)) continue;
                        for (std::size_t kw = 0; kw < geo.kernel; ++kw) {
                            const long iw = static_cast<long>(ow * geo.stride + kw) - static_cast<long>(geo.padding);
                            if (iw < 0 || iw >= static_cast<long>(W)) continue;
                            T* dst = &gx.at(b, ih, iw, 0);
                            const T* src = row + (kh * geo.kernel + kw) * Cin;
                            for (std::size_t c = 0; c < Cin; ++c) dst[c] += src[c];
                        }
                    }
                }
    });
}

/// Row-wise L2 normalization of a (B,D) matrix; zero rows stay zero.
template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
    if (x.shape().size() != 2) throw DimensionError("l2_normalize_rows: expected (B,D)");
    const std::size_t B = x.shape()[0], D = x.shape()[1];
    Tensor<T> out = x.value();
    std::vector<T> norms(B);
    for (std::size_t b = 0; b < B; ++b) {
        T ss{0};
        for (std::size_t d = 0; d < D; ++d) ss += out[b * D + d] * out[b * D + d];
        norms[b] = std::max(std::sqrt(ss), T(1e-12));
        for (std::size_t d = 0; d < D; ++d) out[b * D + d] /= norms[b];
    }
    return record<T>(std::move(out), {x}, [B, D, norms = std::move(norms)](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (std::size_t b = 0; b < B; ++b) {
            T dot{0};
            for (std::size_t d = 0; d < D; ++d) dot += self.grad[b * D + d] * self.value[b * D + d];
            for (std::size_t d = 0; d < D; ++d)
                g[b * D + d] += (self.grad[b * D + d] - self.value[b * D + d] * dot) / norms[b];
        }
    });
}

/// L2 normalization of every column of a matrix viewed as (D, M) where M is
/// the product of trailing axes.
template <class T>
Var<T> l2_normalize_columns(const Var<T>& x) {
    const std::size_t D = x.shape().at(0);
    const std::size_t M = x.value().size() / D;
    Tensor<T> out = x.value();
    std::vector<T> norms(M);
    for (std::size_t m = 0; m < M; ++m) {
        T ss{0};
        for (std::size_t d = 0; d < D; ++d) ss += out[d * M + m] * out[d * M + m];
        norms[m] = std::max(std::sqrt(ss), T(1e-12));
        for (std::size_t d = 0; d < D; ++d) out[d * M + m] /= norms[m];
    }
    return record<T>(std::move(out), {x}, [D, M, norms = std::move(norms)](Node<T>& self) {
        Node<T>& in = *self.inputs[0];
        if (!in.requires_grad) return;
        Tensor<T>& g = in.grad_buffer();
        for (std::size_t m = 0; m < M; ++m) {
            T dot{0};
            for (std::size_t d = 0; d < D; ++d) dot += self.grad[d * M + m] * self.value[d * M + m];
            for (std::size_t d = 0; d < D; ++d)
                g[d * M + m] += (self.grad[d * M + m] - self.value[d * M + m] * dot) / norms[m];
        }
    });
}

}  // namespace treemtl::ops
