#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "autograd.hpp"
#include "tensor.hpp"

namespace duetmatch::ops {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct Grid {
    std::size_t z = 0, y = 0, x = 0;
    std::size_t voxels() const { return z * y * x; }
};

inline Grid spatial_grid(const Shape& s) {
    if (s.size() != 5) throw ShapeError("expected [N, C, z, y, x], got " + shape_str(s));
    return {s[2], s[3], s[4]};
}

namespace detail {

struct ConvGeom {
    std::size_t cin, k, stride, pad;
    Grid in, out;
};

inline std::size_t conv_out(std::size_t n, std::size_t k, std::size_t s, std::size_t p) {
    if (n + 2 * p < k) return 0;
    return (n + 2 * p - k) / s + 1;
}

// Output z-slices [oz0, oz1) of the patch matrix:
// col[(c, kz, ky, kx), (oz - oz0, oy, ox)] = x[c, oz*s - p + kz, ...] or 0 outside.
template <class T>
void im2col(const T* x, const ConvGeom& g, std::size_t oz0, std::size_t oz1, T* col) {
    const std::size_t cols = (oz1 - oz0) * g.out.y * g.out.x;
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    const auto s = static_cast<std::ptrdiff_t>(g.stride);
    const auto in_x = static_cast<std::ptrdiff_t>(g.in.x);
    for (std::size_t c = 0; c < g.cin; ++c) {
        const T* xc = x + c * g.in.voxels();
        for (std::size_t kz = 0; kz < g.k; ++kz)
            for (std::size_t ky = 0; ky < g.k; ++ky)
                for (std::size_t kx = 0; kx < g.k; ++kx) {
                    T* row = col + (((c * g.k + kz) * g.k + ky) * g.k + kx) * cols;
                    // valid ox satisfy 0 <= ox*s + kx - p < in.x
                    const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
                    std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
                    std::ptrdiff_t hi = in_x - off <= 0 ? 0 : (in_x - off + s - 1) / s;
                    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(g.out.x));
                    lo = std::min(lo, hi);
                    for (std::size_t oz = oz0; oz < oz1; ++oz) {
                        const auto iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) - pad;
                        for (std::size_t oy = 0; oy < g.out.y; ++oy) {
                            T* dst = row + ((oz - oz0) * g.out.y + oy) * g.out.x;
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
                            if (iz < 0 || iy < 0 || iz >= static_cast<std::ptrdiff_t>(g.in.z) ||
                                iy >= static_cast<std::ptrdiff_t>(g.in.y)) {
                                std::fill(dst, dst + g.out.x, T{0});
                                continue;
                            }
                            const T* src = xc + (static_cast<std::size_t>(iz) * g.in.y + static_cast<std::size_t>(iy)) * g.in.x;
                            std::fill(dst, dst + lo, T{0});
                            if (s == 1) {
                                std::copy(src + lo + off, src + hi + off, dst + lo);
                            } else {
                                for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * s + off];
                            }
                            std::fill(dst + hi, dst + g.out.x, T{0});
                        }
                    }
                }
    }
}

template <class T>
void col2im(const T* col, const ConvGeom& g, std::size_t oz0, std::size_t oz1, T* dx) {
    const std::size_t cols = (oz1 - oz0) * g.out.y * g.out.x;
    const auto pad = static_cast<std::ptrdiff_t>(g.pad);
    const auto s = static_cast<std::ptrdiff_t>(g.stride);
    const auto in_x = static_cast<std::ptrdiff_t>(g.in.x);
    for (std::size_t c = 0; c < g.cin; ++c) {
        T* xc = dx + c * g.in.voxels();
        for (std::size_t kz = 0; kz < g.k; ++kz)
            for (std::size_t ky = 0; ky < g.k; ++ky)
                for (std::size_t kx = 0; kx < g.k; ++kx) {
                    const T* row = col + (((c * g.k + kz) * g.k + ky) * g.k + kx) * cols;
                    const auto off = static_cast<std::ptrdiff_t>(kx) - pad;
                    std::ptrdiff_t lo = off >= 0 ? 0 : (-off + s - 1) / s;
                    std::ptrdiff_t hi = in_x - off <= 0 ? 0 : (in_x - off + s - 1) / s;
                    hi = std::min<std::ptrdiff_t>(hi, static_cast<std::ptrdiff_t>(g.out.x));
                    for (std::size_t oz = oz0; oz < oz1; ++oz) {
                        const auto iz = static_cast<std::ptrdiff_t>(oz * g.stride + kz) - pad;
                        if (iz < 0 || iz >= static_cast<std::ptrdiff_t>(g.in.z)) continue;
                        for (std::size_t oy = 0; oy < g.out.y; ++oy) {
                            const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - pad;
                            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.in.y)) continue;
                            const T* src = row + ((oz - oz0) * g.out.y + oy) * g.out.x;
                            T* dst = xc + (static_cast<std::size_t>(iz) * g.in.y + static_cast<std::size_t>(iy)) * g.in.x;
                            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox * s + off] += src[ox];
                        }
                    }
                }
    }
}

// Output z-slices per chunk so that one chunk of the patch matrix stays cache-resident.
inline std::size_t chunk_slices(const ConvGeom& g, std::size_t elem_size) {
    const std::size_t rows = g.cin * g.k * g.k * g.k;
    const std::size_t per_slice = rows * g.out.y * g.out.x * elem_size;
    const std::size_t budget = std::size_t{512} * 1024;
    return std::clamp<std::size_t>(budget / std::max<std::size_t>(per_slice, 1), 1, g.out.z);
}

}  // namespace detail

/// 3D convolution. x: [N, Cin, z, y, x]; w: [Cout, Cin, k, k, k]; b: [Cout].
template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t pad) {
    using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
    using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (ws.size() != 5 || ws[2] != ws[3] || ws[3] != ws[4])
        throw ShapeError("conv3d weight must be [Cout, Cin, k, k, k], got " + shape_str(ws));
    if (xs.size() != 5 || xs[1] != ws[1])
        throw ShapeError("conv3d input expected [N, " + std::to_string(ws[1]) + ", z, y, x], got " + shape_str(xs));
    const std::size_t n = xs[0], cout = ws[0], k = ws[2];
    detail::ConvGeom g{ws[1], k, stride, pad, spatial_grid(xs), {}};
    g.out = {detail::conv_out(g.in.z, k, stride, pad), detail::conv_out(g.in.y, k, stride, pad),
             detail::conv_out(g.in.x, k, stride, pad)};
    if (g.out.voxels() == 0) throw ShapeError("conv3d output is empty for input " + shape_str(xs));
    const std::size_t rows = g.cin * k * k * k, ov = g.out.voxels(), iv = g.in.voxels();
    const std::size_t slice = g.out.y * g.out.x;
    const bool direct = (k == 1 && stride == 1 && pad == 0);
    const std::size_t chunk = direct ? g.out.z : detail::chunk_slices(g, sizeof(T));

    Tensor<T> out({n, cout, g.out.z, g.out.y, g.out.x});
    AlignedVector<T> col(direct ? 0 : rows * chunk * slice);
    ConstMatMap<T> W(w.value().data(), cout, rows);
    for (std::size_t i = 0; i < n; ++i) {
        const T* xi = x.value().data() + i * g.cin * iv;
        T* oi = out.data() + i * cout * ov;
        for (std::size_t z0 = 0; z0 < g.out.z; z0 += chunk) {
            const std::size_t z1 = std::min(z0 + chunk, g.out.z), cols = (z1 - z0) * slice;
            if (!direct) detail::im2col(xi, g, z0, z1, col.data());
            ConstStridedMap C(direct ? xi + z0 * slice : col.data(), rows, cols,
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(direct ? ov : cols)));
            StridedMap O(oi + z0 * slice, cout, cols, Eigen::OuterStride<>(static_cast<Eigen::Index>(ov)));
            O.noalias() = W * C;
        }
        for (std::size_t c = 0; c < cout; ++c) {
            const T bias = b.value()[c];
            for (T* p = oi + c * ov; p != oi + (c + 1) * ov; ++p) *p += bias;
        }
    }

    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, g, rows, ov, iv, n, cout, direct, chunk, slice, stride, k](Node<T>& self) {
        const Tensor<T>& dy = self.grad;
        AlignedVector<T> col(direct ? 0 : rows * chunk * slice);
        ConstMatMap<T> W(w.value().data(), cout, rows);
        const bool need_col = w.requires_grad();
        const bool flip = !direct && stride == 1 && 2 * g.pad + 1 == k;
        // Geometry of the flipped correlation: input dy (cout channels), output dx.
        const detail::ConvGeom fg{cout, k, 1, k - 1 - g.pad, g.out, g.in};
        const std::size_t frows = cout * k * k * k;
        const std::size_t fchunk = flip ? detail::chunk_slices(fg, sizeof(T)) : 0;
        RowMat<T> Wf;
        if (flip && x.requires_grad()) {
            const std::size_t k3 = k * k * k;
            Wf.resize(static_cast<Eigen::Index>(g.cin), static_cast<Eigen::Index>(frows));
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t ci = 0; ci < g.cin; ++ci)
                    for (std::size_t t = 0; t < k3; ++t)
                        Wf(static_cast<Eigen::Index>(ci), static_cast<Eigen::Index>(co * k3 + (k3 - 1 - t))) =
                            w.value()[(co * g.cin + ci) * k3 + t];
        }
        AlignedVector<T> dcol(direct ? 0 : std::max(rows * chunk * slice, flip ? frows * fchunk * g.in.y * g.in.x : 0));
        for (std::size_t i = 0; i < n; ++i) {
            const T* xi = x.value().data() + i * g.cin * iv;
            const T* dyi = dy.data() + i * cout * ov;
            if (b.requires_grad()) {
                T* db = b.get()->grad_buffer().data();
                for (std::size_t c = 0; c < cout; ++c) {
                    T s{0};
                    for (const T* p = dyi + c * ov; p != dyi + (c + 1) * ov; ++p) s += *p;
                    db[c] += s;
                }
            }
            for (std::size_t z0 = 0; z0 < g.out.z; z0 += chunk) {
                const std::size_t z1 = std::min(z0 + chunk, g.out.z), cols = (z1 - z0) * slice;
                ConstStridedMap dO(dyi + z0 * slice, cout, cols, Eigen::OuterStride<>(static_cast<Eigen::Index>(ov)));
                if (need_col) {
                    if (!direct) detail::im2col(xi, g, z0, z1, col.data());
                    ConstStridedMap C(direct ? xi + z0 * slice : col.data(), rows, cols,
                                      Eigen::OuterStride<>(static_cast<Eigen::Index>(direct ? ov : cols)));
                    MatMap<T> dW(w.get()->grad_buffer().data(), cout, rows);
                    dW.noalias() += dO * C.transpose();
                }
                if (x.requires_grad() && !flip) {
                    T* dx = x.get()->grad_buffer().data() + i * g.cin * iv;
                    if (direct) {
                        StridedMap dX(dx + z0 * slice, rows, cols, Eigen::OuterStride<>(static_cast<Eigen::Index>(ov)));
                        dX.noalias() += W.transpose() * dO;
                    } else {
                        MatMap<T> dC(dcol.data(), rows, cols);
                        dC.noalias() = W.transpose() * dO;
                        detail::col2im(dcol.data(), g, z0, z1, dx);
                    }
                }
            }
            if (x.requires_grad() && flip) {
                // Stride-1 input gradient is a "full" correlation of dy with the
                // spatially flipped, channel-transposed kernel.
                T* dx = x.get()->grad_buffer().data() + i * g.cin * iv;
                for (std::size_t z0 = 0; z0 < g.in.z; z0 += fchunk) {
                    const std::size_t z1 = std::min(z0 + fchunk, g.in.z), cols = (z1 - z0) * g.in.y * g.in.x;
                    detail::im2col(dyi, fg, z0, z1, dcol.data());
                    ConstMatMap<T> C(dcol.data(), frows, cols);
                    StridedMap dX(dx + z0 * g.in.y * g.in.x, g.cin, cols, Eigen::OuterStride<>(static_cast<Eigen::Index>(iv)));
                    dX.noalias() += Wf * C;
                }
            }
        }
    });
}

/// 2x2x2 stride-2 transposed convolution (exact 2x upsampling).
/// x: [N, Cin, z, y, x]; w: [Cin, Cout, 2, 2, 2]; b: [Cout].
template <class T>
Var<T> conv_transpose3d_2x(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (ws.size() != 5 || ws[2] != 2 || ws[3] != 2 || ws[4] != 2)
        throw ShapeError("transposed conv weight must be [Cin, Cout, 2, 2, 2], got " + shape_str(ws));
    if (xs.size() != 5 || xs[1] != ws[0])
        throw ShapeError("transposed conv input expected [N, " + std::to_string(ws[0]) + ", z, y, x], got " +
                         shape_str(xs));
    const std::size_t n = xs[0], cin = ws[0], cout = ws[1];
    const Grid in = spatial_grid(xs);
    const Grid out_g{in.z * 2, in.y * 2, in.x * 2};
    const std::size_t iv = in.voxels(), ov = out_g.voxels(), rows = cout * 8;

    Tensor<T> out({n, cout, out_g.z, out_g.y, out_g.x});
    AlignedVector<T> y(rows * iv);
    ConstMatMap<T> W(w.value().data(), cin, rows);
    for (std::size_t i = 0; i < n; ++i) {
        ConstMatMap<T> X(x.value().data() + i * cin * iv, cin, iv);
        MatMap<T> Y(y.data(), rows, iv);
        Y.noalias() = W.transpose() * X;
        T* o = out.data() + i * cout * ov;
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t a = 0; a < 8; ++a) {
                const std::size_t dz = a >> 2, dy = (a >> 1) & 1, dx = a & 1;
                const T* src = y.data() + (co * 8 + a) * iv;
                const T bias = b.value()[co];
                for (std::size_t z = 0; z < in.z; ++z)
                    for (std::size_t yy = 0; yy < in.y; ++yy) {
                        T* dst = o + co * ov + ((2 * z + dz) * out_g.y + 2 * yy + dy) * out_g.x + dx;
                        const T* s = src + (z * in.y + yy) * in.x;
                        for (std::size_t xx = 0; xx < in.x; ++xx) dst[2 * xx] = s[xx] + bias;
                    }
            }
    }

    return make_result<T>(std::move(out), {x, w, b}, [x, w, b, in, out_g, n, cin, cout, iv, ov, rows](Node<T>& self) {
        AlignedVector<T> gbuf(rows * iv);
        ConstMatMap<T> W(w.value().data(), cin, rows);
        for (std::size_t i = 0; i < n; ++i) {
            const T* d = self.grad.data() + i * cout * ov;
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t a = 0; a < 8; ++a) {
                    const std::size_t dz = a >> 2, dy = (a >> 1) & 1, dx = a & 1;
                    T* dst = gbuf.data() + (co * 8 + a) * iv;
                    for (std::size_t z = 0; z < in.z; ++z)
                        for (std::size_t yy = 0; yy < in.y; ++yy) {
                            const T* s = d + co * ov + ((2 * z + dz) * out_g.y + 2 * yy + dy) * out_g.x + dx;
                            T* t = dst + (z * in.y + yy) * in.x;
                            for (std::size_t xx = 0; xx < in.x; ++xx) t[xx] = s[2 * xx];
                        }
                }
            ConstMatMap<T> G(gbuf.data(), rows, iv);
            if (x.requires_grad()) {
                MatMap<T> dX(x.get()->grad_buffer().data() + i * cin * iv, cin, iv);
                dX.noalias() += W * G;
            }
            if (w.requires_grad()) {
                ConstMatMap<T> X(x.value().data() + i * cin * iv, cin, iv);
                MatMap<T> dW(w.get()->grad_buffer().data(), cin, rows);
                dW.noalias() += X * G.transpose();
            }
            if (b.requires_grad()) {
                T* db = b.get()->grad_buffer().data();
                for (std::size_t co = 0; co < cout; ++co) {
                    T s{0};
                    const T* g = gbuf.data() + co * 8 * iv;
                    for (const T* p = g; p != g + 8 * iv; ++p) s += *p;
                    db[co] += s;
                }
            }
        }
    });
}

template <class T>
Var<T> relu(const Var<T>& x) {
    Tensor<T> out = x.value();
    for (auto& v : out.vec()) v = v > T{0} ? v : T{0};
    return make_result<T>(std::move(out), {x}, [x](Node<T>& self) {
        T* dx = x.get()->grad_buffer().data();
        const T* xv = x.value().data();
        const T* dy = self.grad.data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (xv[i] > T{0}) dx[i] += dy[i];
    });
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        for (const Var<T>* v : {&a, &b}) {
            if (!v->requires_grad()) continue;
            T* d = v->get()->grad_buffer().data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i];
        }
    });
}

/// out = relu(a + b), fused to save one activation buffer.
template <class T>
Var<T> add_relu(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.shape(), b.shape(), "add_relu");
    Tensor<T> out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        const T s = out[i] + b.value()[i];
        out[i] = s > T{0} ? s : T{0};
    }
    return make_result<T>(std::move(out), {a, b}, [a, b](Node<T>& self) {
        const T* y = self.value.data();
        for (const Var<T>* v : {&a, &b}) {
            if (!v->requires_grad()) continue;
            T* d = v->get()->grad_buffer().data();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                if (y[i] > T{0}) d[i] += self.grad[i];
        }
    });
}

/// Elementwise product with a constant tensor (dropout masks, CutMix masks).
template <class T>
Var<T> mul_const(const Var<T>& x, const Tensor<T>& m) {
    require_same_shape(x.shape(), m.shape(), "mul_const");
    Tensor<T> out = x.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= m[i];
    return make_result<T>(std::move(out), {x}, [x, m](Node<T>& self) {
        T* d = x.get()->grad_buffer().data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) d[i] += self.grad[i] * m[i];
    });
}

/// Softmax over the channel axis of [N, C, ...].
template <class T>
Var<T> softmax_channels(const Var<T>& x) {
    const std::size_t n = x.shape().at(0), c = x.shape().at(1), v = x.value().spatial();
    Tensor<T> out(x.shape());
    for (std::size_t b = 0; b < n; ++b) {
        const T* in = x.value().data() + b * c * v;
        T* o = out.data() + b * c * v;
        for (std::size_t i = 0; i < v; ++i) {
            T mx = in[i];
            for (std::size_t k = 1; k < c; ++k) mx = std::max(mx, in[k * v + i]);
            T s{0};
            for (std::size_t k = 0; k < c; ++k) {
                o[k * v + i] = std::exp(in[k * v + i] - mx);
                s += o[k * v + i];
            }
            for (std::size_t k = 0; k < c; ++k) o[k * v + i] /= s;
        }
    }
    return make_result<T>(std::move(out), {x}, [x, n, c, v](Node<T>& self) {
        T* dx = x.get()->grad_buffer().data();
        for (std::size_t b = 0; b < n; ++b) {
            const T* p = self.value.data() + b * c * v;
            const T* dy = self.grad.data() + b * c * v;
            T* d = dx + b * c * v;
            for (std::size_t i = 0; i < v; ++i) {
                T dot{0};
                for (std::size_t k = 0; k < c; ++k) dot += p[k * v + i] * dy[k * v + i];
                for (std::size_t k = 0; k < c; ++k) d[k * v + i] += p[k * v + i] * (dy[k * v + i] - dot);
            }
        }
    });
}

/// Weighted sum of scalars: sum_i coef_i * term_i.
template <class T>
Var<T> weighted_sum(std::vector<Var<T>> terms, std::vector<T> coefs) {
    if (terms.size() != coefs.size()) throw ShapeError("weighted_sum: terms/coefficients length mismatch");
    T s{0};
    for (std::size_t i = 0; i < terms.size(); ++i) s += coefs[i] * terms[i].value().item();
    return make_result<T>(Tensor<T>::scalar(s), terms, [terms, coefs](Node<T>& self) {
        const T g = self.grad[0];
        for (std::size_t i = 0; i < terms.size(); ++i)
            if (terms[i].requires_grad()) terms[i].get()->grad_buffer()[0] += coefs[i] * g;
    });
}

}  // namespace duetmatch::ops
