#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "mixcaps/tape.hpp"
#include "mixcaps/tensor.hpp"

// Forward kernels (plain tensors) and their taped counterparts. Every taped
// wrapper computes with the same kernel the untaped path uses, so inference
// and training forwards are bit-identical.
namespace mixcaps {

namespace detail {
// Guard inside the norm so zero vectors stay exactly zero and stay
// differentiable; value follows the canonical squash formulation.
inline constexpr double kSquashEps = 1e-9;
// Guard for plain vector norms; small enough to be invisible at 1e-12
// tolerances on unit-scale values.
inline constexpr double kNormEps = 1e-18;
}  // namespace detail

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul shape mismatch: " + a.shape_str() + " x " + b.shape_str());
    }
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    TensorT<S> out({m, n});
    for (int i = 0; i < m; ++i) {
        for (int p = 0; p < k; ++p) {
            const S aip = a(i, p);
            if (aip == S(0)) continue;
            const S* brow = b.data() + static_cast<std::size_t>(p) * n;
            S* orow = out.data() + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
    return out;
}

// Valid (no padding) cross-correlation. input [H,W,Cin], filters
// [k,k,Cin,Cout], output [H',W',Cout] with H' = (H-k)/stride + 1.
template <typename S>
TensorT<S> conv2d(const TensorT<S>& input, const TensorT<S>& filters, int stride) {
    if (input.rank() != 3 || filters.rank() != 4) {
        throw DimensionError("conv2d expects input [HxWxC] and filters [kxkxCinxCout], got " +
                             input.shape_str() + " and " + filters.shape_str());
    }
    const int h = input.dim(0), w = input.dim(1), cin = input.dim(2);
    const int k = filters.dim(0);
    if (filters.dim(1) != k || filters.dim(2) != cin) {
        throw DimensionError("conv2d filters " + filters.shape_str() +
                             " incompatible with input " + input.shape_str());
    }
    if (k > h || k > w) {
        throw DimensionError("conv2d kernel " + std::to_string(k) + " larger than input " +
                             input.shape_str());
    }
    if (stride < 1) throw ContractError("conv2d stride must be positive");
    const int cout = filters.dim(3);
    const int oh = (h - k) / stride + 1;
    const int ow = (w - k) / stride + 1;
    TensorT<S> out({oh, ow, cout});
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            S* opix = out.data() + (static_cast<std::size_t>(oy) * ow + ox) * cout;
            for (int ky = 0; ky < k; ++ky) {
                const S* irow = input.data() +
                                (static_cast<std::size_t>(oy * stride + ky) * w + ox * stride) * cin;
                const S* frow = filters.data() + static_cast<std::size_t>(ky) * k * cin * cout;
                for (int kx = 0; kx < k; ++kx) {
                    for (int ci = 0; ci < cin; ++ci) {
                        const S v = irow[kx * cin + ci];
                        if (v == S(0)) continue;
                        const S* fvec = frow + (static_cast<std::size_t>(kx) * cin + ci) * cout;
                        for (int co = 0; co < cout; ++co) opix[co] += v * fvec[co];
                    }
                }
            }
        }
    }
    return out;
}

template <typename S>
TensorT<S> conv2d_input_grad(const TensorT<S>& grad_out, const TensorT<S>& filters, int stride,
                             int h, int w) {
    const int k = filters.dim(0), cin = filters.dim(2), cout = filters.dim(3);
    const int oh = grad_out.dim(0), ow = grad_out.dim(1);
    TensorT<S> din({h, w, cin});
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const S* gpix = grad_out.data() + (static_cast<std::size_t>(oy) * ow + ox) * cout;
            for (int ky = 0; ky < k; ++ky) {
                S* drow = din.data() +
                          (static_cast<std::size_t>(oy * stride + ky) * w + ox * stride) * cin;
                const S* frow = filters.data() + static_cast<std::size_t>(ky) * k * cin * cout;
                for (int kx = 0; kx < k; ++kx) {
                    for (int ci = 0; ci < cin; ++ci) {
                        const S* fvec = frow + (static_cast<std::size_t>(kx) * cin + ci) * cout;
                        S acc = S(0);
                        for (int co = 0; co < cout; ++co) acc += gpix[co] * fvec[co];
                        drow[kx * cin + ci] += acc;
                    }
                }
            }
        }
    }
    return din;
}

template <typename S>
TensorT<S> conv2d_filter_grad(const TensorT<S>& grad_out, const TensorT<S>& input, int k,
                              int stride) {
    const int w = input.dim(1), cin = input.dim(2);
    const int oh = grad_out.dim(0), ow = grad_out.dim(1), cout = grad_out.dim(2);
    TensorT<S> df({k, k, cin, cout});
    for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
            const S* gpix = grad_out.data() + (static_cast<std::size_t>(oy) * ow + ox) * cout;
            for (int ky = 0; ky < k; ++ky) {
                const S* irow = input.data() +
                                (static_cast<std::size_t>(oy * stride + ky) * w + ox * stride) * cin;
                S* frow = df.data() + static_cast<std::size_t>(ky) * k * cin * cout;
                for (int kx = 0; kx < k; ++kx) {
                    for (int ci = 0; ci < cin; ++ci) {
                        const S v = irow[kx * cin + ci];
                        if (v == S(0)) continue;
                        S* fvec = frow + (static_cast<std::size_t>(kx) * cin + ci) * cout;
                        for (int co = 0; co < cout; ++co) fvec[co] += v * gpix[co];
                    }
                }
            }
        }
    }
    return df;
}

// Max-subtracted softmax along `axis`; each slice sums to one.
template <typename S>
TensorT<S> softmax(const TensorT<S>& x, int axis) {
    if (axis < 0 || axis >= x.rank()) {
        throw ContractError("softmax axis " + std::to_string(axis) + " out of range for " +
                            x.shape_str());
    }
    if (!x.all_finite()) throw NumericError("softmax input is not finite");
    const int n = x.dim(axis);
    std::int64_t inner = 1;
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    std::int64_t outer = x.size() / (inner * n);
    TensorT<S> out(x.shape());
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * n * inner + in;
            S mx = x[base];
            for (int j = 1; j < n; ++j) mx = std::max(mx, x[base + j * inner]);
            S sum = S(0);
            for (int j = 0; j < n; ++j) {
                const S e = std::exp(x[base + j * inner] - mx);
                out[base + j * inner] = e;
                sum += e;
            }
            for (int j = 0; j < n; ++j) out[base + j * inner] /= sum;
        }
    }
    return out;
}

template <typename S>
TensorT<S> relu(const TensorT<S>& x) {
    TensorT<S> out(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] = x[i] > S(0) ? x[i] : S(0);
    return out;
}

// Adds bias along the last axis.
template <typename S>
TensorT<S> bias_add(const TensorT<S>& x, const TensorT<S>& b) {
    const int c = x.dim(x.rank() - 1);
    if (b.rank() != 1 || b.dim(0) != c) {
        throw DimensionError("bias_add: bias " + b.shape_str() + " does not match last axis of " +
                             x.shape_str());
    }
    TensorT<S> out = x;
    for (std::int64_t i = 0; i < x.size(); ++i) out[i] += b[i % c];
    return out;
}

// y = xW + b for a vector x.
template <typename S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    if (x.rank() != 1 || w.rank() != 2 || x.dim(0) != w.dim(0)) {
        throw DimensionError("linear shape mismatch: " + x.shape_str() + " x " + w.shape_str());
    }
    const int n = w.dim(0), m = w.dim(1);
    if (b.rank() != 1 || b.dim(0) != m) {
        throw DimensionError("linear bias " + b.shape_str() + " does not match output dim " +
                             std::to_string(m));
    }
    TensorT<S> out({m});
    for (int i = 0; i < n; ++i) {
        const S xi = x[i];
        if (xi == S(0)) continue;
        const S* wrow = w.data() + static_cast<std::size_t>(i) * m;
        for (int j = 0; j < m; ++j) out[j] += xi * wrow[j];
    }
    for (int j = 0; j < m; ++j) out[j] += b[j];
    return out;
}

// Euclidean norm of each row of an [R x C] matrix (eps-guarded).
template <typename S>
TensorT<S> row_norms(const TensorT<S>& x) {
    if (x.rank() != 2) throw DimensionError("row_norms expects a matrix, got " + x.shape_str());
    const int r = x.dim(0), c = x.dim(1);
    TensorT<S> out({r});
    for (int i = 0; i < r; ++i) {
        double q = 0.0;
        for (int j = 0; j < c; ++j) q += static_cast<double>(x(i, j)) * x(i, j);
        out[i] = static_cast<S>(std::sqrt(q + detail::kNormEps));
    }
    return out;
}

// Capsule nonlinearity along the last axis: v * |v|^2 / ((1 + |v|^2) |v|).
// Maps zero to exactly zero; output length in [0, 1).
template <typename S>
TensorT<S> squash(const TensorT<S>& x) {
    const int d = x.dim(x.rank() - 1);
    const std::int64_t rows = x.size() / d;
    TensorT<S> out(x.shape());
    for (std::int64_t r = 0; r < rows; ++r) {
        const S* s = x.data() + r * d;
        S* y = out.data() + r * d;
        double q = 0.0;
        for (int j = 0; j < d; ++j) q += static_cast<double>(s[j]) * s[j];
        const double f = q / ((1.0 + q) * std::sqrt(q + detail::kSquashEps));
        for (int j = 0; j < d; ++j) y[j] = static_cast<S>(s[j] * f);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Taped operations
// ---------------------------------------------------------------------------

template <typename S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
    TapeT<S>& t = *a.tape;
    TensorT<S> out = matmul(a.value(), b.value());
    const int aid = a.id, bid = b.id;
    return t.emit(std::move(out), {aid, bid}, "matmul", [aid, bid](TapeT<S>& tp, int self) {
        const TensorT<S>& g = tp.grad_ref(self);
        const TensorT<S>& av = tp.value(aid);
        const TensorT<S>& bv = tp.value(bid);
        const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
        TensorT<S>& da = tp.grad_buf(aid);
        TensorT<S>& db = tp.grad_buf(bid);
        for (int i = 0; i < m; ++i) {
            for (int p = 0; p < k; ++p) {
                S acc = S(0);
                for (int j = 0; j < n; ++j) acc += g(i, j) * bv(p, j);
                da(i, p) += acc;
            }
        }
        for (int p = 0; p < k; ++p) {
            for (int j = 0; j < n; ++j) {
                S acc = S(0);
                for (int i = 0; i < m; ++i) acc += av(i, p) * g(i, j);
                db(p, j) += acc;
            }
        }
    });
}

template <typename S>
VarT<S> conv2d(VarT<S> input, VarT<S> filters, int stride) {
    TapeT<S>& t = *input.tape;
    TensorT<S> out = conv2d(input.value(), filters.value(), stride);
    const int iid = input.id, fid = filters.id;
    const int h = input.value().dim(0), w = input.value().dim(1);
    const int k = filters.value().dim(0);
    return t.emit(std::move(out), {iid, fid}, "conv2d",
                  [iid, fid, stride, h, w, k](TapeT<S>& tp, int self) {
                      const TensorT<S>& g = tp.grad_ref(self);
                      TensorT<S> din = conv2d_input_grad(g, tp.value(fid), stride, h, w);
                      TensorT<S> df = conv2d_filter_grad(g, tp.value(iid), k, stride);
                      TensorT<S>& bi = tp.grad_buf(iid);
                      for (std::int64_t i = 0; i < din.size(); ++i) bi[i] += din[i];
                      TensorT<S>& bf = tp.grad_buf(fid);
                      for (std::int64_t i = 0; i < df.size(); ++i) bf[i] += df[i];
                  });
}

template <typename S>
VarT<S> softmax(VarT<S> x, int axis) {
    TapeT<S>& t = *x.tape;
    TensorT<S> out = softmax(x.value(), axis);
    const int xid = x.id;
    return t.emit(std::move(out), {xid}, "softmax", [xid, axis](TapeT<S>& tp, int self) {
        const TensorT<S>& y = tp.value(self);
        const TensorT<S>& g = tp.grad_ref(self);
        TensorT<S>& dx = tp.grad_buf(xid);
        const int n = y.dim(axis);
        std::int64_t inner = 1;
        for (int i = axis + 1; i < y.rank(); ++i) inner *= y.dim(i);
        const std::int64_t outer = y.size() / (inner * n);
        for (std::int64_t o = 0; o < outer; ++o) {
            for (std::int64_t in = 0; in < inner; ++in) {
                const std::int64_t base = o * n * inner + in;
                S dot = S(0);
                for (int j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
                for (int j = 0; j < n; ++j) {
                    dx[base + j * inner] += y[base + j * inner] * (g[base + j * inner] - dot);
                }
            }
        }
    });
}

template <typename S>
VarT<S> relu(VarT<S> x) {
    TapeT<S>& t = *x.tape;
    const int xid = x.id;
    return t.emit(relu(x.value()), {xid}, "relu", [xid](TapeT<S>& tp, int self) {
        const TensorT<S>& g = tp.grad_ref(self);
        const TensorT<S>& xv = tp.value(xid);
        TensorT<S>& dx = tp.grad_buf(xid);
        for (std::int64_t i = 0; i < xv.size(); ++i) {
            if (xv[i] > S(0)) dx[i] += g[i];
        }
    });
}

template <typename S>
VarT<S> bias_add(VarT<S> x, VarT<S> b) {
    TapeT<S>& t = *x.tape;
    const int xid = x.id, bid = b.id;
    return t.emit(bias_add(x.value(), b.value()), {xid, bid}, "bias_add",
                  [xid, bid](TapeT<S>& tp, int self) {
                      const TensorT<S>& g = tp.grad_ref(self);
                      TensorT<S>& dx = tp.grad_buf(xid);
                      TensorT<S>& db = tp.grad_buf(bid);
                      const int c = db.dim(0);
                      for (std::int64_t i = 0; i < g.size(); ++i) {
                          dx[i] += g[i];
                          db[i % c] += g[i];
                      }
                  });
}

template <typename S>
VarT<S> linear(VarT<S> x, VarT<S> w, VarT<S> b) {
    TapeT<S>& t = *x.tape;
    const int xid = x.id, wid = w.id, bid = b.id;
    return t.emit(linear(x.value(), w.value(), b.value()), {xid, wid, bid}, "linear",
                  [xid, wid, bid](TapeT<S>& tp, int self) {
                      const TensorT<S>& g = tp.grad_ref(self);
                      const TensorT<S>& xv = tp.value(xid);
                      const TensorT<S>& wv = tp.value(wid);
                      const int n = wv.dim(0), m = wv.dim(1);
                      TensorT<S>& dx = tp.grad_buf(xid);
                      TensorT<S>& dw = tp.grad_buf(wid);
                      TensorT<S>& db = tp.grad_buf(bid);
                      for (int i = 0; i < n; ++i) {
                          S acc = S(0);
                          for (int j = 0; j < m; ++j) {
                              acc += wv(i, j) * g[j];
                              dw(i, j) += xv[i] * g[j];
                          }
                          dx[i] += acc;
                      }
                      for (int j = 0; j < m; ++j) db[j] += g[j];
                  });
}

template <typename S>
VarT<S> reshape(VarT<S> x, std::vector<int> new_shape) {
    TapeT<S>& t = *x.tape;
    const int xid = x.id;
    return t.emit(x.value().reshaped(std::move(new_shape)), {xid}, "reshape",
                  [xid](TapeT<S>& tp, int self) {
                      const TensorT<S>& g = tp.grad_ref(self);
                      TensorT<S>& dx = tp.grad_buf(xid);
                      for (std::int64_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                  });
}

template <typename S>
VarT<S> row_norms(VarT<S> x) {
    TapeT<S>& t = *x.tape;
    const int xid = x.id;
    return t.emit(row_norms(x.value()), {xid}, "row_norms", [xid](TapeT<S>& tp, int self) {
        const TensorT<S>& y = tp.value(self);
        const TensorT<S>& g = tp.grad_ref(self);
        const TensorT<S>& xv = tp.value(xid);
        TensorT<S>& dx = tp.grad_buf(xid);
        const int r = xv.dim(0), c = xv.dim(1);
        for (int i = 0; i < r; ++i) {
            const S scale = g[i] / y[i];
            for (int j = 0; j < c; ++j) dx(i, j) += scale * xv(i, j);
        }
    });
}

template <typename S>
VarT<S> squash(VarT<S> x) {
    TapeT<S>& t = *x.tape;
    const int xid = x.id;
    return t.emit(squash(x.value()), {xid}, "squash", [xid](TapeT<S>& tp, int self) {
        const TensorT<S>& g = tp.grad_ref(self);
        const TensorT<S>& xv = tp.value(xid);
        TensorT<S>& dx = tp.grad_buf(xid);
        const int d = xv.dim(xv.rank() - 1);
        const std::int64_t rows = xv.size() / d;
        for (std::int64_t r = 0; r < rows; ++r) {
            const S* s = xv.data() + r * d;
            const S* gr = g.data() + r * d;
            S* dr = dx.data() + r * d;
            double q = 0.0, dot = 0.0;
            for (int j = 0; j < d; ++j) {
                q += static_cast<double>(s[j]) * s[j];
                dot += static_cast<double>(s[j]) * gr[j];
            }
            const double root = std::sqrt(q + detail::kSquashEps);
            const double f = q / ((1.0 + q) * root);
            const double fprime = 1.0 / ((1.0 + q) * root) *
                                  (1.0 - q / (1.0 + q) - q / (2.0 * (q + detail::kSquashEps)));
            for (int j = 0; j < d; ++j) {
                dr[j] += static_cast<S>(f * gr[j] + 2.0 * fprime * dot * s[j]);
            }
        }
    });
}

template <typename S>
VarT<S> add(VarT<S> a, VarT<S> b) {
    TapeT<S>& t = *a.tape;
    if (!a.value().same_shape(b.value())) {
        throw DimensionError("add shape mismatch: " + a.value().shape_str() + " vs " +
                             b.value().shape_str());
    }
    TensorT<S> out = a.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
    const int aid = a.id, bid = b.id;
    return t.emit(std::move(out), {aid, bid}, "add", [aid, bid](TapeT<S>& tp, int self) {
        const TensorT<S>& g = tp.grad_ref(self);
        TensorT<S>& da = tp.grad_buf(aid);
        TensorT<S>& db = tp.grad_buf(bid);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            da[i] += g[i];
            db[i] += g[i];
        }
    });
}

template <typename S>
VarT<S> scale(VarT<S> x, double c) {
    TapeT<S>& t = *x.tape;
    TensorT<S> out = x.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(out[i] * c);
    const int xid = x.id;
    return t.emit(std::move(out), {xid}, "scale", [xid, c](TapeT<S>& tp, int self) {
        const TensorT<S>& g = tp.grad_ref(self);
        TensorT<S>& dx = tp.grad_buf(xid);
        for (std::int64_t i = 0; i < g.size(); ++i) dx[i] += static_cast<S>(g[i] * c);
    });
}

template <typename S>
VarT<S> sum_all(VarT<S> x) {
    TapeT<S>& t = *x.tape;
    S total = S(0);
    for (std::int64_t i = 0; i < x.value().size(); ++i) total += x.value()[i];
    const int xid = x.id;
    return t.emit(TensorT<S>::scalar(total), {xid}, "sum", [xid](TapeT<S>& tp, int self) {
        const S g = tp.grad_ref(self)[0];
        TensorT<S>& dx = tp.grad_buf(xid);
        for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += g;
    });
}

// Weighted sum against a constant tensor: scalar sum_i w[i] * x[i].
template <typename S>
VarT<S> inner(VarT<S> x, const TensorT<S>& weights) {
    TapeT<S>& t = *x.tape;
    if (!x.value().same_shape(weights)) {
        throw DimensionError("inner shape mismatch: " + x.value().shape_str() + " vs " +
                             weights.shape_str());
    }
    S total = S(0);
    for (std::int64_t i = 0; i < weights.size(); ++i) total += x.value()[i] * weights[i];
    const int xid = x.id;
    TensorT<S> w_copy = weights;
    return t.emit(TensorT<S>::scalar(total), {xid}, "inner",
                  [xid, w_copy = std::move(w_copy)](TapeT<S>& tp, int self) {
                      const S g = tp.grad_ref(self)[0];
                      TensorT<S>& dx = tp.grad_buf(xid);
                      for (std::int64_t i = 0; i < dx.size(); ++i) dx[i] += g * w_copy[i];
                  });
}

// Rows of `m` each extended with the shared feature vector `v`:
// out[r] = [m[r], v]. Used for side-feature concatenation onto capsules.
template <typename S>
VarT<S> append_row_features(VarT<S> m, VarT<S> v) {
    TapeT<S>& t = *m.tape;
    const TensorT<S>& mv = m.value();
    const TensorT<S>& vv = v.value();
    if (mv.rank() != 2 || vv.rank() != 1) {
        throw DimensionError("append_row_features expects matrix + vector, got " +
                             mv.shape_str() + " and " + vv.shape_str());
    }
    const int r = mv.dim(0), c = mv.dim(1), f = vv.dim(0);
    TensorT<S> out({r, c + f});
    for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) out(i, j) = mv(i, j);
        for (int j = 0; j < f; ++j) out(i, c + j) = vv[j];
    }
    const int mid = m.id, vid = v.id;
    return t.emit(std::move(out), {mid, vid}, "append_row_features",
                  [mid, vid, r, c, f](TapeT<S>& tp, int self) {
                      const TensorT<S>& g = tp.grad_ref(self);
                      TensorT<S>& dm = tp.grad_buf(mid);
                      TensorT<S>& dv = tp.grad_buf(vid);
                      for (int i = 0; i < r; ++i) {
                          for (int j = 0; j < c; ++j) dm(i, j) += g(i, j);
                          for (int j = 0; j < f; ++j) dv[j] += g(i, c + j);
                      }
                  });
}

}  // namespace mixcaps
