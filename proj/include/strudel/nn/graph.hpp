#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <vector>

#include <Eigen/Core>

#include "strudel/error.hpp"
#include "strudel/nn/tensor.hpp"

namespace strudel::nn {

struct Var {
    std::size_t id = static_cast<std::size_t>(-1);
    bool valid() const noexcept { return id != static_cast<std::size_t>(-1); }
};

/// Reverse-mode tape over Tensor values. Each op appends a node holding its
/// output and, when recording, a closure that pushes the node's gradient to
/// its inputs. Parameters are leaves with a gradient sink.
template <class T>
class Graph {
public:
    using Backward = std::function<void(Var self)>;

    explicit Graph(bool record = true) : record_(record) {}

    bool recording() const noexcept { return record_; }

    Var constant(Tensor<T> value) { return push(std::move(value), false); }

    /// Leaf whose gradient is accumulated into `*sink` by backward().
    Var parameter(const Tensor<T>& value, Tensor<T>* sink) {
        Var v = push(value, record_ && sink != nullptr);
        nodes_[v.id].sink = sink;
        return v;
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return v.valid() && nodes_.at(v.id).requires_grad; }

    /// Gradient buffer of `v`, allocated on first use.
    Tensor<T>& grad(Var v) {
        auto& node = nodes_[v.id];
        if (node.grad.empty()) node.grad = Tensor<T>(node.value.n, node.value.c, node.value.h, node.value.w);
        return node.grad;
    }

    /// Appends an op output. The closure is kept only if some input needs a
    /// gradient.
    Var emit(Tensor<T> value, std::initializer_list<Var> inputs, Backward back) {
        bool needs = false;
        if (record_)
            for (Var in : inputs) needs = needs || requires_grad(in);
        Var out = push(std::move(value), needs);
        if (needs) nodes_[out.id].back = std::move(back);
        return out;
    }

    /// Seeds d(out) and runs the tape in reverse; parameter gradients are
    /// added to their sinks.
    void backward(Var out, const Tensor<T>& seed) {
        if (!record_) throw Error("nn", "backward on a non-recording graph");
        if (!seed.same_shape(value(out)))
            throw ShapeError("nn", "seed gradient " + seed.shape_string() + " vs output " + value(out).shape_string());
        grad(out) = seed;
        for (std::size_t i = out.id + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (!node.requires_grad || node.grad.empty()) continue;
            if (node.back) node.back(Var{i});
            if (node.sink) {
                auto& sink = *node.sink;
                for (std::size_t k = 0; k < sink.size(); ++k) sink.data[k] += node.grad.data[k];
            }
        }
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        Backward back;
        Tensor<T>* sink = nullptr;
        bool requires_grad = false;
    };

    Var push(Tensor<T> value, bool requires_grad) {
        nodes_.push_back(Node{std::move(value), {}, {}, nullptr, requires_grad});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool record_;
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
void im2col(const T* x, int channels, int height, int width, int k, T* col) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(height) * width;
    for (int ch = 0; ch < channels; ++ch)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                T* row = col + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
                const T* plane = x + ch * hw;
                const int dx = kx - pad;
                const int x_lo = std::max(0, -dx), x_hi = std::min(width, width - dx);
                for (int y = 0; y < height; ++y) {
                    const int sy = y + ky - pad;
                    T* dst = row + static_cast<std::size_t>(y) * width;
                    if (sy < 0 || sy >= height || x_lo >= x_hi) {
                        std::fill(dst, dst + width, T{});
                        continue;
                    }
                    const T* src = plane + static_cast<std::size_t>(sy) * width;
                    std::fill(dst, dst + x_lo, T{});
                    std::copy(src + x_lo + dx, src + x_hi + dx, dst + x_lo);
                    std::fill(dst + x_hi, dst + width, T{});
                }
            }
}

template <class T>
void col2im_add(const T* col, int channels, int height, int width, int k, T* dx_out) {
    const int pad = k / 2;
    const std::size_t hw = static_cast<std::size_t>(height) * width;
    for (int ch = 0; ch < channels; ++ch)
        for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
                const T* row = col + (static_cast<std::size_t>(ch) * k * k + ky * k + kx) * hw;
                T* plane = dx_out + ch * hw;
                const int dx = kx - pad;
                const int x_lo = std::max(0, -dx), x_hi = std::min(width, width - dx);
                for (int y = 0; y < height; ++y) {
                    const int sy = y + ky - pad;
                    if (sy < 0 || sy >= height) continue;
                    const T* src = row + static_cast<std::size_t>(y) * width;
                    T* dst = plane + static_cast<std::size_t>(sy) * width + dx;
                    for (int xx = x_lo; xx < x_hi; ++xx) dst[xx] += src[xx];
                }
            }
}

inline void require(bool ok, const char* what) {
    if (!ok) throw ShapeError("nn", what);
}

}  // namespace detail

/// Same-padded stride-1 convolution. `weight` is Co×Ci×k×k with odd k;
/// `bias` is 1×Co×1×1 or an invalid Var for no bias.
template <class T>
Var conv2d(Graph<T>& g, Var x, Var weight, Var bias = {}) {
    using M = detail::RowMat<T>;
    const auto& xv = g.value(x);
    const auto& wv = g.value(weight);
    const int co = wv.n, ci = wv.c, k = wv.h;
    detail::require(wv.h == wv.w && k % 2 == 1, "conv kernel must be square and odd");
    if (xv.c != ci)
        throw ShapeError("nn", "conv expects " + std::to_string(ci) + " input channels, got " + std::to_string(xv.c));
    const int hgt = xv.h, wid = xv.w;
    const auto hw = static_cast<Eigen::Index>(xv.plane());
    const auto ck = static_cast<Eigen::Index>(ci) * k * k;

    Tensor<T> out(xv.n, co, hgt, wid);
    // Columns are kept for the weight gradient when the tape records.
    const bool keep_cols = g.recording() && k != 1 && g.requires_grad(weight);
    const std::size_t col_size = k == 1 ? 0 : static_cast<std::size_t>(ck * hw);
    Buffer<T> cols(keep_cols ? col_size * xv.n : col_size);
    Eigen::Map<const M> wm(wv.data.data(), co, ck);
    for (int i = 0; i < xv.n; ++i) {
        const T* src = xv.sample(i);
        if (k != 1) {
            T* col = cols.data() + (keep_cols ? col_size * i : 0);
            detail::im2col(src, ci, hgt, wid, k, col);
            src = col;
        }
        Eigen::Map<const M> cm(src, ck, hw);
        Eigen::Map<M> om(out.sample(i), co, hw);
        om.noalias() = wm * cm;
        if (bias.valid()) {
            const auto& bv = g.value(bias);
            for (int o = 0; o < co; ++o) om.row(o).array() += bv.data[o];
        }
    }
    if (!keep_cols) cols = {};
    return g.emit(std::move(out), {x, weight, bias.valid() ? bias : weight},
                  [&g, x, weight, bias, k, ci, co, hgt, wid, hw, ck, col_size, cols = std::move(cols)](Var self) {
        const auto& xv = g.value(x);
        const auto& wv = g.value(weight);
        const auto& dy = g.grad(self);
        const bool need_x = g.requires_grad(x);
        const bool need_w = g.requires_grad(weight);
        const bool need_b = bias.valid() && g.requires_grad(bias);
        Eigen::Map<const M> wm(wv.data.data(), co, ck);
        Buffer<T> dcol(need_x && k != 1 ? col_size : 0);
        for (int i = 0; i < xv.n; ++i) {
            Eigen::Map<const M> dym(dy.sample(i), co, hw);
            if (need_w) {
                const T* src = k == 1 ? xv.sample(i) : cols.data() + col_size * i;
                Eigen::Map<const M> cm(src, ck, hw);
                Eigen::Map<M> dwm(g.grad(weight).data.data(), co, ck);
                dwm.noalias() += dym * cm.transpose();
            }
            if (need_b) {
                auto& db = g.grad(bias);
                for (int o = 0; o < co; ++o) db.data[o] += dym.row(o).sum();
            }
            if (need_x) {
                auto& dx = g.grad(x);
                if (k == 1) {
                    Eigen::Map<M> dxm(dx.sample(i), ck, hw);
                    dxm.noalias() += wm.transpose() * dym;
                } else {
                    Eigen::Map<M> dcm(dcol.data(), ck, hw);
                    dcm.noalias() = wm.transpose() * dym;
                    detail::col2im_add(dcol.data(), ci, hgt, wid, k, dx.sample(i));
                }
            }
        }
    });
}

template <class T>
Var relu(Graph<T>& g, Var x) {
    Tensor<T> out = g.value(x);
    for (auto& v : out.data) v = v > T{} ? v : T{};
    return g.emit(std::move(out), {x}, [&g, x](Var self) {
        const auto& y = g.value(self);
        const auto& dy = g.grad(self);
        auto& dx = g.grad(x);
        for (std::size_t i = 0; i < y.size(); ++i)
            if (y.data[i] > T{}) dx.data[i] += dy.data[i];
    });
}

template <class T>
Var sigmoid(Graph<T>& g, Var x) {
    Tensor<T> out = g.value(x);
    for (auto& v : out.data) v = T{1} / (T{1} + std::exp(-v));
    return g.emit(std::move(out), {x}, [&g, x](Var self) {
        const auto& y = g.value(self);
        const auto& dy = g.grad(self);
        auto& dx = g.grad(x);
        for (std::size_t i = 0; i < y.size(); ++i) dx.data[i] += dy.data[i] * y.data[i] * (T{1} - y.data[i]);
    });
}

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
    detail::require(g.value(a).same_shape(g.value(b)), "add operands differ in shape");
    Tensor<T> out = g.value(a);
    const auto& bv = g.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv.data[i];
    return g.emit(std::move(out), {a, b}, [&g, a, b](Var self) {
        const auto& dy = g.grad(self);
        for (Var in : {a, b}) {
            if (!g.requires_grad(in)) continue;
            auto& d = g.grad(in);
            for (std::size_t i = 0; i < dy.size(); ++i) d.data[i] += dy.data[i];
        }
    });
}

/// Element-wise maximum; ties route the gradient to `a`.
template <class T>
Var maximum(Graph<T>& g, Var a, Var b) {
    detail::require(g.value(a).same_shape(g.value(b)), "maximum operands differ in shape");
    Tensor<T> out = g.value(a);
    const auto& bv = g.value(b);
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = std::max(out.data[i], bv.data[i]);
    return g.emit(std::move(out), {a, b}, [&g, a, b](Var self) {
        const auto& av = g.value(a);
        const auto& bv = g.value(b);
        const auto& dy = g.grad(self);
        const bool need_a = g.requires_grad(a), need_b = g.requires_grad(b);
        for (std::size_t i = 0; i < dy.size(); ++i) {
            if (av.data[i] >= bv.data[i]) {
                if (need_a) g.grad(a).data[i] += dy.data[i];
            } else if (need_b) {
                g.grad(b).data[i] += dy.data[i];
            }
        }
    });
}

/// Group normalization with per-channel affine parameters (gamma, beta are 1×C×1×1).
template <class T>
Var group_norm(Graph<T>& g, Var x, Var gamma, Var beta, int groups, T eps = T(1e-5)) {
    const auto& xv = g.value(x);
    detail::require(groups > 0 && xv.c % groups == 0, "group_norm: channels not divisible by groups");
    const int cpg = xv.c / groups;
    const std::size_t m = cpg * xv.plane();
    Tensor<T> out(xv.n, xv.c, xv.h, xv.w);
    Tensor<T> xhat(xv.n, xv.c, xv.h, xv.w);
    std::vector<T> inv_std(static_cast<std::size_t>(xv.n) * groups);
    const auto& gv = g.value(gamma);
    const auto& bv = g.value(beta);
    for (int i = 0; i < xv.n; ++i)
        for (int gi = 0; gi < groups; ++gi) {
            const T* src = xv.channel(i, gi * cpg);
            double mean = 0.0;
            for (std::size_t k = 0; k < m; ++k) mean += src[k];
            mean /= static_cast<double>(m);
            double var = 0.0;
            for (std::size_t k = 0; k < m; ++k) var += (src[k] - mean) * (src[k] - mean);
            var /= static_cast<double>(m);
            const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
            inv_std[i * groups + gi] = is;
            T* xh = xhat.channel(i, gi * cpg);
            T* dst = out.channel(i, gi * cpg);
            for (int cc = 0; cc < cpg; ++cc) {
                const int ch = gi * cpg + cc;
                for (std::size_t p = 0; p < xv.plane(); ++p) {
                    const std::size_t k = cc * xv.plane() + p;
                    xh[k] = static_cast<T>((src[k] - mean) * is);
                    dst[k] = gv.data[ch] * xh[k] + bv.data[ch];
                }
            }
        }
    return g.emit(std::move(out), {x, gamma, beta},
                  [&g, x, gamma, beta, groups, cpg, m, xhat = std::move(xhat), inv_std = std::move(inv_std)](Var self) {
                      const auto& dy = g.grad(self);
                      const auto& gv = g.value(gamma);
                      const std::size_t plane = xhat.plane();
                      const bool need_x = g.requires_grad(x);
                      for (int i = 0; i < xhat.n; ++i)
                          for (int gi = 0; gi < groups; ++gi) {
                              double sum_d = 0.0, sum_dx = 0.0;
                              for (int cc = 0; cc < cpg; ++cc) {
                                  const int ch = gi * cpg + cc;
                                  const T* d = dy.channel(i, ch);
                                  const T* xh = xhat.channel(i, ch);
                                  double dg = 0.0, dbeta = 0.0;
                                  for (std::size_t p = 0; p < plane; ++p) {
                                      dg += d[p] * xh[p];
                                      dbeta += d[p];
                                      const double dxh = d[p] * gv.data[ch];
                                      sum_d += dxh;
                                      sum_dx += dxh * xh[p];
                                  }
                                  if (g.requires_grad(gamma)) g.grad(gamma).data[ch] += static_cast<T>(dg);
                                  if (g.requires_grad(beta)) g.grad(beta).data[ch] += static_cast<T>(dbeta);
                              }
                              if (!need_x) continue;
                              const double is = inv_std[i * groups + gi];
                              const double inv_m = 1.0 / static_cast<double>(m);
                              for (int cc = 0; cc < cpg; ++cc) {
                                  const int ch = gi * cpg + cc;
                                  const T* d = dy.channel(i, ch);
                                  const T* xh = xhat.channel(i, ch);
                                  T* dx = g.grad(x).channel(i, ch);
                                  for (std::size_t p = 0; p < plane; ++p) {
                                      const double dxh = d[p] * gv.data[ch];
                                      dx[p] += static_cast<T>(is * (dxh - inv_m * sum_d - xh[p] * inv_m * sum_dx));
                                  }
                              }
                          }
                  });
}

/// 2×2 max pooling, stride 2.
template <class T>
Var max_pool2(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    detail::require(xv.h % 2 == 0 && xv.w % 2 == 0, "max_pool2 needs even spatial size");
    Tensor<T> out(xv.n, xv.c, xv.h / 2, xv.w / 2);
    std::vector<std::uint32_t> arg(out.size());
    std::size_t o = 0;
    for (int i = 0; i < xv.n; ++i)
        for (int ch = 0; ch < xv.c; ++ch)
            for (int y = 0; y < out.h; ++y)
                for (int xx = 0; xx < out.w; ++xx, ++o) {
                    std::uint32_t best = 0;
                    T bestv = xv.at(i, ch, 2 * y, 2 * xx);
                    for (std::uint32_t q = 1; q < 4; ++q) {
                        const T v = xv.at(i, ch, 2 * y + q / 2, 2 * xx + q % 2);
                        if (v > bestv) {
                            bestv = v;
                            best = q;
                        }
                    }
                    out.data[o] = bestv;
                    arg[o] = best;
                }
    return g.emit(std::move(out), {x}, [&g, x, arg = std::move(arg)](Var self) {
        const auto& dy = g.grad(self);
        auto& dx = g.grad(x);
        std::size_t o = 0;
        for (int i = 0; i < dy.n; ++i)
            for (int ch = 0; ch < dy.c; ++ch)
                for (int y = 0; y < dy.h; ++y)
                    for (int xx = 0; xx < dy.w; ++xx, ++o)
                        dx.at(i, ch, 2 * y + arg[o] / 2, 2 * xx + arg[o] % 2) += dy.data[o];
    });
}

/// 2×2 average pooling, stride 2.
template <class T>
Var avg_pool2(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    detail::require(xv.h % 2 == 0 && xv.w % 2 == 0, "avg_pool2 needs even spatial size");
    Tensor<T> out(xv.n, xv.c, xv.h / 2, xv.w / 2);
    for (int i = 0; i < xv.n; ++i)
        for (int ch = 0; ch < xv.c; ++ch)
            for (int y = 0; y < out.h; ++y)
                for (int xx = 0; xx < out.w; ++xx)
                    out.at(i, ch, y, xx) = T(0.25) * (xv.at(i, ch, 2 * y, 2 * xx) + xv.at(i, ch, 2 * y, 2 * xx + 1) +
                                                      xv.at(i, ch, 2 * y + 1, 2 * xx) + xv.at(i, ch, 2 * y + 1, 2 * xx + 1));
    return g.emit(std::move(out), {x}, [&g, x](Var self) {
        const auto& dy = g.grad(self);
        auto& dx = g.grad(x);
        for (int i = 0; i < dy.n; ++i)
            for (int ch = 0; ch < dy.c; ++ch)
                for (int y = 0; y < dy.h; ++y)
                    for (int xx = 0; xx < dy.w; ++xx) {
                        const T d = T(0.25) * dy.at(i, ch, y, xx);
                        dx.at(i, ch, 2 * y, 2 * xx) += d;
                        dx.at(i, ch, 2 * y, 2 * xx + 1) += d;
                        dx.at(i, ch, 2 * y + 1, 2 * xx) += d;
                        dx.at(i, ch, 2 * y + 1, 2 * xx + 1) += d;
                    }
    });
}

/// Nearest-neighbour 2× upsampling.
template <class T>
Var upsample2(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    Tensor<T> out(xv.n, xv.c, xv.h * 2, xv.w * 2);
    for (int i = 0; i < xv.n; ++i)
        for (int ch = 0; ch < xv.c; ++ch)
            for (int y = 0; y < out.h; ++y)
                for (int xx = 0; xx < out.w; ++xx) out.at(i, ch, y, xx) = xv.at(i, ch, y / 2, xx / 2);
    return g.emit(std::move(out), {x}, [&g, x](Var self) {
        const auto& dy = g.grad(self);
        auto& dx = g.grad(x);
        for (int i = 0; i < dy.n; ++i)
            for (int ch = 0; ch < dy.c; ++ch)
                for (int y = 0; y < dy.h; ++y)
                    for (int xx = 0; xx < dy.w; ++xx) dx.at(i, ch, y / 2, xx / 2) += dy.at(i, ch, y, xx);
    });
}

/// Channel concatenation [a, b].
template <class T>
Var concat(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    detail::require(av.n == bv.n && av.h == bv.h && av.w == bv.w, "concat operands differ in batch/spatial size");
    Tensor<T> out(av.n, av.c + bv.c, av.h, av.w);
    for (int i = 0; i < av.n; ++i) {
        std::copy(av.sample(i), av.sample(i) + av.sample_size(), out.sample(i));
        std::copy(bv.sample(i), bv.sample(i) + bv.sample_size(), out.sample(i) + av.sample_size());
    }
    return g.emit(std::move(out), {a, b}, [&g, a, b](Var self) {
        const auto& dy = g.grad(self);
        const std::size_t sa = g.value(a).sample_size(), sb = g.value(b).sample_size();
        for (int i = 0; i < dy.n; ++i) {
            const T* d = dy.sample(i);
            if (g.requires_grad(a)) {
                T* da = g.grad(a).sample(i);
                for (std::size_t k = 0; k < sa; ++k) da[k] += d[k];
            }
            if (g.requires_grad(b)) {
                T* db = g.grad(b).sample(i);
                for (std::size_t k = 0; k < sb; ++k) db[k] += d[sa + k];
            }
        }
    });
}

/// Spatial (channel-wise) dropout with inverted scaling. `keep` holds one
/// 0/1 flag per (sample, channel).
template <class T>
Var channel_dropout(Graph<T>& g, Var x, const std::vector<std::uint8_t>& keep, T rate) {
    const auto& xv = g.value(x);
    detail::require(keep.size() == static_cast<std::size_t>(xv.n) * xv.c, "dropout mask size mismatch");
    const T scale = T{1} / (T{1} - rate);
    Tensor<T> out = xv;
    for (int i = 0; i < xv.n; ++i)
        for (int ch = 0; ch < xv.c; ++ch) {
            const T f = keep[i * xv.c + ch] ? scale : T{};
            T* p = out.channel(i, ch);
            for (std::size_t k = 0; k < xv.plane(); ++k) p[k] *= f;
        }
    return g.emit(std::move(out), {x}, [&g, x, keep, scale](Var self) {
        const auto& dy = g.grad(self);
        auto& dx = g.grad(x);
        for (int i = 0; i < dy.n; ++i)
            for (int ch = 0; ch < dy.c; ++ch) {
                if (!keep[i * dy.c + ch]) continue;
                const T* d = dy.channel(i, ch);
                T* p = dx.channel(i, ch);
                for (std::size_t k = 0; k < dy.plane(); ++k) p[k] += scale * d[k];
            }
    });
}

/// Global average pooling to N×C×1×1.
template <class T>
Var global_avg_pool(Graph<T>& g, Var x) {
    const auto& xv = g.value(x);
    Tensor<T> out(xv.n, xv.c, 1, 1);
    const T inv = T{1} / static_cast<T>(xv.plane());
    for (int i = 0; i < xv.n; ++i)
        for (int ch = 0; ch < xv.c; ++ch) {
            const T* p = xv.channel(i, ch);
            T s{};
            for (std::size_t k = 0; k < xv.plane(); ++k) s += p[k];
            out.at(i, ch, 0, 0) = s * inv;
        }
    return g.emit(std::move(out), {x}, [&g, x, inv](Var self) {
        const auto& dy = g.grad(self);
        auto& dx = g.grad(x);
        for (int i = 0; i < dx.n; ++i)
            for (int ch = 0; ch < dx.c; ++ch) {
                const T d = dy.at(i, ch, 0, 0) * inv;
                T* p = dx.channel(i, ch);
                for (std::size_t k = 0; k < dx.plane(); ++k) p[k] += d;
            }
    });
}

/// x (N×C×H×W) scaled by a gate broadcast from N×C×1×1 or N×1×H×W.
template <class T>
Var gate(Graph<T>& g, Var x, Var s) {
    const auto& xv = g.value(x);
    const auto& sv = g.value(s);
    const bool per_channel = sv.h == 1 && sv.w == 1 && sv.c == xv.c;
    const bool per_pixel = sv.c == 1 && sv.h == xv.h && sv.w == xv.w;
    detail::require(sv.n == xv.n && (per_channel || per_pixel), "gate shape must be N×C×1×1 or N×1×H×W");
    auto gate_at = [per_channel](const Tensor<T>& gv, int i, int ch, std::size_t p) {
        return per_channel ? gv.at(i, ch, 0, 0) : gv.sample(i)[p];
    };
    Tensor<T> out = xv;
    for (int i = 0; i < xv.n; ++i)
        for (int ch = 0; ch < xv.c; ++ch) {
            T* o = out.channel(i, ch);
            for (std::size_t p = 0; p < xv.plane(); ++p) o[p] *= gate_at(sv, i, ch, p);
        }
    return g.emit(std::move(out), {x, s}, [&g, x, s, gate_at, per_channel](Var self) {
        const auto& xv = g.value(x);
        const auto& sv = g.value(s);
        const auto& dy = g.grad(self);
        const bool need_x = g.requires_grad(x), need_s = g.requires_grad(s);
        for (int i = 0; i < xv.n; ++i)
            for (int ch = 0; ch < xv.c; ++ch) {
                const T* d = dy.channel(i, ch);
                const T* xp = xv.channel(i, ch);
                for (std::size_t p = 0; p < xv.plane(); ++p) {
                    if (need_x) g.grad(x).channel(i, ch)[p] += d[p] * gate_at(sv, i, ch, p);
                    if (need_s) {
                        if (per_channel)
                            g.grad(s).at(i, ch, 0, 0) += d[p] * xp[p];
                        else
                            g.grad(s).sample(i)[p] += d[p] * xp[p];
                    }
                }
            }
    });
}

}  // namespace strudel::nn
