#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "signdiff/tensor.hpp"

namespace signdiff {

namespace detail {

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1)
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                        shape_str(b) + " do not broadcast");
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Row-major strides with 0 on broadcast axes, right-aligned against out_rank.
inline std::vector<std::size_t> broadcast_strides(const Shape& s, std::size_t out_rank) {
    std::vector<std::size_t> strides(out_rank, 0);
    std::size_t stride = 1;
    for (std::size_t i = 0; i < s.size(); ++i) {
        std::size_t axis = s.size() - 1 - i;
        std::size_t out_axis = out_rank - 1 - i;
        strides[out_axis] = (s[axis] == 1) ? 0 : stride;
        stride *= s[axis];
    }
    return strides;
}

// Applies f(a_elem, b_elem) over the broadcast of two tensors.
template <typename T, typename F>
Tensor<T> broadcast_binary(const Tensor<T>& a, const Tensor<T>& b, const char* op, F f) {
    if (a.same_shape(b)) {
        Tensor<T> out(a.shape());
        const T* pa = a.data();
        const T* pb = b.data();
        T* po = out.data();
        for (std::size_t i = 0; i < out.size(); ++i) po[i] = f(pa[i], pb[i]);
        return out;
    }
    Shape os = broadcast_shapes(a.shape(), b.shape(), op);
    Tensor<T> out(os);
    std::size_t rank = os.size();
    auto sa = broadcast_strides(a.shape(), rank);
    auto sb = broadcast_strides(b.shape(), rank);
    std::vector<std::size_t> idx(rank, 0);
    std::size_t offa = 0, offb = 0;
    T* po = out.data();
    const T* pa = a.data();
    const T* pb = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        po[i] = f(pa[offa], pb[offb]);
        for (std::size_t d = rank; d-- > 0;) {
            if (++idx[d] < os[d]) {
                offa += sa[d];
                offb += sb[d];
                break;
            }
            idx[d] = 0;
            offa -= sa[d] * (os[d] - 1);
            offb -= sb[d] * (os[d] - 1);
        }
    }
    return out;
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& t, std::size_t axis, bool keepdim) {
    const Shape& s = t.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    Shape os;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i == axis) {
            if (keepdim) os.push_back(1);
        } else {
            os.push_back(s[i]);
        }
    }
    if (os.empty()) os.push_back(1);
    Tensor<T> out(os);
    const T* p = t.data();
    T* po = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < s[axis]; ++k) {
            const T* row = p + (o * s[axis] + k) * inner;
            T* orow = po + o * inner;
            for (std::size_t i = 0; i < inner; ++i) orow[i] += row[i];
        }
    return out;
}

// Sums a gradient over broadcast axes so it matches the operand's shape.
template <typename T>
Tensor<T> reduce_to_shape(Tensor<T> g, const Shape& target) {
    while (g.rank() > target.size()) g = sum_axis(g, 0, /*keepdim=*/false);
    for (std::size_t i = 0; i < target.size(); ++i)
        if (target[i] == 1 && g.shape()[i] != 1) g = sum_axis(g, i, /*keepdim=*/true);
    if (g.shape() != target)
        throw std::logic_error("reduce_to_shape: " + shape_str(g.shape()) + " vs " + shape_str(target));
    return g;
}

template <typename T>
using EMat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using CEMat = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

}  // namespace detail

// Reverse-mode autodiff tape over Tensor<T>. Ops evaluate eagerly and record
// a node; creation order is the topological order used by backward(). A graph
// instance is single-owner; rebuild (or reset()) per training step.
template <typename T>
class Graph {
public:
    struct Value {
        int id = -1;
        bool valid() const { return id >= 0; }
    };

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    void reset() {
        nodes_.clear();
        params_.clear();
    }

    std::size_t num_nodes() const { return nodes_.size(); }

    // ---- leaves ----

    Value input(Tensor<T> t) {
        bool req = t.requires_grad;
        return push("input", {}, std::move(t), req, nullptr);
    }

    Value constant(Tensor<T> t) {
        t.requires_grad = false;
        return push("const", {}, std::move(t), false, nullptr);
    }

    Value zeros(Shape shape) { return constant(Tensor<T>::zeros(std::move(shape))); }

    // Named trainable leaf. Registering the same name again returns the
    // existing node (weight sharing within one graph build).
    Value param(const std::string& name, const Tensor<T>& t) {
        auto it = params_.find(name);
        if (it != params_.end()) {
            if (nodes_[it->second].value.shape() != t.shape())
                throw std::invalid_argument("param '" + name + "': shape changed within one graph");
            return Value{it->second};
        }
        Tensor<T> copy = t;
        copy.requires_grad = true;
        Value v = push("param", {}, std::move(copy), true, nullptr);
        params_.emplace(name, v.id);
        return v;
    }

    // ---- elementwise / broadcasting ----

    Value add(Value a, Value b) { return binary_op("add", a, b, [](T x, T y) { return x + y; }, T(1), T(1)); }
    Value sub(Value a, Value b) { return binary_op("sub", a, b, [](T x, T y) { return x - y; }, T(1), T(-1)); }

    Value mul(Value a, Value b) {
        const Tensor<T>& ta = val(a, "mul");
        const Tensor<T>& tb = val(b, "mul");
        Tensor<T> out = detail::broadcast_binary(ta, tb, "mul", [](T x, T y) { return x * y; });
        return push("mul", {a.id, b.id}, std::move(out), requires(a) || requires(b),
                    [a, b](Graph& g, int self) {
                        const Tensor<T>& go = g.nodes_[self].grad;
                        if (g.requires(a)) {
                            Tensor<T> ga = detail::broadcast_binary(go, g.nodes_[b.id].value, "mul",
                                                                    [](T x, T y) { return x * y; });
                            g.accum(a.id, detail::reduce_to_shape(std::move(ga), g.nodes_[a.id].value.shape()));
                        }
                        if (g.requires(b)) {
                            Tensor<T> gb = detail::broadcast_binary(go, g.nodes_[a.id].value, "mul",
                                                                    [](T x, T y) { return x * y; });
                            g.accum(b.id, detail::reduce_to_shape(std::move(gb), g.nodes_[b.id].value.shape()));
                        }
                    });
    }

    Value scale(Value a, T s) {
        Tensor<T> out = val(a, "scale");
        for (T& v : out.vec()) v *= s;
        out.requires_grad = false;
        return push("scale", {a.id}, std::move(out), requires(a), [a, s](Graph& g, int self) {
            if (!g.requires(a)) return;
            Tensor<T> ga = g.nodes_[self].grad;
            for (T& v : ga.vec()) v *= s;
            g.accum(a.id, std::move(ga));
        });
    }

    Value gelu(Value a) {
        const Tensor<T>& ta = val(a, "gelu");
        Tensor<T> out(ta.shape());
        for (std::size_t i = 0; i < ta.size(); ++i) {
            double x = static_cast<double>(ta[i]);
            out[i] = static_cast<T>(x * normal_cdf(x));
        }
        return push("gelu", {a.id}, std::move(out), requires(a), [a](Graph& g, int self) {
            if (!g.requires(a)) return;
            const Tensor<T>& x = g.nodes_[a.id].value;
            const Tensor<T>& go = g.nodes_[self].grad;
            Tensor<T> ga(x.shape());
            for (std::size_t i = 0; i < x.size(); ++i) {
                double xv = static_cast<double>(x[i]);
                double d = normal_cdf(xv) + xv * normal_pdf(xv);
                ga[i] = static_cast<T>(static_cast<double>(go[i]) * d);
            }
            g.accum(a.id, std::move(ga));
        });
    }

    // ---- linear algebra ----

    Value matmul(Value a, Value b) {
        const Tensor<T>& ta = val(a, "matmul");
        const Tensor<T>& tb = val(b, "matmul");
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0])
            throw std::invalid_argument(op_err("matmul", a, b));
        std::size_t m = ta.shape()[0], k = ta.shape()[1], n = tb.shape()[1];
        Tensor<T> out(Shape{m, n});
        detail::EMat<T>(out.data(), m, n).noalias() =
            detail::CEMat<T>(ta.data(), m, k) * detail::CEMat<T>(tb.data(), k, n);
        return push("matmul", {a.id, b.id}, std::move(out), requires(a) || requires(b),
                    [a, b, m, k, n](Graph& g, int self) {
                        detail::CEMat<T> go(g.nodes_[self].grad.data(), m, n);
                        if (g.requires(a)) {
                            Tensor<T> ga(Shape{m, k});
                            detail::EMat<T>(ga.data(), m, k).noalias() =
                                go * detail::CEMat<T>(g.nodes_[b.id].value.data(), k, n).transpose();
                            g.accum(a.id, std::move(ga));
                        }
                        if (g.requires(b)) {
                            Tensor<T> gb(Shape{k, n});
                            detail::EMat<T>(gb.data(), k, n).noalias() =
                                detail::CEMat<T>(g.nodes_[a.id].value.data(), m, k).transpose() * go;
                            g.accum(b.id, std::move(gb));
                        }
                    });
    }

    // Batched matmul: (..., m, k) x (..., k, n) with identical leading dims.
    Value bmm(Value a, Value b) {
        const Tensor<T>& ta = val(a, "bmm");
        const Tensor<T>& tb = val(b, "bmm");
        if (ta.rank() < 3 || ta.rank() != tb.rank()) throw std::invalid_argument(op_err("bmm", a, b));
        std::size_t r = ta.rank();
        std::size_t batch = 1;
        for (std::size_t i = 0; i < r - 2; ++i) {
            if (ta.shape()[i] != tb.shape()[i]) throw std::invalid_argument(op_err("bmm", a, b));
            batch *= ta.shape()[i];
        }
        std::size_t m = ta.shape()[r - 2], k = ta.shape()[r - 1];
        if (tb.shape()[r - 2] != k) throw std::invalid_argument(op_err("bmm", a, b));
        std::size_t n = tb.shape()[r - 1];
        Shape os(ta.shape());
        os[r - 2] = m;
        os[r - 1] = n;
        Tensor<T> out(os);
        for (std::size_t i = 0; i < batch; ++i)
            detail::EMat<T>(out.data() + i * m * n, m, n).noalias() =
                detail::CEMat<T>(ta.data() + i * m * k, m, k) *
                detail::CEMat<T>(tb.data() + i * k * n, k, n);
        return push("bmm", {a.id, b.id}, std::move(out), requires(a) || requires(b),
                    [a, b, batch, m, k, n](Graph& g, int self) {
                        const Tensor<T>& go = g.nodes_[self].grad;
                        if (g.requires(a)) {
                            Tensor<T> ga(g.nodes_[a.id].value.shape());
                            for (std::size_t i = 0; i < batch; ++i)
                                detail::EMat<T>(ga.data() + i * m * k, m, k).noalias() =
                                    detail::CEMat<T>(go.data() + i * m * n, m, n) *
                                    detail::CEMat<T>(g.nodes_[b.id].value.data() + i * k * n, k, n).transpose();
                            g.accum(a.id, std::move(ga));
                        }
                        if (g.requires(b)) {
                            Tensor<T> gb(g.nodes_[b.id].value.shape());
                            for (std::size_t i = 0; i < batch; ++i)
                                detail::EMat<T>(gb.data() + i * k * n, k, n).noalias() =
                                    detail::CEMat<T>(g.nodes_[a.id].value.data() + i * m * k, m, k).transpose() *
                                    detail::CEMat<T>(go.data() + i * m * n, m, n);
                            g.accum(b.id, std::move(gb));
                        }
                    });
    }

    // ---- shape ops ----

    Value reshape(Value a, Shape shape) {
        const Tensor<T>& ta = val(a, "reshape");
        if (shape_numel(shape) != ta.size())
            throw std::invalid_argument("reshape: " + shape_str(ta.shape()) + " -> " + shape_str(shape) +
                                        " changes element count (node " + std::to_string(a.id) + ")");
        Tensor<T> out(shape, ta.vec());
        return push("reshape", {a.id}, std::move(out), requires(a), [a](Graph& g, int self) {
            if (!g.requires(a)) return;
            Tensor<T> ga(g.nodes_[a.id].value.shape(), g.nodes_[self].grad.vec());
            g.accum(a.id, std::move(ga));
        });
    }

    Value permute(Value a, std::vector<std::size_t> axes) {
        const Tensor<T>& ta = val(a, "permute");
        if (axes.size() != ta.rank()) throw std::invalid_argument("permute: axes rank mismatch");
        Tensor<T> out = permute_tensor(ta, axes);
        return push("permute", {a.id}, std::move(out), requires(a), [a, axes](Graph& g, int self) {
            if (!g.requires(a)) return;
            std::vector<std::size_t> inv(axes.size());
            for (std::size_t i = 0; i < axes.size(); ++i) inv[axes[i]] = i;
            g.accum(a.id, permute_tensor(g.nodes_[self].grad, inv));
        });
    }

    Value transpose_last2(Value a) {
        const Tensor<T>& ta = val(a, "transpose_last2");
        if (ta.rank() < 2) throw std::invalid_argument("transpose_last2: rank < 2");
        std::vector<std::size_t> axes(ta.rank());
        for (std::size_t i = 0; i < ta.rank(); ++i) axes[i] = i;
        std::swap(axes[ta.rank() - 1], axes[ta.rank() - 2]);
        return permute(a, axes);
    }

    Value slice(Value a, std::size_t axis, std::size_t start, std::size_t len) {
        const Tensor<T>& ta = val(a, "slice");
        if (axis >= ta.rank() || start + len > ta.shape()[axis] || len == 0)
            throw std::invalid_argument("slice: range [" + std::to_string(start) + "," +
                                        std::to_string(start + len) + ") invalid for axis " +
                                        std::to_string(axis) + " of " + shape_str(ta.shape()));
        auto [outer, inner] = outer_inner(ta.shape(), axis);
        Shape os(ta.shape());
        os[axis] = len;
        Tensor<T> out(os);
        std::size_t ax = ta.shape()[axis];
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(ta.data() + (o * ax + start) * inner, len * inner,
                        out.data() + o * len * inner);
        return push("slice", {a.id}, std::move(out), requires(a),
                    [a, axis, start, len](Graph& g, int self) {
                        if (!g.requires(a)) return;
                        const Tensor<T>& src = g.nodes_[a.id].value;
                        auto [outer, inner] = outer_inner(src.shape(), axis);
                        std::size_t ax = src.shape()[axis];
                        Tensor<T> ga(src.shape());
                        const Tensor<T>& go = g.nodes_[self].grad;
                        for (std::size_t o = 0; o < outer; ++o)
                            std::copy_n(go.data() + o * len * inner, len * inner,
                                        ga.data() + (o * ax + start) * inner);
                        g.accum(a.id, std::move(ga));
                    });
    }

    Value concat(const std::vector<Value>& xs, std::size_t axis) {
        if (xs.empty()) throw std::invalid_argument("concat: no inputs");
        const Tensor<T>& first = val(xs[0], "concat");
        Shape os(first.shape());
        if (axis >= os.size()) throw std::invalid_argument("concat: bad axis");
        std::size_t total = 0;
        bool req = false;
        std::vector<int> parents;
        for (Value v : xs) {
            const Tensor<T>& tv = val(v, "concat");
            if (tv.rank() != first.rank()) throw std::invalid_argument("concat: rank mismatch");
            for (std::size_t i = 0; i < os.size(); ++i)
                if (i != axis && tv.shape()[i] != first.shape()[i])
                    throw std::invalid_argument("concat: shape mismatch at node " + std::to_string(v.id) +
                                                ": " + shape_str(tv.shape()) + " vs " + shape_str(first.shape()));
            total += tv.shape()[axis];
            req = req || requires(v);
            parents.push_back(v.id);
        }
        os[axis] = total;
        Tensor<T> out(os);
        auto [outer, inner] = outer_inner(os, axis);
        std::size_t written = 0;
        for (Value v : xs) {
            const Tensor<T>& tv = nodes_[v.id].value;
            std::size_t ax = tv.shape()[axis];
            for (std::size_t o = 0; o < outer; ++o)
                std::copy_n(tv.data() + o * ax * inner, ax * inner,
                            out.data() + (o * total + written) * inner);
            written += ax;
        }
        std::vector<Value> vs = xs;
        return push("concat", parents, std::move(out), req, [vs, axis, total](Graph& g, int self) {
            const Tensor<T>& go = g.nodes_[self].grad;
            auto [outer, inner] = outer_inner(go.shape(), axis);
            std::size_t offset = 0;
            for (Value v : vs) {
                const Tensor<T>& tv = g.nodes_[v.id].value;
                std::size_t ax = tv.shape()[axis];
                if (g.requires(v)) {
                    Tensor<T> ga(tv.shape());
                    for (std::size_t o = 0; o < outer; ++o)
                        std::copy_n(go.data() + (o * total + offset) * inner, ax * inner,
                                    ga.data() + o * ax * inner);
                    g.accum(v.id, std::move(ga));
                }
                offset += ax;
            }
        });
    }

    // Row gather: table (V, C), ids in [0, V) -> (ids.size(), C).
    Value embedding(Value table, std::vector<std::int64_t> ids) {
        const Tensor<T>& tt = val(table, "embedding");
        if (tt.rank() != 2) throw std::invalid_argument("embedding: table must be 2-D");
        std::size_t v = tt.shape()[0], c = tt.shape()[1];
        for (std::int64_t id : ids)
            if (id < 0 || static_cast<std::size_t>(id) >= v)
                throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range [0," +
                                            std::to_string(v) + ")");
        Tensor<T> out(Shape{ids.size(), c});
        for (std::size_t i = 0; i < ids.size(); ++i)
            std::copy_n(tt.data() + static_cast<std::size_t>(ids[i]) * c, c, out.data() + i * c);
        return push("embedding", {table.id}, std::move(out), requires(table),
                    [table, ids, c](Graph& g, int self) {
                        if (!g.requires(table)) return;
                        Tensor<T> ga(g.nodes_[table.id].value.shape());
                        const Tensor<T>& go = g.nodes_[self].grad;
                        for (std::size_t i = 0; i < ids.size(); ++i) {
                            T* dst = ga.data() + static_cast<std::size_t>(ids[i]) * c;
                            const T* src = go.data() + i * c;
                            for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                        }
                        g.accum(table.id, std::move(ga));
                    });
    }

    // ---- normalization / activations over the last axis ----

    Value softmax(Value a) {
        const Tensor<T>& ta = val(a, "softmax");
        std::size_t c = last_extent(ta, "softmax");
        std::size_t rows = ta.size() / c;
        Tensor<T> out(ta.shape());
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = ta.data() + r * c;
            T* y = out.data() + r * c;
            T mx = x[0];
            for (std::size_t i = 1; i < c; ++i) mx = std::max(mx, x[i]);
            double denom = 0;
            for (std::size_t i = 0; i < c; ++i) {
                double e = std::exp(static_cast<double>(x[i] - mx));
                y[i] = static_cast<T>(e);
                denom += e;
            }
            for (std::size_t i = 0; i < c; ++i) y[i] = static_cast<T>(static_cast<double>(y[i]) / denom);
        }
        return push("softmax", {a.id}, std::move(out), requires(a), [a, c](Graph& g, int self) {
            if (!g.requires(a)) return;
            const Tensor<T>& y = g.nodes_[self].value;
            const Tensor<T>& go = g.nodes_[self].grad;
            Tensor<T> ga(y.shape());
            std::size_t rows = y.size() / c;
            for (std::size_t r = 0; r < rows; ++r) {
                const T* yv = y.data() + r * c;
                const T* gv = go.data() + r * c;
                T* out = ga.data() + r * c;
                double dot = 0;
                for (std::size_t i = 0; i < c; ++i) dot += static_cast<double>(gv[i]) * yv[i];
                for (std::size_t i = 0; i < c; ++i)
                    out[i] = static_cast<T>(yv[i] * (static_cast<double>(gv[i]) - dot));
            }
            g.accum(a.id, std::move(ga));
        });
    }

    // Normalizes the last axis to zero mean / unit variance (no affine part).
    Value layer_norm(Value a, double eps) {
        const Tensor<T>& ta = val(a, "layer_norm");
        std::size_t c = last_extent(ta, "layer_norm");
        std::size_t rows = ta.size() / c;
        Tensor<T> out(ta.shape());
        std::vector<double> inv_std(rows);
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = ta.data() + r * c;
            T* y = out.data() + r * c;
            double mean = 0;
            for (std::size_t i = 0; i < c; ++i) mean += static_cast<double>(x[i]);
            mean /= static_cast<double>(c);
            double var = 0;
            for (std::size_t i = 0; i < c; ++i) {
                double d = static_cast<double>(x[i]) - mean;
                var += d * d;
            }
            var /= static_cast<double>(c);
            double inv = 1.0 / std::sqrt(var + eps);
            inv_std[r] = inv;
            for (std::size_t i = 0; i < c; ++i)
                y[i] = static_cast<T>((static_cast<double>(x[i]) - mean) * inv);
        }
        return push("layer_norm", {a.id}, std::move(out), requires(a),
                    [a, c, inv_std](Graph& g, int self) {
                        if (!g.requires(a)) return;
                        const Tensor<T>& y = g.nodes_[self].value;
                        const Tensor<T>& go = g.nodes_[self].grad;
                        Tensor<T> ga(y.shape());
                        std::size_t rows = y.size() / c;
                        for (std::size_t r = 0; r < rows; ++r) {
                            const T* yv = y.data() + r * c;
                            const T* gv = go.data() + r * c;
                            T* out = ga.data() + r * c;
                            double mg = 0, mgy = 0;
                            for (std::size_t i = 0; i < c; ++i) {
                                mg += static_cast<double>(gv[i]);
                                mgy += static_cast<double>(gv[i]) * yv[i];
                            }
                            mg /= static_cast<double>(c);
                            mgy /= static_cast<double>(c);
                            for (std::size_t i = 0; i < c; ++i)
                                out[i] = static_cast<T>(inv_std[r] *
                                                        (static_cast<double>(gv[i]) - mg - yv[i] * mgy));
                        }
                        g.accum(a.id, std::move(ga));
                    });
    }

    // ---- reductions / losses ----

    Value sum(Value a) {
        const Tensor<T>& ta = val(a, "sum");
        double s = 0;
        for (const T& v : ta.vec()) s += static_cast<double>(v);
        return push("sum", {a.id}, Tensor<T>::scalar(static_cast<T>(s)), requires(a),
                    [a](Graph& g, int self) {
                        if (!g.requires(a)) return;
                        T go = g.nodes_[self].grad[0];
                        g.accum(a.id, Tensor<T>::full(g.nodes_[a.id].value.shape(), go));
                    });
    }

    Value mean(Value a) {
        const Tensor<T>& ta = val(a, "mean");
        return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(ta.size())));
    }

    Value mse(Value a, Value b) {
        const Tensor<T>& ta = val(a, "mse");
        const Tensor<T>& tb = val(b, "mse");
        if (!ta.same_shape(tb)) throw std::invalid_argument(op_err("mse", a, b));
        double s = 0;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            double d = static_cast<double>(ta[i]) - static_cast<double>(tb[i]);
            s += d * d;
        }
        s /= static_cast<double>(ta.size());
        return push("mse", {a.id, b.id}, Tensor<T>::scalar(static_cast<T>(s)),
                    requires(a) || requires(b), [a, b](Graph& g, int self) {
                        const Tensor<T>& ta = g.nodes_[a.id].value;
                        const Tensor<T>& tb = g.nodes_[b.id].value;
                        double go = static_cast<double>(g.nodes_[self].grad[0]);
                        double k = 2.0 * go / static_cast<double>(ta.size());
                        if (g.requires(a)) {
                            Tensor<T> ga(ta.shape());
                            for (std::size_t i = 0; i < ta.size(); ++i)
                                ga[i] = static_cast<T>(k * (static_cast<double>(ta[i]) - tb[i]));
                            g.accum(a.id, std::move(ga));
                        }
                        if (g.requires(b)) {
                            Tensor<T> gb(tb.shape());
                            for (std::size_t i = 0; i < tb.size(); ++i)
                                gb[i] = static_cast<T>(-k * (static_cast<double>(ta[i]) - tb[i]));
                            g.accum(b.id, std::move(gb));
                        }
                    });
    }

    // Mean NLL over rows of (B, K) logits; stable log-softmax inside.
    Value cross_entropy(Value logits, std::vector<int> labels) {
        const Tensor<T>& tl = val(logits, "cross_entropy");
        if (tl.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be (B, K)");
        std::size_t b = tl.shape()[0], k = tl.shape()[1];
        if (labels.size() != b) throw std::invalid_argument("cross_entropy: label count mismatch");
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= k)
                throw std::invalid_argument("cross_entropy: label out of range");
        double loss = 0;
        for (std::size_t r = 0; r < b; ++r) {
            const T* x = tl.data() + r * k;
            double mx = static_cast<double>(x[0]);
            for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(x[i]));
            double denom = 0;
            for (std::size_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(x[i]) - mx);
            loss += mx + std::log(denom) - static_cast<double>(x[labels[r]]);
        }
        loss /= static_cast<double>(b);
        return push("cross_entropy", {logits.id}, Tensor<T>::scalar(static_cast<T>(loss)),
                    requires(logits), [logits, labels, b, k](Graph& g, int self) {
                        if (!g.requires(logits)) return;
                        const Tensor<T>& tl = g.nodes_[logits.id].value;
                        double go = static_cast<double>(g.nodes_[self].grad[0]);
                        Tensor<T> ga(tl.shape());
                        for (std::size_t r = 0; r < b; ++r) {
                            const T* x = tl.data() + r * k;
                            T* out = ga.data() + r * k;
                            double mx = static_cast<double>(x[0]);
                            for (std::size_t i = 1; i < k; ++i) mx = std::max(mx, static_cast<double>(x[i]));
                            double denom = 0;
                            for (std::size_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(x[i]) - mx);
                            for (std::size_t i = 0; i < k; ++i) {
                                double p = std::exp(static_cast<double>(x[i]) - mx) / denom;
                                double onehot = (static_cast<std::size_t>(labels[r]) == i) ? 1.0 : 0.0;
                                out[i] = static_cast<T>(go * (p - onehot) / static_cast<double>(b));
                            }
                        }
                        g.accum(logits.id, std::move(ga));
                    });
    }

    // ---- evaluation / backward ----

    const Tensor<T>& value(Value v) const { return nodes_.at(v.id).value; }

    void backward(Value loss) {
        if (!loss.valid() || static_cast<std::size_t>(loss.id) >= nodes_.size())
            throw std::invalid_argument("backward: invalid loss node");
        if (nodes_[loss.id].value.size() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " +
                                        shape_str(nodes_[loss.id].value.shape()));
        for (auto& n : nodes_) n.grad = Tensor<T>();
        nodes_[loss.id].grad = Tensor<T>::scalar(T(1));
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
            n.backward(*this, id);
        }
        ran_backward_ = true;
    }

    // Gradient of a node; zeros if nothing flowed into it.
    Tensor<T> grad(Value v) const {
        const Node& n = nodes_.at(v.id);
        if (n.grad.size() == 0) return Tensor<T>::zeros(n.value.shape());
        return n.grad;
    }

    Tensor<T> grad_by_name(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::invalid_argument("grad_by_name: unknown param '" + name + "'");
        return grad(Value{it->second});
    }

    bool has_param(const std::string& name) const { return params_.count(name) > 0; }

    // Gradients for every registered param, in name order.
    std::map<std::string, Tensor<T>> named_grads() const {
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, id] : params_) out.emplace(name, grad(Value{id}));
        return out;
    }

private:
    struct Node {
        const char* op;
        std::vector<int> parents;
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        std::function<void(Graph&, int)> backward;
    };

    static double normal_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)); }
    static double normal_pdf(double x) { return 0.3989422804014326779 * std::exp(-0.5 * x * x); }

    static std::pair<std::size_t, std::size_t> outer_inner(const Shape& s, std::size_t axis) {
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
        for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
        return {outer, inner};
    }

    static Tensor<T> permute_tensor(const Tensor<T>& t, const std::vector<std::size_t>& axes) {
        Shape os(t.rank());
        for (std::size_t i = 0; i < axes.size(); ++i) os[i] = t.shape()[axes[i]];
        Tensor<T> out(os);
        std::vector<std::size_t> in_strides(t.rank(), 1);
        for (std::size_t i = t.rank() - 1; i > 0; --i)
            in_strides[i - 1] = in_strides[i] * t.shape()[i];
        std::vector<std::size_t> perm_strides(t.rank());
        for (std::size_t i = 0; i < axes.size(); ++i) perm_strides[i] = in_strides[axes[i]];
        std::vector<std::size_t> idx(t.rank(), 0);
        std::size_t off = 0;
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = t[off];
            for (std::size_t d = t.rank(); d-- > 0;) {
                if (++idx[d] < os[d]) {
                    off += perm_strides[d];
                    break;
                }
                idx[d] = 0;
                off -= perm_strides[d] * (os[d] - 1);
            }
        }
        return out;
    }

    std::size_t last_extent(const Tensor<T>& t, const char* op) const {
        if (t.rank() == 0) throw std::invalid_argument(std::string(op) + ": rank-0 input");
        return t.shape()[t.rank() - 1];
    }

    const Tensor<T>& val(Value v, const char* op) const {
        if (!v.valid() || static_cast<std::size_t>(v.id) >= nodes_.size())
            throw std::invalid_argument(std::string(op) + ": invalid value handle");
        return nodes_[v.id].value;
    }

    bool requires(Value v) const { return nodes_[v.id].requires_grad; }

    std::string op_err(const char* op, Value a, Value b) const {
        return std::string(op) + ": incompatible shapes " + shape_str(nodes_[a.id].value.shape()) +
               " and " + shape_str(nodes_[b.id].value.shape()) + " (nodes " + std::to_string(a.id) +
               ", " + std::to_string(b.id) + ")";
    }

    template <typename F>
    Value binary_op(const char* op, Value a, Value b, F f, T ca, T cb) {
        const Tensor<T>& ta = val(a, op);
        const Tensor<T>& tb = val(b, op);
        Tensor<T> out = detail::broadcast_binary(ta, tb, op, f);
        return push(op, {a.id, b.id}, std::move(out), requires(a) || requires(b),
                    [a, b, ca, cb](Graph& g, int self) {
                        const Tensor<T>& go = g.nodes_[self].grad;
                        if (g.requires(a)) {
                            Tensor<T> ga = go;
                            if (ca != T(1))
                                for (T& v : ga.vec()) v *= ca;
                            g.accum(a.id, detail::reduce_to_shape(std::move(ga), g.nodes_[a.id].value.shape()));
                        }
                        if (g.requires(b)) {
                            Tensor<T> gb = go;
                            if (cb != T(1))
                                for (T& v : gb.vec()) v *= cb;
                            g.accum(b.id, detail::reduce_to_shape(std::move(gb), g.nodes_[b.id].value.shape()));
                        }
                    });
    }

    Value push(const char* op, std::vector<int> parents, Tensor<T> value, bool req,
               std::function<void(Graph&, int)> backward) {
        Node n;
        n.op = op;
        n.parents = std::move(parents);
        n.value = std::move(value);
        n.requires_grad = req;
        n.backward = std::move(backward);
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    void accum(int id, Tensor<T> g) {
        Node& n = nodes_[id];
        if (n.grad.size() == 0) {
            n.grad = std::move(g);
            return;
        }
        if (!n.grad.same_shape(g)) throw std::logic_error("grad accumulation shape mismatch");
        T* dst = n.grad.data();
        const T* src = g.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += src[i];
    }

    std::vector<Node> nodes_;
    std::map<std::string, int> params_;
};

}  // namespace signdiff
