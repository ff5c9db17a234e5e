// Copyright (c) 2026 mreid authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace mreid {

/// Global toggle for NaN/Inf screening of op outputs and gradients.
/// On by default; every non-finite value is treated as a hard error.
inline bool& finite_checks_enabled() {
    static bool on = true;
    return on;
}

/// Thread-local autograd switch. Inference paths disable taping via NoGradGuard.
inline bool& grad_mode() {
    thread_local bool on = true;
    return on;
}

struct NoGradGuard {
    NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
    ~NoGradGuard() { grad_mode() = prev_; }

private:
    bool prev_;
};

template <typename T>
void check_finite(const std::vector<T>& v, const char* what) {
    if (!finite_checks_enabled()) return;
    for (const T x : v) {
        if (!std::isfinite(static_cast<double>(x))) {
            throw std::runtime_error(std::string("non-finite value produced by ") + what);
        }
    }
}

/// Dense N-dimensional array with a reverse-mode gradient tape.
///
/// A Tensor is a cheap handle onto a shared node. Ops build the tape whenever
/// any input requires a gradient and grad mode is on; Tensor::backward() runs
/// the tape in reverse topological order. Gradients accumulate until zeroed.
template <typename T>
class Tensor {
    struct Node {
        std::vector<int> shape;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;  // scatters node.grad into parents

        std::int64_t size() const {
            std::int64_t n = 1;
            for (int d : shape) n *= d;
            return n;
        }
        void ensure_grad() {
            if (grad.empty()) grad.assign(values.size(), T(0));
        }
    };

public:
    Tensor() : node_(std::make_shared<Node>()) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        Tensor t;
        validate_shape(shape);
        t.node_->shape = std::move(shape);
        t.node_->values.assign(static_cast<std::size_t>(t.node_->size()), T(0));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor full(std::vector<int> shape, T value, bool requires_grad = false) {
        Tensor t = zeros(std::move(shape), requires_grad);
        std::fill(t.values().begin(), t.values().end(), value);
        return t;
    }

    static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        Tensor t;
        validate_shape(shape);
        t.node_->shape = std::move(shape);
        std::int64_t n = t.node_->size();
        if (static_cast<std::int64_t>(data.size()) != n) {
            throw std::invalid_argument("Tensor::from: data length does not match shape");
        }
        t.node_->values = std::move(data);
        t.node_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(T value, bool requires_grad = false) {
        return from({1}, {value}, requires_grad);
    }

    const std::vector<int>& shape() const { return node_->shape; }
    int dim(int i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    std::int64_t size() const { return node_->size(); }
    bool defined() const { return !node_->shape.empty(); }

    std::vector<T>& values() { return node_->values; }
    const std::vector<T>& values() const { return node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (node_->grad.empty()) throw std::logic_error("Tensor::grad: gradient not populated");
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
        return node_->values[0];
    }

    /// Reverse-mode sweep from a scalar. Gradients of reachable tensors with
    /// requires_grad are accumulated (callers zero grads at step start).
    void backward() const {
        if (size() != 1) throw std::invalid_argument("backward: loss must be scalar");
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        topo_sort(node_.get(), seen, order);
        node_->ensure_grad();
        node_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn) {
                n->backward_fn(*n);
                if (finite_checks_enabled()) {
                    for (const auto& p : n->parents) {
                        if (!p->grad.empty()) check_finite(p->grad, "backward");
                    }
                }
            }
        }
    }

    // --- op construction helpers (used by the free-function ops below) ---

    static Tensor make_op(std::vector<int> shape, std::vector<T> values,
                          std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn, const char* name) {
        check_finite(values, name);
        Tensor out;
        out.node_->shape = std::move(shape);
        out.node_->values = std::move(values);
        bool needs = grad_mode();
        if (needs) {
            bool any = false;
            for (const auto& in : inputs) any = any || in.node_->requires_grad;
            needs = any;
        }
        if (needs) {
            out.node_->requires_grad = true;
            out.node_->parents.reserve(inputs.size());
            for (auto& in : inputs) out.node_->parents.push_back(in.node_);
            out.node_->backward_fn = std::move(backward_fn);
        }
        return out;
    }

    using NodeT = Node;
    const std::shared_ptr<Node>& node() const { return node_; }

private:
    static void validate_shape(const std::vector<int>& shape) {
        if (shape.empty()) throw std::invalid_argument("Tensor: empty shape");
        for (int d : shape) {
            if (d <= 0) throw std::invalid_argument("Tensor: shape entries must be positive");
        }
    }

    static void topo_sort(Node* n, std::unordered_set<Node*>& seen, std::vector<Node*>& order) {
        if (seen.count(n)) return;
        seen.insert(n);
        // Iterative DFS; tapes for deep models overflow the call stack otherwise.
        std::vector<std::pair<Node*, std::size_t>> stack{{n, 0}};
        seen.erase(n);
        while (!stack.empty()) {
            auto& [cur, idx] = stack.back();
            if (idx == 0 && seen.count(cur)) {
                stack.pop_back();
                continue;
            }
            if (idx < cur->parents.size()) {
                Node* next = cur->parents[idx].get();
                ++idx;
                if (!seen.count(next)) stack.push_back({next, 0});
            } else {
                seen.insert(cur);
                order.push_back(cur);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
std::int64_t numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline void require(bool cond, const char* msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "add: shape mismatch");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a, b},
        [](typename Tensor<T>::NodeT& n) {
            for (int k = 0; k < 2; ++k) {
                auto& p = *n.parents[static_cast<std::size_t>(k)];
                if (!p.requires_grad) continue;
                p.ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
            }
        },
        "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "sub: shape mismatch");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a, b},
        [](typename Tensor<T>::NodeT& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] -= n.grad[i];
            }
        },
        "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(), "mul: shape mismatch");
    std::vector<T> out(a.values());
    const auto& bv = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a, b},
        [av = a.values(), bv2 = b.values()](typename Tensor<T>::NodeT& n) {
            auto& pa = *n.parents[0];
            auto& pb = *n.parents[1];
            if (pa.requires_grad) {
                pa.ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) pa.grad[i] += n.grad[i] * bv2[i];
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (std::size_t i = 0; i < n.grad.size(); ++i) pb.grad[i] += n.grad[i] * av[i];
            }
        },
        "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> out(a.values());
    for (auto& x : out) x *= c;
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a},
        [c](typename Tensor<T>::NodeT& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i] * c;
        },
        "scale");
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> out(a.values());
    for (auto& x : out) x = x > T(0) ? x : T(0);
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a},
        [av = a.values()](typename Tensor<T>::NodeT& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                if (av[i] > T(0)) p.grad[i] += n.grad[i];
            }
        },
        "relu");
}

template <typename T>
Tensor<T> tanh_op(const Tensor<T>& a) {
    std::vector<T> out(a.values());
    for (auto& x : out) x = std::tanh(x);
    std::vector<T> saved = out;
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a},
        [y = std::move(saved)](typename Tensor<T>::NodeT& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                p.grad[i] += n.grad[i] * (T(1) - y[i] * y[i]);
            }
        },
        "tanh");
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> out(a.values());
    for (auto& x : out) x = T(1) / (T(1) + std::exp(-x));
    std::vector<T> saved = out;
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a},
        [y = std::move(saved)](typename Tensor<T>::NodeT& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) {
                p.grad[i] += n.grad[i] * y[i] * (T(1) - y[i]);
            }
        },
        "sigmoid");
}

/// Row-wise softmax over the last axis of a rank-2 tensor.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    detail::require(a.rank() == 2, "softmax: expected [N,C]");
    const int n = a.dim(0), c = a.dim(1);
    std::vector<T> out(a.values());
    for (int i = 0; i < n; ++i) {
        T* row = out.data() + static_cast<std::size_t>(i) * c;
        T mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        T sum = T(0);
        for (int j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < c; ++j) row[j] /= sum;
    }
    std::vector<T> saved = out;
    return Tensor<T>::make_op(
        a.shape(), std::move(out), {a},
        [y = std::move(saved), n, c](typename Tensor<T>::NodeT& nd) {
            auto& p = *nd.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int i = 0; i < n; ++i) {
                const std::size_t off = static_cast<std::size_t>(i) * c;
                T dot = T(0);
                for (int j = 0; j < c; ++j) dot += nd.grad[off + j] * y[off + j];
                for (int j = 0; j < c; ++j) {
                    p.grad[off + j] += y[off + j] * (nd.grad[off + j] - dot);
                }
            }
        },
        "softmax");
}

// ---------------------------------------------------------------------------
// Reductions and reshapes
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T s = T(0);
    for (T x : a.values()) s += x;
    return Tensor<T>::make_op(
        {1}, {s}, {a},
        [](typename Tensor<T>::NodeT& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (auto& g : p.grad) g += n.grad[0];
        },
        "sum_all");
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
    detail::require(detail::numel<T>(shape) == a.size(), "reshape: element count mismatch");
    std::vector<T> out(a.values());
    return Tensor<T>::make_op(
        std::move(shape), std::move(out), {a},
        [](typename Tensor<T>::NodeT& n) {
            auto& p = *n.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (std::size_t i = 0; i < n.grad.size(); ++i) p.grad[i] += n.grad[i];
        },
        "reshape");
}

/// [N,C,H,W] -> [N, C*H*W]
template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
    detail::require(a.rank() >= 2, "flatten: rank must be >= 2");
    int rest = 1;
    for (int i = 1; i < a.rank(); ++i) rest *= a.dim(i);
    return reshape(a, {a.dim(0), rest});
}

/// Concatenate along axis 1 (channels for rank-4, features for rank-2).
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
    detail::require(!parts.empty(), "concat_channels: no inputs");
    const auto& s0 = parts[0].shape();
    detail::require(s0.size() == 2 || s0.size() == 4, "concat_channels: rank must be 2 or 4");
    const int n = s0[0];
    int spatial = 1;
    for (std::size_t i = 2; i < s0.size(); ++i) spatial *= s0[i];
    int total_c = 0;
    for (const auto& p : parts) {
        detail::require(p.rank() == static_cast<int>(s0.size()) && p.dim(0) == n,
                        "concat_channels: batch/rank mismatch");
        for (std::size_t i = 2; i < s0.size(); ++i) {
            detail::require(p.shape()[i] == s0[i], "concat_channels: spatial mismatch");
        }
        total_c += p.dim(1);
    }
    std::vector<int> out_shape = s0;
    out_shape[1] = total_c;
    std::vector<T> out(static_cast<std::size_t>(n) * total_c * spatial);
    std::vector<int> channels;
    for (const auto& p : parts) channels.push_back(p.dim(1));
    std::size_t c_off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const auto& v = parts[pi].values();
        const int c = channels[pi];
        for (int b = 0; b < n; ++b) {
            std::copy(v.begin() + static_cast<std::ptrdiff_t>(b) * c * spatial,
                      v.begin() + static_cast<std::ptrdiff_t>(b + 1) * c * spatial,
                      out.begin() + (static_cast<std::ptrdiff_t>(b) * total_c + static_cast<std::ptrdiff_t>(c_off)) * spatial);
        }
        c_off += static_cast<std::size_t>(c);
    }
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), parts,
        [channels, n, spatial, total_c](typename Tensor<T>::NodeT& nd) {
            std::size_t c_off2 = 0;
            for (std::size_t pi = 0; pi < nd.parents.size(); ++pi) {
                auto& p = *nd.parents[pi];
                const int c = channels[pi];
                if (p.requires_grad) {
                    p.ensure_grad();
                    for (int b = 0; b < n; ++b) {
                        const T* src = nd.grad.data() +
                                       (static_cast<std::size_t>(b) * total_c + c_off2) * spatial;
                        T* dst = p.grad.data() + static_cast<std::size_t>(b) * c * spatial;
                        for (int i = 0; i < c * spatial; ++i) dst[i] += src[i];
                    }
                }
                c_off2 += static_cast<std::size_t>(c);
            }
        },
        "concat_channels");
}

/// Slice channels [c_begin, c_end) along axis 1.
template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int c_begin, int c_end) {
    detail::require(a.rank() == 2 || a.rank() == 4, "slice_channels: rank must be 2 or 4");
    detail::require(0 <= c_begin && c_begin < c_end && c_end <= a.dim(1),
                    "slice_channels: bad channel range");
    const int n = a.dim(0), c_in = a.dim(1), c = c_end - c_begin;
    int spatial = 1;
    for (int i = 2; i < a.rank(); ++i) spatial *= a.dim(i);
    std::vector<int> out_shape = a.shape();
    out_shape[1] = c;
    std::vector<T> out(static_cast<std::size_t>(n) * c * spatial);
    const auto& v = a.values();
    for (int b = 0; b < n; ++b) {
        std::copy(v.begin() + (static_cast<std::ptrdiff_t>(b) * c_in + c_begin) * spatial,
                  v.begin() + (static_cast<std::ptrdiff_t>(b) * c_in + c_end) * spatial,
                  out.begin() + static_cast<std::ptrdiff_t>(b) * c * spatial);
    }
    return Tensor<T>::make_op(
        std::move(out_shape), std::move(out), {a},
        [n, c_in, c_begin, c, spatial](typename Tensor<T>::NodeT& nd) {
            auto& p = *nd.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            for (int b = 0; b < n; ++b) {
                const T* src = nd.grad.data() + static_cast<std::size_t>(b) * c * spatial;
                T* dst = p.grad.data() + (static_cast<std::size_t>(b) * c_in + c_begin) * spatial;
                for (int i = 0; i < c * spatial; ++i) dst[i] += src[i];
            }
        },
        "slice_channels");
}

/// Split axis 1 into `parts` equal chunks.
template <typename T>
std::vector<Tensor<T>> split_channels(const Tensor<T>& a, int parts) {
    detail::require(parts > 0 && a.dim(1) % parts == 0, "split_channels: channels not divisible");
    const int step = a.dim(1) / parts;
    std::vector<Tensor<T>> out;
    out.reserve(static_cast<std::size_t>(parts));
    for (int i = 0; i < parts; ++i) out.push_back(slice_channels(a, i * step, (i + 1) * step));
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra / conv ops
// ---------------------------------------------------------------------------

/// y[n,m] = sum_d x[n,d] * w[m,d] + b[m]
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    detail::require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "dense: bad ranks");
    const int n = x.dim(0), d = x.dim(1), m = w.dim(0);
    detail::require(w.dim(1) == d, "dense: weight/input dim mismatch");
    detail::require(b.dim(0) == m, "dense: bias dim mismatch");
    std::vector<T> out(static_cast<std::size_t>(n) * m);
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    const T* bv = b.values().data();
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            T acc = bv[j];
            const T* xr = xv + static_cast<std::size_t>(i) * d;
            const T* wr = wv + static_cast<std::size_t>(j) * d;
            for (int k = 0; k < d; ++k) acc += xr[k] * wr[k];
            out[static_cast<std::size_t>(i) * m + j] = acc;
        }
    }
    return Tensor<T>::make_op(
        {n, m}, std::move(out), {x, w, b},
        [xs = x.values(), ws = w.values(), n, d, m](typename Tensor<T>::NodeT& nd) {
            auto& px = *nd.parents[0];
            auto& pw = *nd.parents[1];
            auto& pb = *nd.parents[2];
            const T* g = nd.grad.data();
            if (px.requires_grad) {
                px.ensure_grad();
                for (int i = 0; i < n; ++i) {
                    T* gx = px.grad.data() + static_cast<std::size_t>(i) * d;
                    const T* gr = g + static_cast<std::size_t>(i) * m;
                    for (int j = 0; j < m; ++j) {
                        const T gij = gr[j];
                        const T* wr = ws.data() + static_cast<std::size_t>(j) * d;
                        for (int k = 0; k < d; ++k) gx[k] += gij * wr[k];
                    }
                }
            }
            if (pw.requires_grad) {
                pw.ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const T* xr = xs.data() + static_cast<std::size_t>(i) * d;
                    const T* gr = g + static_cast<std::size_t>(i) * m;
                    for (int j = 0; j < m; ++j) {
                        const T gij = gr[j];
                        T* gw = pw.grad.data() + static_cast<std::size_t>(j) * d;
                        for (int k = 0; k < d; ++k) gw[k] += gij * xr[k];
                    }
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int i = 0; i < n; ++i) {
                    const T* gr = g + static_cast<std::size_t>(i) * m;
                    for (int j = 0; j < m; ++j) pb.grad[static_cast<std::size_t>(j)] += gr[j];
                }
            }
        },
        "dense");
}

/// 2-D convolution, NCHW x [K,C,kh,kw], zero padding.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride, int pad) {
    detail::require(x.rank() == 4 && w.rank() == 4 && b.rank() == 1, "conv2d: bad ranks");
    detail::require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const int k = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    detail::require(w.dim(1) == c, "conv2d: channel mismatch");
    detail::require(b.dim(0) == k, "conv2d: bias mismatch");
    detail::require(kh <= h + 2 * pad && kw <= wd + 2 * pad, "conv2d: kernel larger than padded input");
    const int oh = (h + 2 * pad - kh) / stride + 1;
    const int ow = (wd + 2 * pad - kw) / stride + 1;

    std::vector<T> out(static_cast<std::size_t>(n) * k * oh * ow);
    const T* xv = x.values().data();
    const T* wv = w.values().data();
    const T* bv = b.values().data();
    {
        T* ov = out.data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int in = 0; in < n; ++in) {
            for (int ik = 0; ik < k; ++ik) {
                T* o = ov + (static_cast<std::size_t>(in) * k + ik) * oh * ow;
                std::fill(o, o + static_cast<std::size_t>(oh) * ow, bv[ik]);
                for (int ic = 0; ic < c; ++ic) {
                    const T* xp = xv + (static_cast<std::size_t>(in) * c + ic) * h * wd;
                    const T* wp = wv + ((static_cast<std::size_t>(ik) * c + ic) * kh) * kw;
                    for (int ki = 0; ki < kh; ++ki) {
                        for (int kj = 0; kj < kw; ++kj) {
                            const T wval = wp[static_cast<std::size_t>(ki) * kw + kj];
                            if (wval == T(0)) continue;
                            for (int io = 0; io < oh; ++io) {
                                const int ih = io * stride - pad + ki;
                                if (ih < 0 || ih >= h) continue;
                                // valid ow range so that iw in [0, wd)
                                int lo = 0, hi = ow;
                                if (pad - kj > 0) lo = (pad - kj + stride - 1) / stride;
                                const int max_iw = wd - 1 + pad - kj;
                                if (max_iw / stride + 1 < hi) hi = max_iw / stride + 1;
                                const T* xr = xp + static_cast<std::size_t>(ih) * wd - pad + kj;
                                T* orow = o + static_cast<std::size_t>(io) * ow;
                                for (int jo = lo; jo < hi; ++jo) {
                                    orow[jo] += wval * xr[static_cast<std::size_t>(jo) * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    return Tensor<T>::make_op(
        {n, k, oh, ow}, std::move(out), {x, w, b},
        [xs = x.values(), ws = w.values(), n, c, h, wd, k, kh, kw, oh, ow, stride,
         pad](typename Tensor<T>::NodeT& nd) {
            auto& px = *nd.parents[0];
            auto& pw = *nd.parents[1];
            auto& pb = *nd.parents[2];
            const T* g = nd.grad.data();
            if (px.requires_grad) {
                px.ensure_grad();
                T* gx = px.grad.data();
#pragma omp parallel for collapse(2) schedule(static)
                for (int in = 0; in < n; ++in) {
                    for (int ic = 0; ic < c; ++ic) {
                        T* gxp = gx + (static_cast<std::size_t>(in) * c + ic) * h * wd;
                        for (int ik = 0; ik < k; ++ik) {
                            const T* gp = g + (static_cast<std::size_t>(in) * k + ik) * oh * ow;
                            const T* wp = ws.data() + ((static_cast<std::size_t>(ik) * c + ic) * kh) * kw;
                            for (int ki = 0; ki < kh; ++ki) {
                                for (int kj = 0; kj < kw; ++kj) {
                                    const T wval = wp[static_cast<std::size_t>(ki) * kw + kj];
                                    if (wval == T(0)) continue;
                                    for (int io = 0; io < oh; ++io) {
                                        const int ih = io * stride - pad + ki;
                                        if (ih < 0 || ih >= h) continue;
                                        int lo = 0, hi = ow;
                                        if (pad - kj > 0) lo = (pad - kj + stride - 1) / stride;
                                        const int max_iw = wd - 1 + pad - kj;
                                        if (max_iw / stride + 1 < hi) hi = max_iw / stride + 1;
                                        T* xr = gxp + static_cast<std::size_t>(ih) * wd - pad + kj;
                                        const T* grow = gp + static_cast<std::size_t>(io) * ow;
                                        for (int jo = lo; jo < hi; ++jo) {
                                            xr[static_cast<std::size_t>(jo) * stride] += wval * grow[jo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if (pw.requires_grad) {
                pw.ensure_grad();
                T* gw = pw.grad.data();
#pragma omp parallel for collapse(2) schedule(static)
                for (int ik = 0; ik < k; ++ik) {
                    for (int ic = 0; ic < c; ++ic) {
                        T* gwp = gw + ((static_cast<std::size_t>(ik) * c + ic) * kh) * kw;
                        for (int in = 0; in < n; ++in) {
                            const T* gp = g + (static_cast<std::size_t>(in) * k + ik) * oh * ow;
                            const T* xp = xs.data() + (static_cast<std::size_t>(in) * c + ic) * h * wd;
                            for (int ki = 0; ki < kh; ++ki) {
                                for (int kj = 0; kj < kw; ++kj) {
                                    T acc = T(0);
                                    for (int io = 0; io < oh; ++io) {
                                        const int ih = io * stride - pad + ki;
                                        if (ih < 0 || ih >= h) continue;
                                        int lo = 0, hi = ow;
                                        if (pad - kj > 0) lo = (pad - kj + stride - 1) / stride;
                                        const int max_iw = wd - 1 + pad - kj;
                                        if (max_iw / stride + 1 < hi) hi = max_iw / stride + 1;
                                        const T* xr = xp + static_cast<std::size_t>(ih) * wd - pad + kj;
                                        const T* grow = gp + static_cast<std::size_t>(io) * ow;
                                        for (int jo = lo; jo < hi; ++jo) {
                                            acc += grow[jo] * xr[static_cast<std::size_t>(jo) * stride];
                                        }
                                    }
                                    gwp[static_cast<std::size_t>(ki) * kw + kj] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int in = 0; in < n; ++in) {
                    for (int ik = 0; ik < k; ++ik) {
                        const T* gp = g + (static_cast<std::size_t>(in) * k + ik) * oh * ow;
                        T acc = T(0);
                        for (int i = 0; i < oh * ow; ++i) acc += gp[i];
                        pb.grad[static_cast<std::size_t>(ik)] += acc;
                    }
                }
            }
        },
        "conv2d");
}

/// [N,C,H,W] -> [N,C], mean over the spatial extent.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
    detail::require(x.rank() == 4, "global_avg_pool: expected NCHW");
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int s = h * w;
    std::vector<T> out(static_cast<std::size_t>(n) * c);
    const T* xv = x.values().data();
    for (int i = 0; i < n * c; ++i) {
        T acc = T(0);
        const T* p = xv + static_cast<std::size_t>(i) * s;
        for (int j = 0; j < s; ++j) acc += p[j];
        out[static_cast<std::size_t>(i)] = acc / static_cast<T>(s);
    }
    return Tensor<T>::make_op(
        {n, c}, std::move(out), {x},
        [n, c, s](typename Tensor<T>::NodeT& nd) {
            auto& p = *nd.parents[0];
            if (!p.requires_grad) return;
            p.ensure_grad();
            const T inv = T(1) / static_cast<T>(s);
            for (int i = 0; i < n * c; ++i) {
                const T g = nd.grad[static_cast<std::size_t>(i)] * inv;
                T* gp = p.grad.data() + static_cast<std::size_t>(i) * s;
                for (int j = 0; j < s; ++j) gp[j] += g;
            }
        },
        "global_avg_pool");
}

/// Per-channel gate broadcast: y[n,c,h,w] = x[n,c,h,w] * gate[n,c].
template <typename T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& gate) {
    detail::require(x.rank() == 4 && gate.rank() == 2, "mul_channels: bad ranks");
    detail::require(x.dim(0) == gate.dim(0) && x.dim(1) == gate.dim(1),
                    "mul_channels: channel mismatch");
    const int n = x.dim(0), c = x.dim(1), s = x.dim(2) * x.dim(3);
    std::vector<T> out(x.values());
    const T* gv = gate.values().data();
    for (int i = 0; i < n * c; ++i) {
        const T g = gv[static_cast<std::size_t>(i)];
        T* p = out.data() + static_cast<std::size_t>(i) * s;
        for (int j = 0; j < s; ++j) p[j] *= g;
    }
    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x, gate},
        [xs = x.values(), gs = gate.values(), n, c, s](typename Tensor<T>::NodeT& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            if (px.requires_grad) {
                px.ensure_grad();
                for (int i = 0; i < n * c; ++i) {
                    const T g = gs[static_cast<std::size_t>(i)];
                    const T* gr = nd.grad.data() + static_cast<std::size_t>(i) * s;
                    T* gx = px.grad.data() + static_cast<std::size_t>(i) * s;
                    for (int j = 0; j < s; ++j) gx[j] += gr[j] * g;
                }
            }
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (int i = 0; i < n * c; ++i) {
                    const T* gr = nd.grad.data() + static_cast<std::size_t>(i) * s;
                    const T* xp = xs.data() + static_cast<std::size_t>(i) * s;
                    T acc = T(0);
                    for (int j = 0; j < s; ++j) acc += gr[j] * xp[j];
                    pg.grad[static_cast<std::size_t>(i)] += acc;
                }
            }
        },
        "mul_channels");
}

/// Batch normalization over axis 1 with learnable affine parameters.
/// Accepts [N,C] or [N,C,H,W]. In training mode uses batch statistics and
/// updates the running buffers in place; in eval mode uses the frozen buffers.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     std::vector<T>& running_mean, std::vector<T>& running_var, bool training,
                     T momentum = T(0.1), T eps = T(1e-5)) {
    detail::require(x.rank() == 2 || x.rank() == 4, "batch_norm: rank must be 2 or 4");
    const int n = x.dim(0), c = x.dim(1);
    const int s = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
    detail::require(gamma.rank() == 1 && gamma.dim(0) == c, "batch_norm: gamma mismatch");
    detail::require(beta.rank() == 1 && beta.dim(0) == c, "batch_norm: beta mismatch");
    detail::require(static_cast<int>(running_mean.size()) == c &&
                        static_cast<int>(running_var.size()) == c,
                    "batch_norm: running buffer mismatch");
    const std::int64_t m = static_cast<std::int64_t>(n) * s;

    std::vector<T> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
    const T* xv = x.values().data();
    if (training) {
        for (int ic = 0; ic < c; ++ic) {
            T acc = T(0);
            for (int in = 0; in < n; ++in) {
                const T* p = xv + (static_cast<std::size_t>(in) * c + ic) * s;
                for (int j = 0; j < s; ++j) acc += p[j];
            }
            mean[static_cast<std::size_t>(ic)] = acc / static_cast<T>(m);
        }
        for (int ic = 0; ic < c; ++ic) {
            T acc = T(0);
            const T mu = mean[static_cast<std::size_t>(ic)];
            for (int in = 0; in < n; ++in) {
                const T* p = xv + (static_cast<std::size_t>(in) * c + ic) * s;
                for (int j = 0; j < s; ++j) {
                    const T d = p[j] - mu;
                    acc += d * d;
                }
            }
            var[static_cast<std::size_t>(ic)] = acc / static_cast<T>(m);
        }
        // Unbiased variance feeds the running buffer (matching common practice).
        const T unbias = m > 1 ? static_cast<T>(m) / static_cast<T>(m - 1) : T(1);
        for (int ic = 0; ic < c; ++ic) {
            running_mean[static_cast<std::size_t>(ic)] =
                (T(1) - momentum) * running_mean[static_cast<std::size_t>(ic)] +
                momentum * mean[static_cast<std::size_t>(ic)];
            running_var[static_cast<std::size_t>(ic)] =
                (T(1) - momentum) * running_var[static_cast<std::size_t>(ic)] +
                momentum * var[static_cast<std::size_t>(ic)] * unbias;
        }
    } else {
        mean = running_mean;
        var = running_var;
    }

    std::vector<T> inv_std(static_cast<std::size_t>(c));
    for (int ic = 0; ic < c; ++ic) {
        inv_std[static_cast<std::size_t>(ic)] =
            T(1) / std::sqrt(var[static_cast<std::size_t>(ic)] + eps);
    }
    std::vector<T> xhat(x.values().size());
    std::vector<T> out(x.values().size());
    const T* gv = gamma.values().data();
    const T* bv = beta.values().data();
    for (int in = 0; in < n; ++in) {
        for (int ic = 0; ic < c; ++ic) {
            const std::size_t off = (static_cast<std::size_t>(in) * c + ic) * s;
            const T mu = mean[static_cast<std::size_t>(ic)];
            const T is = inv_std[static_cast<std::size_t>(ic)];
            const T g = gv[ic], bb = bv[ic];
            for (int j = 0; j < s; ++j) {
                const T xh = (xv[off + j] - mu) * is;
                xhat[off + j] = xh;
                out[off + j] = g * xh + bb;
            }
        }
    }

    return Tensor<T>::make_op(
        x.shape(), std::move(out), {x, gamma, beta},
        [xh = std::move(xhat), inv_std, gv2 = gamma.values(), n, c, s, m,
         training](typename Tensor<T>::NodeT& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pb = *nd.parents[2];
            const T* g = nd.grad.data();
            if (pg.requires_grad) {
                pg.ensure_grad();
                for (int ic = 0; ic < c; ++ic) {
                    T acc = T(0);
                    for (int in = 0; in < n; ++in) {
                        const std::size_t off = (static_cast<std::size_t>(in) * c + ic) * s;
                        for (int j = 0; j < s; ++j) acc += g[off + j] * xh[off + j];
                    }
                    pg.grad[static_cast<std::size_t>(ic)] += acc;
                }
            }
            if (pb.requires_grad) {
                pb.ensure_grad();
                for (int ic = 0; ic < c; ++ic) {
                    T acc = T(0);
                    for (int in = 0; in < n; ++in) {
                        const std::size_t off = (static_cast<std::size_t>(in) * c + ic) * s;
                        for (int j = 0; j < s; ++j) acc += g[off + j];
                    }
                    pb.grad[static_cast<std::size_t>(ic)] += acc;
                }
            }
            if (px.requires_grad) {
                px.ensure_grad();
                if (training) {
                    // Full backward through the batch statistics.
                    for (int ic = 0; ic < c; ++ic) {
                        T sum_g = T(0), sum_gx = T(0);
                        for (int in = 0; in < n; ++in) {
                            const std::size_t off = (static_cast<std::size_t>(in) * c + ic) * s;
                            for (int j = 0; j < s; ++j) {
                                sum_g += g[off + j];
                                sum_gx += g[off + j] * xh[off + j];
                            }
                        }
                        const T gam = gv2[static_cast<std::size_t>(ic)];
                        const T is = inv_std[static_cast<std::size_t>(ic)];
                        const T inv_m = T(1) / static_cast<T>(m);
                        for (int in = 0; in < n; ++in) {
                            const std::size_t off = (static_cast<std::size_t>(in) * c + ic) * s;
                            for (int j = 0; j < s; ++j) {
                                px.grad[off + j] += gam * is *
                                                    (g[off + j] - inv_m * sum_g -
                                                     xh[off + j] * inv_m * sum_gx);
                            }
                        }
                    }
                } else {
                    for (int ic = 0; ic < c; ++ic) {
                        const T gi = gv2[static_cast<std::size_t>(ic)] *
                                     inv_std[static_cast<std::size_t>(ic)];
                        for (int in = 0; in < n; ++in) {
                            const std::size_t off = (static_cast<std::size_t>(in) * c + ic) * s;
                            for (int j = 0; j < s; ++j) px.grad[off + j] += g[off + j] * gi;
                        }
                    }
                }
            }
        },
        "batch_norm");
}

}  // namespace mreid
