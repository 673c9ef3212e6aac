// SPDX-FileCopyrightText: 2026 The amfd Authors
//
// SPDX-License-Identifier: Apache-2.0

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle onto a node holding its values, an optional
// gradient buffer and (for op results) a closure that pushes the node's
// gradient into its inputs. Ops whose inputs require gradients append their
// result node to the calling thread's Tape; Tape::backward walks it in
// reverse execution order, which is a valid topological order.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "amfd/error.hpp"

namespace amfd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "," : "") << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::function<void(Node&)> backward;

    std::vector<double>& ensure_grad() {
        if (grad.empty()) {
            grad.assign(value.size(), 0.0);
        }
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

inline bool& grad_mode_flag() {
    static thread_local bool enabled = true;
    return enabled;
}

inline bool& debug_checks_flag() {
#ifdef NDEBUG
    static thread_local bool enabled = false;
#else
    static thread_local bool enabled = true;
#endif
    return enabled;
}

inline bool all_finite(std::span<const double> values) {
    return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

} // namespace detail

/// Whether ops currently record onto the tape (see NoGradGuard).
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// When on, every op result is scanned for NaN/Inf. Defaults to on in
/// debug builds.
inline void set_debug_checks(bool on) { detail::debug_checks_flag() = on; }
inline bool debug_checks() { return detail::debug_checks_flag(); }

class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
    ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

class Tape {
public:
    static Tape& current() {
        static thread_local Tape tape;
        return tape;
    }

    void record(detail::NodePtr node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool empty() const noexcept { return nodes_.empty(); }

    /// Drops every recorded op without propagating anything.
    void clear() {
        for (auto& node : nodes_) {
            node->backward = nullptr;
            node->grad.clear();
            node->grad.shrink_to_fit();
        }
        nodes_.clear();
    }

    void backward(const detail::NodePtr& root) {
        if (root->value.size() != 1) {
            throw NotScalar("backward() needs a single-element tensor, got shape " + shape_str(root->shape));
        }
        if (!root->requires_grad) {
            clear();
            return;
        }
        root->ensure_grad()[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            detail::Node& node = **it;
            if (node.grad.empty() || !node.backward) {
                continue;
            }
            node.backward(node);
        }
        clear();
    }

private:
    std::vector<detail::NodePtr> nodes_;
};

class Tensor {
public:
    Tensor() = default;

    /// Leaf tensor from row-major values.
    static Tensor build(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape.empty() || shape.size() > 4) {
            throw ShapeMismatch("tensor rank must be 1..4, got " + std::to_string(shape.size()));
        }
        if (shape_numel(shape) != values.size()) {
            throw ShapeMismatch("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                                " values, got " + std::to_string(values.size()));
        }
        if (!detail::all_finite(values)) {
            throw NonFiniteValue("non-finite value in tensor of shape " + shape_str(shape));
        }
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        const std::size_t n = shape_numel(shape);
        return build(std::move(shape), std::vector<double>(n, value), requires_grad);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

    static Tensor scalar(double value, bool requires_grad = false) { return build({1}, {value}, requires_grad); }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const double> values() const { return node_->value; }

    /// Raw write access for optimizers and finite-difference probes. Never
    /// use this on a tensor that has been consumed by a recorded op.
    std::span<double> mutable_values() { return node_->value; }

    double item() const {
        if (numel() != 1) {
            throw NotScalar("item() on tensor of shape " + shape_str(shape()));
        }
        return node_->value[0];
    }

    double operator[](std::size_t flat) const { return node_->value[flat]; }

    double at(std::size_t i) const { return node_->value.at(i); }
    double at(std::size_t i, std::size_t j) const { return node_->value.at(i * dim(1) + j); }
    double at(std::size_t i, std::size_t j, std::size_t k) const {
        return node_->value.at((i * dim(1) + j) * dim(2) + k);
    }

    bool requires_grad() const { return node_->requires_grad; }

    Tensor& set_requires_grad(bool on) {
        node_->requires_grad = on;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }

    /// Accumulated gradient; zeros if backward never reached this tensor.
    std::vector<double> grad() const {
        if (node_->grad.empty()) {
            return std::vector<double>(numel(), 0.0);
        }
        return node_->grad;
    }

    void zero_grad() { node_->grad.clear(); }

    /// Value copy cut off from the tape.
    Tensor detach() const {
        auto node = std::make_shared<detail::Node>();
        node->shape = node_->shape;
        node->value = node_->value;
        return Tensor(std::move(node));
    }

    /// Deep copy that keeps the requires_grad flag but no history.
    Tensor clone_leaf() const {
        Tensor t = detach();
        t.node_->requires_grad = node_->requires_grad;
        return t;
    }

    void backward() const { Tape::current().backward(node_); }

    const detail::NodePtr& node() const { return node_; }

    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
    detail::NodePtr node_;
};

namespace detail {

inline bool needs_grad(std::initializer_list<const Tensor*> inputs) {
    if (!grad_enabled()) {
        return false;
    }
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

/// Gradient buffer of an input, or nullptr if it does not take gradients.
inline double* grad_target(const NodePtr& node) {
    return node->requires_grad ? node->ensure_grad().data() : nullptr;
}

/// Wraps an op result; `backward` receives the output gradient and is only
/// kept when `track` is set.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> value, bool track,
                          std::function<void(std::span<const double>)> backward) {
    if (debug_checks() && !all_finite(value)) {
        throw NonFiniteValue(std::string("non-finite result from ") + op);
    }
    auto node = std::make_shared<Node>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    if (track) {
        node->requires_grad = true;
        node->backward = [fn = std::move(backward)](Node& self) { fn(self.grad); };
        Tape::current().record(node);
    }
    return Tensor(std::move(node));
}

inline Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs,
                          std::function<void(std::span<const double>)> backward) {
    return make_result(op, std::move(shape), std::move(value), needs_grad(inputs), std::move(backward));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw ShapeMismatch(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                            shape_str(t.shape()));
    }
}

template <class Fwd, class Dfdx>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Dfdx dfdx) {
    const auto x = a.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = fwd(x[i]);
    }
    auto an = a.node();
    return make_result(op, a.shape(), std::move(out), {&a}, [an, dfdx](std::span<const double> g) {
        double* ga = grad_target(an);
        const auto& xv = an->value;
        for (std::size_t i = 0; i < g.size(); ++i) {
            ga[i] += g[i] * dfdx(xv[i]);
        }
    });
}

} // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    const auto x = a.values();
    const auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] + y[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result("add", a.shape(), std::move(out), {&a, &b}, [an, bn](std::span<const double> g) {
        if (double* ga = detail::grad_target(an)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (double* gb = detail::grad_target(bn)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    const auto x = a.values();
    const auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] - y[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result("sub", a.shape(), std::move(out), {&a, &b}, [an, bn](std::span<const double> g) {
        if (double* ga = detail::grad_target(an)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (double* gb = detail::grad_target(bn)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    const auto x = a.values();
    const auto y = b.values();
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * y[i];
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result("mul", a.shape(), std::move(out), {&a, &b}, [an, bn](std::span<const double> g) {
        if (double* ga = detail::grad_target(an)) {
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bn->value[i];
        }
        if (double* gb = detail::grad_target(bn)) {
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * an->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    return detail::unary("scale", a, [s](double v) { return s * v; }, [s](double) { return s; });
}

inline Tensor square(const Tensor& a) {
    return detail::unary("square", a, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

inline Tensor abs(const Tensor& a) {
    return detail::unary(
        "abs", a, [](double v) { return std::abs(v); },
        [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Tensor relu(const Tensor& a) {
    return detail::unary(
        "relu", a, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// Elementwise binary cross-entropy on logits against constant targets.
inline Tensor bce_with_logits(const Tensor& logits, const Tensor& targets) {
    detail::require_same_shape(logits, targets, "bce_with_logits");
    const auto z = logits.values();
    const auto t = targets.values();
    std::vector<double> out(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        out[i] = std::max(z[i], 0.0) - z[i] * t[i] + std::log1p(std::exp(-std::abs(z[i])));
    }
    auto zn = logits.node();
    auto tn = targets.node();
    return detail::make_result("bce_with_logits", logits.shape(), std::move(out), {&logits},
                               [zn, tn](std::span<const double> g) {
                                   double* gz = detail::grad_target(zn);
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       gz[i] += g[i] * (sigmoid(zn->value[i]) - tn->value[i]);
                                   }
                               });
}

/// Adds a C×1×1 grid to every pixel of a C×H×W map.
inline Tensor broadcast_add(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 3, "broadcast_add");
    const std::size_t c = x.dim(0);
    if (w.shape() != Shape{c, 1, 1}) {
        throw ShapeMismatch("broadcast_add: expected " + shape_str({c, 1, 1}) + " addend, got " +
                            shape_str(w.shape()));
    }
    const std::size_t hw = x.dim(1) * x.dim(2);
    const auto xv = x.values();
    const auto wv = w.values();
    std::vector<double> out(xv.size());
    for (std::size_t k = 0; k < c; ++k) {
        for (std::size_t p = 0; p < hw; ++p) {
            out[k * hw + p] = xv[k * hw + p] + wv[k];
        }
    }
    auto xn = x.node();
    auto wn = w.node();
    return detail::make_result("broadcast_add", x.shape(), std::move(out), {&x, &w},
                               [xn, wn, c, hw](std::span<const double> g) {
                                   if (double* gx = detail::grad_target(xn)) {
                                       for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                                   }
                                   if (double* gw = detail::grad_target(wn)) {
                                       for (std::size_t k = 0; k < c; ++k) {
                                           double s = 0.0;
                                           for (std::size_t p = 0; p < hw; ++p) s += g[k * hw + p];
                                           gw[k] += s;
                                       }
                                   }
                               });
}

// ---------------------------------------------------------------------------
// Linear maps

namespace detail {

// Fixed-order four-lane dot product; the lanes let the compiler vectorize
// without reassociating, so results are identical across runs.
inline double dot(const double* a, const double* b, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t p = 0;
    for (; p + 4 <= n; p += 4) {
        s0 += a[p] * b[p];
        s1 += a[p + 1] * b[p + 1];
        s2 += a[p + 2] * b[p + 2];
        s3 += a[p + 3] * b[p + 3];
    }
    for (; p < n; ++p) s0 += a[p] * b[p];
    return (s0 + s1) + (s2 + s3);
}

inline double total(const double* a, std::size_t n) {
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t p = 0;
    for (; p + 4 <= n; p += 4) {
        s0 += a[p];
        s1 += a[p + 1];
        s2 += a[p + 2];
        s3 += a[p + 3];
    }
    for (; p < n; ++p) s0 += a[p];
    return (s0 + s1) + (s2 + s3);
}

} // namespace detail

/// 1×1 convolution: out[o,p] = bias[o] + Σ_i weight[o,i]·x[i,p].
inline Tensor channel_mix(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(x, 3, "channel_mix");
    detail::require_rank(weight, 2, "channel_mix weight");
    const std::size_t cin = x.dim(0);
    const std::size_t cout = weight.dim(0);
    if (weight.dim(1) != cin) {
        throw ShapeMismatch("channel_mix: weight " + shape_str(weight.shape()) + " against input " +
                            shape_str(x.shape()));
    }
    if (bias.shape() != Shape{cout}) {
        throw ShapeMismatch("channel_mix: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                            " outputs");
    }
    const std::size_t hw = x.dim(1) * x.dim(2);
    const auto xv = x.values();
    const auto wv = weight.values();
    const auto bv = bias.values();
    std::vector<double> out(cout * hw);
    for (std::size_t o = 0; o < cout; ++o) {
        double* row = out.data() + o * hw;
        std::fill(row, row + hw, bv[o]);
        for (std::size_t i = 0; i < cin; ++i) {
            const double w = wv[o * cin + i];
            const double* src = xv.data() + i * hw;
            for (std::size_t p = 0; p < hw; ++p) {
                row[p] += w * src[p];
            }
        }
    }
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    return detail::make_result(
        "channel_mix", {cout, x.dim(1), x.dim(2)}, std::move(out), {&x, &weight, &bias},
        [xn, wn, bn, cin, cout, hw](std::span<const double> g) {
            if (double* gx = detail::grad_target(xn)) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* grow = g.data() + o * hw;
                    for (std::size_t i = 0; i < cin; ++i) {
                        const double w = wn->value[o * cin + i];
                        double* dst = gx + i * hw;
                        for (std::size_t p = 0; p < hw; ++p) {
                            dst[p] += w * grow[p];
                        }
                    }
                }
            }
            if (double* gw = detail::grad_target(wn)) {
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* grow = g.data() + o * hw;
                    for (std::size_t i = 0; i < cin; ++i) {
                        gw[o * cin + i] += detail::dot(grow, xn->value.data() + i * hw, hw);
                    }
                }
            }
            if (double* gb = detail::grad_target(bn)) {
                for (std::size_t o = 0; o < cout; ++o) gb[o] += detail::total(g.data() + o * hw, hw);
            }
        });
}

/// Plain matrix product of m×k and k×n operands.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul");
    detail::require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0);
    const std::size_t k = a.dim(1);
    const std::size_t n = b.dim(1);
    if (b.dim(0) != k) {
        throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t l = 0; l < k; ++l) {
            const double s = av[i * k + l];
            for (std::size_t j = 0; j < n; ++j) {
                out[i * n + j] += s * bv[l * n + j];
            }
        }
    }
    auto an = a.node();
    auto bn = b.node();
    return detail::make_result("matmul", {m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](std::span<const double> g) {
        if (double* ga = detail::grad_target(an)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t l = 0; l < k; ++l) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bn->value[l * n + j];
                    ga[i * k + l] += s;
                }
            }
        }
        if (double* gb = detail::grad_target(bn)) {
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t l = 0; l < k; ++l) {
                    const double s = an->value[i * k + l];
                    for (std::size_t j = 0; j < n; ++j) gb[l * n + j] += s * g[i * n + j];
                }
            }
        }
    });
}

/// 3×3 convolution, stride 1, zero padding 1. weight is Cout×Cin×3×3.
inline Tensor conv3x3(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(x, 3, "conv3x3");
    detail::require_rank(weight, 4, "conv3x3 weight");
    const std::size_t cin = x.dim(0);
    const std::size_t h = x.dim(1);
    const std::size_t w = x.dim(2);
    const std::size_t cout = weight.dim(0);
    if (weight.dim(1) != cin || weight.dim(2) != 3 || weight.dim(3) != 3) {
        throw ShapeMismatch("conv3x3: weight " + shape_str(weight.shape()) + " against input " + shape_str(x.shape()));
    }
    if (bias.shape() != Shape{cout}) {
        throw ShapeMismatch("conv3x3: bias " + shape_str(bias.shape()));
    }
    const std::size_t hw = h * w;
    const std::size_t taps = cin * 9;
    const auto xv = x.values();
    const auto wv = weight.values();
    const auto bv = bias.values();

    // Visits every (output pixel, input pixel) pair of one kernel tap as runs
    // of contiguous rows.
    auto for_tap = [h, w](std::size_t ky, std::size_t kx, auto&& row_fn) {
        const long dy = static_cast<long>(ky) - 1;
        const long dx = static_cast<long>(kx) - 1;
        const std::size_t y0 = dy < 0 ? 1 : 0;
        const std::size_t y1 = dy > 0 ? h - 1 : h;
        const std::size_t x0 = dx < 0 ? 1 : 0;
        const std::size_t x1 = dx > 0 ? w - 1 : w;
        if (x1 <= x0) return;
        for (std::size_t y = y0; y < y1; ++y) {
            const std::size_t out_off = y * w + x0;
            const std::size_t in_off = static_cast<std::size_t>(static_cast<long>(y) + dy) * w +
                                       static_cast<std::size_t>(static_cast<long>(x0) + dx);
            row_fn(out_off, in_off, x1 - x0);
        }
    };

    // Patch matrix: row (i·9 + tap) holds the shifted input plane.
    auto cols = std::make_shared<std::vector<double>>(taps * hw, 0.0);
    for (std::size_t i = 0; i < cin; ++i) {
        const double* src = xv.data() + i * hw;
        for (std::size_t t = 0; t < 9; ++t) {
            double* dst = cols->data() + (i * 9 + t) * hw;
            for_tap(t / 3, t % 3, [&](std::size_t oo, std::size_t io, std::size_t len) {
                std::copy(src + io, src + io + len, dst + oo);
            });
        }
    }
    std::vector<double> out(cout * hw);
    for (std::size_t o = 0; o < cout; ++o) {
        double* orow = out.data() + o * hw;
        std::fill(orow, orow + hw, bv[o]);
        for (std::size_t k = 0; k < taps; ++k) {
            const double c = wv[o * taps + k];
            const double* src = cols->data() + k * hw;
            for (std::size_t p = 0; p < hw; ++p) orow[p] += c * src[p];
        }
    }
    auto xn = x.node();
    auto wn = weight.node();
    auto bn = bias.node();
    return detail::make_result(
        "conv3x3", {cout, h, w}, std::move(out), {&x, &weight, &bias},
        [xn, wn, bn, cin, cout, hw, taps, cols, for_tap](std::span<const double> g) {
            if (double* gx = detail::grad_target(xn)) {
                std::vector<double> gcol(taps * hw, 0.0);
                for (std::size_t o = 0; o < cout; ++o) {
                    const double* grow = g.data() + o * hw;
                    for (std::size_t k = 0; k < taps; ++k) {
                        const double c = wn->value[o * taps + k];
                        double* dst = gcol.data() + k * hw;
                        for (std::size_t p = 0; p < hw; ++p) dst[p] += c * grow[p];
                    }
                }
                for (std::size_t i = 0; i < cin; ++i) {
                    double* dst = gx + i * hw;
                    for (std::size_t t = 0; t < 9; ++t) {
                        const double* src = gcol.data() + (i * 9 + t) * hw;
                        for_tap(t / 3, t % 3, [&](std::size_t oo, std::size_t io, std::size_t len) {
                            for (std::size_t q = 0; q < len; ++q) dst[io + q] += src[oo + q];
                        });
                    }
                }
            }
            if (double* gw = detail::grad_target(wn)) {
                for (std::size_t o = 0; o < cout; ++o) {
                    for (std::size_t k = 0; k < taps; ++k) {
                        gw[o * taps + k] += detail::dot(g.data() + o * hw, cols->data() + k * hw, hw);
                    }
                }
            }
            if (double* gb = detail::grad_target(bn)) {
                for (std::size_t o = 0; o < cout; ++o) gb[o] += detail::total(g.data() + o * hw, hw);
            }
        });
}

// ---------------------------------------------------------------------------
// Normalizations

/// Numerically stable softmax of a rank-1 tensor.
inline Tensor softmax(const Tensor& x) {
    detail::require_rank(x, 1, "softmax");
    const auto v = x.values();
    if (v.empty()) {
        throw EmptyInput("softmax of an empty vector");
    }
    const double mx = *std::max_element(v.begin(), v.end());
    std::vector<double> out(v.size());
    double total = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - mx);
        total += out[i];
    }
    for (double& o : out) {
        o /= total;
    }
    std::vector<double> y = out;
    auto xn = x.node();
    return detail::make_result("softmax", x.shape(), std::move(out), {&x},
                               [xn, y = std::move(y)](std::span<const double> g) {
                                   double* gx = detail::grad_target(xn);
                                   double dot = 0.0;
                                   for (std::size_t i = 0; i < g.size(); ++i) dot += g[i] * y[i];
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[i] += y[i] * (g[i] - dot);
                               });
}

inline constexpr double kLayerNormEps = 1e-5;

/// Zero-mean / unit-variance normalization over every entry (no affine).
inline Tensor layer_norm(const Tensor& x, double eps = kLayerNormEps) {
    const auto v = x.values();
    const double n = static_cast<double>(v.size());
    double mean = 0.0;
    for (double a : v) mean += a;
    mean /= n;
    double var = 0.0;
    for (double a : v) var += (a - mean) * (a - mean);
    var /= n;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    std::vector<double> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = (v[i] - mean) * inv_std;
    }
    std::vector<double> xhat = out;
    auto xn = x.node();
    return detail::make_result("layer_norm", x.shape(), std::move(out), {&x},
                               [xn, xhat = std::move(xhat), inv_std](std::span<const double> g) {
                                   double* gx = detail::grad_target(xn);
                                   const double m = static_cast<double>(g.size());
                                   double g_mean = 0.0;
                                   double gx_mean = 0.0;
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       g_mean += g[i];
                                       gx_mean += g[i] * xhat[i];
                                   }
                                   g_mean /= m;
                                   gx_mean /= m;
                                   for (std::size_t i = 0; i < g.size(); ++i) {
                                       gx[i] += inv_std * (g[i] - g_mean - xhat[i] * gx_mean);
                                   }
                               });
}

/// Layer normalization over the C entries of a C×1×1 grid, then relu.
inline Tensor layer_norm_relu(const Tensor& x) {
    if (x.rank() != 3 || x.dim(1) != 1 || x.dim(2) != 1) {
        throw ShapeMismatch("layer_norm_relu expects C×1×1, got " + shape_str(x.shape()));
    }
    return relu(layer_norm(x));
}

// ---------------------------------------------------------------------------
// Shape plumbing

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel() || shape.empty() || shape.size() > 4) {
        throw ShapeMismatch("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out(x.values().begin(), x.values().end());
    auto xn = x.node();
    return detail::make_result("reshape", std::move(shape), std::move(out), {&x}, [xn](std::span<const double> g) {
        double* gx = detail::grad_target(xn);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// Stacks C_i×H×W maps along the channel axis.
inline Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) {
        throw EmptyInput("concat_channels of nothing");
    }
    const std::size_t h = parts[0].dim(1);
    const std::size_t w = parts[0].dim(2);
    std::size_t channels = 0;
    std::vector<double> out;
    for (const auto& p : parts) {
        detail::require_rank(p, 3, "concat_channels");
        if (p.dim(1) != h || p.dim(2) != w) {
            throw ShapeMismatch("concat_channels: " + shape_str(p.shape()) + " vs H×W " + std::to_string(h) + "×" +
                                std::to_string(w));
        }
        channels += p.dim(0);
        out.insert(out.end(), p.values().begin(), p.values().end());
    }
    const bool any_grad = grad_enabled() && std::any_of(parts.begin(), parts.end(), [](const Tensor& t) {
                              return t.requires_grad();
                          });
    std::vector<detail::NodePtr> nodes;
    for (const auto& p : parts) nodes.push_back(p.node());
    return detail::make_result("concat_channels", {channels, h, w}, std::move(out), any_grad,
                               [nodes](std::span<const double> g) {
                                   std::size_t off = 0;
                                   for (const auto& n : nodes) {
                                       if (double* gn = detail::grad_target(n)) {
                                           for (std::size_t i = 0; i < n->value.size(); ++i) gn[i] += g[off + i];
                                       }
                                       off += n->value.size();
                                   }
                               });
}

/// Channels [begin, begin+count) of a C×H×W map.
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
    detail::require_rank(x, 3, "slice_channels");
    if (begin + count > x.dim(0) || count == 0) {
        throw ShapeMismatch("slice_channels out of range for " + shape_str(x.shape()));
    }
    const std::size_t hw = x.dim(1) * x.dim(2);
    const auto v = x.values();
    std::vector<double> out(v.begin() + static_cast<long>(begin * hw), v.begin() + static_cast<long>((begin + count) * hw));
    auto xn = x.node();
    return detail::make_result("slice_channels", {count, x.dim(1), x.dim(2)}, std::move(out), {&x},
                               [xn, off = begin * hw](std::span<const double> g) {
                                   double* gx = detail::grad_target(xn);
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
                               });
}

/// Folds each f×f block of pixels into channels (c·f² + dy·f + dx).
inline Tensor space_to_depth(const Tensor& x, std::size_t f) {
    detail::require_rank(x, 3, "space_to_depth");
    const std::size_t c = x.dim(0);
    const std::size_t h = x.dim(1);
    const std::size_t w = x.dim(2);
    if (f == 0 || h % f || w % f) {
        throw ShapeMismatch("space_to_depth: " + shape_str(x.shape()) + " not divisible by " + std::to_string(f));
    }
    const std::size_t oh = h / f;
    const std::size_t ow = w / f;
    std::vector<std::size_t> src_index(c * h * w);
    std::size_t o = 0;
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t dy = 0; dy < f; ++dy)
            for (std::size_t dx = 0; dx < f; ++dx)
                for (std::size_t y = 0; y < oh; ++y)
                    for (std::size_t xx = 0; xx < ow; ++xx) src_index[o++] = (k * h + y * f + dy) * w + xx * f + dx;
    const auto v = x.values();
    std::vector<double> out(src_index.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[src_index[i]];
    auto xn = x.node();
    return detail::make_result("space_to_depth", {c * f * f, oh, ow}, std::move(out), {&x},
                               [xn, idx = std::move(src_index)](std::span<const double> g) {
                                   double* gx = detail::grad_target(xn);
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[idx[i]] += g[i];
                               });
}

inline Tensor avg_pool(const Tensor& x, std::size_t f) {
    detail::require_rank(x, 3, "avg_pool");
    const std::size_t c = x.dim(0);
    const std::size_t h = x.dim(1);
    const std::size_t w = x.dim(2);
    if (f == 0 || h % f || w % f) {
        throw ShapeMismatch("avg_pool: " + shape_str(x.shape()) + " not divisible by " + std::to_string(f));
    }
    const std::size_t oh = h / f;
    const std::size_t ow = w / f;
    const double inv = 1.0 / static_cast<double>(f * f);
    const auto v = x.values();
    std::vector<double> out(c * oh * ow, 0.0);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xx = 0; xx < w; ++xx) out[(k * oh + y / f) * ow + xx / f] += v[(k * h + y) * w + xx];
    for (double& o : out) o *= inv;
    auto xn = x.node();
    return detail::make_result("avg_pool", {c, oh, ow}, std::move(out), {&x},
                               [xn, c, h, w, f, oh, ow, inv](std::span<const double> g) {
                                   double* gx = detail::grad_target(xn);
                                   for (std::size_t k = 0; k < c; ++k)
                                       for (std::size_t y = 0; y < h; ++y)
                                           for (std::size_t xx = 0; xx < w; ++xx)
                                               gx[(k * h + y) * w + xx] += inv * g[(k * oh + y / f) * ow + xx / f];
                               });
}

inline Tensor upsample_nearest(const Tensor& x, std::size_t f) {
    detail::require_rank(x, 3, "upsample_nearest");
    const std::size_t c = x.dim(0);
    const std::size_t h = x.dim(1);
    const std::size_t w = x.dim(2);
    const std::size_t oh = h * f;
    const std::size_t ow = w * f;
    const auto v = x.values();
    std::vector<double> out(c * oh * ow);
    for (std::size_t k = 0; k < c; ++k)
        for (std::size_t y = 0; y < oh; ++y)
            for (std::size_t xx = 0; xx < ow; ++xx) out[(k * oh + y) * ow + xx] = v[(k * h + y / f) * w + xx / f];
    auto xn = x.node();
    return detail::make_result("upsample_nearest", {c, oh, ow}, std::move(out), {&x},
                               [xn, c, h, w, f, oh, ow](std::span<const double> g) {
                                   double* gx = detail::grad_target(xn);
                                   for (std::size_t k = 0; k < c; ++k)
                                       for (std::size_t y = 0; y < oh; ++y)
                                           for (std::size_t xx = 0; xx < ow; ++xx)
                                               gx[(k * h + y / f) * w + xx / f] += g[(k * oh + y) * ow + xx];
                               });
}

// ---------------------------------------------------------------------------
// Reductions

enum class Reduction { Sum, Mean, MeanAbs };

/// Reduces over `axes`, removing them. Reducing every axis yields shape [1].
inline Tensor reduce(const Tensor& x, Reduction kind, std::vector<std::size_t> axes) {
    const std::size_t rank = x.rank();
    std::vector<bool> reduced(rank, false);
    for (std::size_t a : axes) {
        if (a >= rank || reduced[a]) {
            throw BadAxis("reduce: axis " + std::to_string(a) + " invalid for shape " + shape_str(x.shape()));
        }
        reduced[a] = true;
    }
    Shape out_shape;
    std::size_t count = 1;
    for (std::size_t a = 0; a < rank; ++a) {
        if (reduced[a]) {
            count *= x.dim(a);
        } else {
            out_shape.push_back(x.dim(a));
        }
    }
    if (out_shape.empty()) out_shape = {1};

    // Flat output index of every input element.
    std::vector<std::size_t> target(x.numel());
    {
        std::vector<std::size_t> idx(rank, 0);
        std::vector<std::size_t> ostride(rank, 0);
        std::size_t s = 1;
        for (std::size_t a = rank; a-- > 0;) {
            if (!reduced[a]) {
                ostride[a] = s;
                s *= x.dim(a);
            }
        }
        for (std::size_t flat = 0; flat < target.size(); ++flat) {
            std::size_t o = 0;
            for (std::size_t a = 0; a < rank; ++a) o += idx[a] * ostride[a];
            target[flat] = o;
            for (std::size_t a = rank; a-- > 0;) {
                if (++idx[a] < x.dim(a)) break;
                idx[a] = 0;
            }
        }
    }

    const double factor = kind == Reduction::Sum ? 1.0 : 1.0 / static_cast<double>(count);
    const auto v = x.values();
    std::vector<double> out(shape_numel(out_shape), 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[target[i]] += kind == Reduction::MeanAbs ? std::abs(v[i]) : v[i];
    }
    if (kind != Reduction::Sum) {
        for (double& o : out) o *= factor;
    }
    auto xn = x.node();
    return detail::make_result("reduce", std::move(out_shape), std::move(out), {&x},
                               [xn, kind, factor, target = std::move(target)](std::span<const double> g) {
                                   double* gx = detail::grad_target(xn);
                                   for (std::size_t i = 0; i < target.size(); ++i) {
                                       double d = g[target[i]] * factor;
                                       if (kind == Reduction::MeanAbs) {
                                           const double xv = xn->value[i];
                                           d *= xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0);
                                       }
                                       gx[i] += d;
                                   }
                               });
}

inline Tensor sum(const Tensor& x) {
    const auto v = x.values();
    double s = 0.0;
    for (double a : v) s += a;
    auto xn = x.node();
    return detail::make_result("sum", {1}, {s}, {&x}, [xn](std::span<const double> g) {
        double* gx = detail::grad_target(xn);
        for (std::size_t i = 0; i < xn->value.size(); ++i) gx[i] += g[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

} // namespace amfd
