#pragma once

// Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//
// Every op is a free function templated on the scalar type. When a tape is
// active on the calling thread (see BasicTapeScope) and at least one input
// requires a gradient, the op appends its backward rule to that tape.
// Without an active tape, ops run in inference mode and record nothing.
//
// Storage is T (float for training, double for reference checks); reductions,
// norms, softmax and cross-entropy accumulate in double.

#include "sinkdiff/errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace sinkdiff {

using Shape = std::vector<std::size_t>;
using TokenId = std::int32_t;

inline std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

/// Additive bias value standing in for -infinity in attention masks.
template <class T>
constexpr T mask_sentinel() noexcept {
    return std::numeric_limits<T>::lowest();
}

namespace detail {

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until a gradient reaches this node
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() != data.size()) {
            grad.assign(data.size(), T(0));
        }
    }
};

} // namespace detail

template <class T>
class BasicTensor {
public:
    using value_type = T;
    using Node = detail::TensorNode<T>;

    BasicTensor() = default;

    BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false)
        : node_(std::make_shared<Node>()) {
        if (shape_size(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_string(shape));
        }
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static BasicTensor zeros(Shape shape, bool requires_grad = false) {
        const std::size_t n = shape_size(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static BasicTensor full(Shape shape, T value) {
        const std::size_t n = shape_size(shape);
        return BasicTensor(std::move(shape), std::vector<T>(n, value));
    }

    static BasicTensor scalar(T value) { return BasicTensor({1}, {value}); }

    static BasicTensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
        std::vector<T> data;
        std::size_t cols = rows.size() ? rows.begin()->size() : 0;
        for (const auto& row : rows) {
            if (row.size() != cols) {
                throw DimensionError("ragged matrix literal");
            }
            data.insert(data.end(), row.begin(), row.end());
        }
        return BasicTensor({rows.size(), cols}, std::move(data));
    }

    bool defined() const noexcept { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->data.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }

    std::span<const T> data() const { return node_->data; }
    std::span<T> mutable_data() { return node_->data; }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return !node_->grad.empty(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    T item() const {
        if (size() != 1) {
            throw RankError("item() on tensor of shape " + shape_string(shape()));
        }
        return node_->data[0];
    }

    T at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }

    void zero_grad() {
        if (node_) {
            std::fill(node_->grad.begin(), node_->grad.end(), T(0));
        }
    }

    /// Copy of the values with no gradient history.
    BasicTensor detach() const { return BasicTensor(shape(), node_->data); }

    const std::shared_ptr<Node>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

template <class To, class From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
    std::vector<To> out(t.data().begin(), t.data().end());
    return BasicTensor<To>(t.shape(), std::move(out), t.requires_grad());
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class T>
class BasicTape {
public:
    using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

    struct Operation {
        std::string_view name;
        std::vector<NodePtr> inputs;
        NodePtr output;
        std::function<void()> backward;
    };

    BasicTape() = default;
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;

    void record(std::string_view name, std::vector<NodePtr> inputs, NodePtr output,
                std::function<void()> backward) {
        ops_.push_back({name, std::move(inputs), std::move(output), std::move(backward)});
    }

    std::size_t size() const noexcept { return ops_.size(); }
    const std::vector<Operation>& operations() const noexcept { return ops_; }

    /// Replays the tape in reverse recording order from a scalar loss.
    /// Intermediate gradients are reset on every call; leaf gradients accumulate.
    /// Returns the number of operations whose backward rule ran.
    std::size_t backward(const BasicTensor<T>& loss) {
        if (!loss.defined() || loss.size() != 1) {
            throw RankError("backward requires a scalar loss, got shape " +
                            (loss.defined() ? shape_string(loss.shape()) : std::string("<undefined>")));
        }
        for (auto& op : ops_) {
            op.output->grad.clear();
        }
        auto& seed = *loss.node();
        seed.ensure_grad();
        seed.grad[0] += T(1);

        std::size_t replayed = 0;
        for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
            if (it->output->grad.empty()) {
                continue;
            }
            it->backward();
            ++replayed;
        }
        return replayed;
    }

    void clear() { ops_.clear(); }

    static BasicTape* current() noexcept { return current_; }

private:
    template <class U>
    friend class BasicTapeScope;

    std::vector<Operation> ops_;
    static inline thread_local BasicTape* current_ = nullptr;
};

/// Makes `tape` the recording tape of this thread for the scope's lifetime.
template <class T>
class BasicTapeScope {
public:
    explicit BasicTapeScope(BasicTape<T>& tape) : previous_(BasicTape<T>::current_) {
        BasicTape<T>::current_ = &tape;
    }
    ~BasicTapeScope() { BasicTape<T>::current_ = previous_; }
    BasicTapeScope(const BasicTapeScope&) = delete;
    BasicTapeScope& operator=(const BasicTapeScope&) = delete;

private:
    BasicTape<T>* previous_;
};

/// Backward through the thread's current tape.
template <class T>
std::size_t backward(const BasicTensor<T>& loss) {
    auto* tape = BasicTape<T>::current();
    if (!tape) {
        throw TapeError("backward called with no active tape");
    }
    return tape->backward(loss);
}

using Tensor = BasicTensor<float>;
using Tape = BasicTape<float>;
using TapeScope = BasicTapeScope<float>;

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <class T, class... Ts>
bool any_requires_grad(const BasicTensor<T>& first, const Ts&... rest) {
    return first.requires_grad() || (rest.requires_grad() || ...);
}

/// Creates the output tensor and, when recording, registers `rule`.
/// `rule` is invoked as rule(output_node) during backward.
template <class T, class Rule>
BasicTensor<T> emit(std::string_view name, Shape shape, std::vector<T> data,
                    std::vector<std::shared_ptr<TensorNode<T>>> inputs, bool needs_grad, Rule rule) {
    BasicTensor<T> out(std::move(shape), std::move(data));
    auto* tape = BasicTape<T>::current();
    if (tape && needs_grad) {
        out.set_requires_grad(true);
        auto out_node = out.node();
        TensorNode<T>* raw = out_node.get();
        tape->record(name, std::move(inputs), std::move(out_node),
                     [raw, rule = std::move(rule)]() mutable { rule(*raw); });
    }
    return out;
}

template <class T>
void require_rank2(const BasicTensor<T>& t, std::string_view op) {
    if (!t.defined() || t.rank() != 2) {
        throw RankError(std::string(op) + " expects a rank-2 tensor, got " +
                        (t.defined() ? shape_string(t.shape()) : std::string("<undefined>")));
    }
}

template <class T>
void require_same_shape(const BasicTensor<T>& a, const BasicTensor<T>& b, std::string_view op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                             shape_string(b.shape()));
    }
}

template <class T>
using RowMajorMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstRowMajorMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// c[m x n] += a[m x k] * b[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    RowMajorMap<T>(c, M, N).noalias() += ConstRowMajorMap<T>(a, M, K) * ConstRowMajorMap<T>(b, K, N);
}

// c[m x k] += a[m x n] * b^T with b[k x n]
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t n, std::size_t k) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    RowMajorMap<T>(c, M, K).noalias() += ConstRowMajorMap<T>(a, M, N) * ConstRowMajorMap<T>(b, K, N).transpose();
}

// c[k x n] += a^T * b with a[m x k], b[m x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
    const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), N = static_cast<Eigen::Index>(n);
    RowMajorMap<T>(c, K, N).noalias() += ConstRowMajorMap<T>(a, M, K).transpose() * ConstRowMajorMap<T>(b, M, N);
}

template <class T>
std::vector<T> transposed(std::span<const T> src, std::size_t rows, std::size_t cols) {
    std::vector<T> out(src.size());
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[j * rows + i] = src[i * cols + j];
        }
    }
    return out;
}

template <class T>
T sigmoid_scalar(T x) {
    return static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

} // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    }
    std::vector<T> out(m * n, T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    auto an = a.node(), bn = b.node();
    return detail::emit<T>("matmul", {m, n}, std::move(out), {an, bn}, detail::any_requires_grad(a, b),
                           [an, bn, m, k, n](detail::TensorNode<T>& o) {
                               if (an->requires_grad) {
                                   an->ensure_grad();
                                   detail::gemm_nt(o.grad.data(), bn->data.data(), an->grad.data(), m, n, k);
                               }
                               if (bn->requires_grad) {
                                   bn->ensure_grad();
                                   detail::gemm_tn(an->data.data(), o.grad.data(), bn->grad.data(), m, k, n);
                               }
                           });
}

template <class T>
BasicTensor<T> transpose(const BasicTensor<T>& a) {
    detail::require_rank2(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    auto an = a.node();
    return detail::emit<T>("transpose", {c, r}, detail::transposed<T>(a.data(), r, c), {an}, a.requires_grad(),
                           [an, r, c](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < r; ++i) {
                                   for (std::size_t j = 0; j < c; ++j) {
                                       an->grad[i * c + j] += o.grad[j * r + i];
                                   }
                               }
                           });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
    }
    auto an = a.node();
    std::vector<T> data(a.data().begin(), a.data().end());
    return detail::emit<T>("reshape", std::move(shape), std::move(data), {an}, a.requires_grad(),
                           [an](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                   an->grad[i] += o.grad[i];
                               }
                           });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.size());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] + bd[i];
    }
    auto an = a.node(), bn = b.node();
    return detail::emit<T>("add", a.shape(), std::move(out), {an, bn}, detail::any_requires_grad(a, b),
                           [an, bn](detail::TensorNode<T>& o) {
                               for (auto* in : {an.get(), bn.get()}) {
                                   if (!in->requires_grad) {
                                       continue;
                                   }
                                   in->ensure_grad();
                                   for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                       in->grad[i] += o.grad[i];
                                   }
                               }
                           });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.size());
    auto ad = a.data(), bd = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] * bd[i];
    }
    auto an = a.node(), bn = b.node();
    return detail::emit<T>("mul", a.shape(), std::move(out), {an, bn}, detail::any_requires_grad(a, b),
                           [an, bn](detail::TensorNode<T>& o) {
                               if (an->requires_grad) {
                                   an->ensure_grad();
                                   for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                       an->grad[i] += o.grad[i] * bn->data[i];
                                   }
                               }
                               if (bn->requires_grad) {
                                   bn->ensure_grad();
                                   for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                       bn->grad[i] += o.grad[i] * an->data[i];
                                   }
                               }
                           });
}

template <class T>
BasicTensor<T> scale(const BasicTensor<T>& a, T factor) {
    std::vector<T> out(a.size());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] * factor;
    }
    auto an = a.node();
    return detail::emit<T>("scale", a.shape(), std::move(out), {an}, a.requires_grad(),
                           [an, factor](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                   an->grad[i] += o.grad[i] * factor;
                               }
                           });
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& a) {
    std::vector<T> out(a.size());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = detail::sigmoid_scalar(ad[i]);
    }
    auto an = a.node();
    return detail::emit<T>("sigmoid", a.shape(), std::move(out), {an}, a.requires_grad(),
                           [an](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                   const T s = o.data[i];
                                   an->grad[i] += o.grad[i] * s * (T(1) - s);
                               }
                           });
}

/// x * sigmoid(x)
template <class T>
BasicTensor<T> silu(const BasicTensor<T>& a) {
    std::vector<T> out(a.size());
    auto ad = a.data();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = ad[i] * detail::sigmoid_scalar(ad[i]);
    }
    auto an = a.node();
    return detail::emit<T>("silu", a.shape(), std::move(out), {an}, a.requires_grad(),
                           [an](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < o.grad.size(); ++i) {
                                   const T x = an->data[i];
                                   const T s = detail::sigmoid_scalar(x);
                                   an->grad[i] += o.grad[i] * (s + x * s * (T(1) - s));
                               }
                           });
}

// ---------------------------------------------------------------------------
// Row-structured ops
// ---------------------------------------------------------------------------

/// Per-row RMS normalization with a learned gain of length cols.
template <class T>
BasicTensor<T> rms_norm(const BasicTensor<T>& x, const BasicTensor<T>& gain, double eps = 1e-6) {
    detail::require_rank2(x, "rms_norm");
    const std::size_t n = x.rows(), d = x.cols();
    if (gain.size() != d) {
        throw DimensionError("rms_norm: gain " + shape_string(gain.shape()) + " does not match " +
                             shape_string(x.shape()));
    }
    std::vector<T> out(n * d);
    std::vector<double> inv(n);
    auto xd = x.data(), gd = gain.data();
    for (std::size_t i = 0; i < n; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = xd[i * d + j];
            ss += v * v;
        }
        inv[i] = 1.0 / std::sqrt(ss / static_cast<double>(d) + eps);
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = static_cast<T>(xd[i * d + j] * inv[i] * gd[j]);
        }
    }
    auto xn = x.node(), gn = gain.node();
    return detail::emit<T>(
        "rms_norm", x.shape(), std::move(out), {xn, gn}, detail::any_requires_grad(x, gain),
        [xn, gn, inv = std::move(inv), n, d](detail::TensorNode<T>& o) {
            if (gn->requires_grad) {
                gn->ensure_grad();
                for (std::size_t j = 0; j < d; ++j) {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        acc += static_cast<double>(o.grad[i * d + j]) * xn->data[i * d + j] * inv[i];
                    }
                    gn->grad[j] += static_cast<T>(acc);
                }
            }
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < n; ++i) {
                    // dx = r * (g*dy - xhat * mean(g*dy*xhat))
                    double dot = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = xn->data[i * d + j] * inv[i];
                        dot += static_cast<double>(o.grad[i * d + j]) * gn->data[j] * xhat;
                    }
                    dot /= static_cast<double>(d);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double xhat = xn->data[i * d + j] * inv[i];
                        const double gy = static_cast<double>(o.grad[i * d + j]) * gn->data[j];
                        xn->grad[i * d + j] += static_cast<T>(inv[i] * (gy - xhat * dot));
                    }
                }
            }
        });
}

/// Gathers rows of `table` ([V x d]) for each id.
template <class T>
BasicTensor<T> embedding(const BasicTensor<T>& table, std::span<const TokenId> ids) {
    detail::require_rank2(table, "embedding");
    const std::size_t vocab = table.rows(), d = table.cols();
    std::vector<T> out(ids.size() * d);
    std::vector<TokenId> idv(ids.begin(), ids.end());
    for (std::size_t i = 0; i < idv.size(); ++i) {
        if (idv[i] < 0 || static_cast<std::size_t>(idv[i]) >= vocab) {
            throw IndexError("embedding: token id " + std::to_string(idv[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(idv[i] * d), d, out.begin() + i * d);
    }
    auto tn = table.node();
    const Shape shape{idv.size(), d};
    return detail::emit<T>("embedding", shape, std::move(out), {tn}, table.requires_grad(),
                           [tn, idv = std::move(idv), d](detail::TensorNode<T>& o) {
                               tn->ensure_grad();
                               for (std::size_t i = 0; i < idv.size(); ++i) {
                                   T* dst = tn->grad.data() + static_cast<std::size_t>(idv[i]) * d;
                                   const T* src = o.grad.data() + i * d;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       dst[j] += src[j];
                                   }
                               }
                           });
}

template <class T>
BasicTensor<T> slice_cols(const BasicTensor<T>& a, std::size_t start, std::size_t width) {
    detail::require_rank2(a, "slice_cols");
    const std::size_t n = a.rows(), d = a.cols();
    if (start + width > d) {
        throw DimensionError("slice_cols: columns [" + std::to_string(start) + ", " +
                             std::to_string(start + width) + ") outside " + shape_string(a.shape()));
    }
    std::vector<T> out(n * width);
    auto ad = a.data();
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(ad.begin() + static_cast<std::ptrdiff_t>(i * d + start), width, out.begin() + i * width);
    }
    auto an = a.node();
    return detail::emit<T>("slice_cols", {n, width}, std::move(out), {an}, a.requires_grad(),
                           [an, n, d, start, width](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t j = 0; j < width; ++j) {
                                       an->grad[i * d + start + j] += o.grad[i * width + j];
                                   }
                               }
                           });
}

template <class T>
BasicTensor<T> concat_cols(const std::vector<BasicTensor<T>>& parts) {
    if (parts.empty()) {
        throw DimensionError("concat_cols: no inputs");
    }
    const std::size_t n = parts.front().rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    std::vector<std::shared_ptr<detail::TensorNode<T>>> nodes;
    bool needs = false;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_cols");
        if (p.rows() != n) {
            throw DimensionError("concat_cols: row mismatch " + shape_string(parts.front().shape()) + " vs " +
                                 shape_string(p.shape()));
        }
        widths.push_back(p.cols());
        total += p.cols();
        nodes.push_back(p.node());
        needs = needs || p.requires_grad();
    }
    std::vector<T> out(n * total);
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto pd = parts[k].data();
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(pd.begin() + static_cast<std::ptrdiff_t>(i * widths[k]), widths[k],
                        out.begin() + i * total + offset);
        }
        offset += widths[k];
    }
    auto captured = nodes;
    return detail::emit<T>("concat_cols", {n, total}, std::move(out), std::move(nodes), needs,
                           [captured, widths, n, total](detail::TensorNode<T>& o) {
                               std::size_t off = 0;
                               for (std::size_t k = 0; k < captured.size(); ++k) {
                                   auto& in = *captured[k];
                                   if (in.requires_grad) {
                                       in.ensure_grad();
                                       for (std::size_t i = 0; i < n; ++i) {
                                           for (std::size_t j = 0; j < widths[k]; ++j) {
                                               in.grad[i * widths[k] + j] += o.grad[i * total + off + j];
                                           }
                                       }
                                   }
                                   off += widths[k];
                               }
                           });
}

template <class T>
BasicTensor<T> select_rows(const BasicTensor<T>& a, std::span<const std::size_t> rows) {
    detail::require_rank2(a, "select_rows");
    const std::size_t d = a.cols();
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    std::vector<T> out(idx.size() * d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] >= a.rows()) {
            throw IndexError("select_rows: row " + std::to_string(idx[r]) + " outside " + shape_string(a.shape()));
        }
        std::copy_n(a.data().begin() + static_cast<std::ptrdiff_t>(idx[r] * d), d, out.begin() + r * d);
    }
    auto an = a.node();
    const Shape shape{idx.size(), d};
    return detail::emit<T>("select_rows", shape, std::move(out), {an}, a.requires_grad(),
                           [an, idx = std::move(idx), d](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t r = 0; r < idx.size(); ++r) {
                                   for (std::size_t j = 0; j < d; ++j) {
                                       an->grad[idx[r] * d + j] += o.grad[r * d + j];
                                   }
                               }
                           });
}

/// Replaces the listed rows with exact zeros; no gradient flows through them.
template <class T>
BasicTensor<T> zero_rows(const BasicTensor<T>& a, std::span<const std::size_t> rows) {
    detail::require_rank2(a, "zero_rows");
    const std::size_t n = a.rows(), d = a.cols();
    std::vector<char> zeroed(n, 0);
    for (auto r : rows) {
        if (r >= n) {
            throw IndexError("zero_rows: row " + std::to_string(r) + " outside " + shape_string(a.shape()));
        }
        zeroed[r] = 1;
    }
    std::vector<T> out(a.data().begin(), a.data().end());
    for (std::size_t i = 0; i < n; ++i) {
        if (zeroed[i]) {
            std::fill_n(out.begin() + static_cast<std::ptrdiff_t>(i * d), d, T(0));
        }
    }
    auto an = a.node();
    return detail::emit<T>("zero_rows", a.shape(), std::move(out), {an}, a.requires_grad(),
                           [an, zeroed = std::move(zeroed), d](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (std::size_t i = 0; i < zeroed.size(); ++i) {
                                   if (zeroed[i]) {
                                       continue;
                                   }
                                   for (std::size_t j = 0; j < d; ++j) {
                                       an->grad[i * d + j] += o.grad[i * d + j];
                                   }
                               }
                           });
}

/// Rotary position encoding applied independently to each head_dim-wide
/// column block. Within a block, dimension i is paired with i + head_dim/2.
template <class T>
BasicTensor<T> rope(const BasicTensor<T>& x, std::span<const std::size_t> positions, std::size_t head_dim,
                    double base) {
    detail::require_rank2(x, "rope");
    const std::size_t n = x.rows(), d = x.cols();
    if (positions.size() != n) {
        throw DimensionError("rope: " + std::to_string(positions.size()) + " positions for " +
                             shape_string(x.shape()));
    }
    if (head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0) {
        throw DimensionError("rope: head_dim " + std::to_string(head_dim) + " incompatible with " +
                             shape_string(x.shape()));
    }
    const std::size_t half = head_dim / 2;
    std::vector<double> cs(n * half), sn(n * half);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < half; ++k) {
            const double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(head_dim));
            const double angle = static_cast<double>(positions[i]) * freq;
            cs[i * half + k] = std::cos(angle);
            sn[i * half + k] = std::sin(angle);
        }
    }
    std::vector<T> out(n * d);
    auto xd = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t h0 = 0; h0 < d; h0 += head_dim) {
            for (std::size_t k = 0; k < half; ++k) {
                const double a = xd[i * d + h0 + k], b = xd[i * d + h0 + half + k];
                const double c = cs[i * half + k], s = sn[i * half + k];
                out[i * d + h0 + k] = static_cast<T>(a * c - b * s);
                out[i * d + h0 + half + k] = static_cast<T>(b * c + a * s);
            }
        }
    }
    auto xn = x.node();
    return detail::emit<T>("rope", x.shape(), std::move(out), {xn}, x.requires_grad(),
                           [xn, cs = std::move(cs), sn = std::move(sn), n, d, head_dim,
                            half](detail::TensorNode<T>& o) {
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i) {
                                   for (std::size_t h0 = 0; h0 < d; h0 += head_dim) {
                                       for (std::size_t k = 0; k < half; ++k) {
                                           const double ga = o.grad[i * d + h0 + k];
                                           const double gb = o.grad[i * d + h0 + half + k];
                                           const double c = cs[i * half + k], s = sn[i * half + k];
                                           xn->grad[i * d + h0 + k] += static_cast<T>(ga * c + gb * s);
                                           xn->grad[i * d + h0 + half + k] += static_cast<T>(gb * c - ga * s);
                                       }
                                   }
                               }
                           });
}

/// Row-wise softmax of x + bias. `bias` (no gradient) has x's shape or one
/// entry per column; entries at mask_sentinel<T>() receive exactly zero weight.
template <class T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& x, const BasicTensor<T>* bias = nullptr) {
    detail::require_rank2(x, "softmax_lastdim");
    const std::size_t n = x.rows(), d = x.cols();
    const bool row_bias = bias && bias->size() == d && bias->shape() != x.shape();
    if (bias && !row_bias && bias->shape() != x.shape()) {
        throw DimensionError("softmax_lastdim: bias " + shape_string(bias->shape()) + " does not broadcast to " +
                             shape_string(x.shape()));
    }
    std::vector<T> out(n * d);
    auto xd = x.data();
    std::vector<double> z(d);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        bool any_open = !bias;
        for (std::size_t j = 0; j < d; ++j) {
            double b = 0.0;
            if (bias) {
                const T bv = bias->data()[row_bias ? j : i * d + j];
                if (bv != mask_sentinel<T>()) {
                    any_open = true;
                }
                b = bv;
            }
            z[j] = static_cast<double>(xd[i * d + j]) + b;
            mx = std::max(mx, z[j]);
        }
        if (!any_open && d > 0) {
            throw DegenerateRowError("softmax_lastdim: row " + std::to_string(i) + " is fully masked");
        }
        double total = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            z[j] = std::exp(z[j] - mx);
            total += z[j];
        }
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = static_cast<T>(z[j] / total);
        }
    }
    auto xn = x.node();
    return detail::emit<T>("softmax", x.shape(), std::move(out), {xn}, x.requires_grad(),
                           [xn, n, d](detail::TensorNode<T>& o) {
                               xn->ensure_grad();
                               for (std::size_t i = 0; i < n; ++i) {
                                   double dot = 0.0;
                                   for (std::size_t j = 0; j < d; ++j) {
                                       dot += static_cast<double>(o.grad[i * d + j]) * o.data[i * d + j];
                                   }
                                   for (std::size_t j = 0; j < d; ++j) {
                                       xn->grad[i * d + j] +=
                                           static_cast<T>(o.data[i * d + j] * (o.grad[i * d + j] - dot));
                                   }
                               }
                           });
}

/// sum_i weight_i * -log softmax(logits_i)[target_i]. Zero-weight rows are
/// skipped entirely (no contribution, no gradient).
template <class T>
BasicTensor<T> cross_entropy_rows(const BasicTensor<T>& logits, std::span<const TokenId> targets,
                                  std::span<const double> weights) {
    detail::require_rank2(logits, "cross_entropy_rows");
    const std::size_t n = logits.rows(), vocab = logits.cols();
    if (targets.size() != n || weights.size() != n) {
        throw DimensionError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets and " +
                             std::to_string(weights.size()) + " weights for logits " +
                             shape_string(logits.shape()));
    }
    std::vector<TokenId> tg(targets.begin(), targets.end());
    std::vector<double> w(weights.begin(), weights.end());
    std::vector<double> probs(n * vocab, 0.0);
    auto ld = logits.data();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (tg[i] < 0 || static_cast<std::size_t>(tg[i]) >= vocab) {
            throw IndexError("cross_entropy_rows: target " + std::to_string(tg[i]) + " outside vocabulary of " +
                             std::to_string(vocab));
        }
        if (w[i] < 0.0) {
            throw ConfigError("cross_entropy_rows: negative row weight");
        }
        if (w[i] == 0.0) {
            continue;
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < vocab; ++j) {
            mx = std::max(mx, static_cast<double>(ld[i * vocab + j]));
        }
        double total = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[i * vocab + j] = std::exp(static_cast<double>(ld[i * vocab + j]) - mx);
            total += probs[i * vocab + j];
        }
        for (std::size_t j = 0; j < vocab; ++j) {
            probs[i * vocab + j] /= total;
        }
        const double log_p = static_cast<double>(ld[i * vocab + static_cast<std::size_t>(tg[i])]) - mx -
                             std::log(total);
        loss += w[i] * -log_p;
    }
    auto ln = logits.node();
    return detail::emit<T>("cross_entropy_rows", {1}, {static_cast<T>(loss)}, {ln}, logits.requires_grad(),
                           [ln, tg = std::move(tg), w = std::move(w), probs = std::move(probs), n,
                            vocab](detail::TensorNode<T>& o) {
                               ln->ensure_grad();
                               const double g = o.grad[0];
                               for (std::size_t i = 0; i < n; ++i) {
                                   if (w[i] == 0.0) {
                                       continue;
                                   }
                                   for (std::size_t j = 0; j < vocab; ++j) {
                                       double p = probs[i * vocab + j];
                                       if (static_cast<TokenId>(j) == tg[i]) {
                                           p -= 1.0;
                                       }
                                       ln->grad[i * vocab + j] += static_cast<T>(g * w[i] * p);
                                   }
                               }
                           });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
    double acc = 0.0;
    for (T v : a.data()) {
        acc += v;
    }
    auto an = a.node();
    return detail::emit<T>("sum", {1}, {static_cast<T>(acc)}, {an}, a.requires_grad(),
                           [an](detail::TensorNode<T>& o) {
                               an->ensure_grad();
                               for (auto& g : an->grad) {
                                   g += o.grad[0];
                               }
                           });
}

template <class T>
BasicTensor<T> mean(const BasicTensor<T>& a) {
    if (a.size() == 0) {
        throw DimensionError("mean of empty tensor");
    }
    return scale(sum(a), static_cast<T>(1.0 / static_cast<double>(a.size())));
}

/// Sums scalar tensors (e.g. per-sequence losses).
template <class T>
BasicTensor<T> add_scalars(const std::vector<BasicTensor<T>>& terms) {
    if (terms.empty()) {
        throw DimensionError("add_scalars: no terms");
    }
    BasicTensor<T> acc = terms.front();
    for (std::size_t i = 1; i < terms.size(); ++i) {
        acc = add(acc, terms[i]);
    }
    return acc;
}

} // namespace sinkdiff
