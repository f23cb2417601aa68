#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "arlab/tensor.hpp"

namespace arlab {

using NodeId = int32_t;
using NamedTensors = std::map<std::string, Tensor>;

namespace detail {

template <class T>
using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class T>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class T>
MatMap<T> as_matrix(TensorT<T>& t, int64_t r, int64_t c) {
    return MatMap<T>(t.data(), r, c);
}
template <class T>
ConstMatMap<T> as_matrix(const TensorT<T>& t, int64_t r, int64_t c) {
    return ConstMatMap<T>(t.data(), r, c);
}

}  // namespace detail

// Dynamic tape: operations record onto it as they execute, so the recorded
// order is already topological. backward() walks it once in reverse.
//
// All ops are matrix-level: operands are 2-d (or 1-d, treated as a single
// row where noted). The tape owns node values; once written they are never
// mutated, so values are safe to read from other threads.
template <class T = double>
class TapeT {
public:
    using Tensor_ = TensorT<T>;

    enum class Op {
        Leaf,
        MatMul,
        Add,
        Sub,
        Mul,
        AddRowVec,
        MulRowVec,
        Affine,   // alpha * x + beta
        Silu,
        Gelu,
        Tanh,
        Exp,
        Square,
        LayerNorm,
        SoftmaxRows,
        ConcatRows,
        ConcatCols,
        SliceRows,
        SliceCols,
        GatherRows,
        SumAll,
        MeanAll,
        Mse,
        StopGrad,
    };

    struct Node {
        Op op;
        std::vector<NodeId> inputs;
        Tensor_ value;
        const Tensor_* external = nullptr;  // borrowed leaf storage (no copy)
        Tensor_ grad;  // allocated lazily during backward
        bool requires_grad = false;
        bool has_grad = false;
        std::string name;              // leaves only
        double alpha = 0, beta = 0;    // Affine / MatMul transpose flags / slice bounds
        std::vector<int64_t> indices;  // GatherRows
    };

    // Scales one backward rule by (1 + 1e-3). Exists so gradient checking can
    // prove it detects a wrong derivative; never set outside tests.
    bool corrupt_matmul_backward = false;

    size_t size() const { return nodes_.size(); }
    const Tensor_& value(NodeId id) const {
        const Node& n = node(id);
        return n.external ? *n.external : n.value;
    }
    const Node& node(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }
    bool requires_grad(NodeId id) const { return node(id).requires_grad; }

    NodeId leaf(Tensor_ v, bool trainable = false, std::string name = {}) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(v);
        n.requires_grad = trainable;
        n.name = std::move(name);
        return push(std::move(n), /*check_finite=*/true);
    }

    // Leaf that borrows external storage instead of copying it; the referent
    // must outlive the tape.
    NodeId leaf_ref(const Tensor_* v, bool trainable = false, std::string name = {}) {
        Node n;
        n.op = Op::Leaf;
        n.external = v;
        n.requires_grad = trainable;
        n.name = std::move(name);
        return push(std::move(n), /*check_finite=*/false);
    }

    NodeId constant(Tensor_ v) { return leaf(std::move(v), false); }

    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
        const Tensor_& A = value(a);
        const Tensor_& B = value(b);
        require_2d(A, "matmul lhs");
        require_2d(B, "matmul rhs");
        int64_t m = trans_a ? A.dim(1) : A.dim(0);
        int64_t k = trans_a ? A.dim(0) : A.dim(1);
        int64_t kb = trans_b ? B.dim(1) : B.dim(0);
        int64_t n = trans_b ? B.dim(0) : B.dim(1);
        if (k != kb)
            fail("matmul", "inner dimensions " + std::to_string(k) + " vs " + std::to_string(kb) +
                               " (" + shape_str(A.shape()) + " x " + shape_str(B.shape()) + ")");
        Node node = make(Op::MatMul, {a, b}, Tensor_({m, n}));
        node.alpha = trans_a ? 1 : 0;
        node.beta = trans_b ? 1 : 0;
        auto C = detail::as_matrix(node.value, m, n);
        auto Am = detail::as_matrix(A, A.dim(0), A.dim(1));
        auto Bm = detail::as_matrix(B, B.dim(0), B.dim(1));
        if (!trans_a && !trans_b)
            C.noalias() = Am * Bm;
        else if (!trans_a && trans_b)
            C.noalias() = Am * Bm.transpose();
        else if (trans_a && !trans_b)
            C.noalias() = Am.transpose() * Bm;
        else
            C.noalias() = Am.transpose() * Bm.transpose();
        return push(std::move(node));
    }

    NodeId add(NodeId a, NodeId b) { return binary(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::Mul, a, b); }

    // [R,C] + row vector [C]
    NodeId add_rowvec(NodeId a, NodeId v) {
        const Tensor_& A = value(a);
        const Tensor_& V = value(v);
        if (V.numel() != A.cols())
            fail("add_rowvec", "vector length " + std::to_string(V.numel()) + " vs cols " + std::to_string(A.cols()));
        Node node = make(Op::AddRowVec, {a, v}, A);
        for (int64_t r = 0; r < node.value.rows(); ++r)
            for (int64_t c = 0; c < node.value.cols(); ++c) node.value.at(r, c) += V[c];
        return push(std::move(node));
    }

    // [R,C] * row vector [C]
    NodeId mul_rowvec(NodeId a, NodeId v) {
        const Tensor_& A = value(a);
        const Tensor_& V = value(v);
        if (V.numel() != A.cols())
            fail("mul_rowvec", "vector length " + std::to_string(V.numel()) + " vs cols " + std::to_string(A.cols()));
        Node node = make(Op::MulRowVec, {a, v}, A);
        for (int64_t r = 0; r < node.value.rows(); ++r)
            for (int64_t c = 0; c < node.value.cols(); ++c) node.value.at(r, c) *= V[c];
        return push(std::move(node));
    }

    NodeId affine(NodeId a, double alpha, double beta) {
        Node node = make(Op::Affine, {a}, value(a));
        node.alpha = alpha;
        node.beta = beta;
        for (int64_t i = 0; i < node.value.numel(); ++i)
            node.value[i] = static_cast<T>(alpha) * node.value[i] + static_cast<T>(beta);
        return push(std::move(node));
    }

    NodeId scale(NodeId a, double alpha) { return affine(a, alpha, 0.0); }

    NodeId silu(NodeId a) {
        return unary(Op::Silu, a, [](T x) { return x * sigmoid(x); });
    }

    NodeId gelu(NodeId a) {
        return unary(Op::Gelu, a, [](T x) {
            return static_cast<T>(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
        });
    }

    NodeId tanh_(NodeId a) {
        return unary(Op::Tanh, a, [](T x) { return std::tanh(x); });
    }

    NodeId exp_(NodeId a) {
        return unary(Op::Exp, a, [](T x) { return std::exp(x); });
    }

    NodeId square(NodeId a) {
        return unary(Op::Square, a, [](T x) { return x * x; });
    }

    // Row-wise normalization without an affine part; eps stabilizes the
    // degenerate constant-row case.
    NodeId layer_norm(NodeId a, double eps = 1e-6) {
        const Tensor_& A = value(a);
        Node node = make(Op::LayerNorm, {a}, Tensor_(A.shape()));
        node.alpha = eps;
        int64_t R = A.rows(), C = A.cols();
        for (int64_t r = 0; r < R; ++r) {
            T mean = 0;
            for (int64_t c = 0; c < C; ++c) mean += A.at(r, c);
            mean /= static_cast<T>(C);
            T var = 0;
            for (int64_t c = 0; c < C; ++c) {
                T d = A.at(r, c) - mean;
                var += d * d;
            }
            var /= static_cast<T>(C);
            T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
            for (int64_t c = 0; c < C; ++c) node.value.at(r, c) = (A.at(r, c) - mean) * inv;
        }
        return push(std::move(node));
    }

    NodeId softmax_rows(NodeId a) {
        const Tensor_& A = value(a);
        Node node = make(Op::SoftmaxRows, {a}, Tensor_(A.shape()));
        int64_t R = A.rows(), C = A.cols();
        for (int64_t r = 0; r < R; ++r) {
            T mx = A.at(r, 0);
            for (int64_t c = 1; c < C; ++c) mx = std::max(mx, A.at(r, c));
            T sum = 0;
            for (int64_t c = 0; c < C; ++c) {
                T e = std::exp(A.at(r, c) - mx);
                node.value.at(r, c) = e;
                sum += e;
            }
            for (int64_t c = 0; c < C; ++c) node.value.at(r, c) /= sum;
        }
        return push(std::move(node));
    }

    NodeId concat_rows(std::span<const NodeId> parts) { return concat(parts, /*along_rows=*/true); }
    NodeId concat_rows(std::initializer_list<NodeId> parts) {
        return concat(std::span<const NodeId>(parts.begin(), parts.size()), true);
    }
    NodeId concat_cols(std::span<const NodeId> parts) { return concat(parts, /*along_rows=*/false); }
    NodeId concat_cols(std::initializer_list<NodeId> parts) {
        return concat(std::span<const NodeId>(parts.begin(), parts.size()), false);
    }

    // Rows [r0, r1) as a new 2-d value.
    NodeId slice_rows(NodeId a, int64_t r0, int64_t r1) {
        const Tensor_& A = value(a);
        if (r0 < 0 || r1 > A.rows() || r0 >= r1)
            fail("slice_rows", "range [" + std::to_string(r0) + "," + std::to_string(r1) + ") on " +
                                   std::to_string(A.rows()) + " rows");
        Node node = make(Op::SliceRows, {a}, Tensor_({r1 - r0, A.cols()}));
        node.alpha = double(r0);
        node.beta = double(r1);
        for (int64_t r = r0; r < r1; ++r)
            for (int64_t c = 0; c < A.cols(); ++c) node.value.at(r - r0, c) = A.at(r, c);
        return push(std::move(node));
    }

    NodeId slice_cols(NodeId a, int64_t c0, int64_t c1) {
        const Tensor_& A = value(a);
        if (c0 < 0 || c1 > A.cols() || c0 >= c1)
            fail("slice_cols", "range [" + std::to_string(c0) + "," + std::to_string(c1) + ") on " +
                                   std::to_string(A.cols()) + " cols");
        Node node = make(Op::SliceCols, {a}, Tensor_({A.rows(), c1 - c0}));
        node.alpha = double(c0);
        node.beta = double(c1);
        for (int64_t r = 0; r < A.rows(); ++r)
            for (int64_t c = c0; c < c1; ++c) node.value.at(r, c - c0) = A.at(r, c);
        return push(std::move(node));
    }

    // out[i, :] = a[indices[i], :]; duplicate indices allowed, gradients
    // scatter-add.
    NodeId gather_rows(NodeId a, std::vector<int64_t> indices) {
        const Tensor_& A = value(a);
        for (int64_t ix : indices)
            if (ix < 0 || ix >= A.rows()) fail("gather_rows", "index " + std::to_string(ix) + " out of range");
        Node node = make(Op::GatherRows, {a}, Tensor_({static_cast<int64_t>(indices.size()), A.cols()}));
        node.indices = std::move(indices);
        for (size_t i = 0; i < node.indices.size(); ++i)
            for (int64_t c = 0; c < A.cols(); ++c) node.value.at(int64_t(i), c) = A.at(node.indices[i], c);
        return push(std::move(node));
    }

    NodeId sum_all(NodeId a) {
        Node node = make(Op::SumAll, {a}, Tensor_::scalar(0));
        T s = 0;
        const Tensor_& A = value(a);
        for (int64_t i = 0; i < A.numel(); ++i) s += A[i];
        node.value[0] = s;
        return push(std::move(node));
    }

    NodeId mean_all(NodeId a) {
        Node node = make(Op::MeanAll, {a}, Tensor_::scalar(0));
        T s = 0;
        const Tensor_& A = value(a);
        for (int64_t i = 0; i < A.numel(); ++i) s += A[i];
        node.value[0] = s / static_cast<T>(A.numel());
        return push(std::move(node));
    }

    // mean((a - b)^2) over all elements, as a scalar.
    NodeId mse(NodeId a, NodeId b) {
        const Tensor_& A = value(a);
        const Tensor_& B = value(b);
        if (!A.same_shape(B)) fail("mse", shape_str(A.shape()) + " vs " + shape_str(B.shape()));
        Node node = make(Op::Mse, {a, b}, Tensor_::scalar(0));
        T s = 0;
        for (int64_t i = 0; i < A.numel(); ++i) {
            T d = A[i] - B[i];
            s += d * d;
        }
        node.value[0] = s / static_cast<T>(A.numel());
        return push(std::move(node));
    }

    // Identity forward; blocks all gradient flow into its input.
    NodeId stop_grad(NodeId a) {
        Node node = make(Op::StopGrad, {a}, value(a));
        node.requires_grad = false;
        return push(std::move(node));
    }

    // Reverse pass from a scalar objective. Every node is visited exactly
    // once; gradients accumulate into nodes that require them.
    void backward(NodeId objective) {
        Node& obj = nodes_[static_cast<size_t>(objective)];
        if (value(objective).numel() != 1)
            throw ShapeError("backward objective must be scalar, got " + shape_str(value(objective).shape()));
        ensure_grad(objective);
        obj.grad[0] = T(1);
        for (int64_t i = objective; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.has_grad || !n.requires_grad) continue;
            backward_node(n);
        }
    }

    // Gradient of a leaf (zeros if it never received one).
    Tensor_ grad(NodeId id) const {
        const Node& n = node(id);
        if (n.has_grad) return n.grad;
        return Tensor_(value(id).shape());
    }

    // Named trainable leaves, in creation order.
    std::vector<std::pair<std::string, NodeId>> trainable_leaves() const {
        std::vector<std::pair<std::string, NodeId>> out;
        for (size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i].op == Op::Leaf && nodes_[i].requires_grad)
                out.emplace_back(nodes_[i].name, static_cast<NodeId>(i));
        return out;
    }

private:
    static T sigmoid(T x) { return T(1) / (T(1) + std::exp(-x)); }

    void require_2d(const Tensor_& t, const char* what) {
        if (t.ndim() != 2) fail(what, "expected 2-d tensor, got " + shape_str(t.shape()));
    }

    [[noreturn]] void fail(const std::string& op, const std::string& msg) {
        throw ShapeError(op + " (node " + std::to_string(nodes_.size()) + "): " + msg);
    }

    Node make(Op op, std::vector<NodeId> inputs, Tensor_ value) {
        Node n;
        n.op = op;
        n.requires_grad = false;
        for (NodeId id : inputs) n.requires_grad |= node(id).requires_grad;
        n.inputs = std::move(inputs);
        n.value = std::move(value);
        return n;
    }

    NodeId push(Node n, bool check_finite = true) {
        if (check_finite && !n.value.all_finite())
            throw NonFiniteError("non-finite value produced by " + op_name(n.op) + " (node " +
                                 std::to_string(nodes_.size()) + (n.name.empty() ? "" : ", '" + n.name + "'") + ")");
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId binary(Op op, NodeId a, NodeId b) {
        const Tensor_& A = value(a);
        const Tensor_& B = value(b);
        if (!A.same_shape(B)) fail(op_name(op), shape_str(A.shape()) + " vs " + shape_str(B.shape()));
        Node node = make(op, {a, b}, Tensor_(A.shape()));
        for (int64_t i = 0; i < A.numel(); ++i) {
            switch (op) {
                case Op::Add: node.value[i] = A[i] + B[i]; break;
                case Op::Sub: node.value[i] = A[i] - B[i]; break;
                case Op::Mul: node.value[i] = A[i] * B[i]; break;
                default: fail("binary", "bad op");
            }
        }
        return push(std::move(node));
    }

    template <class F>
    NodeId unary(Op op, NodeId a, F&& f) {
        const Tensor_& A = value(a);
        Node node = make(op, {a}, Tensor_(A.shape()));
        for (int64_t i = 0; i < A.numel(); ++i) node.value[i] = f(A[i]);
        return push(std::move(node));
    }

    NodeId concat(std::span<const NodeId> parts, bool along_rows) {
        if (parts.empty()) fail("concat", "no inputs");
        int64_t fixed = along_rows ? value(parts[0]).cols() : value(parts[0]).rows();
        int64_t total = 0;
        for (NodeId id : parts) {
            const Tensor_& P = value(id);
            int64_t f = along_rows ? P.cols() : P.rows();
            if (f != fixed) fail("concat", "mismatched " + std::string(along_rows ? "cols" : "rows"));
            total += along_rows ? P.rows() : P.cols();
        }
        Tensor_ out = along_rows ? Tensor_({total, fixed}) : Tensor_({fixed, total});
        int64_t off = 0;
        for (NodeId id : parts) {
            const Tensor_& P = value(id);
            if (along_rows) {
                for (int64_t r = 0; r < P.rows(); ++r)
                    for (int64_t c = 0; c < P.cols(); ++c) out.at(off + r, c) = P.at(r, c);
                off += P.rows();
            } else {
                for (int64_t r = 0; r < P.rows(); ++r)
                    for (int64_t c = 0; c < P.cols(); ++c) out.at(r, off + c) = P.at(r, c);
                off += P.cols();
            }
        }
        Node node = make(along_rows ? Op::ConcatRows : Op::ConcatCols,
                         std::vector<NodeId>(parts.begin(), parts.end()), std::move(out));
        return push(std::move(node));
    }

    void ensure_grad(NodeId id) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.has_grad) {
            n.grad = Tensor_(value(id).shape());
            n.has_grad = true;
        }
    }

    // Accumulate g into input id if it participates in differentiation.
    void accumulate(NodeId id, const Tensor_& g) {
        Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad) return;
        ensure_grad(id);
        n.grad += g;
    }

    void backward_node(Node& n) {
        switch (n.op) {
            case Op::Leaf:
            case Op::StopGrad:
                return;
            case Op::MatMul: {
                const bool ta = n.alpha != 0, tb = n.beta != 0;
                const Tensor_& A = value(n.inputs[0]);
                const Tensor_& B = value(n.inputs[1]);
                auto dC = detail::as_matrix(n.grad, n.value.dim(0), n.value.dim(1));
                auto Am = detail::as_matrix(A, A.dim(0), A.dim(1));
                auto Bm = detail::as_matrix(B, B.dim(0), B.dim(1));
                T corrupt = corrupt_matmul_backward ? T(1.001) : T(1);
                if (requires_grad(n.inputs[0])) {
                    Tensor_ dA(A.shape());
                    auto dAm = detail::as_matrix(dA, A.dim(0), A.dim(1));
                    if (!ta && !tb)
                        dAm.noalias() = dC * Bm.transpose();
                    else if (!ta && tb)
                        dAm.noalias() = dC * Bm;
                    else if (ta && !tb)
                        dAm.noalias() = Bm * dC.transpose();
                    else
                        dAm.noalias() = Bm.transpose() * dC.transpose();
                    if (corrupt_matmul_backward) dA.scale_inplace(corrupt);
                    accumulate(n.inputs[0], dA);
                }
                if (requires_grad(n.inputs[1])) {
                    Tensor_ dB(B.shape());
                    auto dBm = detail::as_matrix(dB, B.dim(0), B.dim(1));
                    if (!ta && !tb)
                        dBm.noalias() = Am.transpose() * dC;
                    else if (!ta && tb)
                        dBm.noalias() = dC.transpose() * Am;
                    else if (ta && !tb)
                        dBm.noalias() = Am * dC;
                    else
                        dBm.noalias() = dC.transpose() * Am.transpose();
                    if (corrupt_matmul_backward) dB.scale_inplace(corrupt);
                    accumulate(n.inputs[1], dB);
                }
                return;
            }
            case Op::Add:
                accumulate(n.inputs[0], n.grad);
                accumulate(n.inputs[1], n.grad);
                return;
            case Op::Sub: {
                accumulate(n.inputs[0], n.grad);
                if (requires_grad(n.inputs[1])) {
                    Tensor_ g = n.grad;
                    g.scale_inplace(T(-1));
                    accumulate(n.inputs[1], g);
                }
                return;
            }
            case Op::Mul: {
                const Tensor_& A = value(n.inputs[0]);
                const Tensor_& B = value(n.inputs[1]);
                if (requires_grad(n.inputs[0])) {
                    Tensor_ g(A.shape());
                    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * B[i];
                    accumulate(n.inputs[0], g);
                }
                if (requires_grad(n.inputs[1])) {
                    Tensor_ g(B.shape());
                    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * A[i];
                    accumulate(n.inputs[1], g);
                }
                return;
            }
            case Op::AddRowVec: {
                accumulate(n.inputs[0], n.grad);
                if (requires_grad(n.inputs[1])) {
                    const Tensor_& V = value(n.inputs[1]);
                    Tensor_ g(V.shape());
                    for (int64_t r = 0; r < n.grad.rows(); ++r)
                        for (int64_t c = 0; c < n.grad.cols(); ++c) g[c] += n.grad.at(r, c);
                    accumulate(n.inputs[1], g);
                }
                return;
            }
            case Op::MulRowVec: {
                const Tensor_& X = value(n.inputs[0]);
                const Tensor_& V = value(n.inputs[1]);
                if (requires_grad(n.inputs[0])) {
                    Tensor_ g(X.shape());
                    for (int64_t r = 0; r < X.rows(); ++r)
                        for (int64_t c = 0; c < X.cols(); ++c) g.at(r, c) = n.grad.at(r, c) * V[c];
                    accumulate(n.inputs[0], g);
                }
                if (requires_grad(n.inputs[1])) {
                    Tensor_ g(V.shape());
                    for (int64_t r = 0; r < X.rows(); ++r)
                        for (int64_t c = 0; c < X.cols(); ++c) g[c] += n.grad.at(r, c) * X.at(r, c);
                    accumulate(n.inputs[1], g);
                }
                return;
            }
            case Op::Affine: {
                Tensor_ g = n.grad;
                g.scale_inplace(static_cast<T>(n.alpha));
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::Silu: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g(X.shape());
                for (int64_t i = 0; i < g.numel(); ++i) {
                    T s = sigmoid(X[i]);
                    g[i] = n.grad[i] * s * (T(1) + X[i] * (T(1) - s));
                }
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::Gelu: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g(X.shape());
                const T inv_sqrt2pi = T(1) / std::sqrt(T(2) * static_cast<T>(std::numbers::pi));
                for (int64_t i = 0; i < g.numel(); ++i) {
                    T phi = static_cast<T>(0.5) * (T(1) + std::erf(X[i] / std::sqrt(T(2))));
                    T pdf = inv_sqrt2pi * std::exp(-X[i] * X[i] / T(2));
                    g[i] = n.grad[i] * (phi + X[i] * pdf);
                }
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::Tanh: {
                Tensor_ g(n.value.shape());
                for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * (T(1) - n.value[i] * n.value[i]);
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::Exp: {
                Tensor_ g(n.value.shape());
                for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * n.value[i];
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::Square: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g(X.shape());
                for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * T(2) * X[i];
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::LayerNorm: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g(X.shape());
                int64_t R = X.rows(), C = X.cols();
                for (int64_t r = 0; r < R; ++r) {
                    T mean = 0, var = 0;
                    for (int64_t c = 0; c < C; ++c) mean += X.at(r, c);
                    mean /= static_cast<T>(C);
                    for (int64_t c = 0; c < C; ++c) {
                        T d = X.at(r, c) - mean;
                        var += d * d;
                    }
                    var /= static_cast<T>(C);
                    T inv = T(1) / std::sqrt(var + static_cast<T>(n.alpha));
                    T mean_dy = 0, mean_dyy = 0;
                    for (int64_t c = 0; c < C; ++c) {
                        mean_dy += n.grad.at(r, c);
                        mean_dyy += n.grad.at(r, c) * n.value.at(r, c);
                    }
                    mean_dy /= static_cast<T>(C);
                    mean_dyy /= static_cast<T>(C);
                    for (int64_t c = 0; c < C; ++c)
                        g.at(r, c) = inv * (n.grad.at(r, c) - mean_dy - n.value.at(r, c) * mean_dyy);
                }
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::SoftmaxRows: {
                Tensor_ g(n.value.shape());
                int64_t R = n.value.rows(), C = n.value.cols();
                for (int64_t r = 0; r < R; ++r) {
                    T dot = 0;
                    for (int64_t c = 0; c < C; ++c) dot += n.grad.at(r, c) * n.value.at(r, c);
                    for (int64_t c = 0; c < C; ++c)
                        g.at(r, c) = n.value.at(r, c) * (n.grad.at(r, c) - dot);
                }
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::ConcatRows: {
                int64_t off = 0;
                for (NodeId id : n.inputs) {
                    const Tensor_& P = value(id);
                    if (requires_grad(id)) {
                        Tensor_ g(P.shape());
                        for (int64_t r = 0; r < P.rows(); ++r)
                            for (int64_t c = 0; c < P.cols(); ++c) g.at(r, c) = n.grad.at(off + r, c);
                        accumulate(id, g);
                    }
                    off += P.rows();
                }
                return;
            }
            case Op::ConcatCols: {
                int64_t off = 0;
                for (NodeId id : n.inputs) {
                    const Tensor_& P = value(id);
                    if (requires_grad(id)) {
                        Tensor_ g(P.shape());
                        for (int64_t r = 0; r < P.rows(); ++r)
                            for (int64_t c = 0; c < P.cols(); ++c) g.at(r, c) = n.grad.at(r, off + c);
                        accumulate(id, g);
                    }
                    off += P.cols();
                }
                return;
            }
            case Op::SliceRows: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g(X.shape());
                int64_t r0 = static_cast<int64_t>(n.alpha);
                for (int64_t r = 0; r < n.value.rows(); ++r)
                    for (int64_t c = 0; c < n.value.cols(); ++c) g.at(r0 + r, c) = n.grad.at(r, c);
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::SliceCols: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g(X.shape());
                int64_t c0 = static_cast<int64_t>(n.alpha);
                for (int64_t r = 0; r < n.value.rows(); ++r)
                    for (int64_t c = 0; c < n.value.cols(); ++c) g.at(r, c0 + c) = n.grad.at(r, c);
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::GatherRows: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g(X.shape());
                for (size_t i = 0; i < n.indices.size(); ++i)
                    for (int64_t c = 0; c < X.cols(); ++c) g.at(n.indices[i], c) += n.grad.at(int64_t(i), c);
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::SumAll: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g = Tensor_::full(X.shape(), n.grad[0]);
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::MeanAll: {
                const Tensor_& X = value(n.inputs[0]);
                Tensor_ g = Tensor_::full(X.shape(), n.grad[0] / static_cast<T>(X.numel()));
                accumulate(n.inputs[0], g);
                return;
            }
            case Op::Mse: {
                const Tensor_& A = value(n.inputs[0]);
                const Tensor_& B = value(n.inputs[1]);
                T f = T(2) * n.grad[0] / static_cast<T>(A.numel());
                if (requires_grad(n.inputs[0])) {
                    Tensor_ g(A.shape());
                    for (int64_t i = 0; i < g.numel(); ++i) g[i] = f * (A[i] - B[i]);
                    accumulate(n.inputs[0], g);
                }
                if (requires_grad(n.inputs[1])) {
                    Tensor_ g(B.shape());
                    for (int64_t i = 0; i < g.numel(); ++i) g[i] = -f * (A[i] - B[i]);
                    accumulate(n.inputs[1], g);
                }
                return;
            }
        }
    }

    static std::string op_name(Op op) {
        switch (op) {
            case Op::Leaf: return "leaf";
            case Op::MatMul: return "matmul";
            case Op::Add: return "add";
            case Op::Sub: return "sub";
            case Op::Mul: return "mul";
            case Op::AddRowVec: return "add_rowvec";
            case Op::MulRowVec: return "mul_rowvec";
            case Op::Affine: return "affine";
            case Op::Silu: return "silu";
            case Op::Gelu: return "gelu";
            case Op::Tanh: return "tanh";
            case Op::Exp: return "exp";
            case Op::Square: return "square";
            case Op::LayerNorm: return "layer_norm";
            case Op::SoftmaxRows: return "softmax_rows";
            case Op::ConcatRows: return "concat_rows";
            case Op::ConcatCols: return "concat_cols";
            case Op::SliceRows: return "slice_rows";
            case Op::SliceCols: return "slice_cols";
            case Op::GatherRows: return "gather_rows";
            case Op::SumAll: return "sum_all";
            case Op::MeanAll: return "mean_all";
            case Op::Mse: return "mse";
            case Op::StopGrad: return "stop_grad";
        }
        return "?";
    }

    std::vector<Node> nodes_;
};

using Tape = TapeT<double>;

// A graph is a function that records operations onto a fresh tape given the
// named inputs, and reports which node is the scalar objective plus any
// named outputs of interest.
struct GraphOutputs {
    NodeId objective = -1;
    std::vector<std::pair<std::string, NodeId>> outputs;
};

using GraphFn = std::function<GraphOutputs(Tape&, const NamedTensors&)>;

struct ForwardBackwardResult {
    NamedTensors outputs;
    NamedTensors grads;  // one entry per trainable leaf
    double objective = 0;
};

// Runs the graph forward, then reverse-mode through the scalar objective.
inline ForwardBackwardResult forward_backward(const GraphFn& fn, const NamedTensors& inputs) {
    Tape tape;
    GraphOutputs g = fn(tape, inputs);
    ForwardBackwardResult res;
    for (auto& [name, id] : g.outputs) res.outputs[name] = tape.value(id);
    tape.backward(g.objective);
    res.objective = tape.value(g.objective).item();
    for (auto& [name, id] : tape.trainable_leaves()) res.grads[name] = tape.grad(id);
    return res;
}

// Max relative error between reverse-mode gradients and central finite
// differences, taken over every element of every trainable leaf.
inline double grad_check(const GraphFn& fn, const NamedTensors& point, double h = 1e-5) {
    Tape tape;
    GraphOutputs g = fn(tape, point);
    if (tape.value(g.objective).numel() != 1)
        throw ShapeError("grad_check objective must be scalar");
    tape.backward(g.objective);

    double max_err = 0;
    for (auto& [name, id] : tape.trainable_leaves()) {
        if (!point.count(name))
            throw ShapeError("grad_check: trainable leaf '" + name + "' missing from point");
        Tensor analytic = tape.grad(id);
        for (int64_t i = 0; i < analytic.numel(); ++i) {
            NamedTensors p = point;
            p[name][i] += h;
            Tape tp;
            GraphOutputs gp = fn(tp, p);
            double fp = tp.value(gp.objective).item();
            p[name][i] -= 2 * h;
            Tape tm;
            GraphOutputs gm = fn(tm, p);
            double fm = tm.value(gm.objective).item();
            double numeric = (fp - fm) / (2 * h);
            double err = std::abs(analytic[i] - numeric) /
                         (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

}  // namespace arlab
