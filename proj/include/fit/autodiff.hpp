#pragma once

// Reverse-mode autodiff over Matrix-valued nodes.  The tape evaluates
// eagerly: building an op computes its value immediately using the same
// kernels in matrix.hpp that the plain evaluation paths use, so a tape
// forward and a plain forward are bit-identical.  backward() runs one
// reverse sweep and accumulates adjoints for every node below the loss.
//
// The op set is exactly what the episode objective needs; linear-solve
// and log-determinant gradients are routed through a Cholesky factor
// saved at forward time:
//   X = A^{-1} B        :  B_bar += A^{-1} G,  A_bar -= (A^{-1} G) X^T
//   l = log det A       :  A_bar += g * A^{-1}
// (A symmetric positive definite in both cases.)

#include <cstdint>
#include <deque>
#include <utility>
#include <vector>

#include "fit/errors.hpp"
#include "fit/matrix.hpp"

namespace fit::ad {

using NodeId = std::int32_t;

enum class Op : std::uint8_t {
    Constant,
    Leaf,
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Relu,
    Exp,
    Log,
    PowConst,
    SumAll,
    SumRows,
    SumCols,
    LogSumExpRows,
    ConcatCols,
    PsdSolve,
    PsdLogDet,
};

class Tape {
public:
    // ---- graph construction -------------------------------------------

    NodeId constant(Matrix v) { return push(Op::Constant, {}, std::move(v)); }
    NodeId scalar(double v) { return constant(Matrix::scalar(v)); }

    NodeId leaf(Matrix v, bool trainable = true) {
        NodeId id = push(Op::Leaf, {}, std::move(v));
        nodes_[static_cast<std::size_t>(id)].trainable = trainable;
        if (trainable) trainable_.push_back(id);
        return id;
    }

    NodeId add(NodeId a, NodeId b) { return push(Op::Add, {a, b}, ew_add(val(a), val(b))); }
    NodeId sub(NodeId a, NodeId b) { return push(Op::Sub, {a, b}, ew_sub(val(a), val(b))); }
    NodeId mul(NodeId a, NodeId b) { return push(Op::Mul, {a, b}, ew_mul(val(a), val(b))); }

    NodeId matmul(NodeId a, NodeId b) {
        return push(Op::MatMul, {a, b}, fit::matmul(val(a), val(b)));
    }
    NodeId transpose(NodeId a) { return push(Op::Transpose, {a}, fit::transpose(val(a))); }
    NodeId relu(NodeId a) { return push(Op::Relu, {a}, map_relu(val(a))); }
    NodeId exp(NodeId a) { return push(Op::Exp, {a}, map_exp(val(a))); }
    NodeId log(NodeId a) { return push(Op::Log, {a}, map_log(val(a))); }

    NodeId pow_const(NodeId a, double p) {
        NodeId id = push(Op::PowConst, {a}, map_pow(val(a), p));
        nodes_[static_cast<std::size_t>(id)].pconst = p;
        return id;
    }

    NodeId sum_all(NodeId a) { return push(Op::SumAll, {a}, fit::sum_all(val(a))); }
    NodeId sum_rows(NodeId a) { return push(Op::SumRows, {a}, fit::sum_rows(val(a))); }
    NodeId sum_cols(NodeId a) { return push(Op::SumCols, {a}, fit::sum_cols(val(a))); }

    NodeId logsumexp_rows(NodeId a) {
        return push(Op::LogSumExpRows, {a}, fit::logsumexp_rows(val(a)));
    }

    NodeId concat_cols(const std::vector<NodeId>& parts) {
        std::vector<Matrix> vals;
        vals.reserve(parts.size());
        for (NodeId p : parts) vals.push_back(val(p));
        return push(Op::ConcatCols, parts, fit::concat_cols(vals));
    }

    // X = A^{-1} B with A symmetric positive definite.
    NodeId psd_solve(NodeId a, NodeId b) {
        CholeskyFactor f = cholesky(val(a));
        NodeId id = push(Op::PsdSolve, {a, b}, chol_solve(f, val(b)));
        nodes_[static_cast<std::size_t>(id)].chol = std::move(f);
        return id;
    }

    // log det A, A symmetric positive definite; value is 1x1.
    NodeId psd_logdet(NodeId a) {
        CholeskyFactor f = cholesky(val(a));
        NodeId id = push(Op::PsdLogDet, {a}, Matrix::scalar(chol_logdet(f)));
        nodes_[static_cast<std::size_t>(id)].chol = std::move(f);
        return id;
    }

    // ---- access ---------------------------------------------------------

    const Matrix& value(NodeId id) const { return node(id).value; }
    const std::vector<NodeId>& trainable_leaves() const { return trainable_; }
    std::size_t size() const { return nodes_.size(); }

    // ---- reverse pass -----------------------------------------------------

    // Accumulate d(loss)/d(node) for every node reachable below `loss`.
    // The loss must be scalar (1x1).  Grads from a previous backward()
    // call are discarded.
    void backward(NodeId loss) {
        const Node& ln = node(loss);
        if (ln.value.rows != 1 || ln.value.cols != 1) {
            throw DimensionMismatch("backward: loss node must be 1x1, got " +
                                    ln.value.shape_str());
        }
        grads_.assign(nodes_.size(), Matrix());
        // Trainable leaves always report a (possibly zero) gradient.
        for (NodeId t : trainable_) ensure_grad(t);
        ensure_grad(loss)(0, 0) = 1.0;
        have_grads_ = true;

        for (NodeId id = loss; id >= 0; --id) {
            const Node& n = nodes_[static_cast<std::size_t>(id)];
            const Matrix& g = grads_[static_cast<std::size_t>(id)];
            if (g.size() == 0) continue;  // not reached from the loss
            propagate(n, g);
        }
    }

    // Gradient of the last backward() loss w.r.t. `id`; zero matrix if
    // the node does not influence the loss.  Invalidated by the next
    // backward().
    const Matrix& grad(NodeId id) {
        if (!have_grads_) throw Error("grad: backward() has not been run");
        Matrix& g = grads_.at(static_cast<std::size_t>(checked(id)));
        if (g.size() == 0) g = Matrix(node(id).value.rows, node(id).value.cols);
        return g;
    }

private:
    struct Node {
        Op op;
        std::vector<NodeId> in;
        Matrix value;
        double pconst = 0.0;
        bool trainable = false;
        CholeskyFactor chol;  // only for PsdSolve / PsdLogDet
    };

    NodeId push(Op op, std::vector<NodeId> in, Matrix value) {
        for (NodeId i : in) (void)checked(i);
        nodes_.push_back(Node{op, std::move(in), std::move(value), 0.0, false, {}});
        have_grads_ = false;
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId checked(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw Error("tape: node id out of range");
        }
        return id;
    }

    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(checked(id))]; }
    const Matrix& val(NodeId id) const { return node(id).value; }

    Matrix& ensure_grad(NodeId id) {
        Matrix& g = grads_[static_cast<std::size_t>(id)];
        if (g.size() == 0) {
            const Matrix& v = nodes_[static_cast<std::size_t>(id)].value;
            g = Matrix(v.rows, v.cols);
        }
        return g;
    }

    void accumulate(NodeId id, const Matrix& g) {
        Matrix& dst = ensure_grad(id);
        if (!dst.same_shape(g)) {
            throw DimensionMismatch("backward: adjoint shape " + g.shape_str() +
                                    " does not match node shape " + dst.shape_str());
        }
        for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += g.data[i];
    }

    void propagate(const Node& n, const Matrix& g) {
        switch (n.op) {
            case Op::Constant:
            case Op::Leaf:
                return;
            case Op::Add: {
                const Matrix& a = val(n.in[0]);
                const Matrix& b = val(n.in[1]);
                accumulate(n.in[0], reduce_to(g, a.rows, a.cols));
                accumulate(n.in[1], reduce_to(g, b.rows, b.cols));
                return;
            }
            case Op::Sub: {
                const Matrix& a = val(n.in[0]);
                const Matrix& b = val(n.in[1]);
                accumulate(n.in[0], reduce_to(g, a.rows, a.cols));
                accumulate(n.in[1], fit::scale(reduce_to(g, b.rows, b.cols), -1.0));
                return;
            }
            case Op::Mul: {
                const Matrix& a = val(n.in[0]);
                const Matrix& b = val(n.in[1]);
                accumulate(n.in[0], reduce_to(ew_mul(g, b), a.rows, a.cols));
                accumulate(n.in[1], reduce_to(ew_mul(g, a), b.rows, b.cols));
                return;
            }
            case Op::MatMul: {
                const Matrix& a = val(n.in[0]);
                const Matrix& b = val(n.in[1]);
                accumulate(n.in[0], fit::matmul(g, fit::transpose(b)));
                accumulate(n.in[1], fit::matmul(fit::transpose(a), g));
                return;
            }
            case Op::Transpose:
                accumulate(n.in[0], fit::transpose(g));
                return;
            case Op::Relu: {
                const Matrix& a = val(n.in[0]);
                accumulate(n.in[0], ew_binary(
                                        g, a, [](double gv, double x) { return x > 0.0 ? gv : 0.0; },
                                        "relu_bwd"));
                return;
            }
            case Op::Exp:
                accumulate(n.in[0], ew_mul(g, n.value));
                return;
            case Op::Log:
                accumulate(n.in[0], ew_div(g, val(n.in[0])));
                return;
            case Op::PowConst: {
                double p = n.pconst;
                const Matrix& a = val(n.in[0]);
                Matrix d = ew_map(a, [p](double x) { return p * std::pow(x, p - 1.0); });
                accumulate(n.in[0], ew_mul(g, d));
                return;
            }
            case Op::SumAll: {
                const Matrix& a = val(n.in[0]);
                accumulate(n.in[0], Matrix(a.rows, a.cols, g(0, 0)));
                return;
            }
            case Op::SumRows: {  // (r, c) -> (1, c)
                const Matrix& a = val(n.in[0]);
                Matrix ga(a.rows, a.cols);
                for (std::size_t i = 0; i < a.rows; ++i)
                    for (std::size_t j = 0; j < a.cols; ++j) ga(i, j) = g(0, j);
                accumulate(n.in[0], ga);
                return;
            }
            case Op::SumCols: {  // (r, c) -> (r, 1)
                const Matrix& a = val(n.in[0]);
                Matrix ga(a.rows, a.cols);
                for (std::size_t i = 0; i < a.rows; ++i)
                    for (std::size_t j = 0; j < a.cols; ++j) ga(i, j) = g(i, 0);
                accumulate(n.in[0], ga);
                return;
            }
            case Op::LogSumExpRows: {  // softmax of the input, row-wise
                const Matrix& a = val(n.in[0]);
                Matrix ga(a.rows, a.cols);
                for (std::size_t i = 0; i < a.rows; ++i)
                    for (std::size_t j = 0; j < a.cols; ++j)
                        ga(i, j) = g(i, 0) * std::exp(a(i, j) - n.value(i, 0));
                accumulate(n.in[0], ga);
                return;
            }
            case Op::ConcatCols: {
                std::size_t off = 0;
                for (NodeId p : n.in) {
                    const Matrix& a = val(p);
                    Matrix ga(a.rows, a.cols);
                    for (std::size_t i = 0; i < a.rows; ++i)
                        for (std::size_t j = 0; j < a.cols; ++j) ga(i, j) = g(i, off + j);
                    accumulate(p, ga);
                    off += a.cols;
                }
                return;
            }
            case Op::PsdSolve: {
                // X = A^{-1} B;   B_bar = A^{-1} G,   A_bar = -(A^{-1} G) X^T
                Matrix gb = chol_solve(n.chol, g);
                accumulate(n.in[0], fit::scale(fit::matmul(gb, fit::transpose(n.value)), -1.0));
                accumulate(n.in[1], gb);
                return;
            }
            case Op::PsdLogDet:
                accumulate(n.in[0], fit::scale(chol_inverse(n.chol), g(0, 0)));
                return;
        }
        throw UnsupportedNode("backward: node kind without an adjoint rule");
    }

    // Deque keeps node (and value) references stable while new nodes are
    // appended; callers may hold value() references across graph building.
    std::deque<Node> nodes_;
    std::vector<NodeId> trainable_;
    std::vector<Matrix> grads_;
    bool have_grads_ = false;
};

// ---- composite helpers -------------------------------------------------

inline NodeId scale(Tape& t, NodeId x, double s) { return t.mul(x, t.scalar(s)); }

inline NodeId neg(Tape& t, NodeId x) { return scale(t, x, -1.0); }

// Mean over all entries.
inline NodeId mean_all(Tape& t, NodeId x) {
    std::size_t n = t.value(x).size();
    return scale(t, t.sum_all(x), 1.0 / static_cast<double>(n));
}

// FiLM: x * gamma + beta with gamma/beta 1xc row vectors broadcast over
// rows.
inline NodeId film(Tape& t, NodeId x, NodeId gamma, NodeId beta) {
    return t.add(t.mul(x, gamma), beta);
}

// Row-wise standardization: (x - mean) / sqrt(var + eps), mean/var per
// row.  Mirrored exactly by fit::standardize_rows for plain evaluation.
inline NodeId standardize_rows(Tape& t, NodeId x, double eps) {
    const Matrix& v = t.value(x);
    double inv_c = 1.0 / static_cast<double>(v.cols);
    NodeId mean = scale(t, t.sum_cols(x), inv_c);
    NodeId cent = t.sub(x, mean);
    NodeId var = scale(t, t.sum_cols(t.mul(cent, cent)), inv_c);
    NodeId inv = t.pow_const(t.add(var, t.scalar(eps)), -0.5);
    return t.mul(cent, inv);
}

}  // namespace fit::ad
