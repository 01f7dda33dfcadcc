#include "gspull/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace gspull::ad {

std::string_view op_name(OpKind op) {
    switch (op) {
    case OpKind::Leaf: return "leaf";
    case OpKind::Parameter: return "parameter";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::Div: return "div";
    case OpKind::Neg: return "neg";
    case OpKind::Scale: return "scale";
    case OpKind::AddScalar: return "add_scalar";
    case OpKind::Exp: return "exp";
    case OpKind::Log: return "log";
    case OpKind::Sqrt: return "sqrt";
    case OpKind::Pow: return "pow";
    case OpKind::Abs: return "abs";
    case OpKind::Relu: return "relu";
    case OpKind::ClampBelow: return "clamp_below";
    case OpKind::Min: return "min";
    case OpKind::Max: return "max";
    case OpKind::Sum: return "sum";
    case OpKind::Mean: return "mean";
    case OpKind::RowSum: return "row_sum";
    case OpKind::RowMin: return "row_min";
    case OpKind::Dot: return "dot";
    case OpKind::RowDot: return "row_dot";
    case OpKind::MatMul: return "matmul";
    case OpKind::Transpose: return "transpose";
    case OpKind::Norm: return "norm";
    case OpKind::RowNorm: return "row_norm";
    case OpKind::Slice: return "slice";
    case OpKind::HCat: return "hcat";
    case OpKind::GatherRows: return "gather_rows";
    case OpKind::SelectPerRow: return "select_per_row";
    case OpKind::Custom: return "custom";
    }
    return "unknown";
}

namespace {

template <typename M>
std::string shape_str(const M& m) {
    std::ostringstream os;
    os << '(' << m.rows() << 'x' << m.cols() << ')';
    return os.str();
}

[[noreturn]] void shape_error(OpKind op, const std::string& a, const std::string& b) {
    throw std::invalid_argument("shape mismatch in " + std::string(op_name(op)) + ": " + a + " vs " + b);
}

Index broadcast_dim(Index a, Index b, bool& ok) {
    if (a == b) return a;
    if (a == 1) return b;
    if (b == 1) return a;
    ok = false;
    return 0;
}

template <typename Matrix>
Matrix expand(const Matrix& m, Index rows, Index cols) {
    if (m.rows() == rows && m.cols() == cols) return m;
    if (m.rows() == 1 && m.cols() == 1) return Matrix::Constant(rows, cols, m(0, 0));
    if (m.rows() == 1) return m.replicate(rows, 1);
    return m.replicate(1, cols);
}

// Sums a broadcast gradient back down to the operand's shape.
template <typename Matrix>
Matrix reduce_to(const Matrix& g, Index rows, Index cols) {
    if (g.rows() == rows && g.cols() == cols) return g;
    if (rows == 1 && cols == 1) return Matrix::Constant(1, 1, g.sum());
    if (rows == 1) return g.colwise().sum();
    return g.rowwise().sum();
}

template <typename S>
void same_tape(OpKind op, const BasicValue<S>& a, const BasicValue<S>& b) {
    if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op_name(op)) + ": operands live on different tapes");
}

template <typename S, typename Forward, typename GradA, typename GradB>
BasicValue<S> binary(OpKind op, const BasicValue<S>& a, const BasicValue<S>& b, Forward fwd, GradA ga, GradB gb) {
    using Matrix = MatrixT<S>;
    same_tape(op, a, b);
    bool ok = true;
    const Index rows = broadcast_dim(a.rows(), b.rows(), ok);
    const Index cols = broadcast_dim(a.cols(), b.cols(), ok);
    if (!ok) shape_error(op, shape_str(a.value()), shape_str(b.value()));
    Matrix av = expand(a.value(), rows, cols);
    Matrix bv = expand(b.value(), rows, cols);
    Matrix out = fwd(av, bv);
    const int ia = a.id();
    const int ib = b.id();
    return a.tape().record(op, {ia, ib}, std::move(out), [=](BasicTape<S>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.node(ia).requires_grad) {
            Matrix full = ga(g, av, bv);
            t.accumulate(ia, reduce_to(full, t.node(ia).value.rows(), t.node(ia).value.cols()));
        }
        if (t.node(ib).requires_grad) {
            Matrix full = gb(g, av, bv);
            t.accumulate(ib, reduce_to(full, t.node(ib).value.rows(), t.node(ib).value.cols()));
        }
    });
}

template <typename S, typename Forward, typename Grad>
BasicValue<S> unary(OpKind op, const BasicValue<S>& a, Forward fwd, Grad grad) {
    using Matrix = MatrixT<S>;
    Matrix out = fwd(a.value());
    const int ia = a.id();
    return a.tape().record(op, {ia}, std::move(out), [=](BasicTape<S>& t, int self) {
        t.accumulate(ia, grad(t.node(self).grad, t.node(ia).value, t.node(self).value));
    });
}

} // namespace

// --- tape -------------------------------------------------------------------

template <typename Scalar>
typename BasicTape<Scalar>::Value BasicTape<Scalar>::constant(Matrix v) {
    Node n;
    n.op = OpKind::Leaf;
    n.value = std::move(v);
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Scalar>
typename BasicTape<Scalar>::Value BasicTape<Scalar>::scalar(Scalar s) {
    return constant(Matrix::Constant(1, 1, s));
}

template <typename Scalar>
typename BasicTape<Scalar>::Value BasicTape<Scalar>::variable(Matrix v) {
    Value out = constant(std::move(v));
    nodes_.back().requires_grad = true;
    return out;
}

template <typename Scalar>
typename BasicTape<Scalar>::Value BasicTape<Scalar>::param(Parameter& p) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i] == &p) return Value(this, param_nodes_[i]);
    }
    Node n;
    n.op = OpKind::Parameter;
    n.value = p.value;
    n.requires_grad = true;
    n.param = &p;
    if (p.grad.rows() != p.value.rows() || p.grad.cols() != p.value.cols()) p.zero_grad();
    nodes_.push_back(std::move(n));
    params_.push_back(&p);
    param_nodes_.push_back(static_cast<int>(nodes_.size() - 1));
    return Value(this, param_nodes_.back());
}

template <typename Scalar>
typename BasicTape<Scalar>::Value BasicTape<Scalar>::record(OpKind op, std::vector<int> inputs, Matrix value,
                                                            BackwardFn backward) {
    Node n;
    n.op = op;
    for (int id : inputs) {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw std::logic_error("tape: input references a node that does not exist yet");
        n.requires_grad = n.requires_grad || nodes_[static_cast<std::size_t>(id)].requires_grad;
    }
    n.inputs = std::move(inputs);
    n.value = std::move(value);
    if (n.requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Value(this, static_cast<int>(nodes_.size() - 1));
}

template <typename Scalar>
typename BasicTape<Scalar>::Value BasicTape<Scalar>::custom(std::vector<Value> inputs, Matrix value,
                                                            CustomBackward backward) {
    std::vector<int> ids;
    ids.reserve(inputs.size());
    for (const auto& v : inputs) {
        if (&v.tape() != this) throw std::invalid_argument("custom: input lives on a different tape");
        ids.push_back(v.id());
    }
    return record(OpKind::Custom, ids, std::move(value), [ids, backward](BasicTape& t, int self) {
        std::vector<Matrix> grads = backward(t.node(self).grad);
        for (std::size_t i = 0; i < ids.size() && i < grads.size(); ++i) {
            if (grads[i].size() == 0) continue;
            t.accumulate(ids[i], grads[i]);
        }
    });
}

template <typename Scalar>
void BasicTape<Scalar>::accumulate(int id, const Matrix& g) {
    Node& n = node(id);
    if (!n.requires_grad) return;
    if (g.rows() != n.value.rows() || g.cols() != n.value.cols())
        shape_error(n.op, "gradient " + shape_str(g), "value " + shape_str(n.value));
    if (!n.has_grad) {
        n.grad = g;
        n.has_grad = true;
    } else {
        n.grad += g;
    }
}

template <typename Scalar>
void BasicTape<Scalar>::backward(const Value& root) {
    if (&root.tape() != this) throw std::invalid_argument("backward: root lives on a different tape");
    if (!root.is_scalar())
        throw std::invalid_argument("backward: root must be 1x1, got " + shape_str(root.value()));
    for (auto& n : nodes_) {
        n.has_grad = false;
        n.grad.resize(0, 0);
    }
    Node& r = node(root.id());
    if (!r.requires_grad) return;
    r.grad = Matrix::Ones(1, 1);
    r.has_grad = true;
    for (int id = root.id(); id >= 0; --id) {
        Node& n = node(id);
        if (!n.has_grad) continue;
        if (n.param != nullptr) {
            n.param->grad += n.grad;
        } else if (n.backward) {
            n.backward(*this, id);
        }
    }
}

template <typename Scalar>
void BasicTape<Scalar>::zero_grad() {
    for (auto* p : params_) p->zero_grad();
}

// --- elementwise ------------------------------------------------------------

template <typename S>
BasicValue<S> add(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    return binary<S>(
        OpKind::Add, a, b, [](const M& x, const M& y) -> M { return x + y; },
        [](const M& g, const M&, const M&) -> M { return g; }, [](const M& g, const M&, const M&) -> M { return g; });
}

template <typename S>
BasicValue<S> sub(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    return binary<S>(
        OpKind::Sub, a, b, [](const M& x, const M& y) -> M { return x - y; },
        [](const M& g, const M&, const M&) -> M { return g; }, [](const M& g, const M&, const M&) -> M { return -g; });
}

template <typename S>
BasicValue<S> mul(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    return binary<S>(
        OpKind::Mul, a, b, [](const M& x, const M& y) -> M { return x.cwiseProduct(y); },
        [](const M& g, const M&, const M& y) -> M { return g.cwiseProduct(y); },
        [](const M& g, const M& x, const M&) -> M { return g.cwiseProduct(x); });
}

template <typename S>
BasicValue<S> div(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    return binary<S>(
        OpKind::Div, a, b, [](const M& x, const M& y) -> M { return x.cwiseQuotient(y); },
        [](const M& g, const M&, const M& y) -> M { return g.cwiseQuotient(y); },
        [](const M& g, const M& x, const M& y) -> M {
            return -(g.array() * x.array() / (y.array() * y.array())).matrix();
        });
}

// Ties go to the first operand.
template <typename S>
BasicValue<S> minimum(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    return binary<S>(
        OpKind::Min, a, b, [](const M& x, const M& y) -> M { return x.cwiseMin(y); },
        [](const M& g, const M& x, const M& y) -> M { return (x.array() <= y.array()).select(g, M::Zero(g.rows(), g.cols())); },
        [](const M& g, const M& x, const M& y) -> M { return (x.array() <= y.array()).select(M::Zero(g.rows(), g.cols()), g); });
}

template <typename S>
BasicValue<S> maximum(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    return binary<S>(
        OpKind::Max, a, b, [](const M& x, const M& y) -> M { return x.cwiseMax(y); },
        [](const M& g, const M& x, const M& y) -> M { return (x.array() >= y.array()).select(g, M::Zero(g.rows(), g.cols())); },
        [](const M& g, const M& x, const M& y) -> M { return (x.array() >= y.array()).select(M::Zero(g.rows(), g.cols()), g); });
}

template <typename S>
BasicValue<S> neg(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Neg, a, [](const M& x) -> M { return -x; }, [](const M& g, const M&, const M&) -> M { return -g; });
}

template <typename S>
BasicValue<S> scale(const BasicValue<S>& a, S s) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Scale, a, [s](const M& x) -> M { return x * s; }, [s](const M& g, const M&, const M&) -> M { return g * s; });
}

template <typename S>
BasicValue<S> add_scalar(const BasicValue<S>& a, S s) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::AddScalar, a, [s](const M& x) -> M { return (x.array() + s).matrix(); },
        [](const M& g, const M&, const M&) -> M { return g; });
}

template <typename S>
BasicValue<S> exp(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Exp, a, [](const M& x) -> M { return x.array().exp().matrix(); },
        [](const M& g, const M&, const M& y) -> M { return g.cwiseProduct(y); });
}

template <typename S>
BasicValue<S> log(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    if ((a.value().array() <= S(0)).any())
        throw std::domain_error("log: operand has non-positive entries");
    return unary<S>(
        OpKind::Log, a, [](const M& x) -> M { return x.array().log().matrix(); },
        [](const M& g, const M& x, const M&) -> M { return g.cwiseQuotient(x); });
}

template <typename S>
BasicValue<S> sqrt(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    if ((a.value().array() < S(0)).any()) throw std::domain_error("sqrt: operand has negative entries");
    return unary<S>(
        OpKind::Sqrt, a, [](const M& x) -> M { return x.array().sqrt().matrix(); },
        [](const M& g, const M&, const M& y) -> M { return (g.array() * S(0.5) / y.array()).matrix(); });
}

template <typename S>
BasicValue<S> pow(const BasicValue<S>& a, S p) {
    using M = MatrixT<S>;
    if (p != std::round(p) && (a.value().array() < S(0)).any())
        throw std::domain_error("pow: negative operand with non-integer exponent");
    return unary<S>(
        OpKind::Pow, a, [p](const M& x) -> M { return x.array().pow(p).matrix(); },
        [p](const M& g, const M& x, const M&) -> M { return (g.array() * p * x.array().pow(p - S(1))).matrix(); });
}

template <typename S>
BasicValue<S> square(const BasicValue<S>& a) {
    return mul(a, a);
}

template <typename S>
BasicValue<S> abs(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Abs, a, [](const M& x) -> M { return x.cwiseAbs(); },
        [](const M& g, const M& x, const M&) -> M {
            M s = x.unaryExpr([](S v) { return v > S(0) ? S(1) : (v < S(0) ? S(-1) : S(0)); });
            return g.cwiseProduct(s);
        });
}

template <typename S>
BasicValue<S> relu(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Relu, a, [](const M& x) -> M { return x.cwiseMax(S(0)); },
        [](const M& g, const M& x, const M&) -> M { return (x.array() > S(0)).select(g, M::Zero(g.rows(), g.cols())); });
}

template <typename S>
BasicValue<S> clamp_below(const BasicValue<S>& a, S lo) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::ClampBelow, a, [lo](const M& x) -> M { return x.cwiseMax(lo); },
        [lo](const M& g, const M& x, const M&) -> M { return (x.array() >= lo).select(g, M::Zero(g.rows(), g.cols())); });
}

// --- reductions -------------------------------------------------------------

template <typename S>
BasicValue<S> sum(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Sum, a, [](const M& x) -> M { return M::Constant(1, 1, x.sum()); },
        [](const M& g, const M& x, const M&) -> M { return M::Constant(x.rows(), x.cols(), g(0, 0)); });
}

template <typename S>
BasicValue<S> mean(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    if (a.value().size() == 0) throw std::invalid_argument("mean: empty operand");
    return unary<S>(
        OpKind::Mean, a, [](const M& x) -> M { return M::Constant(1, 1, x.mean()); },
        [](const M& g, const M& x, const M&) -> M {
            return M::Constant(x.rows(), x.cols(), g(0, 0) / static_cast<S>(x.size()));
        });
}

template <typename S>
BasicValue<S> row_sum(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::RowSum, a, [](const M& x) -> M { return x.rowwise().sum(); },
        [](const M& g, const M& x, const M&) -> M { return g.replicate(1, x.cols()); });
}

// Per-row minimum; the gradient goes to the first minimal entry.
template <typename S>
BasicValue<S> row_min(const BasicValue<S>& a) {
    const auto& x = a.value();
    if (x.cols() == 0) throw std::invalid_argument("row_min: operand has no columns");
    std::vector<Index> arg(static_cast<std::size_t>(x.rows()));
    for (Index r = 0; r < x.rows(); ++r) {
        Index best = 0;
        for (Index c = 1; c < x.cols(); ++c)
            if (x(r, c) < x(r, best)) best = c;
        arg[static_cast<std::size_t>(r)] = best;
    }
    return select_per_row(a, std::span<const Index>(arg));
}

template <typename S>
BasicValue<S> dot(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    same_tape(OpKind::Dot, a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols()) shape_error(OpKind::Dot, shape_str(a.value()), shape_str(b.value()));
    const int ia = a.id(), ib = b.id();
    M out = M::Constant(1, 1, a.value().cwiseProduct(b.value()).sum());
    return a.tape().record(OpKind::Dot, {ia, ib}, std::move(out), [=](BasicTape<S>& t, int self) {
        const S g = t.node(self).grad(0, 0);
        if (t.node(ia).requires_grad) t.accumulate(ia, t.node(ib).value * g);
        if (t.node(ib).requires_grad) t.accumulate(ib, t.node(ia).value * g);
    });
}

template <typename S>
BasicValue<S> row_dot(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    same_tape(OpKind::RowDot, a, b);
    if (a.rows() != b.rows() || a.cols() != b.cols())
        shape_error(OpKind::RowDot, shape_str(a.value()), shape_str(b.value()));
    const int ia = a.id(), ib = b.id();
    M out = a.value().cwiseProduct(b.value()).rowwise().sum();
    return a.tape().record(OpKind::RowDot, {ia, ib}, std::move(out), [=](BasicTape<S>& t, int self) {
        const auto& g = t.node(self).grad;
        const Index c = t.node(ia).value.cols();
        if (t.node(ia).requires_grad) t.accumulate(ia, (t.node(ib).value.array() * g.replicate(1, c).array()).matrix());
        if (t.node(ib).requires_grad) t.accumulate(ib, (t.node(ia).value.array() * g.replicate(1, c).array()).matrix());
    });
}

template <typename S>
BasicValue<S> norm(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Norm, a, [](const M& x) -> M { return M::Constant(1, 1, x.norm()); },
        [](const M& g, const M& x, const M& y) -> M {
            const S n = y(0, 0);
            if (n == S(0)) return M::Zero(x.rows(), x.cols());
            return x * (g(0, 0) / n);
        });
}

template <typename S>
BasicValue<S> normalize(const BasicValue<S>& a) {
    return div(a, norm(a));
}

template <typename S>
BasicValue<S> row_norm(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::RowNorm, a, [](const M& x) -> M { return x.rowwise().norm(); },
        [](const M& g, const M& x, const M& y) -> M {
            M out(x.rows(), x.cols());
            for (Index r = 0; r < x.rows(); ++r) {
                const S n = y(r, 0);
                if (n == S(0))
                    out.row(r).setZero();
                else
                    out.row(r) = x.row(r) * (g(r, 0) / n);
            }
            return out;
        });
}

template <typename S>
BasicValue<S> row_normalize(const BasicValue<S>& a) {
    return div(a, row_norm(a));
}

// --- linear algebra ---------------------------------------------------------

template <typename S>
BasicValue<S> matmul(const BasicValue<S>& a, const BasicValue<S>& b) {
    using M = MatrixT<S>;
    same_tape(OpKind::MatMul, a, b);
    if (a.cols() != b.rows()) shape_error(OpKind::MatMul, shape_str(a.value()), shape_str(b.value()));
    const int ia = a.id(), ib = b.id();
    M out = a.value() * b.value();
    return a.tape().record(OpKind::MatMul, {ia, ib}, std::move(out), [=](BasicTape<S>& t, int self) {
        const auto& g = t.node(self).grad;
        if (t.node(ia).requires_grad) t.accumulate(ia, g * t.node(ib).value.transpose());
        if (t.node(ib).requires_grad) t.accumulate(ib, t.node(ia).value.transpose() * g);
    });
}

template <typename S>
BasicValue<S> matvec(const BasicValue<S>& a, const BasicValue<S>& x) {
    if (x.cols() != 1) shape_error(OpKind::MatMul, shape_str(a.value()), shape_str(x.value()) + " (expected a column vector)");
    return matmul(a, x);
}

template <typename S>
BasicValue<S> transpose(const BasicValue<S>& a) {
    using M = MatrixT<S>;
    return unary<S>(
        OpKind::Transpose, a, [](const M& x) -> M { return x.transpose(); },
        [](const M& g, const M&, const M&) -> M { return g.transpose(); });
}

// --- structural -------------------------------------------------------------

template <typename S>
BasicValue<S> cols(const BasicValue<S>& a, Index first, Index count) {
    using M = MatrixT<S>;
    if (first < 0 || count < 0 || first + count > a.cols())
        throw std::invalid_argument("cols: range [" + std::to_string(first) + ", " + std::to_string(first + count) +
                                    ") out of bounds for " + shape_str(a.value()));
    const int ia = a.id();
    M out = a.value().middleCols(first, count);
    return a.tape().record(OpKind::Slice, {ia}, std::move(out), [=](BasicTape<S>& t, int self) {
        const auto& src = t.node(ia).value;
        M g = M::Zero(src.rows(), src.cols());
        g.middleCols(first, count) = t.node(self).grad;
        t.accumulate(ia, g);
    });
}

template <typename S>
BasicValue<S> col(const BasicValue<S>& a, Index k) {
    return cols(a, k, 1);
}

template <typename S>
BasicValue<S> hcat(std::span<const BasicValue<S>> parts) {
    using M = MatrixT<S>;
    if (parts.empty()) throw std::invalid_argument("hcat: no operands");
    const Index rows = parts[0].rows();
    Index total = 0;
    std::vector<int> ids;
    std::vector<Index> widths;
    for (const auto& p : parts) {
        same_tape(OpKind::HCat, parts[0], p);
        if (p.rows() != rows) shape_error(OpKind::HCat, shape_str(parts[0].value()), shape_str(p.value()));
        total += p.cols();
        ids.push_back(p.id());
        widths.push_back(p.cols());
    }
    M out(rows, total);
    Index off = 0;
    for (const auto& p : parts) {
        out.middleCols(off, p.cols()) = p.value();
        off += p.cols();
    }
    return parts[0].tape().record(OpKind::HCat, ids, std::move(out), [ids, widths](BasicTape<S>& t, int self) {
        const auto& g = t.node(self).grad;
        Index o = 0;
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (t.node(ids[i]).requires_grad) t.accumulate(ids[i], g.middleCols(o, widths[i]));
            o += widths[i];
        }
    });
}

template <typename S>
BasicValue<S> gather_rows(const BasicValue<S>& a, std::span<const Index> rows) {
    using M = MatrixT<S>;
    const auto& x = a.value();
    std::vector<Index> idx(rows.begin(), rows.end());
    M out(static_cast<Index>(idx.size()), x.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= x.rows())
            throw std::invalid_argument("gather_rows: row " + std::to_string(idx[i]) + " out of bounds for " + shape_str(x));
        out.row(static_cast<Index>(i)) = x.row(idx[i]);
    }
    const int ia = a.id();
    return a.tape().record(OpKind::GatherRows, {ia}, std::move(out), [ia, idx](BasicTape<S>& t, int self) {
        const auto& src = t.node(ia).value;
        const auto& g = t.node(self).grad;
        M acc = M::Zero(src.rows(), src.cols());
        for (std::size_t i = 0; i < idx.size(); ++i) acc.row(idx[i]) += g.row(static_cast<Index>(i));
        t.accumulate(ia, acc);
    });
}

template <typename S>
BasicValue<S> select_per_row(const BasicValue<S>& a, std::span<const Index> which) {
    using M = MatrixT<S>;
    const auto& x = a.value();
    if (static_cast<Index>(which.size()) != x.rows())
        throw std::invalid_argument("select_per_row: " + std::to_string(which.size()) + " column indices for " + shape_str(x));
    std::vector<Index> idx(which.begin(), which.end());
    M out(x.rows(), 1);
    for (Index r = 0; r < x.rows(); ++r) {
        const Index c = idx[static_cast<std::size_t>(r)];
        if (c < 0 || c >= x.cols()) throw std::invalid_argument("select_per_row: column out of bounds");
        out(r, 0) = x(r, c);
    }
    const int ia = a.id();
    return a.tape().record(OpKind::SelectPerRow, {ia}, std::move(out), [ia, idx](BasicTape<S>& t, int self) {
        const auto& src = t.node(ia).value;
        const auto& g = t.node(self).grad;
        M acc = M::Zero(src.rows(), src.cols());
        for (Index r = 0; r < src.rows(); ++r) acc(r, idx[static_cast<std::size_t>(r)]) = g(r, 0);
        t.accumulate(ia, acc);
    });
}

template <typename S>
BasicValue<S> detach(const BasicValue<S>& a) {
    return a.tape().constant(a.value());
}

// --- verification -----------------------------------------------------------

namespace {

template <typename S>
S relative_error(S analytic, S numeric) {
    if (std::isnan(analytic) || std::isnan(numeric) || std::isinf(analytic) || std::isinf(numeric))
        return std::numeric_limits<S>::infinity();
    const S denom = std::max({std::abs(analytic), std::abs(numeric), S(1e-8)});
    return std::abs(analytic - numeric) / denom;
}

template <typename S>
S evaluate(const ScalarFn<S>& fn) {
    BasicTape<S> tape;
    BasicValue<S> out = fn(tape);
    if (!out.is_scalar()) throw std::invalid_argument("grad_check: function must return a 1x1 value");
    return out.item();
}

} // namespace

template <typename S>
GradCheckReport<S> grad_check_report(const ScalarFn<S>& fn, std::span<BasicParameter<S>* const> params, S step) {
    GradCheckReport<S> report;
    std::vector<MatrixT<S>> analytic;
    {
        for (auto* p : params) p->zero_grad();
        BasicTape<S> tape;
        BasicValue<S> out = fn(tape);
        tape.backward(out);
        for (auto* p : params) analytic.push_back(p->grad);
    }
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto* p = params[k];
        for (Index i = 0; i < p->value.size(); ++i) {
            S& x = p->value.data()[i];
            const S saved = x;
            x = saved + step;
            const S fp = evaluate(fn);
            x = saved - step;
            const S fm = evaluate(fn);
            x = saved;
            const S numeric = (fp - fm) / (S(2) * step);
            const S a = analytic[k].data()[i];
            const S err = relative_error(a, numeric);
            if (err > report.max_relative_error || (std::isinf(err) && report.worst_index < 0)) {
                report.max_relative_error = err;
                report.worst_parameter = p->name;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    return report;
}

template <typename S>
S grad_check(const std::function<BasicValue<S>(BasicTape<S>&, BasicValue<S>)>& fn, const MatrixT<S>& point, S step) {
    BasicParameter<S> x("point", point);
    BasicParameter<S>* ps[] = {&x};
    ScalarFn<S> wrapped = [&](BasicTape<S>& t) { return fn(t, t.param(x)); };
    return grad_check_report<S>(wrapped, std::span<BasicParameter<S>* const>(ps), step).max_relative_error;
}

// --- instantiation ----------------------------------------------------------

template class BasicTape<float>;
template class BasicTape<double>;

#define GSPULL_INSTANTIATE_OPS(S)                                                                          \
    template BasicValue<S> add(const BasicValue<S>&, const BasicValue<S>&);                                \
    template BasicValue<S> sub(const BasicValue<S>&, const BasicValue<S>&);                                \
    template BasicValue<S> mul(const BasicValue<S>&, const BasicValue<S>&);                                \
    template BasicValue<S> div(const BasicValue<S>&, const BasicValue<S>&);                                \
    template BasicValue<S> minimum(const BasicValue<S>&, const BasicValue<S>&);                            \
    template BasicValue<S> maximum(const BasicValue<S>&, const BasicValue<S>&);                            \
    template BasicValue<S> neg(const BasicValue<S>&);                                                      \
    template BasicValue<S> scale(const BasicValue<S>&, S);                                                 \
    template BasicValue<S> add_scalar(const BasicValue<S>&, S);                                            \
    template BasicValue<S> exp(const BasicValue<S>&);                                                      \
    template BasicValue<S> log(const BasicValue<S>&);                                                      \
    template BasicValue<S> sqrt(const BasicValue<S>&);                                                     \
    template BasicValue<S> pow(const BasicValue<S>&, S);                                                   \
    template BasicValue<S> square(const BasicValue<S>&);                                                   \
    template BasicValue<S> abs(const BasicValue<S>&);                                                      \
    template BasicValue<S> relu(const BasicValue<S>&);                                                     \
    template BasicValue<S> clamp_below(const BasicValue<S>&, S);                                           \
    template BasicValue<S> sum(const BasicValue<S>&);                                                      \
    template BasicValue<S> mean(const BasicValue<S>&);                                                     \
    template BasicValue<S> row_sum(const BasicValue<S>&);                                                  \
    template BasicValue<S> row_min(const BasicValue<S>&);                                                  \
    template BasicValue<S> dot(const BasicValue<S>&, const BasicValue<S>&);                                \
    template BasicValue<S> row_dot(const BasicValue<S>&, const BasicValue<S>&);                            \
    template BasicValue<S> matmul(const BasicValue<S>&, const BasicValue<S>&);                             \
    template BasicValue<S> matvec(const BasicValue<S>&, const BasicValue<S>&);                             \
    template BasicValue<S> transpose(const BasicValue<S>&);                                                \
    template BasicValue<S> norm(const BasicValue<S>&);                                                     \
    template BasicValue<S> normalize(const BasicValue<S>&);                                                \
    template BasicValue<S> row_norm(const BasicValue<S>&);                                                 \
    template BasicValue<S> row_normalize(const BasicValue<S>&);                                            \
    template BasicValue<S> cols(const BasicValue<S>&, Index, Index);                                       \
    template BasicValue<S> col(const BasicValue<S>&, Index);                                               \
    template BasicValue<S> hcat(std::span<const BasicValue<S>>);                                           \
    template BasicValue<S> gather_rows(const BasicValue<S>&, std::span<const Index>);                      \
    template BasicValue<S> select_per_row(const BasicValue<S>&, std::span<const Index>);                   \
    template BasicValue<S> detach(const BasicValue<S>&);                                                   \
    template GradCheckReport<S> grad_check_report(const ScalarFn<S>&, std::span<BasicParameter<S>* const>, S); \
    template S grad_check(const std::function<BasicValue<S>(BasicTape<S>&, BasicValue<S>)>&, const MatrixT<S>&, S);

GSPULL_INSTANTIATE_OPS(float)
GSPULL_INSTANTIATE_OPS(double)

#undef GSPULL_INSTANTIATE_OPS

} // namespace gspull::ad
