#pragma once

// Reverse-mode differentiation over small dense row-major matrices.
//
// A tape records one expression graph; node inputs always refer to earlier
// nodes, so a single reverse sweep visits every node once. Parameters live
// outside the tape and receive accumulated gradients after backward(), which
// lets a fresh tape be built for every training iteration.
//
// Elementwise binary operations accept equal shapes or 2-D broadcasting of a
// 1x1, 1xC or Rx1 operand. Nothing more general is supported.

#include "gspull/types.hpp"

#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace gspull::ad {

enum class OpKind {
    Leaf,
    Parameter,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    Exp,
    Log,
    Sqrt,
    Pow,
    Abs,
    Relu,
    ClampBelow,
    Min,
    Max,
    Sum,
    Mean,
    RowSum,
    RowMin,
    Dot,
    RowDot,
    MatMul,
    Transpose,
    Norm,
    RowNorm,
    Slice,
    HCat,
    GatherRows,
    SelectPerRow,
    Custom,
};

std::string_view op_name(OpKind op);

template <typename Scalar>
struct BasicParameter {
    using Matrix = MatrixT<Scalar>;

    std::string name;
    Matrix value;
    Matrix grad;

    BasicParameter() = default;
    BasicParameter(std::string n, Matrix v)
        : name(std::move(n)), value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

template <typename Scalar>
class BasicTape;

// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
class BasicValue {
public:
    using Matrix = MatrixT<Scalar>;

    BasicValue() = default;
    BasicValue(BasicTape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

    BasicTape<Scalar>& tape() const { return *tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

    const Matrix& value() const;
    const Matrix& grad() const;
    bool has_grad() const;
    Index rows() const { return value().rows(); }
    Index cols() const { return value().cols(); }
    bool is_scalar() const { return rows() == 1 && cols() == 1; }
    Scalar item() const { return value()(0, 0); }

private:
    BasicTape<Scalar>* tape_ = nullptr;
    int id_ = -1;
};

template <typename Scalar>
class BasicTape {
public:
    using Matrix = MatrixT<Scalar>;
    using Value = BasicValue<Scalar>;
    using Parameter = BasicParameter<Scalar>;
    using BackwardFn = std::function<void(BasicTape&, int)>;
    // Maps the upstream gradient of a custom node to one gradient per input;
    // an empty matrix means "no contribution".
    using CustomBackward = std::function<std::vector<Matrix>(const Matrix& upstream)>;

    struct Node {
        OpKind op = OpKind::Leaf;
        std::vector<int> inputs;
        Matrix value;
        Matrix grad;
        bool has_grad = false;
        bool requires_grad = false;
        BackwardFn backward;
        Parameter* param = nullptr;
    };

    BasicTape() = default;
    BasicTape(const BasicTape&) = delete;
    BasicTape& operator=(const BasicTape&) = delete;

    Value constant(Matrix v);
    Value scalar(Scalar s);
    // Differentiable leaf not tied to a parameter; read its gradient from the Value.
    Value variable(Matrix v);
    // Leaf bound to a parameter. Registering the same parameter twice returns the same node.
    Value param(Parameter& p);

    Value record(OpKind op, std::vector<int> inputs, Matrix value, BackwardFn backward);
    Value custom(std::vector<Value> inputs, Matrix value, CustomBackward backward);

    // Reverse sweep from a 1x1 root; accumulates into every registered parameter.
    void backward(const Value& root);

    void zero_grad();
    void accumulate(int id, const Matrix& g);

    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }
    std::span<Parameter* const> parameters() const { return params_; }

private:
    std::vector<Node> nodes_;
    std::vector<Parameter*> params_;
    std::vector<int> param_nodes_;
};

template <typename Scalar>
const typename BasicValue<Scalar>::Matrix& BasicValue<Scalar>::value() const {
    return tape_->node(id_).value;
}

template <typename Scalar>
const typename BasicValue<Scalar>::Matrix& BasicValue<Scalar>::grad() const {
    return tape_->node(id_).grad;
}

template <typename Scalar>
bool BasicValue<Scalar>::has_grad() const {
    return tape_->node(id_).has_grad;
}

// --- primitives -------------------------------------------------------------

template <typename S> BasicValue<S> add(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> sub(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> mul(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> div(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> minimum(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> maximum(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> neg(const BasicValue<S>& a);
template <typename S> BasicValue<S> scale(const BasicValue<S>& a, S s);
template <typename S> BasicValue<S> add_scalar(const BasicValue<S>& a, S s);
template <typename S> BasicValue<S> exp(const BasicValue<S>& a);
template <typename S> BasicValue<S> log(const BasicValue<S>& a);
template <typename S> BasicValue<S> sqrt(const BasicValue<S>& a);
template <typename S> BasicValue<S> pow(const BasicValue<S>& a, S p);
template <typename S> BasicValue<S> square(const BasicValue<S>& a);
template <typename S> BasicValue<S> abs(const BasicValue<S>& a);
template <typename S> BasicValue<S> relu(const BasicValue<S>& a);
template <typename S> BasicValue<S> clamp_below(const BasicValue<S>& a, S lo);
template <typename S> BasicValue<S> sum(const BasicValue<S>& a);
template <typename S> BasicValue<S> mean(const BasicValue<S>& a);
template <typename S> BasicValue<S> row_sum(const BasicValue<S>& a);
template <typename S> BasicValue<S> row_min(const BasicValue<S>& a);
template <typename S> BasicValue<S> dot(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> row_dot(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> matmul(const BasicValue<S>& a, const BasicValue<S>& b);
template <typename S> BasicValue<S> matvec(const BasicValue<S>& a, const BasicValue<S>& x);
template <typename S> BasicValue<S> transpose(const BasicValue<S>& a);
template <typename S> BasicValue<S> norm(const BasicValue<S>& a);
template <typename S> BasicValue<S> normalize(const BasicValue<S>& a);
template <typename S> BasicValue<S> row_norm(const BasicValue<S>& a);
template <typename S> BasicValue<S> row_normalize(const BasicValue<S>& a);
template <typename S> BasicValue<S> cols(const BasicValue<S>& a, Index first, Index count);
template <typename S> BasicValue<S> col(const BasicValue<S>& a, Index k);
template <typename S> BasicValue<S> hcat(std::span<const BasicValue<S>> parts);
template <typename S> BasicValue<S> gather_rows(const BasicValue<S>& a, std::span<const Index> rows);
template <typename S> BasicValue<S> select_per_row(const BasicValue<S>& a, std::span<const Index> cols);
template <typename S> BasicValue<S> detach(const BasicValue<S>& a);

template <typename S>
BasicValue<S> hcat(std::initializer_list<BasicValue<S>> parts) {
    return hcat(std::span<const BasicValue<S>>(parts.begin(), parts.size()));
}

template <typename S> BasicValue<S> operator+(const BasicValue<S>& a, const BasicValue<S>& b) { return add(a, b); }
template <typename S> BasicValue<S> operator-(const BasicValue<S>& a, const BasicValue<S>& b) { return sub(a, b); }
template <typename S> BasicValue<S> operator*(const BasicValue<S>& a, const BasicValue<S>& b) { return mul(a, b); }
template <typename S> BasicValue<S> operator/(const BasicValue<S>& a, const BasicValue<S>& b) { return div(a, b); }
template <typename S> BasicValue<S> operator-(const BasicValue<S>& a) { return neg(a); }
template <typename S> BasicValue<S> operator*(const BasicValue<S>& a, S s) { return scale(a, s); }
template <typename S> BasicValue<S> operator*(S s, const BasicValue<S>& a) { return scale(a, s); }
template <typename S> BasicValue<S> operator/(const BasicValue<S>& a, S s) { return scale(a, S(1) / s); }
template <typename S> BasicValue<S> operator+(const BasicValue<S>& a, S s) { return add_scalar(a, s); }
template <typename S> BasicValue<S> operator+(S s, const BasicValue<S>& a) { return add_scalar(a, s); }
template <typename S> BasicValue<S> operator-(const BasicValue<S>& a, S s) { return add_scalar(a, -s); }
template <typename S> BasicValue<S> operator-(S s, const BasicValue<S>& a) { return add_scalar(neg(a), s); }

// --- verification -----------------------------------------------------------

template <typename Scalar>
struct GradCheckReport {
    Scalar max_relative_error = 0;
    std::string worst_parameter;
    Index worst_index = -1;
    Scalar analytic = 0;
    Scalar numeric = 0;
};

template <typename Scalar>
using ScalarFn = std::function<BasicValue<Scalar>(BasicTape<Scalar>&)>;

// Compares backward() against central differences over every entry of the
// given parameters. Relative error uses max(|analytic|, |numeric|, 1e-8) as
// denominator; a NaN on either side reports infinity.
template <typename Scalar>
GradCheckReport<Scalar> grad_check_report(const ScalarFn<Scalar>& fn,
                                          std::span<BasicParameter<Scalar>* const> params,
                                          Scalar step);

template <typename Scalar>
Scalar grad_check(const ScalarFn<Scalar>& fn, std::span<BasicParameter<Scalar>* const> params,
                  Scalar step) {
    return grad_check_report(fn, params, step).max_relative_error;
}

// Single-input form: fn receives the point as a differentiable leaf.
template <typename Scalar>
Scalar grad_check(const std::function<BasicValue<Scalar>(BasicTape<Scalar>&, BasicValue<Scalar>)>& fn,
                  const MatrixT<Scalar>& point, Scalar step);

using Tape = BasicTape<Real>;
using Value = BasicValue<Real>;
using Parameter = BasicParameter<Real>;

extern template class BasicTape<float>;
extern template class BasicTape<double>;

} // namespace gspull::ad
