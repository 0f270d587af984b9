#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// A Var is a shared handle to a graph node. Nodes created from inputs that do
// not require gradients are plain constants with no recorded closure, so
// inference code pays no taping cost. All arithmetic is double precision.

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace tokendial::ag {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
    Mat value;
    Mat grad;  // allocated lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    Mat& grad_buffer();
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Mat value);
    static Var leaf(Mat value, bool requires_grad);
    static Var scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

    const Mat& value() const { return node_->value; }
    // Mutable access is intended for leaf parameters only (optimizer updates).
    Mat& mutable_value() { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    Mat& mutable_grad() { return node_->grad; }
    bool has_grad() const { return node_->grad.size() != 0; }
    void zero_grad() { node_->grad.resize(0, 0); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    Index size() const { return node_->value.size(); }
    double item() const { return node_->value(0, 0); }
    bool valid() const { return static_cast<bool>(node_); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Seeds d(root)/d(root) = 1 (root must be 1x1) and accumulates into every
// reachable node that requires gradients.
void backward(const Var& root);

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var square(const Var& a);
Var sqrt(const Var& a);
Var gelu(const Var& a);
Var silu(const Var& a);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator-(const Var& a) { return neg(a); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

// --- linear algebra --------------------------------------------------------
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var add_row(const Var& a, const Var& row);  // broadcast a 1xC row over every row of a
Var mul_col(const Var& a, const Var& col);  // scale row r of a by col(r)
Var outer(const Var& col, const Var& row);
Var apply_sparse(std::shared_ptr<const SpMat> op, const Var& x);  // op * x

// --- reductions ------------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // -> 1 x cols
Var sum_cols(const Var& a);  // -> rows x 1
Var mean_rows(const Var& a);
Var dot(const Var& a, const Var& b);

// --- structure -------------------------------------------------------------
Var reshape(const Var& a, Index rows, Index cols);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_rows(std::span<const Var> parts);
// out = a with rows [start, start + b.rows()) incremented by b.
Var add_rows(const Var& a, Index start, const Var& b);
Var concat_cols(std::span<const Var> parts);
// out.flat[i] = a.flat[idx[i]], or 0 where idx[i] < 0.
Var gather(const Var& a, std::shared_ptr<const std::vector<Index>> idx, Index rows, Index cols);

// --- neural ----------------------------------------------------------------
Var softmax_rows(const Var& a);
Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// --- gradient routing ------------------------------------------------------
Var detach(const Var& a);
// Forward value is `value` verbatim; gradient flows to `grad_path` as identity.
Var straight_through(const Var& grad_path, const Mat& value);

// Cosine similarity between two equally shaped tensors (flattened).
Var cosine(const Var& a, const Var& b, double eps = 1e-12);

}  // namespace tokendial::ag
