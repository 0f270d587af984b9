#include "tokendial/autograd.hpp"

#include "tokendial/error.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <unordered_set>

namespace tokendial::ag {

Mat& Node::grad_buffer() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    return grad;
}

Var Var::constant(Mat value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
}

Var Var::leaf(Mat value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
}

namespace {

using Backward = std::function<void(Node&)>;

Var make(Mat value, std::initializer_list<const Var*> parents, Backward fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    for (const Var* p : parents) any = any || p->requires_grad();
    if (any) {
        n->requires_grad = true;
        for (const Var* p : parents) n->parents.push_back(p->node());
        n->backward_fn = std::move(fn);
    }
    return Var(std::move(n));
}

Var make_many(Mat value, std::span<const Var> parents, Backward fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    bool any = false;
    for (const Var& p : parents) any = any || p.requires_grad();
    if (any) {
        n->requires_grad = true;
        for (const Var& p : parents) n->parents.push_back(p.node());
        n->backward_fn = std::move(fn);
    }
    return Var(std::move(n));
}

void check_same(const Var& a, const Var& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw Error(ErrorCode::dimension_mismatch,
                    std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()));
    }
}

inline bool wants(const Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

}  // namespace

void backward(const Var& root) {
    require(root.rows() == 1 && root.cols() == 1, ErrorCode::dimension_mismatch,
            "backward: root must be a scalar");
    if (!root.requires_grad()) return;

    // Iterative post-order DFS for a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root.node()->grad_buffer()(0, 0) += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
    }
    // Interior gradients are no longer needed; leaves keep theirs.
    for (Node* n : order) {
        if (n->backward_fn) n->grad.resize(0, 0);
    }
}

// --- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
    check_same(a, b, "add");
    return make(a.value() + b.value(), {&a, &b}, [](Node& self) {
        if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad;
        if (wants(self, 1)) self.parents[1]->grad_buffer() += self.grad;
    });
}

Var sub(const Var& a, const Var& b) {
    check_same(a, b, "sub");
    return make(a.value() - b.value(), {&a, &b}, [](Node& self) {
        if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad;
        if (wants(self, 1)) self.parents[1]->grad_buffer() -= self.grad;
    });
}

Var mul(const Var& a, const Var& b) {
    check_same(a, b, "mul");
    return make(a.value().cwiseProduct(b.value()), {&a, &b}, [](Node& self) {
        const Mat& av = self.parents[0]->value;
        const Mat& bv = self.parents[1]->value;
        if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad.cwiseProduct(bv);
        if (wants(self, 1)) self.parents[1]->grad_buffer() += self.grad.cwiseProduct(av);
    });
}

Var div(const Var& a, const Var& b) {
    check_same(a, b, "div");
    return make(a.value().cwiseQuotient(b.value()), {&a, &b}, [](Node& self) {
        const Mat& av = self.parents[0]->value;
        const Mat& bv = self.parents[1]->value;
        if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad.cwiseQuotient(bv);
        if (wants(self, 1)) {
            self.parents[1]->grad_buffer().array() -=
                self.grad.array() * av.array() / (bv.array() * bv.array());
        }
    });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double s) {
    return make(a.value() * s, {&a}, [s](Node& self) { self.parents[0]->grad_buffer() += self.grad * s; });
}

Var add_scalar(const Var& a, double s) {
    return make((a.value().array() + s).matrix(), {&a},
                [](Node& self) { self.parents[0]->grad_buffer() += self.grad; });
}

Var square(const Var& a) {
    return make(a.value().array().square().matrix(), {&a}, [](Node& self) {
        self.parents[0]->grad_buffer().array() += 2.0 * self.grad.array() * self.parents[0]->value.array();
    });
}

Var sqrt(const Var& a) {
    return make(a.value().array().sqrt().matrix(), {&a}, [](Node& self) {
        self.parents[0]->grad_buffer().array() += 0.5 * self.grad.array() / self.value.array();
    });
}

// Sigmoid approximation x * sigmoid(1.702 x); vectorizes through exp.
Var gelu(const Var& a) {
    Mat sig = (1.0 / (1.0 + (-1.702 * a.value().array()).exp())).matrix();
    Mat out = a.value().cwiseProduct(sig);
    auto sig_p = std::make_shared<Mat>(std::move(sig));
    return make(std::move(out), {&a}, [sig_p](Node& self) {
        const auto x = self.parents[0]->value.array();
        const auto s = sig_p->array();
        self.parents[0]->grad_buffer().array() += self.grad.array() * (s + 1.702 * x * s * (1.0 - s));
    });
}

Var silu(const Var& a) {
    Mat out = a.value().unaryExpr([](double x) { return x / (1.0 + std::exp(-x)); });
    return make(std::move(out), {&a}, [](Node& self) {
        const Mat& x = self.parents[0]->value;
        Mat d = x.unaryExpr([](double v) {
            double s = 1.0 / (1.0 + std::exp(-v));
            return s * (1.0 + v * (1.0 - s));
        });
        self.parents[0]->grad_buffer() += self.grad.cwiseProduct(d);
    });
}

// --- linear algebra --------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    require(a.cols() == b.rows(), ErrorCode::dimension_mismatch, "matmul: inner dimension mismatch");
    Mat out;
    out.noalias() = a.value() * b.value();
    return make(std::move(out), {&a, &b}, [](Node& self) {
        if (wants(self, 0)) self.parents[0]->grad_buffer().noalias() += self.grad * self.parents[1]->value.transpose();
        if (wants(self, 1)) self.parents[1]->grad_buffer().noalias() += self.parents[0]->value.transpose() * self.grad;
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    require(a.cols() == b.cols(), ErrorCode::dimension_mismatch, "matmul_nt: inner dimension mismatch");
    Mat out;
    out.noalias() = a.value() * b.value().transpose();
    return make(std::move(out), {&a, &b}, [](Node& self) {
        if (wants(self, 0)) self.parents[0]->grad_buffer().noalias() += self.grad * self.parents[1]->value;
        if (wants(self, 1)) self.parents[1]->grad_buffer().noalias() += self.grad.transpose() * self.parents[0]->value;
    });
}

Var transpose(const Var& a) {
    return make(a.value().transpose(), {&a},
                [](Node& self) { self.parents[0]->grad_buffer() += self.grad.transpose(); });
}

Var add_row(const Var& a, const Var& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), ErrorCode::dimension_mismatch, "add_row: bad row shape");
    Mat out = a.value().rowwise() + row.value().row(0);
    return make(std::move(out), {&a, &row}, [](Node& self) {
        if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad;
        if (wants(self, 1)) self.parents[1]->grad_buffer() += self.grad.colwise().sum();
    });
}

Var mul_col(const Var& a, const Var& col) {
    require(col.cols() == 1 && col.rows() == a.rows(), ErrorCode::dimension_mismatch, "mul_col: bad column shape");
    Mat out = a.value().array().colwise() * col.value().col(0).array();
    return make(std::move(out), {&a, &col}, [](Node& self) {
        const Mat& av = self.parents[0]->value;
        const Mat& cv = self.parents[1]->value;
        if (wants(self, 0)) self.parents[0]->grad_buffer().array() += self.grad.array().colwise() * cv.col(0).array();
        if (wants(self, 1)) self.parents[1]->grad_buffer() += self.grad.cwiseProduct(av).rowwise().sum();
    });
}

Var outer(const Var& col, const Var& row) {
    require(col.cols() == 1 && row.rows() == 1, ErrorCode::dimension_mismatch, "outer: expects column and row");
    return matmul(col, row);
}

Var apply_sparse(std::shared_ptr<const SpMat> op, const Var& x) {
    require(op->cols() == x.rows(), ErrorCode::dimension_mismatch, "apply_sparse: dimension mismatch");
    Mat out = (*op) * x.value();
    return make(std::move(out), {&x}, [op](Node& self) {
        self.parents[0]->grad_buffer() += op->transpose() * self.grad;
    });
}

// --- reductions ------------------------------------------------------------

Var sum(const Var& a) {
    return make(Mat::Constant(1, 1, a.value().sum()), {&a},
                [](Node& self) { self.parents[0]->grad_buffer().array() += self.grad(0, 0); });
}

Var mean(const Var& a) {
    const double n = static_cast<double>(a.size());
    return make(Mat::Constant(1, 1, a.value().sum() / n), {&a},
                [n](Node& self) { self.parents[0]->grad_buffer().array() += self.grad(0, 0) / n; });
}

Var sum_rows(const Var& a) {
    return make(a.value().colwise().sum(), {&a}, [](Node& self) {
        self.parents[0]->grad_buffer().rowwise() += self.grad.row(0);
    });
}

Var sum_cols(const Var& a) {
    return make(a.value().rowwise().sum(), {&a}, [](Node& self) {
        self.parents[0]->grad_buffer().colwise() += self.grad.col(0);
    });
}

Var mean_rows(const Var& a) { return scale(sum_rows(a), 1.0 / static_cast<double>(a.rows())); }

Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

// --- structure -------------------------------------------------------------

Var reshape(const Var& a, Index rows, Index cols) {
    require(rows * cols == a.size(), ErrorCode::dimension_mismatch, "reshape: element count mismatch");
    Mat out = Eigen::Map<const Mat>(a.value().data(), rows, cols);
    return make(std::move(out), {&a}, [](Node& self) {
        Mat& g = self.parents[0]->grad_buffer();
        Eigen::Map<Mat>(g.data(), self.grad.rows(), self.grad.cols()) += self.grad;
    });
}

Var slice_rows(const Var& a, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.rows(), ErrorCode::dimension_mismatch,
            "slice_rows: out of range");
    return make(a.value().middleRows(start, count), {&a}, [start, count](Node& self) {
        self.parents[0]->grad_buffer().middleRows(start, count) += self.grad;
    });
}

Var slice_cols(const Var& a, Index start, Index count) {
    require(start >= 0 && count >= 0 && start + count <= a.cols(), ErrorCode::dimension_mismatch,
            "slice_cols: out of range");
    return make(a.value().middleCols(start, count), {&a}, [start, count](Node& self) {
        self.parents[0]->grad_buffer().middleCols(start, count) += self.grad;
    });
}

Var concat_rows(std::span<const Var> parts) {
    require(!parts.empty(), ErrorCode::precondition, "concat_rows: empty");
    Index cols = parts[0].cols(), rows = 0;
    for (const Var& p : parts) {
        require(p.cols() == cols, ErrorCode::dimension_mismatch, "concat_rows: column mismatch");
        rows += p.rows();
    }
    Mat out(rows, cols);
    Index r = 0;
    for (const Var& p : parts) {
        out.middleRows(r, p.rows()) = p.value();
        r += p.rows();
    }
    return make_many(std::move(out), parts, [](Node& self) {
        Index r0 = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad) p->grad_buffer() += self.grad.middleRows(r0, p->value.rows());
            r0 += p->value.rows();
        }
    });
}

Var add_rows(const Var& a, Index start, const Var& b) {
    require(b.cols() == a.cols() && start >= 0 && start + b.rows() <= a.rows(), ErrorCode::dimension_mismatch,
            "add_rows: block does not fit");
    Mat out = a.value();
    out.middleRows(start, b.rows()) += b.value();
    return make(std::move(out), {&a, &b}, [start](Node& self) {
        if (wants(self, 0)) self.parents[0]->grad_buffer() += self.grad;
        if (wants(self, 1)) {
            Mat& g = self.parents[1]->grad_buffer();
            g += self.grad.middleRows(start, g.rows());
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    require(!parts.empty(), ErrorCode::precondition, "concat_cols: empty");
    Index rows = parts[0].rows(), cols = 0;
    for (const Var& p : parts) {
        require(p.rows() == rows, ErrorCode::dimension_mismatch, "concat_cols: row mismatch");
        cols += p.cols();
    }
    Mat out(rows, cols);
    Index c = 0;
    for (const Var& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    return make_many(std::move(out), parts, [](Node& self) {
        Index c0 = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad) p->grad_buffer() += self.grad.middleCols(c0, p->value.cols());
            c0 += p->value.cols();
        }
    });
}

Var gather(const Var& a, std::shared_ptr<const std::vector<Index>> idx, Index rows, Index cols) {
    require(static_cast<Index>(idx->size()) == rows * cols, ErrorCode::dimension_mismatch,
            "gather: index count mismatch");
    Mat out(rows, cols);
    const double* src = a.value().data();
    double* dst = out.data();
    const Index n = a.size();
    for (Index i = 0; i < rows * cols; ++i) {
        Index j = (*idx)[static_cast<std::size_t>(i)];
        require(j < n, ErrorCode::dimension_mismatch, "gather: index out of range");
        dst[i] = j < 0 ? 0.0 : src[j];
    }
    return make(std::move(out), {&a}, [idx](Node& self) {
        double* g = self.parents[0]->grad_buffer().data();
        const double* up = self.grad.data();
        for (std::size_t i = 0; i < idx->size(); ++i) {
            Index j = (*idx)[i];
            if (j >= 0) g[j] += up[i];
        }
    });
}

// --- neural ----------------------------------------------------------------

Var softmax_rows(const Var& a) {
    Mat out = a.value();
    for (Index r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        double m = row.maxCoeff();
        row = (row.array() - m).exp().matrix();
        row /= row.sum();
    }
    return make(std::move(out), {&a}, [](Node& self) {
        const Mat& y = self.value;
        Eigen::VectorXd s = (self.grad.cwiseProduct(y)).rowwise().sum();
        self.parents[0]->grad_buffer().array() += y.array() * (self.grad.colwise() - s).array();
    });
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Index n = x.rows(), d = x.cols();
    require(gamma.cols() == d && beta.cols() == d, ErrorCode::dimension_mismatch, "layer_norm: bad affine shape");
    Mat xhat(n, d);
    Eigen::VectorXd inv_std(n);
    for (Index r = 0; r < n; ++r) {
        double mu = x.value().row(r).mean();
        auto centered = x.value().row(r).array() - mu;
        double var = centered.square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (centered * inv_std(r)).matrix();
    }
    Mat out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
    auto xhat_p = std::make_shared<Mat>(std::move(xhat));
    return make(std::move(out), {&x, &gamma, &beta}, [xhat_p, inv_std](Node& self) {
        const Mat& xh = *xhat_p;
        const Mat& g = self.grad;
        if (wants(self, 1)) self.parents[1]->grad_buffer() += g.cwiseProduct(xh).colwise().sum();
        if (wants(self, 2)) self.parents[2]->grad_buffer() += g.colwise().sum();
        if (wants(self, 0)) {
            const Mat& gam = self.parents[1]->value;
            Mat gx = g.array().rowwise() * gam.row(0).array();
            const double d = static_cast<double>(gx.cols());
            Mat& dst = self.parents[0]->grad_buffer();
            for (Index r = 0; r < gx.rows(); ++r) {
                double m1 = gx.row(r).mean();
                double m2 = gx.row(r).dot(xh.row(r)) / d;
                dst.row(r).array() += inv_std(r) * (gx.row(r).array() - m1 - xh.row(r).array() * m2);
            }
        }
    });
}

// --- gradient routing ------------------------------------------------------

Var detach(const Var& a) { return Var::constant(a.value()); }

Var straight_through(const Var& grad_path, const Mat& value) {
    require(grad_path.rows() == value.rows() && grad_path.cols() == value.cols(), ErrorCode::dimension_mismatch,
            "straight_through: shape mismatch");
    return make(value, {&grad_path}, [](Node& self) { self.parents[0]->grad_buffer() += self.grad; });
}

Var cosine(const Var& a, const Var& b, double eps) {
    check_same(a, b, "cosine");
    const double ab = a.value().cwiseProduct(b.value()).sum();
    const double aa = a.value().squaredNorm();
    const double bb = b.value().squaredNorm();
    // sqrt(aa*bb) keeps cos(x, x) == 1 bit-exactly.
    const double denom = std::sqrt(std::max(aa * bb, eps * eps));
    const double c = ab / denom;
    return make(Mat::Constant(1, 1, c), {&a, &b}, [aa, bb, denom, c, eps](Node& self) {
        const double g = self.grad(0, 0);
        const Mat& av = self.parents[0]->value;
        const Mat& bv = self.parents[1]->value;
        if (wants(self, 0)) {
            self.parents[0]->grad_buffer() += g * (bv / denom - (c / std::max(aa, eps)) * av);
        }
        if (wants(self, 1)) {
            self.parents[1]->grad_buffer() += g * (av / denom - (c / std::max(bb, eps)) * bv);
        }
    });
}

}  // namespace tokendial::ag
