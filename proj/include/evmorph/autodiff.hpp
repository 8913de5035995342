#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation as a node holding its value and a closure that
// pushes the node's gradient to its parents. Nodes are appended in evaluation order,
// so walking them backwards is a valid topological order. One tape per forward pass;
// tapes are not shared between threads.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "evmorph/error.hpp"

namespace evmorph::ad {

using Matrix = Eigen::MatrixXd;

class Tape;

class Var {
public:
    Var() = default;

    const Matrix& value() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    std::size_t id() const { return id_; }
    Tape* tape() const { return tape_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    /// Value that never receives a gradient (inputs, masks, targets).
    Var constant(Matrix value) { return push(std::move(value), false, nullptr); }

    /// Differentiable leaf (parameters).
    Var leaf(Matrix value) { return push(std::move(value), true, nullptr); }

    /// Result of an operation. The node tracks gradients if any parent does.
    Var record(Matrix value, std::initializer_list<Var> parents, Backward backward) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || nodes_[p.id()].requires_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
    }

    Var record(Matrix value, const std::vector<Var>& parents, Backward backward) {
        bool needs = false;
        for (const auto& p : parents) needs = needs || nodes_[p.id()].requires_grad;
        return push(std::move(value), needs, needs ? std::move(backward) : nullptr);
    }

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient of the last backward() root with respect to `v`; zeros if untouched.
    Matrix grad(const Var& v) const {
        const auto& n = nodes_[v.id()];
        if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
        return n.grad;
    }

    const Matrix& grad_of(std::size_t id) const { return nodes_[id].grad; }

    void accumulate(std::size_t id, const Matrix& g) {
        auto& n = nodes_[id];
        if (!n.requires_grad) return;
        if (n.grad.size() == 0) n.grad = g;
        else n.grad += g;
    }

    /// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every node.
    void backward(const Var& root) {
        if (root.rows() != 1 || root.cols() != 1) throw ShapeError("backward() needs a scalar root");
        for (auto& n : nodes_) n.grad.resize(0, 0);
        nodes_[root.id()].grad = Matrix::Ones(1, 1);
        for (std::size_t i = root.id() + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (n.backward && n.grad.size() != 0) n.backward(*this, i);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Backward backward;
    };

    Var push(Matrix value, bool requires_grad, Backward backward) {
        nodes_.push_back(Node{std::move(value), Matrix(), requires_grad, std::move(backward)});
        return Var(this, nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return tape_->value(id_); }

inline void check_same_tape(const Var& a, const Var& b) {
    if (a.tape() != b.tape()) throw InvalidArgument("variables recorded on different tapes");
}

inline void check_shape(bool ok, const char* op) {
    if (!ok) throw ShapeError(std::string("shape mismatch in ") + op);
}

// ---- linear algebra -------------------------------------------------------

inline Var matmul(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_shape(a.cols() == b.rows(), "matmul");
    const auto ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() * b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
    });
}

/// a * b^T
inline Var matmul_nt(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_shape(a.cols() == b.cols(), "matmul_nt");
    const auto ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() * b.value().transpose(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
        if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
    });
}

inline Var add(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add");
    const auto ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() + b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        t.accumulate(ia, t.grad_of(self));
        t.accumulate(ib, t.grad_of(self));
    });
}

inline Var sub(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub");
    const auto ia = a.id(), ib = b.id();
    return a.tape()->record(a.value() - b.value(), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        t.accumulate(ia, t.grad_of(self));
        t.accumulate(ib, -t.grad_of(self));
    });
}

/// Element-wise product.
inline Var mul(const Var& a, const Var& b) {
    check_same_tape(a, b);
    check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul");
    const auto ia = a.id(), ib = b.id();
    return a.tape()->record(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
        if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
    });
}

/// a + row, with the 1 x c row broadcast over every row of a.
inline Var add_rowwise(const Var& a, const Var& row) {
    check_same_tape(a, row);
    check_shape(row.rows() == 1 && row.cols() == a.cols(), "add_rowwise");
    const auto ia = a.id(), ir = row.id();
    Matrix out = a.value();
    out.rowwise() += row.value().row(0);
    return a.tape()->record(std::move(out), {a, row}, [ia, ir](Tape& t, std::size_t self) {
        t.accumulate(ia, t.grad_of(self));
        if (t.requires_grad(ir)) t.accumulate(ir, t.grad_of(self).colwise().sum());
    });
}

inline Var scale(const Var& a, double s) {
    const auto ia = a.id();
    return a.tape()->record(a.value() * s, {a}, [ia, s](Tape& t, std::size_t self) { t.accumulate(ia, t.grad_of(self) * s); });
}

/// a * s for a 1x1 variable s.
inline Var mul_scalar(const Var& a, const Var& s) {
    check_same_tape(a, s);
    check_shape(s.rows() == 1 && s.cols() == 1, "mul_scalar");
    const auto ia = a.id(), is = s.id();
    return a.tape()->record(a.value() * s.value()(0, 0), {a, s}, [ia, is](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(is)(0, 0));
        if (t.requires_grad(is)) t.accumulate(is, Matrix::Constant(1, 1, g.cwiseProduct(t.value(ia)).sum()));
    });
}

/// a + c for a constant matrix c (masks); gradient passes straight through.
inline Var add_constant(const Var& a, const Matrix& c) {
    check_shape(a.rows() == c.rows() && a.cols() == c.cols(), "add_constant");
    const auto ia = a.id();
    return a.tape()->record(a.value() + c, {a}, [ia](Tape& t, std::size_t self) { t.accumulate(ia, t.grad_of(self)); });
}

// ---- element-wise nonlinearities -----------------------------------------

inline Var exp(const Var& a) {
    const auto ia = a.id();
    Matrix out = a.value().array().exp().matrix();
    return a.tape()->record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        t.accumulate(ia, t.grad_of(self).cwiseProduct(t.value(self)));
    });
}

inline Var relu(const Var& a) {
    const auto ia = a.id();
    return a.tape()->record(a.value().cwiseMax(0.0), {a}, [ia](Tape& t, std::size_t self) {
        t.accumulate(ia, (t.value(ia).array() > 0.0).select(t.grad_of(self), 0.0).matrix());
    });
}

/// Exact (erf) GELU.
inline Var gelu(const Var& a) {
    const auto ia = a.id();
    Matrix out = a.value().unaryExpr([](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); });
    return a.tape()->record(std::move(out), {a}, [ia](Tape& t, std::size_t self) {
        const Matrix d = t.value(ia).unaryExpr([](double x) {
            const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + x * pdf;
        });
        t.accumulate(ia, t.grad_of(self).cwiseProduct(d));
    });
}

// ---- row-wise normalizations -----------------------------------------------

inline Matrix softmax_rows_value(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double m = x.row(r).maxCoeff();
        y.row(r) = (x.row(r).array() - m).exp().matrix();
        y.row(r) /= y.row(r).sum();
    }
    return y;
}

inline Var softmax_rows(const Var& a) {
    const auto ia = a.id();
    return a.tape()->record(softmax_rows_value(a.value()), {a}, [ia](Tape& t, std::size_t self) {
        const Matrix& y = t.value(self);
        const Matrix& g = t.grad_of(self);
        const Eigen::VectorXd dot = g.cwiseProduct(y).rowwise().sum();
        Matrix dx = g;
        dx.colwise() -= dot;
        t.accumulate(ia, dx.cwiseProduct(y));
    });
}

/// Per-row layer normalization with 1 x c gain and bias.
inline Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5) {
    check_same_tape(x, gamma);
    check_same_tape(x, beta);
    check_shape(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.rows() == 1 && beta.cols() == x.cols(),
                "layer_norm_rows");
    const Eigen::Index n = x.rows(), c = x.cols();
    Matrix xhat(n, c);
    Eigen::VectorXd inv_std(n);
    for (Eigen::Index r = 0; r < n; ++r) {
        const double mu = x.value().row(r).mean();
        const double var = (x.value().row(r).array() - mu).square().mean();
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.value().row(r).array() - mu) * inv_std(r);
    }
    Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    const auto ix = x.id(), ig = gamma.id(), ib = beta.id();
    return x.tape()->record(std::move(out), {x, gamma, beta},
                            [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, std::size_t self) {
                                const Matrix& g = t.grad_of(self);
                                if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                                if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                                if (!t.requires_grad(ix)) return;
                                const Matrix gh = g.array().rowwise() * t.value(ig).row(0).array();
                                const double cols = static_cast<double>(gh.cols());
                                Matrix dx(gh.rows(), gh.cols());
                                for (Eigen::Index r = 0; r < gh.rows(); ++r) {
                                    const double m1 = gh.row(r).sum() / cols;
                                    const double m2 = gh.row(r).dot(xhat.row(r)) / cols;
                                    dx.row(r) = (gh.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std(r);
                                }
                                t.accumulate(ix, dx);
                            });
}

// ---- slicing and concatenation -----------------------------------------------

inline Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index n) {
    check_shape(start >= 0 && start + n <= a.cols(), "slice_cols");
    const auto ia = a.id();
    const auto rows = a.rows(), cols = a.cols();
    return a.tape()->record(a.value().middleCols(start, n), {a}, [ia, start, n, rows, cols](Tape& t, std::size_t self) {
        Matrix g = Matrix::Zero(rows, cols);
        g.middleCols(start, n) = t.grad_of(self);
        t.accumulate(ia, g);
    });
}

inline Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index n) {
    check_shape(start >= 0 && start + n <= a.rows(), "slice_rows");
    const auto ia = a.id();
    const auto rows = a.rows(), cols = a.cols();
    return a.tape()->record(a.value().middleRows(start, n), {a}, [ia, start, n, rows, cols](Tape& t, std::size_t self) {
        Matrix g = Matrix::Zero(rows, cols);
        g.middleRows(start, n) = t.grad_of(self);
        t.accumulate(ia, g);
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_cols of nothing");
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        check_shape(p.rows() == parts.front().rows(), "concat_cols");
        cols += p.cols();
    }
    Matrix out(parts.front().rows(), cols);
    std::vector<std::pair<std::size_t, Eigen::Index>> spans;
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        spans.emplace_back(p.id(), at);
        at += p.cols();
    }
    return parts.front().tape()->record(std::move(out), parts, [spans = std::move(spans)](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        for (const auto& [id, start] : spans) {
            if (t.requires_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw InvalidArgument("concat_rows of nothing");
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
        check_shape(p.cols() == parts.front().cols(), "concat_rows");
        rows += p.rows();
    }
    Matrix out(rows, parts.front().cols());
    std::vector<std::pair<std::size_t, Eigen::Index>> spans;
    Eigen::Index at = 0;
    for (const auto& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        spans.emplace_back(p.id(), at);
        at += p.rows();
    }
    return parts.front().tape()->record(std::move(out), parts, [spans = std::move(spans)](Tape& t, std::size_t self) {
        const Matrix& g = t.grad_of(self);
        for (const auto& [id, start] : spans) {
            if (t.requires_grad(id)) t.accumulate(id, g.middleRows(start, t.value(id).rows()));
        }
    });
}

// ---- reductions and losses ---------------------------------------------------

inline Var sum(const Var& a) {
    const auto ia = a.id();
    const auto rows = a.rows(), cols = a.cols();
    return a.tape()->record(Matrix::Constant(1, 1, a.value().sum()), {a}, [ia, rows, cols](Tape& t, std::size_t self) {
        t.accumulate(ia, Matrix::Constant(rows, cols, t.grad_of(self)(0, 0)));
    });
}

/// -log softmax(logits)[label] for a 1 x C row of logits.
inline Var cross_entropy(const Var& logits, int label) {
    check_shape(logits.rows() == 1 && label >= 0 && label < logits.cols(), "cross_entropy");
    const Matrix& z = logits.value();
    const double m = z.maxCoeff();
    const double lse = m + std::log((z.array() - m).exp().sum());
    const auto il = logits.id();
    return logits.tape()->record(Matrix::Constant(1, 1, lse - z(0, label)), {logits}, [il, label](Tape& t, std::size_t self) {
        Matrix g = softmax_rows_value(t.value(il));
        g(0, label) -= 1.0;
        t.accumulate(il, g * t.grad_of(self)(0, 0));
    });
}

// ---- named parameter tables ----------------------------------------------------

/// Ordered name -> matrix table. Insertion order is the canonical order used for
/// serialization and optimizer state.
class Parameters {
public:
    void add(const std::string& name, Matrix value) {
        if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
        index_[name] = names_.size();
        names_.push_back(name);
        values_.push_back(std::move(value));
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t index(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw InvalidArgument("unknown parameter " + name);
        return it->second;
    }

    const Matrix& operator[](const std::string& name) const { return values_[index(name)]; }
    Matrix& operator[](const std::string& name) { return values_[index(name)]; }
    const Matrix& at(std::size_t i) const { return values_[i]; }
    Matrix& at(std::size_t i) { return values_[i]; }
    const std::string& name(std::size_t i) const { return names_[i]; }
    std::size_t size() const { return names_.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
        return n;
    }

    /// Same names and shapes, all zeros.
    Parameters zeros_like() const {
        Parameters out;
        for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], Matrix::Zero(values_[i].rows(), values_[i].cols()));
        return out;
    }

    void remove(const std::string& name) {
        const std::size_t i = index(name);
        names_.erase(names_.begin() + static_cast<std::ptrdiff_t>(i));
        values_.erase(values_.begin() + static_cast<std::ptrdiff_t>(i));
        index_.clear();
        for (std::size_t j = 0; j < names_.size(); ++j) index_[names_[j]] = j;
    }

    friend bool operator==(const Parameters& a, const Parameters& b) {
        if (a.names_ != b.names_) return false;
        for (std::size_t i = 0; i < a.values_.size(); ++i) {
            if (a.values_[i].rows() != b.values_[i].rows() || a.values_[i].cols() != b.values_[i].cols()) return false;
            if (a.values_[i] != b.values_[i]) return false;
        }
        return true;
    }

private:
    std::vector<std::string> names_;
    std::vector<Matrix> values_;
    std::map<std::string, std::size_t> index_;
};

/// Lazily turns parameters into tape leaves (one leaf per parameter per tape) and
/// collects their gradients after backward().
class ParamBinder {
public:
    ParamBinder(Tape& tape, const Parameters& params) : tape_(tape), params_(params), leaves_(params.size()) {}

    Var operator()(const std::string& name) {
        const std::size_t i = params_.index(name);
        if (!leaves_[i]) leaves_[i] = tape_.leaf(params_.at(i));
        return *leaves_[i];
    }

    Tape& tape() { return tape_; }
    const Parameters& params() const { return params_; }

    /// Adds d(root)/d(param) into `grads` (same layout as the bound parameters).
    void accumulate_gradients(Parameters& grads) const {
        for (std::size_t i = 0; i < leaves_.size(); ++i) {
            if (!leaves_[i]) continue;
            const Matrix& g = tape_.grad_of(leaves_[i]->id());
            if (g.size() != 0) grads.at(i) += g;
        }
    }

private:
    Tape& tape_;
    const Parameters& params_;
    std::vector<std::optional<Var>> leaves_;
};

}  // namespace evmorph::ad
