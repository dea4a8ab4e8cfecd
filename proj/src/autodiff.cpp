#include "gspt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_set>
#include <utility>

#include "gspt/errors.hpp"
#include "gspt/rng.hpp"

namespace gspt::ad {

std::size_t numel(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(const Shape& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

// ---------------------------------------------------------------------------
// Tensor handle

namespace {

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<double> data, bool requires_grad) {
    if (numel(shape) != data.size())
        throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_string(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return n;
}

const Node& checked(const std::shared_ptr<Node>& n) {
    if (!n) throw InvalidArgument("use of an undefined tensor");
    return *n;
}

} // namespace

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
    return Tensor(make_leaf(std::move(shape), std::move(data), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<double> data) {
    return Tensor(make_leaf(std::move(shape), std::move(data), true));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    const auto n = ad::numel(shape);
    return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(std::size_t axis) const {
    const auto& s = shape();
    if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_string(s));
    return s[axis];
}

std::size_t Tensor::numel() const { return checked(node_).value.size(); }

std::span<const double> Tensor::data() const { return checked(node_).value; }

std::span<double> Tensor::mutable_data() {
    checked(node_);
    if (!node_->is_leaf) throw InvalidArgument("mutable_data on a non-leaf tensor");
    return node_->value;
}

double Tensor::item() const {
    const auto& n = checked(node_);
    if (n.value.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(n.shape));
    return n.value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

std::span<const double> Tensor::grad() const { return checked(node_).grad; }

std::span<double> Tensor::mutable_grad() {
    checked(node_);
    if (node_->grad.size() != node_->value.size()) node_->grad.assign(node_->value.size(), 0.0);
    return node_->grad;
}

void Tensor::zero_grad() {
    checked(node_);
    node_->grad.assign(node_->value.size(), 0.0);
}

// ---------------------------------------------------------------------------
// Primitive helpers

namespace {

struct Result {
    std::shared_ptr<Node> node;
    Node& operator*() { return *node; }
    Node* operator->() { return node.get(); }
};

Result make_op(const char* op, Shape shape, std::initializer_list<const Tensor*> parents) {
    auto n = std::make_shared<Node>();
    n->op = op;
    n->is_leaf = false;
    n->value.assign(numel(shape), 0.0);
    n->shape = std::move(shape);
    for (const Tensor* p : parents) {
        n->parents.push_back(p->node_ptr());
        n->requires_grad = n->requires_grad || p->requires_grad();
    }
    return {n};
}

// Gradient buffer of a parent, or nullptr when that parent needs none.
double* grad_of(Node& self, std::size_t parent) {
    Node& p = *self.parents[parent];
    if (!p.requires_grad) return nullptr;
    return p.grad.data();
}

const std::vector<double>& value_of(const Node& self, std::size_t parent) { return self.parents[parent]->value; }

std::uint64_t hash_step(std::uint64_t h, std::uint64_t v) { return mix64(h ^ (v + 0x9e3779b97f4a7c15ULL)); }

// Shape check for elementwise ops; b is broadcast by index modulo its size.
void check_broadcast(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return;
    if (b.numel() == 1) return;
    const auto& as = a.shape();
    auto bs = b.shape();
    if (!bs.empty() && bs.size() == as.size() && bs[0] == 1) bs.erase(bs.begin());
    if (as.size() >= 2 && Shape(as.begin() + 1, as.end()) == bs) return;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_string(a.shape()) + " and " +
                     shape_string(b.shape()));
}

// (outer, length, inner) view of `shape` around `axis`.
struct AxisView {
    std::size_t outer = 1, length = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis, const char* op) {
    if (axis >= shape.size())
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " + shape_string(shape));
    AxisView v;
    for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
    v.length = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
    return v;
}

Shape without_axis(const Shape& shape, std::size_t axis) {
    Shape s = shape;
    s.erase(s.begin() + static_cast<std::ptrdiff_t>(axis));
    return s;
}

template <typename Fwd, typename Bwd>
Tensor unary(const char* op, const Tensor& a, Fwd fwd, Bwd bwd) {
    auto r = make_op(op, a.shape(), {&a});
    const auto& x = a.data();
    for (std::size_t i = 0; i < x.size(); ++i) r->value[i] = fwd(x[i]);
    if (r->requires_grad) {
        r->backward_fn = [bwd](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            const auto& x = value_of(self, 0);
            for (std::size_t i = 0; i < x.size(); ++i) ga[i] += self.grad[i] * bwd(x[i], self.value[i]);
        };
    }
    return Tensor(r.node);
}

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check_broadcast("add", a, b);
    auto r = make_op("add", a.shape(), {&a, &b});
    const auto& x = a.data();
    const auto& y = b.data();
    const std::size_t nb = y.size();
    for (std::size_t i = 0; i < x.size(); ++i) r->value[i] = x[i] + y[i % nb];
    if (r->requires_grad) {
        r->backward_fn = [](Node& self) {
            const std::size_t nb = self.parents[1]->value.size();
            if (double* ga = grad_of(self, 0))
                for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
            if (double* gb = grad_of(self, 1))
                for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i];
        };
    }
    return Tensor(r.node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_broadcast("sub", a, b);
    auto r = make_op("sub", a.shape(), {&a, &b});
    const auto& x = a.data();
    const auto& y = b.data();
    const std::size_t nb = y.size();
    for (std::size_t i = 0; i < x.size(); ++i) r->value[i] = x[i] - y[i % nb];
    if (r->requires_grad) {
        r->backward_fn = [](Node& self) {
            const std::size_t nb = self.parents[1]->value.size();
            if (double* ga = grad_of(self, 0))
                for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
            if (double* gb = grad_of(self, 1))
                for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] -= self.grad[i];
        };
    }
    return Tensor(r.node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_broadcast("mul", a, b);
    auto r = make_op("mul", a.shape(), {&a, &b});
    const auto& x = a.data();
    const auto& y = b.data();
    const std::size_t nb = y.size();
    for (std::size_t i = 0; i < x.size(); ++i) r->value[i] = x[i] * y[i % nb];
    if (r->requires_grad) {
        r->backward_fn = [](Node& self) {
            const auto& x = value_of(self, 0);
            const auto& y = value_of(self, 1);
            const std::size_t nb = y.size();
            if (double* ga = grad_of(self, 0))
                for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] * y[i % nb];
            if (double* gb = grad_of(self, 1))
                for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % nb] += self.grad[i] * x[i];
        };
    }
    return Tensor(r.node);
}

Tensor scale(const Tensor& a, double s) {
    return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor relu(const Tensor& a) {
    // NaN passes through so that non-finite inputs reach the loss.
    Tensor out = unary("relu", a, [](double x) { return x > 0.0 || std::isnan(x) ? x : 0.0; },
                       [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
    std::uint64_t h = 0x72656c75;
    for (double x : a.data()) h = hash_step(h, x > 0.0);
    out.node_ptr()->branch = h;
    return out;
}

Tensor exp(const Tensor& a) {
    return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor hinge(const Tensor& a, double margin) {
    Tensor out = unary("hinge", a, [margin](double x) { return x < margin ? margin - x : 0.0; },
                       [margin](double x, double) { return x < margin ? -1.0 : 0.0; });
    std::uint64_t h = 0x68696e6765;
    for (double x : a.data()) h = hash_step(h, x < margin);
    out.node_ptr()->branch = h;
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + shape_string(a.shape()) + " and " + shape_string(b.shape()));
    const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
    auto r = make_op("matmul", {n, m}, {&a, &b});
    const double* x = a.data().data();
    const double* y = b.data().data();
    double* z = r->value.data();
    for (std::size_t i = 0; i < n; ++i) {
        double* zi = z + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x[i * k + p];
            if (xv == 0.0) continue;
            const double* yp = y + p * m;
            for (std::size_t j = 0; j < m; ++j) zi[j] += xv * yp[j];
        }
    }
    if (r->requires_grad) {
        r->backward_fn = [n, k, m](Node& self) {
            const double* x = value_of(self, 0).data();
            const double* y = value_of(self, 1).data();
            const double* g = self.grad.data();
            if (double* ga = grad_of(self, 0)) {
                // dA = G * B^T
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double* yp = y + p * m;
                        const double* gi = g + i * m;
                        double s = 0.0;
                        for (std::size_t j = 0; j < m; ++j) s += gi[j] * yp[j];
                        ga[i * k + p] += s;
                    }
            }
            if (double* gb = grad_of(self, 1)) {
                // dB = A^T * G
                for (std::size_t i = 0; i < n; ++i) {
                    const double* gi = g + i * m;
                    for (std::size_t p = 0; p < k; ++p) {
                        const double xv = x[i * k + p];
                        if (xv == 0.0) continue;
                        double* gbp = gb + p * m;
                        for (std::size_t j = 0; j < m; ++j) gbp[j] += xv * gi[j];
                    }
                }
            }
        };
    }
    return Tensor(r.node);
}

Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank 2, got " + shape_string(a.shape()));
    const std::size_t n = a.dim(0), m = a.dim(1);
    auto r = make_op("transpose", {m, n}, {&a});
    const auto& x = a.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) r->value[j * n + i] = x[i * m + j];
    if (r->requires_grad) {
        r->backward_fn = [n, m](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) ga[i * m + j] += self.grad[j * n + i];
        };
    }
    return Tensor(r.node);
}

Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.numel())
        throw ShapeError("reshape: cannot view " + shape_string(a.shape()) + " as " + shape_string(shape));
    auto r = make_op("reshape", std::move(shape), {&a});
    std::copy(a.data().begin(), a.data().end(), r->value.begin());
    if (r->requires_grad) {
        r->backward_fn = [](Node& self) {
            if (double* ga = grad_of(self, 0))
                for (std::size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
        };
    }
    return Tensor(r.node);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
    auto r = make_op("sum", {}, {&a});
    double s = 0.0;
    for (double x : a.data()) s += x;
    r->value[0] = s;
    if (r->requires_grad) {
        r->backward_fn = [](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            const std::size_t n = self.parents[0]->value.size();
            for (std::size_t i = 0; i < n; ++i) ga[i] += self.grad[0];
        };
    }
    return Tensor(r.node);
}

Tensor mean(const Tensor& a) {
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum(const Tensor& a, std::size_t axis) {
    const auto v = axis_view(a.shape(), axis, "sum");
    auto r = make_op("sum_axis", without_axis(a.shape(), axis), {&a});
    const auto& x = a.data();
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t l = 0; l < v.length; ++l)
            for (std::size_t i = 0; i < v.inner; ++i)
                r->value[o * v.inner + i] += x[(o * v.length + l) * v.inner + i];
    if (r->requires_grad) {
        r->backward_fn = [v](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t l = 0; l < v.length; ++l)
                    for (std::size_t i = 0; i < v.inner; ++i)
                        ga[(o * v.length + l) * v.inner + i] += self.grad[o * v.inner + i];
        };
    }
    return Tensor(r.node);
}

Tensor mean(const Tensor& a, std::size_t axis) {
    const auto len = axis_view(a.shape(), axis, "mean").length;
    if (len == 0) throw ShapeError("mean: reducing an empty axis");
    return scale(sum(a, axis), 1.0 / static_cast<double>(len));
}

Tensor max(const Tensor& a, std::size_t axis) {
    const auto v = axis_view(a.shape(), axis, "max");
    if (v.length == 0) throw ShapeError("max: reducing an empty axis");
    auto r = make_op("max_axis", without_axis(a.shape(), axis), {&a});
    const auto& x = a.data();
    std::vector<std::size_t> arg(v.outer * v.inner, 0);
    std::uint64_t h = 0x6d6178;
    for (std::size_t o = 0; o < v.outer; ++o)
        for (std::size_t i = 0; i < v.inner; ++i) {
            std::size_t best = 0;
            double best_val = x[o * v.length * v.inner + i];
            for (std::size_t l = 1; l < v.length; ++l) {
                const double val = x[(o * v.length + l) * v.inner + i];
                if (val > best_val) {
                    best_val = val;
                    best = l;
                }
            }
            r->value[o * v.inner + i] = best_val;
            arg[o * v.inner + i] = best;
            h = hash_step(h, best);
        }
    r->branch = h;
    if (r->requires_grad) {
        r->backward_fn = [v, arg = std::move(arg)](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            for (std::size_t o = 0; o < v.outer; ++o)
                for (std::size_t i = 0; i < v.inner; ++i)
                    ga[(o * v.length + arg[o * v.inner + i]) * v.inner + i] += self.grad[o * v.inner + i];
        };
    }
    return Tensor(r.node);
}

// ---------------------------------------------------------------------------
// Indexing

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw ShapeError("concat: axis out of range for " + shape_string(ref));
    Shape out_shape = ref;
    out_shape[axis] = 0;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == ref[i];
        if (!ok) throw ShapeError("concat: incompatible shapes " + shape_string(ref) + " and " + shape_string(s));
        out_shape[axis] += s[axis];
    }

    auto n = std::make_shared<Node>();
    n->op = "concat";
    n->is_leaf = false;
    n->shape = out_shape;
    n->value.resize(numel(out_shape));
    for (const auto& p : parts) {
        n->parents.push_back(p.node_ptr());
        n->requires_grad = n->requires_grad || p.requires_grad();
    }

    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    std::vector<std::size_t> chunk(parts.size());
    std::size_t row = 0;
    for (std::size_t j = 0; j < parts.size(); ++j) {
        chunk[j] = parts[j].numel() / std::max<std::size_t>(outer, 1);
        row += chunk[j];
    }
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t offset = o * row;
        for (std::size_t j = 0; j < parts.size(); ++j) {
            const auto& src = parts[j].data();
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * chunk[j]), chunk[j],
                        n->value.begin() + static_cast<std::ptrdiff_t>(offset));
            offset += chunk[j];
        }
    }
    if (n->requires_grad) {
        n->backward_fn = [outer, row, chunk = std::move(chunk)](Node& self) {
            for (std::size_t o = 0; o < outer; ++o) {
                std::size_t offset = o * row;
                for (std::size_t j = 0; j < chunk.size(); ++j) {
                    if (double* gj = grad_of(self, j))
                        for (std::size_t c = 0; c < chunk[j]; ++c) gj[o * chunk[j] + c] += self.grad[offset + c];
                    offset += chunk[j];
                }
            }
        };
    }
    return Tensor(n);
}

Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis) {
    return concat(std::span<const Tensor>(parts.begin(), parts.size()), axis);
}

Tensor gather(const Tensor& a, std::span<const std::size_t> indices) {
    if (a.rank() < 1) throw ShapeError("gather: scalar input");
    const std::size_t rows = a.dim(0);
    const std::size_t width = rows ? a.numel() / rows : 0;
    Shape shape = a.shape();
    shape[0] = indices.size();
    auto r = make_op("gather", shape, {&a});
    const auto& x = a.data();
    std::uint64_t h = 0x676174686572;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows)
            throw InvalidArgument("gather: index " + std::to_string(indices[i]) + " out of range for " +
                                  shape_string(a.shape()));
        std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(indices[i] * width), width,
                    r->value.begin() + static_cast<std::ptrdiff_t>(i * width));
        h = hash_step(h, indices[i]);
    }
    r->branch = h;
    if (r->requires_grad) {
        r->backward_fn = [width, idx = std::vector<std::size_t>(indices.begin(), indices.end())](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            for (std::size_t i = 0; i < idx.size(); ++i)
                for (std::size_t c = 0; c < width; ++c) ga[idx[i] * width + c] += self.grad[i * width + c];
        };
    }
    return Tensor(r.node);
}

Tensor broadcast_rows(const Tensor& a, std::size_t rows) {
    std::size_t cols = 0;
    if (a.rank() == 1) cols = a.dim(0);
    else if (a.rank() == 2 && a.dim(0) == 1) cols = a.dim(1);
    else throw ShapeError("broadcast_rows: expected [C] or [1, C], got " + shape_string(a.shape()));
    auto r = make_op("broadcast_rows", {rows, cols}, {&a});
    const auto& x = a.data();
    for (std::size_t i = 0; i < rows; ++i) std::copy(x.begin(), x.end(), r->value.begin() + static_cast<std::ptrdiff_t>(i * cols));
    if (r->requires_grad) {
        r->backward_fn = [rows, cols](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < cols; ++c) ga[c] += self.grad[i * cols + c];
        };
    }
    return Tensor(r.node);
}

// ---------------------------------------------------------------------------
// Composite primitives

Tensor l2_normalize(const Tensor& a, double eps) {
    if (a.rank() < 1) throw ShapeError("l2_normalize: scalar input");
    const std::size_t cols = a.shape().back();
    const std::size_t rows = cols ? a.numel() / cols : 0;
    auto r = make_op("l2_normalize", a.shape(), {&a});
    const auto& x = a.data();
    std::vector<double> norms(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) s += x[i * cols + c] * x[i * cols + c];
        norms[i] = std::max(std::sqrt(s), eps);
        for (std::size_t c = 0; c < cols; ++c) r->value[i * cols + c] = x[i * cols + c] / norms[i];
    }
    if (r->requires_grad) {
        r->backward_fn = [rows, cols, norms = std::move(norms)](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            for (std::size_t i = 0; i < rows; ++i) {
                const double* y = self.value.data() + i * cols;
                const double* g = self.grad.data() + i * cols;
                double yg = 0.0;
                for (std::size_t c = 0; c < cols; ++c) yg += y[c] * g[c];
                for (std::size_t c = 0; c < cols; ++c) ga[i * cols + c] += (g[c] - y[c] * yg) / norms[i];
            }
        };
    }
    return Tensor(r.node);
}

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                             std::span<const std::uint8_t> excluded) {
    if (logits.rank() != 2) throw ShapeError("softmax_cross_entropy: expected rank 2, got " + shape_string(logits.shape()));
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (rows == 0) throw InvalidArgument("softmax_cross_entropy: no rows");
    if (targets.size() != rows)
        throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(rows) + " rows");
    if (!excluded.empty() && excluded.size() != rows * cols)
        throw ShapeError("softmax_cross_entropy: exclusion mask does not match " + shape_string(logits.shape()));
    auto is_excluded = [&](std::size_t i, std::size_t c) { return !excluded.empty() && excluded[i * cols + c]; };

    auto r = make_op("softmax_cross_entropy", {}, {&logits});
    const auto& x = logits.data();
    std::vector<double> probs(rows * cols, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        if (targets[i] >= cols || is_excluded(i, targets[i]))
            throw InvalidArgument("softmax_cross_entropy: invalid target in row " + std::to_string(i));
        double m = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c)
            if (!is_excluded(i, c)) m = std::max(m, x[i * cols + c]);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c)
            if (!is_excluded(i, c)) s += std::exp(x[i * cols + c] - m);
        const double lse = m + std::log(s);
        total += lse - x[i * cols + targets[i]];
        for (std::size_t c = 0; c < cols; ++c)
            if (!is_excluded(i, c)) probs[i * cols + c] = std::exp(x[i * cols + c] - lse);
    }
    r->value[0] = total / static_cast<double>(rows);
    if (r->requires_grad) {
        r->backward_fn = [rows, cols, probs = std::move(probs),
                          tg = std::vector<std::size_t>(targets.begin(), targets.end())](Node& self) {
            double* ga = grad_of(self, 0);
            if (!ga) return;
            const double g = self.grad[0] / static_cast<double>(rows);
            for (std::size_t i = 0; i < rows; ++i) {
                for (std::size_t c = 0; c < cols; ++c) ga[i * cols + c] += g * probs[i * cols + c];
                ga[i * cols + tg[i]] -= g;
            }
        };
    }
    return Tensor(r.node);
}

Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("pairwise_sq_dist: incompatible shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()));
    const std::size_t n = a.dim(0), m = b.dim(0), k = a.dim(1);
    auto r = make_op("pairwise_sq_dist", {n, m}, {&a, &b});
    const auto& x = a.data();
    const auto& y = b.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < k; ++c) {
                const double d = x[i * k + c] - y[j * k + c];
                s += d * d;
            }
            r->value[i * m + j] = s;
        }
    if (r->requires_grad) {
        r->backward_fn = [n, m, k](Node& self) {
            const auto& x = value_of(self, 0);
            const auto& y = value_of(self, 1);
            double* ga = grad_of(self, 0);
            double* gb = grad_of(self, 1);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < m; ++j) {
                    const double g = 2.0 * self.grad[i * m + j];
                    if (g == 0.0) continue;
                    for (std::size_t c = 0; c < k; ++c) {
                        const double d = g * (x[i * k + c] - y[j * k + c]);
                        if (ga) ga[i * k + c] += d;
                        if (gb) gb[j * k + c] -= d;
                    }
                }
        };
    }
    return Tensor(r.node);
}

Tensor sparse_matmul(std::shared_ptr<const SparseMatrix> m, const Tensor& x) {
    if (!m) throw InvalidArgument("sparse_matmul: null matrix");
    if (x.rank() != 2 || x.dim(0) != m->cols)
        throw ShapeError("sparse_matmul: matrix [" + std::to_string(m->rows) + ", " + std::to_string(m->cols) +
                         "] incompatible with " + shape_string(x.shape()));
    const std::size_t c = x.dim(1);
    auto r = make_op("sparse_matmul", {m->rows, c}, {&x});
    const auto& v = x.data();
    for (std::size_t i = 0; i < m->rows; ++i)
        for (std::size_t p = m->row_ptr[i]; p < m->row_ptr[i + 1]; ++p)
            for (std::size_t j = 0; j < c; ++j) r->value[i * c + j] += m->val[p] * v[m->col[p] * c + j];
    if (r->requires_grad) {
        r->backward_fn = [m, c](Node& self) {
            double* gx = grad_of(self, 0);
            if (!gx) return;
            for (std::size_t i = 0; i < m->rows; ++i)
                for (std::size_t p = m->row_ptr[i]; p < m->row_ptr[i + 1]; ++p)
                    for (std::size_t j = 0; j < c; ++j) gx[m->col[p] * c + j] += m->val[p] * self.grad[i * c + j];
        };
    }
    return Tensor(r.node);
}

// ---------------------------------------------------------------------------
// Reverse pass

namespace {

// Post-order over nodes reachable from root; `follow` filters which nodes are entered.
template <typename Pred>
std::vector<Node*> topo_order(Node* root, Pred follow) {
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    if (!follow(*root)) return order;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (follow(*p) && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    return order;
}

} // namespace

void backward(const Tensor& loss) {
    if (!loss.defined()) throw InvalidArgument("backward: undefined loss");
    if (loss.numel() != 1) throw InvalidArgument("backward: loss must be scalar, got shape " + shape_string(loss.shape()));
    Node* root = const_cast<Node*>(loss.node());
    if (!root->requires_grad) return;

    auto order = topo_order(root, [](const Node& n) { return n.requires_grad; });
    for (Node* n : order) {
        if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
        else if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
    }
    root->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

std::uint64_t branch_signature(const Tensor& root) {
    if (!root.defined()) return 0;
    auto order = topo_order(const_cast<Node*>(root.node()), [](const Node&) { return true; });
    std::uint64_t h = 0;
    for (const Node* n : order)
        if (n->branch) h = hash_step(h, n->branch);
    return h;
}

GradcheckResult gradcheck(const std::function<Tensor()>& f, std::span<Tensor> params, double eps) {
    if (!(eps > 0.0)) throw InvalidArgument("gradcheck: eps must be positive");
    for (auto& p : params) p.zero_grad();
    Tensor loss = f();
    if (!std::isfinite(loss.item())) throw NumericError("gradcheck: non-finite loss at the base point");
    const std::uint64_t base_sig = branch_signature(loss);
    backward(loss);

    GradcheckResult res;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto values = params[pi].mutable_data();
        const std::vector<double> analytic(params[pi].grad().begin(), params[pi].grad().end());
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double orig = values[i];
            values[i] = orig + eps;
            Tensor lp = f();
            const bool same_p = branch_signature(lp) == base_sig;
            values[i] = orig - eps;
            Tensor lm = f();
            const bool same_m = branch_signature(lm) == base_sig;
            values[i] = orig;
            if (!std::isfinite(lp.item()) || !std::isfinite(lm.item()))
                throw NumericError("gradcheck: non-finite evaluation at parameter " + std::to_string(pi) + "[" +
                                   std::to_string(i) + "]");
            if (!same_p || !same_m) {
                ++res.masked;
                continue;
            }
            const double numeric = (lp.item() - lm.item()) / (2.0 * eps);
            const double a = analytic[i];
            const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            ++res.checked;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = pi;
                res.worst_index = i;
            }
        }
    }
    return res;
}

} // namespace gspt::ad
