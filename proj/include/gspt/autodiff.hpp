#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gspt::ad {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;

/// Handle to a node of a reverse-mode graph. Copies share the node.
///
/// Leaves are either constants or parameters (`requires_grad`). Every primitive
/// returns a fresh node that remembers its parents; `backward()` walks the graph
/// rooted at a scalar loss and accumulates into the `grad()` of parameter leaves.
/// Leaf gradients are never reset implicitly: calling backward twice without
/// `zero_grad()` doubles them.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<double> data);
    static Tensor parameter(Shape shape, std::vector<double> data);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    std::size_t dim(std::size_t axis) const;
    std::size_t rank() const { return shape().size(); }
    std::size_t numel() const;

    std::span<const double> data() const;
    /// Mutable view of a leaf's values (optimizer updates, checkpoint loads).
    std::span<double> mutable_data();
    double item() const;
    double operator[](std::size_t i) const { return data()[i]; }

    bool requires_grad() const;
    /// Empty until the first backward pass reaches this tensor.
    std::span<const double> grad() const;
    std::span<double> mutable_grad();
    void zero_grad();

    const Node* node() const { return node_.get(); }
    std::shared_ptr<Node> node_ptr() const { return node_; }
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<Node> node_;
};

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    /// Fingerprint of the discrete choices made in forward (relu signs, argmax
    /// positions, gather indices). Zero for smooth primitives.
    std::uint64_t branch = 0;
};

// Elementwise. `b` may match `a`, be a single row broadcast over a's leading
// dimension, or hold one element.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// max(0, margin - a)
Tensor hinge(const Tensor& a, double margin = 1.0);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Reductions remove `axis` from the shape.
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
/// Max over `axis`; gradient goes to the first maximal entry.
Tensor max(const Tensor& a, std::size_t axis);

Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(std::initializer_list<Tensor> parts, std::size_t axis);
/// Rows of `a` (axis 0) picked by `indices`, repeats allowed.
Tensor gather(const Tensor& a, std::span<const std::size_t> indices);
/// Repeats a [C] or [1, C] tensor into [rows, C].
Tensor broadcast_rows(const Tensor& a, std::size_t rows);

/// Rows scaled to unit l2 norm.
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);

/// Mean over rows of -log softmax(logits[r])[targets[r]]. Entries with
/// `excluded[r * C + c]` set are left out of the softmax denominator; pass an
/// empty span to keep all. Uses a max shift per row.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                             std::span<const std::uint8_t> excluded = {});

/// [n, k] x [m, k] -> [n, m] of squared row distances.
Tensor pairwise_sq_dist(const Tensor& a, const Tensor& b);

/// Constant sparse matrix in CSR form.
struct SparseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::size_t> row_ptr;
    std::vector<std::size_t> col;
    std::vector<double> val;
};
/// [rows, cols] x [cols, C] -> [rows, C]
Tensor sparse_matmul(std::shared_ptr<const SparseMatrix> m, const Tensor& x);

/// Reverse pass from a scalar `loss`.
void backward(const Tensor& loss);

/// Combined branch fingerprint of every node reachable from `root`.
std::uint64_t branch_signature(const Tensor& root);

struct GradcheckResult {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    /// Coordinates skipped because the perturbation changed a discrete choice.
    std::size_t masked = 0;
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
};

/// Compares backward() against central differences of `f` for every coordinate
/// of `params`. A coordinate is masked when evaluating f at theta +- eps changes
/// the graph's branch signature. Relative error is |a - n| / max(1e-8, |a| + |n|).
/// `f` must rebuild the graph on each call. Parameter grads are zeroed.
GradcheckResult gradcheck(const std::function<Tensor()>& f, std::span<Tensor> params, double eps = 1e-5);

} // namespace gspt::ad
