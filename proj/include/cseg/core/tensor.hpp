#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cseg {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (const std::size_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    return s.empty() ? std::string("scalar") : os.str();
}

inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

template <typename S>
struct TensorNode {
    Shape shape;
    std::vector<S> value;
    std::vector<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool active = false;  // set during a backward pass if on a grad path
    std::vector<std::shared_ptr<TensorNode<S>>> parents;
    // Reads this->grad and accumulates into active parents.
    std::function<void(TensorNode<S>&)> backprop;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), S(0));
    }
};

/// Dense N-dimensional float tensor participating in a reverse-mode
/// differentiation graph. Copying a Tensor copies the handle, not the
/// buffer; ops produce fresh nodes that hold their parents alive.
template <typename S>
class Tensor {
public:
    using Node = TensorNode<S>;

    Tensor() = default;

    explicit Tensor(Shape shape, S fill = S(0)) : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        check_extents(node_->shape);
        node_->value.assign(shape_numel(node_->shape), fill);
    }

    Tensor(Shape shape, std::vector<S> values) : node_(std::make_shared<Node>()) {
        node_->shape = std::move(shape);
        check_extents(node_->shape);
        check(values.size() == shape_numel(node_->shape),
              "tensor: data length " + std::to_string(values.size()) +
                  " does not match shape " + shape_str(node_->shape));
        node_->value = std::move(values);
    }

    static Tensor leaf(Shape shape, std::vector<S> values, bool requires_grad) {
        Tensor t(std::move(shape), std::move(values));
        t.node_->requires_grad = requires_grad;
        return t;
    }

    bool valid() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->value.size(); }

    std::vector<S>& values() { return node_->value; }
    const std::vector<S>& values() const { return node_->value; }
    S* data() { return node_->value.data(); }
    const S* data() const { return node_->value.data(); }

    S scalar() const {
        check(numel() == 1, "tensor: scalar() on shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    bool has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }
    std::vector<S>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<S>& grad() const {
        check(has_grad(), "tensor: gradient not populated");
        return node_->grad;
    }
    void zero_grad() {
        if (node_) node_->grad.assign(node_->value.size(), S(0));
    }

    std::shared_ptr<Node> node() const { return node_; }

    /// Reverse-mode pass from a scalar-valued node. Visits every reachable
    /// node exactly once in reverse topological order; gradients of
    /// requires_grad leaves accumulate (call zero_grad between steps).
    void backward() const {
        check(node_ != nullptr, "backward: empty tensor");
        check(numel() == 1,
              "backward: loss must be scalar, got shape " + shape_str(shape()));
        std::vector<Node*> order;
        topo_sort(order);
        // A node is active if it needs a gradient itself or feeds one that
        // does; inactive branches (constants) never allocate grad buffers.
        for (Node* n : order) {
            bool a = n->requires_grad;
            for (const auto& p : n->parents) a = a || p->active;
            n->active = a;
        }
        node_->ensure_grad();
        node_->grad[0] += S(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backprop && n->active && n->grad.size() == n->value.size()) {
                n->backprop(*n);
            }
        }
        for (Node* n : order) n->active = false;
    }

private:
    static void check_extents(const Shape& s) {
        for (const std::size_t e : s)
            check(e >= 1, "tensor: zero extent in shape " + shape_str(s));
    }

    // Iterative DFS; `order` comes out parent-before-child.
    void topo_sort(std::vector<Node*>& order) const {
        std::unordered_set<Node*> seen;
        std::vector<std::pair<Node*, std::size_t>> stack;
        stack.emplace_back(node_.get(), 0);
        seen.insert(node_.get());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                Node* p = n->parents[next++].get();
                if (seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
    }

    std::shared_ptr<Node> node_;
};

/// Accumulate `v` into parent node `p` if it participates in this pass.
template <typename S>
inline void accumulate(const std::shared_ptr<TensorNode<S>>& p, std::size_t i, S v) {
    if (p->active) {
        p->ensure_grad();
        p->grad[i] += v;
    }
}

}  // namespace cseg
