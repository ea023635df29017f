#pragma once

#include "sqs/autodiff/array.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace sqs::ad {

// Handle to a node inside one Graph.
struct NodeRef {
    std::uint32_t id = UINT32_MAX;
    bool valid() const noexcept { return id != UINT32_MAX; }
    friend bool operator==(NodeRef, NodeRef) = default;
};

// Operation with a hand-written backward pass. forward() may cache state that
// the following backward() call consumes.
class CustomOp {
public:
    virtual ~CustomOp() = default;
    virtual std::string name() const = 0;
    virtual Shape output_shape(std::span<const Shape> inputs) const = 0;
    virtual void forward(std::span<const Array* const> inputs, Array& output) = 0;
    // Accumulates (+=) into grad_inputs[i]; entries are null for inputs that
    // need no gradient.
    virtual void backward(std::span<const Array* const> inputs, const Array& output, const Array& grad_output,
                          std::span<Array* const> grad_inputs) = 0;
};

enum class OpKind {
    Input,
    Parameter,
    Constant,
    MatMul,
    Add,
    Multiply,
    Scale,
    Sigmoid,
    Relu,
    Softmax,
    LayerNorm,
    Concat,
    Gather,
    GatherDynamic,
    L1,
    Sum,
    Mean,
    MeanAxis,
    Reshape,
    Slice,
    CrossEntropy,
    Custom,
};

const char* op_name(OpKind kind);

// Static computation graph over Arrays with reverse-mode differentiation.
//
// Nodes are appended in construction order, which is therefore a topological
// order. Shapes are checked when a node is added; values are computed by
// evaluate() and cached for backpropagate(). A Graph is single-writer.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    // Prefix applied to node labels while alive; nests.
    class Scope {
    public:
        Scope(Graph& g, const std::string& name);
        ~Scope();
        Scope(const Scope&) = delete;
        Scope& operator=(const Scope&) = delete;

    private:
        Graph& graph_;
        std::size_t previous_;
    };

    NodeRef input(const std::string& name, Shape shape, bool differentiable = false);
    NodeRef parameter(const std::string& name, Array init, bool trainable = true);
    NodeRef constant(Array value);

    // a[..., n, m] x b[..., m, p]; b may be rank 2 and shared over a's batch.
    // With transpose_b, b is [..., p, m].
    NodeRef matmul(NodeRef a, NodeRef b, bool transpose_b = false);
    // Elementwise; b's shape must equal a trailing suffix of a's shape.
    NodeRef add(NodeRef a, NodeRef b);
    NodeRef multiply(NodeRef a, NodeRef b);
    NodeRef scale(NodeRef a, double factor);
    NodeRef sigmoid(NodeRef a);
    NodeRef relu(NodeRef a);
    NodeRef softmax(NodeRef a);                         // last axis
    NodeRef layer_norm(NodeRef a, double eps = 1e-5);   // last axis, no affine
    NodeRef concat(const std::vector<NodeRef>& parts);  // last axis
    // Rows of a (leading axis); index -1 selects a zero row.
    NodeRef gather(NodeRef a, std::vector<std::int64_t> indices, Shape index_shape);
    NodeRef gather(NodeRef a, NodeRef indices);
    NodeRef l1(NodeRef a, NodeRef b);  // mean |a - b|
    NodeRef sum(NodeRef a);
    NodeRef mean(NodeRef a);
    NodeRef mean_axis(NodeRef a, std::size_t axis);
    NodeRef reshape(NodeRef a, Shape shape);
    NodeRef slice(NodeRef a, std::size_t begin, std::size_t end);  // last axis
    // Mean over rows of -log softmax(logits)[label]; labels hold class ids.
    NodeRef cross_entropy(NodeRef logits, NodeRef labels);
    NodeRef custom(std::shared_ptr<CustomOp> op, const std::vector<NodeRef>& inputs);

    // Binds named inputs and runs every node forward.
    void evaluate(const std::map<std::string, Array>& inputs = {});
    // Reverse pass from root. Gradients of every node upstream of root are
    // overwritten.
    void backpropagate(NodeRef root, const Array& seed);
    void backpropagate(NodeRef root);  // seed of ones

    const Array& value(NodeRef n) const;
    const Array& gradient(NodeRef n) const;
    const Shape& shape(NodeRef n) const;
    std::string describe(NodeRef n) const;

    NodeRef find(const std::string& name) const;
    bool has_parameter(const std::string& name) const;
    std::vector<std::string> parameter_names(bool trainable_only = false) const;
    const Array& parameter_value(const std::string& name) const;
    // Mutating a parameter invalidates the forward cache.
    Array& mutable_parameter(const std::string& name);
    const Array& parameter_gradient(const std::string& name) const;
    bool trainable(const std::string& name) const;
    void set_trainable(const std::string& name, bool trainable);

    // (name, value) for every parameter, in creation order.
    std::vector<std::pair<std::string, Array>> named_parameters() const;
    // Copies matching names; shapes must agree. Missing names are an error
    // unless allow_missing. Returns the number of parameters loaded.
    std::size_t load_parameters(const std::vector<std::pair<std::string, Array>>& values, bool allow_missing = false);

    std::size_t node_count() const noexcept { return nodes_.size(); }
    bool evaluated() const noexcept { return evaluated_; }

private:
    struct Node {
        OpKind kind = OpKind::Constant;
        std::vector<NodeRef> inputs;
        Shape shape;
        std::string label;
        Array value;
        Array grad;
        bool requires_grad = false;
        bool trainable = false;
        double scalar = 0.0;
        bool transpose_b = false;
        std::size_t axis = 0;
        std::size_t begin = 0;
        std::size_t end = 0;
        std::vector<std::int64_t> indices;
        std::shared_ptr<CustomOp> op;
        std::vector<double> aux;
    };

    NodeRef push(Node node);
    Node& at(NodeRef n);
    const Node& at(NodeRef n) const;
    std::string label_for(const std::string& what) const;
    [[noreturn]] void shape_fail(const std::string& op, const std::string& message) const;

    void forward_node(Node& node);
    void backward_node(Node& node);

    std::vector<Node> nodes_;
    std::map<std::string, NodeRef> named_;
    std::vector<NodeRef> parameters_;
    std::vector<std::string> scope_;
    bool evaluated_ = false;
};

} // namespace sqs::ad
